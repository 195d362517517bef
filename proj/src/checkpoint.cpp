#include "mcrcnn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

#include "mcrcnn/errors.hpp"

namespace mcrcnn {
namespace {

constexpr char kMagic[4] = {'M', 'C', 'R', 'C'};
constexpr std::uint32_t kVersion = 1;

void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_i32(std::string& out, std::int32_t v) { put_u32(out, static_cast<std::uint32_t>(v)); }
void put_i64(std::string& out, std::int64_t v) { put_u64(out, static_cast<std::uint64_t>(v)); }
void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }
void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

void put_f32_block(std::string& out, const Tensor<float>& t) {
  for (std::int64_t i = 0; i < t.size(); ++i) put_f32(out, t[i]);
}

// Cursor over the file contents; every read is bounds checked so a short
// file surfaces as a diagnostic instead of undefined behavior.
class Reader {
 public:
  Reader(const std::string& bytes, const std::string& path) : bytes_(bytes), path_(path) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)[0]); }

  std::uint16_t u16() {
    const char* p = take(2);
    return static_cast<std::uint16_t>(static_cast<std::uint8_t>(p[0]) |
                                      (static_cast<std::uint8_t>(p[1]) << 8));
  }

  std::uint32_t u32() {
    const char* p = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(p[i])) << (8 * i);
    return v;
  }

  std::uint64_t u64() {
    const char* p = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(p[i])) << (8 * i);
    return v;
  }

  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }

  std::string str(std::size_t len) { return std::string(take(len), len); }

  void f32_block(Tensor<float>& t) {
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = f32();
  }

  bool exhausted() const { return pos_ == bytes_.size(); }

 private:
  const char* take(std::size_t n) {
    if (pos_ + n > bytes_.size()) {
      throw IoError("truncated checkpoint: " + path_);
    }
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  const std::string& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

void put_config(std::string& out, const ModelConfig& c) {
  put_i32(out, c.input_channels);
  put_i32(out, c.backbone_width);
  put_i32(out, c.bcnn_deep_layers);
  put_i32(out, c.scnn_deep_layers);
  put_i32(out, c.norm_interval);
  put_i32(out, c.kernel_size);
  put_u32(out, static_cast<std::uint32_t>(c.rpm_dilations.size()));
  for (int d : c.rpm_dilations) put_i32(out, d);
  put_i32(out, c.rpm_width);
  put_f64(out, c.rpm_dropout_rate);
  put_f64(out, c.bn_momentum);
  put_f64(out, c.norm_eps);
}

ModelConfig read_config(Reader& r) {
  ModelConfig c;
  c.input_channels = r.i32();
  c.backbone_width = r.i32();
  c.bcnn_deep_layers = r.i32();
  c.scnn_deep_layers = r.i32();
  c.norm_interval = r.i32();
  c.kernel_size = r.i32();
  const std::uint32_t n = r.u32();
  c.rpm_dilations.clear();
  for (std::uint32_t i = 0; i < n; ++i) c.rpm_dilations.push_back(r.i32());
  c.rpm_width = r.i32();
  c.rpm_dropout_rate = r.f64();
  c.bn_momentum = r.f64();
  c.norm_eps = r.f64();
  return c;
}

}  // namespace

void save_checkpoint(const std::string& path, McrcnnModel<float>& model,
                     const CheckpointMeta& meta, const AdamState<float>* optimizer) {
  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kVersion);
  put_config(out, model.config());

  put_u64(out, meta.seed);
  put_u32(out, meta.epoch);
  put_f64(out, meta.best_loss);
  put_u8(out, meta.phase);

  auto params = model.parameters();
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const Parameter<float>* p : params) {
    put_u16(out, static_cast<std::uint16_t>(p->name.size()));
    out.append(p->name);
    put_u8(out, p->trainable ? 1 : 0);
    const Shape s = p->value.shape();
    put_u32(out, static_cast<std::uint32_t>(s.n));
    put_u32(out, static_cast<std::uint32_t>(s.c));
    put_u32(out, static_cast<std::uint32_t>(s.h));
    put_u32(out, static_cast<std::uint32_t>(s.w));
    put_f32_block(out, p->value);
  }

  auto stats = model.running_stats();
  put_u32(out, static_cast<std::uint32_t>(stats.size()));
  for (const RunningStats<float>* rs : stats) {
    put_u8(out, rs->initialized ? 1 : 0);
    put_u32(out, static_cast<std::uint32_t>(rs->mean.size()));
    put_f32_block(out, rs->mean);
    put_f32_block(out, rs->var);
  }

  put_u8(out, optimizer != nullptr ? 1 : 0);
  if (optimizer != nullptr) {
    if (optimizer->m.size() != params.size()) {
      throw ConfigError("optimizer state does not match the model parameter list");
    }
    put_i64(out, optimizer->t);
    put_f64(out, optimizer->lr);
    put_f64(out, optimizer->beta1);
    put_f64(out, optimizer->beta2);
    put_f64(out, optimizer->eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
      put_f32_block(out, optimizer->m[i]);
      put_f32_block(out, optimizer->v[i]);
    }
  }

  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) {
    throw IoError("cannot open checkpoint for writing: " + path);
  }
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  file.flush();
  if (!file) {
    throw IoError("failed writing checkpoint: " + path);
  }
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) {
    throw IoError("cannot open checkpoint: " + path);
  }
  std::string bytes((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
  Reader r(bytes, path);

  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw IoError("not a checkpoint file (bad magic): " + path);
  }
  r.str(4);  // skip magic
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version) + ": " + path);
  }

  const ModelConfig cfg = read_config(r);
  cfg.validate();

  CheckpointMeta meta;
  meta.seed = r.u64();
  meta.epoch = r.u32();
  meta.best_loss = r.f64();
  meta.phase = r.u8();

  Rng init_rng(meta.seed);
  LoadedCheckpoint out{meta, McrcnnModel<float>(cfg, init_rng), false, {}};

  auto params = out.model.parameters();
  const std::uint32_t n_params = r.u32();
  if (n_params != params.size()) {
    throw IoError("checkpoint parameter count " + std::to_string(n_params) +
                  " does not match the configured model (" + std::to_string(params.size()) +
                  "): " + path);
  }
  for (Parameter<float>* p : params) {
    const std::string name = r.str(r.u16());
    if (name != p->name) {
      throw IoError("checkpoint record '" + name + "' does not match model layout ('" +
                    p->name + "'): " + path);
    }
    p->trainable = r.u8() != 0;
    const int sn = r.i32(), sc = r.i32(), sh = r.i32(), sw = r.i32();
    const Shape s(sn, sc, sh, sw);
    if (s != p->value.shape()) {
      throw IoError("checkpoint record '" + name + "' has shape " + s.str() + ", expected " +
                    p->value.shape().str() + ": " + path);
    }
    r.f32_block(p->value);
  }

  auto stats = out.model.running_stats();
  const std::uint32_t n_stats = r.u32();
  if (n_stats != stats.size()) {
    throw IoError("checkpoint running-statistics count mismatch: " + path);
  }
  for (RunningStats<float>* rs : stats) {
    rs->initialized = r.u8() != 0;
    const std::uint32_t channels = r.u32();
    if (static_cast<std::int64_t>(channels) != rs->mean.size()) {
      throw IoError("checkpoint running-statistics width mismatch: " + path);
    }
    r.f32_block(rs->mean);
    r.f32_block(rs->var);
  }

  out.has_optimizer = r.u8() != 0;
  if (out.has_optimizer) {
    out.optimizer = AdamState<float>(params);
    out.optimizer.t = r.i64();
    out.optimizer.lr = static_cast<float>(r.f64());
    out.optimizer.beta1 = static_cast<float>(r.f64());
    out.optimizer.beta2 = static_cast<float>(r.f64());
    out.optimizer.eps = static_cast<float>(r.f64());
    for (std::size_t i = 0; i < params.size(); ++i) {
      r.f32_block(out.optimizer.m[i]);
      r.f32_block(out.optimizer.v[i]);
    }
  }

  if (!r.exhausted()) {
    throw IoError("trailing bytes after checkpoint payload: " + path);
  }
  return out;
}

}  // namespace mcrcnn
