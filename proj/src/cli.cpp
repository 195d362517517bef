#include "mcrcnn/cli.hpp"

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mcrcnn/autodiff.hpp"
#include "mcrcnn/checkpoint.hpp"
#include "mcrcnn/dataset.hpp"
#include "mcrcnn/errors.hpp"
#include "mcrcnn/eval.hpp"
#include "mcrcnn/gradcheck.hpp"
#include "mcrcnn/image_io.hpp"
#include "mcrcnn/model.hpp"
#include "mcrcnn/train.hpp"

namespace fs = std::filesystem;

namespace mcrcnn {
namespace {

// ---------------------------------------------------------------------------
// Small utilities
// ---------------------------------------------------------------------------

int default_threads() {
  if (const char* env = std::getenv("MCRCNN_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1 || v > 4096) {
      throw ConfigError(std::string("MCRCNN_THREADS must be a positive integer, got '") + env +
                        "'");
    }
    return static_cast<int>(v);
  }
  return 1;
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

std::string trimmed(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

std::string fmt_double(double v) {
  std::ostringstream o;
  o << std::setprecision(15) << v;
  return o.str();
}

std::string join_ints(const std::vector<int>& v) {
  std::ostringstream o;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) o << ',';
    o << v[i];
  }
  return o.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  out << text;
  if (!out) throw IoError("cannot write file: " + path);
}

std::string frame_file(const char* stem, int index1) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s%06d.png", stem, index1);
  return buf;
}

// ---------------------------------------------------------------------------
// Config file: plain "key = value" lines; [section] headers group keys for
// readability but do not qualify them; '#' and ';' start comments.
// ---------------------------------------------------------------------------

struct ConfigLine {
  std::string key, value;
  int line = 0;
};

std::vector<ConfigLine> parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  std::vector<ConfigLine> out;
  std::string raw;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    const std::string line = trimmed(raw);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3) {
        throw ConfigError(path + ":" + std::to_string(lineno) + ": malformed section header");
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
    }
    ConfigLine e;
    e.key = trimmed(line.substr(0, eq));
    e.value = trimmed(line.substr(eq + 1));
    e.line = lineno;
    if (e.key.empty()) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": empty key");
    }
    out.push_back(std::move(e));
  }
  return out;
}

long long parse_ll(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(value, &pos);
    if (pos == value.size()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError("config key '" + key + "': cannot parse '" + value + "' as an integer");
}

int parse_i32(const std::string& key, const std::string& value) {
  const long long v = parse_ll(key, value);
  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) {
    throw ConfigError("config key '" + key + "': value " + value + " out of range");
  }
  return static_cast<int>(v);
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  if (!value.empty() && value[0] == '-') {
    throw ConfigError("config key '" + key + "': cannot parse '" + value +
                      "' as a non-negative integer");
  }
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(value, &pos);
    if (pos == value.size()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError("config key '" + key + "': cannot parse '" + value +
                    "' as a non-negative integer");
}

double parse_f64(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(value, &pos);
    if (pos == value.size()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError("config key '" + key + "': cannot parse '" + value + "' as a number");
}

bool parse_bool(const std::string& key, const std::string& value) {
  std::string v = value;
  std::transform(v.begin(), v.end(), v.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config key '" + key + "': cannot parse '" + value + "' as a boolean");
}

std::vector<int> parse_int_list(const std::string& key, const std::string& value) {
  std::vector<int> out;
  std::string item;
  std::istringstream in(value);
  while (std::getline(in, item, ',')) {
    const std::string t = trimmed(item);
    if (t.empty()) throw ConfigError("config key '" + key + "': empty list element");
    out.push_back(parse_i32(key, t));
  }
  if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
  return out;
}

// Registry of one subcommand's options. Every flag is mirrored as a config
// key (flag name without dashes, '-' replaced by '_'). After CLI parsing,
// merge_config_file() fills in values from the file for options not given on
// the command line — explicit flags always win. resolved_text() echoes every
// key so a run directory documents the exact configuration used.
class Opts {
 public:
  void attach(CLI::App& cmd) {
    cmd_ = &cmd;
    cmd.add_option("--config", config_path_,
                   "key = value config file ('default' keeps built-in defaults); "
                   "command-line flags override file values");
  }

  CLI::Option* add_int(const char* section, const char* flag, int& var, const char* help) {
    return push(
        section, flag, cmd_->add_option(flag, var, help)->capture_default_str(),
        [&var](const std::string& k, const std::string& v) { var = parse_i32(k, v); },
        [&var] { return std::to_string(var); });
  }

  CLI::Option* add_u64(const char* section, const char* flag, std::uint64_t& var,
                       const char* help) {
    return push(
        section, flag, cmd_->add_option(flag, var, help)->capture_default_str(),
        [&var](const std::string& k, const std::string& v) { var = parse_u64(k, v); },
        [&var] { return std::to_string(var); });
  }

  CLI::Option* add_f64(const char* section, const char* flag, double& var, const char* help) {
    return push(
        section, flag, cmd_->add_option(flag, var, help)->capture_default_str(),
        [&var](const std::string& k, const std::string& v) { var = parse_f64(k, v); },
        [&var] { return fmt_double(var); });
  }

  CLI::Option* add_str(const char* section, const char* flag, std::string& var,
                       const char* help) {
    return push(
        section, flag, cmd_->add_option(flag, var, help),
        [&var](const std::string&, const std::string& v) { var = v; },
        [&var] { return var; });
  }

  CLI::Option* add_bool(const char* section, const char* flag, bool& var, const char* help) {
    return push(
        section, flag, cmd_->add_flag(flag, var, help),
        [&var](const std::string& k, const std::string& v) { var = parse_bool(k, v); },
        [&var] { return var ? std::string("true") : std::string("false"); });
  }

  CLI::Option* add_ints(const char* section, const char* flag, std::vector<int>& var,
                        const char* help) {
    return push(
        section, flag, cmd_->add_option(flag, var, help)->delimiter(',')->capture_default_str(),
        [&var](const std::string& k, const std::string& v) { var = parse_int_list(k, v); },
        [&var] { return join_ints(var); });
  }

  void merge_config_file() const {
    if (config_path_.empty() || config_path_ == "default") return;
    for (const ConfigLine& e : parse_config_file(config_path_)) {
      const Entry* ent = nullptr;
      for (const Entry& c : entries_) {
        if (c.key == e.key) {
          ent = &c;
          break;
        }
      }
      if (!ent) {
        throw ConfigError(config_path_ + ":" + std::to_string(e.line) + ": unknown config key '" +
                          e.key + "'");
      }
      if (ent->opt->count() > 0) continue;  // explicit flag wins over the file
      ent->set(e.key, e.value);
    }
  }

  std::string resolved_text() const {
    std::ostringstream out;
    out << "# Resolved configuration; reusable with --config.\n";
    std::vector<std::string> order;
    for (const Entry& e : entries_) {
      if (std::find(order.begin(), order.end(), e.section) == order.end()) {
        order.push_back(e.section);
      }
    }
    for (const std::string& sec : order) {
      out << "[" << sec << "]\n";
      for (const Entry& e : entries_) {
        if (e.section == sec) out << e.key << " = " << e.get() << "\n";
      }
    }
    return out.str();
  }

 private:
  struct Entry {
    std::string section, key;
    CLI::Option* opt;
    std::function<void(const std::string&, const std::string&)> set;
    std::function<std::string()> get;
  };

  CLI::Option* push(const char* section, const char* flag, CLI::Option* opt,
                    std::function<void(const std::string&, const std::string&)> set,
                    std::function<std::string()> get) {
    std::string key = flag;
    while (!key.empty() && key.front() == '-') key.erase(key.begin());
    std::replace(key.begin(), key.end(), '-', '_');
    entries_.push_back(Entry{section, key, opt, std::move(set), std::move(get)});
    return opt;
  }

  CLI::App* cmd_ = nullptr;
  std::string config_path_;
  std::vector<Entry> entries_;
};

// ---------------------------------------------------------------------------
// Shared option blocks
// ---------------------------------------------------------------------------

struct ModelOpts {
  ModelConfig cfg;

  void add(Opts& o) {
    o.add_int("model", "--input-channels", cfg.input_channels, "Input image channels");
    o.add_int("model", "--width", cfg.backbone_width, "Feature maps per backbone conv layer");
    o.add_int("model", "--bcnn-deep", cfg.bcnn_deep_layers,
              "Deep conv layers in the background stage");
    o.add_int("model", "--scnn-deep", cfg.scnn_deep_layers,
              "Deep conv layers in the segmentation stage");
    o.add_int("model", "--norm-interval", cfg.norm_interval,
              "Normalize after every Nth deep layer");
    o.add_int("model", "--kernel", cfg.kernel_size, "Conv kernel size (odd)");
    o.add_ints("model", "--rpm-dilations", cfg.rpm_dilations,
               "Comma-separated dilation rates of the multiscale branches");
    o.add_int("model", "--rpm-width", cfg.rpm_width, "Feature maps per dilated branch");
    o.add_f64("model", "--rpm-dropout", cfg.rpm_dropout_rate,
              "Channel dropout rate ahead of the multiscale branches");
    o.add_f64("model", "--bn-momentum", cfg.bn_momentum,
              "Running-statistics momentum of batch normalization");
    o.add_f64("model", "--norm-eps", cfg.norm_eps, "Normalization variance epsilon");
  }
};

// Informational echo of a model configuration recovered from a checkpoint;
// commented out so the file stays loadable by subcommands that do not accept
// model flags.
std::string model_comment_block(const ModelConfig& m) {
  std::ostringstream o;
  o << "# model configuration from checkpoint (informational):\n"
    << "#   input_channels = " << m.input_channels << "\n"
    << "#   width = " << m.backbone_width << "\n"
    << "#   bcnn_deep = " << m.bcnn_deep_layers << "\n"
    << "#   scnn_deep = " << m.scnn_deep_layers << "\n"
    << "#   norm_interval = " << m.norm_interval << "\n"
    << "#   kernel = " << m.kernel_size << "\n"
    << "#   rpm_dilations = " << join_ints(m.rpm_dilations) << "\n"
    << "#   rpm_width = " << m.rpm_width << "\n"
    << "#   rpm_dropout = " << fmt_double(m.rpm_dropout_rate) << "\n"
    << "#   bn_momentum = " << fmt_double(m.bn_momentum) << "\n"
    << "#   norm_eps = " << fmt_double(m.norm_eps) << "\n";
  return o.str();
}

struct TrainOpts {
  TrainRunConfig cfg;

  void add(Opts& o, bool with_patches) {
    o.add_int("train", "--epochs", cfg.max_epochs, "Maximum training epochs");
    o.add_int("train", "--updates", cfg.updates_per_epoch, "Optimizer updates per epoch");
    if (with_patches) {
      o.add_int("train", "--batch", cfg.batch_size, "Patches per update");
      o.add_int("train", "--patch", cfg.patch_size, "Square patch edge in pixels");
    }
    o.add_f64("train", "--lr", cfg.learning_rate, "Adam learning rate");
    o.add_f64("train", "--plateau-factor", cfg.plateau_factor,
              "Learning-rate decay factor on plateau");
    o.add_int("train", "--plateau-patience", cfg.plateau_patience,
              "Epochs without improvement before the rate decays");
    o.add_f64("train", "--plateau-min-delta", cfg.plateau_min_delta,
              "Improvements smaller than this count as stalls");
    o.add_f64("train", "--plateau-floor", cfg.plateau_floor,
              "Lower bound for the decayed learning rate");
    o.add_int("train", "--early-stop", cfg.early_stop_patience,
              "Stalled epochs before training stops early");
    o.add_f64("train", "--split", cfg.split_fraction, "Fraction of frames in the training split");
    o.add_u64("train", "--seed", cfg.seed,
              "Root seed for weight init, splits, batches, and dropout");
    o.add_int("train", "--threads", cfg.threads,
              "Worker threads (default: MCRCNN_THREADS env or 1)");
  }
};

void echo_run_dir(const std::string& run_dir, const Opts& opts, std::uint64_t seed,
                  const std::string& extra = "") {
  fs::create_directories(run_dir);
  std::string text = opts.resolved_text();
  if (!extra.empty()) text += extra;
  write_text_file((fs::path(run_dir) / "resolved-config.cfg").string(), text);
  write_text_file((fs::path(run_dir) / "seed.txt").string(), std::to_string(seed) + "\n");
}

Tensor<float> match_channels(const Tensor<float>& img, int channels, const std::string& what) {
  if (img.shape().c == channels) return img;
  if (img.shape().c == 1 && channels == 3) {
    const Shape s = img.shape();
    Tensor<float> out(Shape(1, 3, s.h, s.w));
    const std::int64_t hw = s.h * s.w;
    for (int c = 0; c < 3; ++c) {
      out.array().segment(c * hw, hw) = img.array().segment(0, hw);
    }
    return out;
  }
  throw ConfigError(what + " has " + std::to_string(img.shape().c) +
                    " channels but the model expects " + std::to_string(channels));
}

void print_train_summary(const TrainResult& r) {
  std::printf("epochs run: %zu%s\n", r.log.size(), r.early_stopped ? " (stopped early)" : "");
  std::printf("best validation loss %.6g at epoch %d\n", r.best_val_loss, r.best_epoch);
  if (!r.best_checkpoint.empty()) {
    std::printf("best checkpoint: %s\n", r.best_checkpoint.c_str());
  }
}

std::optional<std::set<int>> read_frame_filter(const std::string& path) {
  if (path.empty()) return std::nullopt;
  std::ifstream in(path);
  if (!in) throw IoError("cannot open frame list: " + path);
  std::set<int> frames;
  std::string raw;
  while (std::getline(in, raw)) {
    const std::string line = trimmed(raw);
    if (line.empty() || line[0] == '#') continue;
    frames.insert(parse_i32("frame list entry", line));
  }
  if (frames.empty()) throw ConfigError("frame list is empty: " + path);
  return frames;
}

// The bias of a conv layer that feeds a normalization layer is absorbed by
// the mean subtraction; its true gradient is exactly zero, so it is excluded
// from finite-difference comparison and instead asserted to be zero.
bool norm_absorbed_bias(const std::string& name, int interval) {
  if (name.size() < 5 || name.compare(name.size() - 5, 5, ".bias") != 0) return false;
  const auto dp = name.find(".deep");
  if (dp == std::string::npos || dp + 7 > name.size()) return false;
  const int idx = std::stoi(name.substr(dp + 5, 2));
  return idx % interval == 0;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

struct SynthCmd {
  CLI::App* cmd = nullptr;
  Opts opts;
  SynthSpec spec;
  std::string out;
  std::uint64_t seed = 1;

  void setup(CLI::App& app) {
    cmd = app.add_subcommand("synth", "Generate a synthetic moving-object sequence with "
                                      "ground truth");
    opts.attach(*cmd);
    opts.add_str("paths", "--out", out, "Video directory to create (category/video layout)")
        ->required();
    opts.add_int("scene", "--width", spec.width, "Frame width in pixels");
    opts.add_int("scene", "--height", spec.height, "Frame height in pixels");
    opts.add_int("scene", "--frames", spec.frames, "Number of frames");
    opts.add_str("scene", "--object", spec.object, "Moving object shape: square or circle");
    opts.add_int("scene", "--object-size", spec.object_size, "Object edge/diameter in pixels");
    opts.add_int("scene", "--start-x", spec.start_x, "Object start column");
    opts.add_int("scene", "--start-y", spec.start_y, "Object start row");
    opts.add_int("scene", "--dx", spec.dx, "Horizontal motion per frame");
    opts.add_int("scene", "--dy", spec.dy, "Vertical motion per frame");
    opts.add_f64("scene", "--noise", spec.noise, "Uniform sensor noise amplitude on 8-bit values");
    opts.add_bool("scene", "--shadow", spec.shadow, "Cast a half-brightness shadow");
    opts.add_u64("scene", "--seed", seed, "Seed for dither and noise");
  }

  int run() {
    opts.merge_config_file();
    Rng rng(seed);
    synth_sequence(spec, rng, out);
    write_text_file((fs::path(out) / "synth-config.cfg").string(), opts.resolved_text());
    std::printf("wrote %d frames (%dx%d) to %s\n", spec.frames, spec.width, spec.height,
                out.c_str());
    return kExitOk;
  }
};

struct MakeBackgroundCmd {
  CLI::App* cmd = nullptr;
  Opts opts;
  std::string video, out;
  int frames = 0;

  void setup(CLI::App& app) {
    cmd = app.add_subcommand("make-background",
                             "Compute the per-pixel temporal median background of a sequence");
    opts.attach(*cmd);
    opts.add_str("paths", "--video", video, "Video directory (with input/ frames)")->required();
    opts.add_str("paths", "--out", out, "Output PNG path")->required();
    opts.add_int("run", "--frames", frames, "Initial frames in the median (0 = all)");
  }

  int run() {
    opts.merge_config_file();
    const FrameSequence seq = FrameSequence::load(video);
    const int m = frames == 0 ? seq.frames() : frames;
    if (m < 1 || m > seq.frames()) {
      throw ConfigError("--frames must lie in [1, " + std::to_string(seq.frames()) + "], got " +
                        std::to_string(frames));
    }
    const Tensor<float> bg = median_background(seq, m);
    const fs::path parent = fs::path(out).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
    write_png(out, tensor_to_image(bg));
    std::printf("median of %d frames -> %s\n", m, out.c_str());
    return kExitOk;
  }
};

struct TrainBcnnCmd {
  CLI::App* cmd = nullptr;
  Opts opts;
  ModelOpts model;
  TrainOpts train;
  std::string video, background, run_dir;

  void setup(CLI::App& app, int threads_default) {
    cmd = app.add_subcommand("train-bcnn",
                             "Phase 1: train the background stage to predict the residual "
                             "against the median background");
    opts.attach(*cmd);
    opts.add_str("paths", "--video", video, "Video directory (with input/ frames)")->required();
    opts.add_str("paths", "--background", background, "Median background PNG")->required();
    opts.add_str("paths", "--run-dir", run_dir,
                 "Run directory for config, log, and checkpoints")
        ->required();
    model.add(opts);
    train.cfg.threads = threads_default;
    train.add(opts, /*with_patches=*/true);
  }

  int run() {
    opts.merge_config_file();
    model.cfg.validate();
    train.cfg.phase = TrainPhase::kBcnn;
    train.cfg.checkpoint_dir = run_dir;
    train.cfg.validate();

    const FrameSequence seq = FrameSequence::load(video);
    Tensor<float> bg = match_channels(image_to_tensor(read_image(background)),
                                      model.cfg.input_channels, "background image");
    if (bg.shape().h != seq.height() || bg.shape().w != seq.width()) {
      throw ConfigError("background resolution " + std::to_string(bg.shape().w) + "x" +
                        std::to_string(bg.shape().h) + " does not match the sequence " +
                        std::to_string(seq.width()) + "x" + std::to_string(seq.height()));
    }

    echo_run_dir(run_dir, opts, train.cfg.seed);
    Rng init_rng = Rng(train.cfg.seed).fork(0);
    McrcnnModel<float> net(model.cfg, init_rng);
    const TrainResult result = train_bcnn(net, seq, bg, train.cfg);
    print_train_summary(result);
    return kExitOk;
  }
};

struct TrainScnnCmd {
  CLI::App* cmd = nullptr;
  Opts opts;
  TrainOpts train;
  std::string video, init, run_dir;

  void setup(CLI::App& app, int threads_default) {
    cmd = app.add_subcommand("train-scnn",
                             "Phase 2: freeze the background stage and train the multiscale "
                             "and segmentation stages on ground truth");
    opts.attach(*cmd);
    opts.add_str("paths", "--video", video,
                 "Video directory (with input/ frames and groundtruth/)")
        ->required();
    opts.add_str("paths", "--init", init, "Phase-1 checkpoint to start from")->required();
    opts.add_str("paths", "--run-dir", run_dir,
                 "Run directory for config, log, and checkpoints")
        ->required();
    train.cfg.threads = threads_default;
    train.add(opts, /*with_patches=*/false);
  }

  int run() {
    opts.merge_config_file();
    train.cfg.phase = TrainPhase::kScnn;
    train.cfg.batch_size = 1;
    train.cfg.patch_size = 1;
    train.cfg.checkpoint_dir = run_dir;
    train.cfg.validate();

    const FrameSequence seq = FrameSequence::load(video);
    LoadedCheckpoint start = load_checkpoint(init);
    echo_run_dir(run_dir, opts, train.cfg.seed,
                 "[paths]\n# init checkpoint phase: " + std::to_string(int(start.meta.phase)) +
                     "\n" + model_comment_block(start.model.config()));
    const TrainResult result = train_scnn(start.model, seq, train.cfg);
    print_train_summary(result);
    return kExitOk;
  }
};

struct InferCmd {
  CLI::App* cmd = nullptr;
  Opts opts;
  std::string video, checkpoint, out;
  double threshold = 0.7;
  int threads = 1;

  void setup(CLI::App& app, int threads_default) {
    cmd = app.add_subcommand("infer",
                             "Write per-frame probability maps and thresholded binary masks");
    opts.attach(*cmd);
    opts.add_str("paths", "--video", video, "Video directory (with input/ frames)")->required();
    opts.add_str("paths", "--checkpoint", checkpoint, "Trained checkpoint")->required();
    opts.add_str("paths", "--out", out, "Output directory")->required();
    opts.add_f64("run", "--threshold", threshold,
                 "Foreground threshold applied to the float probability map");
    threads = threads_default;
    opts.add_int("run", "--threads", threads,
                 "Worker threads (default: MCRCNN_THREADS env or 1)");
  }

  int run() {
    opts.merge_config_file();
    if (!(threshold >= 0.0 && threshold <= 1.0)) {
      throw ConfigError("--threshold must lie in [0,1], got " + fmt_double(threshold));
    }
    if (threads < 1) throw ConfigError("--threads must be at least 1");
    const FrameSequence seq = FrameSequence::load(video);
    LoadedCheckpoint start = load_checkpoint(checkpoint);
    fs::create_directories(out);
    write_text_file((fs::path(out) / "resolved-config.cfg").string(),
                    opts.resolved_text() + model_comment_block(start.model.config()));
    for (int i = 0; i < seq.frames(); ++i) {
      const Tensor<float> prob = start.model.infer_prob(seq.frame(i), threads);
      const Tensor<float> bin = binarize(prob, threshold);
      write_png((fs::path(out) / frame_file("prob", i + 1)).string(), tensor_to_image(prob));
      write_png((fs::path(out) / frame_file("bin", i + 1)).string(), tensor_to_image(bin));
    }
    std::printf("wrote %d probability/binary map pairs to %s\n", seq.frames(), out.c_str());
    return kExitOk;
  }
};

struct EvaluateCmd {
  CLI::App* cmd = nullptr;
  Opts opts;
  std::string video, dataset, probs, out, report_file, frames_file;
  double threshold = -1.0;  // sentinel: keep per-category defaults

  void setup(CLI::App& app) {
    cmd = app.add_subcommand("evaluate",
                             "Score stored probability maps against ground truth and report "
                             "precision, recall, F-measure, and PWC");
    opts.attach(*cmd);
    opts.add_str("paths", "--video", video, "Single video directory to score");
    opts.add_str("paths", "--dataset", dataset,
                 "Dataset root (category/video tree); scores every video");
    opts.add_str("paths", "--probs", probs,
                 "Probability-map directory (single video) or root mirroring the dataset tree")
        ->required();
    opts.add_str("paths", "--out", out, "CSV report path (omit to skip the file)");
    opts.add_str("paths", "--report-file", report_file, "Text report path (omit to skip)");
    opts.add_str("paths", "--frames-file", frames_file,
                 "File of zero-based frame indices to score (e.g. a held-out split); "
                 "one per line");
    opts.add_f64("run", "--threshold", threshold,
                 "Foreground threshold for every video; -1 keeps per-category defaults");
  }

  int run() {
    opts.merge_config_file();
    if (threshold != -1.0 && !(threshold >= 0.0 && threshold <= 1.0)) {
      throw ConfigError("--threshold must lie in [0,1] (or -1 for per-category defaults), got " +
                        fmt_double(threshold));
    }
    if (video.empty() == dataset.empty()) {
      throw ConfigError("give exactly one of --video or --dataset");
    }

    std::vector<std::pair<std::string, std::string>> jobs;  // video root, prob dir
    if (!video.empty()) {
      jobs.emplace_back(video, probs);
    } else {
      if (!fs::is_directory(dataset)) throw IoError("missing dataset directory: " + dataset);
      std::vector<fs::path> cats;
      for (const auto& e : fs::directory_iterator(dataset)) {
        if (e.is_directory()) cats.push_back(e.path());
      }
      std::sort(cats.begin(), cats.end());
      for (const fs::path& cat : cats) {
        std::vector<fs::path> vids;
        for (const auto& e : fs::directory_iterator(cat)) {
          if (e.is_directory() && fs::is_directory(e.path() / "input")) vids.push_back(e.path());
        }
        std::sort(vids.begin(), vids.end());
        for (const fs::path& v : vids) {
          jobs.emplace_back(v.string(),
                            (fs::path(probs) / cat.filename() / v.filename()).string());
        }
      }
      if (jobs.empty()) throw IoError("no video directories under " + dataset);
    }

    const std::optional<std::set<int>> filter = read_frame_filter(frames_file);
    std::vector<VideoResult> results;
    for (const auto& [root, prob_dir] : jobs) {
      const FrameSequence seq = FrameSequence::load(root);
      const double thr = threshold >= 0.0 ? threshold : threshold_for_category(seq.category());
      results.push_back(evaluate_video(seq, prob_dir, thr, filter));
    }
    const Report report = aggregate_report(std::move(results));
    if (!out.empty()) {
      const fs::path parent = fs::path(out).parent_path();
      if (!parent.empty()) fs::create_directories(parent);
      write_text_file(out, report_csv(report));
    }
    const std::string text = report_text(report);
    if (!report_file.empty()) write_text_file(report_file, text);
    std::fputs(text.c_str(), stdout);
    return kExitOk;
  }
};

struct ParamCountCmd {
  CLI::App* cmd = nullptr;
  Opts opts;
  ModelOpts model;

  void setup(CLI::App& app) {
    cmd = app.add_subcommand("param-count",
                             "Print the per-layer trainable parameter table and totals");
    opts.attach(*cmd);
    model.add(opts);
  }

  int run() {
    opts.merge_config_file();
    model.cfg.validate();
    Rng rng(0);
    McrcnnModel<float> net(model.cfg, rng);
    const ParamCountTable table = count_parameters(net);
    std::printf("%-24s%12s\n", "layer", "parameters");
    for (const auto& row : table.rows) {
      std::printf("%-24s%12lld\n", row.layer.c_str(), static_cast<long long>(row.count));
    }
    std::printf("%s\n", std::string(36, '-').c_str());
    std::printf("%-24s%12lld\n", "bcnn subtotal", static_cast<long long>(table.bcnn));
    std::printf("%-24s%12lld\n", "rpm subtotal", static_cast<long long>(table.rpm));
    std::printf("%-24s%12lld\n", "scnn subtotal", static_cast<long long>(table.scnn));
    std::printf("%-24s%12lld\n", "total", static_cast<long long>(table.grand));
    return kExitOk;
  }
};

struct GradcheckCmd {
  CLI::App* cmd = nullptr;
  Opts opts;
  std::uint64_t seed = 7;
  double tolerance = 1e-3;
  int max_coords = 10;

  void setup(CLI::App& app) {
    cmd = app.add_subcommand("gradcheck",
                             "Compare analytic gradients of both training losses against "
                             "central finite differences on a small double-precision model");
    opts.attach(*cmd);
    opts.add_u64("run", "--seed", seed, "Seed for weights and probe tensors");
    opts.add_f64("run", "--tolerance", tolerance, "Maximum allowed relative error");
    opts.add_int("run", "--max-coords", max_coords,
                 "Coordinates sampled per parameter tensor");
  }

  int run() {
    opts.merge_config_file();
    if (!(tolerance > 0.0)) throw ConfigError("--tolerance must be positive");
    if (max_coords < 1) throw ConfigError("--max-coords must be at least 1");

    ModelConfig mc;
    mc.backbone_width = 4;
    mc.bcnn_deep_layers = 3;
    mc.scnn_deep_layers = 3;
    mc.rpm_dilations = {2, 4};
    mc.rpm_width = 2;

    Rng rng(seed);
    McrcnnModel<double> net(mc, rng);
    auto random_tensor = [&rng](const Shape& s, double lo, double hi) {
      Tensor<double> t(s);
      for (std::int64_t i = 0; i < t.size(); ++i) {
        t[i] = lo + (hi - lo) * rng.uniform();
      }
      return t;
    };

    const Tensor<double> f = random_tensor(Shape(2, 3, 8, 8), 0.0, 1.0);
    const Tensor<double> bg_target = random_tensor(f.shape(), 0.0, 1.0);
    const Tensor<double> residual = random_tensor(Shape(1, 3, 8, 8), -0.5, 0.5);
    const Tensor<double> frame = random_tensor(Shape(1, 3, 8, 8), 0.0, 1.0);
    Tensor<double> seg_target(Shape(1, 1, 8, 8));
    Tensor<double> seg_mask(seg_target.shape(), 1.0);
    for (std::int64_t i = 0; i < seg_target.size(); ++i) {
      seg_target[i] = rng.uniform() > 0.5 ? 1.0 : 0.0;
      if (i % 7 == 0) seg_mask[i] = 0.0;
    }
    const std::uint64_t drop_seed = rng.next_u64();

    double max_err = 0.0;
    std::string worst = "(none)";
    int tensors = 0;
    auto track = [&](const std::string& name, const GradcheckResult& res) {
      if (!res.finite) {
        throw NumericError("gradient check hit non-finite values at parameter " + name + ": " +
                           res.message);
      }
      if (res.max_rel_err > max_err) {
        max_err = res.max_rel_err;
        worst = name;
      }
      ++tensors;
    };

    // First-phase loss: residual regression against a background target.
    auto bg_loss = [&]() {
      Tape<double> tape(Mode::kTrain);
      auto fn = tape.leaf(f);
      auto b = tape.sub(fn, net.bcnn(tape, fn));
      return tape.value(tape.background_loss(b, bg_target))[0];
    };
    net.zero_grad();
    {
      Tape<double> tape(Mode::kTrain);
      auto fn = tape.leaf(f);
      auto b = tape.sub(fn, net.bcnn(tape, fn));
      tape.backward(tape.background_loss(b, bg_target));
    }
    for (Parameter<double>* p : net.bcnn_parameters()) {
      if (norm_absorbed_bias(p->name, mc.norm_interval)) {
        if (p->grad.array().abs().maxCoeff() >= 1e-12) {
          std::printf("max rel err inf\n");
          std::fprintf(stderr,
                       "error: check: parameter %s should have an exactly zero gradient\n",
                       p->name.c_str());
          return kExitCheckFailed;
        }
        continue;
      }
      track(p->name, finite_diff_gradcheck(bg_loss, p->value, p->grad, 1e-5, max_coords));
    }

    // Second-phase loss: masked cross-entropy through the multiscale and
    // segmentation stages; the dropout stream replays identically per call.
    auto seg_loss = [&]() {
      Rng drop(drop_seed);
      Tape<double> tape(Mode::kTrain);
      auto guidance = net.rpm(tape, tape.leaf(residual), drop);
      auto prob = net.scnn(tape, tape.leaf(frame), guidance);
      return tape.value(tape.segmentation_loss(prob, seg_target, seg_mask))[0];
    };
    net.zero_grad();
    {
      Rng drop(drop_seed);
      Tape<double> tape(Mode::kTrain);
      auto guidance = net.rpm(tape, tape.leaf(residual), drop);
      auto prob = net.scnn(tape, tape.leaf(frame), guidance);
      tape.backward(tape.segmentation_loss(prob, seg_target, seg_mask));
    }
    for (Parameter<double>* p : net.theta2_parameters()) {
      if (norm_absorbed_bias(p->name, mc.norm_interval)) {
        if (p->grad.array().abs().maxCoeff() >= 1e-12) {
          std::printf("max rel err inf\n");
          std::fprintf(stderr,
                       "error: check: parameter %s should have an exactly zero gradient\n",
                       p->name.c_str());
          return kExitCheckFailed;
        }
        continue;
      }
      track(p->name, finite_diff_gradcheck(seg_loss, p->value, p->grad, 1e-5, max_coords));
    }

    std::printf("checked %d parameter tensors, both training losses\n", tensors);
    std::printf("max rel err %.3e (parameter %s)\n", max_err, worst.c_str());
    if (max_err >= tolerance) {
      std::fprintf(stderr, "error: check: max rel err %.3e >= tolerance %.3e\n", max_err,
                   tolerance);
      return kExitCheckFailed;
    }
    std::printf("gradient check passed (tolerance %.3e)\n", tolerance);
    return kExitOk;
  }
};

int dispatch(int argc, const char* const* argv) {
  CLI::App app{"Multiscale cascade residual network for scene-change detection: synthetic "
               "data, two-phase training, inference, and evaluation."};
  app.require_subcommand(1);
  app.footer("Exit codes:\n"
             "  0  success\n"
             "  1  unexpected internal failure\n"
             "  2  usage error (unknown subcommand or malformed flags)\n"
             "  3  invalid configuration value\n"
             "  4  missing or unreadable file\n"
             "  5  numeric failure during computation\n"
             "  6  gradient check exceeded its tolerance");

  const int threads_default = default_threads();
  SynthCmd synth;
  MakeBackgroundCmd make_background;
  TrainBcnnCmd train_bcnn_cmd;
  TrainScnnCmd train_scnn_cmd;
  InferCmd infer;
  EvaluateCmd evaluate;
  ParamCountCmd param_count;
  GradcheckCmd gradcheck;
  synth.setup(app);
  make_background.setup(app);
  train_bcnn_cmd.setup(app, threads_default);
  train_scnn_cmd.setup(app, threads_default);
  infer.setup(app, threads_default);
  evaluate.setup(app);
  param_count.setup(app);
  gradcheck.setup(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    const CLI::App* target = &app;
    for (auto subs = target->get_subcommands(); !subs.empty();
         subs = target->get_subcommands()) {
      target = subs.back();
    }
    std::cout << target->help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << one_line(e.what()) << "\n";
    return kExitUsage;
  }

  if (synth.cmd->parsed()) return synth.run();
  if (make_background.cmd->parsed()) return make_background.run();
  if (train_bcnn_cmd.cmd->parsed()) return train_bcnn_cmd.run();
  if (train_scnn_cmd.cmd->parsed()) return train_scnn_cmd.run();
  if (infer.cmd->parsed()) return infer.run();
  if (evaluate.cmd->parsed()) return evaluate.run();
  if (param_count.cmd->parsed()) return param_count.run();
  if (gradcheck.cmd->parsed()) return gradcheck.run();
  std::cerr << "error: usage: no subcommand given\n";
  return kExitUsage;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  try {
    return dispatch(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "error: config: " << one_line(e.what()) << "\n";
    return kExitConfig;
  } catch (const ShapeError& e) {
    std::cerr << "error: config: " << one_line(e.what()) << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    std::cerr << "error: io: " << one_line(e.what()) << "\n";
    return kExitIo;
  } catch (const NumericError& e) {
    std::cerr << "error: numeric: " << one_line(e.what()) << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << one_line(e.what()) << "\n";
    return kExitInternal;
  }
}

}  // namespace mcrcnn
