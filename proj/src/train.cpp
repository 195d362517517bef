#include "mcrcnn/train.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <tuple>

#include "mcrcnn/autodiff.hpp"
#include "mcrcnn/checkpoint.hpp"
#include "mcrcnn/errors.hpp"
#include "mcrcnn/loss.hpp"
#include "mcrcnn/optim.hpp"

namespace fs = std::filesystem;

namespace mcrcnn {
namespace {

const char* phase_name(TrainPhase p) { return p == TrainPhase::kBcnn ? "bcnn" : "scnn"; }

double now_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

std::string fmt(double v) {
  std::ostringstream out;
  out.precision(9);
  out << v;
  return out.str();
}

// Shared per-epoch bookkeeping: log line, checkpoint files, best tracking,
// plateau schedule, early stopping.
class EpochDriver {
 public:
  EpochDriver(McrcnnModel<float>& model, const TrainRunConfig& cfg, AdamState<float>* opt)
      : model_(model), cfg_(cfg), opt_(opt) {
    sched_.factor = static_cast<float>(cfg.plateau_factor);
    sched_.patience = cfg.plateau_patience;
    sched_.min_delta = static_cast<float>(cfg.plateau_min_delta);
    sched_.floor_lr = static_cast<float>(cfg.plateau_floor);
    if (!cfg_.checkpoint_dir.empty()) {
      fs::create_directories(cfg_.checkpoint_dir);
      log_path_ = (fs::path(cfg_.checkpoint_dir) / "run-log.csv").string();
      std::ofstream log(log_path_, std::ios::trunc);
      log << "epoch,train_loss,val_loss,learning_rate,seconds\n";
      if (!log) throw IoError("cannot write run log: " + log_path_);
    }
  }

  // Returns false when training should stop.
  bool finish_epoch(TrainResult& result, int epoch, double train_loss, double val_loss,
                    double epoch_seconds) {
    EpochRecord rec{epoch, train_loss, val_loss, static_cast<double>(opt_->lr), epoch_seconds};
    result.log.push_back(rec);
    if (!log_path_.empty()) {
      std::ofstream log(log_path_, std::ios::app);
      log << rec.epoch << ',' << fmt(rec.train_loss) << ',' << fmt(rec.val_loss) << ','
          << fmt(rec.learning_rate) << ',' << fmt(rec.seconds) << '\n';
    }

    CheckpointMeta meta;
    meta.seed = cfg_.seed;
    meta.epoch = static_cast<std::uint32_t>(epoch);
    meta.phase = cfg_.phase == TrainPhase::kBcnn ? 1 : 2;

    const bool improved = result.log.size() == 1 || val_loss < result.best_val_loss;
    if (improved) {
      result.best_val_loss = val_loss;
      result.best_epoch = epoch;
    }
    meta.best_loss = result.best_val_loss;

    if (!cfg_.checkpoint_dir.empty()) {
      std::ostringstream name;
      name << "phase-" << phase_name(cfg_.phase) << "-epoch-" << epoch << ".ckpt";
      save_checkpoint((fs::path(cfg_.checkpoint_dir) / name.str()).string(), model_, meta);
      if (improved) {
        result.best_checkpoint = (fs::path(cfg_.checkpoint_dir) / "best.ckpt").string();
        save_checkpoint(result.best_checkpoint, model_, meta);
      }
    }

    // Meaningful progress resets the early-stop clock; the schedule keeps
    // its own independent counter.
    if (result.log.size() == 1 || val_loss < early_best_ - cfg_.plateau_min_delta) {
      early_best_ = val_loss;
      stalled_ = 0;
    } else {
      stalled_ += 1;
    }
    opt_->lr = plateau_update(sched_, static_cast<float>(val_loss), opt_->lr);
    if (stalled_ >= cfg_.early_stop_patience) {
      result.early_stopped = true;
      return false;
    }
    return true;
  }

  void record_abort(int epoch, int update, std::uint64_t batch_seed) const {
    if (!cfg_.checkpoint_dir.empty()) {
      std::ofstream out(fs::path(cfg_.checkpoint_dir) / "abort.txt", std::ios::trunc);
      out << "non-finite loss at epoch " << epoch << " update " << update << " batch seed "
          << batch_seed << "\n";
    }
  }

 private:
  McrcnnModel<float>& model_;
  const TrainRunConfig& cfg_;
  AdamState<float>* opt_;
  PlateauSchedule<float> sched_;
  std::string log_path_;
  double early_best_ = 0.0;
  int stalled_ = 0;
};

void write_frame_lists(const TrainRunConfig& cfg, const TrainResult& result) {
  if (cfg.checkpoint_dir.empty()) return;
  fs::create_directories(cfg.checkpoint_dir);
  std::ofstream out(fs::path(cfg.checkpoint_dir) / "val_frames.txt", std::ios::trunc);
  for (int i : result.val_frames) out << i << "\n";
  std::ofstream tr(fs::path(cfg.checkpoint_dir) / "train_frames.txt", std::ios::trunc);
  for (int i : result.train_frames) tr << i << "\n";
}

std::vector<int> all_frames(const FrameSequence& seq) {
  std::vector<int> out(static_cast<std::size_t>(seq.frames()));
  for (int i = 0; i < seq.frames(); ++i) out[static_cast<std::size_t>(i)] = i;
  return out;
}

}  // namespace

void TrainRunConfig::validate() const {
  if (max_epochs < 1 || updates_per_epoch < 1 || batch_size < 1 || patch_size < 1) {
    throw ConfigError("training counts must be positive");
  }
  if (phase == TrainPhase::kScnn && batch_size != 1) {
    throw ConfigError("the segmentation phase trains on one full image per update; "
                      "batch size must be 1, got " +
                      std::to_string(batch_size));
  }
  if (learning_rate < 0.0 || plateau_factor <= 0.0 || plateau_factor >= 1.0) {
    throw ConfigError("learning rate must be non-negative and the plateau factor inside (0,1)");
  }
  if (plateau_patience < 1 || early_stop_patience < 1) {
    throw ConfigError("patience settings must be positive");
  }
  if (plateau_min_delta < 0.0 || plateau_floor < 0.0) {
    throw ConfigError("plateau thresholds must be non-negative");
  }
  if (split_fraction <= 0.0 || split_fraction > 1.0) {
    throw ConfigError("split fraction must lie in (0,1]");
  }
  if (threads < 1) {
    throw ConfigError("thread count must be at least 1");
  }
}

std::string run_log_csv(const std::vector<EpochRecord>& log) {
  std::ostringstream out;
  out << "epoch,train_loss,val_loss,learning_rate,seconds\n";
  for (const auto& r : log) {
    out << r.epoch << ',' << fmt(r.train_loss) << ',' << fmt(r.val_loss) << ','
        << fmt(r.learning_rate) << ',' << fmt(r.seconds) << '\n';
  }
  return out.str();
}

TrainResult train_bcnn(McrcnnModel<float>& model, const FrameSequence& seq,
                       const Tensor<float>& background, const TrainRunConfig& cfg) {
  cfg.validate();
  if (cfg.phase != TrainPhase::kBcnn) {
    throw ConfigError("train_bcnn called with a non-background phase configuration");
  }

  Rng root(cfg.seed);
  Rng split_rng = root.fork(1);
  Rng batch_rng = root.fork(2);
  Rng val_rng = root.fork(3);

  TrainResult result;
  std::tie(result.train_frames, result.val_frames) =
      split_train_val(all_frames(seq), cfg.split_fraction, split_rng);
  if (result.val_frames.empty()) {
    throw ConfigError("the held-out validation split is empty; add frames or lower the "
                      "training fraction");
  }
  write_frame_lists(cfg, result);

  // One fixed validation batch keeps the plateau signal comparable across
  // epochs.
  const PatchBatch val_batch = extract_training_patches(
      seq, background, result.val_frames, cfg.batch_size, cfg.patch_size, val_rng);

  auto params = model.bcnn_parameters();
  AdamState<float> opt(params, static_cast<float>(cfg.learning_rate));
  EpochDriver driver(model, cfg, &opt);

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const double t0 = now_seconds();
    double loss_sum = 0.0;
    for (int u = 0; u < cfg.updates_per_epoch; ++u) {
      const std::uint64_t batch_seed = batch_rng.next_u64();
      Rng brng(batch_seed);
      const PatchBatch batch = extract_training_patches(
          seq, background, result.train_frames, cfg.batch_size, cfg.patch_size, brng);

      Tape<float> tape(Mode::kTrain, cfg.threads);
      auto fn = tape.leaf(batch.input);
      auto b = tape.sub(fn, model.bcnn(tape, fn));
      auto loss = tape.background_loss(b, batch.target);
      const double value = tape.value(loss)[0];
      if (!std::isfinite(value)) {
        driver.record_abort(epoch, u, batch_seed);
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) +
                           " update " + std::to_string(u) + " (batch seed " +
                           std::to_string(batch_seed) + ")");
      }
      model.zero_grad();
      tape.backward(loss);
      adam_step(params, opt);
      loss_sum += value;
    }

    double val_loss;
    {
      Tape<float> tape(Mode::kInfer, cfg.threads);
      auto fn = tape.leaf(val_batch.input);
      auto b = tape.sub(fn, model.bcnn(tape, fn));
      val_loss = tape.value(tape.background_loss(b, val_batch.target))[0];
    }

    if (!driver.finish_epoch(result, epoch, loss_sum / cfg.updates_per_epoch, val_loss,
                             now_seconds() - t0)) {
      break;
    }
  }
  return result;
}

TrainResult train_scnn(McrcnnModel<float>& model, const FrameSequence& seq,
                       const TrainRunConfig& cfg) {
  cfg.validate();
  if (cfg.phase != TrainPhase::kScnn) {
    throw ConfigError("train_scnn called with a non-segmentation phase configuration");
  }
  if (!seq.has_ground_truth()) {
    throw ConfigError("the segmentation phase needs ground truth; sequence " + seq.root() +
                      " has none");
  }

  Rng root(cfg.seed);
  Rng split_rng = root.fork(1);
  Rng batch_rng = root.fork(2);

  TrainResult result;
  std::tie(result.train_frames, result.val_frames) =
      split_train_val(all_frames(seq), cfg.split_fraction, split_rng);
  if (result.val_frames.empty()) {
    throw ConfigError("the held-out validation split is empty; add frames or lower the "
                      "training fraction");
  }
  write_frame_lists(cfg, result);

  // Ground truth of every frame decoded up front; malformed annotations
  // surface before any training work starts.
  std::vector<SegTarget> targets;
  targets.reserve(static_cast<std::size_t>(seq.frames()));
  for (int i = 0; i < seq.frames(); ++i) targets.push_back(segmentation_target(seq.ground_truth(i)));

  model.set_bcnn_trainable(false);
  auto params = model.theta2_parameters();
  AdamState<float> opt(params, static_cast<float>(cfg.learning_rate));
  EpochDriver driver(model, cfg, &opt);

  auto image_loss = [&](int frame, Mode mode, Rng& drop_rng) {
    const Tensor<float> residual = model.bcnn_forward(seq.frame(frame), Mode::kInfer, cfg.threads);
    Tape<float> tape(mode, cfg.threads);
    auto guidance = model.rpm(tape, tape.leaf(residual), drop_rng);
    auto prob = model.scnn(tape, tape.leaf(seq.frame(frame)), guidance);
    auto loss = tape.segmentation_loss(prob, targets[static_cast<std::size_t>(frame)].target,
                                       targets[static_cast<std::size_t>(frame)].mask);
    const double value = tape.value(loss)[0];
    if (mode == Mode::kTrain && std::isfinite(value)) {
      model.zero_grad();
      tape.backward(loss);
    }
    return value;
  };

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const double t0 = now_seconds();
    double loss_sum = 0.0;
    for (int u = 0; u < cfg.updates_per_epoch; ++u) {
      const std::uint64_t batch_seed = batch_rng.next_u64();
      Rng brng(batch_seed);
      const int frame = result.train_frames[static_cast<std::size_t>(
          brng.uniform_int(static_cast<std::uint64_t>(result.train_frames.size())))];
      const double value = image_loss(frame, Mode::kTrain, brng);
      if (!std::isfinite(value)) {
        driver.record_abort(epoch, u, batch_seed);
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) +
                           " update " + std::to_string(u) + " (batch seed " +
                           std::to_string(batch_seed) + ")");
      }
      adam_step(params, opt);
      loss_sum += value;
    }

    double val_loss = 0.0;
    {
      Rng inert(0);  // dropout is inactive outside training
      for (int frame : result.val_frames) val_loss += image_loss(frame, Mode::kInfer, inert);
      val_loss /= static_cast<double>(result.val_frames.size());
    }

    if (!driver.finish_epoch(result, epoch, loss_sum / cfg.updates_per_epoch, val_loss,
                             now_seconds() - t0)) {
      break;
    }
  }
  return result;
}

}  // namespace mcrcnn
