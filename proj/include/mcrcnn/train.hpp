#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mcrcnn/dataset.hpp"
#include "mcrcnn/model.hpp"
#include "mcrcnn/tensor.hpp"

namespace mcrcnn {

enum class TrainPhase { kBcnn, kScnn };

// Settings for one training run. The background phase consumes patch
// batches; the segmentation phase consumes one full image per update and
// therefore requires batch size 1.
struct TrainRunConfig {
  TrainPhase phase = TrainPhase::kBcnn;
  int max_epochs = 100;
  int updates_per_epoch = 500;
  int batch_size = 128;
  int patch_size = 40;
  double learning_rate = 1e-3;
  double plateau_factor = 0.1;
  int plateau_patience = 5;
  double plateau_min_delta = 1e-4;
  double plateau_floor = 1e-6;
  int early_stop_patience = 15;
  double split_fraction = 0.8;
  std::uint64_t seed = 1;
  std::string checkpoint_dir;  // empty disables checkpoint and log files
  int threads = 1;

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double learning_rate = 0.0;  // rate in effect during this epoch
  double seconds = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> log;
  double best_val_loss = 0.0;
  int best_epoch = 0;
  std::string best_checkpoint;  // empty when checkpointing is disabled
  bool early_stopped = false;
  std::vector<int> train_frames, val_frames;
};

// header + one line per epoch: epoch,train_loss,val_loss,learning_rate,seconds.
// The seconds column is wall-clock time and is the only nondeterministic
// field of a seeded run.
std::string run_log_csv(const std::vector<EpochRecord>& log);

// Background phase: every update samples a patch batch, predicts the
// residual, and regresses frame minus residual onto the median background.
// Validation patches come from the held-out frame split; the schedule
// watches the validation loss; the best-validation model is checkpointed.
TrainResult train_bcnn(McrcnnModel<float>& model, const FrameSequence& seq,
                       const Tensor<float>& background, const TrainRunConfig& cfg);

// Segmentation phase: the first stage runs frozen in inference mode; every
// update pushes one full frame through the multiscale and segmentation
// stages and backpropagates the masked cross-entropy into their parameters
// only. Requires ground truth on the sequence.
TrainResult train_scnn(McrcnnModel<float>& model, const FrameSequence& seq,
                       const TrainRunConfig& cfg);

}  // namespace mcrcnn
