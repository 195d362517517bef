#pragma once

#include <cstdint>
#include <string>

#include "mcrcnn/model.hpp"
#include "mcrcnn/optim.hpp"

namespace mcrcnn {

// Bookkeeping stored alongside the weights. `phase` records which training
// phase produced the file: 1 for the background stage, 2 for the
// segmentation stage, 0 for an untrained dump.
struct CheckpointMeta {
  std::uint64_t seed = 0;
  std::uint32_t epoch = 0;
  double best_loss = 0.0;
  std::uint8_t phase = 0;
};

struct LoadedCheckpoint {
  CheckpointMeta meta;
  McrcnnModel<float> model;
  bool has_optimizer = false;
  AdamState<float> optimizer;
};

// Binary format, all integers and floats little endian:
//   magic "MCRC", u32 version (currently 1),
//   model configuration (i32 fields, dilation list, f64 constants),
//   metadata (u64 seed, u32 epoch, f64 best loss, u8 phase),
//   u32 parameter count, then per parameter:
//     u16 name length, name bytes, u8 trainable flag,
//     four u32 shape extents, raw f32 values,
//   u32 running-statistics count, then per buffer:
//     u8 initialized flag, u32 channels, f32 means, f32 variances,
//   u8 optimizer-present flag; when set: i64 step count, four f64
//     hyperparameters, then first- and second-moment f32 blocks per
//     parameter in registry order.
void save_checkpoint(const std::string& path, McrcnnModel<float>& model,
                     const CheckpointMeta& meta, const AdamState<float>* optimizer = nullptr);

// Rebuilds the model (and optimizer state, when present) from a file written
// by save_checkpoint. Throws IoError with a distinct message for a missing
// file, a bad magic, an unsupported version, or a truncated/corrupt body.
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace mcrcnn
