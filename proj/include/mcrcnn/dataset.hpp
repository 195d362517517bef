#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mcrcnn/image_io.hpp"
#include "mcrcnn/rng.hpp"
#include "mcrcnn/tensor.hpp"

namespace mcrcnn {

// Ground-truth pixel codes, following the CD2014 annotation convention.
namespace gtcode {
constexpr std::uint8_t kBackground = 0;
constexpr std::uint8_t kShadow = 50;       // counts as background
constexpr std::uint8_t kOutsideRoi = 85;   // excluded from loss and metrics
constexpr std::uint8_t kUnknown = 170;     // excluded from loss and metrics
constexpr std::uint8_t kForeground = 255;
}  // namespace gtcode

// One video directory: ordered frames, optional ground truth, optional
// temporal evaluation range. Frames decode lazily and are cached; every
// decode is checked against the sequence resolution.
class FrameSequence {
 public:
  static FrameSequence load(const std::string& root);

  int frames() const { return static_cast<int>(frame_paths_.size()); }
  bool has_ground_truth() const { return !gt_paths_.empty(); }
  bool has_roi() const { return has_roi_; }
  int roi_first() const { return roi_first_; }  // 1-based frame numbers
  int roi_last() const { return roi_last_; }
  const std::string& category() const { return category_; }
  const std::string& video() const { return video_; }
  const std::string& root() const { return root_; }
  const std::string& frame_path(int i) const { return frame_paths_.at(static_cast<std::size_t>(i)); }

  int width() const;   // decodes the first frame if needed
  int height() const;

  // [1,3,H,W] float frame in [0,1].
  const Tensor<float>& frame(int i) const;
  // Grayscale label raster; every pixel is validated against the known codes.
  const ImageU8& ground_truth(int i) const;

  // True when 1-based frame number i+1 falls inside the temporal range (or
  // no range was declared).
  bool in_roi(int i) const {
    return !has_roi_ || (i + 1 >= roi_first_ && i + 1 <= roi_last_);
  }

 private:
  std::string root_, category_, video_;
  std::vector<std::string> frame_paths_, gt_paths_;
  bool has_roi_ = false;
  int roi_first_ = 0, roi_last_ = 0;
  mutable int width_ = -1, height_ = -1;
  mutable std::vector<std::optional<Tensor<float>>> frame_cache_;
  mutable std::vector<std::optional<ImageU8>> gt_cache_;
};

enum class Augment { kIdentity, kRot90, kRot180, kRot270, kHFlip, kVFlip };
constexpr int kAugmentCount = 6;

// Applies the transform to every sample plane of a [N,C,H,W] tensor.
// Rotations are counterclockwise; 90/270 swap the spatial extents.
Tensor<float> apply_augment(const Tensor<float>& t, Augment a);
Augment inverse_augment(Augment a);

struct PatchBatch {
  Tensor<float> input;   // [B,C,P,P]
  Tensor<float> target;  // [B,C,P,P], cut from the background estimate
  std::vector<Augment> augments;
  std::vector<int> frame_indices;
};

// Per-pixel, per-channel median across the given frames; an even count
// averages the two middle order statistics.
Tensor<float> median_background(const std::vector<Tensor<float>>& frames);
// Median over the first m frames of the sequence.
Tensor<float> median_background(const FrameSequence& seq, int m);

// Randomly positioned square patches from the pooled frames, paired with
// identically-cut patches of `background`, both under one random
// augmentation per pair.
PatchBatch extract_training_patches(const FrameSequence& seq, const Tensor<float>& background,
                                    const std::vector<int>& frame_pool, int batch_size,
                                    int patch_size, Rng& rng);

// Seeded shuffle, then ceil(fraction*n) items for training and the rest for
// validation. Rejects fewer than two items.
std::pair<std::vector<int>, std::vector<int>> split_train_val(const std::vector<int>& items,
                                                              double fraction, Rng& rng);

// Training view of a label raster: target is 1 on foreground and 0
// elsewhere; mask is 0 on excluded codes (outside-ROI, unknown) and 1
// elsewhere. Both [1,1,H,W].
struct SegTarget {
  Tensor<float> target, mask;
};
SegTarget segmentation_target(const ImageU8& gt);

// Synthetic CDnet-layout sequence: textured static background, one moving
// object, exact ground truth, optional cast shadow, optional pixel noise on
// the rendered frames.
struct SynthSpec {
  int width = 64, height = 64, frames = 20;
  std::string object = "square";  // "square" or "circle"
  int object_size = 16;
  int start_x = 4, start_y = 24;
  int dx = 2, dy = 0;
  double noise = 0.0;  // uniform +-noise on 8-bit values, 0 disables
  bool shadow = false;
};

// Writes input/in%06d.png, groundtruth/gt%06d.png, and temporalROI.txt under
// `video_root`, creating directories as needed.
void synth_sequence(const SynthSpec& spec, Rng& rng, const std::string& video_root);

}  // namespace mcrcnn
