#include "mcrcnn/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "mcrcnn/errors.hpp"

namespace fs = std::filesystem;

namespace mcrcnn {
namespace {

bool has_image_extension(const fs::path& p, bool png_only) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (ext == ".png") return true;
  return !png_only && (ext == ".jpg" || ext == ".jpeg");
}

std::vector<std::string> list_images(const fs::path& dir, bool png_only) {
  std::vector<std::string> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && has_image_extension(entry.path(), png_only)) {
      out.push_back(entry.path().string());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

bool known_code(std::uint8_t v) {
  return v == gtcode::kBackground || v == gtcode::kShadow || v == gtcode::kOutsideRoi ||
         v == gtcode::kUnknown || v == gtcode::kForeground;
}

}  // namespace

FrameSequence FrameSequence::load(const std::string& root) {
  FrameSequence seq;
  fs::path rp = fs::path(root).lexically_normal();
  if (rp.filename().empty()) rp = rp.parent_path();
  if (!fs::is_directory(rp)) {
    throw IoError("missing video directory: " + root);
  }
  seq.root_ = rp.string();
  seq.video_ = rp.filename().string();
  seq.category_ = rp.parent_path().filename().string();

  const fs::path input = rp / "input";
  if (!fs::is_directory(input)) {
    throw IoError("missing input directory under " + seq.root_);
  }
  seq.frame_paths_ = list_images(input, /*png_only=*/false);
  if (seq.frame_paths_.empty()) {
    throw IoError("no frames found in " + input.string());
  }

  const fs::path gt = rp / "groundtruth";
  if (fs::is_directory(gt)) {
    seq.gt_paths_ = list_images(gt, /*png_only=*/false);
    if (seq.gt_paths_.size() != seq.frame_paths_.size()) {
      throw IoError("ground-truth count (" + std::to_string(seq.gt_paths_.size()) +
                    ") does not match frame count (" + std::to_string(seq.frame_paths_.size()) +
                    ") under " + seq.root_);
    }
  }

  const fs::path roi = rp / "temporalROI.txt";
  if (fs::is_regular_file(roi)) {
    std::ifstream in(roi);
    int a = 0, b = 0;
    if (!(in >> a >> b) || a < 1 || b < a) {
      throw IoError("malformed temporal range file: " + roi.string());
    }
    seq.has_roi_ = true;
    seq.roi_first_ = a;
    seq.roi_last_ = b;
  }

  seq.frame_cache_.resize(seq.frame_paths_.size());
  seq.gt_cache_.resize(seq.gt_paths_.size());
  return seq;
}

const Tensor<float>& FrameSequence::frame(int i) const {
  if (i < 0 || i >= frames()) {
    throw ConfigError("frame index " + std::to_string(i) + " out of range [0," +
                      std::to_string(frames()) + ")");
  }
  auto& slot = frame_cache_[static_cast<std::size_t>(i)];
  if (!slot.has_value()) {
    ImageU8 img = read_image(frame_paths_[static_cast<std::size_t>(i)]);
    if (width_ < 0) {
      width_ = img.width;
      height_ = img.height;
    } else if (img.width != width_ || img.height != height_) {
      throw IoError("resolution mismatch: " + frame_paths_[static_cast<std::size_t>(i)] +
                    " is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                    ", expected " + std::to_string(width_) + "x" + std::to_string(height_));
    }
    if (img.channels == 1) {
      // Promote grayscale footage to three identical channels.
      ImageU8 rgb;
      rgb.width = img.width;
      rgb.height = img.height;
      rgb.channels = 3;
      rgb.pixels.resize(static_cast<std::size_t>(img.width) * img.height * 3);
      for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
          for (int c = 0; c < 3; ++c) rgb.at(y, x, c) = img.at(y, x);
        }
      }
      img = std::move(rgb);
    }
    slot = image_to_tensor(img);
  }
  return *slot;
}

const ImageU8& FrameSequence::ground_truth(int i) const {
  if (!has_ground_truth()) {
    throw ConfigError("sequence " + root_ + " has no ground truth");
  }
  if (i < 0 || i >= frames()) {
    throw ConfigError("ground-truth index " + std::to_string(i) + " out of range");
  }
  auto& slot = gt_cache_[static_cast<std::size_t>(i)];
  if (!slot.has_value()) {
    const std::string& path = gt_paths_[static_cast<std::size_t>(i)];
    ImageU8 img = read_image(path);
    if (img.channels == 3) {
      // Some annotation tools save gray masks as RGB; accept when the
      // channels agree and keep the first.
      ImageU8 gray;
      gray.width = img.width;
      gray.height = img.height;
      gray.channels = 1;
      gray.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
      for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
          if (img.at(y, x, 0) != img.at(y, x, 1) || img.at(y, x, 0) != img.at(y, x, 2)) {
            throw IoError("ground truth is not grayscale: " + path);
          }
          gray.at(y, x) = img.at(y, x, 0);
        }
      }
      img = std::move(gray);
    }
    (void)frame(i);  // establishes the sequence resolution
    if (img.width != width_ || img.height != height_) {
      throw IoError("ground-truth resolution mismatch: " + path);
    }
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        if (!known_code(img.at(y, x))) {
          throw IoError("unknown ground-truth code " + std::to_string(img.at(y, x)) +
                        " at pixel (" + std::to_string(y) + "," + std::to_string(x) + ") in " +
                        path);
        }
      }
    }
    slot = std::move(img);
  }
  return *slot;
}

int FrameSequence::width() const {
  if (width_ < 0) (void)frame(0);
  return width_;
}

int FrameSequence::height() const {
  if (height_ < 0) (void)frame(0);
  return height_;
}

Tensor<float> apply_augment(const Tensor<float>& t, Augment a) {
  const Shape s = t.shape();
  const bool swaps = a == Augment::kRot90 || a == Augment::kRot270;
  Tensor<float> out(swaps ? Shape(s.n, s.c, s.w, s.h) : s);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int y = 0; y < s.h; ++y) {
        for (int x = 0; x < s.w; ++x) {
          const float v = t.at(n, c, y, x);
          switch (a) {
            case Augment::kIdentity:
              out.at(n, c, y, x) = v;
              break;
            case Augment::kRot90:  // counterclockwise
              out.at(n, c, s.w - 1 - x, y) = v;
              break;
            case Augment::kRot180:
              out.at(n, c, s.h - 1 - y, s.w - 1 - x) = v;
              break;
            case Augment::kRot270:
              out.at(n, c, x, s.h - 1 - y) = v;
              break;
            case Augment::kHFlip:
              out.at(n, c, y, s.w - 1 - x) = v;
              break;
            case Augment::kVFlip:
              out.at(n, c, s.h - 1 - y, x) = v;
              break;
          }
        }
      }
    }
  }
  return out;
}

Augment inverse_augment(Augment a) {
  switch (a) {
    case Augment::kRot90:
      return Augment::kRot270;
    case Augment::kRot270:
      return Augment::kRot90;
    default:
      return a;  // identity, rot180, and both flips are involutions
  }
}

Tensor<float> median_background(const std::vector<Tensor<float>>& frames) {
  if (frames.empty()) {
    throw ConfigError("median background requires at least one frame");
  }
  const Shape s = frames.front().shape();
  for (const auto& f : frames) {
    check_same_shape(s, f.shape(), "median_background");
  }
  const std::size_t m = frames.size();
  Tensor<float> out(s);
  std::vector<float> scratch(m);
  for (std::int64_t i = 0; i < s.size(); ++i) {
    for (std::size_t k = 0; k < m; ++k) scratch[k] = frames[k][i];
    const std::size_t mid = m / 2;
    std::nth_element(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(mid),
                     scratch.end());
    if (m % 2 == 1) {
      out[i] = scratch[mid];
    } else {
      const float upper = scratch[mid];
      const float lower =
          *std::max_element(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(mid));
      out[i] = 0.5f * (lower + upper);
    }
  }
  return out;
}

Tensor<float> median_background(const FrameSequence& seq, int m) {
  if (m < 1 || m > seq.frames()) {
    throw ConfigError("median interval length " + std::to_string(m) +
                      " outside [1," + std::to_string(seq.frames()) + "]");
  }
  std::vector<Tensor<float>> frames;
  frames.reserve(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) frames.push_back(seq.frame(i));
  return median_background(frames);
}

PatchBatch extract_training_patches(const FrameSequence& seq, const Tensor<float>& background,
                                    const std::vector<int>& frame_pool, int batch_size,
                                    int patch_size, Rng& rng) {
  if (batch_size < 1 || patch_size < 1) {
    throw ConfigError("patch extraction requires positive batch and patch sizes");
  }
  if (frame_pool.empty()) {
    throw ConfigError("patch extraction requires a non-empty frame pool");
  }
  const int h = seq.height(), w = seq.width();
  if (h < patch_size || w < patch_size) {
    throw ConfigError("frames (" + std::to_string(w) + "x" + std::to_string(h) +
                      ") are smaller than the patch size " + std::to_string(patch_size));
  }
  const Shape bs = background.shape();
  if (bs.n != 1 || bs.h != h || bs.w != w) {
    throw ShapeError("background shape " + bs.str() + " does not cover the frames");
  }

  const int channels = bs.c;
  PatchBatch batch;
  batch.input = Tensor<float>(Shape(batch_size, channels, patch_size, patch_size));
  batch.target = Tensor<float>(Shape(batch_size, channels, patch_size, patch_size));
  batch.augments.reserve(static_cast<std::size_t>(batch_size));
  batch.frame_indices.reserve(static_cast<std::size_t>(batch_size));

  Tensor<float> in_cut(Shape(1, channels, patch_size, patch_size));
  Tensor<float> tg_cut(Shape(1, channels, patch_size, patch_size));
  for (int b = 0; b < batch_size; ++b) {
    const int fi = frame_pool[static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::uint64_t>(frame_pool.size())))];
    const int y0 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(h - patch_size + 1)));
    const int x0 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(w - patch_size + 1)));
    const auto aug = static_cast<Augment>(rng.uniform_int(kAugmentCount));

    const Tensor<float>& f = seq.frame(fi);
    for (int c = 0; c < channels; ++c) {
      for (int y = 0; y < patch_size; ++y) {
        for (int x = 0; x < patch_size; ++x) {
          in_cut.at(0, c, y, x) = f.at(0, c, y0 + y, x0 + x);
          tg_cut.at(0, c, y, x) = background.at(0, c, y0 + y, x0 + x);
        }
      }
    }
    const Tensor<float> in_aug = apply_augment(in_cut, aug);
    const Tensor<float> tg_aug = apply_augment(tg_cut, aug);
    for (int c = 0; c < channels; ++c) {
      for (int y = 0; y < patch_size; ++y) {
        for (int x = 0; x < patch_size; ++x) {
          batch.input.at(b, c, y, x) = in_aug.at(0, c, y, x);
          batch.target.at(b, c, y, x) = tg_aug.at(0, c, y, x);
        }
      }
    }
    batch.augments.push_back(aug);
    batch.frame_indices.push_back(fi);
  }
  return batch;
}

std::pair<std::vector<int>, std::vector<int>> split_train_val(const std::vector<int>& items,
                                                              double fraction, Rng& rng) {
  if (items.size() < 2) {
    throw ConfigError("train/validation split requires at least 2 items, got " +
                      std::to_string(items.size()));
  }
  if (fraction <= 0.0 || fraction > 1.0) {
    throw ConfigError("split fraction must lie in (0,1]");
  }
  std::vector<int> shuffled = items;
  for (std::size_t i = shuffled.size() - 1; i > 0; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.uniform_int(i + 1));
    std::swap(shuffled[i], shuffled[j]);
  }
  // Tiny slack keeps exact products (0.8*300) from ceiling up on roundoff.
  const auto n = static_cast<double>(shuffled.size());
  auto train_n = static_cast<std::size_t>(std::ceil(fraction * n - 1e-9));
  train_n = std::min(train_n, shuffled.size());
  return {std::vector<int>(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(train_n)),
          std::vector<int>(shuffled.begin() + static_cast<std::ptrdiff_t>(train_n), shuffled.end())};
}

SegTarget segmentation_target(const ImageU8& gt) {
  if (gt.channels != 1) {
    throw ConfigError("segmentation targets require a single-channel label raster");
  }
  SegTarget out{Tensor<float>(Shape(1, 1, gt.height, gt.width)),
                Tensor<float>(Shape(1, 1, gt.height, gt.width))};
  for (int y = 0; y < gt.height; ++y) {
    for (int x = 0; x < gt.width; ++x) {
      const std::uint8_t code = gt.at(y, x);
      float t = 0.0f, m = 1.0f;
      switch (code) {
        case gtcode::kForeground:
          t = 1.0f;
          break;
        case gtcode::kBackground:
        case gtcode::kShadow:
          break;
        case gtcode::kOutsideRoi:
        case gtcode::kUnknown:
          m = 0.0f;
          break;
        default:
          throw IoError("unknown ground-truth code " + std::to_string(code) + " at pixel (" +
                        std::to_string(y) + "," + std::to_string(x) + ")");
      }
      out.target.at(0, 0, y, x) = t;
      out.mask.at(0, 0, y, x) = m;
    }
  }
  return out;
}

void synth_sequence(const SynthSpec& spec, Rng& rng, const std::string& video_root) {
  if (spec.width < 8 || spec.height < 8 || spec.frames < 1 || spec.object_size < 1) {
    throw ConfigError("synthetic scene needs width/height >= 8, frames >= 1, object size >= 1");
  }
  if (spec.object != "square" && spec.object != "circle") {
    throw ConfigError("synthetic object kind must be 'square' or 'circle', got '" + spec.object +
                      "'");
  }
  if (spec.noise < 0.0 || spec.object_size > std::min(spec.width, spec.height)) {
    throw ConfigError("synthetic scene has a negative noise level or an oversized object");
  }

  const fs::path root(video_root);
  std::error_code ec;
  fs::create_directories(root / "input", ec);
  fs::create_directories(root / "groundtruth", ec);
  if (!fs::is_directory(root / "input") || !fs::is_directory(root / "groundtruth")) {
    throw IoError("cannot create synthetic sequence directories under " + video_root);
  }

  const int w = spec.width, h = spec.height, size = spec.object_size;
  auto clamp_u8 = [](int v) {
    return static_cast<std::uint8_t>(std::min(255, std::max(0, v)));
  };

  // Static textured background: two gradients plus seeded dither.
  ImageU8 bg;
  bg.width = w;
  bg.height = h;
  bg.channels = 3;
  bg.pixels.resize(static_cast<std::size_t>(w) * h * 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int base[3] = {40 + (150 * x) / std::max(1, w - 1),
                           40 + (150 * y) / std::max(1, h - 1),
                           90 + ((x + y) * 60) / std::max(1, w + h - 2)};
      for (int c = 0; c < 3; ++c) {
        const int dither = static_cast<int>(rng.uniform_int(21)) - 10;
        bg.at(y, x, c) = clamp_u8(base[c] + dither);
      }
    }
  }

  auto inside_object = [&](int y, int x, int py, int px) {
    if (spec.object == "square") {
      return y >= py && y < py + size && x >= px && x < px + size;
    }
    const double r = size / 2.0;
    const double cy = py + r - 0.5, cx = px + r - 0.5;
    return (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r;
  };

  char name[32];
  for (int t = 0; t < spec.frames; ++t) {
    const int px = std::min(w - size, std::max(0, spec.start_x + t * spec.dx));
    const int py = std::min(h - size, std::max(0, spec.start_y + t * spec.dy));
    const int sx = px + size / 2, sy = py + size / 2;  // shadow offset

    ImageU8 frame = bg;
    ImageU8 gt;
    gt.width = w;
    gt.height = h;
    gt.channels = 1;
    gt.pixels.assign(static_cast<std::size_t>(w) * h, gtcode::kBackground);

    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        if (inside_object(y, x, py, px)) {
          const int lift = ((x + y) % 2) * 20;
          frame.at(y, x, 0) = clamp_u8(210 + lift);
          frame.at(y, x, 1) = clamp_u8(60 + lift);
          frame.at(y, x, 2) = clamp_u8(50 + lift);
          gt.at(y, x) = gtcode::kForeground;
        } else if (spec.shadow && inside_object(y, x, sy, sx)) {
          for (int c = 0; c < 3; ++c) frame.at(y, x, c) = static_cast<std::uint8_t>(frame.at(y, x, c) / 2);
          gt.at(y, x) = gtcode::kShadow;
        }
      }
    }

    if (spec.noise > 0.0) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          for (int c = 0; c < 3; ++c) {
            const double n = (rng.uniform() * 2.0 - 1.0) * spec.noise;
            frame.at(y, x, c) = clamp_u8(static_cast<int>(std::lround(frame.at(y, x, c) + n)));
          }
        }
      }
    }

    std::snprintf(name, sizeof(name), "in%06d.png", t + 1);
    write_png((root / "input" / name).string(), frame);
    std::snprintf(name, sizeof(name), "gt%06d.png", t + 1);
    write_png((root / "groundtruth" / name).string(), gt);
  }

  std::ofstream roi(root / "temporalROI.txt");
  roi << 1 << " " << spec.frames << "\n";
  if (!roi) {
    throw IoError("cannot write temporal range file under " + video_root);
  }
}

}  // namespace mcrcnn
