#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mcrcnn/tensor.hpp"

namespace mcrcnn {

// Interleaved 8-bit raster, rows top to bottom. `channels` is 1 (grayscale)
// or 3 (RGB); decoding reduces every other layout to one of the two.
struct ImageU8 {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(int y, int x, int c = 0) const {
    return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
  }
  std::uint8_t& at(int y, int x, int c = 0) {
    return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
  }
};

// Decodes a PNG or JPEG file, sniffing the format from its leading bytes.
// Palette, 16-bit, and alpha-carrying PNGs are folded down to 8-bit
// grayscale or RGB. Throws IoError on missing or undecodable files.
ImageU8 read_image(const std::string& path);

// Lossless and lossy encoders for 1- or 3-channel rasters.
void write_png(const std::string& path, const ImageU8& img);
void write_jpeg(const std::string& path, const ImageU8& img, int quality = 95);

// [1,C,H,W] float tensor scaled to [0,1].
Tensor<float> image_to_tensor(const ImageU8& img);

// Inverse mapping: clamp to [0,1], scale by 255, round to nearest.
ImageU8 tensor_to_image(const Tensor<float>& t);

}  // namespace mcrcnn
