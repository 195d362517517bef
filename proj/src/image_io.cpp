#include "mcrcnn/image_io.hpp"

#include <jpeglib.h>
#include <png.h>

#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>

#include "mcrcnn/errors.hpp"

namespace mcrcnn {
namespace {

struct FileHandle {
  explicit FileHandle(const std::string& path, const char* mode) : f(std::fopen(path.c_str(), mode)) {}
  ~FileHandle() {
    if (f != nullptr) std::fclose(f);
  }
  FileHandle(const FileHandle&) = delete;
  FileHandle& operator=(const FileHandle&) = delete;
  FILE* f = nullptr;
};

ImageU8 read_png(FILE* f, const std::string& path) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png != nullptr ? png_create_info_struct(png) : nullptr;
  if (png == nullptr || info == nullptr) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("out of memory decoding PNG: " + path);
  }

  ImageU8 img;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("failed decoding PNG: " + path);
  }

  png_init_io(png, f);
  png_read_info(png, info);

  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (depth == 16) png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_interlace_handling(png);
  png_read_update_info(png, info);

  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  img.channels = static_cast<int>(png_get_channels(png, info));
  if (img.channels != 1 && img.channels != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("unsupported PNG channel layout in " + path);
  }

  const std::size_t rowbytes = png_get_rowbytes(png, info);
  img.pixels.resize(static_cast<std::size_t>(img.height) * rowbytes);
  rows.resize(static_cast<std::size_t>(img.height));
  for (int y = 0; y < img.height; ++y) rows[static_cast<std::size_t>(y)] = img.pixels.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

struct JpegError {
  jpeg_error_mgr pub;
  std::jmp_buf jb;
  char msg[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegError*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->msg);
  std::longjmp(err->jb, 1);
}

ImageU8 read_jpeg(FILE* f, const std::string& path) {
  jpeg_decompress_struct cinfo;
  JpegError jerr;
  cinfo.err = jpeg_std_error(&jerr.pub);
  jerr.pub.error_exit = jpeg_error_exit;

  ImageU8 img;
  if (setjmp(jerr.jb)) {
    jpeg_destroy_decompress(&cinfo);
    throw IoError("failed decoding JPEG " + path + ": " + jerr.msg);
  }

  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, f);
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = cinfo.num_components == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_start_decompress(&cinfo);

  img.width = static_cast<int>(cinfo.output_width);
  img.height = static_cast<int>(cinfo.output_height);
  img.channels = static_cast<int>(cinfo.output_components);
  const std::size_t rowbytes = static_cast<std::size_t>(img.width) * img.channels;
  img.pixels.resize(static_cast<std::size_t>(img.height) * rowbytes);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = img.pixels.data() + cinfo.output_scanline * rowbytes;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return img;
}

void check_writable_raster(const ImageU8& img, const std::string& path) {
  if (img.width < 1 || img.height < 1 || (img.channels != 1 && img.channels != 3)) {
    throw ConfigError("cannot encode raster with shape " + std::to_string(img.width) + "x" +
                      std::to_string(img.height) + "x" + std::to_string(img.channels) + ": " +
                      path);
  }
  const std::size_t need =
      static_cast<std::size_t>(img.width) * img.height * static_cast<std::size_t>(img.channels);
  if (img.pixels.size() != need) {
    throw ConfigError("raster pixel buffer size mismatch for " + path);
  }
}

}  // namespace

ImageU8 read_image(const std::string& path) {
  FileHandle fh(path, "rb");
  if (fh.f == nullptr) {
    throw IoError("cannot open image: " + path);
  }
  unsigned char sig[8] = {0};
  const std::size_t got = std::fread(sig, 1, sizeof(sig), fh.f);
  std::rewind(fh.f);
  if (got >= 8 && png_sig_cmp(sig, 0, 8) == 0) {
    return read_png(fh.f, path);
  }
  if (got >= 2 && sig[0] == 0xff && sig[1] == 0xd8) {
    return read_jpeg(fh.f, path);
  }
  throw IoError("unrecognized image format (expected PNG or JPEG): " + path);
}

void write_png(const std::string& path, const ImageU8& img) {
  check_writable_raster(img, path);
  FileHandle fh(path, "wb");
  if (fh.f == nullptr) {
    throw IoError("cannot open image for writing: " + path);
  }

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png != nullptr ? png_create_info_struct(png) : nullptr;
  if (png == nullptr || info == nullptr) {
    png_destroy_write_struct(&png, &info);
    throw IoError("out of memory encoding PNG: " + path);
  }
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("failed encoding PNG: " + path);
  }

  png_init_io(png, fh.f);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
               static_cast<png_uint_32>(img.height), 8,
               img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t rowbytes = static_cast<std::size_t>(img.width) * img.channels;
  for (int y = 0; y < img.height; ++y) {
    rows[static_cast<std::size_t>(y)] =
        const_cast<png_bytep>(img.pixels.data()) + y * rowbytes;
  }
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

void write_jpeg(const std::string& path, const ImageU8& img, int quality) {
  check_writable_raster(img, path);
  if (quality < 1 || quality > 100) {
    throw ConfigError("JPEG quality must lie in [1,100]");
  }
  FileHandle fh(path, "wb");
  if (fh.f == nullptr) {
    throw IoError("cannot open image for writing: " + path);
  }

  jpeg_compress_struct cinfo;
  JpegError jerr;
  cinfo.err = jpeg_std_error(&jerr.pub);
  jerr.pub.error_exit = jpeg_error_exit;
  if (setjmp(jerr.jb)) {
    jpeg_destroy_compress(&cinfo);
    throw IoError("failed encoding JPEG " + path + ": " + jerr.msg);
  }

  jpeg_create_compress(&cinfo);
  jpeg_stdio_dest(&cinfo, fh.f);
  cinfo.image_width = static_cast<JDIMENSION>(img.width);
  cinfo.image_height = static_cast<JDIMENSION>(img.height);
  cinfo.input_components = img.channels;
  cinfo.in_color_space = img.channels == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  const std::size_t rowbytes = static_cast<std::size_t>(img.width) * img.channels;
  while (cinfo.next_scanline < cinfo.image_height) {
    JSAMPROW row = const_cast<JSAMPROW>(img.pixels.data()) + cinfo.next_scanline * rowbytes;
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
}

Tensor<float> image_to_tensor(const ImageU8& img) {
  if (img.width < 1 || img.height < 1 || (img.channels != 1 && img.channels != 3)) {
    throw ConfigError("cannot convert empty or oddly shaped raster to a tensor");
  }
  Tensor<float> t(Shape(1, img.channels, img.height, img.width));
  for (int c = 0; c < img.channels; ++c) {
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        t.at(0, c, y, x) = static_cast<float>(img.at(y, x, c)) / 255.0f;
      }
    }
  }
  return t;
}

ImageU8 tensor_to_image(const Tensor<float>& t) {
  const Shape s = t.shape();
  if (s.n != 1 || (s.c != 1 && s.c != 3)) {
    throw ShapeError("tensor_to_image expects [1,1,H,W] or [1,3,H,W], got " + s.str());
  }
  ImageU8 img;
  img.width = s.w;
  img.height = s.h;
  img.channels = s.c;
  img.pixels.resize(static_cast<std::size_t>(s.w) * s.h * s.c);
  for (int c = 0; c < s.c; ++c) {
    for (int y = 0; y < s.h; ++y) {
      for (int x = 0; x < s.w; ++x) {
        const float v = std::min(1.0f, std::max(0.0f, t.at(0, c, y, x)));
        img.at(y, x, c) = static_cast<std::uint8_t>(std::lround(255.0f * v));
      }
    }
  }
  return img;
}

}  // namespace mcrcnn
