#include "vlseg/image_io.hpp"

#include <png.h>
#include <cstdio>
#include <csetjmp>
#include <jpeglib.h>
#include <memory>

#include "vlseg/error.hpp"

namespace vlseg {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw LoadError("cannot open " + path.string());
  return f;
}

struct PngPixels {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  int color_type = 0;
  int channels = 0;
  std::vector<std::uint8_t> data;  // row-major, `channels` bytes per pixel
};

// Reads 8-bit pixels. When keep_palette is set, palette images yield raw indices.
PngPixels read_png(const std::filesystem::path& path, bool keep_palette) {
  auto file = open_file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw LoadError("libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw LoadError("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw LoadError("corrupt PNG: " + path.string());
  }
  png_init_io(png, file.get());
  png_read_info(png, info);

  PngPixels out;
  out.width = png_get_image_width(png, info);
  out.height = png_get_image_height(png, info);
  out.color_type = png_get_color_type(png, info);
  const int bit_depth = png_get_bit_depth(png, info);

  if (bit_depth == 16) png_set_strip_16(png);
  if (out.color_type == PNG_COLOR_TYPE_PALETTE) {
    if (keep_palette) {
      if (bit_depth < 8) png_set_packing(png);
    } else {
      png_set_palette_to_rgb(png);
    }
  } else if (out.color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) {
    png_set_expand_gray_1_2_4_to_8(png);
  }
  if (!keep_palette && png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_read_update_info(png, info);

  out.channels = png_get_channels(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  out.data.resize(rowbytes * out.height);
  std::vector<png_bytep> rows(out.height);
  for (std::uint32_t y = 0; y < out.height; ++y) rows[y] = out.data.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  std::longjmp(err->jump, 1);
}

torch::Tensor read_jpeg(const std::filesystem::path& path) {
  auto file = open_file(path, "rb");
  jpeg_decompress_struct cinfo;
  JpegErrorManager err;
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_error_exit;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw LoadError("corrupt JPEG: " + path.string());
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, file.get());
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  const auto width = static_cast<int64_t>(cinfo.output_width);
  const auto height = static_cast<int64_t>(cinfo.output_height);
  auto hwc = torch::empty({height, width, 3}, torch::kUInt8);
  auto* base = hwc.data_ptr<std::uint8_t>();
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = base + static_cast<std::size_t>(cinfo.output_scanline) * width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return hwc.permute({2, 0, 1}).to(torch::kFloat32).div_(255.0).contiguous();
}

void write_png(const std::filesystem::path& path, std::uint32_t width, std::uint32_t height, int color_type,
               const std::uint8_t* data, int channels, const Palette* palette) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto file = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw LoadError("libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw LoadError("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw LoadError("PNG write failed: " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, width, height, 8, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  std::vector<png_color> colors;
  if (palette) {
    colors.resize(256, png_color{0, 0, 0});
    for (std::size_t i = 0; i < palette->size() && i < 256; ++i)
      colors[i] = png_color{(*palette)[i][0], (*palette)[i][1], (*palette)[i][2]};
    png_set_PLTE(png, info, colors.data(), 256);
  }
  png_write_info(png, info);
  for (std::uint32_t y = 0; y < height; ++y)
    png_write_row(png, const_cast<png_bytep>(data + static_cast<std::size_t>(y) * width * channels));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

bool has_extension(const std::filesystem::path& path, std::initializer_list<const char*> exts) {
  auto ext = path.extension().string();
  for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  for (const char* e : exts)
    if (ext == e) return true;
  return false;
}

}  // namespace

torch::Tensor read_image(const std::filesystem::path& path) {
  if (has_extension(path, {".jpg", ".jpeg"})) return read_jpeg(path);
  auto px = read_png(path, false);
  auto hwc = torch::from_blob(px.data.data(), {px.height, px.width, px.channels}, torch::kUInt8).clone();
  if (px.channels == 1 || px.channels == 2) {
    hwc = hwc.narrow(2, 0, 1).expand({-1, -1, 3});
  } else {
    hwc = hwc.narrow(2, 0, 3);
  }
  return hwc.permute({2, 0, 1}).to(torch::kFloat32).div_(255.0).contiguous();
}

void write_image_png(const std::filesystem::path& path, const torch::Tensor& image) {
  TORCH_CHECK(image.dim() == 3 && image.size(0) == 3, "write_image_png expects 3xHxW, got ", image.sizes());
  auto hwc = image.detach().to(torch::kFloat32).clamp(0.0, 1.0).mul(255.0).round().to(torch::kUInt8)
                 .permute({1, 2, 0}).contiguous();
  write_png(path, static_cast<std::uint32_t>(hwc.size(1)), static_cast<std::uint32_t>(hwc.size(0)),
            PNG_COLOR_TYPE_RGB, hwc.data_ptr<std::uint8_t>(), 3, nullptr);
}

torch::Tensor read_mask(const std::filesystem::path& path) {
  auto px = read_png(path, true);
  if (px.channels != 1)
    throw ValidationError("mask must be single-channel or palette PNG: " + path.string());
  return torch::from_blob(px.data.data(), {px.height, px.width}, torch::kUInt8).clone();
}

void write_mask_png(const std::filesystem::path& path, const torch::Tensor& mask, const Palette& palette) {
  TORCH_CHECK(mask.dim() == 2, "write_mask_png expects HxW, got ", mask.sizes());
  auto m = mask.detach().to(torch::kUInt8).contiguous();
  write_png(path, static_cast<std::uint32_t>(m.size(1)), static_cast<std::uint32_t>(m.size(0)),
            PNG_COLOR_TYPE_PALETTE, m.data_ptr<std::uint8_t>(), 1, &palette);
}

Palette voc_palette() {
  Palette palette(256);
  for (int i = 0; i < 256; ++i) {
    int label = i;
    std::uint8_t r = 0, g = 0, b = 0;
    for (int shift = 7; shift >= 0; --shift) {
      r |= static_cast<std::uint8_t>(((label >> 0) & 1) << shift);
      g |= static_cast<std::uint8_t>(((label >> 1) & 1) << shift);
      b |= static_cast<std::uint8_t>(((label >> 2) & 1) << shift);
      label >>= 3;
    }
    palette[i] = {r, g, b};
  }
  return palette;
}

}  // namespace vlseg
