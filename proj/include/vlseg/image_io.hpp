#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace vlseg {

using Palette = std::vector<std::array<std::uint8_t, 3>>;

// RGB image as float32 3×H×W in [0,1]. PNG (gray/RGB/RGBA/palette) and JPEG.
torch::Tensor read_image(const std::filesystem::path& path);
void write_image_png(const std::filesystem::path& path, const torch::Tensor& image);

// Single-channel mask as uint8 H×W. Palette PNGs keep their raw indices.
torch::Tensor read_mask(const std::filesystem::path& path);
// Writes a palette-indexed PNG; the palette is padded to 256 entries.
void write_mask_png(const std::filesystem::path& path, const torch::Tensor& mask, const Palette& palette);

// Standard 256-entry VOC colormap (first 21 entries are the VOC classes).
Palette voc_palette();

}  // namespace vlseg
