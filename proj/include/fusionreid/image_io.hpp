#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

#include "fusionreid/tensor.hpp"

namespace fusionreid {

// Binary PPM (P6, maxval <= 255) -> [3, H, W] with values k / maxval.
Tensor read_ppm(const std::filesystem::path& path);

// [3, H, W] in [0, 1] -> P6, each value rounded to the nearest of 256 levels.
void write_ppm(const std::filesystem::path& path, const Tensor& image);

// Row-major height x width map -> P5, min-max scaled to 0..255 (a constant map
// writes zeros).
void write_pgm(const std::filesystem::path& path, const std::vector<double>& values, std::size_t height,
               std::size_t width);

// Reads a P5 file back into [0, 255] integer levels.
std::vector<int> read_pgm(const std::filesystem::path& path, std::size_t& height, std::size_t& width);

// Bilinear resampling of [C, H, W] with half-pixel centers. Same-size input is
// returned as an exact copy.
Tensor resize_bilinear(const Tensor& image, std::size_t height, std::size_t width);

// Rounds every value to the nearest k / 255 after clamping to [0, 1].
Tensor quantize_8bit(const Tensor& image);

}  // namespace fusionreid
