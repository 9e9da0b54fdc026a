#pragma once

#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

namespace sat {

// Interleaved H x W x C float image, row 0 at the top.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<float> data;

  Image() = default;
  Image(int w, int h, int c, float fill = 0.0f)
      : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}

  float& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  float at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  std::size_t pixels() const { return static_cast<std::size_t>(width) * height; }

  // Planar [C, H, W] copy, the layout tensors use.
  std::vector<float> planar() const;
  static Image from_planar(std::span<const float> chw, int channels, int height, int width);
};

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// 8-bit PNG; 1, 3 or 4 channels, values clamped to [0,1].
void write_png(const std::filesystem::path& path, const Image& image);
Image read_png(const std::filesystem::path& path);

// 32-bit PFM ("Pf" grey or "PF" colour), the lossless format for tests.
void write_pfm(const std::filesystem::path& path, const Image& image);
Image read_pfm(const std::filesystem::path& path);

}  // namespace sat
