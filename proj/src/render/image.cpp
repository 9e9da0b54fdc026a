#include "sat/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "sat/binary_io.hpp"

namespace sat {

std::vector<float> Image::planar() const {
  std::vector<float> out(data.size());
  const std::size_t n = pixels();
  for (std::size_t p = 0; p < n; ++p)
    for (int c = 0; c < channels; ++c) out[c * n + p] = data[p * channels + c];
  return out;
}

Image Image::from_planar(std::span<const float> chw, int channels, int height, int width) {
  Image img(width, height, channels);
  const std::size_t n = img.pixels();
  if (chw.size() != n * channels) throw std::invalid_argument("from_planar: size mismatch");
  for (std::size_t p = 0; p < n; ++p)
    for (int c = 0; c < channels; ++c) img.data[p * channels + c] = chw[c * n + p];
  return img;
}

void write_png(const std::filesystem::path& path, const Image& image) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  switch (image.channels) {
    case 1: png.format = PNG_FORMAT_GRAY; break;
    case 3: png.format = PNG_FORMAT_RGB; break;
    case 4: png.format = PNG_FORMAT_RGBA; break;
    default: throw ImageIoError("PNG needs 1, 3 or 4 channels, got " + std::to_string(image.channels));
  }
  std::vector<png_byte> bytes(image.data.size());
  std::transform(image.data.begin(), image.data.end(), bytes.begin(), [](float v) {
    return static_cast<png_byte>(std::lround(std::clamp(std::isfinite(v) ? v : 0.0f, 0.0f, 1.0f) * 255.0f));
  });
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!png_image_write_to_file(&png, path.c_str(), 0, bytes.data(), 0, nullptr)) {
    throw ImageIoError("writing '" + path.string() + "': " + png.message);
  }
}

Image read_png(const std::filesystem::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw ImageIoError("reading '" + path.string() + "': " + png.message);
  }
  int channels = 3;
  if (png.format & PNG_FORMAT_FLAG_ALPHA) {
    png.format = PNG_FORMAT_RGBA;
    channels = 4;
  } else if (png.format & PNG_FORMAT_FLAG_COLOR) {
    png.format = PNG_FORMAT_RGB;
  } else {
    png.format = PNG_FORMAT_GRAY;
    channels = 1;
  }
  std::vector<png_byte> bytes(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, bytes.data(), 0, nullptr)) {
    throw ImageIoError("decoding '" + path.string() + "': " + png.message);
  }
  Image img(static_cast<int>(png.width), static_cast<int>(png.height), channels);
  std::transform(bytes.begin(), bytes.end(), img.data.begin(), [](png_byte b) { return b / 255.0f; });
  return img;
}

void write_pfm(const std::filesystem::path& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3) throw ImageIoError("PFM needs 1 or 3 channels");
  std::ostringstream head;
  head << (image.channels == 3 ? "PF" : "Pf") << '\n' << image.width << ' ' << image.height << "\n-1\n";
  ByteWriter w;
  const std::string h = head.str();
  w.raw(h.data(), h.size());
  // PFM stores the bottom row first.
  const std::size_t row = static_cast<std::size_t>(image.width) * image.channels;
  for (int y = image.height - 1; y >= 0; --y) w.f32s(std::span(image.data).subspan(y * row, row));
  write_file_bytes(path, w.bytes());
}

Image read_pfm(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  // Header: three whitespace-separated tokens lines, then raw floats.
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    std::string t;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) t += bytes[pos++];
    return t;
  };
  const std::string magic = token();
  if (magic != "PF" && magic != "Pf") throw ImageIoError("'" + path.string() + "' is not a PFM file");
  const int w = std::stoi(token());
  const int h = std::stoi(token());
  const double scale = std::stod(token());
  ++pos;  // single whitespace before the data
  if (scale > 0) throw ImageIoError("big-endian PFM is not supported");
  Image img(w, h, magic == "PF" ? 3 : 1);
  const std::size_t row = static_cast<std::size_t>(w) * img.channels;
  if (bytes.size() - pos < img.data.size() * 4) throw ImageIoError("truncated PFM '" + path.string() + "'");
  for (int y = h - 1; y >= 0; --y) {
    std::memcpy(img.data.data() + y * row, bytes.data() + pos, row * 4);
    pos += row * 4;
  }
  return img;
}

}  // namespace sat
