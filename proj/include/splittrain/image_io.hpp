#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace splittrain {

struct PngImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;  // 1 (gray) or 3 (RGB); alpha is dropped
  int bit_depth = 8;         // 8 or 16
  std::vector<std::uint16_t> values;  // row-major, channel-last
};

// Palette and low-bit images are expanded to 8-bit; alpha is stripped.
PngImage read_png(const std::filesystem::path& path);

// 8-bit or 16-bit gray / RGB. Output bytes depend only on the inputs.
void write_png(const std::filesystem::path& path, const PngImage& image);

}  // namespace splittrain
