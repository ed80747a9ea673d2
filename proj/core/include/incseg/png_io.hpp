#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace incseg::data {

struct PngImage {
  int w = 0, h = 0, channels = 0;  // 1 (gray) or 3 (rgb)
  std::vector<std::uint8_t> pixels;  // row-major, interleaved
};

void write_png(const std::string& path, int w, int h, int channels,
               const std::vector<std::uint8_t>& pixels);
PngImage read_png(const std::string& path);

}  // namespace incseg::data
