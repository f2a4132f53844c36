#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace mtat {

/// Interleaved 8-bit RGB raster.
struct RgbImage {
  std::int64_t width = 0;
  std::int64_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major, 3 bytes per pixel
};

/// Reads any 8/16-bit PNG, converting palette, gray and alpha variants to RGB.
/// Throws std::runtime_error naming the path on failure.
RgbImage read_png(const std::string& path);

/// Writes an 8-bit RGB PNG with optional tEXt chunks. Output bytes depend only
/// on the arguments (no timestamps).
void write_png(const std::string& path, const RgbImage& image,
               const std::map<std::string, std::string>& text = {});

}  // namespace mtat
