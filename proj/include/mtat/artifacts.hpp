#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "mtat/png_io.hpp"
#include "mtat/tensor.hpp"

namespace mtat {

/// Shortest text that parses back to the same double (17 significant digits).
std::string format_double(double v);

/// Append-only CSV with a fixed header. Opening an existing non-empty file
/// requires its header to match; every row is flushed.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, std::vector<std::string> header);

  void append(const std::vector<std::string>& row);
  void append(const std::vector<double>& row);
  const std::vector<std::string>& header() const { return header_; }

 private:
  std::string path_;
  std::vector<std::string> header_;
  std::ofstream out_;
};

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const;
  double number(std::size_t row, const std::string& col) const;
};

CsvTable read_csv(const std::string& path);

/// -1 -> 0, 1 -> 255, linear in between, rounded and clamped.
std::uint8_t to_pixel(float v);

/// Tiles C x S x S images (C = 3) row-major into a rows x cols grid with a
/// 2-pixel white gutter around every cell.
RgbImage render_grid(const std::vector<Tensor<float>>& cells, std::int64_t rows, std::int64_t cols);
/// `labels` go into tEXt chunks.
void write_image_grid(const std::vector<Tensor<float>>& cells, std::int64_t rows, std::int64_t cols,
                      const std::string& path, const std::map<std::string, std::string>& labels = {});

/// A single 3 x H x W image without gutter.
RgbImage to_rgb_image(const Tensor<float>& image);

/// Image i of an N x C x S x S batch.
Tensor<float> image_at(const Tensor<float>& batch, std::int64_t i);

}  // namespace mtat
