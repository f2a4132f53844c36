#include "mtat/artifacts.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>
#include <stdexcept>

namespace mtat {
namespace {

std::string quote(const std::string& field) {
  if (field.find_first_of(",\"\r\n") == std::string::npos) return field;
  std::string out = "\"";
  for (const char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string join(const std::vector<std::string>& fields) {
  std::string line;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) line += ',';
    line += quote(fields[i]);
  }
  return line;
}

// One RFC-4180 record; quoted fields may span lines.
bool parse_record(std::istream& in, std::vector<std::string>& fields) {
  fields.clear();
  std::string field;
  bool quoted = false, any = false;
  for (int ch; (ch = in.get()) != EOF;) {
    any = true;
    const char c = static_cast<char>(ch);
    if (quoted) {
      if (c == '"') {
        if (in.peek() == '"') {
          field += '"';
          in.get();
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(field);
      field.clear();
    } else if (c == '\n') {
      fields.push_back(field);
      return true;
    } else if (c != '\r') {
      field += c;
    }
  }
  if (any) fields.push_back(field);
  return any;
}

}  // namespace

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

CsvWriter::CsvWriter(const std::string& path, std::vector<std::string> header)
    : path_(path), header_(std::move(header)) {
  bool fresh = true;
  if (std::filesystem::exists(path) && std::filesystem::file_size(path) > 0) {
    std::ifstream in(path);
    std::vector<std::string> existing;
    parse_record(in, existing);
    if (existing != header_) {
      throw std::invalid_argument("CSV '" + path + "' has header '" + join(existing) + "', expected '" +
                                  join(header_) + "'");
    }
    fresh = false;
  }
  out_.open(path, std::ios::app);
  if (!out_) throw std::runtime_error("cannot open '" + path + "' for appending");
  if (fresh) {
    out_ << join(header_) << '\n';
    out_.flush();
  }
}

void CsvWriter::append(const std::vector<std::string>& row) {
  if (row.size() != header_.size()) {
    throw std::invalid_argument("CSV '" + path_ + "': row has " + std::to_string(row.size()) + " fields, header has " +
                                std::to_string(header_.size()));
  }
  out_ << join(row) << '\n';
  out_.flush();
  if (!out_) throw std::runtime_error("write failed for '" + path_ + "'");
}

void CsvWriter::append(const std::vector<double>& row) {
  std::vector<std::string> text;
  for (const double v : row) text.push_back(format_double(v));
  append(text);
}

std::size_t CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  throw std::out_of_range("CSV has no column '" + name + "'");
}

double CsvTable::number(std::size_t row, const std::string& col) const {
  const auto& s = rows.at(row).at(column(col));
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw std::invalid_argument("CSV value '" + s + "' is not a number");
  return v;
}

CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  CsvTable t;
  if (!parse_record(in, t.header)) throw std::runtime_error("CSV '" + path + "' is empty");
  for (std::vector<std::string> rec; parse_record(in, rec);) {
    if (rec.size() == 1 && rec[0].empty()) continue;
    if (rec.size() != t.header.size()) throw std::runtime_error("CSV '" + path + "' has a ragged row");
    t.rows.push_back(rec);
  }
  return t;
}

std::uint8_t to_pixel(float v) {
  const double p = std::round((static_cast<double>(v) + 1.0) * 127.5);
  return static_cast<std::uint8_t>(std::clamp(p, 0.0, 255.0));
}

Tensor<float> image_at(const Tensor<float>& batch, std::int64_t i) {
  const auto& s = batch.shape();
  const std::int64_t per = s[1] * s[2] * s[3];
  std::vector<float> buf(batch.data().begin() + i * per, batch.data().begin() + (i + 1) * per);
  return Tensor<float>(Shape{s[1], s[2], s[3]}, std::move(buf));
}

RgbImage render_grid(const std::vector<Tensor<float>>& cells, std::int64_t rows, std::int64_t cols) {
  constexpr std::int64_t gutter = 2;
  if (rows < 1 || cols < 1 || cells.size() != static_cast<std::size_t>(rows * cols)) {
    throw std::invalid_argument("render_grid: " + std::to_string(cells.size()) + " cells for a " +
                                std::to_string(rows) + "x" + std::to_string(cols) + " layout");
  }
  const auto& s0 = cells[0].shape();
  if (s0.size() != 3 || s0[0] != 3) throw ShapeError("render_grid: cells must be 3 x H x W, got " + shape_str(s0));
  const std::int64_t h = s0[1], w = s0[2];
  RgbImage img;
  img.width = cols * w + (cols + 1) * gutter;
  img.height = rows * h + (rows + 1) * gutter;
  img.pixels.assign(static_cast<std::size_t>(img.width * img.height * 3), 255);
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t c = 0; c < cols; ++c) {
      const auto& cell = cells[static_cast<std::size_t>(r * cols + c)];
      if (cell.shape() != s0) throw ShapeError("render_grid: cell shapes differ");
      const std::int64_t y0 = gutter + r * (h + gutter), x0 = gutter + c * (w + gutter);
      for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
          for (std::int64_t ch = 0; ch < 3; ++ch) {
            img.pixels[static_cast<std::size_t>(((y0 + y) * img.width + x0 + x) * 3 + ch)] =
                to_pixel(cell[static_cast<std::size_t>((ch * h + y) * w + x)]);
          }
        }
      }
    }
  }
  return img;
}

void write_image_grid(const std::vector<Tensor<float>>& cells, std::int64_t rows, std::int64_t cols,
                      const std::string& path, const std::map<std::string, std::string>& labels) {
  write_png(path, render_grid(cells, rows, cols), labels);
}

RgbImage to_rgb_image(const Tensor<float>& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("to_rgb_image: expected 3 x H x W, got " + shape_str(image.shape()));
  const std::int64_t h = image.dim(1), w = image.dim(2);
  RgbImage img;
  img.width = w;
  img.height = h;
  img.pixels.resize(static_cast<std::size_t>(w * h * 3));
  for (std::int64_t p = 0; p < w * h; ++p) {
    for (std::int64_t ch = 0; ch < 3; ++ch) {
      img.pixels[static_cast<std::size_t>(p * 3 + ch)] = to_pixel(image[static_cast<std::size_t>(ch * w * h + p)]);
    }
  }
  return img;
}

}  // namespace mtat
