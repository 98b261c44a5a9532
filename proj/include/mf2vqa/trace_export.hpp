#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "mf2vqa/fusion.hpp"

namespace mf2 {

inline std::string trace_csv_name(std::size_t layer, std::size_t head) {
  return "layer" + std::to_string(layer) + "_head" + std::to_string(head) + ".csv";
}

inline constexpr const char* kTraceHeatmapName = "cls_visual.pgm";
inline constexpr std::size_t kTraceCellPixels = 8;

/// Writes one CSV per (layer, head) into `dir` (header row and first column
/// are slot-role labels) and a PGM heatmap of the CLS row restricted to the
/// visual slots: one band per (layer, head), one cell per stage, min-max
/// normalised over the whole image.
inline void export_trace(const AttentionTrace& trace, const std::string& dir) {
  if (trace.weights.empty()) throw ContractError("export_trace: no attention recorded");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create trace directory '" + dir + "': " + ec.message());
  const auto labels = trace.layout.role_labels();
  const std::size_t T = trace.length;
  for (std::size_t l = 0; l < trace.weights.size(); ++l) {
    for (std::size_t h = 0; h < trace.weights[l].size(); ++h) {
      const std::string path = (std::filesystem::path(dir) / trace_csv_name(l + 1, h + 1)).string();
      std::ofstream out(path);
      if (!out) throw IoError("cannot open '" + path + "' for writing");
      out << std::setprecision(std::numeric_limits<double>::max_digits10);
      out << "role";
      for (const auto& lab : labels) out << ',' << lab;
      out << '\n';
      const auto& w = trace.weights[l][h];
      for (std::size_t i = 0; i < T; ++i) {
        out << labels[i];
        for (std::size_t j = 0; j < T; ++j) out << ',' << w[i * T + j];
        out << '\n';
      }
      if (!out) throw IoError("write failed for '" + path + "'");
    }
  }

  const std::size_t S = trace.layout.stages;
  const std::size_t first_vis = trace.layout.visual_slot(1);
  std::vector<double> cells;
  for (const auto& layer : trace.weights)
    for (const auto& w : layer)
      for (std::size_t s = 0; s < S; ++s) cells.push_back(w[first_vis + s]);  // CLS is row 0
  const auto [lo_it, hi_it] = std::minmax_element(cells.begin(), cells.end());
  const double lo = *lo_it, hi = *hi_it;
  const std::size_t bands = cells.size() / S, cell = kTraceCellPixels;
  const std::string path = (std::filesystem::path(dir) / kTraceHeatmapName).string();
  std::ofstream pgm(path, std::ios::binary);
  if (!pgm) throw IoError("cannot open '" + path + "' for writing");
  pgm << "P5\n" << S * cell << " " << bands * cell << "\n255\n";
  for (std::size_t b = 0; b < bands; ++b)
    for (std::size_t py = 0; py < cell; ++py)
      for (std::size_t s = 0; s < S; ++s) {
        const double v = hi > lo ? (cells[b * S + s] - lo) / (hi - lo) : 0.5;
        const auto byte = static_cast<unsigned char>(std::lround(v * 255.0));
        for (std::size_t px = 0; px < cell; ++px) pgm.put(static_cast<char>(byte));
      }
  if (!pgm) throw IoError("write failed for '" + path + "'");
}

struct TraceCsv {
  std::vector<std::string> labels;
  std::vector<double> weights;  // labels.size()^2, row-major
};

inline TraceCsv read_trace_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  TraceCsv csv;
  std::string line, cell;
  if (!std::getline(in, line)) throw DataError("trace csv '" + path + "' is empty", 1);
  std::istringstream header(line);
  std::getline(header, cell, ',');
  while (std::getline(header, cell, ',')) csv.labels.push_back(cell);
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    std::istringstream ss(line);
    std::getline(ss, cell, ',');
    if (row > csv.labels.size() || cell != csv.labels[row - 1]) {
      throw DataError("trace csv '" + path + "': unexpected row label '" + cell + "'", row + 1);
    }
    std::size_t cols = 0;
    while (std::getline(ss, cell, ',')) {
      csv.weights.push_back(std::stod(cell));
      ++cols;
    }
    if (cols != csv.labels.size()) throw DataError("trace csv '" + path + "': ragged row", row + 1);
  }
  if (row != csv.labels.size()) throw DataError("trace csv '" + path + "': row count mismatch", row + 1);
  return csv;
}

}  // namespace mf2
