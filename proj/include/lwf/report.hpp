#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "lwf/experiments.hpp"

namespace lwf {

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

struct LineChart {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> series;
};

// Standalone SVG document with axes, ticks and a legend.
std::string render_svg(const LineChart& chart);

struct MetricRow {
  std::string run_id;
  std::string strategy;
  std::string order;
  double temperature = 0.0;
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  int task = 0;
  std::string split;
  double accuracy = 0.0;  // percent
};

// DataError on a header or field that does not match the metrics schema.
std::vector<MetricRow> parse_metrics_csv(const std::string& text);

std::string markdown_tables(const std::vector<AccuracyTable>& tables);

// Renders every metrics CSV under `in_dir` into per-run accuracy charts and a
// summary.md. Returns the files written.
std::vector<std::filesystem::path> render_report(const std::filesystem::path& in_dir,
                                                 const std::filesystem::path& out_dir);

}  // namespace lwf
