#include "lwf/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "lwf/binary_io.hpp"
#include "lwf/errors.hpp"

namespace lwf {

namespace {

constexpr double kWidth = 640, kHeight = 400;
constexpr double kLeft = 60, kRight = 150, kTop = 40, kBottom = 50;
const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<':
        out += "&lt;";
        break;
      case '>':
        out += "&gt;";
        break;
      case '&':
        out += "&amp;";
        break;
      case '"':
        out += "&quot;";
        break;
      default:
        out += c;
    }
  }
  return out;
}

double nice_step(double span) {
  const double raw = span / 5.0;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  for (double m : {1.0, 2.0, 5.0, 10.0}) {
    if (raw <= m * mag) return m * mag;
  }
  return 10.0 * mag;
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

std::string render_svg(const LineChart& chart) {
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  bool first = true;
  for (const Series& s : chart.series) {
    for (const auto& [x, y] : s.points) {
      if (first) {
        x0 = x1 = x;
        y0 = y1 = y;
        first = false;
      }
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  if (x1 <= x0) x1 = x0 + 1;
  if (y1 <= y0) y1 = y0 + 1;
  const double ystep = nice_step(y1 - y0);
  y0 = std::floor(y0 / ystep) * ystep;
  y1 = std::ceil(y1 / ystep) * ystep;
  const double xstep = nice_step(x1 - x0);

  const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
  auto px = [&](double x) { return kLeft + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return kTop + (1.0 - (y - y0) / (y1 - y0)) * ph; };

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << kWidth / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << escape(chart.title)
    << "</text>\n";
  for (double y = y0; y <= y1 + 1e-9; y += ystep) {
    o << "<line x1=\"" << num(kLeft) << "\" y1=\"" << num(py(y)) << "\" x2=\"" << num(kLeft + pw) << "\" y2=\""
      << num(py(y)) << "\" stroke=\"#e0e0e0\"/>\n";
    o << "<text x=\"" << num(kLeft - 6) << "\" y=\"" << num(py(y) + 4) << "\" text-anchor=\"end\">" << num(y)
      << "</text>\n";
  }
  for (double x = std::ceil(x0 / xstep) * xstep; x <= x1 + 1e-9; x += xstep) {
    o << "<text x=\"" << num(px(x)) << "\" y=\"" << num(kTop + ph + 16) << "\" text-anchor=\"middle\">" << x
      << "</text>\n";
  }
  o << "<rect x=\"" << num(kLeft) << "\" y=\"" << num(kTop) << "\" width=\"" << num(pw) << "\" height=\"" << num(ph)
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  o << "<text x=\"" << num(kLeft + pw / 2) << "\" y=\"" << num(kHeight - 12) << "\" text-anchor=\"middle\">"
    << escape(chart.x_label) << "</text>\n";
  o << "<text transform=\"translate(16," << num(kTop + ph / 2) << ") rotate(-90)\" text-anchor=\"middle\">"
    << escape(chart.y_label) << "</text>\n";
  for (std::size_t i = 0; i < chart.series.size(); ++i) {
    const Series& s = chart.series[i];
    const char* color = kPalette[i % std::size(kPalette)];
    o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, y] : s.points) o << num(px(x)) << "," << num(py(y)) << " ";
    o << "\"/>\n";
    const double ly = kTop + 10 + 16 * static_cast<double>(i);
    o << "<line x1=\"" << num(kLeft + pw + 10) << "\" y1=\"" << num(ly) << "\" x2=\"" << num(kLeft + pw + 30)
      << "\" y2=\"" << num(ly) << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << num(kLeft + pw + 34) << "\" y=\"" << num(ly + 4) << "\">" << escape(s.name) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

std::vector<MetricRow> parse_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw DataError("metrics CSV is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kMetricsHeader) throw DataError("not a metrics CSV (header '" + line + "')");
  std::vector<MetricRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_line(line);
    if (f.size() != 9) throw DataError("metrics CSV line " + std::to_string(lineno) + ": expected 9 fields");
    try {
      rows.push_back(MetricRow{f[0], f[1], f[2], std::stod(f[3]), std::stoull(f[4]),
                               static_cast<std::size_t>(std::stoull(f[5])), std::stoi(f[6]), f[7], std::stod(f[8])});
    } catch (const std::exception&) {
      throw DataError("metrics CSV line " + std::to_string(lineno) + ": malformed number");
    }
  }
  return rows;
}

std::string markdown_tables(const std::vector<AccuracyTable>& tables) {
  std::string out;
  for (const AccuracyTable& t : tables) {
    out += "### " + t.strategy + " (order " + t.order + ", seed " + std::to_string(t.seed) + ")\n\n";
    out += "| task | initial (%) | final (%) |\n|---|---|---|\n";
    for (const AccuracyRow& r : t.rows) {
      out += "| " + std::to_string(r.task_id) + " " + task_spec(r.task_id).name + " | " + format_pct(r.initial_pct) +
             " | " + format_pct(r.final_pct) + " |\n";
    }
    out += "| average of final | | " + format_pct(t.average_final_pct) + " |\n\n";
  }
  return out;
}

std::vector<std::filesystem::path> render_report(const std::filesystem::path& in_dir,
                                                 const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(in_dir)) throw DataError("report input " + in_dir.string() + " is not a directory");
  std::vector<fs::path> csvs;
  for (const auto& entry : fs::recursive_directory_iterator(in_dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".csv") csvs.push_back(entry.path());
  }
  std::sort(csvs.begin(), csvs.end());

  std::map<std::string, std::vector<MetricRow>> by_run;
  std::string summary = "# Run summary\n\n";
  std::vector<fs::path> written;
  for (const fs::path& p : csvs) {
    const std::string text = read_file_text(p);
    if (text.rfind(std::string(kMetricsHeader), 0) == 0) {
      for (MetricRow& r : parse_metrics_csv(text)) by_run[r.run_id].push_back(std::move(r));
    } else if (text.rfind("strategy,order,seed,task,initial,final", 0) == 0) {
      summary += "## " + fs::relative(p, in_dir).string() + "\n\n| strategy | order | seed | task | initial (%) | final (%) |\n|---|---|---|---|---|---|\n";
      std::istringstream in(text);
      std::string line;
      std::getline(in, line);
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::string row = "|";
        for (const std::string& f : split_line(line)) row += " " + f + " |";
        summary += row + "\n";
      }
      summary += "\n";
    }
  }
  if (by_run.empty() && summary.size() < 20) {
    throw DataError("no metrics or table CSVs found under " + in_dir.string());
  }

  summary += "## Last-epoch accuracy per run\n\n| run | task | epochs | last accuracy (%) | best accuracy (%) |\n|---|---|---|---|---|\n";
  for (const auto& [run, rows] : by_run) {
    std::map<int, Series> per_task;
    for (const MetricRow& r : rows) {
      Series& s = per_task[r.task];
      s.name = "task " + std::to_string(r.task) + " " + task_spec(r.task).name;
      s.points.emplace_back(static_cast<double>(r.epoch), r.accuracy);
    }
    LineChart chart{run, "epoch", "test accuracy (%)", {}};
    for (auto& [task, s] : per_task) {
      double best = 0;
      for (const auto& pt : s.points) best = std::max(best, pt.second);
      summary += "| " + run + " | " + std::to_string(task) + " | " + std::to_string(s.points.size()) + " | " +
                 format_pct(s.points.back().second) + " | " + format_pct(best) + " |\n";
      chart.series.push_back(std::move(s));
    }
    const fs::path svg = out_dir / (run + ".svg");
    write_file_atomic(svg, render_svg(chart));
    written.push_back(svg);
  }
  const fs::path md = out_dir / "summary.md";
  write_file_atomic(md, summary);
  written.push_back(md);
  return written;
}

}  // namespace lwf
