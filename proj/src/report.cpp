#include "opendg/report.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace opendg::report {

namespace {

const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                         "#ff7f0e", "#8c564b"};

struct Extent {
  double lo = 0.0, hi = 1.0;
};

Extent extent_of(const std::vector<Series>& series, bool x_axis) {
  Extent e{1e300, -1e300};
  for (const Series& s : series)
    for (double v : (x_axis ? s.x : s.y)) {
      e.lo = std::min(e.lo, v);
      e.hi = std::max(e.hi, v);
    }
  if (e.lo > e.hi) return {0.0, 1.0};
  if (e.hi - e.lo < 1e-12) {
    e.lo -= 0.5;
    e.hi += 0.5;
  }
  return e;
}

void render_panel(std::ostringstream& svg, const std::string& title,
                  const std::vector<Series>& series, double ox, double oy,
                  double w, double h) {
  const double ml = 46, mb = 30, mt = 24, mr = 10;
  const double px = ox + ml, py = oy + mt;
  const double pw = w - ml - mr, ph = h - mt - mb;
  Extent xe = extent_of(series, true), ye = extent_of(series, false);

  svg << "<text x='" << ox + w / 2 << "' y='" << oy + 14
      << "' text-anchor='middle' font-size='13'>" << title << "</text>\n";
  svg << "<rect x='" << px << "' y='" << py << "' width='" << pw
      << "' height='" << ph << "' fill='none' stroke='#444'/>\n";

  auto sx = [&](double v) { return px + (v - xe.lo) / (xe.hi - xe.lo) * pw; };
  auto sy = [&](double v) { return py + ph - (v - ye.lo) / (ye.hi - ye.lo) * ph; };

  for (int t = 0; t <= 4; ++t) {
    const double vx = xe.lo + (xe.hi - xe.lo) * t / 4.0;
    const double vy = ye.lo + (ye.hi - ye.lo) * t / 4.0;
    svg << "<text x='" << sx(vx) << "' y='" << py + ph + 16
        << "' text-anchor='middle' font-size='10'>" << std::setprecision(3)
        << vx << "</text>\n";
    svg << "<text x='" << px - 6 << "' y='" << sy(vy) + 3
        << "' text-anchor='end' font-size='10'>" << std::setprecision(3) << vy
        << "</text>\n";
  }

  int color = 0;
  double legend_y = py + 12;
  for (const Series& s : series) {
    const char* c = kColors[color++ % 6];
    svg << "<polyline fill='none' stroke='" << c << "' stroke-width='1.5' points='";
    for (std::size_t i = 0; i < s.x.size(); ++i)
      svg << sx(s.x[i]) << "," << sy(s.y[i]) << " ";
    svg << "'/>\n";
    svg << "<text x='" << px + pw - 4 << "' y='" << legend_y
        << "' text-anchor='end' font-size='10' fill='" << c << "'>" << s.name
        << "</text>\n";
    legend_y += 12;
  }
}

}  // namespace

std::string render_line_plot(const std::string& title,
                             const std::vector<Series>& series, int width,
                             int height) {
  std::ostringstream svg;
  svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width
      << "' height='" << height << "' font-family='sans-serif'>\n";
  render_panel(svg, title, series, 0, 0, width, height);
  svg << "</svg>\n";
  return svg.str();
}

std::string render_two_panel(const std::string& left_title,
                             const std::vector<Series>& left,
                             const std::string& right_title,
                             const std::vector<Series>& right) {
  const int w = 520, h = 340;
  std::ostringstream svg;
  svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << 2 * w
      << "' height='" << h << "' font-family='sans-serif'>\n";
  render_panel(svg, left_title, left, 0, 0, w, h);
  render_panel(svg, right_title, right, w, 0, w, h);
  svg << "</svg>\n";
  return svg.str();
}

namespace {

void write_text(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  std::ofstream f(tmp, std::ios::trunc);
  f << text;
  f.close();
  fs::rename(tmp, path);
}

struct RunInfo {
  std::string name;
  fs::path dir;
  bool has_losses = false;
  bool has_eval = false;
  json eval;
};

std::vector<Series> load_loss_series(const fs::path& tsv) {
  std::map<std::string, Series> by_component;
  std::ifstream f(tsv);
  std::string line;
  std::getline(f, line);  // header
  while (std::getline(f, line)) {
    std::istringstream ls(line);
    int step;
    std::string comp;
    double value;
    if (ls >> step >> comp >> value) {
      Series& s = by_component[comp];
      s.name = comp;
      s.x.push_back(step);
      s.y.push_back(value);
    }
  }
  std::vector<Series> out;
  for (auto& [k, s] : by_component) out.push_back(std::move(s));
  return out;
}

}  // namespace

int write_report(const std::string& log_dir, const std::string& out_dir) {
  std::vector<RunInfo> runs;
  std::vector<fs::path> grids;
  if (fs::exists(log_dir)) {
    for (const auto& entry : fs::recursive_directory_iterator(log_dir)) {
      if (!entry.is_regular_file()) continue;
      const fs::path p = entry.path();
      if (p.filename() == "loss_log.tsv" || p.filename() == "eval_report.json") {
        const fs::path dir = p.parent_path();
        auto it = std::find_if(runs.begin(), runs.end(),
                               [&](const RunInfo& r) { return r.dir == dir; });
        if (it == runs.end()) {
          RunInfo r;
          r.dir = dir;
          r.name = fs::relative(dir, log_dir).string();
          if (r.name == ".") r.name = "run";
          runs.push_back(r);
          it = runs.end() - 1;
        }
        if (p.filename() == "loss_log.tsv") it->has_losses = true;
        if (p.filename() == "eval_report.json") {
          it->has_eval = true;
          std::ifstream f(p);
          try {
            it->eval = json::parse(f);
          } catch (...) {
            it->has_eval = false;
          }
        }
      } else if (p.filename() == "grid.json") {
        grids.push_back(p);
      }
    }
  }
  if (runs.empty() && grids.empty()) return 0;

  fs::create_directories(out_dir);
  std::ostringstream md;
  md << "# Experiment report\n\nScanned `" << log_dir << "`, found "
     << runs.size() << " run(s).\n\n";

  if (!runs.empty()) {
    md << "| run | acc_k | acc_u | acc | hs |\n";
    md << "|-----|-------|-------|-----|----|\n";
  }
  int plot_id = 0;
  for (RunInfo& r : runs) {
    std::string row_name = r.name;
    std::replace(row_name.begin(), row_name.end(), '|', '/');
    if (r.has_eval) {
      md << "| " << row_name << " | " << std::fixed << std::setprecision(2)
         << r.eval.value("acc_k", 0.0) << " | " << r.eval.value("acc_u", 0.0)
         << " | " << r.eval.value("acc", 0.0) << " | " << r.eval.value("hs", 0.0)
         << " |\n";
    } else {
      md << "| " << row_name << " | - | - | - | - |\n";
    }
    if (r.has_losses) {
      std::vector<Series> series = load_loss_series(r.dir / "loss_log.tsv");
      if (!series.empty()) {
        std::string fname = "loss_curves_" + std::to_string(plot_id++) + ".svg";
        write_text(out_dir + "/" + fname,
                   render_line_plot("loss components: " + r.name, series));
      }
    }
  }

  // known-class sweep plot: one curve per method, panels for acc and hs
  for (const fs::path& g : grids) {
    std::ifstream f(g);
    json j;
    try {
      j = json::parse(f);
    } catch (...) {
      continue;
    }
    if (j.value("axis", "") != "known-classes") continue;
    const std::vector<std::string> methods = {"full", "no_disc", "erm"};
    std::vector<Series> acc(methods.size()), hs(methods.size());
    for (std::size_t m = 0; m < methods.size(); ++m) {
      acc[m].name = methods[m];
      hs[m].name = methods[m];
    }
    for (const json& cell : j["cells"]) {
      if (cell.value("failed", false)) continue;
      const int col = cell.value("col", 0);
      if (col < 0 || col >= static_cast<int>(methods.size())) continue;
      acc[col].x.push_back(cell.value("row", 0));
      acc[col].y.push_back(cell.value("acc", 0.0));
      hs[col].x.push_back(cell.value("row", 0));
      hs[col].y.push_back(cell.value("hs", 0.0));
    }
    write_text(out_dir + "/known_class_sweep.svg",
               render_two_panel("accuracy vs known classes", acc,
                                "h-score vs known classes", hs));
    md << "\nKnown-class sweep plot: `known_class_sweep.svg`\n";
  }

  write_text(out_dir + "/summary.md", md.str());
  return static_cast<int>(runs.size() + grids.size());
}

}  // namespace opendg::report
