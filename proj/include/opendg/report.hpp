#pragma once

#include <string>
#include <vector>

namespace opendg::report {

struct Series {
  std::string name;
  std::vector<double> x, y;
};

// Minimal static SVG line plot: axes, ticks, legend.
std::string render_line_plot(const std::string& title,
                             const std::vector<Series>& series, int width = 520,
                             int height = 340);

// Two-panel variant used for the known-class sweep (acc and hs side by side).
std::string render_two_panel(const std::string& left_title,
                             const std::vector<Series>& left,
                             const std::string& right_title,
                             const std::vector<Series>& right);

// Scans a log directory for runs (loss_log.tsv / eval_report.json /
// grid.json), writes summary.md plus SVG plots. Returns the number of runs
// found; zero means nothing to report.
int write_report(const std::string& log_dir, const std::string& out_dir);

}  // namespace opendg::report
