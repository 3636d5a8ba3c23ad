#pragma once

#include "opendg/config.hpp"

#include <string>
#include <vector>

namespace opendg::sweep {

// One trained-and-evaluated sweep cell.
struct CellResult {
  std::string label;
  int row = 0, col = 0;  // grid position (margin sweep) or column index
  double acc = 0.0, hs = 0.0, acc_k = 0.0, acc_u = 0.0;
  bool failed = false;
  std::string error;
};

struct SweepResult {
  std::string axis;
  std::vector<CellResult> cells;
  std::vector<std::string> row_labels;  // margin sweep: mean bands
  std::vector<std::string> col_labels;  // margin sweep: std bands, else columns
  int failures = 0;
};

// Known axes: margin-bands (5x5), noise, ssb-vs-mixstyle, fab-vs-adhoc,
// split-depth, known-classes. Unknown axes are rejected. Cells run
// sequentially unless parallel > 1.
SweepResult run_sweep(const config::ExperimentConfig& base,
                      const std::string& axis, int parallel,
                      const std::string& out_dir);

// Emits grid.json plus aligned-text tables shaped like the corresponding
// result tables (5x5 acc/hs grids for the margin sweep, columns otherwise).
void write_sweep_outputs(const SweepResult& result, const std::string& out_dir);

}  // namespace opendg::sweep
