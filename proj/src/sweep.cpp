#include "opendg/sweep.hpp"

#include "opendg/log.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <future>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace opendg::sweep {

using config::ExperimentConfig;
using nlohmann::json;

namespace {

struct Cell {
  std::string label;
  int row = 0, col = 0;
  ExperimentConfig cfg;
  bool erm = false;  // built via erm_config
};

std::string band_label(double lo, double hi) {
  std::ostringstream os;
  os << "[" << lo << "," << hi << "]";
  return os.str();
}

std::vector<Cell> build_cells(const ExperimentConfig& base,
                              const std::string& axis, SweepResult& result) {
  std::vector<Cell> cells;
  if (axis == "margin-bands") {
    const double ranges[5][2] = {{0.1, 1}, {1, 2}, {2, 3}, {3, 4}, {4, 5}};
    for (int i = 0; i < 5; ++i)
      result.row_labels.push_back("mean" + band_label(ranges[i][0], ranges[i][1]));
    for (int j = 0; j < 5; ++j)
      result.col_labels.push_back("std" + band_label(ranges[j][0], ranges[j][1]));
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 5; ++j) {
        Cell c;
        c.cfg = base;
        c.cfg.train.band_mean = {ranges[i][0], ranges[i][1]};
        c.cfg.train.band_std = {ranges[j][0], ranges[j][1]};
        c.row = i;
        c.col = j;
        c.label = result.row_labels[i] + "x" + result.col_labels[j];
        cells.push_back(std::move(c));
      }
  } else if (axis == "noise") {
    const double params[4][2] = {{0, 1}, {1, 1}, {0, 2}, {0, 3}};
    for (int j = 0; j < 4; ++j) {
      Cell c;
      c.cfg = base;
      c.cfg.train.noise = {params[j][0], params[j][1]};
      c.col = j;
      std::ostringstream os;
      os << "N(" << params[j][0] << "," << params[j][1] << ")";
      c.label = os.str();
      result.col_labels.push_back(c.label);
      cells.push_back(std::move(c));
    }
  } else if (axis == "ssb-vs-mixstyle") {
    for (int j = 0; j < 2; ++j) {
      Cell c;
      c.cfg = base;
      c.cfg.train.style_mode =
          j == 0 ? engine::StyleMode::Synth : engine::StyleMode::MixStyle;
      c.col = j;
      c.label = j == 0 ? "ssb" : "mixstyle";
      result.col_labels.push_back(c.label);
      cells.push_back(std::move(c));
    }
  } else if (axis == "fab-vs-adhoc") {
    const engine::OpenMode modes[4] = {
        engine::OpenMode::Learned, engine::OpenMode::HalfCrop,
        engine::OpenMode::PixelMean, engine::OpenMode::PatchReplace};
    for (int j = 0; j < 4; ++j) {
      Cell c;
      c.cfg = base;
      c.cfg.train.open_mode = modes[j];
      c.col = j;
      c.label = engine::to_string(modes[j]);
      result.col_labels.push_back(c.label);
      cells.push_back(std::move(c));
    }
  } else if (axis == "split-depth") {
    const char* depths[3] = {"shallow", "default", "deep"};
    for (int j = 0; j < 3; ++j) {
      Cell c;
      c.cfg = base;
      c.cfg.split_depth = depths[j];
      c.col = j;
      c.label = depths[j];
      result.col_labels.push_back(c.label);
      cells.push_back(std::move(c));
    }
  } else if (axis == "known-classes") {
    // desk-scale analogue of the known-class-count study: three methods per
    // class count, plotted later by the report command
    const int counts[4] = {2, 4, 6, 8};
    const char* methods[3] = {"full", "no_disc", "erm"};
    for (int i = 0; i < 4; ++i) {
      if (counts[i] >= base.synth.num_classes) continue;
      for (int j = 0; j < 3; ++j) {
        Cell c;
        c.cfg = base;
        c.cfg.num_known = counts[i];
        c.cfg.known_labels.reset();
        if (std::string(methods[j]) == "no_disc") {
          c.cfg.train.weights.disc = 0.0;
        } else if (std::string(methods[j]) == "erm") {
          c.erm = true;
        }
        c.row = counts[i];
        c.col = j;
        c.label = "C" + std::to_string(counts[i]) + "_" + methods[j];
        cells.push_back(std::move(c));
      }
    }
    result.col_labels = {"full", "no_disc", "erm"};
  } else {
    throw std::invalid_argument("unknown sweep axis: " + axis);
  }
  return cells;
}

CellResult run_cell(const Cell& cell, const std::string& out_dir) {
  CellResult r;
  r.label = cell.label;
  r.row = cell.row;
  r.col = cell.col;
  try {
    config::TrackData data = config::build_track_data(cell.cfg);
    engine::TrainConfig tc = cell.cfg.train;
    if (cell.erm) tc = engine::erm_config(tc);
    engine::Model model = engine::make_model(
        backbone::split_depth_from_string(cell.cfg.split_depth),
        data.num_known, !tc.closed_set, tc.seed);
    const std::string cell_dir = out_dir + "/cells/" + cell.label;
    std::filesystem::create_directories(cell_dir);
    config::write_effective_config(cell.cfg, cell_dir);
    engine::train(model, data.train, tc, cell_dir);
    engine::EvalReport rep = engine::evaluate(model, data.eval);
    {
      const std::string tmp = cell_dir + "/eval_report.json.tmp";
      std::ofstream f(tmp, std::ios::trunc);
      f << rep.to_json().dump(2) << "\n";
      f.close();
      std::filesystem::rename(tmp, cell_dir + "/eval_report.json");
    }
    r.acc = rep.acc;
    r.hs = rep.hs;
    r.acc_k = rep.acc_k;
    r.acc_u = rep.acc_u;
  } catch (const std::exception& e) {
    r.failed = true;
    r.error = e.what();
  }
  return r;
}

}  // namespace

SweepResult run_sweep(const ExperimentConfig& base, const std::string& axis,
                      int parallel, const std::string& out_dir) {
  SweepResult result;
  result.axis = axis;
  std::vector<Cell> cells = build_cells(base, axis, result);
  std::filesystem::create_directories(out_dir);

  if (parallel <= 1) {
    for (const Cell& c : cells) result.cells.push_back(run_cell(c, out_dir));
  } else {
    std::vector<std::future<CellResult>> inflight;
    std::size_t next = 0;
    while (next < cells.size() || !inflight.empty()) {
      while (next < cells.size() &&
             inflight.size() < static_cast<std::size_t>(parallel)) {
        const Cell& c = cells[next++];
        inflight.push_back(std::async(std::launch::async, run_cell, c, out_dir));
      }
      result.cells.push_back(inflight.front().get());
      inflight.erase(inflight.begin());
    }
  }

  for (const CellResult& c : result.cells)
    if (c.failed) {
      ++result.failures;
      log_warn("sweep cell failed: " + c.label + ": " + c.error);
    }
  return result;
}

void write_sweep_outputs(const SweepResult& result, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);

  json j;
  j["axis"] = result.axis;
  j["failures"] = result.failures;
  j["cells"] = json::array();
  for (const CellResult& c : result.cells) {
    j["cells"].push_back({{"label", c.label},
                          {"row", c.row},
                          {"col", c.col},
                          {"acc", c.acc},
                          {"hs", c.hs},
                          {"acc_k", c.acc_k},
                          {"acc_u", c.acc_u},
                          {"failed", c.failed},
                          {"error", c.error}});
  }
  {
    const std::string tmp = out_dir + "/grid.json.tmp";
    std::ofstream f(tmp, std::ios::trunc);
    f << j.dump(2) << "\n";
    f.close();
    std::filesystem::rename(tmp, out_dir + "/grid.json");
  }

  auto write_grid = [&](const std::string& path, auto metric) {
    const std::string tmp = path + ".tmp";
    std::ofstream f(tmp, std::ios::trunc);
    f << std::fixed << std::setprecision(2);
    if (result.axis == "margin-bands") {
      f << std::setw(14) << "" << " ";
      for (const std::string& cl : result.col_labels)
        f << std::setw(12) << cl << " ";
      f << "\n";
      for (std::size_t i = 0; i < result.row_labels.size(); ++i) {
        f << std::setw(14) << result.row_labels[i] << " ";
        for (std::size_t jx = 0; jx < result.col_labels.size(); ++jx) {
          double v = 0.0;
          bool failed = true;
          for (const CellResult& c : result.cells)
            if (c.row == static_cast<int>(i) && c.col == static_cast<int>(jx)) {
              v = metric(c);
              failed = c.failed;
            }
          if (failed)
            f << std::setw(12) << "FAIL" << " ";
          else
            f << std::setw(12) << v << " ";
        }
        f << "\n";
      }
    } else {
      for (const std::string& cl : result.col_labels)
        f << std::setw(14) << cl << " ";
      f << "\n";
      // one row per distinct row id (single row for plain column sweeps)
      std::vector<int> rows;
      for (const CellResult& c : result.cells)
        if (std::find(rows.begin(), rows.end(), c.row) == rows.end())
          rows.push_back(c.row);
      for (int row : rows) {
        for (std::size_t jx = 0; jx < result.col_labels.size(); ++jx) {
          bool found = false;
          for (const CellResult& c : result.cells)
            if (c.row == row && c.col == static_cast<int>(jx)) {
              if (c.failed)
                f << std::setw(14) << "FAIL" << " ";
              else
                f << std::setw(14) << metric(c) << " ";
              found = true;
            }
          if (!found) f << std::setw(14) << "-" << " ";
        }
        f << "\n";
      }
    }
    f.close();
    std::filesystem::rename(tmp, path);
  };

  write_grid(out_dir + "/grid_acc.txt", [](const CellResult& c) { return c.acc; });
  write_grid(out_dir + "/grid_hs.txt", [](const CellResult& c) { return c.hs; });
}

}  // namespace opendg::sweep
