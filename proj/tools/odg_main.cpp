// Command-line front end: train / eval / ablate / gradcheck / report /
// gen-data over JSON experiment configs.

#include "opendg/config.hpp"
#include "opendg/engine.hpp"
#include "opendg/report.hpp"
#include "opendg/sweep.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using opendg::config::ExperimentConfig;

namespace {

struct Overrides {
  std::string config_path;
  std::string out_dir;
  std::string track;
  std::string split_depth;
  std::string loss_weights;  // "ce,disc,sm"
  std::string bands_mu;      // "a,b"
  std::string bands_sigma;
  std::string noise;         // "mean,std"
  long long seed = -1;
};

void add_common_flags(CLI::App* cmd, Overrides& ov, bool config_required) {
  auto* opt = cmd->add_option("--config", ov.config_path, "experiment config (JSON)");
  if (config_required) opt->required();
  cmd->add_option("--out-dir", ov.out_dir, "output directory (overrides config)");
  cmd->add_option("--seed", ov.seed, "training seed override");
  cmd->add_option("--track", ov.track, "track override: synthetic|digits|custom-manifest");
  cmd->add_option("--split-depth", ov.split_depth,
                  "encoder split override: shallow|default|deep|toy");
  cmd->add_option("--loss-weights", ov.loss_weights, "w_ce,w_disc,w_sm override");
  cmd->add_option("--bands-mu", ov.bands_mu, "mean style band a,b");
  cmd->add_option("--bands-sigma", ov.bands_sigma, "std style band a,b");
  cmd->add_option("--noise", ov.noise, "style noise mean,std");
}

std::vector<double> parse_csv_numbers(const std::string& s, std::size_t expect,
                                      const std::string& what) {
  std::vector<double> out;
  std::istringstream is(s);
  std::string tok;
  while (std::getline(is, tok, ',')) out.push_back(std::stod(tok));
  if (out.size() != expect)
    throw std::invalid_argument(what + " expects " + std::to_string(expect) +
                                " comma-separated numbers");
  return out;
}

ExperimentConfig load_with_overrides(const Overrides& ov) {
  ExperimentConfig cfg = ov.config_path.empty()
                             ? ExperimentConfig{}
                             : opendg::config::load_config_file(ov.config_path);
  if (!ov.out_dir.empty()) cfg.out_dir = ov.out_dir;
  if (!ov.track.empty()) cfg.track = ov.track;
  if (!ov.split_depth.empty()) cfg.split_depth = ov.split_depth;
  if (ov.seed >= 0) cfg.train.seed = static_cast<std::uint64_t>(ov.seed);
  if (!ov.loss_weights.empty()) {
    auto w = parse_csv_numbers(ov.loss_weights, 3, "--loss-weights");
    cfg.train.weights = {w[0], w[1], w[2]};
  }
  if (!ov.bands_mu.empty()) {
    auto b = parse_csv_numbers(ov.bands_mu, 2, "--bands-mu");
    cfg.train.band_mean = {b[0], b[1]};
  }
  if (!ov.bands_sigma.empty()) {
    auto b = parse_csv_numbers(ov.bands_sigma, 2, "--bands-sigma");
    cfg.train.band_std = {b[0], b[1]};
  }
  if (!ov.noise.empty()) {
    auto nz = parse_csv_numbers(ov.noise, 2, "--noise");
    cfg.train.noise = {nz[0], nz[1]};
  }
  return cfg;
}

void write_json_atomic(const std::string& path, const nlohmann::json& j) {
  const std::string tmp = path + ".tmp";
  std::ofstream f(tmp, std::ios::trunc);
  f << j.dump(2) << "\n";
  f.close();
  fs::rename(tmp, path);
}

void write_eval_table(const std::string& path, const opendg::engine::EvalReport& rep) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << std::setw(12) << "target" << std::setw(9) << "acc_k" << std::setw(9)
     << "acc_u" << std::setw(9) << "acc" << std::setw(9) << "hs" << "\n";
  for (const auto& row : rep.per_domain)
    os << std::setw(12) << ("domain_" + std::to_string(row.domain))
       << std::setw(9) << row.acc_k << std::setw(9) << row.acc_u << std::setw(9)
       << row.acc << std::setw(9) << row.hs << "\n";
  os << std::setw(12) << "average" << std::setw(9) << rep.acc_k << std::setw(9)
     << rep.acc_u << std::setw(9) << rep.acc << std::setw(9) << rep.hs << "\n";
  const std::string tmp = path + ".tmp";
  std::ofstream f(tmp, std::ios::trunc);
  f << os.str();
  f.close();
  fs::rename(tmp, path);
  std::cout << os.str();
}

int cmd_train(const Overrides& ov) {
  ExperimentConfig cfg = load_with_overrides(ov);
  fs::create_directories(cfg.out_dir);
  opendg::config::write_effective_config(cfg, cfg.out_dir);
  opendg::config::TrackData data = opendg::config::build_track_data(cfg);
  opendg::engine::Model model = opendg::engine::make_model(
      opendg::backbone::split_depth_from_string(cfg.split_depth),
      data.num_known, !cfg.train.closed_set, cfg.train.seed);
  opendg::engine::TrainResult res =
      opendg::engine::train(model, data.train, cfg.train, cfg.out_dir);
  std::cout << "trained " << res.steps << " steps; final weighted loss "
            << res.final_total << "\n"
            << "checkpoint: " << cfg.out_dir << "/checkpoint.ckpt\n";
  return 0;
}

int cmd_eval(const Overrides& ov, const std::string& checkpoint_path) {
  ExperimentConfig cfg = load_with_overrides(ov);
  opendg::engine::Model model = opendg::engine::load_model(checkpoint_path);
  opendg::config::TrackData data = opendg::config::build_track_data(cfg);
  if (data.num_known != model.num_known)
    throw std::invalid_argument(
        "eval: checkpoint known-class count does not match the config");
  opendg::engine::EvalReport rep = opendg::engine::evaluate(model, data.eval);
  fs::create_directories(cfg.out_dir);
  opendg::config::write_effective_config(cfg, cfg.out_dir);
  write_json_atomic(cfg.out_dir + "/eval_report.json", rep.to_json());
  write_eval_table(cfg.out_dir + "/eval_report.txt", rep);
  return 0;
}

int cmd_ablate(const Overrides& ov, const std::string& axis, int parallel) {
  ExperimentConfig cfg = load_with_overrides(ov);
  const std::string sweep_dir = cfg.out_dir + "/sweep_" + axis;
  opendg::sweep::SweepResult res =
      opendg::sweep::run_sweep(cfg, axis, parallel, sweep_dir);
  opendg::sweep::write_sweep_outputs(res, sweep_dir);
  std::cout << "sweep '" << axis << "': " << res.cells.size() << " cells, "
            << res.failures << " failed; outputs in " << sweep_dir << "\n";
  if (res.failures > 0) {
    for (const auto& c : res.cells)
      if (c.failed) std::cout << "  failed cell: " << c.label << ": " << c.error << "\n";
    return 1;
  }
  return 0;
}

int cmd_gradcheck(const std::string& out_dir, std::uint64_t seed, double step) {
  using opendg::engine::GradComponent;
  const GradComponent comps[] = {GradComponent::Ssnet, GradComponent::Fanet,
                                 GradComponent::Head, GradComponent::Losses};
  const char* names[] = {"ssnet", "fanet", "head", "losses"};
  bool all_pass = true;
  nlohmann::json combined = nlohmann::json::array();
  for (int i = 0; i < 4; ++i) {
    opendg::engine::GradCheckReport rep =
        opendg::engine::grad_check(comps[i], seed, step);
    all_pass = all_pass && rep.pass;
    nlohmann::json j = rep.to_json();
    j["component"] = names[i];
    combined.push_back(j);
    for (const auto& g : rep.groups)
      std::cout << (g.pass ? "[pass] " : "[FAIL] ") << g.name
                << " max_rel_error=" << g.max_rel_error << " checked=" << g.checked
                << "\n";
  }
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_json_atomic(out_dir + "/gradcheck_report.json", combined);
  }
  return all_pass ? 0 : 1;
}

int cmd_report(const std::string& log_dir, const std::string& out_dir) {
  const std::string dst = out_dir.empty() ? log_dir + "/report" : out_dir;
  const int found = opendg::report::write_report(log_dir, dst);
  if (found == 0) {
    std::cerr << "no runs found in " << log_dir << "\n";
    return 1;
  }
  std::cout << "report over " << found << " artifact(s): " << dst << "/summary.md\n";
  return 0;
}

int cmd_gen_data(const Overrides& ov) {
  ExperimentConfig cfg = load_with_overrides(ov);
  if (cfg.track != "synthetic")
    throw std::invalid_argument("gen-data only applies to the synthetic track");
  opendg::data::Dataset ds = opendg::config::build_synthetic_raw(cfg);
  fs::create_directories(cfg.out_dir);
  opendg::data::write_dataset(ds, cfg.out_dir);
  opendg::config::write_effective_config(cfg, cfg.out_dir);
  std::cout << "wrote " << ds.samples.size() << " images + manifest to "
            << cfg.out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"single-source open-domain generalization toolkit"};
  app.require_subcommand(1);

  Overrides ov_train, ov_eval, ov_ablate, ov_gen;
  std::string checkpoint_path, axis, log_dir, report_out, grad_out;
  int parallel = 1;
  std::uint64_t grad_seed = 0;
  double grad_step = 1e-5;

  CLI::App* train = app.add_subcommand("train", "train a model from a config");
  add_common_flags(train, ov_train, true);

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on the target spec");
  add_common_flags(eval, ov_eval, true);
  eval->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();

  CLI::App* ablate = app.add_subcommand("ablate", "run an ablation sweep");
  add_common_flags(ablate, ov_ablate, true);
  ablate->add_option("--axis", axis,
                     "margin-bands|noise|ssb-vs-mixstyle|fab-vs-adhoc|"
                     "split-depth|known-classes")
      ->required();
  ablate->add_option("--parallel", parallel, "cells in flight (default 1)");

  CLI::App* gradcheck = app.add_subcommand("gradcheck",
                                           "finite-difference gradient checks");
  gradcheck->add_option("--out-dir", grad_out, "where to write the report");
  gradcheck->add_option("--seed", grad_seed, "batch seed");
  gradcheck->add_option("--step", grad_step, "finite-difference step");

  CLI::App* report = app.add_subcommand("report", "summarize runs in a log dir");
  report->add_option("--log-dir", log_dir, "directory of runs")->required();
  report->add_option("--out-dir", report_out, "report destination");

  CLI::App* gen = app.add_subcommand("gen-data", "write the synthetic dataset to disk");
  add_common_flags(gen, ov_gen, true);

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return cmd_train(ov_train);
    if (eval->parsed()) return cmd_eval(ov_eval, checkpoint_path);
    if (ablate->parsed()) return cmd_ablate(ov_ablate, axis, parallel);
    if (gradcheck->parsed()) return cmd_gradcheck(grad_out, grad_seed, grad_step);
    if (report->parsed()) return cmd_report(log_dir, report_out);
    if (gen->parsed()) return cmd_gen_data(ov_gen);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
