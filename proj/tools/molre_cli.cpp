// molre command-line harness: training runs, ablation sweeps, cost analysis,
// and the gradient-check suite, driven by JSON configs with presets and
// KEY=VALUE overrides.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "molre/molre.hpp"

namespace fs = std::filesystem;

namespace {

constexpr double kGradCheckTolerance = 1e-4;

std::size_t env_threads() {
  const char* v = std::getenv("MOLRE_THREADS");
  if (v == nullptr) return 1;
  try {
    const unsigned long n = std::stoul(v);
    return n >= 1 ? static_cast<std::size_t>(n) : 1;
  } catch (const std::exception&) {
    return 1;
  }
}

struct CommonFlags {
  std::string config_path;
  std::vector<std::string> sets;
  std::string preset;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
};

void add_common_flags(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_path, "JSON config file");
  cmd->add_option("--set", flags.sets, "Override KEY.PATH=VALUE (repeatable)");
  cmd->add_option("--preset", flags.preset,
                  "Preset: desk (d=32, N=4, k=2, r=8, 2 fusion layers, lr 1e-3), "
                  "paper-mosei (reference configuration for CMU-MOSEI-scale runs: d=768, N=15, "
                  "k=8, r=128, 5 fusion layers, batch 8, AdamW lr 1e-5, patience 8), "
                  "paper-mosi (same but r=64, k=11)");
  cmd->add_option("--seed", flags.seed, "Run seed (sets train.seed and data.seed)");
  cmd->add_option("--out", flags.out_dir, "Output directory");
}

molre::RunConfig resolve_config(const CommonFlags& flags) {
  nlohmann::json file_json;
  if (!flags.config_path.empty()) {
    std::ifstream in(flags.config_path);
    if (!in) throw molre::ConfigError("config: cannot open '" + flags.config_path + "'");
    file_json = nlohmann::json::parse(in, nullptr, false);
    if (file_json.is_discarded()) {
      throw molre::ConfigError("config: '" + flags.config_path + "' is not valid JSON");
    }
  }
  std::string base = "desk";
  if (!flags.preset.empty()) {
    base = flags.preset;
  } else if (file_json.is_object() && file_json.contains("preset")) {
    base = file_json.at("preset").get<std::string>();
  }
  molre::RunConfig cfg = molre::preset_config(base);
  if (file_json.is_object()) molre::apply_json(cfg, file_json);
  if (!flags.sets.empty()) {
    molre::ordered_json j = molre::to_json(cfg);
    for (const std::string& s : flags.sets) molre::apply_set(j, s);
    molre::RunConfig fresh = molre::preset_config(base);
    molre::apply_json(fresh, j);
    cfg = fresh;
  }
  if (flags.seed.has_value()) {
    cfg.train.seed = *flags.seed;
    cfg.data.seed = *flags.seed;
  }
  if (!flags.out_dir.empty()) cfg.out_dir = flags.out_dir;
  cfg.validate();
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw molre::Error("cannot write '" + path.string() + "'");
  out << text;
}

std::vector<molre::Sample> load_or_generate(const molre::RunConfig& cfg) {
  if (!cfg.feature_file.empty()) return molre::read_features(cfg.feature_file);
  return molre::generate_dataset(cfg.resolved_data()).samples;
}

struct RunOutputs {
  molre::TrainResult train;
  molre::EvalReport eval;
};

/// One full training run into `dir`: echoed config, streamed metrics,
/// final evaluation, final weights.
RunOutputs run_training(const molre::RunConfig& cfg, const fs::path& dir, bool timing) {
  fs::create_directories(dir);
  write_text(dir / "config.json", molre::to_json(cfg).dump(2) + "\n");

  std::vector<molre::Sample> samples = load_or_generate(cfg);
  molre::Model model =
      molre::Model::build(cfg.variant, cfg.resolved_model(), cfg.train.seed);

  std::ofstream metrics(dir / "metrics.jsonl", std::ios::trunc);
  RunOutputs out;
  out.train = molre::train(model, samples, cfg.train, &metrics, timing);
  metrics.close();

  // Evaluate on the validation split when one exists, otherwise on the
  // whole dataset.
  const std::size_t n_val = static_cast<std::size_t>(static_cast<double>(samples.size()) *
                                                     cfg.train.val_fraction);
  std::vector<molre::Sample> eval_set(
      n_val > 0 ? samples.end() - static_cast<std::ptrdiff_t>(n_val) : samples.begin(),
      samples.end());
  out.eval = molre::evaluate(model, eval_set, env_threads());

  nlohmann::ordered_json summary;
  summary["steps_run"] = out.train.steps_run;
  summary["early_stopped"] = out.train.early_stopped;
  if (!out.train.steps.empty()) {
    const molre::StepMetrics& last = out.train.steps.back();
    summary["final_l_mae"] = last.l_mae;
    summary["final_l_ce"] = last.l_ce;
    summary["final_l_joint"] = last.l_joint;
  }
  nlohmann::ordered_json report;
  report["train"] = summary;
  report["eval"] = molre::to_json(out.eval);
  write_text(dir / "final_eval.json", report.dump(2) + "\n");

  molre::save_weights((dir / "weights.bin").string(), model.parameter_names(),
                      model.parameters());
  return out;
}

int cmd_train(const CommonFlags& flags, bool timing) {
  molre::RunConfig cfg = resolve_config(flags);
  RunOutputs out = run_training(cfg, cfg.out_dir, timing);
  std::cout << "trained " << out.train.steps_run << " steps"
            << (out.train.early_stopped ? " (early stop)" : "") << ", outputs in " << cfg.out_dir
            << "\n";
  return 0;
}

int cmd_analyze(const CommonFlags& flags, std::size_t seq_len, bool no_shared, bool no_task,
                bool no_routers) {
  molre::RunConfig cfg = resolve_config(flags);
  molre::MoeInclusion inc;
  inc.shared_experts = !no_shared;
  inc.task_experts = !no_task;
  inc.routers = !no_routers;
  molre::CostReport rep = molre::compare_moe(cfg.resolved_model().molre, seq_len, inc);
  const std::string text = molre::cost_report_json(rep).dump(2) + "\n";
  std::cout << text;
  if (!flags.out_dir.empty()) {
    fs::create_directories(flags.out_dir);
    write_text(fs::path(flags.out_dir) / "cost_report.json", text);
  }
  return 0;
}

int cmd_gradcheck(std::size_t scale, std::uint64_t seed, const std::string& inject_fault) {
  if (!inject_fault.empty()) molre::testing_hooks::corrupt_backward_op = inject_fault;
  std::vector<molre::GradCheckCase> cases = molre::run_gradcheck_suite(scale, seed);
  molre::testing_hooks::corrupt_backward_op.clear();

  std::string first_failure;
  std::cout << std::left << std::setw(24) << "component" << std::setw(14) << "max_rel_err"
            << std::setw(10) << "checked" << std::setw(9) << "kinks"
            << "status\n";
  for (const molre::GradCheckCase& c : cases) {
    const bool ok = c.result.max_rel_err < kGradCheckTolerance;
    if (!ok && first_failure.empty()) first_failure = c.name;
    std::cout << std::left << std::setw(24) << c.name << std::setw(14)
              << std::scientific << std::setprecision(3) << c.result.max_rel_err
              << std::defaultfloat << std::setw(10) << c.result.checked << std::setw(9)
              << c.result.kink_coords.size() << (ok ? "PASS" : "FAIL") << "\n";
  }
  if (!first_failure.empty()) {
    std::cerr << "gradcheck failed: component '" << first_failure
              << "' exceeds tolerance " << kGradCheckTolerance << "\n";
    return 3;
  }
  return 0;
}

struct SweepRow {
  std::string value;
  std::size_t steps = 0;
  double l_joint = 0.0;
  molre::EvalReport eval;
};

int cmd_sweep(const CommonFlags& flags, const std::string& axis, std::vector<std::string> values) {
  if (axis != "n_experts" && axis != "top_k" && axis != "rank") {
    throw molre::ConfigError("sweep.axis: expected n_experts, top_k, or rank, got '" + axis + "'");
  }
  molre::RunConfig base = resolve_config(flags);
  if (values.empty()) {
    if (axis == "rank") {
      values = molre::default_rank_sweep();
    } else if (axis == "top_k") {
      for (std::size_t k = 1; k <= base.model.molre.n_experts; ++k) {
        values.push_back(std::to_string(k));
      }
    } else {
      values = {"2", "4", "8"};
    }
  }

  // Validate every point before running any.
  std::vector<molre::RunConfig> points;
  for (const std::string& v : values) {
    molre::RunConfig cfg = base;
    if (axis == "n_experts") {
      cfg.model.molre.n_experts = static_cast<std::size_t>(std::stoull(v));
      if (cfg.model.molre.top_k > cfg.model.molre.n_experts) {
        cfg.model.molre.top_k = cfg.model.molre.n_experts;
      }
    } else if (axis == "top_k") {
      cfg.model.molre.top_k = static_cast<std::size_t>(std::stoull(v));
    } else {
      cfg.rank_setting = molre::RankSetting::parse_token(v);
    }
    std::string label = v;
    for (char& ch : label) {
      if (ch == '+' || ch == ',' || ch == '[' || ch == ']') ch = '_';
    }
    cfg.out_dir = (fs::path(base.out_dir) / ("point_" + axis + "_" + label)).string();
    cfg.validate();
    points.push_back(std::move(cfg));
  }

  std::vector<SweepRow> rows(points.size());
  const std::size_t workers = std::min(env_threads(), points.size());
  std::mutex err_mutex;
  std::vector<std::string> errors;
  auto run_point = [&](std::size_t i) {
    try {
      RunOutputs out = run_training(points[i], points[i].out_dir, false);
      rows[i].value = values[i];
      rows[i].steps = out.train.steps_run;
      rows[i].l_joint = out.train.steps.empty() ? 0.0 : out.train.steps.back().l_joint;
      rows[i].eval = out.eval;
    } catch (const std::exception& e) {
      std::lock_guard<std::mutex> lock(err_mutex);
      errors.push_back("point " + values[i] + ": " + e.what());
    }
  };
  if (workers <= 1) {
    for (std::size_t i = 0; i < points.size(); ++i) run_point(i);
  } else {
    std::vector<std::thread> pool;
    std::size_t next = 0;
    std::mutex next_mutex;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        while (true) {
          std::size_t i;
          {
            std::lock_guard<std::mutex> lock(next_mutex);
            if (next >= points.size()) return;
            i = next++;
          }
          run_point(i);
        }
      });
    }
    for (auto& t : pool) t.join();
  }
  if (!errors.empty()) {
    for (const std::string& e : errors) std::cerr << "sweep error: " << e << "\n";
    return 1;
  }

  nlohmann::ordered_json table = nlohmann::ordered_json::array();
  std::cout << std::left << std::setw(12) << axis << std::setw(8) << "steps" << std::setw(12)
            << "l_joint" << std::setw(10) << "sa_mae" << std::setw(10) << "sa_corr"
            << std::setw(12) << "er_wf1_avg" << "\n";
  for (const SweepRow& r : rows) {
    std::cout << std::left << std::setw(12) << r.value << std::setw(8) << r.steps
              << std::setw(12) << std::fixed << std::setprecision(4) << r.l_joint << std::setw(10)
              << r.eval.sa.mae << std::setw(10) << r.eval.sa.corr << std::setw(12)
              << r.eval.er_wf1_avg << "\n";
    nlohmann::ordered_json row;
    row["value"] = r.value;
    row["steps"] = r.steps;
    row["l_joint"] = r.l_joint;
    row["eval"] = molre::to_json(r.eval);
    table.push_back(row);
  }
  std::cout.unsetf(std::ios::fixed);
  fs::create_directories(base.out_dir);
  nlohmann::ordered_json sweep_json;
  sweep_json["axis"] = axis;
  sweep_json["rows"] = table;
  write_text(fs::path(base.out_dir) / "sweep.json", sweep_json.dump(2) + "\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"molre: multi-task mixture of low-rank experts at desk scale"};
  app.require_subcommand(1);

  CommonFlags train_flags;
  bool timing = false;
  CLI::App* train_cmd = app.add_subcommand(
      "train",
      "Train a variant on synthetic features, or on a precomputed 'MOLR' feature file "
      "(--set feature_file=PATH; see README for the binary layout). Outputs land in --out: "
      "config.json (echo), metrics.jsonl, final_eval.json, weights.bin");
  add_common_flags(train_cmd, train_flags);
  train_cmd->add_flag("--timing", timing,
                      "Record wall-clock ms per step in metrics (off keeps metrics files "
                      "byte-reproducible)");

  CommonFlags analyze_flags;
  std::size_t seq_len = 50;
  bool no_shared = false, no_task = false, no_routers = false;
  CLI::App* analyze_cmd = app.add_subcommand(
      "analyze", "Parameter/FLOP comparison of low-rank experts vs a full-rank baseline");
  add_common_flags(analyze_cmd, analyze_flags);
  analyze_cmd->add_option("--seq-len", seq_len, "Sequence length for FLOP counting (default 50)");
  analyze_cmd->add_flag("--no-shared-experts", no_shared, "Exclude shared experts from the tally");
  analyze_cmd->add_flag("--no-task-experts", no_task, "Exclude task experts from the tally");
  analyze_cmd->add_flag("--no-routers", no_routers, "Exclude routers from the tally");

  std::size_t gc_scale = 8;
  std::uint64_t gc_seed = 123;
  std::string inject_fault;
  CLI::App* gradcheck_cmd = app.add_subcommand(
      "gradcheck", "Finite-difference check of every primitive and the end-to-end joint loss");
  gradcheck_cmd->add_option("--scale", gc_scale, "Feature width of the check suite (default 8)");
  gradcheck_cmd->add_option("--seed", gc_seed, "Seed for check points (default 123)");
  gradcheck_cmd
      ->add_option("--inject-fault", inject_fault,
                   "Corrupt the named op's backward rule (harness self-test)")
      ->group("");  // hidden

  CommonFlags sweep_flags;
  std::string axis;
  std::vector<std::string> sweep_values;
  CLI::App* sweep_cmd =
      app.add_subcommand("sweep", "Train one point per axis value and tabulate final metrics");
  add_common_flags(sweep_cmd, sweep_flags);
  sweep_cmd->add_option("--axis", axis, "Sweep axis: n_experts, top_k, or rank")->required();
  sweep_cmd->add_option("--values", sweep_values,
                        "Comma-separated axis values (rank accepts 16, 64, 128, 16+8n)")
      ->delimiter(',');

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_cmd->parsed()) return cmd_train(train_flags, timing);
    if (analyze_cmd->parsed()) {
      return cmd_analyze(analyze_flags, seq_len, no_shared, no_task, no_routers);
    }
    if (gradcheck_cmd->parsed()) return cmd_gradcheck(gc_scale, gc_seed, inject_fault);
    if (sweep_cmd->parsed()) return cmd_sweep(sweep_flags, axis, sweep_values);
  } catch (const molre::DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const molre::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
