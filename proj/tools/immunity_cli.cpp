// immunity: generate data, train, attack, explain and verify the MI oracle.
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "immunity/binary_io.hpp"
#include "immunity/config.hpp"
#include "immunity/data_io.hpp"
#include "immunity/error.hpp"
#include "immunity/gradcam.hpp"
#include "immunity/mi_oracle.hpp"
#include "immunity/moe.hpp"
#include "immunity/train_eval.hpp"

namespace fs = std::filesystem;
using namespace immunity;

namespace {

constexpr int kUsageError = 1;
constexpr int kRuntimeError = 2;

// Applies repeated --set key=value overrides.
void apply_overrides(RunConfig& cfg, const std::vector<std::string>& sets) {
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::vector<std::uint8_t> bytes(text.begin(), text.end());
  binary::write_file_atomic(path, bytes);
}

// ---- gen-data ----

struct GenArgs {
  std::string out;
  std::size_t n = 2000, classes = 4, size = 16;
  std::uint64_t seed = 0;
  bool force = false;
};

int gen_data(const GenArgs& a) {
  if (fs::exists(a.out) && !a.force) throw ConfigError(a.out + " exists; pass --force to overwrite");
  Dataset data = synth_shapes(a.n, a.classes, a.size, a.seed);
  save_dataset(data, a.out);
  std::cout << "wrote " << data.size() << " samples (" << a.classes << " classes, " << a.size << "x" << a.size
            << ") to " << a.out << "\n";
  return 0;
}

// ---- train ----

struct TrainArgs {
  std::string config, data, out_model, log;
  std::vector<std::string> sets;
};

int train(const TrainArgs& a) {
  RunConfig cfg = a.config.empty() ? RunConfig() : RunConfig::load(a.config);
  apply_overrides(cfg, a.sets);
  const ResolvedConfig rc = resolve(cfg, true);
  std::cout << rc.echo_json() << "\n";

  Dataset data = load_dataset(a.data);
  ModelConfig mc;
  mc.n_experts = rc.n_experts;
  mc.n_classes = data.meta().n_classes;
  mc.channels = data.channels();
  mc.height = data.height();
  mc.width = data.width();
  mc.widths = rc.widths;
  mc.seed = rc.train.seed;
  mc.normalization = {data.meta().mean, data.meta().stddev};
  MoEModel model = MoEModel::create(mc);

  std::ofstream log;
  if (!a.log.empty()) {
    log.open(a.log);
    if (!log) throw Error("cannot open log " + a.log);
  }
  TrainState state(rc.train.seed);
  for (std::size_t e = 0; e < rc.train.epochs; ++e) {
    auto steps = train_epoch(model, data, rc.train, state, [&](std::size_t step, const LossBreakdown& b) {
      if (log) log << b.to_json_line(step) << "\n";
    });
    double total = 0.0;
    for (const auto& b : steps) total += b.total;
    std::cerr << "epoch " << e + 1 << "/" << rc.train.epochs << " mean loss "
              << (steps.empty() ? 0.0 : total / static_cast<double>(steps.size())) << "\n";
  }
  save_model(model, a.out_model);
  std::cout << "saved model to " << a.out_model << "\n";
  return 0;
}

// ---- attack ----

struct AttackArgs {
  std::string config, model, data, attack = "pgd", eps, step_size, out_report;
  std::size_t steps = 0, seeds = 1;
  std::uint64_t seed = 0;
  std::vector<std::string> sets;
};

int attack(const AttackArgs& a) {
  RunConfig cfg = a.config.empty() ? RunConfig() : RunConfig::load(a.config);
  apply_overrides(cfg, a.sets);
  cfg.set("attack", a.attack);
  if (!a.eps.empty()) cfg.set("epsilon", a.eps);
  if (!a.step_size.empty()) cfg.set("step_size", a.step_size);
  if (a.steps) cfg.set("iterations", std::to_string(a.steps));
  const ResolvedConfig rc = resolve(cfg, false);

  MoEModel model = load_model(a.model);
  Dataset data = load_dataset(a.data);
  EvalReport report = make_report(model, data, rc.attack, rc.train.rsg_eval, a.seed, a.seeds, rc.iscore_samples,
                                  rc.eval_batch_size, rc.echo_json());
  const std::string json = report.to_json();
  if (a.out_report.empty()) {
    std::cout << json << "\n";
  } else {
    write_text(a.out_report, json + "\n");
    std::cout << "clean accuracy " << report.clean_accuracy;
    for (const auto& [name, acc] : report.attack_accuracy) std::cout << ", " << name << " accuracy " << acc;
    std::cout << "\nreport written to " << a.out_report << "\n";
  }
  return 0;
}

// ---- explain ----

struct ExplainArgs {
  std::string model, data, indices, out_dir;
};

std::vector<std::size_t> parse_indices(const std::string& text, std::size_t limit) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t pos = 0;
    long long v = -1;
    try {
      v = std::stoll(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != item.size() || v < 0 || static_cast<std::size_t>(v) >= limit) {
      throw ConfigError("index '" + item + "' out of range, valid indices are 0.." + std::to_string(limit - 1));
    }
    out.push_back(static_cast<std::size_t>(v));
  }
  if (out.empty()) throw ConfigError("no indices given");
  return out;
}

int explain(const ExplainArgs& a) {
  MoEModel model = load_model(a.model);
  Dataset data = load_dataset(a.data);
  auto idx = parse_indices(a.indices, data.size());
  fs::create_directories(a.out_dir);
  Rng rng(model.rng_seed());
  ForwardRecord rec = model.forward(data.batch(idx), RsgMode::identity(), rng);
  auto maps = expert_heatmaps(rec, data.batch_labels(idx), data.height(), data.width(), false);
  const std::size_t H = data.height(), W = data.width(), plane = H * W;
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const std::string stem = "sample" + std::to_string(idx[b]);
    for (std::size_t i = 0; i < maps.size(); ++i) {
      Heatmap h = heatmap_at(maps[i], b, i, true);
      const fs::path base = fs::path(a.out_dir) / (stem + "_expert" + std::to_string(i));
      write_pgm(base.string() + ".pgm", h.grid, H, W);
      write_csv(base.string() + ".csv", h);
    }
    // Grayscale input: channel mean.
    auto img = data.image(idx[b]);
    std::vector<double> gray(plane, 0.0);
    for (std::size_t c = 0; c < data.channels(); ++c)
      for (std::size_t p = 0; p < plane; ++p) gray[p] += img[c * plane + p] / static_cast<double>(data.channels());
    write_pgm(fs::path(a.out_dir) / (stem + "_input.pgm"), gray, H, W);
  }
  std::cout << "wrote " << idx.size() * (2 * maps.size() + 1) << " files to " << a.out_dir << "\n";
  return 0;
}

// ---- verify-mi ----

int verify_mi(double resolution, std::size_t trials, std::uint64_t seed) {
  if (trials == 0) throw ConfigError("--trials must be at least 1");
  auto results = oracle::run_verification(resolution, trials, seed);
  bool ok = true;
  std::cout << "sweep                 result  cases  worst        tolerance\n";
  for (const auto& r : results) {
    char line[200];
    std::snprintf(line, sizeof line, "%-21s %-6s  %5zu  %.3e    %.1e", r.name.c_str(), r.passed ? "PASS" : "FAIL",
                  r.cases, r.worst, r.tolerance);
    std::cout << line;
    if (!r.passed && !r.detail.empty()) std::cout << "  (" << r.detail << ")";
    std::cout << "\n";
    ok = ok && r.passed;
  }
  return ok ? 0 : kRuntimeError;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixture-of-experts adversarial defense lab"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic shapes dataset");
  gen_cmd->add_option("--out", gen.out, "Output dataset file")->required();
  gen_cmd->add_option("--n", gen.n, "Number of samples")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--classes", gen.classes, "Number of classes")->check(CLI::Range(2, 8));
  gen_cmd->add_option("--size", gen.size, "Image side length")->check(CLI::Range(12, 1024));
  gen_cmd->add_option("--seed", gen.seed, "Random seed");
  gen_cmd->add_flag("--force", gen.force, "Overwrite an existing file");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a mixture-of-experts model");
  train_cmd->add_option("--config", tr.config, "Run configuration (key = value)");
  train_cmd->add_option("--data", tr.data, "Training dataset")->required();
  train_cmd->add_option("--out-model", tr.out_model, "Model output file")->required();
  train_cmd->add_option("--log", tr.log, "JSON-lines loss log");
  train_cmd->add_option("--set", tr.sets, "Override a config key (key=value)");

  AttackArgs at;
  auto* attack_cmd = app.add_subcommand("attack", "Evaluate accuracy under attack");
  attack_cmd->add_option("--config", at.config, "Run configuration (key = value)");
  attack_cmd->add_option("--model", at.model, "Model file")->required();
  attack_cmd->add_option("--data", at.data, "Evaluation dataset")->required();
  attack_cmd->add_option("--attack", at.attack, "fgsm, bim, mim, pgd or none")
      ->check(CLI::IsMember({"fgsm", "bim", "mim", "pgd", "none"}));
  attack_cmd->add_option("--eps", at.eps, "L-inf budget, e.g. 8/255");
  attack_cmd->add_option("--steps", at.steps, "Iterations");
  attack_cmd->add_option("--step-size", at.step_size, "Per-step size, e.g. 2/255");
  attack_cmd->add_option("--seeds", at.seeds, "Number of evaluation seeds")->check(CLI::PositiveNumber);
  attack_cmd->add_option("--seed", at.seed, "First evaluation seed");
  attack_cmd->add_option("--out-report", at.out_report, "Report JSON file");
  attack_cmd->add_option("--set", at.sets, "Override a config key (key=value)");

  ExplainArgs ex;
  auto* explain_cmd = app.add_subcommand("explain", "Export per-expert heatmaps");
  explain_cmd->add_option("--model", ex.model, "Model file")->required();
  explain_cmd->add_option("--data", ex.data, "Dataset")->required();
  explain_cmd->add_option("--indices", ex.indices, "Comma-separated sample indices")->required();
  explain_cmd->add_option("--out-dir", ex.out_dir, "Output directory")->required();

  double resolution = 0.01;
  std::size_t trials = 100;
  std::uint64_t mi_seed = 0;
  auto* mi_cmd = app.add_subcommand("verify-mi", "Run the mutual-information property sweeps");
  mi_cmd->add_option("--resolution", resolution, "Simplex grid step");
  mi_cmd->add_option("--trials", trials, "Random cases per sweep");
  mi_cmd->add_option("--seed", mi_seed, "Random seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }

  try {
    if (*gen_cmd) return gen_data(gen);
    if (*train_cmd) return train(tr);
    if (*attack_cmd) return attack(at);
    if (*explain_cmd) return explain(ex);
    if (*mi_cmd) return verify_mi(resolution, trials, mi_seed);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kUsageError;
}
