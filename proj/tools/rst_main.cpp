#include <malloc.h>

#include <cstdio>
#include <iostream>

#include "CLI11.hpp"
#include "rst/plot.hpp"
#include "rst/workbench.hpp"

namespace {

struct Overrides {
  std::vector<double> ratios;
  std::optional<double> eps;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> attack;
};

void apply(rst::RunConfig& config, const Overrides& o) {
  if (!o.ratios.empty()) config.ratios = o.ratios;
  if (o.seed) config.seed = *o.seed;
  if (o.eps || o.attack) {
    const auto& cur = config.eval_attacks.front();
    const double eps = o.eps.value_or(cur.epsilon);
    const auto kind = o.attack.value_or(rst::attack_kind(cur));
    config.eval_attacks = {rst::make_attack(kind, eps, std::nullopt, cur.steps, cur.random_start)};
  }
  config.validate();
}

}  // namespace

int main(int argc, char** argv) {
  // Activations are large and short-lived; keep freed pages in the heap.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  CLI::App app{"Robust scratch ticket workbench"};
  app.require_subcommand(1);
  app.set_version_flag("--version", RST_VERSION);

  std::string config_path;
  Overrides overrides;
  std::vector<std::string> checkpoints;
  std::size_t jobs = 1;
  bool quiet = false;
  std::string plot_kind;
  std::string plot_input, plot_output;

  auto common = [&](CLI::App* sub, bool needs_config = true) {
    auto* opt = sub->add_option("--config", config_path, "experiment INI file");
    if (needs_config) opt->required()->check(CLI::ExistingFile);
    sub->add_option("--ratio", overrides.ratios, "remaining ratio(s), replaces search.ratios");
    sub->add_option("--eps", overrides.eps, "evaluation epsilon");
    sub->add_option("--seed", overrides.seed, "root seed");
    sub->add_option("--attack", overrides.attack, "evaluation attack: pgd, fgsm, fgsm_rs, l2_pgd");
    sub->add_option("--checkpoint", checkpoints, "input checkpoint(s); default: the run directory's")
        ->check(CLI::ExistingFile);
    sub->add_flag("-q,--quiet", quiet, "no progress output");
  };

  const std::vector<std::pair<std::string, std::string>> stages{
      {"search", "mask search over frozen weights (RST, or RTT with search.source)"},
      {"train", "dense natural or adversarial training"},
      {"finetune", "adversarial fine-tuning of ticket weights under a frozen mask"},
      {"eval", "natural and robust accuracy of checkpoints"},
      {"transfer", "attack transferability matrix between tickets"},
      {"r2s", "random ticket switching defense"},
      {"distance", "clean vs. noisy feature-map distance"},
      {"run", "every stage listed in run.stages"},
  };
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, help] : stages) {
    subs[name] = app.add_subcommand(name, help);
    common(subs[name]);
  }
  subs["search"]->add_option("--jobs", jobs, "worker threads for the ratio sweep")->check(CLI::PositiveNumber);
  subs["run"]->add_option("--jobs", jobs, "worker threads for the ratio sweep")->check(CLI::PositiveNumber);

  auto* plot = app.add_subcommand("plot", "render SVG plots from results.csv");
  common(plot, false);
  plot->add_option("--kind", plot_kind, "ratio_curve, transfer_heatmap or distance_bars");
  plot->add_option("--input", plot_input, "results CSV (instead of --config)");
  plot->add_option("--output", plot_output, "SVG path (with --input)");

  CLI11_PARSE(app, argc, argv);

  std::string stage = "cli";
  try {
    rst::StageOptions options;
    options.checkpoints.assign(checkpoints.begin(), checkpoints.end());
    options.jobs = jobs;
    if (!quiet) options.log = [](const std::string& line) { std::cerr << line << '\n'; };

    if (plot->parsed() && !plot_input.empty()) {
      stage = "plot";
      if (plot_kind.empty() || plot_output.empty()) throw std::invalid_argument("--input needs --kind and --output");
      rst::plot_file(plot_input, rst::parse_plot_kind(plot_kind), plot_output);
      return 0;
    }
    stage = "config";
    if (config_path.empty()) throw std::invalid_argument("--config is required");
    rst::RunConfig config = rst::load_config(config_path);
    apply(config, overrides);
    if (plot->parsed() && !plot_kind.empty()) config.plot_kinds = {plot_kind};
    if (!quiet) std::cerr << "run directory " << config.run_dir().string() << '\n';

    for (const auto& [name, sub] : subs) {
      if (!sub->parsed()) continue;
      stage = name;
      if (name == "run") {
        rst::run_pipeline(config, options);
      } else {
        rst::run_stage(config, name, options);
      }
    }
    if (plot->parsed()) {
      stage = "plot";
      rst::run_stage(config, "plot", options);
    }
  } catch (const rst::StageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: [" << stage << "] " << e.what() << '\n';
    return 1;
  }
  return 0;
}
