#include "rst/workbench.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <mutex>
#include <thread>

#include "json.hpp"
#include "rst/checkpoint.hpp"
#include "rst/evaluate.hpp"
#include "rst/plot.hpp"
#include "rst/search.hpp"

namespace rst {

namespace fs = std::filesystem;

fs::path data_root(const RunConfig& config) {
  if (!config.data_dir.empty()) return config.data_dir;
  if (const char* env = std::getenv("RST_DATA_DIR"); env && *env) return env;
  return "data";
}

Dataset load_dataset(const RunConfig& config) {
  const auto root = data_root(config);
  if (config.dataset == "mnist") return load_mnist_dir(root / "mnist", "mnist", config.train_limit, config.test_limit);
  if (config.dataset == "fashion") {
    return load_mnist_dir(root / "fashion-mnist", "fashion", config.train_limit, config.test_limit);
  }
  return load_cifar10_dir(root / "cifar-10-batches-bin", config.train_limit, config.test_limit);
}

NetworkSpec network_spec(const RunConfig& config, const Dataset& data) {
  const auto& shape = data.train.x.shape();
  const Shape input(shape.begin() + 1, shape.end());
  if (config.preset == "DeskResNet8") return NetworkSpec::desk_resnet8(input, data.num_classes, config.width);
  return NetworkSpec::desk_cnn(input, data.num_classes, config.width);
}

namespace {

std::string ratio_tag(double r) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "r%.4g", r);
  return buf;
}

void note(const StageOptions& o, const std::string& line) {
  if (o.log) o.log(line);
}

ResultRow base_row(const RunConfig& config, const std::string& stage, const std::string& model,
                   const TicketCheckpoint& ckpt) {
  ResultRow row;
  row.config_hash = config.hash();
  row.stage = stage;
  row.model = model;
  row.provenance = std::string(to_string(ckpt.provenance));
  row.init = std::string(to_string(ckpt.init.method));
  row.seed = config.seed;
  row.ratio = ckpt.remaining_ratio;
  row.pattern = std::string(to_string(ckpt.pattern));
  return row;
}

struct NamedTicket {
  std::string name;
  TicketCheckpoint checkpoint;
};

std::vector<NamedTicket> load_tickets(const RunConfig& config, const StageOptions& options,
                                      const std::function<bool(const TicketCheckpoint&)>& wanted) {
  std::vector<fs::path> paths = options.checkpoints;
  const bool implicit = paths.empty();
  if (implicit) {
    const auto dir = config.run_dir() / "checkpoints";
    if (fs::exists(dir)) {
      for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.path().extension() == ".ckpt") paths.push_back(entry.path());
      }
    }
    std::sort(paths.begin(), paths.end());
  }
  std::vector<NamedTicket> out;
  for (const auto& p : paths) {
    auto ckpt = load_checkpoint(p);
    if (implicit && !wanted(ckpt)) continue;
    out.push_back({p.stem().string(), std::move(ckpt)});
  }
  if (out.empty()) {
    throw std::runtime_error("no input checkpoints (pass --checkpoint or run the producing stage under " +
                             (config.run_dir() / "checkpoints").string() + ")");
  }
  return out;
}

bool is_ticket(const TicketCheckpoint& c) {
  return c.provenance != Provenance::DenseNatural && c.provenance != Provenance::DenseAdversarial;
}

Prng stage_prng(const RunConfig& config, std::string_view stage) { return Prng(config.seed).split(fnv1a(stage)); }

std::vector<ResultRow> stage_search(const RunConfig& config, const StageOptions& options, const Dataset& data) {
  const auto spec = network_spec(config, data);
  const InitSpec init{config.init, config.weight_seed};
  const Prng root = stage_prng(config, "search");
  const Prng eval_prng = stage_prng(config, "eval");
  std::optional<TicketCheckpoint> source;
  if (!config.rtt_source.empty()) source = load_checkpoint(config.rtt_source);

  const std::size_t n = config.ratios.size();
  std::vector<std::vector<ResultRow>> rows(n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  auto work = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) {
      try {
        const double ratio = config.ratios[i];
        Prng prng = root.split(i);
        TrainingResult result =
            source ? search_rtt(*source, data, ratio, config.pattern, config.search_attack, config.schedule, prng,
                                config.reinit_last_layer)
                   : search_rst(spec, init, data, ratio, config.pattern, config.search_attack, config.schedule, prng);
        const std::string prefix = source ? std::string(to_string(result.checkpoint.provenance)) : "rst";
        const std::string name = prefix + "-" + std::string(to_string(config.pattern)) + "-" + ratio_tag(ratio);
        save_checkpoint(result.checkpoint, config.run_dir() / "checkpoints" / (name + ".ckpt"));
        const auto report = evaluate(result.network, data.test, config.eval_attacks, eval_prng, name, config.eval_batch);
        rows[i] = rows_from_report(report, base_row(config, "search", name, result.checkpoint));
        if (config.random_baseline) {
          Network random(result.network.spec(), result.network.init(), config.pattern, ratio);
          if (source) {
            for (std::size_t s = 0; s < random.params().size(); ++s) {
              random.params()[s].replace_theta(result.network.params()[s].theta());
            }
          }
          calibrate_norm_stats(random, data.train, config.schedule.batch_size);
          const std::string rname = "random-" + std::string(to_string(config.pattern)) + "-" + ratio_tag(ratio);
          auto base = base_row(config, "search", rname, result.checkpoint);
          base.provenance = "RandomMask";
          const auto rreport = evaluate(random, data.test, config.eval_attacks, eval_prng, rname, config.eval_batch);
          for (auto& r : rows_from_report(rreport, base)) rows[i].push_back(std::move(r));
        }
        std::lock_guard lock(log_mutex);
        note(options, "search " + name + ": natural " + std::to_string(report.natural_acc));
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(options.jobs, n));
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  std::vector<ResultRow> out;
  for (auto& r : rows) out.insert(out.end(), r.begin(), r.end());
  return out;
}

std::vector<ResultRow> stage_train(const RunConfig& config, const StageOptions& options, const Dataset& data) {
  const auto spec = network_spec(config, data);
  Prng prng = stage_prng(config, "train");
  SearchSchedule schedule = config.schedule;
  schedule.learning_rate = config.train_learning_rate;
  auto result = train_dense(spec, {config.train_init, config.weight_seed}, data, config.train_mode,
                            config.search_attack, schedule, prng);
  const std::string name =
      std::string("dense-") + (config.train_mode == TrainMode::Adversarial ? "adversarial" : "natural");
  save_checkpoint(result.checkpoint, config.run_dir() / "checkpoints" / (name + ".ckpt"));
  const auto report =
      evaluate(result.network, data.test, config.eval_attacks, stage_prng(config, "eval"), name, config.eval_batch);
  note(options, "train " + name + ": natural " + std::to_string(report.natural_acc));
  return rows_from_report(report, base_row(config, "train", name, result.checkpoint));
}

std::vector<ResultRow> stage_finetune(const RunConfig& config, const StageOptions& options, const Dataset& data) {
  std::vector<ResultRow> rows;
  const auto tickets = load_tickets(config, options, [](const TicketCheckpoint& c) {
    return is_ticket(c) && c.provenance != Provenance::FinetunedInherit && c.provenance != Provenance::FinetunedReinit;
  });
  const std::string mode = config.finetune_mode == FinetuneMode::Inherit ? "inherit" : "reinit";
  for (std::size_t i = 0; i < tickets.size(); ++i) {
    Prng prng = stage_prng(config, "finetune").split(i);
    auto result = finetune_ticket(tickets[i].checkpoint, config.finetune_mode, data, config.search_attack,
                                  config.schedule, prng, config.reinit_seed);
    const std::string name = tickets[i].name + "-ft-" + mode;
    save_checkpoint(result.checkpoint, config.run_dir() / "checkpoints" / (name + ".ckpt"));
    const auto report =
        evaluate(result.network, data.test, config.eval_attacks, stage_prng(config, "eval"), name, config.eval_batch);
    note(options, "finetune " + name + ": natural " + std::to_string(report.natural_acc));
    for (auto& r : rows_from_report(report, base_row(config, "finetune", name, result.checkpoint))) {
      rows.push_back(std::move(r));
    }
  }
  return rows;
}

std::vector<ResultRow> stage_eval(const RunConfig& config, const StageOptions& options, const Dataset& data) {
  std::vector<ResultRow> rows;
  for (const auto& t : load_tickets(config, options, [](const TicketCheckpoint&) { return true; })) {
    const Network net = restore(t.checkpoint);
    const auto report = evaluate(net, data.test, config.eval_attacks, stage_prng(config, "eval"), t.name, config.eval_batch);
    note(options, "eval " + t.name + ": natural " + std::to_string(report.natural_acc));
    for (auto& r : rows_from_report(report, base_row(config, "eval", t.name, t.checkpoint))) rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<Network> restore_all(const std::vector<NamedTicket>& tickets) {
  std::vector<Network> nets;
  for (const auto& t : tickets) nets.push_back(restore(t.checkpoint));
  return nets;
}

std::vector<ResultRow> stage_transfer(const RunConfig& config, const StageOptions& options, const Dataset& data) {
  const auto tickets = load_tickets(config, options, is_ticket);
  const auto nets = restore_all(tickets);
  std::vector<const Classifier*> models;
  for (const auto& n : nets) models.push_back(&n);
  std::vector<ResultRow> rows;
  for (const auto& attack : config.eval_attacks) {
    const auto grid = transfer_matrix(models, data.test, attack, stage_prng(config, "eval"), config.eval_batch);
    for (std::size_t i = 0; i < nets.size(); ++i) {
      for (std::size_t j = 0; j < nets.size(); ++j) {
        auto row = base_row(config, "transfer", tickets[j].name, tickets[j].checkpoint);
        row.attack_source = tickets[i].name;
        row.samples = data.test.size();
        set_attack(row, attack);
        row.robust_acc = grid.accuracy[i][j];
        rows.push_back(std::move(row));
      }
    }
    note(options, "transfer " + attack.label() + ": " + std::to_string(nets.size()) + "x" +
                      std::to_string(nets.size()) + " grid");
  }
  return rows;
}

std::vector<ResultRow> stage_r2s(const RunConfig& config, const StageOptions& options, const Dataset& data) {
  const auto tickets = load_tickets(config, options, is_ticket);
  R2SPolicy policy = R2SPolicy::uniform(restore_all(tickets));
  policy.per_batch = config.r2s_per_batch;
  std::vector<ResultRow> rows;
  for (const auto& attack : config.eval_attacks) {
    for (const auto adaptive : config.r2s_adaptive) {
      const R2SOptions opts{adaptive, config.r2s_mode, config.r2s_repeats, config.eval_batch};
      const auto report = r2s_evaluate(policy, data.test, attack, opts, stage_prng(config, "r2s"));
      auto base = base_row(config, "r2s", report.model, tickets.front().checkpoint);
      base.provenance = "R2S";
      base.ratio = 0.0;
      for (const auto& t : tickets) base.ratio += t.checkpoint.remaining_ratio / static_cast<double>(tickets.size());
      base.attack_source = std::string(to_string(adaptive)) +
                           (config.r2s_mode == R2SMode::Exact ? "-exact" : "-sampled");
      for (auto& r : rows_from_report(report, base)) rows.push_back(std::move(r));
      note(options, "r2s " + base.attack_source + " " + attack.label() + ": robust " +
                        std::to_string(report.robust.front().accuracy));
    }
  }
  return rows;
}

std::vector<ResultRow> stage_distance(const RunConfig& config, const StageOptions& options, const Dataset& data) {
  std::vector<ResultRow> rows;
  for (const auto& t : load_tickets(config, options, [](const TicketCheckpoint&) { return true; })) {
    const Network net = restore(t.checkpoint);
    for (double eps : config.distance_epsilons) {
      auto row = base_row(config, "distance", t.name, t.checkpoint);
      row.samples = data.test.size();
      row.epsilon = eps;
      row.attack = "uniform_noise";
      row.norm = "linf";
      row.feature_distance = feature_distance(net, data.test, eps, stage_prng(config, "distance"), config.eval_batch);
      note(options, "distance " + t.name + " eps " + std::to_string(eps) + ": " + std::to_string(*row.feature_distance));
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

void stage_plot(const RunConfig& config, const StageOptions& options) {
  const auto csv = config.run_dir() / "results.csv";
  const auto rows = read_csv(csv);
  for (const auto& kind : config.plot_kinds) {
    const auto path = config.run_dir() / "plots" / (kind + ".svg");
    write_text(path, render_plot(parse_plot_kind(kind), rows));
    note(options, "plot " + path.string());
  }
}

void merge_rows(const RunConfig& config, const std::string& stage, const std::vector<ResultRow>& fresh) {
  const auto csv = config.run_dir() / "results.csv";
  std::vector<ResultRow> merged;
  if (fs::exists(csv)) {
    for (auto& r : read_csv(csv)) {
      if (r.stage != stage) merged.push_back(std::move(r));
    }
  }
  merged.insert(merged.end(), fresh.begin(), fresh.end());
  write_csv(csv, merged);
  write_text(config.run_dir() / "results.json", to_json(merged));
}

void update_manifest(const RunConfig& config, const std::string& stage) {
  const auto path = config.run_dir() / "manifest.json";
  std::vector<std::string> stages;
  if (fs::exists(path)) {
    try {
      for (const auto& s : nlohmann::json::parse(read_text(path)).at("stages")) stages.push_back(s.get<std::string>());
    } catch (const nlohmann::json::exception&) {
      stages.clear();
    }
  }
  if (std::find(stages.begin(), stages.end(), stage) == stages.end()) stages.push_back(stage);
  write_text(path, manifest_json(config, stages));
}

}  // namespace

std::string manifest_json(const RunConfig& config, const std::vector<std::string>& stages) {
  nlohmann::ordered_json doc;
  doc["config_hash"] = config.hash();
  doc["name"] = config.name;
  doc["seed"] = config.seed;
  doc["version"] = RST_VERSION;
#ifdef RST_SINGLE_PRECISION
  doc["precision"] = "float";
#else
  doc["precision"] = "double";
#endif
  doc["stages"] = stages;
  doc["config"] = config.canonical();
  return doc.dump(2) + "\n";
}

std::vector<ResultRow> run_stage(const RunConfig& config, const std::string& stage, const StageOptions& options) {
  try {
    config.validate();
    if (stage == "plot") {
      stage_plot(config, options);
      update_manifest(config, stage);
      return {};
    }
    const Dataset data = load_dataset(config);
    std::vector<ResultRow> rows;
    if (stage == "search") {
      rows = stage_search(config, options, data);
    } else if (stage == "train") {
      rows = stage_train(config, options, data);
    } else if (stage == "finetune") {
      rows = stage_finetune(config, options, data);
    } else if (stage == "eval") {
      rows = stage_eval(config, options, data);
    } else if (stage == "transfer") {
      rows = stage_transfer(config, options, data);
    } else if (stage == "r2s") {
      rows = stage_r2s(config, options, data);
    } else if (stage == "distance") {
      rows = stage_distance(config, options, data);
    } else {
      throw std::invalid_argument("unknown stage '" + stage + "'");
    }
    merge_rows(config, stage, rows);
    update_manifest(config, stage);
    return rows;
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

void run_pipeline(const RunConfig& config, const StageOptions& options) {
  for (const auto& stage : config.stages) run_stage(config, stage, options);
}

}  // namespace rst
