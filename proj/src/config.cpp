#include "rst/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace rst {

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

AttackConfig make_attack(std::string_view kind, double epsilon, std::optional<double> alpha, int steps,
                         bool random_start) {
  const double a = alpha.value_or(epsilon > 0 ? epsilon / 4.0 : 1.0);
  AttackConfig cfg;
  if (kind == "pgd") {
    cfg = AttackConfig::pgd(epsilon, steps, a, random_start);
  } else if (kind == "fgsm") {
    cfg = AttackConfig::fgsm(epsilon);
    if (epsilon == 0.0) cfg.alpha = 1.0;
  } else if (kind == "fgsm_rs") {
    cfg = AttackConfig::fgsm_rs(epsilon, alpha.value_or(epsilon > 0 ? 1.25 * epsilon : 1.0));
  } else if (kind == "l2_pgd") {
    cfg = AttackConfig::l2_pgd(epsilon, steps, a);
    cfg.random_start = random_start;
  } else {
    throw ConfigError("unknown attack '" + std::string(kind) + "' (pgd, fgsm, fgsm_rs, l2_pgd)");
  }
  return cfg;
}

std::string attack_kind(const AttackConfig& attack) {
  if (attack.norm == AttackNorm::L2) return "l2_pgd";
  if (attack.steps == 1 && attack.alpha == attack.epsilon && !attack.random_start) return "fgsm";
  if (attack.steps == 1 && attack.random_start) return "fgsm_rs";
  return "pgd";
}

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename T, typename F>
std::string join(const std::vector<T>& items, F&& format) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += ", ";
    out += format(items[i]);
  }
  return out;
}

std::string attack_text(const AttackConfig& a) {
  return attack_kind(a) + " eps=" + num(a.epsilon) + " alpha=" + num(a.alpha) + " steps=" + std::to_string(a.steps) +
         " rs=" + (a.random_start ? "1" : "0");
}

std::string_view mode_name(TrainMode m) { return m == TrainMode::Adversarial ? "adversarial" : "natural"; }
std::string_view mode_name(FinetuneMode m) { return m == FinetuneMode::Inherit ? "inherit" : "reinit"; }
std::string_view mode_name(R2SMode m) { return m == R2SMode::Exact ? "exact" : "sampled"; }

}  // namespace

std::string RunConfig::canonical() const {
  std::ostringstream out;
  out << "run.name = " << name << '\n'
      << "run.seed = " << seed << '\n'
      << "run.output = " << output.generic_string() << '\n'
      << "run.dataset = " << dataset << '\n'
      << "run.data = " << data_dir.generic_string() << '\n'
      << "run.train_limit = " << train_limit << '\n'
      << "run.test_limit = " << test_limit << '\n'
      << "run.stages = " << join(stages, [](const std::string& s) { return s; }) << '\n'
      << "network.preset = " << preset << '\n'
      << "network.width = " << width << '\n'
      << "network.init = " << to_string(init) << '\n'
      << "network.weight_seed = " << weight_seed << '\n'
      << "search.ratios = " << join(ratios, num) << '\n'
      << "search.pattern = " << to_string(pattern) << '\n'
      << "search.attack = " << attack_text(search_attack) << '\n'
      << "search.source = " << rtt_source.generic_string() << '\n'
      << "search.reinit_last_layer = " << reinit_last_layer << '\n'
      << "search.random_baseline = " << random_baseline << '\n'
      << "schedule.epochs = " << schedule.epochs << '\n'
      << "schedule.learning_rate = " << num(schedule.learning_rate) << '\n'
      << "schedule.momentum = " << num(schedule.momentum) << '\n'
      << "schedule.milestones = " << join(schedule.milestones, [](int m) { return std::to_string(m); }) << '\n'
      << "schedule.decay = " << num(schedule.decay) << '\n'
      << "schedule.batch_size = " << schedule.batch_size << '\n'
      << "train.mode = " << mode_name(train_mode) << '\n'
      << "train.init = " << to_string(train_init) << '\n'
      << "train.learning_rate = " << num(train_learning_rate) << '\n'
      << "finetune.mode = " << mode_name(finetune_mode) << '\n'
      << "finetune.reinit_seed = " << reinit_seed << '\n'
      << "eval.attacks = " << join(eval_attacks, attack_text) << '\n'
      << "eval.batch = " << eval_batch << '\n'
      << "r2s.adaptive = " << join(r2s_adaptive, [](Adaptive a) { return std::string(to_string(a)); }) << '\n'
      << "r2s.mode = " << mode_name(r2s_mode) << '\n'
      << "r2s.repeats = " << r2s_repeats << '\n'
      << "r2s.per_batch = " << r2s_per_batch << '\n'
      << "distance.epsilons = " << join(distance_epsilons, num) << '\n'
      << "plot.kinds = " << join(plot_kinds, [](const std::string& s) { return s; }) << '\n';
  return out.str();
}

std::string RunConfig::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(canonical())));
  return buf;
}

std::filesystem::path RunConfig::run_dir() const { return output / hash(); }

void RunConfig::validate() const {
  static const std::set<std::string> known_stages{"search", "train",    "finetune", "eval",
                                                  "transfer", "r2s",    "distance", "plot"};
  for (const auto& s : stages) {
    if (!known_stages.count(s)) throw ConfigError("run.stages: unknown stage '" + s + "'");
  }
  if (dataset != "mnist" && dataset != "fashion" && dataset != "cifar10") {
    throw ConfigError("run.dataset must be mnist, fashion or cifar10, got '" + dataset + "'");
  }
  if (preset != "DeskCNN" && preset != "DeskResNet8") {
    throw ConfigError("network.preset must be DeskCNN or DeskResNet8, got '" + preset + "'");
  }
  if (width == 0) throw ConfigError("network.width must be positive");
  if (ratios.empty()) throw ConfigError("search.ratios is empty");
  for (double r : ratios) {
    if (!(r > 0.0 && r <= 1.0)) throw ConfigError("search.ratios: " + num(r) + " outside (0, 1]");
  }
  if (eval_batch == 0) throw ConfigError("eval.batch must be positive");
  if (r2s_repeats == 0) throw ConfigError("r2s.repeats must be positive");
  for (const auto& k : plot_kinds) {
    if (k != "ratio_curve" && k != "transfer_heatmap" && k != "distance_bars") {
      throw ConfigError("plot.kinds: unknown plot '" + k + "'");
    }
  }
  try {
    search_attack.validate();
    for (const auto& a : eval_attacks) a.validate();
    schedule.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

namespace {

using boost::property_tree::ptree;

const std::map<std::string, std::set<std::string>>& schema() {
  static const std::map<std::string, std::set<std::string>> s{
      {"run", {"name", "seed", "output", "dataset", "data", "train_limit", "test_limit", "stages"}},
      {"network", {"preset", "width", "init", "weight_seed"}},
      {"search",
       {"ratios", "pattern", "attack", "epsilon", "alpha", "steps", "random_start", "source", "reinit_last_layer",
        "random_baseline"}},
      {"schedule", {"epochs", "learning_rate", "momentum", "milestones", "decay", "batch_size"}},
      {"train", {"mode", "init", "learning_rate"}},
      {"finetune", {"mode", "reinit_seed"}},
      {"eval", {"attack", "epsilon", "alpha", "steps", "random_start", "batch"}},
      {"r2s", {"adaptive", "mode", "repeats", "per_batch"}},
      {"distance", {"epsilons"}},
      {"plot", {"kinds"}},
  };
  return s;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

class Section {
 public:
  Section(const ptree* tree, std::string name) : tree_(tree), name_(std::move(name)) {}

  std::optional<std::string> raw(const std::string& key) const {
    if (!tree_) return std::nullopt;
    if (auto v = tree_->get_optional<std::string>(key)) return trim(*v);
    return std::nullopt;
  }
  std::string text(const std::string& key, std::string fallback) const { return raw(key).value_or(std::move(fallback)); }

  double real(const std::string& key, double fallback) const {
    const auto v = raw(key);
    return v ? to_real(key, *v) : fallback;
  }
  std::uint64_t integer(const std::string& key, std::uint64_t fallback) const {
    const auto v = raw(key);
    if (!v) return fallback;
    char* end = nullptr;
    const auto parsed = std::strtoull(v->c_str(), &end, 10);
    if (v->empty() || *end != '\0' || (*v)[0] == '-') fail(key, *v, "a non-negative integer");
    return parsed;
  }
  bool flag(const std::string& key, bool fallback) const {
    const auto v = raw(key);
    if (!v) return fallback;
    if (*v == "true" || *v == "1" || *v == "yes") return true;
    if (*v == "false" || *v == "0" || *v == "no") return false;
    fail(key, *v, "true or false");
  }
  std::vector<double> reals(const std::string& key, std::vector<double> fallback) const {
    const auto v = raw(key);
    if (!v) return fallback;
    std::vector<double> out;
    for (const auto& item : split_list(*v)) out.push_back(to_real(key, item));
    return out;
  }
  std::vector<std::string> words(const std::string& key, std::vector<std::string> fallback) const {
    const auto v = raw(key);
    return v ? split_list(*v) : fallback;
  }
  template <typename F>
  auto parsed(const std::string& key, F&& parse) const {
    const auto v = raw(key);
    try {
      return parse(*v);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(name_ + "." + key + ": " + e.what());
    }
  }

  [[noreturn]] void fail(const std::string& key, const std::string& value, const std::string& want) const {
    throw ConfigError(name_ + "." + key + ": expected " + want + ", got '" + value + "'");
  }

 private:
  double to_real(const std::string& key, const std::string& v) const {
    char* end = nullptr;
    const double parsed = std::strtod(v.c_str(), &end);
    if (v.empty() || *end != '\0') fail(key, v, "a number");
    return parsed;
  }
  const ptree* tree_;
  std::string name_;
};

}  // namespace

RunConfig parse_config(const std::string& text, const std::string& origin) {
  ptree tree;
  try {
    std::istringstream in(text);
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(origin + ":" + std::to_string(e.line()) + ": " + e.message());
  }
  for (const auto& [section, body] : tree) {
    const auto it = schema().find(section);
    if (it == schema().end()) {
      if (!body.data().empty()) throw ConfigError(origin + ": key '" + section + "' outside any section");
      throw ConfigError(origin + ": unknown section [" + section + "]");
    }
    for (const auto& [key, value] : body) {
      if (!it->second.count(key)) throw ConfigError(origin + ": unknown key '" + key + "' in [" + section + "]");
    }
  }
  auto section = [&](const std::string& name) {
    const auto child = tree.get_child_optional(name);
    return Section(child ? &*child : nullptr, name);
  };

  RunConfig c;
  const auto run = section("run");
  c.name = run.text("name", c.name);
  c.seed = run.integer("seed", c.seed);
  c.output = run.text("output", c.output.string());
  c.dataset = run.text("dataset", c.dataset);
  c.data_dir = run.text("data", "");
  c.train_limit = run.integer("train_limit", 0);
  c.test_limit = run.integer("test_limit", 0);
  c.stages = run.words("stages", c.stages);

  const auto net = section("network");
  c.preset = net.text("preset", c.preset);
  c.width = net.integer("width", c.width);
  if (net.raw("init")) c.init = net.parsed("init", parse_init_method);
  c.weight_seed = net.integer("weight_seed", c.weight_seed);

  const auto search = section("search");
  c.ratios = search.reals("ratios", c.ratios);
  if (search.raw("pattern")) c.pattern = search.parsed("pattern", parse_pattern);
  {
    const double eps = search.real("epsilon", 0.1);
    const auto alpha = search.raw("alpha") ? std::optional<double>(search.real("alpha", 0)) : std::nullopt;
    c.search_attack = make_attack(search.text("attack", "pgd"), eps, alpha, static_cast<int>(search.integer("steps", 7)),
                                  search.flag("random_start", false));
  }
  c.rtt_source = search.text("source", "");
  c.reinit_last_layer = search.flag("reinit_last_layer", false);
  c.random_baseline = search.flag("random_baseline", false);

  const auto sched = section("schedule");
  c.schedule.epochs = static_cast<int>(sched.integer("epochs", 30));
  c.schedule.learning_rate = sched.real("learning_rate", 0.1);
  c.schedule.momentum = sched.real("momentum", 0.9);
  if (sched.raw("milestones")) {
    c.schedule.milestones.clear();
    for (double m : sched.reals("milestones", {})) c.schedule.milestones.push_back(static_cast<int>(m));
  }
  c.schedule.decay = sched.real("decay", 0.1);
  c.schedule.batch_size = sched.integer("batch_size", 128);

  const auto train = section("train");
  const auto train_mode = train.text("mode", "adversarial");
  if (train_mode != "adversarial" && train_mode != "natural") train.fail("mode", train_mode, "adversarial or natural");
  c.train_mode = train_mode == "adversarial" ? TrainMode::Adversarial : TrainMode::Natural;
  if (train.raw("init")) c.train_init = train.parsed("init", parse_init_method);
  c.train_learning_rate = train.real("learning_rate", c.train_learning_rate);

  const auto ft = section("finetune");
  const auto ft_mode = ft.text("mode", "inherit");
  if (ft_mode != "inherit" && ft_mode != "reinit") ft.fail("mode", ft_mode, "inherit or reinit");
  c.finetune_mode = ft_mode == "inherit" ? FinetuneMode::Inherit : FinetuneMode::Reinit;
  c.reinit_seed = ft.integer("reinit_seed", c.reinit_seed);

  const auto eval = section("eval");
  {
    const auto alpha = eval.raw("alpha") ? std::optional<double>(eval.real("alpha", 0)) : std::nullopt;
    c.eval_attacks.clear();
    for (double eps : eval.reals("epsilon", {0.1})) {
      c.eval_attacks.push_back(make_attack(eval.text("attack", "pgd"), eps, alpha,
                                           static_cast<int>(eval.integer("steps", 20)), eval.flag("random_start", false)));
    }
  }
  c.eval_batch = eval.integer("batch", c.eval_batch);

  const auto r2s = section("r2s");
  if (r2s.raw("adaptive")) {
    c.r2s_adaptive.clear();
    for (const auto& w : r2s.words("adaptive", {})) {
      try {
        c.r2s_adaptive.push_back(parse_adaptive(w));
      } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("r2s.adaptive: ") + e.what());
      }
    }
  }
  const auto r2s_mode = r2s.text("mode", "exact");
  if (r2s_mode != "exact" && r2s_mode != "sampled") r2s.fail("mode", r2s_mode, "exact or sampled");
  c.r2s_mode = r2s_mode == "exact" ? R2SMode::Exact : R2SMode::Sampled;
  c.r2s_repeats = r2s.integer("repeats", c.r2s_repeats);
  c.r2s_per_batch = r2s.flag("per_batch", false);

  c.distance_epsilons = section("distance").reals("epsilons", c.distance_epsilons);
  c.plot_kinds = section("plot").words("kinds", c.plot_kinds);

  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream text;
  text << in.rdbuf();
  return parse_config(text.str(), path.string());
}

}  // namespace rst
