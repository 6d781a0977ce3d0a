// Acceptance suite: one PASS/FAIL line per criterion.
#include <malloc.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gradcheck.hpp"
#include "rst/checkpoint.hpp"
#include "rst/config.hpp"
#include "rst/dataset.hpp"
#include "rst/evaluate.hpp"
#include "rst/report.hpp"
#include "rst/search.hpp"
#include "rst/workbench.hpp"

using namespace rst;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Options {
  fs::path data;
  fs::path work;
  std::set<int> only;
  bool reuse = false;
  std::size_t width = 16;
  std::size_t train = 2000;
  std::size_t test = 1000;
  int epochs = 20;
  int seeds = 3;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

void progress(const std::string& line) { std::fprintf(stderr, "  .. %s\n", line.c_str()); }

// ---------------------------------------------------------------------------
// 1. finite differences

Outcome gradients() {
  const auto t0 = Clock::now();
  const auto results = testing::run_gradchecks(100, 20240917);
  const double elapsed = seconds_since(t0);
  Outcome out{elapsed < 300.0, ""};
  std::string worst_name;
  double worst = 0;
  int fewest = 1 << 30;
  for (const auto& r : results) {
    out.pass = out.pass && r.worst < 1e-4 && r.cases >= 100;
    fewest = std::min(fewest, r.cases);
    if (r.worst >= worst) worst = r.worst, worst_name = r.primitive;
  }
  out.detail = fmt("%zu primitives, >= %d cases each, worst rel err %.2e (%s), %.1f s", results.size(), fewest, worst,
                   worst_name.c_str(), elapsed);
  return out;
}

// ---------------------------------------------------------------------------
// 2. popcount after every step

std::size_t expected_groups(const Shape& shape, SparsityPattern pattern) {
  std::size_t numel = 1;
  for (auto d : shape) numel *= d;
  if (pattern == SparsityPattern::Element) return numel;
  if (shape.size() == 2) return shape[0];
  switch (pattern) {
    case SparsityPattern::Row: return shape[0] * shape[1] * shape[2];
    case SparsityPattern::Kernel: return shape[0] * shape[1];
    default: return shape[0];
  }
}

std::size_t expected_kept(double ratio, std::size_t groups) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(ratio * static_cast<double>(groups))));
}

Outcome mask_exactness(const Options& opt) {
  const Dataset data = load_mnist_dir(opt.data / "mnist", "mnist", 64, 16);
  SearchSchedule sched;
  sched.epochs = 2;
  sched.batch_size = 16;
  sched.milestones = {1};
  const auto attack = AttackConfig::pgd(0.1, 2);
  std::size_t configs = 0, steps = 0, violations = 0, hash_changes = 0;

  auto check = [&](const NetworkSpec& spec, double ratio, SparsityPattern pattern, const std::function<
                       TrainingResult(const StepObserver&)>& run, std::uint64_t theta_before) {
    const auto slots = weight_slots(spec);
    auto observer = [&](const Network& net, int, std::size_t, double) {
      ++steps;
      for (std::size_t l = 0; l < slots.size(); ++l) {
        const std::size_t groups = expected_groups(slots[l].shape, pattern);
        const std::size_t want = slots[l].maskable ? expected_kept(ratio, groups) : groups;
        const auto& mask = net.params()[l].mask();
        const auto ones = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1));
        if (mask.size() != groups || ones != want) ++violations;
      }
      if (theta_hash(net) != theta_before) ++hash_changes;
    };
    const auto result = run(observer);
    if (theta_hash(result.network) != theta_before) ++hash_changes;
    ++configs;
  };

  const NetworkSpec specs[] = {NetworkSpec::desk_cnn({1, 28, 28}, 10, 4), NetworkSpec::desk_resnet8({1, 28, 28}, 10, 4)};
  for (const auto& spec : specs) {
    for (auto pattern : {SparsityPattern::Element, SparsityPattern::Row, SparsityPattern::Kernel,
                         SparsityPattern::Channel}) {
      for (double ratio : {0.01, 0.05, 0.3, 1.0}) {
        const InitSpec init{InitMethod::SignedKaimingConstant, 5};
        const std::uint64_t before = theta_hash(Network(spec, init, pattern, ratio));
        check(spec, ratio, pattern, [&](const StepObserver& obs) {
          Prng prng(11);
          return search_rst(spec, init, data, ratio, pattern, attack, sched, prng, obs);
        }, before);
      }
    }
  }
  // RTT over trained weights.
  for (const auto& spec : specs) {
    SearchSchedule one = sched;
    one.epochs = 1;
    Prng train_prng(2);
    const auto dense = train_dense(spec, {InitMethod::KaimingNormal, 3}, data, TrainMode::Natural, std::nullopt, one,
                                   train_prng);
    const auto source = make_checkpoint(dense.network, Provenance::DenseNatural, true);
    for (auto pattern : {SparsityPattern::Element, SparsityPattern::Channel}) {
      check(spec, 0.2, pattern, [&](const StepObserver& obs) {
        Prng prng(12);
        return search_rtt(source, data, 0.2, pattern, attack, sched, prng, false, obs);
      }, theta_hash(dense.network));
    }
  }
  return {violations == 0 && hash_changes == 0 && steps > 0,
          fmt("%zu configs, %zu steps, %zu popcount violations, %zu theta hash changes", configs, steps, violations,
              hash_changes)};
}

// ---------------------------------------------------------------------------
// 3. exhaustive oracle on tiny linear nets

// Exact worst-case CE of a bias-free two-class linear model under an L-inf box.
double exact_robust_loss(const Tensor& w, const DataSplit& split, double eps, double lo, double hi) {
  const std::size_t d = w.shape()[1];
  double total = 0;
  for (std::size_t n = 0; n < split.size(); ++n) {
    const int y = split.y[n];
    double margin = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = w[static_cast<std::size_t>(y) * d + j] - w[static_cast<std::size_t>(1 - y) * d + j];
      const double x = split.x[n * d + j];
      const double moved = diff > 0 ? std::max(lo, x - eps) : diff < 0 ? std::min(hi, x + eps) : x;
      margin += diff * moved;
    }
    total += std::log1p(std::exp(-margin));
  }
  return total / static_cast<double>(split.size());
}

Dataset separable_task(std::size_t d, std::size_t n, std::uint64_t seed) {
  Prng prng(seed);
  Dataset data{"toy", {Tensor({n, d}), std::vector<int>(n)}, {Tensor({n, d}), std::vector<int>(n)}, 2};
  for (auto* split : {&data.train, &data.test}) {
    for (std::size_t i = 0; i < n; ++i) {
      const int y = static_cast<int>(i % 2);
      split->y[i] = y;
      split->x[i * d] = y ? prng.uniform(0.6, 1.0) : prng.uniform(0.0, 0.4);
      for (std::size_t j = 1; j < d; ++j) split->x[i * d + j] = 0.5;
    }
  }
  return data;
}

void combinations(std::size_t n, std::size_t k, const std::function<void(const std::vector<std::size_t>&)>& visit) {
  std::vector<std::size_t> idx(k);
  std::iota(idx.begin(), idx.end(), 0);
  while (true) {
    visit(idx);
    std::size_t i = k;
    while (i > 0 && idx[i - 1] == n - k + i - 1) --i;
    if (i == 0) return;
    ++idx[i - 1];
    for (std::size_t j = i; j < k; ++j) idx[j] = idx[j - 1] + 1;
  }
}

Outcome oracle_equivalence() {
  struct Case {
    std::size_t features;
    double ratio;
  };
  const Case cases[] = {{2, 0.25}, {3, 1.0 / 3.0}, {4, 0.25}, {6, 0.25}, {8, 0.125}, {10, 0.15}};
  const double eps = 0.1;
  const auto attack = AttackConfig::pgd(eps, 10);
  SearchSchedule sched;
  sched.epochs = 30;
  sched.milestones = {15, 23};
  sched.batch_size = 16;
  bool pass = true;
  std::string detail;
  double slowest = 0;
  for (std::size_t c = 0; c < std::size(cases); ++c) {
    const auto [d, ratio] = cases[c];
    const Dataset data = separable_task(d, 64, 40 + c);
    const auto spec = NetworkSpec::linear(d, 2);
    const InitSpec init{InitMethod::SignedKaimingConstant, 50 + c};
    Prng prng(60 + c);
    const auto searched = search_rst(spec, init, data, ratio, SparsityPattern::Element, attack, sched, prng);
    const double found = exact_robust_loss(searched.network.params()[0].effective_weight(), data.train, eps, 0, 1);

    const auto t0 = Clock::now();
    const Network ref(spec, init, SparsityPattern::Element, ratio);
    const Tensor& theta = ref.params()[0].theta();
    const std::size_t n = theta.size(), k = kept_count(ratio, n);
    double best = INFINITY;
    combinations(n, k, [&](const std::vector<std::size_t>& keep) {
      Tensor w(theta.shape());
      for (auto i : keep) w[i] = theta[i];
      best = std::min(best, exact_robust_loss(w, data.train, eps, 0, 1));
    });
    const double oracle_time = seconds_since(t0);
    slowest = std::max(slowest, oracle_time);
    const bool ok = found <= best * 1.05 && oracle_time < 60.0 && n <= 20 && k <= 3;
    pass = pass && ok;
    detail += fmt("%sN=%zu k=%zu %.4f/%.4f", c ? ", " : "", n, k, found, best);
  }
  return {pass, fmt("%zu nets (searched/optimal loss): %s; slowest oracle %.3f s", std::size(cases), detail.c_str(),
                    slowest)};
}

// ---------------------------------------------------------------------------
// 4. attack contracts

Outcome attack_contracts() {
  Prng prng(77);
  const std::size_t dims[] = {3, 7, 16};
  std::vector<Network> nets;
  for (std::size_t i = 0; i < std::size(dims); ++i) {
    nets.emplace_back(NetworkSpec::mlp(dims[i], 8, 3), InitSpec{InitMethod::KaimingNormal, 80 + i},
                      SparsityPattern::Element, 1.0);
  }
  std::size_t violations = 0;
  double worst_excess = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t which = prng.below(std::size(dims));
    const std::size_t d = dims[which];
    const int kind = static_cast<int>(prng.below(4));
    const double eps = prng.below(10) == 0 ? 0.0 : prng.uniform(0.001, 0.5);
    const int steps = 1 + static_cast<int>(prng.below(5));
    AttackConfig cfg = kind == 0   ? AttackConfig::fgsm(eps)
                       : kind == 1 ? AttackConfig::fgsm_rs(eps, prng.uniform(0.5, 1.25) * eps + 1e-3)
                       : kind == 2 ? AttackConfig::pgd(eps, steps, -1.0, prng.below(2) == 1)
                                   : AttackConfig::l2_pgd(eps, steps);
    if (prng.below(2)) {
      cfg.lower = -1.0;
      cfg.upper = 2.0;
    }
    Tensor x({1, d});
    for (auto& v : x.data()) v = prng.uniform(cfg.lower, cfg.upper);
    const std::vector<int> y{static_cast<int>(prng.below(3))};
    const Tensor adv = perturb(nets[which], x, y, cfg, Prng(trial));
    double linf = 0, l2 = 0;
    bool inside = true;
    for (std::size_t j = 0; j < d; ++j) {
      const double delta = adv[j] - x[j];
      linf = std::max(linf, std::abs(delta));
      l2 += delta * delta;
      inside = inside && adv[j] >= cfg.lower && adv[j] <= cfg.upper;
    }
    const double size = cfg.norm == AttackNorm::L2 ? std::sqrt(l2) : linf;
    worst_excess = std::max(worst_excess, size - eps);
    if (size > eps + 1e-6 || !inside) ++violations;
  }

  // Binary linear model with far-away bounds: the optimum is x + eps * sign(w_other - w_label).
  double worst_gap = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t d = 2 + prng.below(9);
    Tensor w({2, d});
    for (auto& v : w.data()) v = prng.normal();
    Network net(NetworkSpec::linear(d, 2), {InitMethod::KaimingNormal, 1}, SparsityPattern::Element, 1.0);
    net.params()[0].replace_theta(w);
    Tensor x({1, d});
    for (auto& v : x.data()) v = prng.uniform();
    const int y = static_cast<int>(prng.below(2));
    const double eps = prng.uniform(0.01, 0.3);
    AttackConfig cfg = AttackConfig::pgd(eps, 10);
    cfg.lower = -10;
    cfg.upper = 10;
    const std::vector<int> labels{y};
    const Tensor adv = perturb(net, x, labels, cfg, Prng(trial));
    auto ce = [&](const Tensor& at) {
      double margin = 0;
      for (std::size_t j = 0; j < d; ++j) margin += (w[static_cast<std::size_t>(y) * d + j] - w[static_cast<std::size_t>(1 - y) * d + j]) * at[j];
      return std::log1p(std::exp(-margin));
    };
    Tensor best = x;
    for (std::size_t j = 0; j < d; ++j) {
      best[j] += eps * sign_of(w[static_cast<std::size_t>(1 - y) * d + j] - w[static_cast<std::size_t>(y) * d + j]);
    }
    worst_gap = std::max(worst_gap, std::abs(ce(adv) - ce(best)));
  }
  return {violations == 0 && worst_gap <= 1e-6,
          fmt("10000 random pairs: %zu violations (max norm excess %.1e); 200 linear cases: max loss gap %.1e",
              violations, worst_excess, worst_gap)};
}

// ---------------------------------------------------------------------------
// 5-9. desk MNIST experiments

struct SeedResults {
  double dense_adv_nat = 0, dense_adv_rob = 0, dense_nat_rob = 0;
  std::map<double, double> rst_rob, rst_nat, random_rob;
  std::vector<std::vector<double>> transfer;
  double r2s_exact = 0, r2s_eot = 0, r2s_ensemble = 0;
  std::map<double, double> dist_nat, dist_adv;
  double adv_rtt_rob = 0, nat_rtt_rob = 0;
};

constexpr double kRstRatios[] = {0.05, 0.1, 0.2, 0.3};
constexpr double kTransferRatios[] = {0.05, 0.1, 0.2};
constexpr double kRandomRatios[] = {0.1, 0.2, 0.3};
constexpr double kDistanceEps[] = {0.05, 0.1, 0.2};
constexpr double kRttRatio = 0.2;

class Desk {
 public:
  explicit Desk(const Options& opt) : opt_(opt) {
    data_ = load_mnist_dir(opt.data / "mnist", "mnist", opt.train, opt.test);
    spec_ = NetworkSpec::desk_cnn({1, 28, 28}, 10, opt.width);
    sched_.epochs = opt.epochs;
    sched_.milestones = {static_cast<int>(std::lround(opt.epochs * 0.5)),
                         static_cast<int>(std::lround(opt.epochs * 23.0 / 30.0))};
  }

  const std::vector<SeedResults>& results() {
    if (results_.empty()) {
      for (int s = 0; s < opt_.seeds; ++s) results_.push_back(run_seed(static_cast<std::uint64_t>(s)));
    }
    return results_;
  }

 private:
  // Loads a cached checkpoint when reusing, otherwise trains and saves.
  Network trained(const fs::path& path, const std::function<TrainingResult()>& train) {
    if (opt_.reuse && fs::exists(path)) return restore(load_checkpoint(path));
    const auto t0 = Clock::now();
    auto result = train();
    fs::create_directories(path.parent_path());
    save_checkpoint(result.checkpoint, path);
    progress(fmt("%s trained in %.0f s", path.filename().c_str(), seconds_since(t0)));
    return std::move(result.network);
  }

  SeedResults run_seed(std::uint64_t seed) {
    const fs::path dir = opt_.work / ("seed" + std::to_string(seed));
    const auto search = AttackConfig::pgd(0.1, 7);
    const auto eval = AttackConfig::pgd(0.1, 20);
    const AttackConfig evals[] = {eval};
    const Prng eval_prng(1000 + seed);
    const InitSpec frozen{InitMethod::SignedKaimingConstant, 100 + seed};
    const InitSpec dense_init{InitMethod::KaimingNormal, 200 + seed};
    SeedResults r;

    const Network dense_adv = trained(dir / "dense-adv.ckpt", [&] {
      Prng prng(seed * 10 + 1);
      return train_dense(spec_, dense_init, data_, TrainMode::Adversarial, search, sched_, prng);
    });
    const Network dense_nat = trained(dir / "dense-nat.ckpt", [&] {
      Prng prng(seed * 10 + 2);
      return train_dense(spec_, dense_init, data_, TrainMode::Natural, std::nullopt, sched_, prng);
    });
    const auto adv_report = evaluate(dense_adv, data_.test, evals, eval_prng);
    r.dense_adv_nat = adv_report.natural_acc;
    r.dense_adv_rob = adv_report.robust[0].accuracy;
    r.dense_nat_rob = evaluate(dense_nat, data_.test, evals, eval_prng).robust[0].accuracy;
    progress(fmt("seed %llu dense adversarial %.3f/%.3f, dense natural robust %.3f", (unsigned long long)seed,
                 r.dense_adv_nat, r.dense_adv_rob, r.dense_nat_rob));

    std::map<double, Network> rst;
    for (std::size_t i = 0; i < std::size(kRstRatios); ++i) {
      const double ratio = kRstRatios[i];
      rst.emplace(ratio, trained(dir / fmt("rst-%.2f.ckpt", ratio), [&] {
        Prng prng(seed * 10 + 3 + i);
        return search_rst(spec_, frozen, data_, ratio, SparsityPattern::Element, search, sched_, prng);
      }));
      const auto report = evaluate(rst.at(ratio), data_.test, evals, eval_prng);
      r.rst_nat[ratio] = report.natural_acc;
      r.rst_rob[ratio] = report.robust[0].accuracy;
      progress(fmt("seed %llu RST %.2f %.3f/%.3f", (unsigned long long)seed, ratio, report.natural_acc,
                   report.robust[0].accuracy));
    }
    for (double ratio : kRandomRatios) {
      Network random(spec_, frozen, SparsityPattern::Element, ratio);
      calibrate_norm_stats(random, data_.train, sched_.batch_size);
      r.random_rob[ratio] = evaluate(random, data_.test, evals, eval_prng).robust[0].accuracy;
    }

    std::vector<const Classifier*> tickets;
    std::vector<Network> candidates;
    for (double ratio : kTransferRatios) {
      tickets.push_back(&rst.at(ratio));
      candidates.push_back(rst.at(ratio));
    }
    r.transfer = transfer_matrix(tickets, data_.test, eval, eval_prng).accuracy;
    const auto policy = R2SPolicy::uniform(candidates);
    r.r2s_exact = r2s_evaluate(policy, data_.test, eval, {Adaptive::None, R2SMode::Exact, 1, 256}, eval_prng)
                      .robust[0].accuracy;
    r.r2s_eot = r2s_evaluate(policy, data_.test, eval, {Adaptive::Eot, R2SMode::Exact, 1, 256}, eval_prng)
                    .robust[0].accuracy;
    r.r2s_ensemble = r2s_evaluate(policy, data_.test, eval, {Adaptive::Ensemble, R2SMode::Exact, 1, 256}, eval_prng)
                         .robust[0].accuracy;

    for (double eps : kDistanceEps) {
      r.dist_nat[eps] = feature_distance(dense_nat, data_.test, eps, eval_prng);
      r.dist_adv[eps] = feature_distance(dense_adv, data_.test, eps, eval_prng);
    }

    const Network adv_rtt = trained(dir / "rtt-adv.ckpt", [&] {
      Prng prng(seed * 10 + 8);
      return search_rtt(make_checkpoint(dense_adv, Provenance::DenseAdversarial, true), data_, kRttRatio,
                        SparsityPattern::Element, search, sched_, prng);
    });
    const Network nat_rtt = trained(dir / "rtt-nat.ckpt", [&] {
      Prng prng(seed * 10 + 9);
      return search_rtt(make_checkpoint(dense_nat, Provenance::DenseNatural, true), data_, kRttRatio,
                        SparsityPattern::Element, search, sched_, prng);
    });
    r.adv_rtt_rob = evaluate(adv_rtt, data_.test, evals, eval_prng).robust[0].accuracy;
    r.nat_rtt_rob = evaluate(nat_rtt, data_.test, evals, eval_prng).robust[0].accuracy;
    progress(fmt("seed %llu RTT adversarial %.3f, natural %.3f; R2S exact %.3f eot %.3f ensemble %.3f",
                 (unsigned long long)seed, r.adv_rtt_rob, r.nat_rtt_rob, r.r2s_exact, r.r2s_eot, r.r2s_ensemble));
    return r;
  }

  Options opt_;
  Dataset data_;
  NetworkSpec spec_;
  SearchSchedule sched_;
  std::vector<SeedResults> results_;
};

double mean_over(const std::vector<SeedResults>& rs, const std::function<double(const SeedResults&)>& f) {
  double total = 0;
  for (const auto& r : rs) total += f(r);
  return total / static_cast<double>(rs.size());
}

Outcome existence(Desk& desk) {
  const auto& rs = desk.results();
  const double dense = mean_over(rs, [](const SeedResults& r) { return r.dense_adv_rob; });
  bool pass = true;
  std::string detail = fmt("dense adversarial robust %.3f;", dense);
  for (double ratio : kRandomRatios) {
    const double ticket = mean_over(rs, [&](const SeedResults& r) { return r.rst_rob.at(ratio); });
    const double random = mean_over(rs, [&](const SeedResults& r) { return r.random_rob.at(ratio); });
    pass = pass && ticket >= dense - 0.10 && ticket >= 3.0 * random;
    detail += fmt(" r%.2f RST %.3f random %.3f;", ratio, ticket, random);
  }
  return {pass, detail + fmt(" %d seeds", static_cast<int>(rs.size()))};
}

double off_minus_diag(const std::vector<std::vector<double>>& grid) {
  double diag = 0, off = 0;
  const std::size_t n = grid.size();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) (i == j ? diag : off) += grid[i][j];
  }
  return off / static_cast<double>(n * (n - 1)) - diag / static_cast<double>(n);
}

Outcome transferability(Desk& desk) {
  const auto& rs = desk.results();
  std::string per_seed;
  for (const auto& r : rs) per_seed += fmt(" %+.3f", off_minus_diag(r.transfer));
  const double gap = mean_over(rs, [](const SeedResults& r) { return off_minus_diag(r.transfer); });
  return {gap >= 0.03, fmt("mean off-diagonal minus diagonal %.3f (per seed:%s)", gap, per_seed.c_str())};
}

Outcome r2s_gain(Desk& desk) {
  const auto& rs = desk.results();
  auto best_single = [](const SeedResults& r) {
    double best = 0;
    for (std::size_t i = 0; i < r.transfer.size(); ++i) best = std::max(best, r.transfer[i][i]);
    return best;
  };
  const double exact = mean_over(rs, [](const SeedResults& r) { return r.r2s_exact; });
  const double single = mean_over(rs, best_single);
  const double eot = mean_over(rs, [](const SeedResults& r) { return r.r2s_eot; });
  const double ensemble = mean_over(rs, [](const SeedResults& r) { return r.r2s_ensemble; });
  const double dense = mean_over(rs, [](const SeedResults& r) { return r.dense_adv_rob; });
  return {exact >= single + 0.03 && eot > dense && ensemble > dense,
          fmt("R2S exact %.3f vs best ticket %.3f; EOT %.3f, ensemble %.3f vs dense adversarial %.3f", exact, single,
              eot, ensemble, dense)};
}

Outcome feature_distance_direction(Desk& desk) {
  const auto& rs = desk.results();
  bool pass = true;
  std::string detail;
  for (double eps : kDistanceEps) {
    for (const auto& r : rs) pass = pass && r.dist_nat.at(eps) > r.dist_adv.at(eps);
    detail += fmt("%seps %.2f natural %.4f adversarial %.4f", detail.empty() ? "" : "; ", eps,
                  mean_over(rs, [&](const SeedResults& r) { return r.dist_nat.at(eps); }),
                  mean_over(rs, [&](const SeedResults& r) { return r.dist_adv.at(eps); }));
  }
  return {pass, detail + " (seed means; every seed checked)"};
}

Outcome rtt_ordering(Desk& desk) {
  const auto& rs = desk.results();
  const double adv = mean_over(rs, [](const SeedResults& r) { return r.adv_rtt_rob; });
  const double scratch = mean_over(rs, [](const SeedResults& r) { return r.rst_rob.at(kRttRatio); });
  const double nat = mean_over(rs, [](const SeedResults& r) { return r.nat_rtt_rob; });
  return {adv >= scratch - 0.01 && scratch >= nat - 0.01,
          fmt("ratio %.2f robust: adversarial RTT %.3f, RST %.3f, natural RTT %.3f", kRttRatio, adv, scratch, nat)};
}

// ---------------------------------------------------------------------------
// 10. reproducibility, round-trip, overhead

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    const auto ext = entry.path().extension();
    if (entry.is_regular_file() && (ext == ".ckpt" || ext == ".csv")) {
      const auto bytes = read_file_bytes(entry.path());
      files[fs::relative(entry.path(), dir).string()] = std::string(bytes.begin(), bytes.end());
    }
  }
  return files;
}

Outcome reproducibility(const Options& opt) {
  const fs::path out = opt.work / "repro";
  fs::remove_all(out);
  const RunConfig cfg = parse_config("[run]\noutput = " + out.string() + "\ndata = " + opt.data.string() +
                                     "\ntrain_limit = 128\ntest_limit = 64\n"
                                     "stages = search, eval, transfer, r2s\n"
                                     "[network]\nwidth = 4\n"
                                     "[search]\nratios = 0.05, 0.07, 0.1, 0.15, 0.2, 0.3\nsteps = 2\n"
                                     "[schedule]\nepochs = 1\nbatch_size = 32\nmilestones =\n"
                                     "[eval]\nsteps = 3\n");
  run_pipeline(cfg);
  const auto first = snapshot(cfg.run_dir());
  fs::remove_all(cfg.run_dir());
  run_pipeline(cfg);
  const auto second = snapshot(cfg.run_dir());
  std::size_t checkpoints = 0;
  for (const auto& [name, bytes] : first) checkpoints += name.ends_with(".ckpt");
  const bool identical = !first.empty() && first == second;

  std::size_t round_trips = 0;
  std::vector<Network> tickets;
  for (const auto& entry : fs::directory_iterator(cfg.run_dir() / "checkpoints")) {
    const auto bytes = read_file_bytes(entry.path());
    const auto ckpt = decode_checkpoint(bytes);
    const bool same = encode_checkpoint(ckpt) == bytes &&
                      encode_checkpoint(make_checkpoint(restore(ckpt), ckpt.provenance, ckpt.weights.has_value())) ==
                          bytes;
    round_trips += same;
    if (ckpt.provenance == Provenance::RST) tickets.push_back(restore(ckpt));
  }

  // Overhead is measured on the desk-size network, where it is independent of training.
  std::vector<Network> desk;
  for (double ratio : {0.05, 0.07, 0.1, 0.15, 0.2, 0.3}) {
    desk.emplace_back(NetworkSpec::desk_cnn({1, 28, 28}, 10, opt.width), InitSpec{InitMethod::SignedKaimingConstant, 1},
                      SparsityPattern::Element, ratio);
  }
  const double overhead = r2s_overhead(R2SPolicy::uniform(std::move(desk)));
  const bool pass = identical && round_trips == checkpoints && tickets.size() == 6 && overhead < 0.05;
  return {pass, fmt("rerun identical: %s (%zu files); %zu/%zu checkpoints round-trip bit-exact; "
                    "6-ticket bitset overhead %.2f%% of dense weight bytes",
                    identical ? "yes" : "no", first.size(), round_trips, checkpoints, overhead * 100.0)};
}

}  // namespace

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  Options opt;
  std::vector<int> only;
  CLI::App app{"Acceptance criteria"};
  app.add_option("--data", opt.data, "Dataset root (contains mnist/)")->required();
  app.add_option("--work", opt.work, "Scratch directory")->required();
  app.add_option("--only", only, "Criteria to run (default: all)");
  app.add_flag("--reuse", opt.reuse, "Reuse checkpoints already in the work directory");
  app.add_option("--width", opt.width, "Desk network width");
  app.add_option("--train", opt.train, "Desk training images");
  app.add_option("--test", opt.test, "Desk test images");
  app.add_option("--epochs", opt.epochs, "Desk search and training epochs");
  app.add_option("--seeds", opt.seeds, "Desk seeds");
  CLI11_PARSE(app, argc, argv);
  opt.only.insert(only.begin(), only.end());
  if (!opt.reuse) fs::remove_all(opt.work);
  fs::create_directories(opt.work);

  Desk desk(opt);
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria = {
      {1, [] { return gradients(); }},
      {2, [&] { return mask_exactness(opt); }},
      {3, [] { return oracle_equivalence(); }},
      {4, [] { return attack_contracts(); }},
      {5, [&] { return existence(desk); }},
      {6, [&] { return transferability(desk); }},
      {7, [&] { return r2s_gain(desk); }},
      {8, [&] { return feature_distance_direction(desk); }},
      {9, [&] { return rtt_ordering(desk); }},
      {10, [&] { return reproducibility(opt); }},
  };
  int failures = 0;
  const auto start = Clock::now();
  for (const auto& [id, run] : criteria) {
    if (!opt.only.empty() && !opt.only.contains(id)) continue;
    Outcome out;
    try {
      out = run();
    } catch (const std::exception& e) {
      out = {false, std::string("error: ") + e.what()};
    }
    failures += !out.pass;
    std::printf("criterion %d: %s  %s\n", id, out.pass ? "PASS" : "FAIL", out.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("total %.0f s\n", seconds_since(start));
  return failures == 0 ? 0 : 1;
}
