#include "rst/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace rst {

namespace {

constexpr std::uint64_t kAttackerDraws = 0xa77ac;
constexpr std::uint64_t kDefenderDraws = 0xdefe;
constexpr std::uint64_t kAttackNoise = 0x401d;

std::vector<std::size_t> iota_ids(std::size_t first, std::size_t count) {
  std::vector<std::size_t> ids(count);
  std::iota(ids.begin(), ids.end(), first);
  return ids;
}

void require_nonempty(const DataSplit& split) {
  if (split.size() == 0) throw std::invalid_argument("evaluation split is empty");
}

}  // namespace

std::vector<std::uint8_t> correctness(const Classifier& model, const Tensor& x, std::span<const int> labels,
                                      std::size_t batch) {
  const std::size_t n = x.dim(0);
  if (labels.size() != n) throw std::invalid_argument("correctness: label count does not match inputs");
  std::vector<std::uint8_t> flags(n);
  for (std::size_t lo = 0; lo < n; lo += batch) {
    const std::size_t hi = std::min(n, lo + batch);
    const auto pred = predict(model, x.slice_rows(lo, hi));
    for (std::size_t i = lo; i < hi; ++i) flags[i] = pred[i - lo] == labels[i] ? 1 : 0;
  }
  return flags;
}

double mean_of(std::span<const std::uint8_t> flags) {
  if (flags.empty()) return 0.0;
  const auto hits = std::accumulate(flags.begin(), flags.end(), std::size_t{0});
  return static_cast<double>(hits) / static_cast<double>(flags.size());
}

Tensor adversarial_examples(const Classifier& model, const DataSplit& split, const AttackConfig& attack,
                            const Prng& prng, std::size_t batch) {
  const std::size_t n = split.size();
  Tensor out(split.x.shape());
  const std::size_t row = n ? split.x.size() / n : 0;
  for (std::size_t lo = 0; lo < n; lo += batch) {
    const std::size_t hi = std::min(n, lo + batch);
    const auto ids = iota_ids(lo, hi - lo);
    const std::span<const int> labels(split.y.data() + lo, hi - lo);
    const Tensor adv = perturb(model, split.x.slice_rows(lo, hi), labels, attack, prng, ids);
    std::copy(adv.data().begin(), adv.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(lo * row));
  }
  return out;
}

EvalReport evaluate(const Classifier& model, const DataSplit& split, std::span<const AttackConfig> attacks,
                    const Prng& prng, const std::string& name, std::size_t batch) {
  require_nonempty(split);
  EvalReport report{name, name, split.size(), mean_of(correctness(model, split.x, split.y, batch)), {}};
  for (const auto& attack : attacks) {
    attack.validate();
    const Tensor adv = adversarial_examples(model, split, attack, prng, batch);
    report.robust.push_back({attack, mean_of(correctness(model, adv, split.y, batch))});
  }
  return report;
}

TransferResult transfer_matrix(std::span<const Classifier* const> tickets, const DataSplit& split,
                               const AttackConfig& attack, const Prng& prng, std::size_t batch) {
  if (tickets.size() < 2) throw std::invalid_argument("transfer matrix needs at least 2 tickets");
  require_nonempty(split);
  attack.validate();
  TransferResult result;
  for (const auto* source : tickets) {
    const Tensor adv = adversarial_examples(*source, split, attack, prng, batch);
    std::vector<double> row;
    std::vector<std::vector<std::uint8_t>> flags;
    for (const auto* target : tickets) {
      flags.push_back(correctness(*target, adv, split.y, batch));
      row.push_back(mean_of(flags.back()));
    }
    result.accuracy.push_back(std::move(row));
    result.correct.push_back(std::move(flags));
  }
  return result;
}

R2SPolicy R2SPolicy::uniform(std::vector<Network> candidates) {
  R2SPolicy policy;
  const std::size_t n = candidates.size();
  policy.candidates = std::move(candidates);
  policy.weights.assign(n, n ? 1.0 / static_cast<double>(n) : 0.0);
  return policy;
}

void R2SPolicy::validate() const {
  if (candidates.empty()) throw std::invalid_argument("R2S candidate set is empty");
  if (weights.size() != candidates.size()) {
    throw std::invalid_argument("R2S has " + std::to_string(candidates.size()) + " candidates but " +
                                std::to_string(weights.size()) + " weights");
  }
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw std::invalid_argument("R2S weights must be non-negative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("R2S weights sum to " + std::to_string(total));
  const auto& first = candidates.front();
  for (const auto& c : candidates) {
    if (c.spec().id != first.spec().id || !(c.init() == first.init())) {
      throw std::invalid_argument("R2S candidates must share one network and init; got " + c.spec().id + " and " +
                                  first.spec().id);
    }
  }
}

std::vector<const Classifier*> R2SPolicy::classifiers() const {
  std::vector<const Classifier*> out;
  for (const auto& c : candidates) out.push_back(&c);
  return out;
}

std::size_t r2s_draw(const R2SPolicy& policy, const Prng& prng, std::size_t id) {
  Prng stream = prng.split(id);
  return stream.categorical(policy.weights);
}

std::vector<int> r2s_predict(const R2SPolicy& policy, const Tensor& x, const Prng& prng,
                             std::span<const std::size_t> sample_ids) {
  policy.validate();
  const std::size_t n = x.dim(0);
  if (!sample_ids.empty() && sample_ids.size() != n) throw std::invalid_argument("r2s_predict: id count mismatch");
  std::vector<std::vector<std::size_t>> rows(policy.candidates.size());
  const std::size_t batch_pick = policy.per_batch ? r2s_draw(policy, prng, sample_ids.empty() ? 0 : sample_ids[0]) : 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t t = policy.per_batch ? batch_pick : r2s_draw(policy, prng, sample_ids.empty() ? i : sample_ids[i]);
    rows[t].push_back(i);
  }
  std::vector<int> out(n);
  for (std::size_t t = 0; t < rows.size(); ++t) {
    if (rows[t].empty()) continue;
    const auto pred = predict(policy.candidates[t], gather_rows(x, rows[t]));
    for (std::size_t i = 0; i < rows[t].size(); ++i) out[rows[t][i]] = pred[i];
  }
  return out;
}

std::string_view to_string(Adaptive adaptive) {
  switch (adaptive) {
    case Adaptive::None: return "none";
    case Adaptive::Eot: return "eot";
    case Adaptive::Ensemble: return "ensemble";
  }
  return "?";
}

Adaptive parse_adaptive(std::string_view name) {
  if (name == "none") return Adaptive::None;
  if (name == "eot") return Adaptive::Eot;
  if (name == "ensemble") return Adaptive::Ensemble;
  throw std::invalid_argument("unknown adaptive attack '" + std::string(name) + "' (none, eot, ensemble)");
}

double expected_transfer_accuracy(const TransferResult& grid, std::span<const double> weights) {
  if (grid.accuracy.size() != weights.size()) throw std::invalid_argument("weight count does not match the grid");
  double total = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    for (std::size_t j = 0; j < weights.size(); ++j) total += weights[i] * weights[j] * grid.accuracy[i][j];
  }
  return total;
}

namespace {

/// Draw index for pass `r`, sample `n`; per-batch policies share one draw per batch.
std::size_t draw_for(const R2SPolicy& policy, const Prng& stream, std::size_t r, std::size_t n, std::size_t total,
                     std::size_t batch) {
  const std::size_t id = policy.per_batch ? r * total + n / batch : r * total + n;
  return r2s_draw(policy, stream, id);
}

}  // namespace

EvalReport r2s_evaluate(const R2SPolicy& policy, const DataSplit& split, const AttackConfig& attack,
                        const R2SOptions& options, const Prng& prng) {
  policy.validate();
  require_nonempty(split);
  attack.validate();
  if (options.repeats == 0) throw std::invalid_argument("r2s_evaluate: repeats must be positive");
  const std::size_t n = split.size();
  const std::size_t tickets = policy.candidates.size();
  const auto models = policy.classifiers();
  const Prng noise = prng.split(kAttackNoise);
  const Prng attacker = prng.split(kAttackerDraws);
  const Prng defender = prng.split(kDefenderDraws);
  const bool exact = options.mode == R2SMode::Exact;
  const std::size_t passes = exact ? 1 : options.repeats;

  EvalReport report;
  report.model = "R2S[" + std::to_string(tickets) + "]";
  report.samples = exact ? n : n * passes;

  // Natural accuracy of the defender alone.
  std::vector<std::vector<std::uint8_t>> clean;
  for (const auto* m : models) clean.push_back(correctness(*m, split.x, split.y, options.batch));
  auto defended = [&](const std::vector<std::vector<std::uint8_t>>& flags) {
    double acc = 0.0;
    if (exact) {
      for (std::size_t j = 0; j < tickets; ++j) acc += policy.weights[j] * mean_of(flags[j]);
      return acc;
    }
    std::size_t hits = 0;
    for (std::size_t r = 0; r < passes; ++r) {
      for (std::size_t i = 0; i < n; ++i) hits += flags[draw_for(policy, defender, r, i, n, options.batch)][i];
    }
    return static_cast<double>(hits) / static_cast<double>(n * passes);
  };
  report.natural_acc = defended(clean);

  double robust = 0.0;
  if (options.adaptive == Adaptive::None) {
    report.attack_source = "sampled candidate";
    if (tickets == 1) {
      robust = mean_of(correctness(*models[0], adversarial_examples(*models[0], split, attack, noise, options.batch),
                                   split.y, options.batch));
    } else {
      const auto grid = transfer_matrix(models, split, attack, noise, options.batch);
      if (exact) {
        robust = expected_transfer_accuracy(grid, policy.weights);
      } else {
        std::size_t hits = 0;
        for (std::size_t r = 0; r < passes; ++r) {
          for (std::size_t i = 0; i < n; ++i) {
            const auto a = draw_for(policy, attacker, r, i, n, options.batch);
            const auto d = draw_for(policy, defender, r, i, n, options.batch);
            hits += grid.correct[a][d][i];
          }
        }
        robust = static_cast<double>(hits) / static_cast<double>(n * passes);
      }
    }
  } else {
    report.attack_source = std::string(to_string(options.adaptive)) + " over candidates";
    Tensor adv(split.x.shape());
    const std::size_t row = split.x.size() / n;
    for (std::size_t lo = 0; lo < n; lo += options.batch) {
      const std::size_t hi = std::min(n, lo + options.batch);
      const auto ids = iota_ids(lo, hi - lo);
      const std::span<const int> labels(split.y.data() + lo, hi - lo);
      const Tensor xb = split.x.slice_rows(lo, hi);
      const Tensor part = options.adaptive == Adaptive::Eot ? eot_perturb(models, xb, labels, attack, noise, ids)
                                                            : ensemble_perturb(models, xb, labels, attack, noise, ids);
      std::copy(part.data().begin(), part.data().end(), adv.data().begin() + static_cast<std::ptrdiff_t>(lo * row));
    }
    std::vector<std::vector<std::uint8_t>> flags;
    for (const auto* m : models) flags.push_back(correctness(*m, adv, split.y, options.batch));
    robust = defended(flags);
  }
  report.robust.push_back({attack, robust});
  return report;
}

double feature_distance(const Network& model, const DataSplit& split, double epsilon, const Prng& prng,
                        std::size_t batch) {
  require_nonempty(split);
  if (!(epsilon >= 0.0)) throw std::invalid_argument("feature distance epsilon must be >= 0");
  const std::size_t n = split.size();
  const std::size_t row = split.x.size() / n;
  auto features = [&](const Tensor& x) {
    Tape tape;
    ForwardTrace trace;
    model.forward(tape, tape.constant(x), {ParamBinding::Frozen, NormMode::Running}, &trace);
    if (!trace.last_conv) throw std::invalid_argument("network " + model.spec().id + " has no convolution layer");
    return trace.last_conv->value();
  };
  double total = 0.0;
  for (std::size_t lo = 0; lo < n; lo += batch) {
    const std::size_t hi = std::min(n, lo + batch);
    const Tensor clean = split.x.slice_rows(lo, hi);
    Tensor noisy = clean;
    for (std::size_t i = lo; i < hi; ++i) {
      Prng stream = prng.split(i);
      for (std::size_t p = 0; p < row; ++p) noisy[(i - lo) * row + p] += static_cast<Real>(stream.uniform(-epsilon, epsilon));
    }
    const Tensor fc = features(clean);
    const Tensor fn = features(noisy);
    const std::size_t width = fc.size() / (hi - lo);
    for (std::size_t i = 0; i < hi - lo; ++i) {
      double diff = 0.0, base = 0.0;
      for (std::size_t p = i * width; p < (i + 1) * width; ++p) {
        const double d = static_cast<double>(fn[p]) - static_cast<double>(fc[p]);
        diff += d * d;
        base += static_cast<double>(fc[p]) * static_cast<double>(fc[p]);
      }
      total += std::sqrt(diff) / (std::sqrt(base) + 1e-12);
    }
  }
  return total / static_cast<double>(n);
}

double r2s_overhead(const R2SPolicy& policy) {
  policy.validate();
  std::size_t mask_bytes = 0;
  for (const auto& c : policy.candidates) {
    for (const auto& p : c.params()) mask_bytes += (p.group_count() + 7) / 8;
  }
  const double dense = static_cast<double>(policy.candidates.front().weight_count() * sizeof(Real));
  return static_cast<double>(mask_bytes) / dense;
}

}  // namespace rst
