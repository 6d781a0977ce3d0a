#include "rst/adversary.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace rst {

AttackConfig AttackConfig::fgsm(double epsilon) { return {AttackNorm::Linf, epsilon, epsilon, 1, false, 0.0, 1.0}; }

AttackConfig AttackConfig::fgsm_rs(double epsilon, double alpha) {
  return {AttackNorm::Linf, epsilon, alpha, 1, true, 0.0, 1.0};
}

AttackConfig AttackConfig::pgd(double epsilon, int steps, double alpha, bool random_start) {
  return {AttackNorm::Linf, epsilon, alpha > 0 ? alpha : epsilon / 4.0, steps, random_start, 0.0, 1.0};
}

AttackConfig AttackConfig::l2_pgd(double epsilon, int steps, double alpha) {
  return {AttackNorm::L2, epsilon, alpha > 0 ? alpha : epsilon / 4.0, steps, false, 0.0, 1.0};
}

void AttackConfig::validate() const {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw std::invalid_argument("attack epsilon must be >= 0");
  if (!std::isfinite(alpha) || alpha < 0.0 || (epsilon > 0.0 && alpha == 0.0)) {
    throw std::invalid_argument("attack alpha must be > 0");
  }
  if (steps < 1) throw std::invalid_argument("attack steps must be >= 1");
  if (!(lower < upper)) throw std::invalid_argument("attack bounds need lower < upper");
}

std::string AttackConfig::label() const {
  std::ostringstream out;
  if (steps == 1 && norm == AttackNorm::Linf) {
    out << (random_start ? "fgsm-rs" : "fgsm");
  } else {
    out << "pgd" << steps;
  }
  out << '-' << to_string(norm) << "-eps" << epsilon;
  return out.str();
}

std::string_view to_string(AttackNorm norm) { return norm == AttackNorm::Linf ? "linf" : "l2"; }

AttackNorm parse_norm(std::string_view name) {
  if (name == "linf") return AttackNorm::Linf;
  if (name == "l2") return AttackNorm::L2;
  throw std::invalid_argument("unknown attack norm '" + std::string(name) + "'");
}

InputGradient gradient_of(LossBuilder loss) {
  return [loss = std::move(loss)](const Tensor& x) {
    Tape tape;
    const Var input = tape.leaf(x, true);
    const Var value = loss(tape, input);
    tape.backward(value);
    return input.grad();
  };
}

InputGradient classifier_gradient(const Classifier& model, std::span<const int> labels) {
  std::vector<int> ys(labels.begin(), labels.end());
  return gradient_of([&model, ys = std::move(ys)](Tape& tape, Var x) {
    return ops::cross_entropy(model.logits(tape, x), ys, true);
  });
}

Real sign_of(Real v) { return v > Real(0) ? Real(1) : (v < Real(0) ? Real(-1) : Real(0)); }

void project_l2(Tensor& delta, double epsilon) {
  const std::size_t n = delta.dim(0);
  const std::size_t per = delta.size() / n;
  for (std::size_t s = 0; s < n; ++s) {
    auto slice = delta.data().subspan(s * per, per);
    double sq = 0;
    for (Real v : slice) sq += static_cast<double>(v) * v;
    const double norm = std::sqrt(sq);
    if (norm > epsilon && norm > 0) {
      const double factor = epsilon / norm;
      for (auto& v : slice) v = static_cast<Real>(v * factor);
    }
  }
}

namespace {

void check_inputs(const Tensor& x, const AttackConfig& cfg, std::span<const std::size_t> ids) {
  cfg.validate();
  if (x.rank() < 2) throw ShapeError("attack input must be batched, got " + to_string(x.shape()));
  if (!ids.empty() && ids.size() != x.dim(0)) throw ShapeError("attack: sample id count does not match batch");
  for (Real v : x.data()) {
    if (v < cfg.lower || v > cfg.upper) throw std::invalid_argument("attack input lies outside the valid bounds");
  }
}

void check_labels(std::span<const int> labels, std::size_t batch, std::size_t classes) {
  if (labels.size() != batch) throw ShapeError("attack: label count does not match batch");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw std::out_of_range("attack: label " + std::to_string(y) + " outside [0," + std::to_string(classes) + ")");
    }
  }
}

/// Keeps x + delta inside [lower, upper].
void clip_to_bounds(const Tensor& x, Tensor& delta, const AttackConfig& cfg) {
  for (std::size_t i = 0; i < delta.size(); ++i) {
    const Real lo = static_cast<Real>(cfg.lower) - x[i];
    const Real hi = static_cast<Real>(cfg.upper) - x[i];
    delta[i] = std::clamp(delta[i], lo, hi);
  }
}

void random_start(Tensor& delta, const AttackConfig& cfg, const Prng& prng, std::span<const std::size_t> ids) {
  const std::size_t n = delta.dim(0);
  const std::size_t per = delta.size() / n;
  for (std::size_t s = 0; s < n; ++s) {
    Prng stream = prng.split(ids.empty() ? s : ids[s]);
    auto slice = delta.data().subspan(s * per, per);
    if (cfg.norm == AttackNorm::Linf) {
      for (auto& v : slice) v = static_cast<Real>(stream.uniform(-cfg.epsilon, cfg.epsilon));
    } else {
      // Uniform in the L2 ball: Gaussian direction, radius eps * u^(1/d).
      double sq = 0;
      for (auto& v : slice) {
        v = static_cast<Real>(stream.normal());
        sq += static_cast<double>(v) * v;
      }
      const double radius = cfg.epsilon * std::pow(stream.uniform(), 1.0 / static_cast<double>(per));
      const double factor = sq > 0 ? radius / std::sqrt(sq) : 0.0;
      for (auto& v : slice) v = static_cast<Real>(v * factor);
    }
  }
}

}  // namespace

Tensor run_attack(const Tensor& x, const InputGradient& gradient, const AttackConfig& cfg, const Prng& prng,
                  std::span<const std::size_t> sample_ids) {
  check_inputs(x, cfg, sample_ids);
  Tensor delta(x.shape(), Real(0));
  if (cfg.epsilon == 0.0) return x;
  if (cfg.random_start) {
    random_start(delta, cfg, prng, sample_ids);
    clip_to_bounds(x, delta, cfg);
  }
  const Real eps = static_cast<Real>(cfg.epsilon);
  const Real alpha = static_cast<Real>(cfg.alpha);
  const std::size_t n = x.dim(0);
  const std::size_t per = x.size() / n;
  Tensor probe = x;
  for (int step = 0; step < cfg.steps; ++step) {
    for (std::size_t i = 0; i < x.size(); ++i) probe[i] = x[i] + delta[i];
    const Tensor g = gradient(probe);
    if (g.shape() != x.shape()) throw ShapeError("attack gradient has shape " + to_string(g.shape()));
    if (cfg.norm == AttackNorm::Linf) {
      for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = std::clamp(delta[i] + alpha * sign_of(g[i]), -eps, eps);
    } else {
      for (std::size_t s = 0; s < n; ++s) {
        double sq = 0;
        for (std::size_t i = s * per; i < (s + 1) * per; ++i) sq += static_cast<double>(g[i]) * g[i];
        if (sq == 0.0) continue;
        const double factor = cfg.alpha / std::sqrt(sq);
        for (std::size_t i = s * per; i < (s + 1) * per; ++i) delta[i] += static_cast<Real>(g[i] * factor);
      }
      project_l2(delta, cfg.epsilon);
    }
    clip_to_bounds(x, delta, cfg);
  }
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::clamp(x[i] + delta[i], static_cast<Real>(cfg.lower), static_cast<Real>(cfg.upper));
  }
  return out;
}

Tensor perturb(const Classifier& model, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg,
               const Prng& prng, std::span<const std::size_t> sample_ids) {
  check_labels(labels, x.dim(0), model.num_classes());
  return run_attack(x, classifier_gradient(model, labels), cfg, prng, sample_ids);
}

namespace {

void check_tickets(std::span<const Classifier* const> tickets) {
  if (tickets.empty()) throw std::invalid_argument("adaptive attack needs at least one ticket");
  for (const auto* t : tickets) {
    if (!t) throw std::invalid_argument("adaptive attack: null ticket");
    if (t->num_classes() != tickets.front()->num_classes()) {
      throw std::invalid_argument("adaptive attack: tickets disagree on class count");
    }
  }
}

}  // namespace

Tensor eot_perturb(std::span<const Classifier* const> tickets, const Tensor& x, std::span<const int> labels,
                   const AttackConfig& cfg, const Prng& prng, std::span<const std::size_t> sample_ids) {
  check_tickets(tickets);
  check_labels(labels, x.dim(0), tickets.front()->num_classes());
  std::vector<InputGradient> grads;
  for (const auto* t : tickets) grads.push_back(classifier_gradient(*t, labels));
  const Real inv = Real(1) / static_cast<Real>(tickets.size());
  InputGradient mean = [grads = std::move(grads), inv](const Tensor& probe) {
    Tensor total(probe.shape(), Real(0));
    for (const auto& g : grads) {
      const Tensor gi = g(probe);
      for (std::size_t i = 0; i < total.size(); ++i) total[i] += gi[i];
    }
    for (auto& v : total.data()) v *= inv;
    return total;
  };
  return run_attack(x, mean, cfg, prng, sample_ids);
}

Var ensemble_probabilities(Tape& tape, std::span<const Classifier* const> tickets, Var x) {
  check_tickets(tickets);
  Var total = ops::softmax(tickets.front()->logits(tape, x));
  for (std::size_t i = 1; i < tickets.size(); ++i) total = ops::add(total, ops::softmax(tickets[i]->logits(tape, x)));
  return ops::scale(total, Real(1) / static_cast<Real>(tickets.size()));
}

Tensor ensemble_perturb(std::span<const Classifier* const> tickets, const Tensor& x, std::span<const int> labels,
                        const AttackConfig& cfg, const Prng& prng, std::span<const std::size_t> sample_ids) {
  check_tickets(tickets);
  check_labels(labels, x.dim(0), tickets.front()->num_classes());
  std::vector<const Classifier*> members(tickets.begin(), tickets.end());
  std::vector<int> ys(labels.begin(), labels.end());
  auto grad = gradient_of([members = std::move(members), ys = std::move(ys)](Tape& tape, Var input) {
    std::vector<Var> logits;
    for (const auto* m : members) logits.push_back(m->logits(tape, input));
    return ops::ensemble_cross_entropy(logits, ys, true);
  });
  return run_attack(x, grad, cfg, prng, sample_ids);
}

}  // namespace rst
