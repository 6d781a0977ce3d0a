#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "rst/autodiff.hpp"
#include "rst/nets.hpp"
#include "rst/prng.hpp"

namespace rst {

enum class AttackNorm { Linf, L2 };

/// Additive-perturbation attack. FGSM, FGSM-RS and PGD-t are all instances:
/// FGSM is one L-inf step of size epsilon from zero, FGSM-RS one step of
/// size alpha from a uniform random start, PGD-t t steps of size alpha.
///
/// epsilon and alpha are in input units (8/255 on [0,1] images for "eps 8").
/// epsilon == 0 is accepted and means "no perturbation".
struct AttackConfig {
  AttackNorm norm = AttackNorm::Linf;
  double epsilon = 0.1;
  double alpha = 0.025;
  int steps = 20;
  bool random_start = false;
  double lower = 0.0;
  double upper = 1.0;

  static AttackConfig fgsm(double epsilon);
  static AttackConfig fgsm_rs(double epsilon, double alpha);
  /// alpha defaults to epsilon / 4.
  static AttackConfig pgd(double epsilon, int steps, double alpha = -1.0, bool random_start = false);
  static AttackConfig l2_pgd(double epsilon, int steps, double alpha = -1.0);

  void validate() const;
  /// Short label such as "pgd20-linf-eps0.1".
  [[nodiscard]] std::string label() const;
  friend bool operator==(const AttackConfig&, const AttackConfig&) = default;
};

std::string_view to_string(AttackNorm norm);
AttackNorm parse_norm(std::string_view name);

/// Gradient of a scalar loss with respect to the whole input batch.
using InputGradient = std::function<Tensor(const Tensor& x)>;
/// Builds a scalar loss on a tape from the input leaf.
using LossBuilder = std::function<Var(Tape& tape, Var x)>;

InputGradient gradient_of(LossBuilder loss);
/// Summed cross-entropy of a classifier; per-sample gradients do not depend on batch size.
InputGradient classifier_gradient(const Classifier& model, std::span<const int> labels);

/// sign with sign(0) = 0.
Real sign_of(Real v);
/// Scales each sample's slice of `delta` onto the L2 ball of radius epsilon if outside it.
void project_l2(Tensor& delta, double epsilon);

/// Core loop shared by every attack. Random starts for sample n come from
/// prng.split(sample_ids[n]) (or prng.split(n) when ids are empty), so a
/// sample's perturbation does not depend on its batch.
Tensor run_attack(const Tensor& x, const InputGradient& gradient, const AttackConfig& cfg, const Prng& prng,
                  std::span<const std::size_t> sample_ids = {});

Tensor perturb(const Classifier& model, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg,
               const Prng& prng, std::span<const std::size_t> sample_ids = {});

/// Each step follows the mean of the tickets' input gradients.
Tensor eot_perturb(std::span<const Classifier* const> tickets, const Tensor& x, std::span<const int> labels,
                   const AttackConfig& cfg, const Prng& prng, std::span<const std::size_t> sample_ids = {});

/// Attacks the model whose class probabilities are the mean of the tickets' softmax outputs.
Tensor ensemble_perturb(std::span<const Classifier* const> tickets, const Tensor& x, std::span<const int> labels,
                        const AttackConfig& cfg, const Prng& prng, std::span<const std::size_t> sample_ids = {});

/// Mean of the tickets' softmax outputs, recorded on `tape`.
Var ensemble_probabilities(Tape& tape, std::span<const Classifier* const> tickets, Var x);

}  // namespace rst
