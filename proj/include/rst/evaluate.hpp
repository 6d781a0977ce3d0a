#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rst/adversary.hpp"
#include "rst/checkpoint.hpp"
#include "rst/dataset.hpp"
#include "rst/nets.hpp"

namespace rst {

struct RobustAccuracy {
  AttackConfig attack;
  double accuracy = 0.0;
};

struct EvalReport {
  std::string model;
  /// Which model or ticket generated the adversarial examples.
  std::string attack_source;
  std::size_t samples = 0;
  double natural_acc = 0.0;
  std::vector<RobustAccuracy> robust;
};

/// Per-sample 0/1 correctness of `model` on `x`, evaluated in batches.
std::vector<std::uint8_t> correctness(const Classifier& model, const Tensor& x, std::span<const int> labels,
                                      std::size_t batch = 256);

double mean_of(std::span<const std::uint8_t> flags);

/// Adversarial examples for the whole split. Sample n uses prng.split(n) for
/// its random start, so sharding the split does not change the starts.
Tensor adversarial_examples(const Classifier& model, const DataSplit& split, const AttackConfig& attack,
                            const Prng& prng, std::size_t batch = 256);

/// Natural accuracy plus one robust accuracy per attack, each attack generated against `model` itself.
EvalReport evaluate(const Classifier& model, const DataSplit& split, std::span<const AttackConfig> attacks,
                    const Prng& prng, const std::string& name = "model", std::size_t batch = 256);

struct TransferResult {
  /// accuracy[i][j]: ticket j on examples generated against ticket i.
  std::vector<std::vector<double>> accuracy;
  /// correct[i][j][n]: per-sample flags behind accuracy[i][j].
  std::vector<std::vector<std::vector<std::uint8_t>>> correct;
};

TransferResult transfer_matrix(std::span<const Classifier* const> tickets, const DataSplit& split,
                               const AttackConfig& attack, const Prng& prng, std::size_t batch = 256);

/// Candidate tickets over one frozen weight tensor and a distribution over them.
struct R2SPolicy {
  std::vector<Network> candidates;
  std::vector<double> weights;
  /// One ticket per call instead of one per input.
  bool per_batch = false;

  static R2SPolicy uniform(std::vector<Network> candidates);
  void validate() const;
  [[nodiscard]] std::vector<const Classifier*> classifiers() const;
};

/// Ticket index drawn for sample `id`: categorical(weights) from prng.split(id).
std::size_t r2s_draw(const R2SPolicy& policy, const Prng& prng, std::size_t id);

/// Predictions with one sampled ticket per input (or per call when per_batch).
std::vector<int> r2s_predict(const R2SPolicy& policy, const Tensor& x, const Prng& prng,
                             std::span<const std::size_t> sample_ids = {});

enum class Adaptive { None, Eot, Ensemble };
enum class R2SMode { Exact, Sampled };

std::string_view to_string(Adaptive adaptive);
Adaptive parse_adaptive(std::string_view name);

struct R2SOptions {
  Adaptive adaptive = Adaptive::None;
  R2SMode mode = R2SMode::Exact;
  /// Sampled mode: passes over the split, each with fresh attacker/defender draws.
  std::size_t repeats = 1;
  std::size_t batch = 256;
};

/// Robust accuracy of the switching defense. Adaptive::None draws the attack
/// ticket and the inference ticket independently per input; Eot/Ensemble
/// attack the whole candidate set. Exact mode replaces the draws by their
/// expectation over the ticket grid.
EvalReport r2s_evaluate(const R2SPolicy& policy, const DataSplit& split, const AttackConfig& attack,
                        const R2SOptions& options, const Prng& prng);

/// Expected robust accuracy from a transfer matrix: sum_ij w_i w_j A[i][j].
double expected_transfer_accuracy(const TransferResult& grid, std::span<const double> weights);

/// Mean over inputs of ||F(x+eta) - F(x)|| / (||F(x)|| + 1e-12), F the last
/// convolution's output with running norm statistics, eta uniform in
/// [-eps, eps] per element from prng.split(n).
double feature_distance(const Network& model, const DataSplit& split, double epsilon, const Prng& prng,
                        std::size_t batch = 256);

/// Packed mask bytes of every candidate over the dense weight bytes of one network.
double r2s_overhead(const R2SPolicy& policy);

}  // namespace rst
