#pragma once

#include <functional>
#include <optional>
#include <stdexcept>
#include <vector>

#include "rst/adversary.hpp"
#include "rst/checkpoint.hpp"
#include "rst/dataset.hpp"
#include "rst/nets.hpp"

namespace rst {

/// SGD with momentum and step decay at milestone epochs.
struct SearchSchedule {
  int epochs = 30;
  double learning_rate = 0.1;
  double momentum = 0.9;
  std::vector<int> milestones{15, 23};
  double decay = 0.1;
  std::size_t batch_size = 128;

  [[nodiscard]] double lr_at(int epoch) const;
  void validate() const;
};

/// Raised when a loss turns non-finite; names the epoch and batch.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(int epoch, std::size_t batch)
      : std::runtime_error("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch)),
        epoch_(epoch),
        batch_(batch) {}
  [[nodiscard]] int epoch() const { return epoch_; }
  [[nodiscard]] std::size_t batch() const { return batch_; }

 private:
  int epoch_;
  std::size_t batch_;
};

/// Called after every optimizer step with the updated network.
using StepObserver = std::function<void(const Network& net, int epoch, std::size_t batch, double loss)>;

struct TrainingResult {
  Network network;
  TicketCheckpoint checkpoint;
  /// Mean training loss per epoch.
  std::vector<double> epoch_loss;
};

/// Runs the minibatch loop on `net` in place.
///
/// Per batch: draw a batch seed, build x_adv with `attack` (batch-statistics
/// norm, current effective weights), forward with `binding`, step SGD on the
/// bound leaves, fold batch statistics into running averages, and re-binarize
/// masks when scores are bound. `attack` empty means natural training.
std::vector<double> optimize(Network& net, ParamBinding binding, const DataSplit& train,
                             const std::optional<AttackConfig>& attack, const SearchSchedule& schedule, Prng& prng,
                             const StepObserver& observer = {});

/// Adversarial mask search over frozen random weights. Theta is never written.
TrainingResult search_rst(const NetworkSpec& spec, InitSpec init, const Dataset& data, double remaining_ratio,
                          SparsityPattern pattern, const AttackConfig& attack, const SearchSchedule& schedule,
                          Prng& prng, const StepObserver& observer = {});

enum class TrainMode { Natural, Adversarial };

/// Trains every weight of the dense network (remaining ratio 1).
TrainingResult train_dense(const NetworkSpec& spec, InitSpec init, const Dataset& data, TrainMode mode,
                           const std::optional<AttackConfig>& attack, const SearchSchedule& schedule, Prng& prng,
                           const StepObserver& observer = {});

/// Mask search over trained weights. `source` must carry a weight payload
/// and a dense provenance. When the dataset's class count differs from the
/// source network's, `reinit_last_layer` redraws the final linear layer.
TrainingResult search_rtt(const TicketCheckpoint& source, const Dataset& data, double remaining_ratio,
                          SparsityPattern pattern, const AttackConfig& attack, const SearchSchedule& schedule,
                          Prng& prng, bool reinit_last_layer = false, const StepObserver& observer = {});

enum class FinetuneMode { Inherit, Reinit };

/// Adversarially trains the surviving weights of a ticket with its mask frozen.
/// Reinit redraws theta from `reinit_seed` first.
TrainingResult finetune_ticket(const TicketCheckpoint& ticket, FinetuneMode mode, const Dataset& data,
                               const AttackConfig& attack, const SearchSchedule& schedule, Prng& prng,
                               std::uint64_t reinit_seed = 0, const StepObserver& observer = {});

/// Re-estimates running norm statistics from `passes` sweeps of batch
/// statistics over `split`, without touching weights or masks.
void calibrate_norm_stats(Network& net, const DataSplit& split, std::size_t batch = 128, int passes = 3);

/// Mean cross-entropy of `model` on adversarial examples from `attack` (running norm statistics).
double robust_loss(const Classifier& model, const DataSplit& split, const AttackConfig& attack, const Prng& prng);

}  // namespace rst
