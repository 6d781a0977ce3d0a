#include "rst/search.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace rst {

double SearchSchedule::lr_at(int epoch) const {
  double lr = learning_rate;
  for (int m : milestones) {
    if (epoch >= m) lr *= decay;
  }
  return lr;
}

void SearchSchedule::validate() const {
  if (epochs < 0) throw std::invalid_argument("schedule epochs must be >= 0");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("schedule learning rate must be > 0");
  if (!(decay > 0.0)) throw std::invalid_argument("schedule decay must be > 0 to keep the learning rate positive");
  if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("schedule momentum must lie in [0,1)");
  if (batch_size == 0) throw std::invalid_argument("schedule batch size must be positive");
}

namespace {

/// Training-mode view of a network: batch statistics, current effective weights.
class BatchStatsView : public Classifier {
 public:
  explicit BatchStatsView(const Network& net) : net_(net) {}
  Var logits(Tape& tape, Var x) const override {
    return net_.forward(tape, x, {ParamBinding::Frozen, NormMode::Batch});
  }
  [[nodiscard]] std::size_t num_classes() const override { return net_.num_classes(); }

 private:
  const Network& net_;
};

}  // namespace

std::vector<double> optimize(Network& net, ParamBinding binding, const DataSplit& train,
                             const std::optional<AttackConfig>& attack, const SearchSchedule& schedule, Prng& prng,
                             const StepObserver& observer) {
  schedule.validate();
  if (binding == ParamBinding::Frozen) throw std::invalid_argument("optimize: nothing to learn with frozen binding");
  if (train.size() == 0) throw std::invalid_argument("optimize: empty training split");
  if (attack) attack->validate();

  auto& params = net.params();
  std::vector<Tensor> velocity;
  for (const auto& p : params) {
    velocity.emplace_back(binding == ParamBinding::Scores ? p.scores().shape() : p.theta().shape(), Real(0));
  }
  const std::size_t n = train.size();
  const std::size_t batches = (n + schedule.batch_size - 1) / schedule.batch_size;
  std::vector<double> epoch_loss;

  for (int epoch = 0; epoch < schedule.epochs; ++epoch) {
    const Real lr = static_cast<Real>(schedule.lr_at(epoch));
    const Real mu = static_cast<Real>(schedule.momentum);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    prng.shuffle(order);
    double loss_sum = 0.0;

    for (std::size_t b = 0; b < batches; ++b) {
      const auto first = order.begin() + static_cast<std::ptrdiff_t>(b * schedule.batch_size);
      const auto last = order.begin() + static_cast<std::ptrdiff_t>(std::min(n, (b + 1) * schedule.batch_size));
      const std::vector<std::size_t> rows(first, last);
      const std::uint64_t batch_seed = prng.next_u64();
      DataSplit batch = train.select(rows);

      if (attack) {
        const BatchStatsView view(net);
        batch.x = perturb(view, batch.x, batch.y, *attack, Prng(batch_seed), rows);
      }

      Tape tape;
      ForwardTrace trace;
      const Var logits =
          net.forward(tape, tape.constant(batch.x), {binding, NormMode::Batch}, &trace);
      const Var loss = ops::cross_entropy(logits, batch.y);
      const double loss_value = static_cast<double>(loss.value().item());
      if (!std::isfinite(loss_value)) throw DivergenceError(epoch, b);
      tape.backward(loss);

      for (std::size_t i = 0; i < params.size(); ++i) {
        const Var leaf = trace.params[i];
        if (!tape.has_grad(leaf.id)) continue;
        const Tensor& grad = leaf.grad();
        auto& v = velocity[i];
        for (std::size_t j = 0; j < v.size(); ++j) v[j] = mu * v[j] + grad[j];
        if (binding == ParamBinding::Scores) {
          auto s = params[i].mutable_scores().data();
          for (std::size_t j = 0; j < s.size(); ++j) s[j] -= lr * v[j];
        } else {
          Tensor theta = params[i].theta();
          for (std::size_t j = 0; j < theta.size(); ++j) theta[j] -= lr * v[j];
          params[i].replace_theta(std::move(theta));
        }
      }
      net.absorb_norm_stats(trace);
      if (binding == ParamBinding::Scores) net.rebinarize();
      loss_sum += loss_value * static_cast<double>(rows.size());
      if (observer) observer(net, epoch, b, loss_value);
    }
    epoch_loss.push_back(loss_sum / static_cast<double>(n));
  }
  return epoch_loss;
}

namespace {

void check_dataset_matches(const NetworkSpec& spec, const Dataset& data) {
  if (data.num_classes != spec.num_classes) {
    throw std::invalid_argument("network " + spec.id + " has " + std::to_string(spec.num_classes) +
                                " classes, dataset " + data.name + " has " + std::to_string(data.num_classes));
  }
  const auto& shape = data.train.x.shape();
  if (shape.size() != spec.input.size() + 1 || !std::equal(spec.input.begin(), spec.input.end(), shape.begin() + 1)) {
    throw ShapeError("dataset " + data.name + " samples " + to_string(shape) + " do not fit network " + spec.id);
  }
}

std::string with_classes(const std::string& id, std::size_t classes) {
  // The class count is the third ':' field for image presets and the last for Linear/MLP.
  const auto spec = NetworkSpec::from_id(id);
  if (spec.id.rfind("DeskCNN", 0) == 0) return NetworkSpec::desk_cnn(spec.input, classes, spec.layers.front().out).id;
  if (spec.id.rfind("DeskResNet8", 0) == 0) {
    return NetworkSpec::desk_resnet8(spec.input, classes, spec.layers.front().out).id;
  }
  if (spec.id.rfind("Linear", 0) == 0) return NetworkSpec::linear(spec.input[0], classes).id;
  return NetworkSpec::mlp(spec.input[0], spec.layers.front().out, classes).id;
}

}  // namespace

TrainingResult search_rst(const NetworkSpec& spec, InitSpec init, const Dataset& data, double remaining_ratio,
                          SparsityPattern pattern, const AttackConfig& attack, const SearchSchedule& schedule,
                          Prng& prng, const StepObserver& observer) {
  check_dataset_matches(spec, data);
  Network net(spec, init, pattern, remaining_ratio);
  auto losses = optimize(net, ParamBinding::Scores, data.train, attack, schedule, prng, observer);
  auto ckpt = make_checkpoint(net, Provenance::RST, false);
  return {std::move(net), std::move(ckpt), std::move(losses)};
}

TrainingResult train_dense(const NetworkSpec& spec, InitSpec init, const Dataset& data, TrainMode mode,
                           const std::optional<AttackConfig>& attack, const SearchSchedule& schedule, Prng& prng,
                           const StepObserver& observer) {
  check_dataset_matches(spec, data);
  if (mode == TrainMode::Adversarial && !attack) throw std::invalid_argument("adversarial training needs an attack");
  Network net(spec, init, SparsityPattern::Element, 1.0);
  const std::optional<AttackConfig> used = mode == TrainMode::Adversarial ? attack : std::nullopt;
  auto losses = optimize(net, ParamBinding::Weights, data.train, used, schedule, prng, observer);
  auto ckpt = make_checkpoint(
      net, mode == TrainMode::Adversarial ? Provenance::DenseAdversarial : Provenance::DenseNatural, true);
  return {std::move(net), std::move(ckpt), std::move(losses)};
}

TrainingResult search_rtt(const TicketCheckpoint& source, const Dataset& data, double remaining_ratio,
                          SparsityPattern pattern, const AttackConfig& attack, const SearchSchedule& schedule,
                          Prng& prng, bool reinit_last_layer, const StepObserver& observer) {
  Provenance tag;
  if (source.provenance == Provenance::DenseNatural) {
    tag = Provenance::NaturalRTT;
  } else if (source.provenance == Provenance::DenseAdversarial) {
    tag = Provenance::AdversarialRTT;
  } else {
    throw std::invalid_argument("RTT search needs a dense trained source, got " + std::string(to_string(source.provenance)));
  }
  if (!source.weights) throw std::invalid_argument("RTT source checkpoint carries no weights");

  const auto source_spec = NetworkSpec::from_id(source.network_id);
  const bool class_mismatch = source_spec.num_classes != data.num_classes;
  if (class_mismatch && !reinit_last_layer) {
    throw std::invalid_argument("source network has " + std::to_string(source_spec.num_classes) +
                                " classes, dataset has " + std::to_string(data.num_classes) +
                                "; enable final-layer reinitialization");
  }
  const auto spec = NetworkSpec::from_id(class_mismatch ? with_classes(source.network_id, data.num_classes)
                                                        : source.network_id);
  check_dataset_matches(spec, data);
  Network net(spec, source.init, pattern, remaining_ratio);
  auto& params = net.params();
  const std::size_t last = params.size() - 1;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (i == last && reinit_last_layer) continue;
    params[i].replace_theta((*source.weights)[i]);
  }
  if (reinit_last_layer) {
    Prng fresh = prng.split(0x5eed);
    net.redraw_slot(last, source.init.method, fresh);
  }
  net.norm_stats() = source.norm_stats;
  auto losses = optimize(net, ParamBinding::Scores, data.train, attack, schedule, prng, observer);
  auto ckpt = make_checkpoint(net, tag, true);
  return {std::move(net), std::move(ckpt), std::move(losses)};
}

TrainingResult finetune_ticket(const TicketCheckpoint& ticket, FinetuneMode mode, const Dataset& data,
                               const AttackConfig& attack, const SearchSchedule& schedule, Prng& prng,
                               std::uint64_t reinit_seed, const StepObserver& observer) {
  Network net = restore(ticket);
  check_dataset_matches(net.spec(), data);
  if (mode == FinetuneMode::Reinit) net.redraw_weights({ticket.init.method, reinit_seed});
  auto losses = optimize(net, ParamBinding::Weights, data.train, attack, schedule, prng, observer);
  auto ckpt = make_checkpoint(
      net, mode == FinetuneMode::Inherit ? Provenance::FinetunedInherit : Provenance::FinetunedReinit, true);
  return {std::move(net), std::move(ckpt), std::move(losses)};
}

void calibrate_norm_stats(Network& net, const DataSplit& split, std::size_t batch, int passes) {
  if (split.size() == 0) throw std::invalid_argument("calibrate_norm_stats: empty split");
  net.reset_norm_stats();
  for (int p = 0; p < passes; ++p) {
    for (std::size_t lo = 0; lo < split.size(); lo += batch) {
      const std::size_t hi = std::min(split.size(), lo + batch);
      Tape tape;
      ForwardTrace trace;
      net.forward(tape, tape.constant(split.x.slice_rows(lo, hi)), {ParamBinding::Frozen, NormMode::Batch}, &trace);
      net.absorb_norm_stats(trace);
    }
  }
}

double robust_loss(const Classifier& model, const DataSplit& split, const AttackConfig& attack, const Prng& prng) {
  std::vector<std::size_t> ids(split.size());
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  const Tensor x_adv = perturb(model, split.x, split.y, attack, prng, ids);
  Tape tape;
  return static_cast<double>(ops::cross_entropy(model.logits(tape, tape.constant(x_adv)), split.y).value().item());
}

}  // namespace rst
