#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rst/autodiff.hpp"
#include "rst/prng.hpp"

namespace rst {

/// Anything that maps an input batch to logits on a tape.
class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual Var logits(Tape& tape, Var x) const = 0;
  [[nodiscard]] virtual std::size_t num_classes() const = 0;
};

/// Top-1 predictions of `model` on a batch.
std::vector<int> predict(const Classifier& model, const Tensor& x);

enum class LayerKind { Conv, Linear, MaxPool, AvgPool, BatchNorm, ReLU, Flatten, ResBlock };

struct LayerSpec {
  LayerKind kind = LayerKind::ReLU;
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  bool maskable = true;
};

/// Ordered layer list plus the input shape ([C,H,W] or [features]).
///
/// Presets are named by an id string that fully reconstructs the spec:
///   DeskCNN:<C>x<H>x<W>:<classes>:<width>      3 conv (+BN, ReLU, max-pool) + linear
///   DeskResNet8:<C>x<H>x<W>:<classes>:<width>  pre-activation residual net, 8 weight layers
///   Linear:<in>:<classes>                      single bias-free linear layer
///   MLP:<in>:<hidden>:<classes>                linear-ReLU-linear
struct NetworkSpec {
  std::string id;
  Shape input;
  std::size_t num_classes = 0;
  std::vector<LayerSpec> layers;

  static NetworkSpec desk_cnn(const Shape& input, std::size_t classes, std::size_t width);
  static NetworkSpec desk_resnet8(const Shape& input, std::size_t classes, std::size_t width);
  static NetworkSpec linear(std::size_t in, std::size_t classes);
  static NetworkSpec mlp(std::size_t in, std::size_t hidden, std::size_t classes);
  static NetworkSpec from_id(std::string_view id);

  /// Checks that consecutive shapes conform and something is maskable.
  void validate() const;
};

/// Shape and fan of each weight tensor, in forward traversal order.
struct WeightSlot {
  Shape shape;
  std::size_t fan_in = 0;
  std::size_t fan_out = 0;
  bool maskable = true;
  bool conv = false;
};

std::vector<WeightSlot> weight_slots(const NetworkSpec& spec);
/// Channel count of each batch-norm site, in traversal order.
std::vector<std::size_t> norm_sites(const NetworkSpec& spec);

enum class InitMethod { SignedKaimingConstant, KaimingNormal, KaimingUniform, XavierNormal };

struct InitSpec {
  InitMethod method = InitMethod::SignedKaimingConstant;
  std::uint64_t seed = 0;
  friend bool operator==(const InitSpec&, const InitSpec&) = default;
};

std::string_view to_string(InitMethod method);
InitMethod parse_init_method(std::string_view name);

/// Draws one tensor of the given fans with `method`.
Tensor draw_weights(const Shape& shape, std::size_t fan_in, std::size_t fan_out, InitMethod method, Prng& prng);

/// Frozen weights for every slot of `spec`, drawn in traversal order from `prng`.
std::vector<Tensor> initialize(const NetworkSpec& spec, InitMethod method, Prng& prng);

enum class SparsityPattern { Element, Row, Kernel, Channel };

std::string_view to_string(SparsityPattern pattern);
SparsityPattern parse_pattern(std::string_view name);

/// Number of consecutive flat weights sharing one mask bit. Groups are
/// contiguous in row-major order for every pattern: a conv weight
/// [O,C,kh,kw] groups by kw (Row), kh*kw (Kernel) or C*kh*kw (Channel);
/// a linear weight [out,in] groups by `in` for every structured pattern.
std::size_t group_size(const Shape& weight_shape, SparsityPattern pattern);
std::size_t group_count(const Shape& weight_shape, SparsityPattern pattern);

/// k = round(ratio * groups), floored at 1. Rejects ratio outside (0,1].
std::size_t kept_count(double remaining_ratio, std::size_t groups);

/// Ones at the k largest scores; ties go to the lowest flat index.
std::vector<std::uint8_t> binarize_topk(std::span<const Real> scores, double remaining_ratio);

/// Frozen weights, learnable scores and the cached binary mask of one layer.
class MaskedParameter {
 public:
  MaskedParameter(std::shared_ptr<const Tensor> theta, Tensor scores, SparsityPattern pattern, double remaining_ratio);

  [[nodiscard]] const Tensor& theta() const { return *theta_; }
  [[nodiscard]] const std::shared_ptr<const Tensor>& shared_theta() const { return theta_; }
  void replace_theta(Tensor theta);

  [[nodiscard]] const Tensor& scores() const { return scores_; }
  Tensor& mutable_scores() { return scores_; }

  [[nodiscard]] SparsityPattern pattern() const { return pattern_; }
  [[nodiscard]] double remaining_ratio() const { return ratio_; }
  [[nodiscard]] std::size_t group_size() const { return group_size_; }
  [[nodiscard]] std::size_t group_count() const { return mask_.size(); }
  [[nodiscard]] std::size_t kept() const { return kept_count(ratio_, mask_.size()); }

  /// One byte per group.
  [[nodiscard]] const std::vector<std::uint8_t>& mask() const { return mask_; }
  void rebinarize();
  /// Installs a mask (e.g. from a checkpoint); popcount must equal kept().
  void set_mask(std::vector<std::uint8_t> mask);
  [[nodiscard]] std::size_t popcount() const;

  /// The mask broadcast to the weight shape, as 0/1 reals.
  [[nodiscard]] Tensor expanded_mask() const;
  /// mask (.) theta
  [[nodiscard]] Tensor effective_weight() const;

 private:
  std::shared_ptr<const Tensor> theta_;
  Tensor scores_;
  SparsityPattern pattern_;
  double ratio_;
  std::size_t group_size_;
  std::vector<std::uint8_t> mask_;
};

/// Effective weight mask (.) theta with a straight-through backward:
/// d scores[g] = sum over group g of d weight * theta.
Var masked_weight(Var scores, const MaskedParameter& param);

/// How weights enter a forward pass.
enum class ParamBinding {
  Frozen,   ///< constants mask (.) theta; no parameter gradients
  Scores,   ///< straight-through into scores, theta constant
  Weights,  ///< theta trainable, mask fixed
};

enum class NormMode { Batch, Running };

struct ForwardOptions {
  ParamBinding binding = ParamBinding::Frozen;
  NormMode norm = NormMode::Running;
};

/// Side outputs of a forward pass.
struct ForwardTrace {
  /// Leaf per weight slot (scores or theta) when binding != Frozen.
  std::vector<Var> params;
  /// Batch statistics per norm site when norm == Batch, with per-channel sample counts.
  std::vector<NormStats> batch_stats;
  std::vector<std::size_t> batch_counts;
  /// Output of the last convolution.
  std::optional<Var> last_conv;
};

/// A network spec instantiated with frozen weights, scores, masks and
/// batch-norm running statistics. Copies share theta storage.
class Network : public Classifier {
 public:
  Network(NetworkSpec spec, InitSpec init, SparsityPattern pattern, double remaining_ratio);

  [[nodiscard]] const NetworkSpec& spec() const { return spec_; }
  [[nodiscard]] const InitSpec& init() const { return init_; }
  [[nodiscard]] SparsityPattern pattern() const { return pattern_; }
  [[nodiscard]] double remaining_ratio() const { return ratio_; }

  [[nodiscard]] std::vector<MaskedParameter>& params() { return params_; }
  [[nodiscard]] const std::vector<MaskedParameter>& params() const { return params_; }
  [[nodiscard]] std::vector<NormStats>& norm_stats() { return norms_; }
  [[nodiscard]] const std::vector<NormStats>& norm_stats() const { return norms_; }

  Var forward(Tape& tape, Var x, const ForwardOptions& options, ForwardTrace* trace = nullptr) const;
  Var logits(Tape& tape, Var x) const override { return forward(tape, x, ForwardOptions{}); }
  [[nodiscard]] std::size_t num_classes() const override { return spec_.num_classes; }

  void rebinarize();
  /// Folds a trace's batch statistics into the running averages.
  void absorb_norm_stats(const ForwardTrace& trace);
  void reset_norm_stats();

  /// Redraws every theta with a fresh init (used by reinit fine-tuning and
  /// final-layer replacement).
  void redraw_weights(InitSpec init);
  void redraw_slot(std::size_t slot, InitMethod method, Prng& prng);

  [[nodiscard]] std::size_t weight_count() const;

 private:
  NetworkSpec spec_;
  InitSpec init_;
  SparsityPattern pattern_;
  double ratio_;
  std::vector<WeightSlot> slots_;
  std::vector<MaskedParameter> params_;
  std::vector<NormStats> norms_;
};

/// 64-bit FNV-1a over the raw bytes of every theta, for freeze checks.
std::uint64_t theta_hash(const Network& net);

}  // namespace rst
