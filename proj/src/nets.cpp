#include "rst/nets.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace rst {

std::vector<int> predict(const Classifier& model, const Tensor& x) {
  Tape tape;
  const Var out = model.logits(tape, tape.constant(x));
  const auto& v = out.value();
  const std::size_t n = v.dim(0), c = v.dim(1);
  std::vector<int> labels(n);
  for (std::size_t r = 0; r < n; ++r) {
    const auto row = v.data().subspan(r * c, c);
    labels[r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return labels;
}

// ---------------------------------------------------------------------------
// Network specs

namespace {

LayerSpec conv(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t padding) {
  return {LayerKind::Conv, in, out, kernel, stride, padding, true};
}
LayerSpec dense(std::size_t in, std::size_t out) { return {LayerKind::Linear, in, out, 0, 1, 0, true}; }
LayerSpec norm(std::size_t channels) { return {LayerKind::BatchNorm, channels, channels, 0, 1, 0, false}; }
LayerSpec relu() { return {LayerKind::ReLU}; }
LayerSpec max_pool(std::size_t window) { return {LayerKind::MaxPool, 0, 0, window, window, 0, false}; }
LayerSpec avg_pool(std::size_t window) { return {LayerKind::AvgPool, 0, 0, window, window, 0, false}; }
LayerSpec flatten() { return {LayerKind::Flatten}; }
LayerSpec res_block(std::size_t in, std::size_t out, std::size_t stride) {
  return {LayerKind::ResBlock, in, out, 3, stride, 1, true};
}

bool block_needs_projection(const LayerSpec& l) { return l.in != l.out || l.stride != 1; }

std::string shape_id(const Shape& input) {
  std::string id;
  for (std::size_t i = 0; i < input.size(); ++i) id += (i ? "x" : "") + std::to_string(input[i]);
  return id;
}

std::vector<std::string> split(std::string_view text, char sep) {
  std::vector<std::string> parts;
  std::string current;
  for (char ch : text) {
    if (ch == sep) {
      parts.push_back(current);
      current.clear();
    } else {
      current += ch;
    }
  }
  parts.push_back(current);
  return parts;
}

std::size_t parse_extent(const std::string& text, std::string_view id) {
  std::size_t pos = 0;
  unsigned long long value = 0;
  try {
    value = std::stoull(text, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != text.size() || value == 0) {
    throw std::invalid_argument("network id '" + std::string(id) + "': bad extent '" + text + "'");
  }
  return static_cast<std::size_t>(value);
}

Shape parse_shape(const std::string& text, std::string_view id) {
  Shape shape;
  for (const auto& part : split(text, 'x')) shape.push_back(parse_extent(part, id));
  return shape;
}

void require_image_input(const Shape& input, const char* preset) {
  if (input.size() != 3) throw ShapeError(std::string(preset) + " expects a [C,H,W] input, got " + to_string(input));
}

}  // namespace

NetworkSpec NetworkSpec::desk_cnn(const Shape& input, std::size_t classes, std::size_t width) {
  require_image_input(input, "DeskCNN");
  NetworkSpec spec{"DeskCNN:" + shape_id(input) + ":" + std::to_string(classes) + ":" + std::to_string(width), input,
                   classes, {}};
  std::size_t channels = input[0], h = input[1], w = input[2];
  for (std::size_t stage = 0; stage < 3; ++stage) {
    const std::size_t out = width << stage;
    spec.layers.push_back(conv(channels, out, 3, 1, 1));
    spec.layers.push_back(norm(out));
    spec.layers.push_back(relu());
    spec.layers.push_back(max_pool(2));
    channels = out;
    h /= 2;
    w /= 2;
  }
  spec.layers.push_back(flatten());
  spec.layers.push_back(dense(channels * h * w, classes));
  spec.validate();
  return spec;
}

NetworkSpec NetworkSpec::desk_resnet8(const Shape& input, std::size_t classes, std::size_t width) {
  require_image_input(input, "DeskResNet8");
  NetworkSpec spec{"DeskResNet8:" + shape_id(input) + ":" + std::to_string(classes) + ":" + std::to_string(width),
                   input, classes, {}};
  spec.layers.push_back(conv(input[0], width, 3, 1, 1));
  spec.layers.push_back(res_block(width, width, 1));
  spec.layers.push_back(res_block(width, 2 * width, 2));
  spec.layers.push_back(res_block(2 * width, 4 * width, 2));
  spec.layers.push_back(norm(4 * width));
  spec.layers.push_back(relu());
  std::size_t h = input[1];
  for (int i = 0; i < 2; ++i) h = (h - 1) / 2 + 1;
  spec.layers.push_back(avg_pool(h));
  spec.layers.push_back(flatten());
  spec.layers.push_back(dense(4 * width, classes));
  spec.validate();
  return spec;
}

NetworkSpec NetworkSpec::linear(std::size_t in, std::size_t classes) {
  NetworkSpec spec{"Linear:" + std::to_string(in) + ":" + std::to_string(classes), Shape{in}, classes,
                   {dense(in, classes)}};
  spec.validate();
  return spec;
}

NetworkSpec NetworkSpec::mlp(std::size_t in, std::size_t hidden, std::size_t classes) {
  NetworkSpec spec{"MLP:" + std::to_string(in) + ":" + std::to_string(hidden) + ":" + std::to_string(classes),
                   Shape{in}, classes, {dense(in, hidden), relu(), dense(hidden, classes)}};
  spec.validate();
  return spec;
}

NetworkSpec NetworkSpec::from_id(std::string_view id) {
  const auto parts = split(id, ':');
  const auto& name = parts.front();
  if ((name == "DeskCNN" || name == "DeskResNet8") && parts.size() == 4) {
    const Shape input = parse_shape(parts[1], id);
    const auto classes = parse_extent(parts[2], id);
    const auto width = parse_extent(parts[3], id);
    return name == "DeskCNN" ? desk_cnn(input, classes, width) : desk_resnet8(input, classes, width);
  }
  if (name == "Linear" && parts.size() == 3) return linear(parse_extent(parts[1], id), parse_extent(parts[2], id));
  if (name == "MLP" && parts.size() == 4) {
    return mlp(parse_extent(parts[1], id), parse_extent(parts[2], id), parse_extent(parts[3], id));
  }
  throw std::invalid_argument("unknown network id '" + std::string(id) + "'");
}

void NetworkSpec::validate() const {
  Shape current = input;
  bool any_maskable = false;
  auto fail = [&](std::size_t i, const std::string& what) {
    throw ShapeError("network " + id + " layer " + std::to_string(i) + ": " + what + " (incoming " +
                     to_string(current) + ")");
  };
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    switch (l.kind) {
      case LayerKind::Conv:
      case LayerKind::ResBlock:
        if (current.size() != 3 || current[0] != l.in) fail(i, "expects " + std::to_string(l.in) + " channels");
        if (l.kind == LayerKind::Conv) {
          current = {l.out, window_output_size(current[1], l.kernel, l.stride, l.padding),
                     window_output_size(current[2], l.kernel, l.stride, l.padding)};
        } else {
          current = {l.out, window_output_size(current[1], 3, l.stride, 1), window_output_size(current[2], 3, l.stride, 1)};
        }
        any_maskable = any_maskable || l.maskable;
        break;
      case LayerKind::Linear:
        if (current.size() != 1 || current[0] != l.in) fail(i, "expects " + std::to_string(l.in) + " features");
        current = {l.out};
        any_maskable = any_maskable || l.maskable;
        break;
      case LayerKind::MaxPool:
      case LayerKind::AvgPool:
        if (current.size() != 3) fail(i, "pooling needs a [C,H,W] input");
        current = {current[0], window_output_size(current[1], l.kernel, l.stride, 0),
                   window_output_size(current[2], l.kernel, l.stride, 0)};
        break;
      case LayerKind::BatchNorm:
        if (current.empty() || current[0] != l.in) fail(i, "norm expects " + std::to_string(l.in) + " channels");
        break;
      case LayerKind::ReLU:
        break;
      case LayerKind::Flatten:
        current = {numel(current)};
        break;
    }
  }
  if (current != Shape{num_classes}) fail(layers.size(), "output must be [" + std::to_string(num_classes) + "]");
  if (!any_maskable) throw std::invalid_argument("network " + id + " has no maskable layer");
}

std::vector<WeightSlot> weight_slots(const NetworkSpec& spec) {
  std::vector<WeightSlot> slots;
  auto conv_slot = [&](std::size_t in, std::size_t out, std::size_t k, bool maskable) {
    slots.push_back({Shape{out, in, k, k}, in * k * k, out * k * k, maskable, true});
  };
  for (const auto& l : spec.layers) {
    if (l.kind == LayerKind::Conv) {
      conv_slot(l.in, l.out, l.kernel, l.maskable);
    } else if (l.kind == LayerKind::Linear) {
      slots.push_back({Shape{l.out, l.in}, l.in, l.out, l.maskable, false});
    } else if (l.kind == LayerKind::ResBlock) {
      conv_slot(l.in, l.out, 3, l.maskable);
      conv_slot(l.out, l.out, 3, l.maskable);
      if (block_needs_projection(l)) conv_slot(l.in, l.out, 1, l.maskable);
    }
  }
  return slots;
}

std::vector<std::size_t> norm_sites(const NetworkSpec& spec) {
  std::vector<std::size_t> sites;
  for (const auto& l : spec.layers) {
    if (l.kind == LayerKind::BatchNorm) sites.push_back(l.in);
    if (l.kind == LayerKind::ResBlock) {
      sites.push_back(l.in);
      sites.push_back(l.out);
    }
  }
  return sites;
}

// ---------------------------------------------------------------------------
// Initialization

std::string_view to_string(InitMethod method) {
  switch (method) {
    case InitMethod::SignedKaimingConstant: return "SignedKaimingConstant";
    case InitMethod::KaimingNormal: return "KaimingNormal";
    case InitMethod::KaimingUniform: return "KaimingUniform";
    case InitMethod::XavierNormal: return "XavierNormal";
  }
  return "?";
}

InitMethod parse_init_method(std::string_view name) {
  for (auto m : {InitMethod::SignedKaimingConstant, InitMethod::KaimingNormal, InitMethod::KaimingUniform,
                 InitMethod::XavierNormal}) {
    if (name == to_string(m)) return m;
  }
  throw std::invalid_argument("unknown init method '" + std::string(name) + "'");
}

Tensor draw_weights(const Shape& shape, std::size_t fan_in, std::size_t fan_out, InitMethod method, Prng& prng) {
  if (fan_in == 0) throw std::invalid_argument("initializer needs a positive fan_in for " + to_string(shape));
  Tensor w(shape);
  const double fin = static_cast<double>(fan_in);
  switch (method) {
    case InitMethod::SignedKaimingConstant: {
      const double magnitude = std::sqrt(2.0 / fin);
      for (auto& v : w.data()) v = static_cast<Real>(prng.sign() * magnitude);
      break;
    }
    case InitMethod::KaimingNormal: {
      const double stddev = std::sqrt(2.0 / fin);
      for (auto& v : w.data()) v = static_cast<Real>(prng.normal(0.0, stddev));
      break;
    }
    case InitMethod::KaimingUniform: {
      const double bound = std::sqrt(6.0 / fin);
      for (auto& v : w.data()) v = static_cast<Real>(prng.uniform(-bound, bound));
      break;
    }
    case InitMethod::XavierNormal: {
      const double stddev = std::sqrt(2.0 / (fin + static_cast<double>(fan_out)));
      for (auto& v : w.data()) v = static_cast<Real>(prng.normal(0.0, stddev));
      break;
    }
  }
  return w;
}

std::vector<Tensor> initialize(const NetworkSpec& spec, InitMethod method, Prng& prng) {
  std::vector<Tensor> weights;
  for (const auto& slot : weight_slots(spec)) weights.push_back(draw_weights(slot.shape, slot.fan_in, slot.fan_out, method, prng));
  return weights;
}

// ---------------------------------------------------------------------------
// Masks

std::string_view to_string(SparsityPattern pattern) {
  switch (pattern) {
    case SparsityPattern::Element: return "element";
    case SparsityPattern::Row: return "row";
    case SparsityPattern::Kernel: return "kernel";
    case SparsityPattern::Channel: return "channel";
  }
  return "?";
}

SparsityPattern parse_pattern(std::string_view name) {
  for (auto p : {SparsityPattern::Element, SparsityPattern::Row, SparsityPattern::Kernel, SparsityPattern::Channel}) {
    if (name == to_string(p)) return p;
  }
  throw std::invalid_argument("unknown sparsity pattern '" + std::string(name) + "'");
}

std::size_t group_size(const Shape& shape, SparsityPattern pattern) {
  if (pattern == SparsityPattern::Element) return 1;
  if (shape.size() == 2) return shape[1];
  if (shape.size() != 4) throw ShapeError("mask groups need a linear or conv weight, got " + to_string(shape));
  switch (pattern) {
    case SparsityPattern::Row: return shape[3];
    case SparsityPattern::Kernel: return shape[2] * shape[3];
    case SparsityPattern::Channel: return shape[1] * shape[2] * shape[3];
    case SparsityPattern::Element: break;
  }
  return 1;
}

std::size_t group_count(const Shape& shape, SparsityPattern pattern) { return numel(shape) / group_size(shape, pattern); }

std::size_t kept_count(double remaining_ratio, std::size_t groups) {
  if (!(remaining_ratio > 0.0 && remaining_ratio <= 1.0)) {
    throw std::invalid_argument("remaining ratio must lie in (0,1], got " + std::to_string(remaining_ratio));
  }
  if (groups == 0) throw std::invalid_argument("mask needs at least one group");
  const auto k = static_cast<std::size_t>(std::llround(remaining_ratio * static_cast<double>(groups)));
  return std::clamp<std::size_t>(k, 1, groups);
}

std::vector<std::uint8_t> binarize_topk(std::span<const Real> scores, double remaining_ratio) {
  const std::size_t k = kept_count(remaining_ratio, scores.size());
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto before = [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); };
  std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k - 1), order.end(), before);
  std::vector<std::uint8_t> mask(scores.size(), 0);
  for (std::size_t i = 0; i < k; ++i) mask[order[i]] = 1;
  return mask;
}

MaskedParameter::MaskedParameter(std::shared_ptr<const Tensor> theta, Tensor scores, SparsityPattern pattern,
                                 double remaining_ratio)
    : theta_(std::move(theta)),
      scores_(std::move(scores)),
      pattern_(pattern),
      ratio_(remaining_ratio),
      group_size_(rst::group_size(theta_->shape(), pattern)) {
  const std::size_t groups = theta_->size() / group_size_;
  if (scores_.size() != groups) {
    throw ShapeError("scores of shape " + to_string(scores_.shape()) + " do not match " + std::to_string(groups) +
                     " mask groups of weight " + to_string(theta_->shape()));
  }
  kept_count(ratio_, groups);
  rebinarize();
}

void MaskedParameter::replace_theta(Tensor theta) {
  if (theta.shape() != theta_->shape()) {
    throw ShapeError("replacement weight " + to_string(theta.shape()) + " does not match " + to_string(theta_->shape()));
  }
  theta_ = std::make_shared<const Tensor>(std::move(theta));
}

void MaskedParameter::rebinarize() { mask_ = binarize_topk(scores_.data(), ratio_); }

void MaskedParameter::set_mask(std::vector<std::uint8_t> mask) {
  if (mask.size() != scores_.size()) {
    throw ShapeError("mask of " + std::to_string(mask.size()) + " groups for a layer with " +
                     std::to_string(scores_.size()));
  }
  const auto ones = static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](auto b) { return b != 0; }));
  if (ones != kept()) {
    throw std::invalid_argument("mask popcount " + std::to_string(ones) + " differs from k = " + std::to_string(kept()));
  }
  for (auto& b : mask) b = b ? 1 : 0;
  mask_ = std::move(mask);
}

std::size_t MaskedParameter::popcount() const {
  return static_cast<std::size_t>(std::count(mask_.begin(), mask_.end(), std::uint8_t{1}));
}

Tensor MaskedParameter::expanded_mask() const {
  Tensor out(theta_->shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = mask_[i / group_size_] ? Real(1) : Real(0);
  return out;
}

Tensor MaskedParameter::effective_weight() const {
  Tensor out = *theta_;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!mask_[i / group_size_]) out[i] = Real(0);
  }
  return out;
}

Var masked_weight(Var scores, const MaskedParameter& param) {
  if (scores.shape() != param.scores().shape()) {
    throw ShapeError("masked_weight: scores " + to_string(scores.shape()) + " vs parameter scores " +
                     to_string(param.scores().shape()));
  }
  auto theta = param.shared_theta();
  const std::size_t group = param.group_size();
  return scores.tape->record("masked_weight", param.effective_weight(), {scores},
                             [scores, theta, group](Tape& t, const Tensor& g) {
                               auto d = t.grad_buffer(scores.id).data();
                               for (std::size_t i = 0; i < g.size(); ++i) d[i / group] += g[i] * (*theta)[i];
                             });
}

// ---------------------------------------------------------------------------
// Network

Network::Network(NetworkSpec spec, InitSpec init, SparsityPattern pattern, double remaining_ratio)
    : spec_(std::move(spec)), init_(init), pattern_(pattern), ratio_(remaining_ratio), slots_(weight_slots(spec_)) {
  spec_.validate();
  kept_count(remaining_ratio, 1);
  Prng prng(init.seed);
  auto thetas = initialize(spec_, init.method, prng);
  for (std::size_t s = 0; s < slots_.size(); ++s) {
    const auto& slot = slots_[s];
    const Shape score_shape =
        pattern == SparsityPattern::Element ? slot.shape : Shape{group_count(slot.shape, pattern)};
    Tensor scores = draw_weights(score_shape, slot.fan_in, slot.fan_out, InitMethod::KaimingUniform, prng);
    params_.emplace_back(std::make_shared<const Tensor>(std::move(thetas[s])), std::move(scores), pattern,
                         slot.maskable ? remaining_ratio : 1.0);
  }
  reset_norm_stats();
}

void Network::reset_norm_stats() {
  norms_.clear();
  for (auto channels : norm_sites(spec_)) norms_.push_back(NormStats::identity(channels));
}

void Network::rebinarize() {
  for (auto& p : params_) p.rebinarize();
}

void Network::absorb_norm_stats(const ForwardTrace& trace) {
  if (trace.batch_stats.size() != norms_.size()) {
    throw std::logic_error("absorb_norm_stats: trace has " + std::to_string(trace.batch_stats.size()) +
                           " norm sites, network has " + std::to_string(norms_.size()));
  }
  for (std::size_t i = 0; i < norms_.size(); ++i) update_running_stats(norms_[i], trace.batch_stats[i], trace.batch_counts[i]);
}

void Network::redraw_weights(InitSpec init) {
  Prng prng(init.seed);
  auto thetas = initialize(spec_, init.method, prng);
  for (std::size_t s = 0; s < params_.size(); ++s) params_[s].replace_theta(std::move(thetas[s]));
}

void Network::redraw_slot(std::size_t slot, InitMethod method, Prng& prng) {
  const auto& info = slots_.at(slot);
  params_.at(slot).replace_theta(draw_weights(info.shape, info.fan_in, info.fan_out, method, prng));
}

std::size_t Network::weight_count() const {
  std::size_t total = 0;
  for (const auto& p : params_) total += p.theta().size();
  return total;
}

Var Network::forward(Tape& tape, Var x, const ForwardOptions& options, ForwardTrace* trace) const {
  const auto& in_shape = x.shape();
  if (in_shape.size() != spec_.input.size() + 1 ||
      !std::equal(spec_.input.begin(), spec_.input.end(), in_shape.begin() + 1)) {
    throw ShapeError("network " + spec_.id + " expects input [N," + to_string(spec_.input).substr(1) + ", got " +
                     to_string(in_shape));
  }
  if (trace) *trace = ForwardTrace{};
  std::size_t slot = 0, site = 0;

  auto weight = [&]() -> Var {
    const auto& p = params_.at(slot++);
    switch (options.binding) {
      case ParamBinding::Frozen:
        return tape.constant(p.effective_weight());
      case ParamBinding::Scores: {
        const Var leaf = tape.leaf(p.scores(), true);
        if (trace) trace->params.push_back(leaf);
        return masked_weight(leaf, p);
      }
      case ParamBinding::Weights: {
        const Var leaf = tape.leaf(p.theta(), true);
        if (trace) trace->params.push_back(leaf);
        return ops::mul_const(leaf, p.expanded_mask());
      }
    }
    throw std::logic_error("unknown binding");
  };
  auto normalize = [&](Var h) -> Var {
    const auto& running = norms_.at(site++);
    if (options.norm == NormMode::Running) return ops::batch_norm(h, running, nullptr);
    NormStats stats;
    const Var out = ops::batch_norm(h, running, &stats);
    if (trace) {
      trace->batch_stats.push_back(std::move(stats));
      trace->batch_counts.push_back(h.value().size() / h.shape()[1]);
    }
    return out;
  };
  auto convolve = [&](Var h, std::size_t stride, std::size_t padding) {
    const Var out = ops::conv2d(h, weight(), {stride, padding});
    if (trace) trace->last_conv = out;
    return out;
  };

  Var h = x;
  for (const auto& l : spec_.layers) {
    switch (l.kind) {
      case LayerKind::Conv:
        h = convolve(h, l.stride, l.padding);
        break;
      case LayerKind::Linear:
        h = ops::linear(h, weight());
        break;
      case LayerKind::MaxPool:
        h = ops::max_pool2d(h, l.kernel, l.stride);
        break;
      case LayerKind::AvgPool:
        h = ops::avg_pool2d(h, l.kernel, l.stride);
        break;
      case LayerKind::BatchNorm:
        h = normalize(h);
        break;
      case LayerKind::ReLU:
        h = ops::relu(h);
        break;
      case LayerKind::Flatten:
        h = ops::flatten(h);
        break;
      case LayerKind::ResBlock: {
        const Var pre = ops::relu(normalize(h));
        Var branch = convolve(pre, l.stride, 1);
        branch = ops::relu(normalize(branch));
        branch = convolve(branch, 1, 1);
        const Var shortcut = block_needs_projection(l) ? ops::conv2d(pre, weight(), {l.stride, 0}) : h;
        h = ops::add(branch, shortcut);
        break;
      }
    }
  }
  return h;
}

std::uint64_t theta_hash(const Network& net) {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (const auto& p : net.params()) {
    const auto data = p.theta().data();
    const auto* bytes = reinterpret_cast<const unsigned char*>(data.data());
    for (std::size_t i = 0; i < data.size_bytes(); ++i) {
      hash ^= bytes[i];
      hash *= 0x100000001b3ULL;
    }
  }
  return hash;
}

}  // namespace rst
