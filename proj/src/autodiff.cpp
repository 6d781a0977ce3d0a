#include "rst/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "gemm.hpp"

namespace rst {

const Tensor& Var::value() const { return tape->value(id); }
bool Var::requires_grad() const { return tape->requires_grad(id); }
const Tensor& Var::grad() const { return tape->grad(id); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  nodes_.push_back(Node{"leaf", std::move(value), requires_grad, std::nullopt, nullptr});
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(std::string op, Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  bool needs = false;
  for (const auto& in : inputs) {
    if (in.tape != this) throw std::logic_error(op + ": input recorded on a different tape");
    needs = needs || nodes_[in.id].requires_grad;
  }
  nodes_.push_back(Node{std::move(op), std::move(value), needs, std::nullopt, needs ? std::move(backward) : nullptr});
  return Var{this, nodes_.size() - 1};
}

const Tensor& Tape::grad(std::size_t id) const {
  const auto& node = nodes_.at(id);
  if (!node.grad) throw std::logic_error("no gradient recorded for node " + std::to_string(id) + " (" + node.op + ")");
  return *node.grad;
}

Tensor& Tape::grad_buffer(std::size_t id) {
  auto& node = nodes_.at(id);
  if (!node.grad) node.grad.emplace(node.value.shape(), Real(0));
  return *node.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw std::logic_error("backward: loss belongs to another tape");
  if (nodes_.empty()) throw std::logic_error("backward: empty tape");
  const auto& loss_node = nodes_.at(loss.id);
  if (loss_node.value.size() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " + to_string(loss_node.value.shape()));
  }
  for (auto& node : nodes_) node.grad.reset();
  grad_buffer(loss.id).fill(Real(1));
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    auto& node = nodes_[i];
    if (!node.grad || !node.backward) continue;
    node.backward(*this, *node.grad);
  }
}

std::size_t window_output_size(std::size_t in, std::size_t window, std::size_t stride, std::size_t padding) {
  if (stride == 0) throw ShapeError("window stride must be positive");
  if (in + 2 * padding < window) {
    throw ShapeError("window " + std::to_string(window) + " larger than padded input " +
                     std::to_string(in + 2 * padding));
  }
  return (in + 2 * padding - window) / stride + 1;
}

void update_running_stats(NormStats& running, const NormStats& batch, std::size_t samples_per_channel) {
  const Real correction =
      samples_per_channel > 1 ? Real(samples_per_channel) / Real(samples_per_channel - 1) : Real(1);
  for (std::size_t c = 0; c < running.mean.size(); ++c) {
    running.mean[c] = (Real(1) - kNormMomentum) * running.mean[c] + kNormMomentum * batch.mean[c];
    running.var[c] = (Real(1) - kNormMomentum) * running.var[c] + kNormMomentum * batch.var[c] * correction;
  }
}

namespace ops {

namespace {

void require_same_shape(const char* op, Var a, Var b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

void accumulate(Tensor& dst, std::span<const Real> src, Real factor = Real(1)) {
  auto d = dst.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += factor * src[i];
}

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t out_channels, kh, kw, out_h, out_w;
  std::size_t stride, padding;
  [[nodiscard]] std::size_t patch() const { return channels * kh * kw; }
  [[nodiscard]] std::size_t plane() const { return out_h * out_w; }
};

void im2col(const Real* x, const ConvGeometry& g, Real* cols) {
  const std::size_t plane = g.plane();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        Real* row = cols + ((c * g.kh + ki) * g.kw + kj) * plane;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) - static_cast<std::ptrdiff_t>(g.padding);
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) - static_cast<std::ptrdiff_t>(g.padding);
            const bool inside = ih >= 0 && iw >= 0 && ih < static_cast<std::ptrdiff_t>(g.height) &&
                                iw < static_cast<std::ptrdiff_t>(g.width);
            row[oh * g.out_w + ow] =
                inside ? x[(c * g.height + static_cast<std::size_t>(ih)) * g.width + static_cast<std::size_t>(iw)]
                       : Real(0);
          }
        }
      }
    }
  }
}

void col2im_add(const Real* cols, const ConvGeometry& g, Real* dx) {
  const std::size_t plane = g.plane();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const Real* row = cols + ((c * g.kh + ki) * g.kw + kj) * plane;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) - static_cast<std::ptrdiff_t>(g.padding);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) continue;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) - static_cast<std::ptrdiff_t>(g.padding);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.width)) continue;
            dx[(c * g.height + static_cast<std::size_t>(ih)) * g.width + static_cast<std::size_t>(iw)] +=
                row[oh * g.out_w + ow];
          }
        }
      }
    }
  }
}

struct PoolGeometry {
  std::size_t batch, channels, height, width, out_h, out_w, window, stride;
};

PoolGeometry pool_geometry(const char* op, Var x, std::size_t window, std::size_t stride) {
  const auto& s = x.shape();
  if (s.size() != 4) throw ShapeError(std::string(op) + ": expected NCHW input, got " + to_string(s));
  if (window == 0) throw ShapeError(std::string(op) + ": window must be positive");
  return {s[0], s[1], s[2], s[3], window_output_size(s[2], window, stride, 0), window_output_size(s[3], window, stride, 0),
          window, stride};
}

struct ChannelLayout {
  std::size_t batch, channels, spatial;
};

ChannelLayout channel_layout(const Shape& s) {
  if (s.size() == 2) return {s[0], s[1], 1};
  if (s.size() == 4) return {s[0], s[1], s[2] * s[3]};
  throw ShapeError("batch_norm: expected rank-2 or rank-4 input, got " + to_string(s));
}

void check_labels(const char* op, const Shape& s, std::span<const int> labels) {
  if (s.size() != 2) throw ShapeError(std::string(op) + ": expected [n,c] input, got " + to_string(s));
  if (labels.size() != s[0]) {
    throw ShapeError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for batch " +
                     std::to_string(s[0]));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= s[1]) {
      throw std::out_of_range(std::string(op) + ": label " + std::to_string(y) + " outside [0," +
                              std::to_string(s[1]) + ")");
    }
  }
}

}  // namespace

Var add(Var a, Var b) {
  require_same_shape("add", a, b);
  Tensor out = a.value();
  accumulate(out, b.value().data());
  return a.tape->record("add", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.requires_grad(a.id)) accumulate(t.grad_buffer(a.id), g.data());
    if (t.requires_grad(b.id)) accumulate(t.grad_buffer(b.id), g.data());
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a, b);
  Tensor out = a.value();
  accumulate(out, b.value().data(), Real(-1));
  return a.tape->record("sub", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.requires_grad(a.id)) accumulate(t.grad_buffer(a.id), g.data());
    if (t.requires_grad(b.id)) accumulate(t.grad_buffer(b.id), g.data(), Real(-1));
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a, b);
  Tensor out = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape->record("mul", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const auto av = t.value(a.id).data();
    const auto bv = t.value(b.id).data();
    if (t.requires_grad(a.id)) {
      auto d = t.grad_buffer(a.id).data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b.id)) {
      auto d = t.grad_buffer(b.id).data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, Real factor) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= factor;
  return a.tape->record("scale", std::move(out), {a}, [a, factor](Tape& t, const Tensor& g) {
    accumulate(t.grad_buffer(a.id), g.data(), factor);
  });
}

Var mul_const(Var a, const Tensor& factor) {
  if (a.shape() != factor.shape()) {
    throw ShapeError("mul_const: shape mismatch " + to_string(a.shape()) + " vs " + to_string(factor.shape()));
  }
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= factor[i];
  return a.tape->record("mul_const", std::move(out), {a}, [a, factor](Tape& t, const Tensor& g) {
    auto d = t.grad_buffer(a.id).data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * factor[i];
  });
}

Var relu(Var a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = v > Real(0) ? v : Real(0);
  return a.tape->record("relu", std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    const auto x = t.value(a.id).data();
    auto d = t.grad_buffer(a.id).data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (x[i] > Real(0)) d[i] += g[i];
    }
  });
}

Var matmul(Var a, Var b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
    throw ShapeError("matmul: cannot multiply " + to_string(sa) + " by " + to_string(sb));
  }
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  Tensor out(Shape{m, n});
  detail::gemm(false, false, m, n, k, Real(1), a.value().data().data(), b.value().data().data(), Real(0),
               out.data().data());
  return a.tape->record("matmul", std::move(out), {a, b}, [a, b, m, n, k](Tape& t, const Tensor& g) {
    if (t.requires_grad(a.id)) {
      detail::gemm(false, true, m, k, n, Real(1), g.data().data(), t.value(b.id).data().data(), Real(1),
                   t.grad_buffer(a.id).data().data());
    }
    if (t.requires_grad(b.id)) {
      detail::gemm(true, false, k, n, m, Real(1), t.value(a.id).data().data(), g.data().data(), Real(1),
                   t.grad_buffer(b.id).data().data());
    }
  });
}

Var linear(Var x, Var w) {
  const auto& sx = x.shape();
  const auto& sw = w.shape();
  if (sx.size() != 2 || sw.size() != 2 || sx[1] != sw[1]) {
    throw ShapeError("linear: input " + to_string(sx) + " does not match weight " + to_string(sw));
  }
  const std::size_t n = sx[0], in = sx[1], out_features = sw[0];
  Tensor out(Shape{n, out_features});
  // Row by row, so a sample's output and input gradient do not depend on the batch it sits in.
  for (std::size_t r = 0; r < n; ++r) {
    detail::gemm(false, true, 1, out_features, in, Real(1), x.value().data().data() + r * in,
                 w.value().data().data(), Real(0), out.data().data() + r * out_features);
  }
  return x.tape->record("linear", std::move(out), {x, w}, [x, w, n, in, out_features](Tape& t, const Tensor& g) {
    if (t.requires_grad(x.id)) {
      Real* dx = t.grad_buffer(x.id).data().data();
      for (std::size_t r = 0; r < n; ++r) {
        detail::gemm(false, false, 1, in, out_features, Real(1), g.data().data() + r * out_features,
                     t.value(w.id).data().data(), Real(1), dx + r * in);
      }
    }
    if (t.requires_grad(w.id)) {
      detail::gemm(true, false, out_features, in, n, Real(1), g.data().data(), t.value(x.id).data().data(), Real(1),
                   t.grad_buffer(w.id).data().data());
    }
  });
}

Var conv2d(Var x, Var w, Conv2dOptions options) {
  const auto& sx = x.shape();
  const auto& sw = w.shape();
  if (sx.size() != 4 || sw.size() != 4 || sx[1] != sw[1]) {
    throw ShapeError("conv2d: input " + to_string(sx) + " does not match kernel " + to_string(sw));
  }
  ConvGeometry geo{sx[0],
                   sx[1],
                   sx[2],
                   sx[3],
                   sw[0],
                   sw[2],
                   sw[3],
                   window_output_size(sx[2], sw[2], options.stride, options.padding),
                   window_output_size(sx[3], sw[3], options.stride, options.padding),
                   options.stride,
                   options.padding};
  Tensor out(Shape{geo.batch, geo.out_channels, geo.out_h, geo.out_w});
  std::vector<Real> cols(geo.patch() * geo.plane());
  const std::size_t in_stride = geo.channels * geo.height * geo.width;
  const std::size_t out_stride = geo.out_channels * geo.plane();
  const Real* xv = x.value().data().data();
  const Real* wv = w.value().data().data();
  for (std::size_t b = 0; b < geo.batch; ++b) {
    im2col(xv + b * in_stride, geo, cols.data());
    detail::gemm(false, false, geo.out_channels, geo.plane(), geo.patch(), Real(1), wv, cols.data(), Real(0),
                 out.data().data() + b * out_stride);
  }
  return x.tape->record("conv2d", std::move(out), {x, w}, [x, w, geo](Tape& t, const Tensor& g) {
    const std::size_t in_stride = geo.channels * geo.height * geo.width;
    const std::size_t out_stride = geo.out_channels * geo.plane();
    std::vector<Real> cols(geo.patch() * geo.plane());
    const bool want_x = t.requires_grad(x.id);
    const bool want_w = t.requires_grad(w.id);
    const Real* xv = t.value(x.id).data().data();
    const Real* wv = t.value(w.id).data().data();
    Real* dx = want_x ? t.grad_buffer(x.id).data().data() : nullptr;
    Real* dw = want_w ? t.grad_buffer(w.id).data().data() : nullptr;
    for (std::size_t b = 0; b < geo.batch; ++b) {
      const Real* gb = g.data().data() + b * out_stride;
      if (want_w) {
        im2col(xv + b * in_stride, geo, cols.data());
        detail::gemm(false, true, geo.out_channels, geo.patch(), geo.plane(), Real(1), gb, cols.data(), Real(1), dw);
      }
      if (want_x) {
        detail::gemm(true, false, geo.patch(), geo.plane(), geo.out_channels, Real(1), wv, gb, Real(0), cols.data());
        col2im_add(cols.data(), geo, dx + b * in_stride);
      }
    }
  });
}

Var max_pool2d(Var x, std::size_t window, std::size_t stride) {
  const auto geo = pool_geometry("max_pool2d", x, window, stride);
  Tensor out(Shape{geo.batch, geo.channels, geo.out_h, geo.out_w});
  std::vector<std::size_t> argmax(out.size());
  const auto xv = x.value().data();
  std::size_t o = 0;
  for (std::size_t p = 0; p < geo.batch * geo.channels; ++p) {
    const std::size_t base = p * geo.height * geo.width;
    for (std::size_t oh = 0; oh < geo.out_h; ++oh) {
      for (std::size_t ow = 0; ow < geo.out_w; ++ow, ++o) {
        std::size_t best = base + (oh * stride) * geo.width + ow * stride;
        for (std::size_t i = 0; i < window; ++i) {
          for (std::size_t j = 0; j < window; ++j) {
            const std::size_t idx = base + (oh * stride + i) * geo.width + ow * stride + j;
            if (xv[idx] > xv[best]) best = idx;
          }
        }
        argmax[o] = best;
        out[o] = xv[best];
      }
    }
  }
  return x.tape->record("max_pool2d", std::move(out), {x}, [x, argmax = std::move(argmax)](Tape& t, const Tensor& g) {
    auto d = t.grad_buffer(x.id).data();
    for (std::size_t i = 0; i < argmax.size(); ++i) d[argmax[i]] += g[i];
  });
}

Var avg_pool2d(Var x, std::size_t window, std::size_t stride) {
  const auto geo = pool_geometry("avg_pool2d", x, window, stride);
  Tensor out(Shape{geo.batch, geo.channels, geo.out_h, geo.out_w});
  const Real inv = Real(1) / Real(window * window);
  const auto xv = x.value().data();
  std::size_t o = 0;
  for (std::size_t p = 0; p < geo.batch * geo.channels; ++p) {
    const std::size_t base = p * geo.height * geo.width;
    for (std::size_t oh = 0; oh < geo.out_h; ++oh) {
      for (std::size_t ow = 0; ow < geo.out_w; ++ow, ++o) {
        Real acc = 0;
        for (std::size_t i = 0; i < window; ++i) {
          for (std::size_t j = 0; j < window; ++j) acc += xv[base + (oh * stride + i) * geo.width + ow * stride + j];
        }
        out[o] = acc * inv;
      }
    }
  }
  return x.tape->record("avg_pool2d", std::move(out), {x}, [x, geo, inv](Tape& t, const Tensor& g) {
    auto d = t.grad_buffer(x.id).data();
    std::size_t o = 0;
    for (std::size_t p = 0; p < geo.batch * geo.channels; ++p) {
      const std::size_t base = p * geo.height * geo.width;
      for (std::size_t oh = 0; oh < geo.out_h; ++oh) {
        for (std::size_t ow = 0; ow < geo.out_w; ++ow, ++o) {
          for (std::size_t i = 0; i < geo.window; ++i) {
            for (std::size_t j = 0; j < geo.window; ++j) {
              d[base + (oh * geo.stride + i) * geo.width + ow * geo.stride + j] += g[o] * inv;
            }
          }
        }
      }
    }
  });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape->record("reshape", std::move(out), {x},
                        [x](Tape& t, const Tensor& g) { accumulate(t.grad_buffer(x.id), g.data()); });
}

Var flatten(Var x) {
  const auto& s = x.shape();
  if (s.empty()) throw ShapeError("flatten: rank-0 input");
  return reshape(x, Shape{s[0], x.value().size() / s[0]});
}

Var batch_norm(Var x, const NormStats& running, NormStats* batch_out) {
  const auto layout = channel_layout(x.shape());
  if (running.mean.size() != layout.channels || running.var.size() != layout.channels) {
    throw ShapeError("batch_norm: statistics for " + std::to_string(running.mean.size()) + " channels, input " +
                     to_string(x.shape()));
  }
  const auto xv = x.value().data();
  const std::size_t count = layout.batch * layout.spatial;
  std::vector<Real> mean(layout.channels), inv_std(layout.channels);
  auto index = [&](std::size_t b, std::size_t c, std::size_t s) {
    return (b * layout.channels + c) * layout.spatial + s;
  };
  if (batch_out) {
    batch_out->mean.assign(layout.channels, Real(0));
    batch_out->var.assign(layout.channels, Real(0));
    for (std::size_t c = 0; c < layout.channels; ++c) {
      Real acc = 0;
      for (std::size_t b = 0; b < layout.batch; ++b)
        for (std::size_t s = 0; s < layout.spatial; ++s) acc += xv[index(b, c, s)];
      const Real mu = acc / Real(count);
      Real sq = 0;
      for (std::size_t b = 0; b < layout.batch; ++b)
        for (std::size_t s = 0; s < layout.spatial; ++s) {
          const Real dlt = xv[index(b, c, s)] - mu;
          sq += dlt * dlt;
        }
      const Real var = sq / Real(count);
      batch_out->mean[c] = mu;
      batch_out->var[c] = var;
      mean[c] = mu;
      inv_std[c] = Real(1) / std::sqrt(var + kNormEpsilon);
    }
  } else {
    for (std::size_t c = 0; c < layout.channels; ++c) {
      mean[c] = running.mean[c];
      inv_std[c] = Real(1) / std::sqrt(running.var[c] + kNormEpsilon);
    }
  }
  Tensor out(x.shape());
  for (std::size_t b = 0; b < layout.batch; ++b)
    for (std::size_t c = 0; c < layout.channels; ++c)
      for (std::size_t s = 0; s < layout.spatial; ++s) {
        const auto i = index(b, c, s);
        out[i] = (xv[i] - mean[c]) * inv_std[c];
      }
  const bool batch_mode = batch_out != nullptr;
  Tensor normalized = out;
  return x.tape->record(
      "batch_norm", std::move(out), {x},
      [x, layout, inv_std, batch_mode, normalized = std::move(normalized)](Tape& t, const Tensor& g) {
        auto d = t.grad_buffer(x.id).data();
        auto index = [&](std::size_t b, std::size_t c, std::size_t s) {
          return (b * layout.channels + c) * layout.spatial + s;
        };
        const Real count = Real(layout.batch * layout.spatial);
        for (std::size_t c = 0; c < layout.channels; ++c) {
          Real mean_g = 0, mean_gx = 0;
          if (batch_mode) {
            for (std::size_t b = 0; b < layout.batch; ++b)
              for (std::size_t s = 0; s < layout.spatial; ++s) {
                const auto i = index(b, c, s);
                mean_g += g[i];
                mean_gx += g[i] * normalized[i];
              }
            mean_g /= count;
            mean_gx /= count;
          }
          for (std::size_t b = 0; b < layout.batch; ++b)
            for (std::size_t s = 0; s < layout.spatial; ++s) {
              const auto i = index(b, c, s);
              d[i] += inv_std[c] * (g[i] - mean_g - normalized[i] * mean_gx);
            }
        }
      });
}

Var softmax(Var x) {
  const auto& s = x.shape();
  if (s.size() != 2) throw ShapeError("softmax: expected [n,c] input, got " + to_string(s));
  const std::size_t n = s[0], c = s[1];
  Tensor out(s);
  const auto xv = x.value().data();
  for (std::size_t r = 0; r < n; ++r) {
    const Real* row = xv.data() + r * c;
    const Real mx = *std::max_element(row, row + c);
    Real total = 0;
    for (std::size_t j = 0; j < c; ++j) total += (out[r * c + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] /= total;
  }
  Tensor probs = out;
  return x.tape->record("softmax", std::move(out), {x}, [x, n, c, probs = std::move(probs)](Tape& t, const Tensor& g) {
    auto d = t.grad_buffer(x.id).data();
    for (std::size_t r = 0; r < n; ++r) {
      Real dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += g[r * c + j] * probs[r * c + j];
      for (std::size_t j = 0; j < c; ++j) d[r * c + j] += probs[r * c + j] * (g[r * c + j] - dot);
    }
  });
}

Var cross_entropy(Var logits, std::span<const int> labels, bool sum_reduction) {
  check_labels("cross_entropy", logits.shape(), labels);
  const std::size_t n = logits.shape()[0], c = logits.shape()[1];
  const auto xv = logits.value().data();
  std::vector<Real> probs(n * c);
  Real loss = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const Real* row = xv.data() + r * c;
    const Real mx = *std::max_element(row, row + c);
    Real total = 0;
    for (std::size_t j = 0; j < c; ++j) total += (probs[r * c + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] /= total;
    loss += std::log(total) + mx - row[static_cast<std::size_t>(labels[r])];
  }
  const Real norm = sum_reduction ? Real(1) : Real(1) / Real(n);
  std::vector<int> ys(labels.begin(), labels.end());
  return logits.tape->record(
      "cross_entropy", Tensor::scalar(loss * norm), {logits},
      [logits, n, c, norm, ys = std::move(ys), probs = std::move(probs)](Tape& t, const Tensor& g) {
        auto d = t.grad_buffer(logits.id).data();
        const Real scale = g[0] * norm;
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t j = 0; j < c; ++j) {
            const Real target = static_cast<std::size_t>(ys[r]) == j ? Real(1) : Real(0);
            d[r * c + j] += scale * (probs[r * c + j] - target);
          }
        }
      });
}

Var ensemble_cross_entropy(std::span<const Var> member_logits, std::span<const int> labels, bool sum_reduction) {
  if (member_logits.empty()) throw std::invalid_argument("ensemble_cross_entropy: no members");
  const Shape shape = member_logits.front().shape();
  for (const auto& l : member_logits) {
    if (l.shape() != shape) {
      throw ShapeError("ensemble_cross_entropy: member shape " + to_string(l.shape()) + " vs " + to_string(shape));
    }
  }
  check_labels("ensemble_cross_entropy", shape, labels);
  const std::size_t n = shape[0], c = shape[1], members = member_logits.size();
  if (members == 1) {
    // Same arithmetic as cross_entropy so the degenerate ensemble matches it bit for bit.
    return cross_entropy(member_logits.front(), labels, sum_reduction);
  }
  std::vector<std::vector<Real>> probs(members, std::vector<Real>(n * c));
  for (std::size_t m = 0; m < members; ++m) {
    const auto xv = member_logits[m].value().data();
    for (std::size_t r = 0; r < n; ++r) {
      const Real* row = xv.data() + r * c;
      const Real mx = *std::max_element(row, row + c);
      Real total = 0;
      for (std::size_t j = 0; j < c; ++j) total += (probs[m][r * c + j] = std::exp(row[j] - mx));
      for (std::size_t j = 0; j < c; ++j) probs[m][r * c + j] /= total;
    }
  }
  // Mean probability of the label, per row.
  std::vector<Real> label_prob(n, Real(0));
  Real loss = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const auto y = static_cast<std::size_t>(labels[r]);
    for (std::size_t m = 0; m < members; ++m) label_prob[r] += probs[m][r * c + y];
    label_prob[r] /= Real(members);
    loss -= std::log(std::max(label_prob[r], std::numeric_limits<Real>::min()));
  }
  const Real norm = sum_reduction ? Real(1) : Real(1) / Real(n);
  std::vector<int> ys(labels.begin(), labels.end());
  std::vector<Var> inputs(member_logits.begin(), member_logits.end());
  Tape* tape = inputs.front().tape;
  return tape->record(
      "ensemble_cross_entropy", Tensor::scalar(loss * norm), inputs,
      [inputs, n, c, norm, ys = std::move(ys), probs = std::move(probs), label_prob = std::move(label_prob)](
          Tape& t, const Tensor& g) {
        const Real members = Real(inputs.size());
        for (std::size_t m = 0; m < inputs.size(); ++m) {
          if (!t.requires_grad(inputs[m].id)) continue;
          auto d = t.grad_buffer(inputs[m].id).data();
          for (std::size_t r = 0; r < n; ++r) {
            const auto y = static_cast<std::size_t>(ys[r]);
            const Real factor =
                g[0] * norm * (probs[m][r * c + y] / std::max(label_prob[r], std::numeric_limits<Real>::min())) /
                members;
            for (std::size_t j = 0; j < c; ++j) {
              const Real target = y == j ? Real(1) : Real(0);
              d[r * c + j] += factor * (probs[m][r * c + j] - target);
            }
          }
        }
      });
}

namespace {
constexpr Real kProbFloor = std::numeric_limits<Real>::min();
}  // namespace

Var nll_of_probs(Var probs, std::span<const int> labels, bool sum_reduction) {
  check_labels("nll_of_probs", probs.shape(), labels);
  const std::size_t n = probs.shape()[0], c = probs.shape()[1];
  const auto pv = probs.value().data();
  Real loss = 0;
  for (std::size_t r = 0; r < n; ++r) loss -= std::log(std::max(pv[r * c + static_cast<std::size_t>(labels[r])], kProbFloor));
  const Real norm = sum_reduction ? Real(1) : Real(1) / Real(n);
  std::vector<int> ys(labels.begin(), labels.end());
  return probs.tape->record("nll_of_probs", Tensor::scalar(loss * norm), {probs},
                            [probs, c, norm, ys = std::move(ys)](Tape& t, const Tensor& g) {
                              const auto pv = t.value(probs.id).data();
                              auto d = t.grad_buffer(probs.id).data();
                              for (std::size_t r = 0; r < ys.size(); ++r) {
                                const auto i = r * c + static_cast<std::size_t>(ys[r]);
                                d[i] -= g[0] * norm / std::max(pv[i], kProbFloor);
                              }
                            });
}

Var sum(Var x) {
  Real acc = 0;
  for (Real v : x.value().data()) acc += v;
  return x.tape->record("sum", Tensor::scalar(acc), {x}, [x](Tape& t, const Tensor& g) {
    for (auto& d : t.grad_buffer(x.id).data()) d += g[0];
  });
}

}  // namespace ops

}  // namespace rst
