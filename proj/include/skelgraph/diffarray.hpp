#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "skelgraph/errors.hpp"

namespace skelgraph {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

inline Shape shape_strides(const Shape& s) {
  Shape st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// ============================================================================
// DiffArray: dense n-d array participating in a reverse-mode gradient tape
// ============================================================================

template <typename T>
struct DiffArray {
  static_assert(std::is_floating_point_v<T>, "DiffArray requires float or double");

  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a backward pass touches this node
  bool requires_grad = false;
  bool leaf = true;  // false for op outputs; leaf grads survive across backward calls

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }

  std::vector<T>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }

  void zero_grad() {
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), T(0));
  }

  // Gradient view that reads as zeros when backward never reached this node.
  std::vector<T> grad_or_zeros() const {
    if (grad.size() == data.size()) return grad;
    return std::vector<T>(data.size(), T(0));
  }
};

template <typename T>
using DiffArrayPtr = std::shared_ptr<DiffArray<T>>;

template <typename T>
void validate_finite(const DiffArray<T>& a, const std::string& op) {
  for (T v : a.data) {
    if (!std::isfinite(v)) throw NumericError(op + ": non-finite value produced");
  }
}

template <typename T>
DiffArrayPtr<T> from_data(Shape shape, std::vector<T> values, bool requires_grad = false) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("from_data: shape " + shape_str(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  auto a = std::make_shared<DiffArray<T>>();
  a->shape = std::move(shape);
  a->data = std::move(values);
  a->requires_grad = requires_grad;
  validate_finite(*a, "from_data");
  return a;
}

template <typename T>
DiffArrayPtr<T> full(Shape shape, T value, bool requires_grad = false) {
  return from_data<T>(std::move(shape), std::vector<T>(shape_numel(shape), value), requires_grad);
}

template <typename T>
DiffArrayPtr<T> zeros(Shape shape, bool requires_grad = false) {
  return full<T>(std::move(shape), T(0), requires_grad);
}

template <typename T>
DiffArrayPtr<T> scalar(T value, bool requires_grad = false) {
  return from_data<T>(Shape{}, {value}, requires_grad);
}

template <typename T>
DiffArrayPtr<T> uniform(std::mt19937_64& rng, Shape shape, T lo, T hi, bool requires_grad = false) {
  std::uniform_real_distribution<T> dist(lo, hi);
  std::vector<T> v(shape_numel(shape));
  for (T& x : v) x = dist(rng);
  return from_data<T>(std::move(shape), std::move(v), requires_grad);
}

// ============================================================================
// Tape: ordered record of executed primitives; backward replays in reverse
// ============================================================================

template <typename T>
class Tape {
 public:
  void record(std::string op, DiffArrayPtr<T> output, std::function<void()> backward) {
    steps_.push_back(Step{std::move(op), std::move(output), std::move(backward)});
  }

  // Accumulates d(loss)/d(leaf) into every reachable leaf's grad. Repeated
  // calls without zero_grad accumulate; intermediate grads are per-call.
  void backward(const DiffArrayPtr<T>& loss) {
    if (loss->numel() != 1) {
      throw UsageError("backward: loss must be scalar, got shape " + shape_str(loss->shape));
    }
    for (auto& s : steps_) {
      if (!s.output->leaf) s.output->grad.clear();
    }
    loss->ensure_grad();
    loss->grad[0] += T(1);
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) {
      if (it->output->grad.empty()) continue;  // not on a path to the loss
      it->backward();
    }
  }

  void clear() { steps_.clear(); }
  std::size_t size() const { return steps_.size(); }

 private:
  struct Step {
    std::string op;
    DiffArrayPtr<T> output;
    std::function<void()> backward;
  };
  std::vector<Step> steps_;
};

namespace detail {

template <typename T>
DiffArrayPtr<T> op_output(Shape shape, bool requires_grad) {
  auto out = std::make_shared<DiffArray<T>>();
  out->shape = std::move(shape);
  out->data.resize(shape_numel(out->shape));
  out->requires_grad = requires_grad;
  out->leaf = false;
  return out;
}

template <typename T>
void check_same_shape(const std::string& op, const DiffArray<T>& a, const DiffArray<T>& b) {
  if (a.shape != b.shape) {
    throw ShapeError(op + ": shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  }
}

}  // namespace detail

// ============================================================================
// Elementwise primitives
// ============================================================================

template <typename T>
DiffArrayPtr<T> add(Tape<T>& tape, const DiffArrayPtr<T>& a, const DiffArrayPtr<T>& b) {
  detail::check_same_shape("add", *a, *b);
  auto out = detail::op_output<T>(a->shape, a->requires_grad || b->requires_grad);
  for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] + b->data[i];
  validate_finite(*out, "add");
  if (out->requires_grad) {
    tape.record("add", out, [a, b, out] {
      const auto& g = out->grad;
      if (a->requires_grad) {
        auto& ga = a->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b->requires_grad) {
        auto& gb = b->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
DiffArrayPtr<T> sub(Tape<T>& tape, const DiffArrayPtr<T>& a, const DiffArrayPtr<T>& b) {
  detail::check_same_shape("sub", *a, *b);
  auto out = detail::op_output<T>(a->shape, a->requires_grad || b->requires_grad);
  for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] - b->data[i];
  validate_finite(*out, "sub");
  if (out->requires_grad) {
    tape.record("sub", out, [a, b, out] {
      const auto& g = out->grad;
      if (a->requires_grad) {
        auto& ga = a->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b->requires_grad) {
        auto& gb = b->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

template <typename T>
DiffArrayPtr<T> mul(Tape<T>& tape, const DiffArrayPtr<T>& a, const DiffArrayPtr<T>& b) {
  detail::check_same_shape("mul", *a, *b);
  auto out = detail::op_output<T>(a->shape, a->requires_grad || b->requires_grad);
  for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] * b->data[i];
  validate_finite(*out, "mul");
  if (out->requires_grad) {
    tape.record("mul", out, [a, b, out] {
      const auto& g = out->grad;
      if (a->requires_grad) {
        auto& ga = a->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b->data[i];
      }
      if (b->requires_grad) {
        auto& gb = b->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a->data[i];
      }
    });
  }
  return out;
}

template <typename T>
DiffArrayPtr<T> scale(Tape<T>& tape, const DiffArrayPtr<T>& a, T c) {
  auto out = detail::op_output<T>(a->shape, a->requires_grad);
  for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] * c;
  validate_finite(*out, "scale");
  if (out->requires_grad) {
    tape.record("scale", out, [a, out, c] {
      auto& ga = a->ensure_grad();
      for (std::size_t i = 0; i < out->grad.size(); ++i) ga[i] += out->grad[i] * c;
    });
  }
  return out;
}

template <typename T>
DiffArrayPtr<T> absval(Tape<T>& tape, const DiffArrayPtr<T>& a) {
  auto out = detail::op_output<T>(a->shape, a->requires_grad);
  for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = std::abs(a->data[i]);
  validate_finite(*out, "absval");
  if (out->requires_grad) {
    // subgradient 0 at the kink
    tape.record("absval", out, [a, out] {
      auto& ga = a->ensure_grad();
      for (std::size_t i = 0; i < out->grad.size(); ++i) {
        T x = a->data[i];
        ga[i] += out->grad[i] * (x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)));
      }
    });
  }
  return out;
}

// ============================================================================
// Reductions
// ============================================================================

template <typename T>
DiffArrayPtr<T> sum(Tape<T>& tape, const DiffArrayPtr<T>& a) {
  auto out = detail::op_output<T>(Shape{}, a->requires_grad);
  T acc = 0;
  for (T v : a->data) acc += v;
  out->data[0] = acc;
  validate_finite(*out, "sum");
  if (out->requires_grad) {
    tape.record("sum", out, [a, out] {
      auto& ga = a->ensure_grad();
      const T g = out->grad[0];
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
  }
  return out;
}

template <typename T>
DiffArrayPtr<T> mean(Tape<T>& tape, const DiffArrayPtr<T>& a) {
  if (a->numel() == 0) throw UsageError("mean: empty array");
  return scale(tape, sum(tape, a), T(1) / static_cast<T>(a->numel()));
}

// ============================================================================
// Shape manipulation
// ============================================================================

template <typename T>
DiffArrayPtr<T> reshape(Tape<T>& tape, const DiffArrayPtr<T>& a, Shape new_shape) {
  if (shape_numel(new_shape) != a->numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a->shape) + " as " + shape_str(new_shape));
  }
  auto out = detail::op_output<T>(std::move(new_shape), a->requires_grad);
  out->data = a->data;
  if (out->requires_grad) {
    tape.record("reshape", out, [a, out] {
      auto& ga = a->ensure_grad();
      for (std::size_t i = 0; i < out->grad.size(); ++i) ga[i] += out->grad[i];
    });
  }
  return out;
}

namespace detail {

// Raw permutation of a dense buffer; shared by permute forward and backward.
template <typename T>
std::vector<T> permute_values(const std::vector<T>& data, const Shape& shape,
                              const std::vector<std::size_t>& perm) {
  const std::size_t r = shape.size();
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = shape[perm[i]];
  const Shape in_strides = shape_strides(shape);
  const Shape out_strides = shape_strides(out_shape);
  std::vector<T> out(data.size());
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t o = 0; o < out.size(); ++o) {
    std::size_t rem = o, src = 0;
    for (std::size_t i = 0; i < r; ++i) {
      const std::size_t c = rem / out_strides[i];
      rem %= out_strides[i];
      src += c * in_strides[perm[i]];
    }
    out[o] = data[src];
  }
  return out;
}

inline std::vector<std::size_t> inverse_perm(const std::vector<std::size_t>& perm) {
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
  return inv;
}

}  // namespace detail

template <typename T>
DiffArrayPtr<T> permute(Tape<T>& tape, const DiffArrayPtr<T>& a, std::vector<std::size_t> perm) {
  if (perm.size() != a->rank()) throw ShapeError("permute: axis count mismatch");
  std::vector<bool> seen(perm.size(), false);
  for (std::size_t p : perm) {
    if (p >= perm.size() || seen[p]) throw ShapeError("permute: invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = a->shape[perm[i]];
  auto out = detail::op_output<T>(std::move(out_shape), a->requires_grad);
  out->data = detail::permute_values(a->data, a->shape, perm);
  if (out->requires_grad) {
    tape.record("permute", out, [a, out, perm] {
      auto inv = detail::inverse_perm(perm);
      auto ga_add = detail::permute_values(out->grad, out->shape, inv);
      auto& ga = a->ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += ga_add[i];
    });
  }
  return out;
}

template <typename T>
DiffArrayPtr<T> index_select(Tape<T>& tape, const DiffArrayPtr<T>& a, std::size_t axis,
                             std::vector<std::size_t> indices) {
  if (axis >= a->rank()) throw ShapeError("index_select: axis out of range");
  for (std::size_t i : indices) {
    if (i >= a->shape[axis]) throw ShapeError("index_select: index out of range");
  }
  Shape out_shape = a->shape;
  out_shape[axis] = indices.size();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a->shape[i];
  for (std::size_t i = axis + 1; i < a->rank(); ++i) inner *= a->shape[i];
  const std::size_t in_dim = a->shape[axis];
  auto out = detail::op_output<T>(std::move(out_shape), a->requires_grad);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t k = 0; k < indices.size(); ++k) {
      const T* src = a->data.data() + (o * in_dim + indices[k]) * inner;
      T* dst = out->data.data() + (o * indices.size() + k) * inner;
      std::copy(src, src + inner, dst);
    }
  }
  if (out->requires_grad) {
    tape.record("index_select", out, [a, out, indices, outer, inner, in_dim] {
      auto& ga = a->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t k = 0; k < indices.size(); ++k) {
          const T* gsrc = out->grad.data() + (o * indices.size() + k) * inner;
          T* gdst = ga.data() + (o * in_dim + indices[k]) * inner;
          for (std::size_t i = 0; i < inner; ++i) gdst[i] += gsrc[i];
        }
      }
    });
  }
  return out;
}

template <typename T>
DiffArrayPtr<T> concat(Tape<T>& tape, const std::vector<DiffArrayPtr<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw UsageError("concat: no inputs");
  const Shape& base = parts[0]->shape;
  if (axis >= base.size()) throw ShapeError("concat: axis out of range");
  std::size_t axis_total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p->rank() != base.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < base.size(); ++i) {
      if (i != axis && p->shape[i] != base[i]) {
        throw ShapeError("concat: shape mismatch " + shape_str(p->shape) + " vs " + shape_str(base));
      }
    }
    axis_total += p->shape[axis];
    rg = rg || p->requires_grad;
  }
  Shape out_shape = base;
  out_shape[axis] = axis_total;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= base[i];
  for (std::size_t i = axis + 1; i < base.size(); ++i) inner *= base[i];
  auto out = detail::op_output<T>(out_shape, rg);
  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      const std::size_t len = p->shape[axis] * inner;
      std::copy(p->data.data() + o * len, p->data.data() + (o + 1) * len,
                out->data.data() + (o * axis_total + off) * inner);
      off += p->shape[axis];
    }
  }
  if (rg) {
    tape.record("concat", out, [parts, out, outer, inner, axis_total, axis] {
      for (std::size_t o = 0; o < outer; ++o) {
        std::size_t off = 0;
        for (const auto& p : parts) {
          const std::size_t len = p->shape[axis] * inner;
          if (p->requires_grad) {
            auto& gp = p->ensure_grad();
            const T* gsrc = out->grad.data() + (o * axis_total + off) * inner;
            for (std::size_t i = 0; i < len; ++i) gp[o * len + i] += gsrc[i];
          }
          off += p->shape[axis];
        }
      }
    });
  }
  return out;
}

// ============================================================================
// Linear algebra
// ============================================================================

// Batched matrix product: [B,M,K] x [B,K,N] -> [B,M,N].
template <typename T>
DiffArrayPtr<T> bmm(Tape<T>& tape, const DiffArrayPtr<T>& a, const DiffArrayPtr<T>& b) {
  if (a->rank() != 3 || b->rank() != 3 || a->shape[0] != b->shape[0] || a->shape[2] != b->shape[1]) {
    throw ShapeError("bmm: incompatible shapes " + shape_str(a->shape) + " x " + shape_str(b->shape));
  }
  const std::size_t B = a->shape[0], M = a->shape[1], K = a->shape[2], N = b->shape[2];
  auto out = detail::op_output<T>(Shape{B, M, N}, a->requires_grad || b->requires_grad);
  for (std::size_t bi = 0; bi < B; ++bi) {
    const T* pa = a->data.data() + bi * M * K;
    const T* pb = b->data.data() + bi * K * N;
    T* po = out->data.data() + bi * M * N;
    for (std::size_t m = 0; m < M; ++m) {
      for (std::size_t n = 0; n < N; ++n) {
        T acc = 0;
        for (std::size_t k = 0; k < K; ++k) acc += pa[m * K + k] * pb[k * N + n];
        po[m * N + n] = acc;
      }
    }
  }
  validate_finite(*out, "bmm");
  if (out->requires_grad) {
    tape.record("bmm", out, [a, b, out, B, M, K, N] {
      for (std::size_t bi = 0; bi < B; ++bi) {
        const T* pa = a->data.data() + bi * M * K;
        const T* pb = b->data.data() + bi * K * N;
        const T* g = out->grad.data() + bi * M * N;
        if (a->requires_grad) {
          T* ga = a->ensure_grad().data() + bi * M * K;
          for (std::size_t m = 0; m < M; ++m)
            for (std::size_t k = 0; k < K; ++k) {
              T acc = 0;
              for (std::size_t n = 0; n < N; ++n) acc += g[m * N + n] * pb[k * N + n];
              ga[m * K + k] += acc;
            }
        }
        if (b->requires_grad) {
          T* gb = b->ensure_grad().data() + bi * K * N;
          for (std::size_t k = 0; k < K; ++k)
            for (std::size_t n = 0; n < N; ++n) {
              T acc = 0;
              for (std::size_t m = 0; m < M; ++m) acc += pa[m * K + k] * g[m * N + n];
              gb[k * N + n] += acc;
            }
        }
      }
    });
  }
  return out;
}

// ============================================================================
// Convolution (cross-correlation, no kernel flip)
// ============================================================================

// x: [N,Cin,H,W], w: [Cout,Cin,k,k], optional bias [Cout] -> [N,Cout,Ho,Wo].
template <typename T>
DiffArrayPtr<T> conv2d(Tape<T>& tape, const DiffArrayPtr<T>& x, const DiffArrayPtr<T>& w,
                       const DiffArrayPtr<T>& bias, int padding, int stride) {
  if (x->rank() != 4) throw ShapeError("conv2d: input must be [N,C,H,W], got " + shape_str(x->shape));
  if (w->rank() != 4 || w->shape[2] != w->shape[3]) {
    throw ShapeError("conv2d: kernel must be [Cout,Cin,k,k], got " + shape_str(w->shape));
  }
  if (w->shape[1] != x->shape[1]) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(w->shape[1]) +
                     " input channels, input has " + std::to_string(x->shape[1]));
  }
  if (padding < 0 || stride < 1 || w->shape[2] < 1) {
    throw UsageError("conv2d: require k >= 1, stride >= 1, padding >= 0");
  }
  const std::size_t N = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
  const std::size_t Co = w->shape[0], k = w->shape[2];
  const std::size_t p = static_cast<std::size_t>(padding), s = static_cast<std::size_t>(stride);
  if (H + 2 * p < k || W + 2 * p < k) {
    throw ShapeError("conv2d: padded input smaller than kernel");
  }
  if (bias && (bias->rank() != 1 || bias->shape[0] != Co)) {
    throw ShapeError("conv2d: bias must be [Cout]");
  }
  const std::size_t Ho = (H + 2 * p - k) / s + 1;
  const std::size_t Wo = (W + 2 * p - k) / s + 1;
  const bool rg = x->requires_grad || w->requires_grad || (bias && bias->requires_grad);
  auto out = detail::op_output<T>(Shape{N, Co, Ho, Wo}, rg);

  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t co = 0; co < Co; ++co) {
      const T b0 = bias ? bias->data[co] : T(0);
      for (std::size_t oh = 0; oh < Ho; ++oh) {
        for (std::size_t ow = 0; ow < Wo; ++ow) {
          T acc = b0;
          for (std::size_t ci = 0; ci < C; ++ci) {
            const T* px = x->data.data() + ((n * C + ci) * H) * W;
            const T* pw = w->data.data() + ((co * C + ci) * k) * k;
            for (std::size_t kh = 0; kh < k; ++kh) {
              const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * s + kh) - static_cast<std::ptrdiff_t>(p);
              if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
              for (std::size_t kw = 0; kw < k; ++kw) {
                const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * s + kw) - static_cast<std::ptrdiff_t>(p);
                if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                acc += px[ih * static_cast<std::ptrdiff_t>(W) + iw] * pw[kh * k + kw];
              }
            }
          }
          out->data[((n * Co + co) * Ho + oh) * Wo + ow] = acc;
        }
      }
    }
  }
  validate_finite(*out, "conv2d");

  if (rg) {
    tape.record("conv2d", out, [x, w, bias, out, N, C, H, W, Co, k, p, s, Ho, Wo] {
      const auto& g = out->grad;
      T* gx = x->requires_grad ? x->ensure_grad().data() : nullptr;
      T* gw = w->requires_grad ? w->ensure_grad().data() : nullptr;
      T* gb = (bias && bias->requires_grad) ? bias->ensure_grad().data() : nullptr;
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t co = 0; co < Co; ++co) {
          for (std::size_t oh = 0; oh < Ho; ++oh) {
            for (std::size_t ow = 0; ow < Wo; ++ow) {
              const T go = g[((n * Co + co) * Ho + oh) * Wo + ow];
              if (go == T(0)) continue;
              if (gb) gb[co] += go;
              for (std::size_t ci = 0; ci < C; ++ci) {
                const std::size_t xoff = ((n * C + ci) * H) * W;
                const std::size_t woff = ((co * C + ci) * k) * k;
                for (std::size_t kh = 0; kh < k; ++kh) {
                  const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * s + kh) - static_cast<std::ptrdiff_t>(p);
                  if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                  for (std::size_t kw = 0; kw < k; ++kw) {
                    const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * s + kw) - static_cast<std::ptrdiff_t>(p);
                    if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                    const std::size_t xi = xoff + ih * static_cast<std::ptrdiff_t>(W) + iw;
                    const std::size_t wi = woff + kh * k + kw;
                    if (gx) gx[xi] += go * w->data[wi];
                    if (gw) gw[wi] += go * x->data[xi];
                  }
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// Unbatched convenience wrapper: [C,H,W] -> [Cout,Ho,Wo].
template <typename T>
DiffArrayPtr<T> conv2d_single(Tape<T>& tape, const DiffArrayPtr<T>& x, const DiffArrayPtr<T>& w,
                              const DiffArrayPtr<T>& bias, int padding, int stride) {
  if (x->rank() != 3) throw ShapeError("conv2d_single: input must be [C,H,W]");
  Shape batched = {1, x->shape[0], x->shape[1], x->shape[2]};
  auto y = conv2d(tape, reshape(tape, x, batched), w, bias, padding, stride);
  return reshape(tape, y, Shape{y->shape[1], y->shape[2], y->shape[3]});
}

// ============================================================================
// Batch normalization
// ============================================================================

enum class Mode { train, eval };

template <typename T>
struct RunningStats {
  std::vector<T> mean;
  std::vector<T> var;
  T momentum = T(0.1);

  static RunningStats<T> init(std::size_t channels, T momentum = T(0.1)) {
    RunningStats<T> rs;
    rs.mean.assign(channels, T(0));
    rs.var.assign(channels, T(1));
    rs.momentum = momentum;
    return rs;
  }
};

// x: [N,C,H,W]; gamma/beta: [C]. Train mode normalizes with batch statistics
// over the N,H,W axes (population variance) and updates running stats; eval
// mode applies the stored running statistics.
template <typename T>
DiffArrayPtr<T> batch_norm(Tape<T>& tape, const DiffArrayPtr<T>& x, const DiffArrayPtr<T>& gamma,
                           const DiffArrayPtr<T>& beta, T eps, Mode mode, RunningStats<T>& stats) {
  if (eps <= T(0)) throw UsageError("batch_norm: eps must be positive");
  if (x->rank() != 4) throw ShapeError("batch_norm: input must be [N,C,H,W]");
  const std::size_t N = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
  if (gamma->numel() != C || beta->numel() != C) {
    throw ShapeError("batch_norm: gamma/beta must have one entry per channel");
  }
  if (stats.mean.size() != C || stats.var.size() != C) {
    throw ShapeError("batch_norm: running stats channel mismatch");
  }
  const std::size_t m = N * H * W;
  const std::size_t hw = H * W;
  const bool rg = x->requires_grad || gamma->requires_grad || beta->requires_grad;
  auto out = detail::op_output<T>(x->shape, rg);

  std::vector<T> xhat(x->numel());
  std::vector<T> inv_std(C);
  for (std::size_t c = 0; c < C; ++c) {
    T mu, var;
    if (mode == Mode::train) {
      T acc = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* px = x->data.data() + (n * C + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) acc += px[i];
      }
      mu = acc / static_cast<T>(m);
      T vacc = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* px = x->data.data() + (n * C + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const T d = px[i] - mu;
          vacc += d * d;
        }
      }
      var = vacc / static_cast<T>(m);
      stats.mean[c] = (T(1) - stats.momentum) * stats.mean[c] + stats.momentum * mu;
      stats.var[c] = (T(1) - stats.momentum) * stats.var[c] + stats.momentum * var;
    } else {
      mu = stats.mean[c];
      var = stats.var[c];
    }
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[c] = is;
    const T gm = gamma->data[c], bt = beta->data[c];
    for (std::size_t n = 0; n < N; ++n) {
      const T* px = x->data.data() + (n * C + c) * hw;
      T* ph = xhat.data() + (n * C + c) * hw;
      T* po = out->data.data() + (n * C + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        ph[i] = (px[i] - mu) * is;
        po[i] = gm * ph[i] + bt;
      }
    }
  }
  validate_finite(*out, "batch_norm");

  if (rg) {
    auto saved_xhat = std::make_shared<std::vector<T>>(std::move(xhat));
    auto saved_inv = std::make_shared<std::vector<T>>(std::move(inv_std));
    tape.record("batch_norm", out, [x, gamma, beta, out, saved_xhat, saved_inv, mode, N, C, hw, m] {
      const auto& g = out->grad;
      const auto& xh = *saved_xhat;
      for (std::size_t c = 0; c < C; ++c) {
        T sum_g = 0, sum_gx = 0;
        for (std::size_t n = 0; n < N; ++n) {
          const std::size_t off = (n * C + c) * hw;
          for (std::size_t i = 0; i < hw; ++i) {
            sum_g += g[off + i];
            sum_gx += g[off + i] * xh[off + i];
          }
        }
        if (beta->requires_grad) beta->ensure_grad()[c] += sum_g;
        if (gamma->requires_grad) gamma->ensure_grad()[c] += sum_gx;
        if (x->requires_grad) {
          auto& gx = x->ensure_grad();
          const T gm = gamma->data[c] * (*saved_inv)[c];
          if (mode == Mode::train) {
            // dx = gamma*inv_std * (g - mean(g) - xhat*mean(g*xhat))
            const T mg = sum_g / static_cast<T>(m);
            const T mgx = sum_gx / static_cast<T>(m);
            for (std::size_t n = 0; n < N; ++n) {
              const std::size_t off = (n * C + c) * hw;
              for (std::size_t i = 0; i < hw; ++i) {
                gx[off + i] += gm * (g[off + i] - mg - xh[off + i] * mgx);
              }
            }
          } else {
            for (std::size_t n = 0; n < N; ++n) {
              const std::size_t off = (n * C + c) * hw;
              for (std::size_t i = 0; i < hw; ++i) gx[off + i] += gm * g[off + i];
            }
          }
        }
      }
    });
  }
  return out;
}

// ============================================================================
// Activations
// ============================================================================

// slope is a scalar (applied globally) or per-channel [C] for 4D inputs.
template <typename T>
DiffArrayPtr<T> prelu(Tape<T>& tape, const DiffArrayPtr<T>& x, const DiffArrayPtr<T>& slope) {
  const bool per_channel = slope->numel() > 1;
  std::size_t C = 1, hw = 1;
  if (per_channel) {
    if (x->rank() < 2 || slope->numel() != x->shape[1]) {
      throw ShapeError("prelu: per-channel slope must match input channel axis");
    }
    C = x->shape[1];
    for (std::size_t i = 2; i < x->rank(); ++i) hw *= x->shape[i];
  }
  auto out = detail::op_output<T>(x->shape, x->requires_grad || slope->requires_grad);
  auto slope_at = [&](std::size_t idx) -> T {
    if (!per_channel) return slope->data[0];
    return slope->data[(idx / hw) % C];
  };
  for (std::size_t i = 0; i < x->numel(); ++i) {
    const T v = x->data[i];
    out->data[i] = v >= T(0) ? v : slope_at(i) * v;
  }
  validate_finite(*out, "prelu");
  if (out->requires_grad) {
    tape.record("prelu", out, [x, slope, out, per_channel, C, hw] {
      const auto& g = out->grad;
      T* gx = x->requires_grad ? x->ensure_grad().data() : nullptr;
      T* gs = slope->requires_grad ? slope->ensure_grad().data() : nullptr;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T v = x->data[i];
        const std::size_t sc = per_channel ? (i / hw) % C : 0;
        if (v >= T(0)) {
          if (gx) gx[i] += g[i];
        } else {
          if (gx) gx[i] += g[i] * slope->data[sc];
          if (gs) gs[sc] += g[i] * v;
        }
      }
    });
  }
  return out;
}

// ============================================================================
// Geometry primitives
// ============================================================================

// Cosine similarity along the last axis: [...,D] x [...,D] -> [...].
// Rows with a norm below eps yield 0 with zero gradient.
template <typename T>
DiffArrayPtr<T> cosine_last(Tape<T>& tape, const DiffArrayPtr<T>& a, const DiffArrayPtr<T>& b, T eps) {
  detail::check_same_shape("cosine_last", *a, *b);
  if (eps <= T(0)) throw UsageError("cosine_last: eps must be positive");
  if (a->rank() < 1) throw ShapeError("cosine_last: rank >= 1 required");
  const std::size_t D = a->shape.back();
  const std::size_t rows = a->numel() / D;
  Shape out_shape(a->shape.begin(), a->shape.end() - 1);
  auto out = detail::op_output<T>(std::move(out_shape), a->requires_grad || b->requires_grad);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* pa = a->data.data() + r * D;
    const T* pb = b->data.data() + r * D;
    T dot = 0, na2 = 0, nb2 = 0;
    for (std::size_t i = 0; i < D; ++i) {
      dot += pa[i] * pb[i];
      na2 += pa[i] * pa[i];
      nb2 += pb[i] * pb[i];
    }
    const T na = std::sqrt(na2), nb = std::sqrt(nb2);
    out->data[r] = dot / (std::max(na, eps) * std::max(nb, eps));
  }
  validate_finite(*out, "cosine_last");
  if (out->requires_grad) {
    tape.record("cosine_last", out, [a, b, out, eps, D, rows] {
      T* ga = a->requires_grad ? a->ensure_grad().data() : nullptr;
      T* gb = b->requires_grad ? b->ensure_grad().data() : nullptr;
      for (std::size_t r = 0; r < rows; ++r) {
        const T g = out->grad[r];
        if (g == T(0)) continue;
        const T* pa = a->data.data() + r * D;
        const T* pb = b->data.data() + r * D;
        T dot = 0, na2 = 0, nb2 = 0;
        for (std::size_t i = 0; i < D; ++i) {
          dot += pa[i] * pb[i];
          na2 += pa[i] * pa[i];
          nb2 += pb[i] * pb[i];
        }
        const T na = std::sqrt(na2), nb = std::sqrt(nb2);
        if (na < eps || nb < eps) continue;  // degenerate rows carry no gradient
        const T inv = T(1) / (na * nb);
        for (std::size_t i = 0; i < D; ++i) {
          if (ga) ga[r * D + i] += g * (pb[i] - (dot / na2) * pa[i]) * inv;
          if (gb) gb[r * D + i] += g * (pa[i] - (dot / nb2) * pb[i]) * inv;
        }
      }
    });
  }
  return out;
}

// Scalar convenience matching the engine contract: two vectors -> scalar.
template <typename T>
DiffArrayPtr<T> cosine_similarity(Tape<T>& tape, const DiffArrayPtr<T>& a, const DiffArrayPtr<T>& b,
                                  T eps = T(1e-8)) {
  if (a->rank() != 1) throw ShapeError("cosine_similarity: expects vectors");
  return cosine_last(tape, a, b, eps);
}

// Euclidean distances between selected row pairs of the second-to-last axis:
// x: [...,R,D], pairs (i,j) -> [...,K]. Coincident rows get subgradient 0.
template <typename T>
DiffArrayPtr<T> pair_dist_last(Tape<T>& tape, const DiffArrayPtr<T>& x,
                               const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
  if (x->rank() < 2) throw ShapeError("pair_dist_last: rank >= 2 required");
  const std::size_t D = x->shape.back();
  const std::size_t R = x->shape[x->rank() - 2];
  for (const auto& [i, j] : pairs) {
    if (i >= R || j >= R) throw ShapeError("pair_dist_last: pair index out of range");
  }
  const std::size_t batch = x->numel() / (R * D);
  Shape out_shape(x->shape.begin(), x->shape.end() - 2);
  out_shape.push_back(pairs.size());
  auto out = detail::op_output<T>(std::move(out_shape), x->requires_grad);
  for (std::size_t bi = 0; bi < batch; ++bi) {
    const T* px = x->data.data() + bi * R * D;
    T* po = out->data.data() + bi * pairs.size();
    for (std::size_t k = 0; k < pairs.size(); ++k) {
      T acc = 0;
      const T* pi = px + pairs[k].first * D;
      const T* pj = px + pairs[k].second * D;
      for (std::size_t d = 0; d < D; ++d) {
        const T dd = pi[d] - pj[d];
        acc += dd * dd;
      }
      po[k] = std::sqrt(acc);
    }
  }
  validate_finite(*out, "pair_dist_last");
  if (out->requires_grad) {
    tape.record("pair_dist_last", out, [x, out, pairs, batch, R, D] {
      auto& gx = x->ensure_grad();
      for (std::size_t bi = 0; bi < batch; ++bi) {
        const T* px = x->data.data() + bi * R * D;
        for (std::size_t k = 0; k < pairs.size(); ++k) {
          const T dist = out->data[bi * pairs.size() + k];
          const T g = out->grad[bi * pairs.size() + k];
          if (g == T(0) || dist == T(0)) continue;
          const std::size_t oi = bi * R * D + pairs[k].first * D;
          const std::size_t oj = bi * R * D + pairs[k].second * D;
          for (std::size_t d = 0; d < D; ++d) {
            const T u = (px[pairs[k].first * D + d] - px[pairs[k].second * D + d]) / dist;
            gx[oi + d] += g * u;
            gx[oj + d] -= g * u;
          }
        }
      }
    });
  }
  return out;
}

// ============================================================================
// Pooling
// ============================================================================

// Adaptive average pooling: [N,C,H,W] -> [N,C,oh,ow]; bin k of n over size S
// spans [floor(k*S/n), ceil((k+1)*S/n)).
template <typename T>
DiffArrayPtr<T> adaptive_avg_pool(Tape<T>& tape, const DiffArrayPtr<T>& x, std::size_t oh,
                                  std::size_t ow) {
  if (x->rank() != 4) throw ShapeError("adaptive_avg_pool: input must be [N,C,H,W]");
  if (oh == 0 || ow == 0) throw UsageError("adaptive_avg_pool: output dims must be positive");
  const std::size_t N = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
  auto bin = [](std::size_t k, std::size_t n, std::size_t size) {
    const std::size_t lo = (k * size) / n;
    const std::size_t hi = ((k + 1) * size + n - 1) / n;
    return std::pair<std::size_t, std::size_t>{lo, hi};
  };
  auto out = detail::op_output<T>(Shape{N, C, oh, ow}, x->requires_grad);
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const T* px = x->data.data() + nc * H * W;
    T* po = out->data.data() + nc * oh * ow;
    for (std::size_t i = 0; i < oh; ++i) {
      const auto [h0, h1] = bin(i, oh, H);
      for (std::size_t j = 0; j < ow; ++j) {
        const auto [w0, w1] = bin(j, ow, W);
        T acc = 0;
        for (std::size_t h = h0; h < h1; ++h)
          for (std::size_t w = w0; w < w1; ++w) acc += px[h * W + w];
        po[i * ow + j] = acc / static_cast<T>((h1 - h0) * (w1 - w0));
      }
    }
  }
  validate_finite(*out, "adaptive_avg_pool");
  if (out->requires_grad) {
    tape.record("adaptive_avg_pool", out, [x, out, N, C, H, W, oh, ow, bin] {
      auto& gx = x->ensure_grad();
      for (std::size_t nc = 0; nc < N * C; ++nc) {
        T* pgx = gx.data() + nc * H * W;
        const T* pg = out->grad.data() + nc * oh * ow;
        for (std::size_t i = 0; i < oh; ++i) {
          const auto [h0, h1] = bin(i, oh, H);
          for (std::size_t j = 0; j < ow; ++j) {
            const auto [w0, w1] = bin(j, ow, W);
            const T share = pg[i * ow + j] / static_cast<T>((h1 - h0) * (w1 - w0));
            for (std::size_t h = h0; h < h1; ++h)
              for (std::size_t w = w0; w < w1; ++w) pgx[h * W + w] += share;
          }
        }
      }
    });
  }
  return out;
}

// ============================================================================
// Optimizer step
// ============================================================================

// Plain SGD: p <- p - lr * grad. Every parameter must carry a gradient.
template <typename T>
void sgd_step(const std::vector<std::pair<std::string, DiffArrayPtr<T>>>& params, T lr) {
  if (lr <= T(0)) throw UsageError("sgd_step: lr must be positive");
  for (const auto& [name, p] : params) {
    if (p->grad.size() != p->data.size()) {
      throw UsageError("sgd_step: missing gradient for parameter '" + name + "'");
    }
    for (std::size_t i = 0; i < p->data.size(); ++i) p->data[i] -= lr * p->grad[i];
    validate_finite(*p, "sgd_step(" + name + ")");
  }
}

template <typename T>
void zero_grads(const std::vector<std::pair<std::string, DiffArrayPtr<T>>>& params) {
  for (const auto& [name, p] : params) {
    (void)name;
    p->zero_grad();
  }
}

}  // namespace skelgraph
