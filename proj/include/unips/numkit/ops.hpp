#pragma once

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "unips/numkit/rng.hpp"
#include "unips/numkit/tensor.hpp"

// Differentiable tensor operations. Every op computes its forward value
// eagerly; when an operand tracks gradients the result carries a closure that
// scatters the incoming gradient back into the operands.

namespace unips::nk {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

template <class T>
Node<T>* in(Node<T>& n, std::size_t i) {
  return n.inputs[i].get();
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(),
                  "add: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  const bool track = detail::needs_grad<T>({&a, &b});
  auto out = detail::make_result<T>(a.shape(), "add", track, {&a, &b});
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  if (track) {
    out.node()->backward_fn = [](Node<T>& n) {
      for (std::size_t k = 0; k < 2; ++k) {
        auto* p = detail::in(n, k);
        if (!p->requires_grad) continue;
        auto g = p->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
      }
    };
  }
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(),
                  "mul: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  const bool track = detail::needs_grad<T>({&a, &b});
  auto out = detail::make_result<T>(a.shape(), "mul", track, {&a, &b});
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  if (track) {
    out.node()->backward_fn = [](Node<T>& n) {
      auto* pa = detail::in(n, 0);
      auto* pb = detail::in(n, 1);
      if (pa->requires_grad) {
        auto g = pa->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pb->value[i];
      }
      if (pb->requires_grad) {
        auto g = pb->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pa->value[i];
      }
    };
  }
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  const bool track = detail::needs_grad<T>({&a});
  auto out = detail::make_result<T>(a.shape(), "scale", track, {&a});
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * s;
  if (track) {
    out.node()->backward_fn = [s](Node<T>& n) {
      auto g = detail::in(n, 0)->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * s;
    };
  }
  return out;
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  const bool track = detail::needs_grad<T>({&a});
  auto out = detail::make_result<T>(a.shape(), "relu", track, {&a});
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] > T(0) ? x[i] : T(0);
  if (track) {
    out.node()->backward_fn = [](Node<T>& n) {
      auto* p = detail::in(n, 0);
      auto g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (p->value[i] > T(0)) g[i] += n.grad[i];
    };
  }
  return out;
}

/// Exact (erf-based) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
  const bool track = detail::needs_grad<T>({&a});
  auto out = detail::make_result<T>(a.shape(), "gelu", track, {&a});
  auto o = out.data();
  auto x = a.data();
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  for (std::size_t i = 0; i < o.size(); ++i)
    o[i] = T(0.5) * x[i] * (T(1) + std::erf(x[i] * inv_sqrt2));
  if (track) {
    out.node()->backward_fn = [inv_sqrt2](Node<T>& n) {
      auto* p = detail::in(n, 0);
      auto g = p->ensure_grad();
      const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T v = p->value[i];
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        const T pdf = std::exp(T(-0.5) * v * v) * inv_sqrt2pi;
        g[i] += n.grad[i] * (cdf + v * pdf);
      }
    };
  }
  return out;
}

/// Inverted dropout. The keep mask is a pure function of
/// (seed, layer_id, step, element index).
template <class T>
Tensor<T> dropout(const Tensor<T>& a, double rate, std::uint64_t seed, std::uint64_t layer_id,
                  std::uint64_t step) {
  if (rate <= 0.0) return a;
  const bool track = detail::needs_grad<T>({&a});
  auto out = detail::make_result<T>(a.shape(), "dropout", track, {&a});
  auto o = out.data();
  auto x = a.data();
  const T keep_scale = T(1.0 / (1.0 - rate));
  const std::uint64_t key = counter_key(seed, layer_id, step);
  std::vector<T> mask(o.size());
  for (std::size_t i = 0; i < o.size(); ++i) {
    mask[i] = counter_uniform(key, i) >= rate ? keep_scale : T(0);
    o[i] = x[i] * mask[i];
  }
  if (track) {
    out.node()->backward_fn = [mask = std::move(mask)](Node<T>& n) {
      auto g = detail::in(n, 0)->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * mask[i];
    };
  }
  return out;
}

// ------------------------------------------------------------------ reductions

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  const bool track = detail::needs_grad<T>({&a});
  auto out = detail::make_result<T>({}, "sum", track, {&a});
  T acc = T(0);
  for (T v : a.data()) acc += v;
  out.data()[0] = acc;
  if (track) {
    out.node()->backward_fn = [](Node<T>& n) {
      auto g = detail::in(n, 0)->ensure_grad();
      for (auto& v : g) v += n.grad[0];
    };
  }
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

/// Mean over the spatial axes of an [N,H,W,C] map; result is [N,1,1,C].
template <class T>
Tensor<T> mean_spatial(const Tensor<T>& a) {
  detail::require(a.rank() == 4, "mean_spatial: expected [N,H,W,C], got " + to_string(a.shape()));
  const auto N = a.dim(0), HW = a.dim(1) * a.dim(2), C = a.dim(3);
  const bool track = detail::needs_grad<T>({&a});
  auto out = detail::make_result<T>({N, 1, 1, C}, "mean_spatial", track, {&a});
  auto o = out.data();
  auto x = a.data();
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      T acc = T(0);
      for (std::int64_t p = 0; p < HW; ++p) acc += x[(n * HW + p) * C + c];
      o[n * C + c] = acc / static_cast<T>(HW);
    }
  if (track) {
    out.node()->backward_fn = [N, HW, C](Node<T>& n) {
      auto g = detail::in(n, 0)->ensure_grad();
      const T inv = T(1) / static_cast<T>(HW);
      for (std::int64_t i = 0; i < N; ++i)
        for (std::int64_t p = 0; p < HW; ++p)
          for (std::int64_t c = 0; c < C; ++c) g[(i * HW + p) * C + c] += n.grad[i * C + c] * inv;
    };
  }
  return out;
}

/// Element-wise maximum over the middle axis of [B,L,D]; result [B,D].
template <class T>
Tensor<T> max_over_set(const Tensor<T>& a) {
  detail::require(a.rank() == 3 && a.dim(1) >= 1,
                  "max_over_set: expected [B,L,D] with L>=1, got " + to_string(a.shape()));
  const auto B = a.dim(0), L = a.dim(1), D = a.dim(2);
  const bool track = detail::needs_grad<T>({&a});
  auto out = detail::make_result<T>({B, D}, "max_over_set", track, {&a});
  auto o = out.data();
  auto x = a.data();
  std::vector<std::int32_t> arg(static_cast<std::size_t>(B * D));
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t d = 0; d < D; ++d) {
      std::int64_t best = 0;
      for (std::int64_t l = 1; l < L; ++l)
        if (x[(b * L + l) * D + d] > x[(b * L + best) * D + d]) best = l;
      arg[b * D + d] = static_cast<std::int32_t>(best);
      o[b * D + d] = x[(b * L + best) * D + d];
    }
  if (track) {
    out.node()->backward_fn = [arg = std::move(arg), L, D, B](Node<T>& n) {
      auto g = detail::in(n, 0)->ensure_grad();
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t d = 0; d < D; ++d) g[(b * L + arg[b * D + d]) * D + d] += n.grad[b * D + d];
    };
  }
  return out;
}

// ------------------------------------------------------------------- reshaping

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  detail::require(numel_of(shape) == a.numel(),
                  "reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  const bool track = detail::needs_grad<T>({&a});
  auto out = detail::make_result<T>(std::move(shape), "reshape", track, {&a});
  std::copy(a.data().begin(), a.data().end(), out.data().begin());
  if (track) {
    out.node()->backward_fn = [](Node<T>& n) {
      auto g = detail::in(n, 0)->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    };
  }
  return out;
}

/// General axis permutation: out.shape[i] = in.shape[perm[i]].
template <class T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& perm) {
  const int r = a.rank();
  detail::require(static_cast<int>(perm.size()) == r, "permute: rank mismatch");
  Shape oshape(r);
  std::vector<std::int64_t> istride(r, 1);
  for (int i = r - 2; i >= 0; --i) istride[i] = istride[i + 1] * a.dim(i + 1);
  for (int i = 0; i < r; ++i) oshape[i] = a.dim(perm[i]);
  // Gather table: for each output linear index, the input linear index.
  std::vector<std::int64_t> src(static_cast<std::size_t>(a.numel()));
  std::vector<std::int64_t> idx(r, 0);
  for (std::int64_t o = 0; o < a.numel(); ++o) {
    std::int64_t s = 0;
    for (int i = 0; i < r; ++i) s += idx[i] * istride[perm[i]];
    src[o] = s;
    for (int i = r - 1; i >= 0; --i) {
      if (++idx[i] < oshape[i]) break;
      idx[i] = 0;
    }
  }
  const bool track = detail::needs_grad<T>({&a});
  auto out = detail::make_result<T>(std::move(oshape), "permute", track, {&a});
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[src[i]];
  if (track) {
    out.node()->backward_fn = [src = std::move(src)](Node<T>& n) {
      auto g = detail::in(n, 0)->ensure_grad();
      for (std::size_t i = 0; i < src.size(); ++i) g[src[i]] += n.grad[i];
    };
  }
  return out;
}

/// Concatenation along the last axis; leading extents must agree.
template <class T>
Tensor<T> concat_last(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == b.rank() && a.rank() >= 1, "concat_last: rank mismatch");
  for (int i = 0; i + 1 < a.rank(); ++i)
    detail::require(a.dim(i) == b.dim(i), "concat_last: leading extents differ " +
                                              to_string(a.shape()) + " vs " + to_string(b.shape()));
  const auto Ca = a.dim(-1), Cb = b.dim(-1);
  const auto rows = a.numel() / std::max<std::int64_t>(Ca, 1);
  Shape shape = a.shape();
  shape.back() = Ca + Cb;
  const bool track = detail::needs_grad<T>({&a, &b});
  auto out = detail::make_result<T>(std::move(shape), "concat_last", track, {&a, &b});
  auto o = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    std::copy_n(a.data().begin() + r * Ca, Ca, o.begin() + r * (Ca + Cb));
    std::copy_n(b.data().begin() + r * Cb, Cb, o.begin() + r * (Ca + Cb) + Ca);
  }
  if (track) {
    out.node()->backward_fn = [rows, Ca, Cb](Node<T>& n) {
      auto* pa = detail::in(n, 0);
      auto* pb = detail::in(n, 1);
      if (pa->requires_grad) {
        auto g = pa->ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r)
          for (std::int64_t c = 0; c < Ca; ++c) g[r * Ca + c] += n.grad[r * (Ca + Cb) + c];
      }
      if (pb->requires_grad) {
        auto g = pb->ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r)
          for (std::int64_t c = 0; c < Cb; ++c) g[r * Cb + c] += n.grad[r * (Ca + Cb) + Ca + c];
      }
    };
  }
  return out;
}

/// Repeats a [1,D] row B times.
template <class T>
Tensor<T> repeat_rows(const Tensor<T>& a, std::int64_t B) {
  detail::require(a.rank() == 2 && a.dim(0) == 1, "repeat_rows: expected [1,D], got " + to_string(a.shape()));
  const auto D = a.dim(1);
  const bool track = detail::needs_grad<T>({&a});
  auto out = detail::make_result<T>({B, D}, "repeat_rows", track, {&a});
  for (std::int64_t b = 0; b < B; ++b) std::copy_n(a.data().begin(), D, out.data().begin() + b * D);
  if (track) {
    out.node()->backward_fn = [B, D](Node<T>& n) {
      auto g = detail::in(n, 0)->ensure_grad();
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t d = 0; d < D; ++d) g[d] += n.grad[b * D + d];
    };
  }
  return out;
}

// ----------------------------------------------------------------- linear maps

/// [M,K] x [K,N] -> [M,N].
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
                  "matmul: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  const auto M = a.dim(0), K = a.dim(1), N = b.dim(1);
  const bool track = detail::needs_grad<T>({&a, &b});
  auto out = detail::make_result<T>({M, N}, "matmul", track, {&a, &b});
  detail::MapMat<T>(out.data().data(), M, N).noalias() =
      detail::CMapMat<T>(a.data().data(), M, K) * detail::CMapMat<T>(b.data().data(), K, N);
  if (track) {
    out.node()->backward_fn = [M, K, N](Node<T>& n) {
      auto* pa = detail::in(n, 0);
      auto* pb = detail::in(n, 1);
      detail::CMapMat<T> dC(n.grad.data(), M, N);
      if (pa->requires_grad)
        detail::MapMat<T>(pa->ensure_grad().data(), M, K).noalias() +=
            dC * detail::CMapMat<T>(pb->value.data(), K, N).transpose();
      if (pb->requires_grad)
        detail::MapMat<T>(pb->ensure_grad().data(), K, N).noalias() +=
            detail::CMapMat<T>(pa->value.data(), M, K).transpose() * dC;
    };
  }
  return out;
}

/// Affine map over the last axis: x[..., K] * W[K,N] + b[N]. `b` may be undefined.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  detail::require(w.rank() == 2 && x.rank() >= 1 && x.dim(-1) == w.dim(0),
                  "linear: input " + to_string(x.shape()) + " against weight " + to_string(w.shape()));
  const auto K = w.dim(0), N = w.dim(1);
  detail::require(!b.defined() || (b.rank() == 1 && b.dim(0) == N),
                  "linear: bias shape " + (b.defined() ? to_string(b.shape()) : std::string("-")));
  const auto M = x.numel() / K;
  Shape shape = x.shape();
  shape.back() = N;
  const bool track = detail::needs_grad<T>({&x, &w, &b});
  auto out = detail::make_result<T>(std::move(shape), "linear", track, {&x, &w, &b});
  detail::MapMat<T> Y(out.data().data(), M, N);
  Y.noalias() = detail::CMapMat<T>(x.data().data(), M, K) * detail::CMapMat<T>(w.data().data(), K, N);
  if (b.defined()) Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.data().data(), N);
  if (track) {
    const bool has_bias = b.defined();
    out.node()->backward_fn = [M, K, N, has_bias](Node<T>& n) {
      auto* px = detail::in(n, 0);
      auto* pw = detail::in(n, 1);
      detail::CMapMat<T> dY(n.grad.data(), M, N);
      if (px->requires_grad)
        detail::MapMat<T>(px->ensure_grad().data(), M, K).noalias() +=
            dY * detail::CMapMat<T>(pw->value.data(), K, N).transpose();
      if (pw->requires_grad)
        detail::MapMat<T>(pw->ensure_grad().data(), K, N).noalias() +=
            detail::CMapMat<T>(px->value.data(), M, K).transpose() * dY;
      if (has_bias) {
        auto* pb = detail::in(n, 2);
        if (pb->requires_grad)
          Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(pb->ensure_grad().data(), N) +=
              dY.colwise().sum();
      }
    };
  }
  return out;
}

// --------------------------------------------------------------- normalization

/// Layer normalization over the last axis with affine gamma/beta.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  const auto C = x.dim(-1);
  detail::require(gamma.numel() == C && beta.numel() == C,
                  "layer_norm: affine size mismatch for input " + to_string(x.shape()));
  const auto rows = x.numel() / C;
  const bool track = detail::needs_grad<T>({&x, &gamma, &beta});
  auto out = detail::make_result<T>(x.shape(), "layer_norm", track, {&x, &gamma, &beta});
  std::vector<T> xhat(static_cast<std::size_t>(x.numel()));
  std::vector<T> rstd(static_cast<std::size_t>(rows));
  auto xv = x.data();
  auto o = out.data();
  auto g = gamma.data();
  auto bt = beta.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    T mu = T(0);
    for (std::int64_t c = 0; c < C; ++c) mu += xv[r * C + c];
    mu /= static_cast<T>(C);
    T var = T(0);
    for (std::int64_t c = 0; c < C; ++c) {
      const T d = xv[r * C + c] - mu;
      var += d * d;
    }
    var /= static_cast<T>(C);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::int64_t c = 0; c < C; ++c) {
      const T h = (xv[r * C + c] - mu) * rs;
      xhat[r * C + c] = h;
      o[r * C + c] = h * g[c] + bt[c];
    }
  }
  if (track) {
    out.node()->backward_fn = [rows, C, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& n) {
      auto* px = detail::in(n, 0);
      auto* pg = detail::in(n, 1);
      auto* pb = detail::in(n, 2);
      if (pg->requires_grad || pb->requires_grad) {
        auto gg = pg->ensure_grad();
        auto gb = pb->ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r)
          for (std::int64_t c = 0; c < C; ++c) {
            gg[c] += n.grad[r * C + c] * xhat[r * C + c];
            gb[c] += n.grad[r * C + c];
          }
      }
      if (px->requires_grad) {
        auto gx = px->ensure_grad();
        std::vector<T> dxh(static_cast<std::size_t>(C));
        for (std::int64_t r = 0; r < rows; ++r) {
          T m1 = T(0), m2 = T(0);
          for (std::int64_t c = 0; c < C; ++c) {
            dxh[c] = n.grad[r * C + c] * pg->value[c];
            m1 += dxh[c];
            m2 += dxh[c] * xhat[r * C + c];
          }
          m1 /= static_cast<T>(C);
          m2 /= static_cast<T>(C);
          for (std::int64_t c = 0; c < C; ++c)
            gx[r * C + c] += rstd[r] * (dxh[c] - m1 - xhat[r * C + c] * m2);
        }
      }
    };
  }
  return out;
}

/// Softmax over the last axis.
template <class T>
Tensor<T> softmax_last(const Tensor<T>& x) {
  const auto C = x.dim(-1);
  const auto rows = x.numel() / std::max<std::int64_t>(C, 1);
  const bool track = detail::needs_grad<T>({&x});
  auto out = detail::make_result<T>(x.shape(), "softmax", track, {&x});
  auto xv = x.data();
  auto o = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::int64_t c = 0; c < C; ++c) mx = std::max(mx, xv[r * C + c]);
    T z = T(0);
    for (std::int64_t c = 0; c < C; ++c) z += (o[r * C + c] = std::exp(xv[r * C + c] - mx));
    for (std::int64_t c = 0; c < C; ++c) o[r * C + c] /= z;
  }
  if (track) {
    out.node()->backward_fn = [rows, C](Node<T>& n) {
      auto gx = detail::in(n, 0)->ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        T dot = T(0);
        for (std::int64_t c = 0; c < C; ++c) dot += n.grad[r * C + c] * n.value[r * C + c];
        for (std::int64_t c = 0; c < C; ++c)
          gx[r * C + c] += n.value[r * C + c] * (n.grad[r * C + c] - dot);
      }
    };
  }
  return out;
}

/// Row-wise L2 normalization of [N,D]. Rows with norm below `min_norm` are
/// rejected as degenerate.
template <class T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x, double min_norm = 1e-12) {
  const auto D = x.dim(-1);
  const auto rows = x.numel() / D;
  const bool track = detail::needs_grad<T>({&x});
  auto out = detail::make_result<T>(x.shape(), "l2_normalize", track, {&x});
  std::vector<T> norms(static_cast<std::size_t>(rows));
  auto xv = x.data();
  auto o = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::int64_t d = 0; d < D; ++d) acc += double(xv[r * D + d]) * double(xv[r * D + d]);
    const double nrm = std::sqrt(acc);
    if (!(nrm >= min_norm))
      throw NumericError("l2_normalize: degenerate vector (norm " + std::to_string(nrm) + ") at row " +
                         std::to_string(r));
    norms[r] = static_cast<T>(nrm);
    for (std::int64_t d = 0; d < D; ++d) o[r * D + d] = static_cast<T>(double(xv[r * D + d]) / nrm);
  }
  if (track) {
    out.node()->backward_fn = [rows, D, norms = std::move(norms)](Node<T>& n) {
      auto gx = detail::in(n, 0)->ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        T dot = T(0);
        for (std::int64_t d = 0; d < D; ++d) dot += n.grad[r * D + d] * n.value[r * D + d];
        for (std::int64_t d = 0; d < D; ++d)
          gx[r * D + d] += (n.grad[r * D + d] - n.value[r * D + d] * dot) / norms[r];
      }
    };
  }
  return out;
}

/// Mean over rows of the squared L2 distance between `pred` and constant
/// `target` (both [N,D]).
template <class T>
Tensor<T> mse_rows(const Tensor<T>& pred, const Tensor<T>& target) {
  detail::require(pred.shape() == target.shape() && pred.rank() == 2,
                  "mse_rows: shapes " + to_string(pred.shape()) + " vs " + to_string(target.shape()));
  const auto N = pred.dim(0);
  detail::require(N > 0, "mse_rows: empty sample set");
  const bool track = detail::needs_grad<T>({&pred});
  auto out = detail::make_result<T>({}, "mse", track, {&pred, &target});
  auto p = pred.data();
  auto t = target.data();
  T acc = T(0);
  for (std::size_t i = 0; i < p.size(); ++i) acc += (p[i] - t[i]) * (p[i] - t[i]);
  out.data()[0] = acc / static_cast<T>(N);
  if (track) {
    out.node()->backward_fn = [N](Node<T>& n) {
      auto* pp = detail::in(n, 0);
      auto* pt = detail::in(n, 1);
      auto g = pp->ensure_grad();
      const T s = T(2) * n.grad[0] / static_cast<T>(N);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * (pp->value[i] - pt->value[i]);
    };
  }
  return out;
}

// ------------------------------------------------------------------- attention

/// Multi-head scaled dot-product attention over sets.
/// q: [B,Lq,D], k,v: [B,Lk,D]; D is split into `heads` contiguous chunks.
/// Returns [B,Lq,D]. If `probs_out` is non-null it receives the softmax
/// matrices laid out [B,heads,Lq,Lk].
template <class T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, int heads,
                    std::vector<T>* probs_out = nullptr) {
  detail::require(q.rank() == 3 && k.rank() == 3 && v.rank() == 3, "attention: expected rank-3 operands");
  const auto B = q.dim(0), Lq = q.dim(1), D = q.dim(2), Lk = k.dim(1);
  detail::require(k.dim(0) == B && v.dim(0) == B && k.dim(2) == D && v.dim(2) == D && v.dim(1) == Lk,
                  "attention: q " + to_string(q.shape()) + " k " + to_string(k.shape()) + " v " +
                      to_string(v.shape()));
  detail::require(Lk >= 1, "attention: empty key set");
  detail::require(heads >= 1 && D % heads == 0,
                  "attention: dim " + std::to_string(D) + " not divisible by heads " + std::to_string(heads));
  const std::int64_t H = heads, dh = D / heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(dh));
  const bool track = detail::needs_grad<T>({&q, &k, &v});
  auto out = detail::make_result<T>({B, Lq, D}, "attention", track, {&q, &k, &v});
  std::vector<T> P(static_cast<std::size_t>(B * H * Lq * Lk));
  // Key-set reductions accumulate in double for float tensors.
  using Acc = std::conditional_t<std::is_same_v<T, float>, double, T>;
  std::vector<Acc> acc(static_cast<std::size_t>(dh));
  auto Q = q.data();
  auto K = k.data();
  auto V = v.data();
  auto O = out.data();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t i = 0; i < Lq; ++i) {
        T* prow = &P[((b * H + h) * Lq + i) * Lk];
        const T* qi = &Q[(b * Lq + i) * D + h * dh];
        T mx = -std::numeric_limits<T>::infinity();
        for (std::int64_t j = 0; j < Lk; ++j) {
          const T* kj = &K[(b * Lk + j) * D + h * dh];
          T s = T(0);
          for (std::int64_t d = 0; d < dh; ++d) s += qi[d] * kj[d];
          prow[j] = s * sc;
          mx = std::max(mx, prow[j]);
        }
        Acc z = 0;
        for (std::int64_t j = 0; j < Lk; ++j) z += (prow[j] = std::exp(prow[j] - mx));
        for (std::int64_t j = 0; j < Lk; ++j) prow[j] = static_cast<T>(prow[j] / z);
        std::fill(acc.begin(), acc.end(), Acc(0));
        for (std::int64_t j = 0; j < Lk; ++j) {
          const T* vj = &V[(b * Lk + j) * D + h * dh];
          for (std::int64_t d = 0; d < dh; ++d) acc[d] += static_cast<Acc>(prow[j]) * vj[d];
        }
        T* oi = &O[(b * Lq + i) * D + h * dh];
        for (std::int64_t d = 0; d < dh; ++d) oi[d] = static_cast<T>(acc[d]);
      }
  if (probs_out) *probs_out = P;
  if (track) {
    out.node()->backward_fn = [B, H, Lq, Lk, D, dh, sc, P = std::move(P)](Node<T>& n) {
      auto* pq = detail::in(n, 0);
      auto* pk = detail::in(n, 1);
      auto* pv = detail::in(n, 2);
      std::span<T> gq, gk, gv;
      if (pq->requires_grad) gq = pq->ensure_grad();
      if (pk->requires_grad) gk = pk->ensure_grad();
      if (pv->requires_grad) gv = pv->ensure_grad();
      std::vector<T> dp(static_cast<std::size_t>(Lk));
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t h = 0; h < H; ++h)
          for (std::int64_t i = 0; i < Lq; ++i) {
            const T* prow = &P[((b * H + h) * Lq + i) * Lk];
            const T* go = &n.grad[(b * Lq + i) * D + h * dh];
            T dot = T(0);
            for (std::int64_t j = 0; j < Lk; ++j) {
              const T* vj = &pv->value[(b * Lk + j) * D + h * dh];
              T s = T(0);
              for (std::int64_t d = 0; d < dh; ++d) s += go[d] * vj[d];
              dp[j] = s;
              dot += s * prow[j];
              if (!gv.empty()) {
                T* gvj = &gv[(b * Lk + j) * D + h * dh];
                for (std::int64_t d = 0; d < dh; ++d) gvj[d] += prow[j] * go[d];
              }
            }
            const T* qi = &pq->value[(b * Lq + i) * D + h * dh];
            for (std::int64_t j = 0; j < Lk; ++j) {
              const T ds = prow[j] * (dp[j] - dot) * sc;
              const T* kj = &pk->value[(b * Lk + j) * D + h * dh];
              if (!gq.empty()) {
                T* gqi = &gq[(b * Lq + i) * D + h * dh];
                for (std::int64_t d = 0; d < dh; ++d) gqi[d] += ds * kj[d];
              }
              if (!gk.empty()) {
                T* gkj = &gk[(b * Lk + j) * D + h * dh];
                for (std::int64_t d = 0; d < dh; ++d) gkj[d] += ds * qi[d];
              }
            }
          }
    };
  }
  return out;
}

// --------------------------------------------------------------- convolutions

/// 2-D convolution, NHWC input [N,H,W,Ci], weight [kh,kw,Ci,Co], zero padding.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride, int pad) {
  detail::require(x.rank() == 4 && w.rank() == 4 && w.dim(2) == x.dim(3),
                  "conv2d: input " + to_string(x.shape()) + " against kernel " + to_string(w.shape()));
  const auto N = x.dim(0), H = x.dim(1), W = x.dim(2), Ci = x.dim(3);
  const auto kh = w.dim(0), kw = w.dim(1), Co = w.dim(3);
  const auto Ho = (H + 2 * pad - kh) / stride + 1;
  const auto Wo = (W + 2 * pad - kw) / stride + 1;
  detail::require(Ho > 0 && Wo > 0, "conv2d: empty output for input " + to_string(x.shape()));
  detail::require(!b.defined() || b.numel() == Co, "conv2d: bias size mismatch");
  const auto Kc = kh * kw * Ci;
  const auto M = N * Ho * Wo;
  // im2col; out-of-bounds taps stay zero.
  std::vector<T> cols(static_cast<std::size_t>(M * Kc), T(0));
  auto xv = x.data();
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t oy = 0; oy < Ho; ++oy)
      for (std::int64_t ox = 0; ox < Wo; ++ox) {
        T* row = &cols[((n * Ho + oy) * Wo + ox) * Kc];
        for (std::int64_t ky = 0; ky < kh; ++ky) {
          const auto iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          for (std::int64_t kx = 0; kx < kw; ++kx) {
            const auto ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= W) continue;
            std::copy_n(&xv[((n * H + iy) * W + ix) * Ci], Ci, row + (ky * kw + kx) * Ci);
          }
        }
      }
  const bool track = detail::needs_grad<T>({&x, &w, &b});
  auto out = detail::make_result<T>({N, Ho, Wo, Co}, "conv2d", track, {&x, &w, &b});
  detail::MapMat<T> Y(out.data().data(), M, Co);
  Y.noalias() = detail::CMapMat<T>(cols.data(), M, Kc) * detail::CMapMat<T>(w.data().data(), Kc, Co);
  if (b.defined()) Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.data().data(), Co);
  if (track) {
    const bool has_bias = b.defined();
    out.node()->backward_fn = [=, cols = std::move(cols)](Node<T>& n) {
      auto* px = detail::in(n, 0);
      auto* pw = detail::in(n, 1);
      detail::CMapMat<T> dY(n.grad.data(), M, Co);
      if (pw->requires_grad)
        detail::MapMat<T>(pw->ensure_grad().data(), Kc, Co).noalias() +=
            detail::CMapMat<T>(cols.data(), M, Kc).transpose() * dY;
      if (has_bias) {
        auto* pb = detail::in(n, 2);
        if (pb->requires_grad)
          Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(pb->ensure_grad().data(), Co) += dY.colwise().sum();
      }
      if (px->requires_grad) {
        detail::RowMat<T> dcols = dY * detail::CMapMat<T>(pw->value.data(), Kc, Co).transpose();
        auto gx = px->ensure_grad();
        for (std::int64_t nn = 0; nn < N; ++nn)
          for (std::int64_t oy = 0; oy < Ho; ++oy)
            for (std::int64_t ox = 0; ox < Wo; ++ox) {
              const T* row = dcols.data() + ((nn * Ho + oy) * Wo + ox) * Kc;
              for (std::int64_t ky = 0; ky < kh; ++ky) {
                const auto iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= H) continue;
                for (std::int64_t kx = 0; kx < kw; ++kx) {
                  const auto ix = ox * stride - pad + kx;
                  if (ix < 0 || ix >= W) continue;
                  T* dst = &gx[((nn * H + iy) * W + ix) * Ci];
                  const T* src = row + (ky * kw + kx) * Ci;
                  for (std::int64_t c = 0; c < Ci; ++c) dst[c] += src[c];
                }
              }
            }
      }
    };
  }
  return out;
}

// ------------------------------------------------------------ bilinear sampling

/// Source coordinate of target sample `j` when mapping `n_src` samples onto
/// `n_dst` with pixel centers aligned: (j+0.5)*n_src/n_dst - 0.5.
inline double center_aligned(double j, std::int64_t n_src, std::int64_t n_dst) {
  return (j + 0.5) * static_cast<double>(n_src) / static_cast<double>(n_dst) - 0.5;
}

/// Two taps and weights for continuous coordinate `u` on an axis of length
/// `n`, clamped at the edges.
struct Taps {
  std::int64_t i0, i1;
  double w0, w1;
};

inline Taps bilinear_taps(double u, std::int64_t n) {
  u = std::clamp(u, 0.0, static_cast<double>(n - 1));
  auto i0 = static_cast<std::int64_t>(std::floor(u));
  i0 = std::min(i0, n - 1);
  const auto i1 = std::min(i0 + 1, n - 1);
  const double f = u - static_cast<double>(i0);
  return {i0, i1, 1.0 - f, f};
}

/// Bilinear resize of [N,H,W,C] to [N,Ho,Wo,C] with center alignment.
template <class T>
Tensor<T> resize_bilinear(const Tensor<T>& x, std::int64_t Ho, std::int64_t Wo) {
  detail::require(x.rank() == 4, "resize_bilinear: expected [N,H,W,C], got " + to_string(x.shape()));
  const auto N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  std::vector<Taps> ty(Ho), tx(Wo);
  for (std::int64_t i = 0; i < Ho; ++i) ty[i] = bilinear_taps(center_aligned(i, H, Ho), H);
  for (std::int64_t j = 0; j < Wo; ++j) tx[j] = bilinear_taps(center_aligned(j, W, Wo), W);
  const bool track = detail::needs_grad<T>({&x});
  auto out = detail::make_result<T>({N, Ho, Wo, C}, "resize_bilinear", track, {&x});
  auto xv = x.data();
  auto o = out.data();
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t i = 0; i < Ho; ++i)
      for (std::int64_t j = 0; j < Wo; ++j) {
        const auto& a = ty[i];
        const auto& b = tx[j];
        const T w00 = T(a.w0 * b.w0), w01 = T(a.w0 * b.w1), w10 = T(a.w1 * b.w0), w11 = T(a.w1 * b.w1);
        const T* p00 = &xv[((n * H + a.i0) * W + b.i0) * C];
        const T* p01 = &xv[((n * H + a.i0) * W + b.i1) * C];
        const T* p10 = &xv[((n * H + a.i1) * W + b.i0) * C];
        const T* p11 = &xv[((n * H + a.i1) * W + b.i1) * C];
        T* dst = &o[((n * Ho + i) * Wo + j) * C];
        for (std::int64_t c = 0; c < C; ++c) dst[c] = w00 * p00[c] + w01 * p01[c] + w10 * p10[c] + w11 * p11[c];
      }
  if (track) {
    out.node()->backward_fn = [=, ty = std::move(ty), tx = std::move(tx)](Node<T>& nd) {
      auto g = detail::in(nd, 0)->ensure_grad();
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t i = 0; i < Ho; ++i)
          for (std::int64_t j = 0; j < Wo; ++j) {
            const auto& a = ty[i];
            const auto& b = tx[j];
            const T* src = &nd.grad[((n * Ho + i) * Wo + j) * C];
            const std::array<std::pair<std::int64_t, T>, 4> taps{{
                {((n * H + a.i0) * W + b.i0) * C, T(a.w0 * b.w0)},
                {((n * H + a.i0) * W + b.i1) * C, T(a.w0 * b.w1)},
                {((n * H + a.i1) * W + b.i0) * C, T(a.w1 * b.w0)},
                {((n * H + a.i1) * W + b.i1) * C, T(a.w1 * b.w1)},
            }};
            for (const auto& [off, wt] : taps)
              for (std::int64_t c = 0; c < C; ++c) g[off + c] += wt * src[c];
          }
    };
  }
  return out;
}

/// Samples every map of [N,H,W,C] at continuous grid coordinates
/// (row, col) with edge clamping. Returns [P,N,C].
template <class T>
Tensor<T> grid_sample(const Tensor<T>& x, std::span<const std::array<double, 2>> coords) {
  detail::require(x.rank() == 4, "grid_sample: expected [N,H,W,C], got " + to_string(x.shape()));
  const auto N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  const auto P = static_cast<std::int64_t>(coords.size());
  std::vector<std::array<Taps, 2>> taps(static_cast<std::size_t>(P));
  for (std::int64_t p = 0; p < P; ++p)
    taps[p] = {bilinear_taps(coords[p][0], H), bilinear_taps(coords[p][1], W)};
  const bool track = detail::needs_grad<T>({&x});
  auto out = detail::make_result<T>({P, N, C}, "grid_sample", track, {&x});
  auto xv = x.data();
  auto o = out.data();
  for (std::int64_t p = 0; p < P; ++p) {
    const auto& [a, b] = taps[p];
    const T w00 = T(a.w0 * b.w0), w01 = T(a.w0 * b.w1), w10 = T(a.w1 * b.w0), w11 = T(a.w1 * b.w1);
    for (std::int64_t n = 0; n < N; ++n) {
      const T* p00 = &xv[((n * H + a.i0) * W + b.i0) * C];
      const T* p01 = &xv[((n * H + a.i0) * W + b.i1) * C];
      const T* p10 = &xv[((n * H + a.i1) * W + b.i0) * C];
      const T* p11 = &xv[((n * H + a.i1) * W + b.i1) * C];
      T* dst = &o[(p * N + n) * C];
      for (std::int64_t c = 0; c < C; ++c) dst[c] = w00 * p00[c] + w01 * p01[c] + w10 * p10[c] + w11 * p11[c];
    }
  }
  if (track) {
    out.node()->backward_fn = [=, taps = std::move(taps)](Node<T>& nd) {
      auto g = detail::in(nd, 0)->ensure_grad();
      for (std::int64_t p = 0; p < P; ++p) {
        const auto& [a, b] = taps[p];
        for (std::int64_t n = 0; n < N; ++n) {
          const T* src = &nd.grad[(p * N + n) * C];
          const std::array<std::pair<std::int64_t, T>, 4> tp{{
              {((n * H + a.i0) * W + b.i0) * C, T(a.w0 * b.w0)},
              {((n * H + a.i0) * W + b.i1) * C, T(a.w0 * b.w1)},
              {((n * H + a.i1) * W + b.i0) * C, T(a.w1 * b.w0)},
              {((n * H + a.i1) * W + b.i1) * C, T(a.w1 * b.w1)},
          }};
          for (const auto& [off, wt] : tp)
            for (std::int64_t c = 0; c < C; ++c) g[off + c] += wt * src[c];
        }
      }
    };
  }
  return out;
}

}  // namespace unips::nk
