#pragma once

// Differentiable tensor operations. Every op validates shapes, computes its
// forward value eagerly and, when recording, registers a backward closure
// that accumulates into the gradients of the inputs that require them.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "cer/error.hpp"
#include "cer/random.hpp"
#include "cer/tensor.hpp"

namespace cer {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using CMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using VecMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <typename T>
using CVecMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

template <typename T>
bool wants_grad(const Node<T>& n) {
  return n.requires_grad;
}

}  // namespace detail

/// y = x·Wᵀ + b over the last dimension of x. W has shape [out, in].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = {}) {
  using namespace detail;
  require_shape(w.rank() == 2, "linear: weight must be 2-D, got " + shape_str(w.shape()));
  const std::size_t out = w.dim(0);
  const std::size_t in = w.dim(1);
  require_shape(x.rank() >= 1 && x.shape().back() == in,
                "linear: input " + shape_str(x.shape()) + " does not end in " + std::to_string(in));
  require_shape(!b.defined() || b.numel() == out, "linear: bias size mismatch");
  const std::size_t rows = x.numel() / in;
  Shape os = x.shape();
  os.back() = out;
  std::vector<T> y(rows * out);
  CMatMap<T> X(x.data().data(), rows, in);
  CMatMap<T> W(w.data().data(), out, in);
  MatMap<T> Y(y.data(), rows, out);
  if (deterministic_mode()) {
    for (std::size_t r = 0; r < rows; ++r) Y.row(r).noalias() = X.row(r) * W.transpose();
  } else {
    Y.noalias() = X * W.transpose();
  }
  if (b.defined()) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> B(b.data().data(), out);
    Y.rowwise() += B;
  }
  return make_result<T>(std::move(os), std::move(y), {&x, &w, &b}, [rows, in, out](Node<T>& n) {
    CMatMap<T> dY(n.grad.data(), rows, out);
    Node<T>& px = *n.parents[0];
    Node<T>& pw = *n.parents[1];
    Node<T>& pb = *n.parents[2];
    if (px.requires_grad) {
      MatMap<T> dX(px.ensure_grad().data(), rows, in);
      dX.noalias() += dY * CMatMap<T>(pw.value.data(), out, in);
    }
    if (pw.requires_grad) {
      MatMap<T> dW(pw.ensure_grad().data(), out, in);
      dW.noalias() += dY.transpose() * CMatMap<T>(px.value.data(), rows, in);
    }
    if (pb.requires_grad) {
      VecMap<T> db(pb.ensure_grad().data(), out);
      db += dY.colwise().sum().transpose();
    }
  });
}

/// Batched matrix product: a[b,m,k]·c[b,k,n], or a[b,m,k]·c[b,n,k]ᵀ.
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& c, bool transpose_c = false) {
  using namespace detail;
  require_shape(a.rank() == 3 && c.rank() == 3 && a.dim(0) == c.dim(0),
                "bmm: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(c.shape()));
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_c ? c.dim(1) : c.dim(2);
  require_shape((transpose_c ? c.dim(2) : c.dim(1)) == k,
                "bmm: inner dimensions differ: " + shape_str(a.shape()) + " and " + shape_str(c.shape()));
  std::vector<T> y(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    CMatMap<T> A(a.data().data() + i * m * k, m, k);
    MatMap<T> Y(y.data() + i * m * n, m, n);
    if (transpose_c) {
      Y.noalias() = A * CMatMap<T>(c.data().data() + i * n * k, n, k).transpose();
    } else {
      Y.noalias() = A * CMatMap<T>(c.data().data() + i * k * n, k, n);
    }
  }
  return make_result<T>({batch, m, n}, std::move(y), {&a, &c},
                        [batch, m, k, n, transpose_c](Node<T>& node) {
    Node<T>& pa = *node.parents[0];
    Node<T>& pc = *node.parents[1];
    for (std::size_t i = 0; i < batch; ++i) {
      CMatMap<T> dY(node.grad.data() + i * m * n, m, n);
      if (transpose_c) {
        CMatMap<T> C(pc.value.data() + i * n * k, n, k);
        if (pa.requires_grad) MatMap<T>(pa.ensure_grad().data() + i * m * k, m, k).noalias() += dY * C;
        if (pc.requires_grad) {
          MatMap<T>(pc.ensure_grad().data() + i * n * k, n, k).noalias() +=
              dY.transpose() * CMatMap<T>(pa.value.data() + i * m * k, m, k);
        }
      } else {
        CMatMap<T> C(pc.value.data() + i * k * n, k, n);
        if (pa.requires_grad) {
          MatMap<T>(pa.ensure_grad().data() + i * m * k, m, k).noalias() += dY * C.transpose();
        }
        if (pc.requires_grad) {
          MatMap<T>(pc.ensure_grad().data() + i * k * n, k, n).noalias() +=
              CMatMap<T>(pa.value.data() + i * m * k, m, k).transpose() * dY;
        }
      }
    }
  });
}

/// Element-wise sum. b may have the shape of a trailing suffix of a's shape,
/// in which case it is broadcast over the leading dimensions.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool suffix = sb.size() <= sa.size() && std::equal(sb.rbegin(), sb.rend(), sa.rbegin());
  detail::require_shape(suffix, "add: cannot broadcast " + shape_str(sb) + " onto " + shape_str(sa));
  const std::size_t inner = b.numel();
  const std::size_t outer = a.numel() / inner;
  std::vector<T> y(a.data().begin(), a.data().end());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) y[o * inner + i] += b.data()[i];
  }
  return make_result<T>(sa, std::move(y), {&a, &b}, [outer, inner](Node<T>& n) {
    Node<T>& pa = *n.parents[0];
    Node<T>& pb = *n.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) g[i] += n.grad[o * inner + i];
      }
    }
  });
}

/// x multiplied by a constant.
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> y(x.data().begin(), x.data().end());
  for (auto& v : y) v *= factor;
  return make_result<T>(x.shape(), std::move(y), {&x}, [factor](Node<T>& n) {
    auto& g = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * n.grad[i];
  });
}

/// x multiplied by the single element s[index] of a (learnable) tensor.
template <typename T>
Tensor<T> scale_by_element(const Tensor<T>& x, const Tensor<T>& s, std::size_t index) {
  if (index >= s.numel()) throw IndexError("scale_by_element: index out of range");
  const T factor = s.data()[index];
  std::vector<T> y(x.data().begin(), x.data().end());
  for (auto& v : y) v *= factor;
  return make_result<T>(x.shape(), std::move(y), {&x, &s}, [index](Node<T>& n) {
    Node<T>& px = *n.parents[0];
    Node<T>& ps = *n.parents[1];
    const T factor = ps.value[index];
    if (px.requires_grad) {
      auto& g = px.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * n.grad[i];
    }
    if (ps.requires_grad) {
      T acc = 0;
      for (std::size_t i = 0; i < n.grad.size(); ++i) acc += n.grad[i] * px.value[i];
      ps.ensure_grad()[index] += acc;
    }
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> y(x.data().begin(), x.data().end());
  for (auto& v : y) v = v > T(0) ? v : T(0);
  return make_result<T>(x.shape(), std::move(y), {&x}, [](Node<T>& n) {
    Node<T>& p = *n.parents[0];
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (p.value[i] > T(0)) g[i] += n.grad[i];
    }
  });
}

/// Exact (erf) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  std::vector<T> y(x.numel());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const T v = x.data()[i];
    y[i] = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  }
  return make_result<T>(x.shape(), std::move(y), {&x}, [](Node<T>& n) {
    constexpr T inv_sqrt2 = T(0.70710678118654752440);
    constexpr T inv_sqrt_2pi = T(0.39894228040143267794);
    Node<T>& p = *n.parents[0];
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = p.value[i];
      const T d = T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      g[i] += d * n.grad[i];
    }
  });
}

/// Numerically stable softmax over the last dimension.
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.numel() / cols;
  std::vector<T> y(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * cols;
    T* out = y.data() + r * cols;
    const T mx = *std::max_element(in, in + cols);
    T sum = 0;
    for (std::size_t c = 0; c < cols; ++c) sum += (out[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) out[c] /= sum;
  }
  return make_result<T>(x.shape(), std::move(y), {&x}, [rows, cols](Node<T>& n) {
    auto& g = n.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* yv = n.value.data() + r * cols;
      const T* dy = n.grad.data() + r * cols;
      T dot = 0;
      for (std::size_t c = 0; c < cols; ++c) dot += dy[c] * yv[c];
      for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += yv[c] * (dy[c] - dot);
    }
  });
}

/// Layer normalisation over the last dimension with affine gamma/beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-6)) {
  const std::size_t cols = x.shape().back();
  detail::require_shape(gamma.numel() == cols && beta.numel() == cols,
                        "layer_norm: affine parameters must have " + std::to_string(cols) + " entries");
  const std::size_t rows = x.numel() / cols;
  std::vector<T> y(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * cols;
    T mean = 0;
    for (std::size_t c = 0; c < cols; ++c) mean += in[c];
    mean /= T(cols);
    T var = 0;
    for (std::size_t c = 0; c < cols; ++c) var += (in[c] - mean) * (in[c] - mean);
    var /= T(cols);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      xhat[r * cols + c] = (in[c] - mean) * inv_std[r];
      y[r * cols + c] = xhat[r * cols + c] * gamma.data()[c] + beta.data()[c];
    }
  }
  return make_result<T>(x.shape(), std::move(y), {&x, &gamma, &beta},
                        [rows, cols, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& n) {
    Node<T>& px = *n.parents[0];
    Node<T>& pg = *n.parents[1];
    Node<T>& pb = *n.parents[2];
    if (pg.requires_grad) {
      auto& g = pg.ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i % cols] += n.grad[i] * xhat[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i % cols] += n.grad[i];
    }
    if (px.requires_grad) {
      auto& g = px.ensure_grad();
      std::vector<T> dxhat(cols);
      for (std::size_t r = 0; r < rows; ++r) {
        T mean_d = 0, mean_dx = 0;
        for (std::size_t c = 0; c < cols; ++c) {
          dxhat[c] = n.grad[r * cols + c] * pg.value[c];
          mean_d += dxhat[c];
          mean_dx += dxhat[c] * xhat[r * cols + c];
        }
        mean_d /= T(cols);
        mean_dx /= T(cols);
        for (std::size_t c = 0; c < cols; ++c) {
          g[r * cols + c] += inv_std[r] * (dxhat[c] - mean_d - xhat[r * cols + c] * mean_dx);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  detail::require_shape(shape_numel(shape) == x.numel(),
                        "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  std::vector<T> y(x.data().begin(), x.data().end());
  return make_result<T>(std::move(shape), std::move(y), {&x}, [](Node<T>& n) {
    auto& g = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

/// Generic axis permutation: output axis i is input axis perm[i].
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t rank = x.rank();
  detail::require_shape(perm.size() == rank, "permute: permutation rank mismatch");
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.dim(i);
  Shape os(rank);
  for (std::size_t i = 0; i < rank; ++i) os[i] = x.dim(perm[i]);
  // Source offset for every output element, reused by the backward pass.
  std::vector<std::size_t> src(x.numel());
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t o = 0; o < src.size(); ++o) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < rank; ++i) off += idx[i] * in_strides[perm[i]];
    src[o] = off;
    for (std::size_t i = rank; i-- > 0;) {
      if (++idx[i] < os[i]) break;
      idx[i] = 0;
    }
  }
  std::vector<T> y(x.numel());
  for (std::size_t o = 0; o < y.size(); ++o) y[o] = x.data()[src[o]];
  return make_result<T>(std::move(os), std::move(y), {&x}, [src = std::move(src)](Node<T>& n) {
    auto& g = n.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < src.size(); ++o) g[src[o]] += n.grad[o];
  });
}

/// [B,C,H,W] images to [B, (H/p)(W/p), C·p·p] row-major patch sequences.
template <typename T>
Tensor<T> patchify(const Tensor<T>& x, std::size_t patch) {
  detail::require_shape(x.rank() == 4, "patchify: expected [B,C,H,W], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (patch == 0 || H % patch != 0 || W % patch != 0) {
    throw ConfigError("patchify: image " + std::to_string(H) + "x" + std::to_string(W) +
                      " is not divisible by patch size " + std::to_string(patch));
  }
  const std::size_t gh = H / patch, gw = W / patch, N = gh * gw, P = C * patch * patch;
  std::vector<std::size_t> src(B * N * P);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t py = 0; py < gh; ++py)
      for (std::size_t px = 0; px < gw; ++px)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t i = 0; i < patch; ++i)
            for (std::size_t j = 0; j < patch; ++j) {
              const std::size_t o = ((b * N + py * gw + px) * C + c) * patch * patch + i * patch + j;
              src[o] = ((b * C + c) * H + py * patch + i) * W + px * patch + j;
            }
  std::vector<T> y(src.size());
  for (std::size_t o = 0; o < y.size(); ++o) y[o] = x.data()[src[o]];
  return make_result<T>({B, N, P}, std::move(y), {&x}, [src = std::move(src)](Node<T>& n) {
    auto& g = n.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < src.size(); ++o) g[src[o]] += n.grad[o];
  });
}

namespace detail {

struct ConvGeometry {
  std::size_t C, H, W, O, K, stride, pad, Ho, Wo;
};

template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* col) {
  const std::size_t hw = g.Ho * g.Wo;
  for (std::size_t c = 0; c < g.C; ++c)
    for (std::size_t ki = 0; ki < g.K; ++ki)
      for (std::size_t kj = 0; kj < g.K; ++kj) {
        T* row = col + ((c * g.K + ki) * g.K + kj) * hw;
        for (std::size_t oh = 0; oh < g.Ho; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.pad);
          for (std::size_t ow = 0; ow < g.Wo; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.pad);
            row[oh * g.Wo + ow] =
                (ih < 0 || iw < 0 || ih >= static_cast<long>(g.H) || iw >= static_cast<long>(g.W))
                    ? T(0)
                    : img[(c * g.H + static_cast<std::size_t>(ih)) * g.W + static_cast<std::size_t>(iw)];
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* img) {
  const std::size_t hw = g.Ho * g.Wo;
  for (std::size_t c = 0; c < g.C; ++c)
    for (std::size_t ki = 0; ki < g.K; ++ki)
      for (std::size_t kj = 0; kj < g.K; ++kj) {
        const T* row = col + ((c * g.K + ki) * g.K + kj) * hw;
        for (std::size_t oh = 0; oh < g.Ho; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.pad);
          if (ih < 0 || ih >= static_cast<long>(g.H)) continue;
          for (std::size_t ow = 0; ow < g.Wo; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.pad);
            if (iw < 0 || iw >= static_cast<long>(g.W)) continue;
            img[(c * g.H + static_cast<std::size_t>(ih)) * g.W + static_cast<std::size_t>(iw)] += row[oh * g.Wo + ow];
          }
        }
      }
}

}  // namespace detail

/// 2-D convolution over [B,C,H,W] with square kernels, weight [O,C,K,K].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, std::size_t stride,
                 std::size_t pad) {
  using namespace detail;
  require_shape(x.rank() == 4 && w.rank() == 4 && w.dim(2) == w.dim(3) && w.dim(1) == x.dim(1),
                "conv2d: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
  ConvGeometry g{x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), stride, pad, 0, 0};
  if (stride == 0 || g.H + 2 * pad < g.K || g.W + 2 * pad < g.K) {
    throw ShapeError("conv2d: kernel " + std::to_string(g.K) + " does not fit input " + shape_str(x.shape()));
  }
  require_shape(!bias.defined() || bias.numel() == g.O, "conv2d: bias size mismatch");
  g.Ho = (g.H + 2 * pad - g.K) / stride + 1;
  g.Wo = (g.W + 2 * pad - g.K) / stride + 1;
  const std::size_t B = x.dim(0), hw = g.Ho * g.Wo, ckk = g.C * g.K * g.K;
  const bool pointwise = g.K == 1 && stride == 1 && pad == 0;
  std::vector<T> y(B * g.O * hw);
  std::vector<T> col(pointwise ? 0 : ckk * hw);
  CMatMap<T> Wm(w.data().data(), g.O, ckk);
  for (std::size_t b = 0; b < B; ++b) {
    const T* img = x.data().data() + b * g.C * g.H * g.W;
    if (!pointwise) im2col(img, g, col.data());
    CMatMap<T> Cm(pointwise ? img : col.data(), ckk, hw);
    MatMap<T> Y(y.data() + b * g.O * hw, g.O, hw);
    Y.noalias() = Wm * Cm;
    if (bias.defined()) {
      for (std::size_t o = 0; o < g.O; ++o) Y.row(o).array() += bias.data()[o];
    }
  }
  return make_result<T>({B, g.O, g.Ho, g.Wo}, std::move(y), {&x, &w, &bias}, [g, B, pointwise](Node<T>& n) {
    Node<T>& px = *n.parents[0];
    Node<T>& pw = *n.parents[1];
    Node<T>& pb = *n.parents[2];
    const std::size_t hw = g.Ho * g.Wo, ckk = g.C * g.K * g.K, img_size = g.C * g.H * g.W;
    std::vector<T> col(pointwise ? 0 : ckk * hw);
    std::vector<T> dcol(pointwise ? 0 : ckk * hw);
    CMatMap<T> Wm(pw.value.data(), g.O, ckk);
    for (std::size_t b = 0; b < B; ++b) {
      CMatMap<T> dY(n.grad.data() + b * g.O * hw, g.O, hw);
      const T* img = px.value.data() + b * img_size;
      if (pw.requires_grad) {
        if (!pointwise) im2col(img, g, col.data());
        MatMap<T> dW(pw.ensure_grad().data(), g.O, ckk);
        dW.noalias() += dY * CMatMap<T>(pointwise ? img : col.data(), ckk, hw).transpose();
      }
      if (px.requires_grad) {
        T* dimg = px.ensure_grad().data() + b * img_size;
        if (pointwise) {
          MatMap<T>(dimg, ckk, hw).noalias() += Wm.transpose() * dY;
        } else {
          MatMap<T>(dcol.data(), ckk, hw).noalias() = Wm.transpose() * dY;
          col2im_add(dcol.data(), g, dimg);
        }
      }
      if (pb.requires_grad) {
        auto& gb = pb.ensure_grad();
        for (std::size_t o = 0; o < g.O; ++o) gb[o] += dY.row(o).sum();
      }
    }
  });
}

/// Per-channel batch normalisation over [B,C,H,W]. In training mode the
/// batch statistics are used and the running buffers are updated in place.
template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                       Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                       T momentum = T(0.1), T eps = T(1e-5)) {
  detail::require_shape(x.rank() == 4 && gamma.numel() == x.dim(1) && beta.numel() == x.dim(1),
                        "batch_norm2d: shape mismatch for input " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
  const std::size_t count = B * hw;
  std::vector<T> mean(C), inv_std(C);
  if (training) {
    for (std::size_t c = 0; c < C; ++c) {
      T m = 0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < hw; ++i) m += x.data()[(b * C + c) * hw + i];
      m /= T(count);
      T v = 0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < hw; ++i) {
          const T d = x.data()[(b * C + c) * hw + i] - m;
          v += d * d;
        }
      v /= T(count);
      mean[c] = m;
      inv_std[c] = T(1) / std::sqrt(v + eps);
      const T unbiased = count > 1 ? v * T(count) / T(count - 1) : v;
      running_mean.data()[c] = (T(1) - momentum) * running_mean.data()[c] + momentum * m;
      running_var.data()[c] = (T(1) - momentum) * running_var.data()[c] + momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = running_mean.data()[c];
      inv_std[c] = T(1) / std::sqrt(running_var.data()[c] + eps);
    }
  }
  std::vector<T> xhat(x.numel()), y(x.numel());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t k = (b * C + c) * hw + i;
        xhat[k] = (x.data()[k] - mean[c]) * inv_std[c];
        y[k] = xhat[k] * gamma.data()[c] + beta.data()[c];
      }
  return make_result<T>(x.shape(), std::move(y), {&x, &gamma, &beta},
                        [B, C, hw, count, training, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& n) {
    Node<T>& px = *n.parents[0];
    Node<T>& pg = *n.parents[1];
    Node<T>& pb = *n.parents[2];
    std::vector<T> sum_dy(C, T(0)), sum_dy_xhat(C, T(0));
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < hw; ++i) {
          const std::size_t k = (b * C + c) * hw + i;
          sum_dy[c] += n.grad[k];
          sum_dy_xhat[c] += n.grad[k] * xhat[k];
        }
    if (pg.requires_grad) {
      auto& g = pg.ensure_grad();
      for (std::size_t c = 0; c < C; ++c) g[c] += sum_dy_xhat[c];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t c = 0; c < C; ++c) g[c] += sum_dy[c];
    }
    if (px.requires_grad) {
      auto& g = px.ensure_grad();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
          const T scale = pg.value[c] * inv_std[c];
          for (std::size_t i = 0; i < hw; ++i) {
            const std::size_t k = (b * C + c) * hw + i;
            if (training) {
              g[k] += scale * (n.grad[k] - sum_dy[c] / T(count) - xhat[k] * sum_dy_xhat[c] / T(count));
            } else {
              g[k] += scale * n.grad[k];
            }
          }
        }
    }
  });
}

/// Max pooling with -inf padding.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t kernel, std::size_t stride, std::size_t pad) {
  detail::require_shape(x.rank() == 4, "max_pool2d: expected [B,C,H,W]");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  detail::require_shape(H + 2 * pad >= kernel && W + 2 * pad >= kernel && stride > 0,
                        "max_pool2d: kernel does not fit input " + shape_str(x.shape()));
  const std::size_t Ho = (H + 2 * pad - kernel) / stride + 1, Wo = (W + 2 * pad - kernel) / stride + 1;
  std::vector<T> y(B * C * Ho * Wo);
  std::vector<std::size_t> arg(y.size());
  for (std::size_t p = 0; p < B * C; ++p) {
    const T* plane = x.data().data() + p * H * W;
    for (std::size_t oh = 0; oh < Ho; ++oh)
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_i = 0;
        for (std::size_t ki = 0; ki < kernel; ++ki) {
          const long ih = static_cast<long>(oh * stride + ki) - static_cast<long>(pad);
          if (ih < 0 || ih >= static_cast<long>(H)) continue;
          for (std::size_t kj = 0; kj < kernel; ++kj) {
            const long iw = static_cast<long>(ow * stride + kj) - static_cast<long>(pad);
            if (iw < 0 || iw >= static_cast<long>(W)) continue;
            const std::size_t i = static_cast<std::size_t>(ih) * W + static_cast<std::size_t>(iw);
            if (plane[i] > best) {
              best = plane[i];
              best_i = i;
            }
          }
        }
        const std::size_t o = (p * Ho + oh) * Wo + ow;
        y[o] = best;
        arg[o] = p * H * W + best_i;
      }
  }
  return make_result<T>({B, C, Ho, Wo}, std::move(y), {&x}, [arg = std::move(arg)](Node<T>& n) {
    auto& g = n.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < arg.size(); ++o) g[arg[o]] += n.grad[o];
  });
}

/// [B,C,H,W] -> [B,C] spatial mean.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require_shape(x.rank() == 4, "global_avg_pool: expected [B,C,H,W]");
  const std::size_t planes = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> y(planes);
  for (std::size_t p = 0; p < planes; ++p) {
    T s = 0;
    for (std::size_t i = 0; i < hw; ++i) s += x.data()[p * hw + i];
    y[p] = s / T(hw);
  }
  return make_result<T>({x.dim(0), x.dim(1)}, std::move(y), {&x}, [planes, hw](Node<T>& n) {
    auto& g = n.parents[0]->ensure_grad();
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t i = 0; i < hw; ++i) g[p * hw + i] += n.grad[p] / T(hw);
  });
}

/// Splits [B,C,H,W] into a rows x cols grid of spatial regions and averages
/// each one, giving [B, rows*cols, C] with regions in row-major order.
template <typename T>
Tensor<T> region_avg_pool(const Tensor<T>& x, std::size_t rows, std::size_t cols) {
  detail::require_shape(x.rank() == 4, "region_avg_pool: expected [B,C,H,W]");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (rows == 0 || cols == 0 || rows > H || cols > W) {
    throw ConfigError("region_avg_pool: a " + std::to_string(rows) + "x" + std::to_string(cols) +
                      " region grid does not fit a " + std::to_string(H) + "x" + std::to_string(W) + " map");
  }
  const std::size_t R = rows * cols;
  std::vector<T> y(B * R * C);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t r = 0; r < R; ++r) {
      const std::size_t y0 = (r / cols) * H / rows, y1 = (r / cols + 1) * H / rows;
      const std::size_t x0 = (r % cols) * W / cols, x1 = (r % cols + 1) * W / cols;
      const T area = T((y1 - y0) * (x1 - x0));
      for (std::size_t c = 0; c < C; ++c) {
        T s = 0;
        for (std::size_t i = y0; i < y1; ++i)
          for (std::size_t j = x0; j < x1; ++j) s += x.data()[((b * C + c) * H + i) * W + j];
        y[(b * R + r) * C + c] = s / area;
      }
    }
  return make_result<T>({B, R, C}, std::move(y), {&x}, [B, C, H, W, rows, cols](Node<T>& n) {
    auto& g = n.parents[0]->ensure_grad();
    const std::size_t R = rows * cols;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t r = 0; r < R; ++r) {
        const std::size_t y0 = (r / cols) * H / rows, y1 = (r / cols + 1) * H / rows;
        const std::size_t x0 = (r % cols) * W / cols, x1 = (r % cols + 1) * W / cols;
        const T area = T((y1 - y0) * (x1 - x0));
        for (std::size_t c = 0; c < C; ++c) {
          const T d = n.grad[(b * R + r) * C + c] / area;
          for (std::size_t i = y0; i < y1; ++i)
            for (std::size_t j = x0; j < x1; ++j) g[((b * C + c) * H + i) * W + j] += d;
        }
      }
  });
}

/// [B,N,D] -> [B,D] mean over the token axis.
template <typename T>
Tensor<T> mean_tokens(const Tensor<T>& x) {
  detail::require_shape(x.rank() == 3, "mean_tokens: expected [B,N,D]");
  const std::size_t B = x.dim(0), N = x.dim(1), D = x.dim(2);
  std::vector<T> y(B * D, T(0));
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < N; ++t)
      for (std::size_t d = 0; d < D; ++d) y[b * D + d] += x.data()[(b * N + t) * D + d];
  for (auto& v : y) v /= T(N);
  return make_result<T>({B, D}, std::move(y), {&x}, [B, N, D](Node<T>& n) {
    auto& g = n.parents[0]->ensure_grad();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < N; ++t)
        for (std::size_t d = 0; d < D; ++d) g[(b * N + t) * D + d] += n.grad[b * D + d] / T(N);
  });
}

/// Row-wise concatenation of 2-D tensors sharing the row count.
template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: nothing to concatenate");
  const std::size_t rows = parts.front().rank() == 2 ? parts.front().dim(0) : 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != rows) {
      throw ShapeError("concat_cols: batch sizes differ (" + shape_str(parts.front().shape()) + " vs " +
                       shape_str(p.shape()) + ")");
    }
    widths.push_back(p.dim(1));
  }
  const std::size_t total = std::accumulate(widths.begin(), widths.end(), std::size_t{0});
  std::vector<T> y(rows * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(parts[k].data().data() + r * widths[k], widths[k], y.data() + r * total + offset);
    offset += widths[k];
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = {rows, total};
  node->value = std::move(y);
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& p : parts) needs = needs || p.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const auto& p : parts) node->parents.push_back(p.node());
    node->backward_fn = [rows, total, widths](Node<T>& n) {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < widths.size(); ++k) {
        Node<T>& p = *n.parents[k];
        if (p.requires_grad) {
          auto& g = p.ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < widths[k]; ++c) g[r * widths[k] + c] += n.grad[r * total + offset + c];
        }
        offset += widths[k];
      }
    };
  }
  return Tensor<T>(std::move(node));
}

/// Inverted dropout; identity when not training or rate is zero.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, bool training, Rng* rng) {
  if (!training || rate <= 0.0) return x;
  if (rng == nullptr) throw ConfigError("dropout: training mode needs a random source");
  const T keep_scale = T(1.0 / (1.0 - rate));
  std::vector<T> mask(x.numel());
  for (auto& m : mask) m = uniform01(*rng) < rate ? T(0) : keep_scale;
  std::vector<T> y(x.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x.data()[i] * mask[i];
  return make_result<T>(x.shape(), std::move(y), {&x}, [mask = std::move(mask)](Node<T>& n) {
    auto& g = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * mask[i];
  });
}

/// Mean over the batch of -log softmax(logits)[label], via log-sum-exp.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> labels) {
  detail::require_shape(logits.rank() == 2 && logits.dim(0) == labels.size(),
                        "cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                            std::to_string(labels.size()) + " labels");
  const std::size_t B = logits.dim(0), C = logits.dim(1);
  std::vector<T> probs(B * C);
  T loss = 0;
  for (std::size_t b = 0; b < B; ++b) {
    if (labels[b] >= C) {
      throw IndexError("cross_entropy: label " + std::to_string(labels[b]) + " out of range for " +
                       std::to_string(C) + " classes");
    }
    const T* z = logits.data().data() + b * C;
    const T mx = *std::max_element(z, z + C);
    T sum = 0;
    for (std::size_t c = 0; c < C; ++c) sum += std::exp(z[c] - mx);
    const T lse = mx + std::log(sum);
    loss += lse - z[labels[b]];
    for (std::size_t c = 0; c < C; ++c) probs[b * C + c] = std::exp(z[c] - lse);
  }
  loss /= T(B);
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return make_result<T>({1}, {loss}, {&logits},
                        [B, C, probs = std::move(probs), lab = std::move(lab)](Node<T>& n) {
    auto& g = n.parents[0]->ensure_grad();
    const T scale = n.grad[0] / T(B);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        g[b * C + c] += scale * (probs[b * C + c] - (c == lab[b] ? T(1) : T(0)));
  });
}

/// Σ x_i·w_i against constant weights; a convenient scalar probe.
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& x, std::span<const T> weights) {
  detail::require_shape(weights.size() == x.numel(), "weighted_sum: weight count mismatch");
  T s = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) s += x.data()[i] * weights[i];
  std::vector<T> w(weights.begin(), weights.end());
  return make_result<T>({1}, {s}, {&x}, [w = std::move(w)](Node<T>& n) {
    auto& g = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < w.size(); ++i) g[i] += n.grad[0] * w[i];
  });
}

}  // namespace cer
