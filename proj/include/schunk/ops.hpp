#pragma once

// Differentiable operations over Tensor. Everything the encoder, the CTC head
// and the training loop need, and not much more: no general broadcasting.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "schunk/tensor.hpp"

namespace schunk {

/// Running count of multiply-accumulates executed by GEMM-backed ops on this
/// thread. Callers snapshot it before and after the region they measure.
inline std::uint64_t& mac_counter() {
  thread_local std::uint64_t count = 0;
  return count;
}

/// Boolean allowance grid applied by softmax_lastdim. Laid out as
/// groups × rows × cols; an input with B leading batches maps batch b to
/// group b / (B / groups).
struct MaskRef {
  std::span<const std::uint8_t> allow;
  std::size_t groups = 1;
  std::size_t rows = 0;
  std::size_t cols = 0;
};

namespace detail {

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using CMap = Eigen::Map<const MatR<T>>;
template <class T>
using MMap = Eigen::Map<MatR<T>>;

inline void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) +
                         " vs " + shape_str(b));
  }
}

inline std::size_t row_size(const Shape& s) {
  if (s.empty()) throw DimensionError("time op on a scalar");
  return s[0] == 0 ? 0 : numel(s) / s[0];
}

template <class T, class F, class D>
Tensor<T> unary(const Tensor<T>& x, F f, D df) {
  std::vector<T> out(x.size());
  const T* xs = x.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xs[i]);
  return make_result<T>(x.shape(), std::move(out), {&x}, [df](Node<T>& self) {
    T* g = parent_grad(self, 0);
    if (!g) return;
    const T* in = self.parents[0]->data.data();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      g[i] += self.grad[i] * df(in[i], self.data[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a.shape(), b.shape(), "add");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result<T>(a.shape(), std::move(out), {&a, &b},
                                [](detail::Node<T>& self) {
                                  for (std::size_t p = 0; p < 2; ++p) {
                                    T* g = detail::parent_grad(self, p);
                                    if (!g) continue;
                                    for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      g[i] += self.grad[i];
                                  }
                                });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result<T>(a.shape(), std::move(out), {&a, &b},
                                [](detail::Node<T>& self) {
                                  if (T* g = detail::parent_grad(self, 0))
                                    for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      g[i] += self.grad[i];
                                  if (T* g = detail::parent_grad(self, 1))
                                    for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      g[i] -= self.grad[i];
                                });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result<T>(a.shape(), std::move(out), {&a, &b},
                                [](detail::Node<T>& self) {
                                  const T* av = self.parents[0]->data.data();
                                  const T* bv = self.parents[1]->data.data();
                                  if (T* g = detail::parent_grad(self, 0))
                                    for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      g[i] += self.grad[i] * bv[i];
                                  if (T* g = detail::parent_grad(self, 1))
                                    for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      g[i] += self.grad[i] * av[i];
                                });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return detail::unary(
      x, [factor](T v) { return v * factor; },
      [factor](T, T) { return factor; });
}

/// Sum of all elements as a scalar.
template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.data()) total += v;
  return detail::make_result<T>({}, {total}, {&x}, [](detail::Node<T>& self) {
    T* g = detail::parent_grad(self, 0);
    if (!g) return;
    const std::size_t n = self.parents[0]->data.size();
    for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
  });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return v > T(0) ? v : T(0); },
      [](T in, T) { return in > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
      [](T, T y) { return y * (T(1) - y); });
}

/// x * sigmoid(x)
template <class T>
Tensor<T> silu(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return v / (T(1) + std::exp(-v)); },
      [](T v, T) {
        const T s = T(1) / (T(1) + std::exp(-v));
        return s * (T(1) + v * (T(1) - s));
      });
}

/// Exact GELU, x * Phi(x) with the erf form of the Gaussian CDF.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  return detail::unary(
      x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        return cdf + v * inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      });
}

/// log(exp(a) + exp(b)) elementwise; -inf inputs are handled without NaN.
template <class T>
Tensor<T> logaddexp(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a.shape(), b.shape(), "logaddexp");
  constexpr T ninf = -std::numeric_limits<T>::infinity();
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T m = std::max(a[i], b[i]);
    out[i] = m == ninf ? ninf
                       : m + std::log(std::exp(a[i] - m) + std::exp(b[i] - m));
  }
  return detail::make_result<T>(
      a.shape(), std::move(out), {&a, &b}, [](detail::Node<T>& self) {
        for (std::size_t p = 0; p < 2; ++p) {
          T* g = detail::parent_grad(self, p);
          if (!g) continue;
          const T* in = self.parents[p]->data.data();
          for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (self.data[i] == ninf) continue;
            g[i] += self.grad[i] * std::exp(in[i] - self.data[i]);
          }
        }
      });
}

/// out[i] = x[i - k] for i >= k, else `fill`; flat over all elements.
template <class T>
Tensor<T> shift_fill(const Tensor<T>& x, std::size_t k, T fill) {
  std::vector<T> out(x.size(), fill);
  for (std::size_t i = k; i < out.size(); ++i) out[i] = x[i - k];
  return detail::make_result<T>(x.shape(), std::move(out), {&x},
                                [k](detail::Node<T>& self) {
                                  T* g = detail::parent_grad(self, 0);
                                  if (!g) return;
                                  for (std::size_t i = k; i < self.grad.size(); ++i)
                                    g[i - k] += self.grad[i];
                                });
}

/// Picks x[row, idx[i]] for each i into a vector of length idx.size().
template <class T>
Tensor<T> gather_row(const Tensor<T>& x, std::size_t row,
                     const std::vector<std::size_t>& idx) {
  if (x.rank() != 2 || row >= x.dim(0)) {
    throw DimensionError("gather_row: bad row " + std::to_string(row) +
                         " for shape " + shape_str(x.shape()));
  }
  const std::size_t cols = x.dim(1);
  std::vector<T> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= cols) throw DimensionError("gather_row: column out of range");
    out[i] = x[row * cols + idx[i]];
  }
  return detail::make_result<T>(
      {idx.size()}, std::move(out), {&x}, [row, cols, idx](detail::Node<T>& self) {
        T* g = detail::parent_grad(self, 0);
        if (!g) return;
        for (std::size_t i = 0; i < idx.size(); ++i)
          g[row * cols + idx[i]] += self.grad[i];
      });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) +
                         " as " + shape_str(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return detail::make_result<T>(std::move(shape), std::move(out), {&x},
                                [](detail::Node<T>& self) {
                                  T* g = detail::parent_grad(self, 0);
                                  if (!g) return;
                                  for (std::size_t i = 0; i < self.grad.size(); ++i)
                                    g[i] += self.grad[i];
                                });
}

/// General axis permutation: out.shape[i] = x.shape[perm[i]].
template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) throw DimensionError("permute: rank mismatch");
  Shape out_shape(r);
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * x.dim(static_cast<int>(i));
  std::vector<std::size_t> src_stride(r);
  std::vector<bool> used(r, false);
  for (std::size_t i = 0; i < r; ++i) {
    if (perm[i] >= r || used[perm[i]]) throw DimensionError("permute: invalid axes");
    used[perm[i]] = true;
    out_shape[i] = x.shape()[perm[i]];
    src_stride[i] = in_stride[perm[i]];
  }
  // Flat index map from output position to input position.
  const std::size_t n = x.size();
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> counter(r, 0);
  std::size_t offset = 0;
  for (std::size_t o = 0; o < n; ++o) {
    src[o] = offset;
    for (std::size_t d = r; d-- > 0;) {
      if (++counter[d] < out_shape[d]) {
        offset += src_stride[d];
        break;
      }
      offset -= src_stride[d] * (out_shape[d] - 1);
      counter[d] = 0;
    }
  }
  std::vector<T> out(n);
  for (std::size_t o = 0; o < n; ++o) out[o] = x[src[o]];
  return detail::make_result<T>(std::move(out_shape), std::move(out), {&x},
                                [src = std::move(src)](detail::Node<T>& self) {
                                  T* g = detail::parent_grad(self, 0);
                                  if (!g) return;
                                  for (std::size_t o = 0; o < src.size(); ++o)
                                    g[src[o]] += self.grad[o];
                                });
}

template <class T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
  if (x.rank() < 2) throw DimensionError("transpose_last2 on rank < 2");
  std::vector<std::size_t> perm(x.rank());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return permute(x, perm);
}

/// Circular shift along the leading (time) axis, same convention as
/// torch.roll: out[p] = x[(p - offset) mod T]. A negative offset moves the
/// head to the tail.
template <class T>
Tensor<T> roll_time(const Tensor<T>& x, long offset) {
  const std::size_t steps = x.dim(0);
  const std::size_t row = detail::row_size(x.shape());
  if (steps == 0) return x;
  const long t = static_cast<long>(steps);
  const std::size_t k = static_cast<std::size_t>(((offset % t) + t) % t);
  std::vector<T> out(x.size());
  for (std::size_t p = 0; p < steps; ++p) {
    const std::size_t from = (p + steps - k) % steps;
    std::copy_n(x.ptr() + from * row, row, out.begin() + p * row);
  }
  return detail::make_result<T>(x.shape(), std::move(out), {&x},
                                [k, steps, row](detail::Node<T>& self) {
                                  T* g = detail::parent_grad(self, 0);
                                  if (!g) return;
                                  for (std::size_t p = 0; p < steps; ++p) {
                                    const std::size_t from = (p + steps - k) % steps;
                                    for (std::size_t c = 0; c < row; ++c)
                                      g[from * row + c] += self.grad[p * row + c];
                                  }
                                });
}

/// Rows [begin, end) of the leading axis.
template <class T>
Tensor<T> slice_time(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  if (begin > end || end > x.dim(0)) {
    throw DimensionError("slice_time: range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") outside " + shape_str(x.shape()));
  }
  const std::size_t row = detail::row_size(x.shape());
  Shape shape = x.shape();
  shape[0] = end - begin;
  std::vector<T> out(x.ptr() + begin * row, x.ptr() + end * row);
  return detail::make_result<T>(std::move(shape), std::move(out), {&x},
                                [begin, row](detail::Node<T>& self) {
                                  T* g = detail::parent_grad(self, 0);
                                  if (!g) return;
                                  for (std::size_t i = 0; i < self.grad.size(); ++i)
                                    g[begin * row + i] += self.grad[i];
                                });
}

template <class T>
Tensor<T> concat_time(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_time of nothing");
  Shape shape = parts[0].shape();
  shape[0] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != shape.size()) throw DimensionError("concat_time: rank mismatch");
    for (std::size_t d = 1; d < s.size(); ++d) {
      if (s[d] != shape[d]) {
        throw DimensionError("concat_time: " + shape_str(parts[0].shape()) +
                             " vs " + shape_str(s));
      }
    }
    shape[0] += s[0];
  }
  std::vector<T> out;
  out.reserve(numel(shape));
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return detail::make_result_n<T>(
      std::move(shape), std::move(out), parts,
      [offsets = std::move(offsets)](detail::Node<T>& self) {
        for (std::size_t p = 0; p < self.parents.size(); ++p) {
          T* g = detail::parent_grad(self, p);
          if (!g) continue;
          const std::size_t n = self.parents[p]->data.size();
          for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[offsets[p] + i];
        }
      });
}

// ---------------------------------------------------------------------------
// Contractions

/// a[..., m, k] x b[..., k, n]. `b` either carries the same leading batch
/// dims as `a` or is a plain matrix shared across the batch.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  auto fail = [&] {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  };
  if (a.rank() < 2 || b.rank() < 2) fail();
  const std::size_t m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  if (b.dim(-2) != k) fail();
  const std::size_t batch = a.size() / (m * k);
  const bool shared_b = b.rank() == 2;
  if (!shared_b) {
    if (b.rank() != a.rank()) fail();
    for (std::size_t d = 0; d + 2 < a.rank(); ++d)
      if (a.shape()[d] != b.shape()[d]) fail();
  }
  Shape shape = a.shape();
  shape.back() = n;
  std::vector<T> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    detail::CMap<T> am(a.ptr() + i * m * k, m, k);
    detail::CMap<T> bm(b.ptr() + (shared_b ? 0 : i * k * n), k, n);
    detail::MMap<T> cm(out.data() + i * m * n, m, n);
    cm.noalias() = am * bm;
  }
  mac_counter() += batch * m * k * n;
  return detail::make_result<T>(
      std::move(shape), std::move(out), {&a, &b},
      [batch, m, k, n, shared_b](detail::Node<T>& self) {
        const T* av = self.parents[0]->data.data();
        const T* bv = self.parents[1]->data.data();
        T* ga = detail::parent_grad(self, 0);
        T* gb = detail::parent_grad(self, 1);
        for (std::size_t i = 0; i < batch; ++i) {
          detail::CMap<T> dc(self.grad.data() + i * m * n, m, n);
          const std::size_t boff = shared_b ? 0 : i * k * n;
          if (ga) {
            detail::MMap<T> da(ga + i * m * k, m, k);
            da.noalias() += dc * detail::CMap<T>(bv + boff, k, n).transpose();
          }
          if (gb) {
            detail::MMap<T> db(gb + boff, k, n);
            db.noalias() += detail::CMap<T>(av + i * m * k, m, k).transpose() * dc;
          }
        }
      });
}

/// Affine projection over the last axis: x[..., in] w[in, out] + bias[out].
/// An undefined bias is treated as zero.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (weight.rank() != 2 || x.rank() < 1 || x.dim(-1) != weight.dim(0) ||
      (bias.defined() && bias.shape() != Shape{weight.dim(1)})) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + ", weight " +
                         shape_str(weight.shape()) + ", bias " +
                         (bias.defined() ? shape_str(bias.shape()) : "none"));
  }
  const std::size_t in = weight.dim(0), outd = weight.dim(1);
  const std::size_t rows = x.size() / in;
  Shape shape = x.shape();
  shape.back() = outd;
  std::vector<T> out(rows * outd);
  detail::MMap<T> om(out.data(), rows, outd);
  om.noalias() = detail::CMap<T>(x.ptr(), rows, in) * detail::CMap<T>(weight.ptr(), in, outd);
  if (bias.defined()) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < outd; ++c) out[r * outd + c] += bias[c];
  }
  mac_counter() += rows * in * outd;
  auto backward = [rows, in, outd](detail::Node<T>& self) {
    detail::CMap<T> dy(self.grad.data(), rows, outd);
    if (T* gx = detail::parent_grad(self, 0)) {
      detail::MMap<T>(gx, rows, in).noalias() +=
          dy * detail::CMap<T>(self.parents[1]->data.data(), in, outd).transpose();
    }
    if (T* gw = detail::parent_grad(self, 1)) {
      detail::MMap<T>(gw, in, outd).noalias() +=
          detail::CMap<T>(self.parents[0]->data.data(), rows, in).transpose() * dy;
    }
    if (self.parents.size() > 2) {
      if (T* gb = detail::parent_grad(self, 2)) {
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < outd; ++c) gb[c] += self.grad[r * outd + c];
      }
    }
  };
  if (bias.defined())
    return detail::make_result<T>(std::move(shape), std::move(out), {&x, &weight, &bias}, backward);
  return detail::make_result<T>(std::move(shape), std::move(out), {&x, &weight}, backward);
}

// ---------------------------------------------------------------------------
// Normalization

/// Softmax over the last axis. Masked entries get probability exactly 0; a
/// row with no allowed entry is all zeros.
template <class T>
Tensor<T> softmax_lastdim(const Tensor<T>& x, const MaskRef* mask = nullptr) {
  if (x.rank() < 1) throw DimensionError("softmax on a scalar");
  const std::size_t cols = x.dim(-1);
  const std::size_t rows = x.rank() >= 2 ? x.dim(-2) : 1;
  const std::size_t batch = cols == 0 ? 0 : x.size() / (rows * cols);
  std::size_t per_group = batch;
  if (mask) {
    if (mask->rows != rows || mask->cols != cols || mask->groups == 0 ||
        batch % mask->groups != 0 ||
        mask->allow.size() != mask->groups * rows * cols) {
      throw DimensionError("softmax: mask " + std::to_string(mask->groups) + "x" +
                           std::to_string(mask->rows) + "x" + std::to_string(mask->cols) +
                           " incompatible with " + shape_str(x.shape()));
    }
    per_group = batch / mask->groups;
  }
  std::vector<T> out(x.size(), T(0));
  for (std::size_t b = 0; b < batch; ++b) {
    const std::uint8_t* mb =
        mask ? mask->allow.data() + (b / per_group) * rows * cols : nullptr;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* in = x.ptr() + (b * rows + r) * cols;
      T* o = out.data() + (b * rows + r) * cols;
      const std::uint8_t* mr = mb ? mb + r * cols : nullptr;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t c = 0; c < cols; ++c)
        if (!mr || mr[c]) mx = std::max(mx, in[c]);
      if (mx == -std::numeric_limits<T>::infinity()) continue;
      T total = 0;
      for (std::size_t c = 0; c < cols; ++c) {
        if (mr && !mr[c]) continue;
        o[c] = std::exp(in[c] - mx);
        total += o[c];
      }
      for (std::size_t c = 0; c < cols; ++c) o[c] /= total;
    }
  }
  return detail::make_result<T>(x.shape(), std::move(out), {&x},
                                [cols](detail::Node<T>& self) {
                                  T* g = detail::parent_grad(self, 0);
                                  if (!g) return;
                                  const std::size_t nrows = self.data.size() / cols;
                                  for (std::size_t r = 0; r < nrows; ++r) {
                                    const T* p = self.data.data() + r * cols;
                                    const T* dy = self.grad.data() + r * cols;
                                    T dot = 0;
                                    for (std::size_t c = 0; c < cols; ++c) dot += p[c] * dy[c];
                                    for (std::size_t c = 0; c < cols; ++c)
                                      g[r * cols + c] += p[c] * (dy[c] - dot);
                                  }
                                });
}

template <class T>
Tensor<T> log_softmax(const Tensor<T>& x) {
  const std::size_t cols = x.dim(-1);
  const std::size_t nrows = cols == 0 ? 0 : x.size() / cols;
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < nrows; ++r) {
    const T* in = x.ptr() + r * cols;
    const T mx = *std::max_element(in, in + cols);
    T total = 0;
    for (std::size_t c = 0; c < cols; ++c) total += std::exp(in[c] - mx);
    const T lse = mx + std::log(total);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = in[c] - lse;
  }
  return detail::make_result<T>(x.shape(), std::move(out), {&x},
                                [cols, nrows](detail::Node<T>& self) {
                                  T* g = detail::parent_grad(self, 0);
                                  if (!g) return;
                                  for (std::size_t r = 0; r < nrows; ++r) {
                                    const T* y = self.data.data() + r * cols;
                                    const T* dy = self.grad.data() + r * cols;
                                    T total = 0;
                                    for (std::size_t c = 0; c < cols; ++c) total += dy[c];
                                    for (std::size_t c = 0; c < cols; ++c)
                                      g[r * cols + c] += dy[c] - std::exp(y[c]) * total;
                                  }
                                });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Per-row normalization over the last axis followed by gamma/beta.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
  const std::size_t c = x.dim(-1);
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw DimensionError("layer_norm: input " + shape_str(x.shape()) + ", gamma " +
                         shape_str(gamma.shape()) + ", beta " + shape_str(beta.shape()));
  }
  const std::size_t nrows = c == 0 ? 0 : x.size() / c;
  std::vector<T> out(x.size());
  std::vector<T> xhat(x.size());
  std::vector<T> rstd(nrows);
  for (std::size_t r = 0; r < nrows; ++r) {
    const T* in = x.ptr() + r * c;
    T mean = 0;
    for (std::size_t i = 0; i < c; ++i) mean += in[i];
    mean /= T(c);
    T var = 0;
    for (std::size_t i = 0; i < c; ++i) var += (in[i] - mean) * (in[i] - mean);
    var /= T(c);
    rstd[r] = T(1) / std::sqrt(var + T(kLayerNormEps));
    for (std::size_t i = 0; i < c; ++i) {
      const T h = (in[i] - mean) * rstd[r];
      xhat[r * c + i] = h;
      out[r * c + i] = h * gamma[i] + beta[i];
    }
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), {&x, &gamma, &beta},
      [c, nrows, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node<T>& self) {
        const T* gam = self.parents[1]->data.data();
        T* gx = detail::parent_grad(self, 0);
        T* gg = detail::parent_grad(self, 1);
        T* gb = detail::parent_grad(self, 2);
        for (std::size_t r = 0; r < nrows; ++r) {
          const T* dy = self.grad.data() + r * c;
          const T* h = xhat.data() + r * c;
          if (gg)
            for (std::size_t i = 0; i < c; ++i) gg[i] += dy[i] * h[i];
          if (gb)
            for (std::size_t i = 0; i < c; ++i) gb[i] += dy[i];
          if (gx) {
            T mean_d = 0, mean_dh = 0;
            for (std::size_t i = 0; i < c; ++i) {
              const T d = dy[i] * gam[i];
              mean_d += d;
              mean_dh += d * h[i];
            }
            mean_d /= T(c);
            mean_dh /= T(c);
            for (std::size_t i = 0; i < c; ++i)
              gx[r * c + i] += rstd[r] * (dy[i] * gam[i] - mean_d - h[i] * mean_dh);
          }
        }
      });
}

/// Gated linear unit over the last axis: first half * sigmoid(second half).
template <class T>
Tensor<T> glu(const Tensor<T>& x) {
  const std::size_t two_d = x.dim(-1);
  if (two_d % 2 != 0) throw DimensionError("glu: odd last dim in " + shape_str(x.shape()));
  const std::size_t d = two_d / 2;
  const std::size_t nrows = two_d == 0 ? 0 : x.size() / two_d;
  Shape shape = x.shape();
  shape.back() = d;
  std::vector<T> out(nrows * d);
  for (std::size_t r = 0; r < nrows; ++r)
    for (std::size_t i = 0; i < d; ++i) {
      const T a = x[r * two_d + i], b = x[r * two_d + d + i];
      out[r * d + i] = a / (T(1) + std::exp(-b));
    }
  return detail::make_result<T>(std::move(shape), std::move(out), {&x},
                                [d, nrows](detail::Node<T>& self) {
                                  T* g = detail::parent_grad(self, 0);
                                  if (!g) return;
                                  const T* in = self.parents[0]->data.data();
                                  for (std::size_t r = 0; r < nrows; ++r)
                                    for (std::size_t i = 0; i < d; ++i) {
                                      const T a = in[r * 2 * d + i];
                                      const T s = T(1) / (T(1) + std::exp(-in[r * 2 * d + d + i]));
                                      const T dy = self.grad[r * d + i];
                                      g[r * 2 * d + i] += dy * s;
                                      g[r * 2 * d + d + i] += dy * a * s * (T(1) - s);
                                    }
                                });
}

// ---------------------------------------------------------------------------
// Convolutions

/// 2-D convolution over a time-major input x[T, F, Cin] with kernel
/// [kh, kw, Cin, Cout] and bias [Cout]. Time is zero-padded on the left only
/// (`left_pad` rows); the feature axis is unpadded. Output is
/// [(T + left_pad - kh) / stride_t + 1, (F - kw) / stride_f + 1, Cout].
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                 std::size_t stride_t, std::size_t stride_f, std::size_t left_pad) {
  if (x.rank() != 3 || kernel.rank() != 4 || kernel.dim(2) != x.dim(2) ||
      bias.shape() != Shape{kernel.dim(3)} || stride_t == 0 || stride_f == 0) {
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + ", kernel " +
                         shape_str(kernel.shape()) + ", bias " + shape_str(bias.shape()));
  }
  const std::size_t steps = x.dim(0), feats = x.dim(1), cin = x.dim(2);
  const std::size_t kh = kernel.dim(0), kw = kernel.dim(1), cout = kernel.dim(3);
  if (steps + left_pad < kh || feats < kw) {
    throw DimensionError("conv2d: kernel " + shape_str(kernel.shape()) +
                         " larger than padded input " + shape_str(x.shape()) +
                         " (left_pad " + std::to_string(left_pad) + ")");
  }
  const std::size_t out_t = (steps + left_pad - kh) / stride_t + 1;
  const std::size_t out_f = (feats - kw) / stride_f + 1;
  const std::size_t patch = kh * kw * cin;
  const std::size_t npos = out_t * out_f;

  // cols[pos, (i, j, c)]; -1 marks a padded tap.
  std::vector<long> src(npos * patch, -1);
  for (std::size_t to = 0; to < out_t; ++to)
    for (std::size_t fo = 0; fo < out_f; ++fo)
      for (std::size_t i = 0; i < kh; ++i) {
        const long t = static_cast<long>(to * stride_t + i) - static_cast<long>(left_pad);
        if (t < 0) continue;
        for (std::size_t j = 0; j < kw; ++j)
          for (std::size_t c = 0; c < cin; ++c)
            src[(to * out_f + fo) * patch + (i * kw + j) * cin + c] =
                static_cast<long>((static_cast<std::size_t>(t) * feats + fo * stride_f + j) * cin + c);
      }
  std::vector<T> cols(npos * patch, T(0));
  for (std::size_t q = 0; q < cols.size(); ++q)
    if (src[q] >= 0) cols[q] = x[static_cast<std::size_t>(src[q])];

  std::vector<T> out(npos * cout);
  detail::MMap<T> om(out.data(), npos, cout);
  om.noalias() = detail::CMap<T>(cols.data(), npos, patch) *
                 detail::CMap<T>(kernel.ptr(), patch, cout);
  for (std::size_t p = 0; p < npos; ++p)
    for (std::size_t c = 0; c < cout; ++c) out[p * cout + c] += bias[c];
  mac_counter() += npos * patch * cout;

  return detail::make_result<T>(
      {out_t, out_f, cout}, std::move(out), {&x, &kernel, &bias},
      [npos, patch, cout, src = std::move(src), cols = std::move(cols)](detail::Node<T>& self) {
        detail::CMap<T> dy(self.grad.data(), npos, cout);
        if (T* gk = detail::parent_grad(self, 1)) {
          detail::MMap<T>(gk, patch, cout).noalias() +=
              detail::CMap<T>(cols.data(), npos, patch).transpose() * dy;
        }
        if (T* gb = detail::parent_grad(self, 2)) {
          for (std::size_t p = 0; p < npos; ++p)
            for (std::size_t c = 0; c < cout; ++c) gb[c] += self.grad[p * cout + c];
        }
        if (T* gx = detail::parent_grad(self, 0)) {
          std::vector<T> dcols(npos * patch);
          detail::MMap<T>(dcols.data(), npos, patch).noalias() =
              dy * detail::CMap<T>(self.parents[1]->data.data(), patch, cout).transpose();
          for (std::size_t q = 0; q < dcols.size(); ++q)
            if (src[q] >= 0) gx[static_cast<std::size_t>(src[q])] += dcols[q];
        }
      });
}

/// Per-channel convolution along time: x[T, C], kernel[K, C], bias[C].
/// out[t, c] = bias[c] + sum_i kernel[i, c] * x[t - left_pad + i, c], with
/// zeros for negative time. Output has T + left_pad - K + 1 rows.
template <class T>
Tensor<T> conv1d_depthwise(const Tensor<T>& x, const Tensor<T>& kernel,
                           const Tensor<T>& bias, std::size_t left_pad) {
  if (x.rank() != 2 || kernel.rank() != 2 || kernel.dim(1) != x.dim(1) ||
      bias.shape() != Shape{x.dim(1)}) {
    throw DimensionError("conv1d_depthwise: input " + shape_str(x.shape()) + ", kernel " +
                         shape_str(kernel.shape()) + ", bias " + shape_str(bias.shape()));
  }
  const std::size_t steps = x.dim(0), ch = x.dim(1), k = kernel.dim(0);
  if (steps + left_pad < k || steps == 0) {
    throw DimensionError("conv1d_depthwise: kernel length " + std::to_string(k) +
                         " larger than padded input of " + std::to_string(steps + left_pad));
  }
  const std::size_t out_t = steps + left_pad - k + 1;
  std::vector<T> out(out_t * ch);
  for (std::size_t t = 0; t < out_t; ++t)
    for (std::size_t c = 0; c < ch; ++c) {
      T acc = bias[c];
      for (std::size_t i = 0; i < k; ++i) {
        const long s = static_cast<long>(t + i) - static_cast<long>(left_pad);
        if (s >= 0) acc += kernel[i * ch + c] * x[static_cast<std::size_t>(s) * ch + c];
      }
      out[t * ch + c] = acc;
    }
  return detail::make_result<T>(
      {out_t, ch}, std::move(out), {&x, &kernel, &bias},
      [out_t, ch, k, left_pad](detail::Node<T>& self) {
        const T* xv = self.parents[0]->data.data();
        const T* kv = self.parents[1]->data.data();
        T* gx = detail::parent_grad(self, 0);
        T* gk = detail::parent_grad(self, 1);
        T* gb = detail::parent_grad(self, 2);
        for (std::size_t t = 0; t < out_t; ++t)
          for (std::size_t c = 0; c < ch; ++c) {
            const T dy = self.grad[t * ch + c];
            if (gb) gb[c] += dy;
            for (std::size_t i = 0; i < k; ++i) {
              const long s = static_cast<long>(t + i) - static_cast<long>(left_pad);
              if (s < 0) continue;
              const std::size_t xi = static_cast<std::size_t>(s) * ch + c;
              if (gx) gx[xi] += dy * kv[i * ch + c];
              if (gk) gk[i * ch + c] += dy * xv[xi];
            }
          }
      });
}

/// Causal variant: pads K - 1 zero frames on the past side only, so output
/// row t depends on input rows <= t. Output length equals input length.
template <class T>
Tensor<T> conv1d_depthwise_causal(const Tensor<T>& x, const Tensor<T>& kernel,
                                  const Tensor<T>& bias) {
  if (kernel.rank() != 2 || kernel.dim(0) == 0) {
    throw DimensionError("conv1d_depthwise_causal: bad kernel " + shape_str(kernel.shape()));
  }
  return conv1d_depthwise(x, kernel, bias, kernel.dim(0) - 1);
}

}  // namespace schunk
