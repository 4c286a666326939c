// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "tppt/autodiff/tensor.hpp"

namespace tppt::ad {

namespace detail {

inline Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                          std::string_view op, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (any) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (auto& t : inputs) node->parents.push_back(t.shared());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

inline void check_defined(const Tensor& t, std::string_view op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

// C (MxN) += op(A) * op(B) with op() an optional transpose; row-major storage.
inline void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                 const double* a, const double* b, double* c) {
  if (!trans_a && !trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      double* ci = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = a[i * k + p];
        if (av == 0.0) continue;
        const double* bp = b + p * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
      }
    }
  } else if (!trans_a && trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      const double* ai = a + i * k;
      for (std::size_t j = 0; j < n; ++j) {
        const double* bj = b + j * k;
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
        c[i * n + j] += acc;
      }
    }
  } else if (trans_a && !trans_b) {
    for (std::size_t p = 0; p < k; ++p) {
      const double* ap = a + p * m;
      const double* bp = b + p * n;
      for (std::size_t i = 0; i < m; ++i) {
        const double av = ap[i];
        if (av == 0.0) continue;
        double* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += a[p * m + i] * b[j * k + p];
        c[i * n + j] += acc;
      }
  }
}

// b broadcasts against a when b's shape equals a trailing block of a's shape.
inline bool is_suffix(const Shape& big, const Shape& small) {
  if (small.size() > big.size()) return false;
  return std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()));
}

struct AxisSplit {
  std::size_t outer, len, inner;
};

inline std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range");
  return static_cast<std::size_t>(a);
}

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

enum class Binary { add, sub, mul, div };

inline Tensor binary(const Tensor& a, const Tensor& b, Binary kind, std::string_view name) {
  check_defined(a, name);
  check_defined(b, name);
  if (!is_suffix(a.shape(), b.shape())) {
    throw ShapeError(std::string(name) + ": shape " + to_string(b.shape()) +
                     " does not broadcast against " + to_string(a.shape()));
  }
  const std::size_t n = a.numel();
  const std::size_t inner = b.numel();
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = av[i];
    const double y = bv[i % inner];
    switch (kind) {
      case Binary::add: out[i] = x + y; break;
      case Binary::sub: out[i] = x - y; break;
      case Binary::mul: out[i] = x * y; break;
      case Binary::div: out[i] = x / y; break;
    }
  }
  return make_result(a.shape(), std::move(out), {a, b}, name, [kind, n, inner](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const auto& g = self.grad;
    if (pa.requires_grad) {
      auto& ga = pa.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        switch (kind) {
          case Binary::add:
          case Binary::sub: ga[i] += g[i]; break;
          case Binary::mul: ga[i] += g[i] * pb.value[i % inner]; break;
          case Binary::div: ga[i] += g[i] / pb.value[i % inner]; break;
        }
      }
    }
    if (pb.requires_grad) {
      auto& gb = pb.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = i % inner;
        switch (kind) {
          case Binary::add: gb[j] += g[i]; break;
          case Binary::sub: gb[j] -= g[i]; break;
          case Binary::mul: gb[j] += g[i] * pa.value[i]; break;
          case Binary::div: {
            const double y = pb.value[j];
            gb[j] -= g[i] * pa.value[i] / (y * y);
            break;
          }
        }
      }
    }
  });
}

template <class F, class DF>
Tensor unary(const Tensor& a, std::string_view name, F f, DF df) {
  check_defined(a, name);
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  return make_result(a.shape(), std::move(out), {a}, name, [df](Node& self) {
    Node& p = *self.parents[0];
    auto& gp = p.ensure_grad();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i] * df(p.value[i], self.value[i]);
  });
}

}  // namespace detail

// ---- elementwise -----------------------------------------------------------

/// Elementwise sum; `b` may be a trailing-suffix broadcast of `a` (bias rows).
inline Tensor add(const Tensor& a, const Tensor& b) {
  if (detail::is_suffix(a.shape(), b.shape())) return detail::binary(a, b, detail::Binary::add, "add");
  return detail::binary(b, a, detail::Binary::add, "add");
}
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::Binary::sub, "sub"); }
inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (detail::is_suffix(a.shape(), b.shape())) return detail::binary(a, b, detail::Binary::mul, "mul");
  return detail::binary(b, a, detail::Binary::mul, "mul");
}
inline Tensor div(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::Binary::div, "div"); }

inline Tensor scale(const Tensor& a, double s) {
  return detail::unary(a, "scale", [s](double x) { return s * x; }, [s](double, double) { return s; });
}
inline Tensor add_scalar(const Tensor& a, double s) {
  return detail::unary(a, "add_scalar", [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}
inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor exp(const Tensor& a) {
  return detail::unary(a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}
inline Tensor log(const Tensor& a) {
  return detail::unary(a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}
inline Tensor square(const Tensor& a) {
  return detail::unary(a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

/// tanh-approximated GELU.
inline Tensor gelu(const Tensor& a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return detail::unary(
      a, "gelu",
      [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x))); },
      [](double x, double) {
        const double u = c * (x + 0.044715 * x * x * x);
        const double t = std::tanh(u);
        const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      });
}

// ---- linear algebra --------------------------------------------------------

/// [..., m, k] x [k, n] -> [..., m, n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::check_defined(a, "matmul");
  detail::check_defined(b, "matmul");
  if (a.rank() < 1 || b.rank() != 2 || a.dim(-1) != b.dim(0)) {
    throw ShapeError("matmul: cannot multiply " + to_string(a.shape()) + " by " + to_string(b.shape()));
  }
  const std::size_t k = b.dim(0), n = b.dim(1), rows = a.numel() / k;
  Shape out_shape = a.shape();
  out_shape.back() = n;
  std::vector<double> out(rows * n, 0.0);
  detail::gemm(false, false, rows, n, k, a.data().data(), b.data().data(), out.data());
  return detail::make_result(std::move(out_shape), std::move(out), {a, b}, "matmul",
                             [rows, n, k](Node& self) {
                               Node& pa = *self.parents[0];
                               Node& pb = *self.parents[1];
                               if (pa.requires_grad)
                                 detail::gemm(false, true, rows, k, n, self.grad.data(), pb.value.data(),
                                              pa.ensure_grad().data());
                               if (pb.requires_grad)
                                 detail::gemm(true, false, k, n, rows, pa.value.data(), self.grad.data(),
                                              pb.ensure_grad().data());
                             });
}

/// Batched product over matching leading dims: [B..., m, k] x [B..., k, n].
inline Tensor bmm(const Tensor& a, const Tensor& b) {
  detail::check_defined(a, "bmm");
  detail::check_defined(b, "bmm");
  const bool ok = a.rank() >= 3 && a.rank() == b.rank() &&
                  std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()) &&
                  a.dim(-1) == b.dim(-2);
  if (!ok) throw ShapeError("bmm: cannot multiply " + to_string(a.shape()) + " by " + to_string(b.shape()));
  const std::size_t m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  const std::size_t batch = a.numel() / (m * k);
  Shape out_shape = a.shape();
  out_shape.back() = n;
  std::vector<double> out(batch * m * n, 0.0);
  for (std::size_t s = 0; s < batch; ++s)
    detail::gemm(false, false, m, n, k, a.data().data() + s * m * k, b.data().data() + s * k * n,
                 out.data() + s * m * n);
  return detail::make_result(std::move(out_shape), std::move(out), {a, b}, "bmm",
                             [batch, m, n, k](Node& self) {
                               Node& pa = *self.parents[0];
                               Node& pb = *self.parents[1];
                               for (std::size_t s = 0; s < batch; ++s) {
                                 const double* g = self.grad.data() + s * m * n;
                                 if (pa.requires_grad)
                                   detail::gemm(false, true, m, k, n, g, pb.value.data() + s * k * n,
                                                pa.ensure_grad().data() + s * m * k);
                                 if (pb.requires_grad)
                                   detail::gemm(true, false, k, n, m, pa.value.data() + s * m * k, g,
                                                pb.ensure_grad().data() + s * k * n);
                               }
                             });
}

// ---- shape manipulation ----------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
  detail::check_defined(a, "reshape");
  if (numel(shape) != a.numel()) {
    throw ShapeError("reshape: " + to_string(a.shape()) + " -> " + to_string(shape));
  }
  return detail::make_result(std::move(shape), a.to_vector(), {a}, "reshape", [](Node& self) {
    auto& gp = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i];
  });
}

/// General axis permutation: out.shape[i] = in.shape[perm[i]].
inline Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm) {
  detail::check_defined(a, "permute");
  const std::size_t r = a.rank();
  std::vector<bool> used(r, false);
  if (perm.size() != r) throw ShapeError("permute: rank mismatch");
  for (auto p : perm) {
    if (p >= r || used[p]) throw ShapeError("permute: invalid permutation");
    used[p] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = a.shape()[perm[i]];
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * a.shape()[i];
  // src_index[j] = flat input offset of flat output position j
  const std::size_t n = a.numel();
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t j = 0; j < n; ++j) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < r; ++i) off += idx[i] * in_strides[perm[i]];
    src[j] = off;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  std::vector<double> out(n);
  const auto av = a.data();
  for (std::size_t j = 0; j < n; ++j) out[j] = av[src[j]];
  return detail::make_result(std::move(out_shape), std::move(out), {a}, "permute",
                             [src = std::move(src)](Node& self) {
                               auto& gp = self.parents[0]->ensure_grad();
                               for (std::size_t j = 0; j < src.size(); ++j) gp[src[j]] += self.grad[j];
                             });
}

/// Swap the last two axes.
inline Tensor transpose(const Tensor& a) {
  if (a.rank() < 2) throw ShapeError("transpose: rank < 2");
  std::vector<std::size_t> perm(a.rank());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[a.rank() - 1], perm[a.rank() - 2]);
  return permute(a, perm);
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  for (const auto& p : parts) detail::check_defined(p, "concat");
  const std::size_t ax = detail::normalize_axis(axis, parts[0].rank());
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  std::vector<std::size_t> lens;
  for (const auto& p : parts) {
    bool same = p.rank() == out_shape.size();
    for (std::size_t i = 0; same && i < out_shape.size(); ++i)
      if (i != ax && p.shape()[i] != out_shape[i]) same = false;
    if (!same) throw ShapeError("concat: incompatible shape " + to_string(p.shape()));
    lens.push_back(p.shape()[ax]);
    out_shape[ax] += p.shape()[ax];
  }
  const auto split = detail::split_at(out_shape, ax);
  std::vector<double> out(numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto pv = parts[k].data();
    const std::size_t block = lens[k] * split.inner;
    for (std::size_t o = 0; o < split.outer; ++o)
      std::copy_n(pv.data() + o * block, block, out.data() + o * split.len * split.inner + offset);
    offset += block;
  }
  return detail::make_result(std::move(out_shape), std::move(out), parts, "concat",
                             [lens, split](Node& self) {
                               std::size_t offset = 0;
                               for (std::size_t k = 0; k < lens.size(); ++k) {
                                 Node& p = *self.parents[k];
                                 const std::size_t block = lens[k] * split.inner;
                                 if (p.requires_grad) {
                                   auto& gp = p.ensure_grad();
                                   for (std::size_t o = 0; o < split.outer; ++o) {
                                     const double* g = self.grad.data() + o * split.len * split.inner + offset;
                                     double* d = gp.data() + o * block;
                                     for (std::size_t i = 0; i < block; ++i) d[i] += g[i];
                                   }
                                 }
                                 offset += block;
                               }
                             });
}

/// Contiguous range [start, start+len) along `axis`.
inline Tensor slice(const Tensor& a, int axis, std::size_t start, std::size_t len) {
  detail::check_defined(a, "slice");
  const std::size_t ax = detail::normalize_axis(axis, a.rank());
  if (start + len > a.shape()[ax]) {
    throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                     ") exceeds axis of " + to_string(a.shape()));
  }
  const auto split = detail::split_at(a.shape(), ax);
  Shape out_shape = a.shape();
  out_shape[ax] = len;
  std::vector<double> out(numel(out_shape));
  const std::size_t block = len * split.inner;
  const auto av = a.data();
  for (std::size_t o = 0; o < split.outer; ++o)
    std::copy_n(av.data() + o * split.len * split.inner + start * split.inner, block, out.data() + o * block);
  return detail::make_result(std::move(out_shape), std::move(out), {a}, "slice",
                             [split, start, block](Node& self) {
                               auto& gp = self.parents[0]->ensure_grad();
                               for (std::size_t o = 0; o < split.outer; ++o) {
                                 double* d = gp.data() + o * split.len * split.inner + start * split.inner;
                                 const double* g = self.grad.data() + o * block;
                                 for (std::size_t i = 0; i < block; ++i) d[i] += g[i];
                               }
                             });
}

/// Gather along axis 0; repeated indices accumulate in the backward pass.
inline Tensor index_select(const Tensor& a, const std::vector<std::size_t>& rows) {
  detail::check_defined(a, "index_select");
  if (a.rank() < 1) throw ShapeError("index_select: scalar input");
  const std::size_t n0 = a.dim(0);
  const std::size_t row = a.numel() / std::max<std::size_t>(n0, 1);
  for (auto r : rows)
    if (r >= n0) throw ShapeError("index_select: row " + std::to_string(r) + " out of range");
  Shape out_shape = a.shape();
  out_shape[0] = rows.size();
  std::vector<double> out(rows.size() * row);
  const auto av = a.data();
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(av.data() + rows[i] * row, row, out.data() + i * row);
  return detail::make_result(std::move(out_shape), std::move(out), {a}, "index_select",
                             [rows, row](Node& self) {
                               auto& gp = self.parents[0]->ensure_grad();
                               for (std::size_t i = 0; i < rows.size(); ++i) {
                                 const double* g = self.grad.data() + i * row;
                                 double* d = gp.data() + rows[i] * row;
                                 for (std::size_t j = 0; j < row; ++j) d[j] += g[j];
                               }
                             });
}

// ---- reductions ------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  detail::check_defined(a, "sum");
  double s = 0.0;
  for (double x : a.data()) s += x;
  return detail::make_result({}, {s}, {a}, "sum", [](Node& self) {
    auto& gp = self.parents[0]->ensure_grad();
    const double g = self.grad[0];
    for (double& v : gp) v += g;
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ContractError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

/// Sum over one axis, which is removed from the shape.
inline Tensor sum(const Tensor& a, int axis) {
  detail::check_defined(a, "sum");
  const std::size_t ax = detail::normalize_axis(axis, a.rank());
  const auto s = detail::split_at(a.shape(), ax);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  std::vector<double> out(s.outer * s.inner, 0.0);
  const auto av = a.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t l = 0; l < s.len; ++l)
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += av[(o * s.len + l) * s.inner + i];
  return detail::make_result(std::move(out_shape), std::move(out), {a}, "sum_axis", [s](Node& self) {
    auto& gp = self.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t l = 0; l < s.len; ++l)
        for (std::size_t i = 0; i < s.inner; ++i) gp[(o * s.len + l) * s.inner + i] += self.grad[o * s.inner + i];
  });
}

/// Euclidean norm over the last axis (removed from the shape).
inline Tensor norm(const Tensor& a) {
  detail::check_defined(a, "norm");
  if (a.rank() < 1) throw ShapeError("norm: scalar input");
  const std::size_t d = a.dim(-1), rows = a.numel() / d;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  std::vector<double> out(rows);
  const auto av = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += av[r * d + j] * av[r * d + j];
    out[r] = std::sqrt(s);
  }
  return detail::make_result(std::move(out_shape), std::move(out), {a}, "norm", [d, rows](Node& self) {
    Node& p = *self.parents[0];
    auto& gp = p.ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double nrm = self.value[r];
      if (nrm == 0.0) continue;  // subgradient 0 at the origin
      const double g = self.grad[r] / nrm;
      for (std::size_t j = 0; j < d; ++j) gp[r * d + j] += g * p.value[r * d + j];
    }
  });
}

// ---- normalizations --------------------------------------------------------

inline Tensor softmax(const Tensor& a, int axis = -1) {
  detail::check_defined(a, "softmax");
  const auto s = detail::split_at(a.shape(), detail::normalize_axis(axis, a.rank()));
  const auto av = a.data();
  std::vector<double> out(a.numel());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < s.len; ++l) mx = std::max(mx, av[base + l * s.inner]);
      double z = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) z += (out[base + l * s.inner] = std::exp(av[base + l * s.inner] - mx));
      for (std::size_t l = 0; l < s.len; ++l) out[base + l * s.inner] /= z;
    }
  return detail::make_result(a.shape(), std::move(out), {a}, "softmax", [s](Node& self) {
    auto& gp = self.parents[0]->ensure_grad();
    const auto& y = self.value;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.len * s.inner + i;
        double dot = 0.0;
        for (std::size_t l = 0; l < s.len; ++l) dot += g[base + l * s.inner] * y[base + l * s.inner];
        for (std::size_t l = 0; l < s.len; ++l) {
          const std::size_t k = base + l * s.inner;
          gp[k] += y[k] * (g[k] - dot);
        }
      }
  });
}

inline Tensor log_softmax(const Tensor& a, int axis = -1) {
  detail::check_defined(a, "log_softmax");
  const auto s = detail::split_at(a.shape(), detail::normalize_axis(axis, a.rank()));
  const auto av = a.data();
  std::vector<double> out(a.numel());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < s.len; ++l) mx = std::max(mx, av[base + l * s.inner]);
      double z = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) z += std::exp(av[base + l * s.inner] - mx);
      const double lse = mx + std::log(z);
      for (std::size_t l = 0; l < s.len; ++l) out[base + l * s.inner] = av[base + l * s.inner] - lse;
    }
  return detail::make_result(a.shape(), std::move(out), {a}, "log_softmax", [s](Node& self) {
    auto& gp = self.parents[0]->ensure_grad();
    const auto& y = self.value;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.len * s.inner + i;
        double gs = 0.0;
        for (std::size_t l = 0; l < s.len; ++l) gs += g[base + l * s.inner];
        for (std::size_t l = 0; l < s.len; ++l) {
          const std::size_t k = base + l * s.inner;
          gp[k] += g[k] - std::exp(y[k]) * gs;
        }
      }
  });
}

/// Layer normalization over the last axis with affine gain/bias of shape [D].
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  detail::check_defined(x, "layer_norm");
  const std::size_t d = x.dim(-1);
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw ShapeError("layer_norm: affine params must have shape [" + std::to_string(d) + "]");
  }
  const std::size_t rows = x.numel() / d;
  std::vector<double> xhat(x.numel()), inv_std(rows), out(x.numel());
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mu) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), {x, gamma, beta}, "layer_norm",
      [d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        Node& px = *self.parents[0];
        Node& pg = *self.parents[1];
        Node& pb = *self.parents[2];
        const auto& g = self.grad;
        if (pg.requires_grad) {
          auto& gg = pg.ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
        }
        if (pb.requires_grad) {
          auto& gb = pb.ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
        }
        if (px.requires_grad) {
          auto& gx = px.ensure_grad();
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double gh = g[r * d + j] * pg.value[j];
              m1 += gh;
              m2 += gh * xhat[r * d + j];
            }
            m1 *= inv_d;
            m2 *= inv_d;
            for (std::size_t j = 0; j < d; ++j) {
              const double gh = g[r * d + j] * pg.value[j];
              gx[r * d + j] += inv_std[r] * (gh - m1 - xhat[r * d + j] * m2);
            }
          }
        }
      });
}

/// Rows scaled to unit Euclidean norm over the last axis. A zero row is a contract error.
inline Tensor l2_normalize(const Tensor& a) {
  detail::check_defined(a, "l2_normalize");
  if (a.rank() < 1) throw ShapeError("l2_normalize: scalar input");
  const std::size_t d = a.dim(-1), rows = a.numel() / d;
  std::vector<double> out(a.numel()), norms(rows);
  const auto av = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += av[r * d + j] * av[r * d + j];
    if (s == 0.0) throw ContractError("l2_normalize: zero vector at row " + std::to_string(r));
    norms[r] = std::sqrt(s);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = av[r * d + j] / norms[r];
  }
  return detail::make_result(a.shape(), std::move(out), {a}, "l2_normalize",
                             [d, rows, norms = std::move(norms)](Node& self) {
                               auto& gp = self.parents[0]->ensure_grad();
                               const auto& y = self.value;
                               const auto& g = self.grad;
                               for (std::size_t r = 0; r < rows; ++r) {
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < d; ++j) dot += y[r * d + j] * g[r * d + j];
                                 for (std::size_t j = 0; j < d; ++j)
                                   gp[r * d + j] += (g[r * d + j] - y[r * d + j] * dot) / norms[r];
                               }
                             });
}

}  // namespace tppt::ad
