#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mlcn/tensor.hpp"

namespace mlcn {

namespace detail {

/// Maps every output element of a broadcast binary op to its operand
/// elements. Operands follow right-aligned broadcasting (size-1 dims stretch).
struct BroadcastPlan {
  enum class Kind { kSame, kScalarB, kScalarA, kSuffixB, kGeneral };
  Kind kind = Kind::kSame;
  Shape out;
  std::vector<std::size_t> ia, ib;

  BroadcastPlan(const Shape& a, const Shape& b) {
    if (a == b) {
      out = a;
      return;
    }
    const std::size_t sa = shape_size(a), sb = shape_size(b);
    if (sb == 1) {
      kind = Kind::kScalarB;
      out = a;
      return;
    }
    if (sa == 1) {
      kind = Kind::kScalarA;
      out = b;
      return;
    }
    if (b.size() <= a.size() && std::equal(b.begin(), b.end(), a.end() - static_cast<std::ptrdiff_t>(b.size()))) {
      kind = Kind::kSuffixB;
      out = a;
      return;
    }
    kind = Kind::kGeneral;
    const std::size_t r = std::max(a.size(), b.size());
    Shape pa(r, 1), pb(r, 1);
    std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(r - a.size()));
    std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(r - b.size()));
    out.resize(r);
    for (std::size_t i = 0; i < r; ++i) {
      if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
        throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
      }
      out[i] = std::max(pa[i], pb[i]);
    }
    std::vector<std::size_t> stra(r), strb(r);
    std::size_t acc_a = 1, acc_b = 1;
    for (std::size_t i = r; i-- > 0;) {
      stra[i] = pa[i] == 1 ? 0 : acc_a;
      strb[i] = pb[i] == 1 ? 0 : acc_b;
      acc_a *= pa[i];
      acc_b *= pb[i];
    }
    const std::size_t n = shape_size(out);
    ia.resize(n);
    ib.resize(n);
    std::vector<std::size_t> idx(r, 0);
    std::size_t oa = 0, ob = 0;
    for (std::size_t k = 0; k < n; ++k) {
      ia[k] = oa;
      ib[k] = ob;
      for (std::size_t d = r; d-- > 0;) {
        if (++idx[d] < out[d]) {
          oa += stra[d];
          ob += strb[d];
          break;
        }
        oa -= stra[d] * (out[d] - 1);
        ob -= strb[d] * (out[d] - 1);
        idx[d] = 0;
      }
    }
  }

  std::size_t a_index(std::size_t k, std::size_t) const {
    switch (kind) {
      case Kind::kScalarA: return 0;
      case Kind::kGeneral: return ia[k];
      default: return k;
    }
  }
  std::size_t b_index(std::size_t k, std::size_t b_size) const {
    switch (kind) {
      case Kind::kSame: return k;
      case Kind::kScalarB: return 0;
      case Kind::kScalarA: return k;
      case Kind::kSuffixB: return k % b_size;
      case Kind::kGeneral: return ib[k];
    }
    return k;
  }
};

template <std::floating_point T, class F, class DA, class DB>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, const char* name, F f, DA da, DB db) {
  auto plan = std::make_shared<BroadcastPlan>(a.shape(), b.shape());
  const std::size_t n = shape_size(plan->out);
  const std::size_t bs = b.size();
  auto av = a.values();
  auto bv = b.values();
  std::vector<T> out(n);
  for (std::size_t k = 0; k < n; ++k) out[k] = f(av[plan->a_index(k, 0)], bv[plan->b_index(k, bs)]);
  return Tensor<T>::from_op(plan->out, std::move(out), name, {a, b},
                            [plan, bs, da, db](const detail::Node<T>& self, std::span<const T> g, std::span<std::span<T>> gi) {
                              const auto& pa = self.parents[0]->values;
                              const auto& pb = self.parents[1]->values;
                              for (std::size_t k = 0; k < g.size(); ++k) {
                                const std::size_t i = plan->a_index(k, 0), j = plan->b_index(k, bs);
                                if (!gi[0].empty()) gi[0][i] += g[k] * da(pa[i], pb[j], self.values[k]);
                                if (!gi[1].empty()) gi[1][j] += g[k] * db(pa[i], pb[j], self.values[k]);
                              }
                            });
}

template <std::floating_point T, class F, class DF>
Tensor<T> unary_op(const Tensor<T>& a, const char* name, F f, DF df) {
  auto av = a.values();
  std::vector<T> out(av.size());
  for (std::size_t k = 0; k < av.size(); ++k) out[k] = f(av[k]);
  return Tensor<T>::from_op(a.shape(), std::move(out), name, {a},
                            [df](const detail::Node<T>& self, std::span<const T> g, std::span<std::span<T>> gi) {
                              const auto& x = self.parents[0]->values;
                              for (std::size_t k = 0; k < g.size(); ++k) gi[0][k] += g[k] * df(x[k], self.values[k]);
                            });
}

/// Splits a shape around `axis` into (outer, axis length, inner).
inline std::array<std::size_t, 3> axis_split(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  return {outer, s[axis], inner};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <std::floating_point T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(1); });
}

template <std::floating_point T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(-1); });
}

template <std::floating_point T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y, T) { return y; }, [](T x, T, T) { return x; });
}

template <std::floating_point T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, "div", [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
      [](T, T y, T o) { return -o / y; });
}

template <std::floating_point T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return detail::unary_op(a, "scale", [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <std::floating_point T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return detail::unary_op(a, "add_scalar", [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <std::floating_point T>
Tensor<T> neg(const Tensor<T>& a) {
  return scale(a, T(-1));
}

template <std::floating_point T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::unary_op(a, "exp", [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <std::floating_point T>
Tensor<T> log(const Tensor<T>& a) {
  for (T v : a.values()) {
    if (!(v > T(0))) throw NumericError("log of non-positive value");
  }
  return detail::unary_op(a, "log", [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <std::floating_point T>
Tensor<T> sqrt(const Tensor<T>& a) {
  for (T v : a.values()) {
    if (v < T(0)) throw NumericError("sqrt of negative value");
  }
  return detail::unary_op(a, "sqrt", [](T x) { return std::sqrt(x); }, [](T, T y) { return T(0.5) / y; });
}

template <std::floating_point T>
Tensor<T> square(const Tensor<T>& a) {
  return detail::unary_op(a, "square", [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <std::floating_point T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary_op(
      a, "relu", [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Reductions and shape manipulation

template <std::floating_point T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.values()) acc += v;
  return Tensor<T>::from_op(Shape{1}, {acc}, "sum", {a},
                            [](const detail::Node<T>&, std::span<const T> g, std::span<std::span<T>> gi) {
                              for (auto& x : gi[0]) x += g[0];
                            });
}

template <std::floating_point T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

/// Sum along `axis`; the axis is removed unless `keepdims`.
template <std::floating_point T>
Tensor<T> sum(const Tensor<T>& a, std::size_t axis, bool keepdims = false) {
  const auto [outer, n, inner] = detail::axis_split(a.shape(), axis);
  Shape s = a.shape();
  if (keepdims) {
    s[axis] = 1;
  } else {
    s.erase(s.begin() + static_cast<std::ptrdiff_t>(axis));
    if (s.empty()) s = {1};
  }
  auto av = a.values();
  std::vector<T> out(outer * inner, T(0));
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < n; ++j) {
      const T* src = &av[(o * n + j) * inner];
      T* dst = &out[o * inner];
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  return Tensor<T>::from_op(std::move(s), std::move(out), "sum_axis", {a},
                            [outer, n, inner](const detail::Node<T>&, std::span<const T> g, std::span<std::span<T>> gi) {
                              for (std::size_t o = 0; o < outer; ++o)
                                for (std::size_t j = 0; j < n; ++j)
                                  for (std::size_t i = 0; i < inner; ++i)
                                    gi[0][(o * n + j) * inner + i] += g[o * inner + i];
                            });
}

template <std::floating_point T>
Tensor<T> mean(const Tensor<T>& a, std::size_t axis, bool keepdims = false) {
  const T n = static_cast<T>(a.shape().at(axis));
  return scale(sum(a, axis, keepdims), T(1) / n);
}

template <std::floating_point T>
Tensor<T> reshape(const Tensor<T>& a, Shape s) {
  if (shape_size(s) != a.size()) {
    throw ShapeError("cannot reshape " + shape_str(a.shape()) + " to " + shape_str(s));
  }
  std::vector<T> v(a.values().begin(), a.values().end());
  return Tensor<T>::from_op(std::move(s), std::move(v), "reshape", {a},
                            [](const detail::Node<T>&, std::span<const T> g, std::span<std::span<T>> gi) {
                              for (std::size_t k = 0; k < g.size(); ++k) gi[0][k] += g[k];
                            });
}

template <std::floating_point T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw ShapeError("transpose expects a matrix, got " + shape_str(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  auto av = a.values();
  std::vector<T> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  return Tensor<T>::from_op(Shape{c, r}, std::move(out), "transpose", {a},
                            [r, c](const detail::Node<T>&, std::span<const T> g, std::span<std::span<T>> gi) {
                              for (std::size_t i = 0; i < r; ++i)
                                for (std::size_t j = 0; j < c; ++j) gi[0][i * c + j] += g[j * r + i];
                            });
}

/// Rows [begin, end) along the leading axis.
template <std::floating_point T>
Tensor<T> slice(const Tensor<T>& a, std::size_t begin, std::size_t end) {
  if (begin >= end || end > a.dim(0)) {
    throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range for " +
                     shape_str(a.shape()));
  }
  const std::size_t row = a.size() / a.dim(0);
  Shape s = a.shape();
  s[0] = end - begin;
  auto av = a.values();
  std::vector<T> out(av.begin() + static_cast<std::ptrdiff_t>(begin * row),
                     av.begin() + static_cast<std::ptrdiff_t>(end * row));
  const std::size_t off = begin * row;
  return Tensor<T>::from_op(std::move(s), std::move(out), "slice", {a},
                            [off](const detail::Node<T>&, std::span<const T> g, std::span<std::span<T>> gi) {
                              for (std::size_t k = 0; k < g.size(); ++k) gi[0][off + k] += g[k];
                            });
}

/// Element `i` of the leading axis, with that axis removed.
template <std::floating_point T>
Tensor<T> select(const Tensor<T>& a, std::size_t i) {
  auto s = slice(a, i, i + 1);
  Shape rest(a.shape().begin() + 1, a.shape().end());
  if (rest.empty()) rest = {1};
  return reshape(s, rest);
}

/// Concatenation along the leading axis.
template <std::floating_point T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw PreconditionError("concat of zero tensors");
  Shape s = parts[0].shape();
  std::size_t lead = 0;
  std::vector<T> out;
  for (const auto& p : parts) {
    if (p.rank() != s.size() || !std::equal(s.begin() + 1, s.end(), p.shape().begin() + 1)) {
      throw ShapeError("concat shape mismatch: " + shape_str(s) + " vs " + shape_str(p.shape()));
    }
    lead += p.dim(0);
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  s[0] = lead;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) sizes.push_back(p.size());
  return Tensor<T>::from_op(std::move(s), std::move(out), "concat", parts,
                            [sizes](const detail::Node<T>&, std::span<const T> g, std::span<std::span<T>> gi) {
                              std::size_t off = 0;
                              for (std::size_t p = 0; p < sizes.size(); ++p) {
                                if (!gi[p].empty())
                                  for (std::size_t k = 0; k < sizes[p]; ++k) gi[p][k] += g[off + k];
                                off += sizes[p];
                              }
                            });
}

/// Stacks equally shaped tensors along a new leading axis.
template <std::floating_point T>
Tensor<T> stack(const std::vector<Tensor<T>>& parts) {
  std::vector<Tensor<T>> lifted;
  lifted.reserve(parts.size());
  for (const auto& p : parts) {
    Shape s{1};
    s.insert(s.end(), p.shape().begin(), p.shape().end());
    lifted.push_back(reshape(p, s));
  }
  return concat(lifted);
}

// ---------------------------------------------------------------------------
// Linear algebra

template <std::floating_point T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto av = a.values();
  auto bv = b.values();
  std::vector<T> out(m * n, T(0));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const T x = av[i * k + p];
      const T* brow = &bv[p * n];
      T* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += x * brow[j];
    }
  return Tensor<T>::from_op(Shape{m, n}, std::move(out), "matmul", {a, b},
                            [m, k, n](const detail::Node<T>& self, std::span<const T> g, std::span<std::span<T>> gi) {
                              const auto& A = self.parents[0]->values;
                              const auto& B = self.parents[1]->values;
                              if (!gi[0].empty())
                                for (std::size_t i = 0; i < m; ++i)
                                  for (std::size_t p = 0; p < k; ++p) {
                                    T acc = 0;
                                    for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * B[p * n + j];
                                    gi[0][i * k + p] += acc;
                                  }
                              if (!gi[1].empty())
                                for (std::size_t i = 0; i < m; ++i)
                                  for (std::size_t p = 0; p < k; ++p) {
                                    const T x = A[i * k + p];
                                    for (std::size_t j = 0; j < n; ++j) gi[1][p * n + j] += x * g[i * n + j];
                                  }
                            });
}

// ---------------------------------------------------------------------------
// Normalization and similarity

/// Softmax along `axis`, computed with max-subtraction.
template <std::floating_point T>
Tensor<T> softmax(const Tensor<T>& a, std::size_t axis) {
  const auto [outer, n, inner] = detail::axis_split(a.shape(), axis);
  auto av = a.values();
  std::vector<T> out(av.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, av[base + j * inner]);
      T z = 0;
      for (std::size_t j = 0; j < n; ++j) z += (out[base + j * inner] = std::exp(av[base + j * inner] - mx));
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= z;
    }
  return Tensor<T>::from_op(a.shape(), std::move(out), "softmax", {a},
                            [outer, n, inner](const detail::Node<T>& self, std::span<const T> g, std::span<std::span<T>> gi) {
                              const auto& y = self.values;
                              for (std::size_t o = 0; o < outer; ++o)
                                for (std::size_t i = 0; i < inner; ++i) {
                                  const std::size_t base = o * n * inner + i;
                                  T dot = 0;
                                  for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
                                  for (std::size_t j = 0; j < n; ++j) {
                                    const std::size_t q = base + j * inner;
                                    gi[0][q] += y[q] * (g[q] - dot);
                                  }
                                }
                            });
}

template <std::floating_point T>
Tensor<T> log_softmax(const Tensor<T>& a, std::size_t axis) {
  const auto [outer, n, inner] = detail::axis_split(a.shape(), axis);
  auto av = a.values();
  std::vector<T> out(av.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, av[base + j * inner]);
      T z = 0;
      for (std::size_t j = 0; j < n; ++j) z += std::exp(av[base + j * inner] - mx);
      const T lz = mx + std::log(z);
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] = av[base + j * inner] - lz;
    }
  return Tensor<T>::from_op(a.shape(), std::move(out), "log_softmax", {a},
                            [outer, n, inner](const detail::Node<T>& self, std::span<const T> g, std::span<std::span<T>> gi) {
                              const auto& y = self.values;
                              for (std::size_t o = 0; o < outer; ++o)
                                for (std::size_t i = 0; i < inner; ++i) {
                                  const std::size_t base = o * n * inner + i;
                                  T gs = 0;
                                  for (std::size_t j = 0; j < n; ++j) gs += g[base + j * inner];
                                  for (std::size_t j = 0; j < n; ++j) {
                                    const std::size_t q = base + j * inner;
                                    gi[0][q] += g[q] - std::exp(y[q]) * gs;
                                  }
                                }
                            });
}

/// Mean softmax cross-entropy of logits ([K] or [B, K]) against class labels.
template <std::floating_point T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> labels) {
  const std::size_t rows = logits.rank() == 1 ? 1 : logits.dim(0);
  if (logits.rank() > 2 || labels.size() != rows) {
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " + std::to_string(labels.size()) +
                     " labels");
  }
  const std::size_t k = logits.size() / rows;
  auto lv = logits.values();
  std::vector<T> probs(lv.size());
  T loss = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] >= k) throw DataError("label " + std::to_string(labels[r]) + " out of range [0," + std::to_string(k) + ")");
    const T* row = &lv[r * k];
    const T mx = *std::max_element(row, row + k);
    T z = 0;
    for (std::size_t j = 0; j < k; ++j) z += (probs[r * k + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < k; ++j) probs[r * k + j] /= z;
    loss += -(row[labels[r]] - mx - std::log(z));
  }
  loss /= static_cast<T>(rows);
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return Tensor<T>::from_op(Shape{1}, {loss}, "cross_entropy", {logits},
                            [probs = std::move(probs), lab, rows, k](const detail::Node<T>&, std::span<const T> g,
                                                                    std::span<std::span<T>> gi) {
                              const T s = g[0] / static_cast<T>(rows);
                              for (std::size_t r = 0; r < rows; ++r)
                                for (std::size_t j = 0; j < k; ++j)
                                  gi[0][r * k + j] += s * (probs[r * k + j] - (j == lab[r] ? T(1) : T(0)));
                            });
}

template <std::floating_point T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::size_t label) {
  const std::size_t l[1] = {label};
  return cross_entropy(logits, std::span<const std::size_t>(l, 1));
}

/// Cosine similarity of two equal-length tensors (treated as flat vectors).
/// Throws DegenerateVectorError when either norm is zero.
template <std::floating_point T>
Tensor<T> cosine(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.size() != b.size()) {
    throw ShapeError("cosine length mismatch: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  }
  auto av = a.values();
  auto bv = b.values();
  T dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    dot += av[i] * bv[i];
    na += av[i] * av[i];
    nb += bv[i] * bv[i];
  }
  if (!(na > T(0)) || !(nb > T(0))) throw DegenerateVectorError("cosine of a zero-norm vector");
  const T ra = std::sqrt(na), rb = std::sqrt(nb);
  const T c = std::clamp(dot / (ra * rb), T(-1), T(1));
  return Tensor<T>::from_op(Shape{1}, {c}, "cosine", {a, b},
                            [na, nb, ra, rb, c](const detail::Node<T>& self, std::span<const T> g, std::span<std::span<T>> gi) {
                              const auto& x = self.parents[0]->values;
                              const auto& y = self.parents[1]->values;
                              const T inv = T(1) / (ra * rb);
                              if (!gi[0].empty())
                                for (std::size_t i = 0; i < x.size(); ++i) gi[0][i] += g[0] * (y[i] * inv - c * x[i] / na);
                              if (!gi[1].empty())
                                for (std::size_t i = 0; i < y.size(); ++i) gi[1][i] += g[0] * (x[i] * inv - c * y[i] / nb);
                            });
}

/// Scales every row of a matrix to unit L2 norm. Rows whose norm is below
/// `min_norm` map to zero and pass no gradient.
template <std::floating_point T>
Tensor<T> normalize_rows(const Tensor<T>& a, T min_norm = T(1e-12)) {
  if (a.rank() != 2) throw ShapeError("normalize_rows expects a matrix, got " + shape_str(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  auto av = a.values();
  std::vector<T> norms(r), out(a.size(), T(0));
  for (std::size_t i = 0; i < r; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) s += av[i * c + j] * av[i * c + j];
    norms[i] = std::sqrt(s);
    if (norms[i] > min_norm)
      for (std::size_t j = 0; j < c; ++j) out[i * c + j] = av[i * c + j] / norms[i];
  }
  return Tensor<T>::from_op(a.shape(), std::move(out), "normalize_rows", {a},
                            [norms = std::move(norms), r, c, min_norm](const detail::Node<T>& self, std::span<const T> g,
                                                                        std::span<std::span<T>> gi) {
                              const auto& y = self.values;
                              for (std::size_t i = 0; i < r; ++i) {
                                if (!(norms[i] > min_norm)) continue;
                                T dot = 0;
                                for (std::size_t j = 0; j < c; ++j) dot += y[i * c + j] * g[i * c + j];
                                for (std::size_t j = 0; j < c; ++j)
                                  gi[0][i * c + j] += (g[i * c + j] - y[i * c + j] * dot) / norms[i];
                              }
                            });
}

/// Squared Euclidean distances between the rows of `x` [N, C] and `y` [K, C].
template <std::floating_point T>
Tensor<T> pairwise_sq_dist(const Tensor<T>& x, const Tensor<T>& y) {
  if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(1)) {
    throw ShapeError("pairwise_sq_dist shape mismatch: " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  }
  const std::size_t n = x.dim(0), k = y.dim(0), c = x.dim(1);
  auto xv = x.values();
  auto yv = y.values();
  std::vector<T> out(n * k);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      T s = 0;
      for (std::size_t d = 0; d < c; ++d) {
        const T diff = xv[i * c + d] - yv[j * c + d];
        s += diff * diff;
      }
      out[i * k + j] = s;
    }
  return Tensor<T>::from_op(Shape{n, k}, std::move(out), "pairwise_sq_dist", {x, y},
                            [n, k, c](const detail::Node<T>& self, std::span<const T> g, std::span<std::span<T>> gi) {
                              const auto& X = self.parents[0]->values;
                              const auto& Y = self.parents[1]->values;
                              for (std::size_t i = 0; i < n; ++i)
                                for (std::size_t j = 0; j < k; ++j) {
                                  const T w = T(2) * g[i * k + j];
                                  if (w == T(0)) continue;
                                  for (std::size_t d = 0; d < c; ++d) {
                                    const T diff = X[i * c + d] - Y[j * c + d];
                                    if (!gi[0].empty()) gi[0][i * c + d] += w * diff;
                                    if (!gi[1].empty()) gi[1][j * c + d] -= w * diff;
                                  }
                                }
                            });
}

// ---------------------------------------------------------------------------
// Convolutional substrate. Images are channel-last: [H, W, C] or [B, H, W, C].

namespace detail {

struct Spatial {
  std::size_t batch, h, w, c;
};

inline Spatial spatial_of(const Shape& s, const char* op) {
  if (s.size() == 3) return {1, s[0], s[1], s[2]};
  if (s.size() == 4) return {s[0], s[1], s[2], s[3]};
  throw ShapeError(std::string(op) + " expects [H,W,C] or [B,H,W,C], got " + shape_str(s));
}

inline Shape spatial_shape(bool batched, std::size_t b, std::size_t h, std::size_t w, std::size_t c) {
  return batched ? Shape{b, h, w, c} : Shape{h, w, c};
}

}  // namespace detail

/// Cross-correlation with a [k, k, C_in, C_out] kernel and zero padding.
template <std::floating_point T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride = 1, std::size_t padding = 0) {
  const auto in = detail::spatial_of(input.shape(), "conv2d");
  if (kernel.rank() != 4 || kernel.dim(0) != kernel.dim(1) || kernel.dim(2) != in.c) {
    throw ShapeError("conv2d kernel " + shape_str(kernel.shape()) + " incompatible with input " +
                     shape_str(input.shape()));
  }
  if (stride == 0) throw ShapeError("conv2d stride must be positive");
  const std::size_t k = kernel.dim(0), cout = kernel.dim(3);
  if (in.h + 2 * padding < k || in.w + 2 * padding < k) {
    throw ShapeError("conv2d: padded input " + shape_str(input.shape()) + " smaller than kernel " + std::to_string(k));
  }
  const std::size_t oh = (in.h + 2 * padding - k) / stride + 1;
  const std::size_t ow = (in.w + 2 * padding - k) / stride + 1;
  const std::size_t cin = in.c;
  auto x = input.values();
  auto kv = kernel.values();
  std::vector<T> out(in.batch * oh * ow * cout, T(0));

  // Visits every (output pixel, kernel tap) pair whose input lies inside the image.
  auto for_taps = [=](auto&& fn) {
    for (std::size_t b = 0; b < in.batch; ++b)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const std::size_t o = ((b * oh + oy) * ow + ox) * cout;
          for (std::size_t ky = 0; ky < k; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in.h)) continue;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in.w)) continue;
              const std::size_t i = ((b * in.h + static_cast<std::size_t>(iy)) * in.w + static_cast<std::size_t>(ix)) * cin;
              const std::size_t kk = (ky * k + kx) * cin * cout;
              fn(o, i, kk);
            }
          }
        }
  };

  for_taps([&](std::size_t o, std::size_t i, std::size_t kk) {
    T* orow = &out[o];
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const T xv = x[i + ci];
      const T* krow = &kv[kk + ci * cout];
      for (std::size_t co = 0; co < cout; ++co) orow[co] += xv * krow[co];
    }
  });

  const bool batched = input.rank() == 4;
  return Tensor<T>::from_op(
      detail::spatial_shape(batched, in.batch, oh, ow, cout), std::move(out), "conv2d", {input, kernel},
      [for_taps, cin, cout](const detail::Node<T>& self, std::span<const T> g, std::span<std::span<T>> gi) {
        const auto& X = self.parents[0]->values;
        const auto& K = self.parents[1]->values;
        const bool gx = !gi[0].empty(), gk = !gi[1].empty();
        for_taps([&](std::size_t o, std::size_t i, std::size_t kk) {
          const T* grow = &g[o];
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const T* krow = &K[kk + ci * cout];
            if (gx) {
              T acc = 0;
              for (std::size_t co = 0; co < cout; ++co) acc += grow[co] * krow[co];
              gi[0][i + ci] += acc;
            }
            if (gk) {
              const T xv = X[i + ci];
              T* gkrow = &gi[1][kk + ci * cout];
              for (std::size_t co = 0; co < cout; ++co) gkrow[co] += xv * grow[co];
            }
          }
        });
      });
}

/// Non-overlapping max pooling with a square window; trailing rows/columns
/// that do not fill a window are dropped. Ties route to the first maximum.
template <std::floating_point T>
Tensor<T> max_pool2d(const Tensor<T>& input, std::size_t window = 2) {
  const auto in = detail::spatial_of(input.shape(), "max_pool2d");
  if (window == 0 || in.h < window || in.w < window) throw ShapeError("max_pool2d window larger than input");
  const std::size_t oh = in.h / window, ow = in.w / window;
  auto x = input.values();
  std::vector<T> out(in.batch * oh * ow * in.c);
  std::vector<std::size_t> arg(out.size());
  for (std::size_t b = 0; b < in.batch; ++b)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox)
        for (std::size_t c = 0; c < in.c; ++c) {
          const std::size_t o = ((b * oh + oy) * ow + ox) * in.c + c;
          std::size_t best = ((b * in.h + oy * window) * in.w + ox * window) * in.c + c;
          for (std::size_t dy = 0; dy < window; ++dy)
            for (std::size_t dx = 0; dx < window; ++dx) {
              const std::size_t i = ((b * in.h + oy * window + dy) * in.w + ox * window + dx) * in.c + c;
              if (x[i] > x[best]) best = i;
            }
          out[o] = x[best];
          arg[o] = best;
        }
  return Tensor<T>::from_op(detail::spatial_shape(input.rank() == 4, in.batch, oh, ow, in.c), std::move(out),
                            "max_pool2d", {input},
                            [arg = std::move(arg)](const detail::Node<T>&, std::span<const T> g, std::span<std::span<T>> gi) {
                              for (std::size_t o = 0; o < g.size(); ++o) gi[0][arg[o]] += g[o];
                            });
}

/// Per-channel spatial mean: [H,W,C] -> [C], [B,H,W,C] -> [B,C].
template <std::floating_point T>
Tensor<T> avg_pool_spatial(const Tensor<T>& input) {
  const auto in = detail::spatial_of(input.shape(), "avg_pool_spatial");
  const std::size_t hw = in.h * in.w;
  auto x = input.values();
  std::vector<T> out(in.batch * in.c, T(0));
  for (std::size_t b = 0; b < in.batch; ++b)
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t c = 0; c < in.c; ++c) out[b * in.c + c] += x[(b * hw + p) * in.c + c];
  for (auto& v : out) v /= static_cast<T>(hw);
  Shape s = input.rank() == 4 ? Shape{in.batch, in.c} : Shape{in.c};
  return Tensor<T>::from_op(std::move(s), std::move(out), "avg_pool_spatial", {input},
                            [in, hw](const detail::Node<T>&, std::span<const T> g, std::span<std::span<T>> gi) {
                              const T inv = T(1) / static_cast<T>(hw);
                              for (std::size_t b = 0; b < in.batch; ++b)
                                for (std::size_t p = 0; p < hw; ++p)
                                  for (std::size_t c = 0; c < in.c; ++c)
                                    gi[0][(b * hw + p) * in.c + c] += g[b * in.c + c] * inv;
                            });
}

/// Centered spatial crop to `size` x `size`.
template <std::floating_point T>
Tensor<T> crop_center(const Tensor<T>& input, std::size_t size) {
  const auto in = detail::spatial_of(input.shape(), "crop_center");
  if (size == 0 || size > in.h || size > in.w) {
    throw ShapeError("crop " + std::to_string(size) + " larger than " + shape_str(input.shape()));
  }
  const std::size_t y0 = (in.h - size) / 2, x0 = (in.w - size) / 2;
  auto x = input.values();
  std::vector<T> out(in.batch * size * size * in.c);
  std::vector<std::size_t> src(out.size());
  std::size_t o = 0;
  for (std::size_t b = 0; b < in.batch; ++b)
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t xx = 0; xx < size; ++xx)
        for (std::size_t c = 0; c < in.c; ++c, ++o) {
          src[o] = ((b * in.h + y0 + y) * in.w + x0 + xx) * in.c + c;
          out[o] = x[src[o]];
        }
  return Tensor<T>::from_op(detail::spatial_shape(input.rank() == 4, in.batch, size, size, in.c), std::move(out),
                            "crop_center", {input},
                            [src = std::move(src)](const detail::Node<T>&, std::span<const T> g, std::span<std::span<T>> gi) {
                              for (std::size_t k = 0; k < g.size(); ++k) gi[0][src[k]] += g[k];
                            });
}

}  // namespace mlcn
