#include "gridformer/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "gridformer/error.hpp"

namespace gridformer::ops {

using detail::make_result;
using detail::Node;

namespace {

std::vector<std::size_t> row_major_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

std::string two_shapes(const char* op, const Shape& a, const Shape& b) {
  return std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b);
}

Shape broadcast_shapes(const char* op, const Shape& a, const Shape& b) {
  std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) throw ShapeError(two_shapes(op, a, b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `in` laid over `out`, zero along broadcast axes.
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  auto own = row_major_strides(in);
  std::size_t offset = out.size() - in.size();
  for (std::size_t i = 0; i < in.size(); ++i) {
    strides[offset + i] = in[i] == 1 ? 0 : own[i];
  }
  return strides;
}

template <class F>
void broadcast_walk(const Shape& out, const std::vector<std::size_t>& sa,
                    const std::vector<std::size_t>& sb, F&& f) {
  std::size_t total = numel(out);
  if (total == 0) return;
  std::size_t rank = out.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < total; ++o) {
    f(o, ia, ib);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

void check_axis(const char* op, const Tensor& a, std::size_t axis) {
  if (axis >= a.rank()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                     shape_str(a.shape()));
  }
}

enum class BinaryKind { add, sub, mul };

Tensor binary(const char* op, BinaryKind kind, const Tensor& a, const Tensor& b) {
  Shape out = broadcast_shapes(op, a.shape(), b.shape());
  auto sa = broadcast_strides(a.shape(), out);
  auto sb = broadcast_strides(b.shape(), out);
  std::vector<double> values(numel(out));
  auto da = a.data();
  auto db = b.data();
  bool same = a.shape() == b.shape();
  auto apply = [kind](double x, double y) {
    switch (kind) {
      case BinaryKind::add: return x + y;
      case BinaryKind::sub: return x - y;
      case BinaryKind::mul: return x * y;
    }
    return 0.0;
  };
  if (same) {
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = apply(da[i], db[i]);
  } else {
    broadcast_walk(out, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      values[o] = apply(da[ia], db[ib]);
    });
  }
  return make_result(op, out, std::move(values), {a, b}, [kind, out, sa, sb, same](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const auto& g = self.grad;
    double sign_b = kind == BinaryKind::sub ? -1.0 : 1.0;
    auto visit = [&](std::size_t o, std::size_t ia, std::size_t ib) {
      if (kind == BinaryKind::mul) {
        if (pa.requires_grad) pa.grad[ia] += g[o] * pb.data[ib];
        if (pb.requires_grad) pb.grad[ib] += g[o] * pa.data[ia];
      } else {
        if (pa.requires_grad) pa.grad[ia] += g[o];
        if (pb.requires_grad) pb.grad[ib] += sign_b * g[o];
      }
    };
    if (pa.requires_grad) pa.grad_buffer();
    if (pb.requires_grad) pb.grad_buffer();
    if (same) {
      for (std::size_t i = 0; i < g.size(); ++i) visit(i, i, i);
    } else {
      broadcast_walk(out, sa, sb, visit);
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary("add", BinaryKind::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary("sub", BinaryKind::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary("mul", BinaryKind::mul, a, b); }

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> values(a.data().begin(), a.data().end());
  for (auto& v : values) v *= factor;
  return make_result("scale", a.shape(), std::move(values), {a}, [factor](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}

Tensor add_scalar(const Tensor& a, double value) {
  std::vector<double> values(a.data().begin(), a.data().end());
  for (auto& v : values) v += value;
  return make_result("add_scalar", a.shape(), std::move(values), {a}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

namespace {

// C[m,n] += A[m,k] * B[k,n] with optional transposes of the stored operands.
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
              std::size_t n, bool trans_a, bool trans_b) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      double aip = trans_a ? a[p * m + i] : a[i * k + p];
      if (aip == 0.0) continue;
      if (trans_b) {
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * b[j * k + p];
      } else {
        const double* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) throw ShapeError(two_shapes("matmul", a.shape(), b.shape()));
  std::size_t m = a.shape()[a.rank() - 2], k = a.shape().back();
  std::size_t kb = b.shape()[b.rank() - 2], n = b.shape().back();
  if (k != kb) throw ShapeError(two_shapes("matmul", a.shape(), b.shape()));
  Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  Shape batch = broadcast_shapes("matmul", batch_a, batch_b);
  auto sa = broadcast_strides(batch_a, batch);
  auto sb = broadcast_strides(batch_b, batch);
  std::size_t nb = numel(batch);
  std::vector<std::size_t> ia(nb), ib(nb);
  broadcast_walk(batch, sa, sb, [&](std::size_t o, std::size_t x, std::size_t y) {
    ia[o] = x;
    ib[o] = y;
  });
  Shape out = batch;
  out.push_back(m);
  out.push_back(n);
  std::vector<double> values(nb * m * n, 0.0);
  const double* da = a.data().data();
  const double* db = b.data().data();
  for (std::size_t t = 0; t < nb; ++t) {
    gemm_acc(da + ia[t] * m * k, db + ib[t] * k * n, values.data() + t * m * n, m, k, n, false, false);
  }
  return make_result("matmul", out, std::move(values), {a, b},
                     [m, k, n, ia = std::move(ia), ib = std::move(ib)](Node& self) {
                       auto& pa = *self.parents[0];
                       auto& pb = *self.parents[1];
                       const double* g = self.grad.data();
                       for (std::size_t t = 0; t < ia.size(); ++t) {
                         const double* gt = g + t * m * n;
                         if (pa.requires_grad) {
                           // dA = dC * B^T
                           gemm_acc(gt, pb.data.data() + ib[t] * k * n, pa.grad_buffer().data() + ia[t] * m * k,
                                    m, n, k, false, true);
                         }
                         if (pb.requires_grad) {
                           // dB = A^T * dC
                           gemm_acc(pa.data.data() + ia[t] * m * k, gt, pb.grad_buffer().data() + ib[t] * k * n,
                                    k, m, n, true, false);
                         }
                       }
                     });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> values(a.data().begin(), a.data().end());
  return make_result("reshape", std::move(shape), std::move(values), {a}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  std::size_t rank = a.rank();
  std::vector<bool> used(rank, false);
  bool valid = axes.size() == rank;
  for (auto ax : axes) {
    if (!valid) break;
    valid = ax < rank && !used[ax];
    if (valid) used[ax] = true;
  }
  if (!valid) throw ShapeError("permute: invalid axes for " + shape_str(a.shape()));
  Shape out(rank);
  auto in_strides = row_major_strides(a.shape());
  std::vector<std::size_t> walk_strides(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out[i] = a.shape()[axes[i]];
    walk_strides[i] = in_strides[axes[i]];
  }
  // src[o] = flat input index feeding output element o.
  std::vector<std::size_t> src(a.numel());
  std::vector<std::size_t> zero(rank, 0);
  broadcast_walk(out, walk_strides, zero, [&](std::size_t o, std::size_t i, std::size_t) { src[o] = i; });
  std::vector<double> values(src.size());
  auto da = a.data();
  for (std::size_t o = 0; o < src.size(); ++o) values[o] = da[src[o]];
  return make_result("permute", out, std::move(values), {a}, [src = std::move(src)](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < src.size(); ++o) g[src[o]] += self.grad[o];
  });
}

Tensor transpose(const Tensor& a, std::size_t axis0, std::size_t axis1) {
  check_axis("transpose", a, axis0);
  check_axis("transpose", a, axis1);
  std::vector<std::size_t> axes(a.rank());
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[axis0], axes[axis1]);
  return permute(a, axes);
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  check_axis("concat", parts.front(), axis);
  Shape out = first;
  out[axis] = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != first.size()) throw ShapeError(two_shapes("concat", first, probe));
    probe[axis] = first[axis];
    if (probe != first) throw ShapeError(two_shapes("concat", first, p.shape()));
    out[axis] += p.shape()[axis];
  }
  auto split = split_at(out, axis);
  std::vector<double> values(numel(out));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    std::size_t ext = p.shape()[axis];
    auto d = p.data();
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(d.begin() + o * ext * split.inner, ext * split.inner,
                  values.begin() + (o * split.extent + offset) * split.inner);
    }
    offset += ext;
  }
  return make_result("concat", out, std::move(values), parts, [split, offsets](Node& self) {
    for (std::size_t pi = 0; pi < self.parents.size(); ++pi) {
      auto& p = *self.parents[pi];
      if (!p.requires_grad) continue;
      auto& g = p.grad_buffer();
      std::size_t ext = g.size() / (split.outer * split.inner);
      for (std::size_t o = 0; o < split.outer; ++o) {
        const double* src = self.grad.data() + (o * split.extent + offsets[pi]) * split.inner;
        double* dst = g.data() + o * ext * split.inner;
        for (std::size_t i = 0; i < ext * split.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  check_axis("slice", a, axis);
  if (begin >= end || end > a.shape()[axis]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for axis " + std::to_string(axis) + " of " + shape_str(a.shape()));
  }
  std::vector<std::size_t> indices(end - begin);
  std::iota(indices.begin(), indices.end(), begin);
  return index_select(a, axis, indices);
}

Tensor index_select(const Tensor& a, std::size_t axis, std::span<const std::size_t> indices) {
  check_axis("index_select", a, axis);
  if (indices.empty()) throw ShapeError("index_select: empty index list");
  auto split = split_at(a.shape(), axis);
  for (auto i : indices) {
    if (i >= split.extent) {
      throw ShapeError("index_select: index " + std::to_string(i) + " out of range for " + shape_str(a.shape()));
    }
  }
  Shape out = a.shape();
  out[axis] = indices.size();
  std::vector<double> values(numel(out));
  auto d = a.data();
  std::size_t k = indices.size();
  for (std::size_t o = 0; o < split.outer; ++o) {
    for (std::size_t j = 0; j < k; ++j) {
      std::copy_n(d.begin() + (o * split.extent + indices[j]) * split.inner, split.inner,
                  values.begin() + (o * k + j) * split.inner);
    }
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return make_result("index_select", out, std::move(values), {a}, [split, idx = std::move(idx)](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    std::size_t k = idx.size();
    for (std::size_t o = 0; o < split.outer; ++o) {
      for (std::size_t j = 0; j < k; ++j) {
        const double* src = self.grad.data() + (o * k + j) * split.inner;
        double* dst = g.data() + (o * split.extent + idx[j]) * split.inner;
        for (std::size_t i = 0; i < split.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  Shape out = broadcast_shapes("broadcast_to", a.shape(), shape);
  if (out != shape) throw ShapeError(two_shapes("broadcast_to", a.shape(), shape));
  auto sa = broadcast_strides(a.shape(), out);
  std::vector<std::size_t> zero(out.size(), 0);
  std::vector<std::size_t> src(numel(out));
  broadcast_walk(out, sa, zero, [&](std::size_t o, std::size_t i, std::size_t) { src[o] = i; });
  std::vector<double> values(src.size());
  auto d = a.data();
  for (std::size_t o = 0; o < src.size(); ++o) values[o] = d[src[o]];
  return make_result("broadcast_to", out, std::move(values), {a}, [src = std::move(src)](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < src.size(); ++o) g[src[o]] += self.grad[o];
  });
}

namespace {

Tensor reduce_axis(const char* op, const Tensor& a, std::size_t axis, bool keepdim, double factor) {
  check_axis(op, a, axis);
  auto split = split_at(a.shape(), axis);
  Shape out = a.shape();
  if (keepdim) {
    out[axis] = 1;
  } else {
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  std::vector<double> values(split.outer * split.inner, 0.0);
  auto d = a.data();
  for (std::size_t o = 0; o < split.outer; ++o) {
    for (std::size_t e = 0; e < split.extent; ++e) {
      const double* src = d.data() + (o * split.extent + e) * split.inner;
      double* dst = values.data() + o * split.inner;
      for (std::size_t i = 0; i < split.inner; ++i) dst[i] += src[i];
    }
  }
  for (auto& v : values) v *= factor;
  return make_result(op, out, std::move(values), {a}, [split, factor](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < split.outer; ++o) {
      const double* src = self.grad.data() + o * split.inner;
      for (std::size_t e = 0; e < split.extent; ++e) {
        double* dst = g.data() + (o * split.extent + e) * split.inner;
        for (std::size_t i = 0; i < split.inner; ++i) dst[i] += factor * src[i];
      }
    }
  });
}

}  // namespace

Tensor sum(const Tensor& a, std::size_t axis, bool keepdim) {
  return reduce_axis("sum", a, axis, keepdim, 1.0);
}

Tensor mean(const Tensor& a, std::size_t axis, bool keepdim) {
  check_axis("mean", a, axis);
  return reduce_axis("mean", a, axis, keepdim, 1.0 / static_cast<double>(a.shape()[axis]));
}

Tensor sum_all(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return make_result("sum_all", {}, {total}, {a}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean_all(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean_all: empty tensor");
  return scale(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor softmax(const Tensor& a) {
  if (a.rank() == 0) throw ShapeError("softmax: needs at least one axis");
  std::size_t n = a.shape().back();
  std::size_t rows = a.numel() / n;
  std::vector<double> values(a.numel());
  auto d = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = d.data() + r * n;
    double* y = values.data() + r * n;
    double mx = *std::max_element(x, x + n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = std::exp(x[i] - mx);
      total += y[i];
    }
    for (std::size_t i = 0; i < n; ++i) y[i] /= total;
  }
  return make_result("softmax", a.shape(), std::move(values), {a}, [n, rows](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.data.data() + r * n;
      const double* gy = self.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t i = 0; i < n; ++i) dot += gy[i] * y[i];
      for (std::size_t i = 0; i < n; ++i) g[r * n + i] += y[i] * (gy[i] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() == 0) throw ShapeError("layer_norm: needs at least one axis");
  std::size_t n = x.shape().back();
  if (gamma.shape() != Shape{n}) throw ShapeError(two_shapes("layer_norm", x.shape(), gamma.shape()));
  if (beta.shape() != Shape{n}) throw ShapeError(two_shapes("layer_norm", x.shape(), beta.shape()));
  std::size_t rows = x.numel() / n;
  std::vector<double> normed(x.numel());
  std::vector<double> inv_std(rows);
  std::vector<double> values(x.numel());
  auto d = x.data();
  auto gm = gamma.data();
  auto bt = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = d.data() + r * n;
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += xr[i];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= static_cast<double>(n);
    double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t i = 0; i < n; ++i) {
      double h = (xr[i] - mu) * is;
      normed[r * n + i] = h;
      values[r * n + i] = h * gm[i] + bt[i];
    }
  }
  return make_result("layer_norm", x.shape(), std::move(values), {x, gamma, beta},
                     [n, rows, normed = std::move(normed), inv_std = std::move(inv_std)](Node& self) {
                       auto& px = *self.parents[0];
                       auto& pg = *self.parents[1];
                       auto& pb = *self.parents[2];
                       const auto& gm = pg.data;
                       std::vector<double> dh(n);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* gy = self.grad.data() + r * n;
                         const double* h = normed.data() + r * n;
                         if (pg.requires_grad) {
                           auto& gg = pg.grad_buffer();
                           for (std::size_t i = 0; i < n; ++i) gg[i] += gy[i] * h[i];
                         }
                         if (pb.requires_grad) {
                           auto& gb = pb.grad_buffer();
                           for (std::size_t i = 0; i < n; ++i) gb[i] += gy[i];
                         }
                         if (!px.requires_grad) continue;
                         double mean_dh = 0.0, mean_dh_h = 0.0;
                         for (std::size_t i = 0; i < n; ++i) {
                           dh[i] = gy[i] * gm[i];
                           mean_dh += dh[i];
                           mean_dh_h += dh[i] * h[i];
                         }
                         mean_dh /= static_cast<double>(n);
                         mean_dh_h /= static_cast<double>(n);
                         auto& gx = px.grad_buffer();
                         for (std::size_t i = 0; i < n; ++i) {
                           gx[r * n + i] += inv_std[r] * (dh[i] - mean_dh - h[i] * mean_dh_h);
                         }
                       }
                     });
}

Tensor gelu(const Tensor& a) {
  std::vector<double> values(a.data().begin(), a.data().end());
  for (auto& v : values) v = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
  return make_result("gelu", a.shape(), std::move(values), {a}, [](Node& self) {
    auto& p = *self.parents[0];
    auto& g = p.grad_buffer();
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < g.size(); ++i) {
      double x = p.data[i];
      double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
      double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
      g[i] += self.grad[i] * (cdf + x * pdf);
    }
  });
}

Tensor tanh(const Tensor& a) {
  std::vector<double> values(a.data().begin(), a.data().end());
  for (auto& v : values) v = std::tanh(v);
  return make_result("tanh", a.shape(), std::move(values), {a}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      double y = self.data[i];
      g[i] += self.grad[i] * (1.0 - y * y);
    }
  });
}

namespace {

Tensor apply_mask(const char* op, const Tensor& x, std::vector<double> mask, std::size_t inner) {
  std::vector<double> values(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < values.size(); ++i) values[i] *= mask[i / inner];
  return make_result(op, x.shape(), std::move(values), {x}, [mask = std::move(mask), inner](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i / inner];
  });
}

void check_rate(const char* op, double p) {
  if (!(p >= 0.0 && p < 1.0)) throw ValidationError(std::string(op) + ": rate must be in [0, 1)");
}

}  // namespace

Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng, bool train) {
  check_rate("dropout", p);
  if (!train || p == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - p);
  std::vector<double> mask(x.numel());
  for (auto& m : mask) m = keep(rng) ? 1.0 / (1.0 - p) : 0.0;
  return apply_mask("dropout", x, std::move(mask), 1);
}

Tensor drop_path(const Tensor& x, double p, std::mt19937_64& rng, bool train) {
  check_rate("drop_path", p);
  if (!train || p == 0.0 || x.rank() == 0) return x;
  std::size_t rows = x.shape()[0];
  std::bernoulli_distribution keep(1.0 - p);
  std::vector<double> mask(rows);
  for (auto& m : mask) m = keep(rng) ? 1.0 / (1.0 - p) : 0.0;
  return apply_mask("drop_path", x, std::move(mask), x.numel() / rows);
}

}  // namespace gridformer::ops
