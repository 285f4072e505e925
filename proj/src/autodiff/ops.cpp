// Copyright 2026 The adafuse Authors
// SPDX-License-Identifier: Apache-2.0

#include "adafuse/autodiff/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <utility>

#include "adafuse/error.hpp"

namespace adafuse::ad {

using detail::TensorImpl;

namespace {

bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  if (!active_tape().enabled()) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Registers `out` as produced by `inputs`. The closure reads out->grad and
// accumulates into the inputs that require grad.
void record(std::string op, std::vector<Tensor> inputs, const Tensor& out,
            std::function<void()> fn) {
  out.impl()->requires_grad = true;
  Tape::Entry entry;
  entry.op = std::move(op);
  entry.inputs.reserve(inputs.size());
  for (auto& t : inputs) entry.inputs.push_back(t.impl());
  entry.output = out.impl();
  entry.backward = std::move(fn);
  active_tape().record(std::move(entry));
}

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) +
                       " and " + shape_str(b.shape()));
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error(op, a, b);
}

Shape with_last(const Shape& s, std::size_t last) {
  Shape out = s;
  if (out.empty()) out.push_back(last);
  else out.back() = last;
  return out;
}

// out[r, :] += a[r, :] * b  for a [R x k], b [k x n]
void gemm_nn(const double* a, const double* b, double* out, std::size_t rows, std::size_t k,
             std::size_t n) {
  for (std::size_t r = 0; r < rows; ++r) {
    double* o = out + r * n;
    const double* ar = a + r * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ar[p];
      const double* br = b + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
}

// out[r, p] += sum_j a[r, j] * b[p, j]  for a [R x n], b [k x n]
void gemm_nt(const double* a, const double* b, double* out, std::size_t rows, std::size_t n,
             std::size_t k) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* ar = a + r * n;
    double* o = out + r * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* br = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += ar[j] * br[j];
      o[p] += acc;
    }
  }
}

// out[p, j] += sum_r a[r, p] * b[r, j]  for a [R x k], b [R x n]
void gemm_tn(const double* a, const double* b, double* out, std::size_t rows, std::size_t k,
             std::size_t n) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* ar = a + r * k;
    const double* br = b + r * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ar[p];
      double* o = out + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Activation parse_activation(std::string_view text) {
  if (text == "relu") return Activation::relu;
  if (text == "leakyrelu" || text == "leaky_relu") return Activation::leaky_relu;
  if (text == "swish") return Activation::swish;
  if (text == "gelu") return Activation::gelu;
  throw ConfigError("unknown nonlinearity '" + std::string(text) + "'");
}

std::string to_string(Activation kind) {
  switch (kind) {
    case Activation::relu: return "relu";
    case Activation::leaky_relu: return "leakyrelu";
    case Activation::swish: return "swish";
    case Activation::gelu: return "gelu";
  }
  return "relu";
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() != 2 || a.last_dim() != b.dim(0)) shape_error("matmul", a, b);
  const std::size_t rows = a.rows(), k = b.dim(0), n = b.dim(1);
  Tensor out = Tensor::zeros(with_last(a.shape(), n));
  gemm_nn(a.data().data(), b.data().data(), out.mutable_data().data(), rows, k, n);
  if (any_requires_grad({&a, &b})) {
    TensorImpl *ai = a.impl().get(), *bi = b.impl().get(), *oi = out.impl().get();
    record("matmul", {a, b}, out, [=] {
      const double* g = oi->grad.data();
      if (ai->requires_grad) gemm_nt(g, bi->data.data(), ai->ensure_grad().data(), rows, n, k);
      if (bi->requires_grad) gemm_tn(ai->data.data(), g, bi->ensure_grad().data(), rows, k, n);
    });
  }
  return out;
}

Tensor matmul_transposed(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() != 2 || a.last_dim() != b.dim(1)) {
    shape_error("matmul_transposed", a, b);
  }
  const std::size_t rows = a.rows(), k = b.dim(1), n = b.dim(0);
  Tensor out = Tensor::zeros(with_last(a.shape(), n));
  gemm_nt(a.data().data(), b.data().data(), out.mutable_data().data(), rows, k, n);
  if (any_requires_grad({&a, &b})) {
    TensorImpl *ai = a.impl().get(), *bi = b.impl().get(), *oi = out.impl().get();
    record("matmul_transposed", {a, b}, out, [=] {
      const double* g = oi->grad.data();
      // out = a b^T: da = g b, db = g^T a
      if (ai->requires_grad) gemm_nn(g, bi->data.data(), ai->ensure_grad().data(), rows, n, k);
      if (bi->requires_grad) gemm_tn(g, ai->data.data(), bi->ensure_grad().data(), rows, n, k);
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] + b[i];
  Tensor out = Tensor::from(a.shape(), std::move(v));
  if (any_requires_grad({&a, &b})) {
    TensorImpl *ai = a.impl().get(), *bi = b.impl().get(), *oi = out.impl().get();
    record("add", {a, b}, out, [=] {
      if (ai->requires_grad) ai->accumulate_grad(oi->grad);
      if (bi->requires_grad) bi->accumulate_grad(oi->grad);
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] - b[i];
  Tensor out = Tensor::from(a.shape(), std::move(v));
  if (any_requires_grad({&a, &b})) {
    TensorImpl *ai = a.impl().get(), *bi = b.impl().get(), *oi = out.impl().get();
    record("sub", {a, b}, out, [=] {
      if (ai->requires_grad) ai->accumulate_grad(oi->grad);
      if (bi->requires_grad) {
        auto g = bi->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= oi->grad[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * b[i];
  Tensor out = Tensor::from(a.shape(), std::move(v));
  if (any_requires_grad({&a, &b})) {
    TensorImpl *ai = a.impl().get(), *bi = b.impl().get(), *oi = out.impl().get();
    record("mul", {a, b}, out, [=] {
      const auto& g = oi->grad;
      if (ai->requires_grad) {
        auto ga = ai->ensure_grad();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bi->data[i];
      }
      if (bi->requires_grad) {
        auto gb = bi->ensure_grad();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * ai->data[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * factor;
  Tensor out = Tensor::from(a.shape(), std::move(v));
  if (any_requires_grad({&a})) {
    TensorImpl *ai = a.impl().get(), *oi = out.impl().get();
    record("scale", {a}, out, [=] {
      auto ga = ai->ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += oi->grad[i] * factor;
    });
  }
  return out;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (bias.rank() != 1 || x.last_dim() != bias.dim(0)) shape_error("add_bias", x, bias);
  const std::size_t rows = x.rows(), d = bias.dim(0);
  std::vector<double> v(x.data().begin(), x.data().end());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < d; ++j) v[r * d + j] += bias[j];
  }
  Tensor out = Tensor::from(x.shape(), std::move(v));
  if (any_requires_grad({&x, &bias})) {
    TensorImpl *xi = x.impl().get(), *bi = bias.impl().get(), *oi = out.impl().get();
    record("add_bias", {x, bias}, out, [=] {
      if (xi->requires_grad) xi->accumulate_grad(oi->grad);
      if (bi->requires_grad) {
        auto gb = bi->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < d; ++j) gb[j] += oi->grad[r * d + j];
        }
      }
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return add_bias(matmul(x, weight), bias);
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor out = Tensor::scalar(s);
  if (any_requires_grad({&x})) {
    TensorImpl *xi = x.impl().get(), *oi = out.impl().get();
    record("sum", {x}, out, [=] {
      auto gx = xi->ensure_grad();
      const double g = oi->grad[0];
      for (double& v : gx) v += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor softmax(const Tensor& x, int axis) {
  const int rank = static_cast<int>(x.rank());
  if (rank == 0) throw DimensionError("softmax of a scalar");
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw DimensionError("softmax axis " + std::to_string(axis) + " out of range for " +
                         shape_str(x.shape()));
  }
  const auto& s = x.shape();
  const std::size_t n = s[axis];
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < rank; ++i) inner *= s[i];

  std::vector<double> y(x.numel());
  const auto xd = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < n; ++j) {
        const double v = xd[base + j * inner];
        if (!std::isfinite(v)) throw NumericError("softmax: non-finite input");
        mx = std::max(mx, v);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(xd[base + j * inner] - mx);
        y[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < n; ++j) y[base + j * inner] /= z;
    }
  }
  Tensor out = Tensor::from(s, std::move(y));
  if (any_requires_grad({&x})) {
    TensorImpl *xi = x.impl().get(), *oi = out.impl().get();
    record("softmax", {x}, out, [=] {
      auto gx = xi->ensure_grad();
      const auto& g = oi->grad;
      const auto& p = oi->data;
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * n * inner + in;
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * p[base + j * inner];
          for (std::size_t j = 0; j < n; ++j) {
            const std::size_t idx = base + j * inner;
            gx[idx] += p[idx] * (g[idx] - dot);
          }
        }
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t d = x.last_dim();
  if (gain.rank() != 1 || gain.dim(0) != d) shape_error("layer_norm", x, gain);
  if (bias.rank() != 1 || bias.dim(0) != d) shape_error("layer_norm", x, bias);
  if (!(eps > 0.0)) throw ConfigError("layer_norm eps must be positive");
  const std::size_t rows = x.rows();
  std::vector<double> xhat(x.numel()), rstd(rows), y(x.numel());
  const auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xd.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mu) * rs;
      xhat[r * d + j] = h;
      y[r * d + j] = gain[j] * h + bias[j];
    }
  }
  Tensor out = Tensor::from(x.shape(), std::move(y));
  if (any_requires_grad({&x, &gain, &bias})) {
    TensorImpl *xi = x.impl().get(), *gi = gain.impl().get(), *bi = bias.impl().get(),
               *oi = out.impl().get();
    record("layer_norm", {x, gain, bias}, out,
           [=, xhat = std::move(xhat), rstd = std::move(rstd)] {
             const auto& g = oi->grad;
             if (gi->requires_grad) {
               auto gg = gi->ensure_grad();
               for (std::size_t r = 0; r < rows; ++r)
                 for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
             }
             if (bi->requires_grad) {
               auto gb = bi->ensure_grad();
               for (std::size_t r = 0; r < rows; ++r)
                 for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
             }
             if (xi->requires_grad) {
               auto gx = xi->ensure_grad();
               const double inv_d = 1.0 / static_cast<double>(d);
               for (std::size_t r = 0; r < rows; ++r) {
                 double s1 = 0.0, s2 = 0.0;
                 for (std::size_t j = 0; j < d; ++j) {
                   const double dh = g[r * d + j] * gi->data[j];
                   s1 += dh;
                   s2 += dh * xhat[r * d + j];
                 }
                 for (std::size_t j = 0; j < d; ++j) {
                   const double dh = g[r * d + j] * gi->data[j];
                   gx[r * d + j] +=
                       rstd[r] * (dh - inv_d * s1 - xhat[r * d + j] * inv_d * s2);
                 }
               }
             }
           });
  }
  return out;
}

Tensor nonlinearity(const Tensor& x, Nonlinearity kind) {
  const auto xd = x.data();
  std::vector<double> y(x.numel());
  const double slope = kind.leaky_slope;
  switch (kind.kind) {
    case Activation::relu:
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = xd[i] > 0.0 ? xd[i] : 0.0;
      break;
    case Activation::leaky_relu:
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = xd[i] > 0.0 ? xd[i] : slope * xd[i];
      break;
    case Activation::swish:
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = xd[i] * sigmoid(xd[i]);
      break;
    case Activation::gelu:
      for (std::size_t i = 0; i < y.size(); ++i)
        y[i] = 0.5 * xd[i] * (1.0 + std::erf(xd[i] * std::numbers::sqrt2 / 2.0));
      break;
  }
  Tensor out = Tensor::from(x.shape(), std::move(y));
  if (any_requires_grad({&x})) {
    TensorImpl *xi = x.impl().get(), *oi = out.impl().get();
    const Activation k = kind.kind;
    record("nonlinearity", {x}, out, [=] {
      auto gx = xi->ensure_grad();
      const auto& g = oi->grad;
      const auto& v = xi->data;
      for (std::size_t i = 0; i < gx.size(); ++i) {
        double dv = 0.0;
        switch (k) {
          case Activation::relu: dv = v[i] > 0.0 ? 1.0 : 0.0; break;
          case Activation::leaky_relu: dv = v[i] > 0.0 ? 1.0 : slope; break;
          case Activation::swish: {
            const double s = sigmoid(v[i]);
            dv = s + v[i] * s * (1.0 - s);
            break;
          }
          case Activation::gelu: {
            const double cdf = 0.5 * (1.0 + std::erf(v[i] * std::numbers::sqrt2 / 2.0));
            const double pdf = std::exp(-0.5 * v[i] * v[i]) / std::sqrt(2.0 * std::numbers::pi);
            dv = cdf + v[i] * pdf;
            break;
          }
        }
        gx[i] += g[i] * dv;
      }
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy expects [b x c] logits, got " +
                                               shape_str(logits.shape()));
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  if (labels.size() != b) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(b) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw DataError("label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
    }
  }
  std::vector<double> probs(b * c);
  double loss = 0.0;
  const auto ld = logits.data();
  for (std::size_t r = 0; r < b; ++r) {
    const double* row = ld.data() + r * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    loss += lse - row[labels[r]];
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] = std::exp(row[j] - lse);
  }
  Tensor out = Tensor::scalar(loss / static_cast<double>(b));
  if (any_requires_grad({&logits})) {
    TensorImpl *li = logits.impl().get(), *oi = out.impl().get();
    std::vector<int> ys(labels.begin(), labels.end());
    record("cross_entropy", {logits}, out, [=, probs = std::move(probs), ys = std::move(ys)] {
      auto gl = li->ensure_grad();
      const double g = oi->grad[0] / static_cast<double>(b);
      for (std::size_t r = 0; r < b; ++r) {
        for (std::size_t j = 0; j < c; ++j) {
          const double onehot = static_cast<int>(j) == ys[r] ? 1.0 : 0.0;
          gl[r * c + j] += g * (probs[r * c + j] - onehot);
        }
      }
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  const std::size_t d = x.last_dim(), total = x.rows();
  if (rows.empty()) throw DimensionError("gather_rows: empty index list");
  std::vector<double> v(rows.size() * d);
  const auto xd = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= total) {
      throw DimensionError("gather_rows: row " + std::to_string(rows[i]) + " out of range for " +
                           shape_str(x.shape()));
    }
    std::copy_n(xd.data() + rows[i] * d, d, v.data() + i * d);
  }
  Tensor out = Tensor::from({rows.size(), d}, std::move(v));
  if (any_requires_grad({&x})) {
    TensorImpl *xi = x.impl().get(), *oi = out.impl().get();
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    record("gather_rows", {x}, out, [=, idx = std::move(idx)] {
      auto gx = xi->ensure_grad();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        for (std::size_t j = 0; j < d; ++j) gx[idx[i] * d + j] += oi->grad[i * d + j];
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  Tensor out = Tensor::from(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()));
  if (any_requires_grad({&x})) {
    TensorImpl *xi = x.impl().get(), *oi = out.impl().get();
    record("reshape", {x}, out, [=] { xi->accumulate_grad(oi->grad); });
  }
  return out;
}

Tensor row_dot(const Tensor& a, const Tensor& b) {
  require_same_shape("row_dot", a, b);
  const std::size_t rows = a.rows(), d = a.last_dim();
  std::vector<double> v(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) acc += a[r * d + j] * b[r * d + j];
    v[r] = acc;
  }
  Tensor out = Tensor::from(with_last(a.shape(), 1), std::move(v));
  if (any_requires_grad({&a, &b})) {
    TensorImpl *ai = a.impl().get(), *bi = b.impl().get(), *oi = out.impl().get();
    record("row_dot", {a, b}, out, [=] {
      const auto& g = oi->grad;
      if (ai->requires_grad) {
        auto ga = ai->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) ga[r * d + j] += g[r] * bi->data[r * d + j];
      }
      if (bi->requires_grad) {
        auto gb = bi->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) gb[r * d + j] += g[r] * ai->data[r * d + j];
      }
    });
  }
  return out;
}

Tensor concat_last(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_last: no inputs");
  const std::size_t rows = parts[0].rows();
  std::size_t width = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    Shape lead_a(parts[0].shape().begin(), parts[0].shape().end() - 1);
    Shape lead_b(p.shape().begin(), p.shape().end() - 1);
    if (lead_a != lead_b || p.rank() == 0) shape_error("concat_last", parts[0], p);
    offsets.push_back(width);
    width += p.last_dim();
  }
  std::vector<double> v(rows * width);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const std::size_t w = parts[i].last_dim();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(parts[i].data().data() + r * w, w, v.data() + r * width + offsets[i]);
    }
  }
  Tensor out = Tensor::from(with_last(parts[0].shape(), width), std::move(v));
  bool needs = false;
  if (active_tape().enabled()) {
    for (const auto& p : parts) needs = needs || p.requires_grad();
  }
  if (needs) {
    std::vector<TensorImpl*> ins;
    for (const auto& p : parts) ins.push_back(p.impl().get());
    TensorImpl* oi = out.impl().get();
    record("concat_last", std::vector<Tensor>(parts.begin(), parts.end()), out,
           [=, ins = std::move(ins), offsets = std::move(offsets)] {
             for (std::size_t i = 0; i < ins.size(); ++i) {
               if (!ins[i]->requires_grad) continue;
               const std::size_t w = ins[i]->shape.back();
               auto gi = ins[i]->ensure_grad();
               for (std::size_t r = 0; r < rows; ++r)
                 for (std::size_t j = 0; j < w; ++j)
                   gi[r * w + j] += oi->grad[r * width + offsets[i] + j];
             }
           });
  }
  return out;
}

Tensor select_last(const Tensor& x, std::size_t index) {
  const std::size_t rows = x.rows(), n = x.last_dim();
  if (index >= n) {
    throw DimensionError("select_last: index " + std::to_string(index) + " out of range for " +
                         shape_str(x.shape()));
  }
  std::vector<double> v(rows);
  for (std::size_t r = 0; r < rows; ++r) v[r] = x[r * n + index];
  Tensor out = Tensor::from(with_last(x.shape(), 1), std::move(v));
  if (any_requires_grad({&x})) {
    TensorImpl *xi = x.impl().get(), *oi = out.impl().get();
    record("select_last", {x}, out, [=] {
      auto gx = xi->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) gx[r * n + index] += oi->grad[r];
    });
  }
  return out;
}

Tensor mul_broadcast_last(const Tensor& x, const Tensor& w) {
  if (w.last_dim() != 1 || w.rows() != x.rows()) shape_error("mul_broadcast_last", x, w);
  const std::size_t rows = x.rows(), d = x.last_dim();
  std::vector<double> v(x.numel());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) v[r * d + j] = x[r * d + j] * w[r];
  Tensor out = Tensor::from(x.shape(), std::move(v));
  if (any_requires_grad({&x, &w})) {
    TensorImpl *xi = x.impl().get(), *wi = w.impl().get(), *oi = out.impl().get();
    record("mul_broadcast_last", {x, w}, out, [=] {
      const auto& g = oi->grad;
      if (xi->requires_grad) {
        auto gx = xi->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += g[r * d + j] * wi->data[r];
      }
      if (wi->requires_grad) {
        auto gw = wi->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          double acc = 0.0;
          for (std::size_t j = 0; j < d; ++j) acc += g[r * d + j] * xi->data[r * d + j];
          gw[r] += acc;
        }
      }
    });
  }
  return out;
}

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must be in [0, 1)");
  if (rate == 0.0) return x;
  std::vector<double> mask(x.numel());
  const double keep = 1.0 / (1.0 - rate);
  for (double& m : mask) m = rng.uniform() < rate ? 0.0 : keep;
  return mul(x, Tensor::from(x.shape(), std::move(mask)));
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            std::size_t heads, std::span<const std::size_t> lengths,
                            Tensor* probs) {
  require_same_shape("attention", q, k);
  require_same_shape("attention", q, v);
  if (q.rank() != 3) throw DimensionError("attention expects [b x t x d], got " + shape_str(q.shape()));
  const std::size_t b = q.dim(0), t = q.dim(1), d = q.dim(2);
  if (heads == 0 || d % heads != 0) {
    throw DimensionError("attention: hidden dim " + std::to_string(d) +
                         " not divisible by heads " + std::to_string(heads));
  }
  if (lengths.size() != b) throw DimensionError("attention: lengths do not match batch");
  const std::size_t dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<double> p(b * heads * t * t, 0.0);
  std::vector<double> out(q.numel(), 0.0);
  const auto qd = q.data(), kd = k.data(), vd = v.data();
  for (std::size_t bi = 0; bi < b; ++bi) {
    const std::size_t len = lengths[bi];
    if (len == 0 || len > t) throw DimensionError("attention: sequence length out of range");
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < t; ++i) {
        double* pr = p.data() + ((bi * heads + h) * t + i) * t;
        const double* qi = qd.data() + (bi * t + i) * d + h * dh;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < len; ++j) {
          const double* kj = kd.data() + (bi * t + j) * d + h * dh;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          pr[j] = s * sc;
          mx = std::max(mx, pr[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < len; ++j) {
          pr[j] = std::exp(pr[j] - mx);
          z += pr[j];
        }
        double* oi = out.data() + (bi * t + i) * d + h * dh;
        for (std::size_t j = 0; j < len; ++j) {
          pr[j] /= z;
          const double* vj = vd.data() + (bi * t + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += pr[j] * vj[c];
        }
      }
    }
  }
  if (probs) *probs = Tensor::from({b, heads, t, t}, p);
  Tensor result = Tensor::from(q.shape(), std::move(out));
  if (any_requires_grad({&q, &k, &v})) {
    TensorImpl *qi_ = q.impl().get(), *ki_ = k.impl().get(), *vi_ = v.impl().get(),
               *oi_ = result.impl().get();
    std::vector<std::size_t> lens(lengths.begin(), lengths.end());
    record("attention", {q, k, v}, result, [=, p = std::move(p), lens = std::move(lens)] {
      const auto& g = oi_->grad;
      std::span<double> gq, gk, gv;
      if (qi_->requires_grad) gq = qi_->ensure_grad();
      if (ki_->requires_grad) gk = ki_->ensure_grad();
      if (vi_->requires_grad) gv = vi_->ensure_grad();
      std::vector<double> dp(t), ds(t);
      for (std::size_t bi = 0; bi < b; ++bi) {
        const std::size_t len = lens[bi];
        for (std::size_t h = 0; h < heads; ++h) {
          for (std::size_t i = 0; i < t; ++i) {
            const double* pr = p.data() + ((bi * heads + h) * t + i) * t;
            const double* gi = g.data() + (bi * t + i) * d + h * dh;
            double dot = 0.0;
            for (std::size_t j = 0; j < len; ++j) {
              const double* vj = vi_->data.data() + (bi * t + j) * d + h * dh;
              double acc = 0.0;
              for (std::size_t c = 0; c < dh; ++c) acc += gi[c] * vj[c];
              dp[j] = acc;
              dot += pr[j] * acc;
              if (!gv.empty()) {
                double* gvj = gv.data() + (bi * t + j) * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) gvj[c] += pr[j] * gi[c];
              }
            }
            for (std::size_t j = 0; j < len; ++j) ds[j] = pr[j] * (dp[j] - dot) * sc;
            const double* qrow = qi_->data.data() + (bi * t + i) * d + h * dh;
            for (std::size_t j = 0; j < len; ++j) {
              const double* kj = ki_->data.data() + (bi * t + j) * d + h * dh;
              if (!gq.empty()) {
                double* gqi = gq.data() + (bi * t + i) * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds[j] * kj[c];
              }
              if (!gk.empty()) {
                double* gkj = gk.data() + (bi * t + j) * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds[j] * qrow[c];
              }
            }
          }
        }
      }
    });
  }
  return result;
}

Tensor custom_elementwise(const Tensor& x, std::function<double(double)> value,
                          std::function<double(double)> derivative, std::string op_name) {
  std::vector<double> y(x.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = value(x[i]);
  Tensor out = Tensor::from(x.shape(), std::move(y));
  if (any_requires_grad({&x})) {
    TensorImpl *xi = x.impl().get(), *oi = out.impl().get();
    record(std::move(op_name), {x}, out, [=, derivative = std::move(derivative)] {
      auto gx = xi->ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += oi->grad[i] * derivative(xi->data[i]);
    });
  }
  return out;
}

}  // namespace adafuse::ad
