#include "poolbert/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "poolbert/error.hpp"
#include "poolbert/parallel.hpp"

namespace poolbert::kernels {

void gemm(std::span<const real> a, std::span<const real> b, std::span<real> c, std::size_t m,
          std::size_t k, std::size_t n, bool accumulate) {
  const real* pa = a.data();
  const real* pb = b.data();
  real* pc = c.data();
  // i-k-j order keeps the inner loop a contiguous axpy that compilers
  // vectorise without reassociating any sum.
  parallel_for(m, std::max<std::size_t>(1, 16384 / std::max<std::size_t>(1, k * n)),
               [=](std::size_t begin, std::size_t end) {
                 for (std::size_t i = begin; i < end; ++i) {
                   real* row = pc + i * n;
                   if (!accumulate) std::fill(row, row + n, real(0.0));
                   const real* arow = pa + i * k;
                   for (std::size_t p = 0; p < k; ++p) {
                     const real av = arow[p];
                     if (av == real(0.0)) continue;
                     const real* brow = pb + p * n;
                     for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
                   }
                 }
               });
}

void transpose(std::span<const real> in, std::span<real> out, std::size_t rows,
               std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = in[r * cols + c];
  }
}

void softmax_row(std::span<const real> in, std::span<real> out) {
  real max_value = -std::numeric_limits<real>::infinity();
  for (real v : in) max_value = std::max(max_value, v);
  double total = 0.0;
  for (std::size_t i = 0; i < in.size(); ++i) {
    out[i] = std::exp(in[i] - max_value);
    total += out[i];
  }
  const real inv = static_cast<real>(1.0 / total);
  for (std::size_t i = 0; i < in.size(); ++i) out[i] *= inv;
}

}  // namespace poolbert::kernels

namespace poolbert::ops {
namespace {

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (active_tape() == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

Tensor make_output(Shape shape, std::vector<real> values, bool track, const char* op) {
  if (checked_mode()) check_finite(values, op);
  return Tensor::from(std::move(shape), std::move(values), track);
}

void record(std::function<void()> fn) { active_tape()->record(std::move(fn)); }

// Accumulates into the gradient of `t` when it participates in autodiff.
template <class Fn>
void accumulate(Tensor t, const char* op, Fn&& fn) {
  if (!t.defined() || !t.requires_grad()) return;
  std::span<real> g = t.mutable_grad();
  fn(g);
  if (checked_mode()) check_finite(g, op);
}

std::string dims(const Tensor& t) { return shape_string(t.shape()); }

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         dims(t));
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ, " + dims(a) + " * " + dims(b));
  }
  std::vector<real> out(m * n);
  kernels::gemm(a.data(), b.data(), out, m, k, n, false);
  const bool track = tracking({&a, &b});
  Tensor c = make_output({m, n}, std::move(out), track, "matmul");
  if (track) {
    record([a, b, c, m, k, n]() mutable {
      if (!c.has_grad()) return;
      auto dc = c.grad();
      accumulate(a, "matmul backward", [&](std::span<real> g) {
        std::vector<real> bt(k * n);
        kernels::transpose(b.data(), bt, k, n);
        kernels::gemm(dc, bt, g, m, n, k, true);
      });
      accumulate(b, "matmul backward", [&](std::span<real> g) {
        std::vector<real> at(m * k);
        kernels::transpose(a.data(), at, m, k);
        kernels::gemm(at, dc, g, k, m, n, true);
      });
    });
  }
  return c;
}

Tensor batched_matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  require_rank(a, 3, "batched_matmul");
  require_rank(b, 3, "batched_matmul");
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  const std::size_t bk = transpose_b ? b.dim(2) : b.dim(1);
  if (b.dim(0) != batch || bk != k) {
    throw DimensionError("batched_matmul: incompatible operands " + dims(a) + " * " + dims(b) +
                         (transpose_b ? "^T" : ""));
  }
  std::vector<real> out(batch * m * n);
  {
    std::vector<real> bt(transpose_b ? k * n : 0);
    for (std::size_t s = 0; s < batch; ++s) {
      auto as = a.data().subspan(s * m * k, m * k);
      auto bs = b.data().subspan(s * k * n, k * n);
      auto cs = std::span<real>(out).subspan(s * m * n, m * n);
      if (transpose_b) {
        kernels::transpose(bs, bt, n, k);
        kernels::gemm(as, bt, cs, m, k, n, false);
      } else {
        kernels::gemm(as, bs, cs, m, k, n, false);
      }
    }
  }
  const bool track = tracking({&a, &b});
  Tensor c = make_output({batch, m, n}, std::move(out), track, "batched_matmul");
  if (track) {
    record([a, b, c, batch, m, k, n, transpose_b]() mutable {
      if (!c.has_grad()) return;
      auto dc = c.grad();
      accumulate(a, "batched_matmul backward", [&](std::span<real> g) {
        std::vector<real> tmp(k * n);
        for (std::size_t s = 0; s < batch; ++s) {
          auto dcs = dc.subspan(s * m * n, m * n);
          auto bs = b.data().subspan(s * k * n, k * n);
          auto gs = g.subspan(s * m * k, m * k);
          if (transpose_b) {
            // C = A B^T with B stored [n x k]: dA = dC * B.
            kernels::gemm(dcs, bs, gs, m, n, k, true);
          } else {
            kernels::transpose(bs, tmp, k, n);
            kernels::gemm(dcs, tmp, gs, m, n, k, true);
          }
        }
      });
      accumulate(b, "batched_matmul backward", [&](std::span<real> g) {
        std::vector<real> tmp(std::max(m * k, m * n));
        for (std::size_t s = 0; s < batch; ++s) {
          auto dcs = dc.subspan(s * m * n, m * n);
          auto as = a.data().subspan(s * m * k, m * k);
          auto gs = g.subspan(s * k * n, k * n);
          if (transpose_b) {
            // dB[n x k] = dC^T * A.
            kernels::transpose(dcs, std::span<real>(tmp).first(m * n), m, n);
            kernels::gemm(std::span<const real>(tmp).first(m * n), as, gs, n, m, k, true);
          } else {
            // dB[k x n] = A^T * dC.
            kernels::transpose(as, std::span<real>(tmp).first(m * k), m, k);
            kernels::gemm(std::span<const real>(tmp).first(m * k), dcs, gs, k, m, n, true);
          }
        }
      });
    });
  }
  return c;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(weight, 2, "linear");
  const std::size_t out_features = weight.dim(0), in_features = weight.dim(1);
  if (x.rank() == 0 || x.shape().back() != in_features) {
    throw DimensionError("linear: input " + dims(x) + " does not match weight " + dims(weight));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_features)) {
    throw DimensionError("linear: bias " + dims(bias) + " does not match weight " + dims(weight));
  }
  const std::size_t rows = x.numel() / in_features;
  std::vector<real> wt(in_features * out_features);
  kernels::transpose(weight.data(), wt, out_features, in_features);
  std::vector<real> out(rows * out_features);
  if (bias.defined()) {
    auto b = bias.data();
    for (std::size_t r = 0; r < rows; ++r) std::copy(b.begin(), b.end(), out.begin() + r * out_features);
  }
  kernels::gemm(x.data(), wt, out, rows, in_features, out_features, bias.defined());
  Shape shape = x.shape();
  shape.back() = out_features;
  const bool track = tracking({&x, &weight, &bias});
  Tensor y = make_output(std::move(shape), std::move(out), track, "linear");
  if (track) {
    record([x, weight, bias, y, rows, in_features, out_features]() mutable {
      if (!y.has_grad()) return;
      auto dy = y.grad();
      accumulate(x, "linear backward", [&](std::span<real> g) {
        kernels::gemm(dy, weight.data(), g, rows, out_features, in_features, true);
      });
      accumulate(weight, "linear backward", [&](std::span<real> g) {
        std::vector<real> dyt(rows * out_features);
        kernels::transpose(dy, dyt, rows, out_features);
        kernels::gemm(dyt, x.data(), g, out_features, rows, in_features, true);
      });
      accumulate(bias, "linear backward", [&](std::span<real> g) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t o = 0; o < out_features; ++o) g[o] += dy[r * out_features + o];
        }
      });
    });
  }
  return y;
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw DimensionError("add: " + dims(a) + " vs " + dims(b));
  std::vector<real> out(a.numel());
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  const bool track = tracking({&a, &b});
  Tensor c = make_output(a.shape(), std::move(out), track, "add");
  if (track) {
    record([a, b, c]() mutable {
      if (!c.has_grad()) return;
      auto dc = c.grad();
      auto pass = [&](std::span<real> g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dc[i];
      };
      accumulate(a, "add backward", pass);
      accumulate(b, "add backward", pass);
    });
  }
  return c;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw DimensionError("mul: " + dims(a) + " vs " + dims(b));
  std::vector<real> out(a.numel());
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const bool track = tracking({&a, &b});
  Tensor c = make_output(a.shape(), std::move(out), track, "mul");
  if (track) {
    record([a, b, c]() mutable {
      if (!c.has_grad()) return;
      auto dc = c.grad();
      accumulate(a, "mul backward", [&](std::span<real> g) {
        auto bv = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dc[i] * bv[i];
      });
      accumulate(b, "mul backward", [&](std::span<real> g) {
        auto av = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dc[i] * av[i];
      });
    });
  }
  return c;
}

Tensor scale(const Tensor& x, real factor) {
  std::vector<real> out(x.data().begin(), x.data().end());
  for (real& v : out) v *= factor;
  const bool track = tracking({&x});
  Tensor y = make_output(x.shape(), std::move(out), track, "scale");
  if (track) {
    record([x, y, factor]() mutable {
      if (!y.has_grad()) return;
      auto dy = y.grad();
      accumulate(x, "scale backward", [&](std::span<real> g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * factor;
      });
    });
  }
  return y;
}

Tensor log(const Tensor& x) {
  std::vector<real> out(x.numel());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(xv[i]);
  const bool track = tracking({&x});
  Tensor y = make_output(x.shape(), std::move(out), track, "log");
  if (track) {
    record([x, y]() mutable {
      if (!y.has_grad()) return;
      auto dy = y.grad();
      accumulate(x, "log backward", [&](std::span<real> g) {
        auto xv = x.data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] / xv[i];
      });
    });
  }
  return y;
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (real v : x.data()) total += v;
  const bool track = tracking({&x});
  Tensor y = make_output({1}, {static_cast<real>(total)}, track, "sum");
  if (track) {
    record([x, y]() mutable {
      if (!y.has_grad()) return;
      const real d = y.grad()[0];
      accumulate(x, "sum backward", [&](std::span<real> g) {
        for (real& v : g) v += d;
      });
    });
  }
  return y;
}

Tensor mean(const Tensor& x) {
  const std::size_t n = x.numel();
  if (n == 0) throw DimensionError("mean of an empty tensor");
  double total = 0.0;
  for (real v : x.data()) total += v;
  const bool track = tracking({&x});
  Tensor y = make_output({1}, {static_cast<real>(total / static_cast<double>(n))}, track, "mean");
  if (track) {
    record([x, y, n]() mutable {
      if (!y.has_grad()) return;
      const real d = y.grad()[0] / static_cast<real>(n);
      accumulate(x, "mean backward", [&](std::span<real> g) {
        for (real& v : g) v += d;
      });
    });
  }
  return y;
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const Shape& shape = x.shape();
  if (axis >= shape.size()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " + dims(x));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t len = shape[axis];
  std::vector<real> out(x.numel());
  auto xv = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      real max_value = -std::numeric_limits<real>::infinity();
      for (std::size_t i = 0; i < len; ++i) max_value = std::max(max_value, xv[base + i * inner]);
      double total = 0.0;
      for (std::size_t i = 0; i < len; ++i) {
        const real e = std::exp(xv[base + i * inner] - max_value);
        out[base + i * inner] = e;
        total += e;
      }
      const real inv = static_cast<real>(1.0 / total);
      for (std::size_t i = 0; i < len; ++i) out[base + i * inner] *= inv;
    }
  }
  const bool track = tracking({&x});
  Tensor y = make_output(shape, std::move(out), track, "softmax");
  if (track) {
    record([x, y, outer, inner, len]() mutable {
      if (!y.has_grad()) return;
      auto dy = y.grad();
      auto yv = y.data();
      accumulate(x, "softmax backward", [&](std::span<real> g) {
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double dot = 0.0;
            for (std::size_t i = 0; i < len; ++i) {
              dot += static_cast<double>(dy[base + i * inner]) * yv[base + i * inner];
            }
            const real d = static_cast<real>(dot);
            for (std::size_t i = 0; i < len; ++i) {
              const std::size_t idx = base + i * inner;
              g[idx] += yv[idx] * (dy[idx] - d);
            }
          }
        }
      });
    });
  }
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, real eps) {
  if (!(eps > real(0.0))) throw ParameterError("layer_norm: eps must be positive");
  if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t h = x.shape().back();
  if (gamma.shape() != Shape{h} || beta.shape() != Shape{h}) {
    throw DimensionError("layer_norm: gamma/beta " + dims(gamma) + "/" + dims(beta) +
                         " do not match last axis of " + dims(x));
  }
  const std::size_t rows = x.numel() / h;
  std::vector<real> out(x.numel());
  std::vector<real> normalized(x.numel());
  std::vector<real> inv_std(rows);
  auto xv = x.data(), gv = gamma.data(), bv = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const real* row = xv.data() + r * h;
    double mean_acc = 0.0;
    for (std::size_t i = 0; i < h; ++i) mean_acc += row[i];
    const double mu = mean_acc / static_cast<double>(h);
    double var_acc = 0.0;
    for (std::size_t i = 0; i < h; ++i) {
      const double d = row[i] - mu;
      var_acc += d * d;
    }
    const double inv = 1.0 / std::sqrt(var_acc / static_cast<double>(h) + eps);
    inv_std[r] = static_cast<real>(inv);
    for (std::size_t i = 0; i < h; ++i) {
      const real xhat = static_cast<real>((row[i] - mu) * inv);
      normalized[r * h + i] = xhat;
      out[r * h + i] = xhat * gv[i] + bv[i];
    }
  }
  const bool track = tracking({&x, &gamma, &beta});
  Tensor y = make_output(x.shape(), std::move(out), track, "layer_norm");
  if (track) {
    record([x, gamma, beta, y, rows, h, normalized = std::move(normalized),
            inv_std = std::move(inv_std)]() mutable {
      if (!y.has_grad()) return;
      auto dy = y.grad();
      auto gv = gamma.data();
      accumulate(x, "layer_norm backward", [&](std::span<real> g) {
        for (std::size_t r = 0; r < rows; ++r) {
          double sum_d = 0.0, sum_dx = 0.0;
          for (std::size_t i = 0; i < h; ++i) {
            const double d = static_cast<double>(dy[r * h + i]) * gv[i];
            sum_d += d;
            sum_dx += d * normalized[r * h + i];
          }
          const double mean_d = sum_d / static_cast<double>(h);
          const double mean_dx = sum_dx / static_cast<double>(h);
          for (std::size_t i = 0; i < h; ++i) {
            const double d = static_cast<double>(dy[r * h + i]) * gv[i];
            g[r * h + i] += static_cast<real>(inv_std[r] * (d - mean_d - normalized[r * h + i] * mean_dx));
          }
        }
      });
      accumulate(gamma, "layer_norm backward", [&](std::span<real> g) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t i = 0; i < h; ++i) g[i] += dy[r * h + i] * normalized[r * h + i];
        }
      });
      accumulate(beta, "layer_norm backward", [&](std::span<real> g) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t i = 0; i < h; ++i) g[i] += dy[r * h + i];
        }
      });
    });
  }
  return y;
}

namespace {
constexpr real kSqrt2OverPi = real(0.7978845608028654);
constexpr real kGeluCubic = real(0.044715);
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
}  // namespace

Tensor gelu(const Tensor& x, GeluKind kind) {
  std::vector<real> out(x.numel());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const real v = xv[i];
    if (kind == GeluKind::tanh_approx) {
      out[i] = real(0.5) * v * (real(1.0) + std::tanh(kSqrt2OverPi * (v + kGeluCubic * v * v * v)));
    } else {
      out[i] = static_cast<real>(0.5 * v * (1.0 + std::erf(v * kInvSqrt2)));
    }
  }
  const bool track = tracking({&x});
  Tensor y = make_output(x.shape(), std::move(out), track, "gelu");
  if (track) {
    record([x, y, kind]() mutable {
      if (!y.has_grad()) return;
      auto dy = y.grad();
      accumulate(x, "gelu backward", [&](std::span<real> g) {
        auto xv = x.data();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const real v = xv[i];
          real d;
          if (kind == GeluKind::tanh_approx) {
            const real t = std::tanh(kSqrt2OverPi * (v + kGeluCubic * v * v * v));
            d = real(0.5) * (real(1.0) + t) +
                real(0.5) * v * (real(1.0) - t * t) * kSqrt2OverPi * (real(1.0) + real(3.0) * kGeluCubic * v * v);
          } else {
            const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * double(v) * v);
            d = static_cast<real>(cdf + v * pdf);
          }
          g[i] += dy[i] * d;
        }
      });
    });
  }
  return y;
}

Tensor dropout(const Tensor& x, real rate, bool training, Rng& rng) {
  if (!(rate >= real(0.0) && rate < real(1.0))) {
    throw ParameterError("dropout rate must be in [0, 1), got " + std::to_string(rate));
  }
  if (!training || rate == real(0.0)) return x;
  const real keep_scale = real(1.0) / (real(1.0) - rate);
  std::vector<real> mask(x.numel());
  std::vector<real> out(x.numel());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = rng.uniform() < rate ? real(0.0) : keep_scale;
    out[i] = xv[i] * mask[i];
  }
  const bool track = tracking({&x});
  Tensor y = make_output(x.shape(), std::move(out), track, "dropout");
  if (track) {
    record([x, y, mask = std::move(mask)]() mutable {
      if (!y.has_grad()) return;
      auto dy = y.grad();
      accumulate(x, "dropout backward", [&](std::span<real> g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * mask[i];
      });
    });
  }
  return y;
}

Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids, const Shape& index_shape) {
  require_rank(table, 2, "embedding");
  if (shape_numel(index_shape) != ids.size()) {
    throw DimensionError("embedding: index shape " + shape_string(index_shape) + " does not hold " +
                         std::to_string(ids.size()) + " ids");
  }
  const std::size_t rows = table.dim(0), h = table.dim(1);
  std::vector<real> out(ids.size() * h);
  auto tv = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows) {
      throw InputError("embedding: id " + std::to_string(ids[i]) + " out of range for table with " +
                       std::to_string(rows) + " rows");
    }
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[i] * h), h, out.begin() + i * h);
  }
  Shape shape = index_shape;
  shape.push_back(h);
  const bool track = tracking({&table});
  Tensor y = make_output(std::move(shape), std::move(out), track, "embedding");
  if (track) {
    std::vector<std::int32_t> id_copy(ids.begin(), ids.end());
    record([table, y, h, id_copy = std::move(id_copy)]() mutable {
      if (!y.has_grad()) return;
      auto dy = y.grad();
      accumulate(table, "embedding backward", [&](std::span<real> g) {
        for (std::size_t i = 0; i < id_copy.size(); ++i) {
          real* row = g.data() + static_cast<std::size_t>(id_copy[i]) * h;
          const real* src = dy.data() + i * h;
          for (std::size_t j = 0; j < h; ++j) row[j] += src[j];
        }
      });
    });
  }
  return y;
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + dims(x) + " to " + shape_string(shape));
  }
  const bool track = tracking({&x});
  Tensor y = Tensor::from(shape, std::vector<real>(x.data().begin(), x.data().end()), track);
  if (track) {
    record([x, y]() mutable {
      if (!y.has_grad()) return;
      auto dy = y.grad();
      accumulate(x, "reshape backward", [&](std::span<real> g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i];
      });
    });
  }
  return y;
}

Tensor permute(const Tensor& x, std::span<const std::size_t> order) {
  const Shape& in_shape = x.shape();
  const std::size_t rank = in_shape.size();
  if (order.size() != rank) throw DimensionError("permute: order rank mismatch for " + dims(x));
  std::vector<bool> seen(rank, false);
  for (std::size_t axis : order) {
    if (axis >= rank || seen[axis]) throw DimensionError("permute: invalid axis order");
    seen[axis] = true;
  }
  Shape out_shape(rank);
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = in_shape[order[i]];
  // source offset for each output element, in output order
  const std::size_t n = x.numel();
  std::vector<std::size_t> source(n);
  std::vector<std::size_t> index(rank, 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t offset = 0;
    for (std::size_t i = 0; i < rank; ++i) offset += index[i] * in_strides[order[i]];
    source[flat] = offset;
    for (std::size_t i = rank; i-- > 0;) {
      if (++index[i] < out_shape[i]) break;
      index[i] = 0;
    }
  }
  std::vector<real> out(n);
  auto xv = x.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[source[i]];
  const bool track = tracking({&x});
  Tensor y = make_output(std::move(out_shape), std::move(out), track, "permute");
  if (track) {
    record([x, y, source = std::move(source)]() mutable {
      if (!y.has_grad()) return;
      auto dy = y.grad();
      accumulate(x, "permute backward", [&](std::span<real> g) {
        for (std::size_t i = 0; i < source.size(); ++i) g[source[i]] += dy[i];
      });
    });
  }
  return y;
}

Tensor mask_keys(const Tensor& scores, std::span<const std::uint8_t> key_mask, real fill) {
  require_rank(scores, 4, "mask_keys");
  const std::size_t batch = scores.dim(0), heads = scores.dim(1), tq = scores.dim(2),
                    tk = scores.dim(3);
  if (key_mask.size() != batch * tk) {
    throw DimensionError("mask_keys: mask size " + std::to_string(key_mask.size()) +
                         " does not match scores " + dims(scores));
  }
  std::vector<real> out(scores.data().begin(), scores.data().end());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t k = 0; k < tk; ++k) {
      if (key_mask[b * tk + k]) continue;
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t q = 0; q < tq; ++q) out[((b * heads + h) * tq + q) * tk + k] = fill;
      }
    }
  }
  const bool track = tracking({&scores});
  Tensor y = make_output(scores.shape(), std::move(out), track, "mask_keys");
  if (track) {
    std::vector<std::uint8_t> mask(key_mask.begin(), key_mask.end());
    record([scores, y, batch, heads, tq, tk, mask = std::move(mask)]() mutable {
      if (!y.has_grad()) return;
      auto dy = y.grad();
      accumulate(scores, "mask_keys backward", [&](std::span<real> g) {
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t q = 0; q < tq; ++q) {
              const std::size_t base = ((b * heads + h) * tq + q) * tk;
              for (std::size_t k = 0; k < tk; ++k) {
                if (mask[b * tk + k]) g[base + k] += dy[base + k];
              }
            }
          }
        }
      });
    });
  }
  return y;
}

Tensor select_position(const Tensor& x, std::size_t position) {
  require_rank(x, 3, "select_position");
  const std::size_t batch = x.dim(0), len = x.dim(1), h = x.dim(2);
  if (position >= len) {
    throw InputError("select_position: position " + std::to_string(position) + " outside " + dims(x));
  }
  std::vector<real> out(batch * h);
  auto xv = x.data();
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((b * len + position) * h), h,
                out.begin() + b * h);
  }
  const bool track = tracking({&x});
  Tensor y = make_output({batch, h}, std::move(out), track, "select_position");
  if (track) {
    record([x, y, batch, len, h, position]() mutable {
      if (!y.has_grad()) return;
      auto dy = y.grad();
      accumulate(x, "select_position backward", [&](std::span<real> g) {
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t j = 0; j < h; ++j) g[(b * len + position) * h + j] += dy[b * h + j];
        }
      });
    });
  }
  return y;
}

namespace {
void check_pool_args(const Tensor& x, std::span<const std::uint8_t> mask, const char* op) {
  require_rank(x, 3, op);
  if (mask.size() != x.dim(0) * x.dim(1)) {
    throw DimensionError(std::string(op) + ": mask size " + std::to_string(mask.size()) +
                         " does not match " + dims(x));
  }
  for (std::size_t b = 0; b < x.dim(0); ++b) {
    bool any = false;
    for (std::size_t t = 0; t < x.dim(1); ++t) any = any || mask[b * x.dim(1) + t] != 0;
    if (!any) {
      throw InputError(std::string(op) + ": batch row " + std::to_string(b) +
                       " has no unmasked position");
    }
  }
}
}  // namespace

Tensor masked_max(const Tensor& x, std::span<const std::uint8_t> mask) {
  check_pool_args(x, mask, "masked_max");
  const std::size_t batch = x.dim(0), len = x.dim(1), h = x.dim(2);
  std::vector<real> out(batch * h, -std::numeric_limits<real>::infinity());
  std::vector<std::size_t> argmax(batch * h, 0);
  auto xv = x.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < len; ++t) {
      if (!mask[b * len + t]) continue;
      for (std::size_t j = 0; j < h; ++j) {
        const real v = xv[(b * len + t) * h + j];
        if (v > out[b * h + j]) {
          out[b * h + j] = v;
          argmax[b * h + j] = t;
        }
      }
    }
  }
  const bool track = tracking({&x});
  Tensor y = make_output({batch, h}, std::move(out), track, "masked_max");
  if (track) {
    record([x, y, batch, len, h, argmax = std::move(argmax)]() mutable {
      if (!y.has_grad()) return;
      auto dy = y.grad();
      accumulate(x, "masked_max backward", [&](std::span<real> g) {
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t j = 0; j < h; ++j) g[(b * len + argmax[b * h + j]) * h + j] += dy[b * h + j];
        }
      });
    });
  }
  return y;
}

Tensor masked_mean(const Tensor& x, std::span<const std::uint8_t> mask) {
  check_pool_args(x, mask, "masked_mean");
  const std::size_t batch = x.dim(0), len = x.dim(1), h = x.dim(2);
  std::vector<real> out(batch * h);
  std::vector<real> inv_count(batch);
  auto xv = x.data();
  std::vector<double> acc(h);
  for (std::size_t b = 0; b < batch; ++b) {
    std::fill(acc.begin(), acc.end(), 0.0);
    std::size_t count = 0;
    for (std::size_t t = 0; t < len; ++t) {
      if (!mask[b * len + t]) continue;
      ++count;
      for (std::size_t j = 0; j < h; ++j) acc[j] += xv[(b * len + t) * h + j];
    }
    for (std::size_t j = 0; j < h; ++j) out[b * h + j] = static_cast<real>(acc[j] / double(count));
    inv_count[b] = real(1.0) / static_cast<real>(count);
  }
  const bool track = tracking({&x});
  Tensor y = make_output({batch, h}, std::move(out), track, "masked_mean");
  if (track) {
    std::vector<std::uint8_t> mask_copy(mask.begin(), mask.end());
    record([x, y, batch, len, h, inv_count = std::move(inv_count),
            mask_copy = std::move(mask_copy)]() mutable {
      if (!y.has_grad()) return;
      auto dy = y.grad();
      accumulate(x, "masked_mean backward", [&](std::span<real> g) {
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t t = 0; t < len; ++t) {
            if (!mask_copy[b * len + t]) continue;
            for (std::size_t j = 0; j < h; ++j) g[(b * len + t) * h + j] += dy[b * h + j] * inv_count[b];
          }
        }
      });
    });
  }
  return y;
}

Tensor concat_last(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_last: no inputs");
  Shape lead = parts[0].shape();
  lead.pop_back();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    Shape pl = p.shape();
    if (pl.empty()) throw DimensionError("concat_last: scalar input");
    widths.push_back(pl.back());
    total += pl.back();
    pl.pop_back();
    if (pl != lead) throw DimensionError("concat_last: leading dims differ, " + dims(p));
  }
  const std::size_t rows = shape_numel(lead);
  std::vector<real> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    auto pv = parts[i].data();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(r * widths[i]), widths[i],
                  out.begin() + static_cast<std::ptrdiff_t>(r * total + offset));
    }
    offset += widths[i];
  }
  bool track = false;
  if (active_tape() != nullptr) {
    for (const Tensor& p : parts) track = track || p.requires_grad();
  }
  Shape shape = lead;
  shape.push_back(total);
  Tensor y = make_output(std::move(shape), std::move(out), track, "concat_last");
  if (track) {
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    record([inputs = std::move(inputs), y, widths, rows, total]() mutable {
      if (!y.has_grad()) return;
      auto dy = y.grad();
      std::size_t offset = 0;
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        accumulate(inputs[i], "concat_last backward", [&](std::span<real> g) {
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < widths[i]; ++j) g[r * widths[i] + j] += dy[r * total + offset + j];
          }
        });
        offset += widths[i];
      }
    });
  }
  return y;
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require_rank(x, 2, "gather_rows");
  const std::size_t m = x.dim(0), h = x.dim(1);
  std::vector<real> out(rows.size() * h);
  auto xv = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= m) {
      throw InputError("gather_rows: row " + std::to_string(rows[i]) + " out of range for " + dims(x));
    }
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(rows[i] * h), h, out.begin() + i * h);
  }
  const bool track = tracking({&x});
  Tensor y = make_output({rows.size(), h}, std::move(out), track, "gather_rows");
  if (track) {
    std::vector<std::size_t> row_copy(rows.begin(), rows.end());
    record([x, y, h, row_copy = std::move(row_copy)]() mutable {
      if (!y.has_grad()) return;
      auto dy = y.grad();
      accumulate(x, "gather_rows backward", [&](std::span<real> g) {
        for (std::size_t i = 0; i < row_copy.size(); ++i) {
          for (std::size_t j = 0; j < h; ++j) g[row_copy[i] * h + j] += dy[i * h + j];
        }
      });
    });
  }
  return y;
}

namespace {
void check_targets(const Tensor& logits, std::span<const std::int32_t> targets, const char* op) {
  require_rank(logits, 2, op);
  if (targets.size() != logits.dim(0)) {
    throw DimensionError(std::string(op) + ": " + std::to_string(targets.size()) +
                         " targets for logits " + dims(logits));
  }
  for (std::int32_t t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= logits.dim(1)) {
      throw InputError(std::string(op) + ": target " + std::to_string(t) + " outside " +
                       std::to_string(logits.dim(1)) + " classes");
    }
  }
}
}  // namespace

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets) {
  check_targets(logits, targets, "softmax_cross_entropy");
  const std::size_t rows = logits.dim(0), k = logits.dim(1);
  if (rows == 0) throw InputError("softmax_cross_entropy: empty batch");
  std::vector<real> probs(rows * k);
  double total = 0.0;
  auto lv = logits.data();
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = lv.subspan(r * k, k);
    real max_value = -std::numeric_limits<real>::infinity();
    for (real v : row) max_value = std::max(max_value, v);
    double z = 0.0;
    for (real v : row) z += std::exp(static_cast<double>(v) - max_value);
    const double log_z = std::log(z) + max_value;
    total += log_z - row[static_cast<std::size_t>(targets[r])];
    for (std::size_t j = 0; j < k; ++j) probs[r * k + j] = static_cast<real>(std::exp(row[j] - log_z));
  }
  const bool track = tracking({&logits});
  Tensor loss = make_output({1}, {static_cast<real>(total / double(rows))}, track,
                            "softmax_cross_entropy");
  if (track) {
    std::vector<std::int32_t> target_copy(targets.begin(), targets.end());
    record([logits, loss, rows, k, probs = std::move(probs),
            target_copy = std::move(target_copy)]() mutable {
      if (!loss.has_grad()) return;
      const real d = loss.grad()[0] / static_cast<real>(rows);
      accumulate(logits, "softmax_cross_entropy backward", [&](std::span<real> g) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < k; ++j) {
            const real y = static_cast<std::size_t>(target_copy[r]) == j ? real(1.0) : real(0.0);
            g[r * k + j] += d * (probs[r * k + j] - y);
          }
        }
      });
    });
  }
  return loss;
}

Tensor bce_with_logits(const Tensor& logits, std::span<const std::int32_t> targets) {
  check_targets(logits, targets, "bce_with_logits");
  const std::size_t rows = logits.dim(0), k = logits.dim(1);
  if (rows == 0) throw InputError("bce_with_logits: empty batch");
  double total = 0.0;
  auto lv = logits.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < k; ++j) {
      const double z = lv[r * k + j];
      const double y = static_cast<std::size_t>(targets[r]) == j ? 1.0 : 0.0;
      total += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    }
  }
  const double count = static_cast<double>(rows * k);
  const bool track = tracking({&logits});
  Tensor loss = make_output({1}, {static_cast<real>(total / count)}, track, "bce_with_logits");
  if (track) {
    std::vector<std::int32_t> target_copy(targets.begin(), targets.end());
    record([logits, loss, rows, k, count, target_copy = std::move(target_copy)]() mutable {
      if (!loss.has_grad()) return;
      const double d = loss.grad()[0] / count;
      accumulate(logits, "bce_with_logits backward", [&](std::span<real> g) {
        auto lv = logits.data();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < k; ++j) {
            const double z = lv[r * k + j];
            const double sigmoid = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
            const double y = static_cast<std::size_t>(target_copy[r]) == j ? 1.0 : 0.0;
            g[r * k + j] += static_cast<real>(d * (sigmoid - y));
          }
        }
      });
    });
  }
  return loss;
}

}  // namespace poolbert::ops
