#include "xmd/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace xmd {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw DimensionError(msg);
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

namespace detail {

double gelu_scalar(double v) {
  return v * 0.5 * (1.0 + std::erf(v * kInvSqrt2));
}

double gelu_grad_scalar(double v) {
  const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
  const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
  return cdf + v * pdf;
}

std::size_t conv_out_len(std::size_t input_len, std::size_t kernel,
                         std::size_t stride) {
  if (kernel == 0 || stride == 0) {
    throw DimensionError("conv1d: kernel and stride must be positive");
  }
  if (input_len < kernel) {
    throw DimensionError("conv1d: input length " + std::to_string(input_len) +
                         " shorter than kernel " + std::to_string(kernel));
  }
  return (input_len - kernel) / stride + 1;
}

}  // namespace detail

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2,
          "matmul: rank-2 operands required, got " + a.shape_str() + " and " +
              b.shape_str());
  require(a.extent(1) == b.extent(0),
          "matmul: inner extents differ, " + a.shape_str() + " vs " +
              b.shape_str());
  const std::size_t m = a.extent(0), n = b.extent(1);
  if (a.extent(1) == 0) return Tensor::zeros({m, n});
  MatrixRM out = a.matrix() * b.matrix();
  return tensor_from_matrix(out);
}

Tensor conv1d(const Tensor& x, const Tensor& kernels, std::size_t stride) {
  const bool vector_io = (x.rank() == 1 && kernels.rank() == 1);
  std::size_t c_in, len;
  if (x.rank() == 1) {
    c_in = 1;
    len = x.extent(0);
  } else {
    require(x.rank() == 2, "conv1d: input must be rank 1 or 2, got " + x.shape_str());
    c_in = x.extent(0);
    len = x.extent(1);
  }
  std::size_t c_out, kc_in, k;
  if (kernels.rank() == 1) {
    c_out = 1;
    kc_in = 1;
    k = kernels.extent(0);
  } else {
    require(kernels.rank() == 3,
            "conv1d: kernels must be rank 1 or 3, got " + kernels.shape_str());
    c_out = kernels.extent(0);
    kc_in = kernels.extent(1);
    k = kernels.extent(2);
  }
  require(kc_in == c_in, "conv1d: kernel input channels " + std::to_string(kc_in) +
                             " do not match input channels " + std::to_string(c_in));
  const std::size_t out_len = detail::conv_out_len(len, k, stride);

  std::vector<double> out(c_out * out_len, 0.0);
  const double* xd = x.data();
  const double* kd = kernels.data();
  for (std::size_t o = 0; o < c_out; ++o) {
    for (std::size_t j = 0; j < out_len; ++j) {
      double acc = 0.0;
      const std::size_t base = j * stride;
      for (std::size_t c = 0; c < c_in; ++c) {
        const double* xrow = xd + c * len + base;
        const double* krow = kd + (o * c_in + c) * k;
        for (std::size_t t = 0; t < k; ++t) acc += xrow[t] * krow[t];
      }
      out[o * out_len + j] = acc;
    }
  }
  if (vector_io) return Tensor({out_len}, std::move(out));
  return Tensor({c_out, out_len}, std::move(out));
}

namespace {

// Shared rank handling for last-axis ops: views x as rows x d.
std::pair<std::size_t, std::size_t> rows_and_width(const Tensor& x,
                                                   const char* op) {
  if (x.rank() == 1) return {1, x.extent(0)};
  if (x.rank() == 2) return {x.extent(0), x.extent(1)};
  throw DimensionError(std::string(op) + ": rank 1 or 2 required, got " +
                       x.shape_str());
}

}  // namespace

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  auto [rows, d] = rows_and_width(x, "layer_norm");
  require(d >= 1, "layer_norm: last axis must be non-empty");
  require(gain.rank() == 1 && gain.extent(0) == d,
          "layer_norm: gain shape " + gain.shape_str() + " does not match width " +
              std::to_string(d));
  require(bias.rank() == 1 && bias.extent(0) == d,
          "layer_norm: bias shape " + bias.shape_str() + " does not match width " +
              std::to_string(d));
  std::vector<double> out(rows * d);
  const double* xd = x.data();
  const double* g = gain.data();
  const double* b = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd + r * d;
    double mean = 0.0;
    for (std::size_t i = 0; i < d; ++i) mean += row[i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double c = row[i] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv_sd = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i) {
      out[r * d + i] = (row[i] - mean) * inv_sd * g[i] + b[i];
    }
  }
  return Tensor(x.shape(), std::move(out));
}

Tensor softmax(const Tensor& x) {
  auto [rows, d] = rows_and_width(x, "softmax");
  require(d >= 1, "softmax: last axis must be non-empty");
  std::vector<double> out(rows * d);
  const double* xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd + r * d;
    double mx = row[0];
    for (std::size_t i = 1; i < d; ++i) mx = std::max(mx, row[i]);
    double sum = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double e = std::exp(row[i] - mx);
      out[r * d + i] = e;
      sum += e;
    }
    const double inv = 1.0 / sum;
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] *= inv;
  }
  return Tensor(x.shape(), std::move(out));
}

namespace {

template <typename F>
Tensor elementwise(const Tensor& x, F f) {
  std::vector<double> out(x.numel());
  const double* xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xd[i]);
  return Tensor(x.shape(), std::move(out));
}

template <typename F>
Tensor zip(const Tensor& a, const Tensor& b, const char* op, F f) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_str() +
                         " vs " + b.shape_str());
  }
  std::vector<double> out(a.numel());
  const double* ad = a.data();
  const double* bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(ad[i], bd[i]);
  return Tensor(a.shape(), std::move(out));
}

}  // namespace

Tensor gelu(const Tensor& x) { return elementwise(x, detail::gelu_scalar); }
Tensor sin(const Tensor& x) {
  return elementwise(x, [](double v) { return std::sin(v); });
}
Tensor exp(const Tensor& x) {
  return elementwise(x, [](double v) { return std::exp(v); });
}
Tensor scale(const Tensor& x, double c) {
  return elementwise(x, [c](double v) { return v * c; });
}
Tensor add(const Tensor& a, const Tensor& b) {
  return zip(a, b, "add", [](double x, double y) { return x + y; });
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return zip(a, b, "sub", [](double x, double y) { return x - y; });
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return zip(a, b, "mul", [](double x, double y) { return x * y; });
}

namespace {

Tensor reduce(const Tensor& x, std::size_t axis, bool mean) {
  const char* op = mean ? "reduce_mean" : "reduce_sum";
  if (x.rank() == 0 || axis >= x.rank()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for shape " + x.shape_str());
  }
  if (x.extent(axis) == 0) {
    throw DimensionError(std::string(op) + ": empty axis " + std::to_string(axis));
  }
  if (x.rank() == 1) {
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    if (mean) acc /= static_cast<double>(x.extent(0));
    return Tensor::scalar(acc);
  }
  if (x.rank() != 2) {
    throw DimensionError(std::string(op) + ": rank 1 or 2 required, got " +
                         x.shape_str());
  }
  const std::size_t rows = x.extent(0), cols = x.extent(1);
  const double* xd = x.data();
  if (axis == 0) {
    std::vector<double> out(cols, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) out[c] += xd[r * cols + c];
    if (mean)
      for (double& v : out) v /= static_cast<double>(rows);
    return Tensor({cols}, std::move(out));
  }
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += xd[r * cols + c];
    out[r] = mean ? acc / static_cast<double>(cols) : acc;
  }
  return Tensor({rows}, std::move(out));
}

}  // namespace

Tensor reduce_mean(const Tensor& x, std::size_t axis) {
  return reduce(x, axis, true);
}
Tensor reduce_sum(const Tensor& x, std::size_t axis) {
  return reduce(x, axis, false);
}

Tensor transpose(const Tensor& x) {
  require(x.rank() == 2, "transpose: rank-2 required, got " + x.shape_str());
  const std::size_t rows = x.extent(0), cols = x.extent(1);
  std::vector<double> out(rows * cols);
  const double* xd = x.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = xd[r * cols + c];
  return Tensor({cols, rows}, std::move(out));
}

Tensor add_rowvec(const Tensor& x, const Tensor& b) {
  require(x.rank() == 2, "add_rowvec: rank-2 input required, got " + x.shape_str());
  require(b.rank() == 1 && b.extent(0) == x.extent(1),
          "add_rowvec: bias shape " + b.shape_str() + " does not match " +
              x.shape_str());
  const std::size_t rows = x.extent(0), cols = x.extent(1);
  std::vector<double> out(rows * cols);
  const double* xd = x.data();
  const double* bd = b.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xd[r * cols + c] + bd[c];
  return Tensor({rows, cols}, std::move(out));
}

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t len) {
  require(x.rank() == 2, "slice_cols: rank-2 required, got " + x.shape_str());
  require(start + len <= x.extent(1),
          "slice_cols: window [" + std::to_string(start) + ", " +
              std::to_string(start + len) + ") exceeds " + x.shape_str());
  const std::size_t rows = x.extent(0), cols = x.extent(1);
  std::vector<double> out(rows * len);
  const double* xd = x.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < len; ++c) out[r * len + c] = xd[r * cols + start + c];
  return Tensor({rows, len}, std::move(out));
}

Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t len) {
  require(x.rank() == 2, "slice_rows: rank-2 required, got " + x.shape_str());
  require(start + len <= x.extent(0),
          "slice_rows: window [" + std::to_string(start) + ", " +
              std::to_string(start + len) + ") exceeds " + x.shape_str());
  const std::size_t cols = x.extent(1);
  const double* xd = x.data();
  std::vector<double> out(xd + start * cols, xd + (start + len) * cols);
  return Tensor({len, cols}, std::move(out));
}

Tensor concat_cols(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat_cols: at least one part required");
  const std::size_t rows = parts[0].rank() == 2 ? parts[0].extent(0) : 0;
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    require(p.rank() == 2 && p.extent(0) == rows,
            "concat_cols: incompatible part shape " + p.shape_str());
    total += p.extent(1);
  }
  std::vector<double> out(rows * total);
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    const std::size_t pc = p.extent(1);
    const double* pd = p.data();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < pc; ++c) out[r * total + off + c] = pd[r * pc + c];
    off += pc;
  }
  return Tensor({rows, total}, std::move(out));
}

Tensor stack_rows(std::span<const Tensor> rows) {
  require(!rows.empty(), "stack_rows: at least one row required");
  const std::size_t d = rows[0].rank() == 1 ? rows[0].extent(0) : 0;
  for (const Tensor& r : rows) {
    require(r.rank() == 1 && r.extent(0) == d,
            "stack_rows: incompatible row shape " + r.shape_str());
  }
  std::vector<double> out;
  out.reserve(rows.size() * d);
  for (const Tensor& r : rows) out.insert(out.end(), r.data(), r.data() + d);
  return Tensor({rows.size(), d}, std::move(out));
}

Tensor cosine_similarity_matrix(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.extent(1) == b.extent(1),
          "cosine_similarity_matrix: incompatible shapes " + a.shape_str() +
              " and " + b.shape_str());
  auto normalized = [](const Tensor& t, const char* side) {
    MatrixRM m = t.matrix();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      const double n = m.row(r).norm();
      if (n == 0.0 || !std::isfinite(n)) {
        throw NumericError(std::string("cosine_similarity_matrix: degenerate "
                                       "(zero-norm) embedding in ") +
                           side + " row " + std::to_string(r));
      }
      m.row(r) /= n;
    }
    return m;
  };
  MatrixRM an = normalized(a, "left");
  MatrixRM bn = normalized(b, "right");
  MatrixRM out = an * bn.transpose();
  return tensor_from_matrix(out);
}

Tensor cross_entropy(const Tensor& logits,
                     std::span<const std::size_t> targets) {
  require(logits.rank() == 2, "cross_entropy: rank-2 logits required, got " +
                                  logits.shape_str());
  const std::size_t rows = logits.extent(0), cols = logits.extent(1);
  require(targets.size() == rows, "cross_entropy: " + std::to_string(targets.size()) +
                                      " targets for " + std::to_string(rows) + " rows");
  const double* xd = logits.data();
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] >= cols) {
      throw ContractError("cross_entropy: target " + std::to_string(targets[r]) +
                          " out of range for " + std::to_string(cols) + " classes");
    }
    const double* row = xd + r * cols;
    double mx = row[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) sum += std::exp(row[c] - mx);
    total += mx + std::log(sum) - row[targets[r]];
  }
  return Tensor::scalar(total / static_cast<double>(rows));
}

}  // namespace xmd
