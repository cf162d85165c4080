#include "xmd/tape.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <utility>

namespace xmd {

void GradTape::check_open() const {
  if (consumed_) {
    throw ContractError("GradTape: tape already consumed by backward()");
  }
}

Traced GradTape::leaf(Tensor value) {
  check_open();
  Node n;
  n.is_leaf = true;
  n.shape = value.shape();
  nodes_.push_back(std::move(n));
  return Traced{std::move(value), nodes_.size() - 1};
}

Traced GradTape::constant(Tensor value) {
  check_open();
  nodes_.push_back(Node{});
  return Traced{std::move(value), nodes_.size() - 1};
}

Traced GradTape::record(const char* op, Tensor output,
                        std::vector<std::size_t> inputs,
                        std::function<std::vector<Tensor>(const Tensor&)> vjp) {
  check_open();
  if (!output.all_finite()) {
    throw NumericError(std::string("non-finite values produced by ") + op);
  }
  for (std::size_t id : inputs) {
    if (id >= nodes_.size()) {
      throw ContractError(std::string(op) + ": input tensor is not on this tape");
    }
  }
  Node n;
  n.inputs = std::move(inputs);
  n.vjp = std::move(vjp);
  nodes_.push_back(std::move(n));
  return Traced{std::move(output), nodes_.size() - 1};
}

GradMap backward(GradTape& tape, const Traced& loss) {
  tape.check_open();
  if (loss.node >= tape.nodes_.size()) {
    throw ContractError("backward: loss is not on this tape");
  }
  if (loss.value.numel() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " +
                        loss.value.shape_str());
  }
  tape.consumed_ = true;

  std::vector<std::optional<Tensor>> grads(tape.nodes_.size());
  grads[loss.node] = Tensor::full(loss.value.shape(), 1.0);

  for (std::size_t i = tape.nodes_.size(); i-- > 0;) {
    auto& node = tape.nodes_[i];
    if (!grads[i].has_value() || !node.vjp) continue;
    std::vector<Tensor> input_grads = node.vjp(*grads[i]);
    for (std::size_t j = 0; j < node.inputs.size(); ++j) {
      const std::size_t id = node.inputs[j];
      if (grads[id].has_value()) {
        grads[id] = add(*grads[id], input_grads[j]);
      } else {
        grads[id] = std::move(input_grads[j]);
      }
    }
    node.vjp = nullptr;
    if (i != loss.node && !tape.nodes_[i].is_leaf) grads[i].reset();
  }

  GradMap out;
  for (std::size_t i = 0; i < tape.nodes_.size(); ++i) {
    if (!tape.nodes_[i].is_leaf) continue;
    if (grads[i].has_value()) {
      out.emplace(i, std::move(*grads[i]));
    } else {
      out.emplace(i, Tensor::zeros(tape.nodes_[i].shape));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Traced primitives
// ---------------------------------------------------------------------------

Traced add(GradTape& t, const Traced& a, const Traced& b) {
  return t.record("add", add(a.value, b.value), {a.node, b.node},
                  [](const Tensor& g) { return std::vector<Tensor>{g, g}; });
}

Traced add(GradTape& t, const Traced& a, const Tensor& b) {
  return t.record("add", add(a.value, b), {a.node},
                  [](const Tensor& g) { return std::vector<Tensor>{g}; });
}

Traced sub(GradTape& t, const Traced& a, const Traced& b) {
  return t.record("sub", sub(a.value, b.value), {a.node, b.node},
                  [](const Tensor& g) {
                    return std::vector<Tensor>{g, scale(g, -1.0)};
                  });
}

Traced sub(GradTape& t, const Traced& a, const Tensor& b) {
  return t.record("sub", sub(a.value, b), {a.node},
                  [](const Tensor& g) { return std::vector<Tensor>{g}; });
}

Traced sub(GradTape& t, const Tensor& a, const Traced& b) {
  return t.record("sub", sub(a, b.value), {b.node}, [](const Tensor& g) {
    return std::vector<Tensor>{scale(g, -1.0)};
  });
}

Traced mul(GradTape& t, const Traced& a, const Traced& b) {
  return t.record("mul", mul(a.value, b.value), {a.node, b.node},
                  [av = a.value, bv = b.value](const Tensor& g) {
                    return std::vector<Tensor>{mul(g, bv), mul(g, av)};
                  });
}

Traced mul(GradTape& t, const Traced& a, const Tensor& b) {
  return t.record("mul", mul(a.value, b), {a.node},
                  [bv = b](const Tensor& g) {
                    return std::vector<Tensor>{mul(g, bv)};
                  });
}

Traced scale(GradTape& t, const Traced& a, double c) {
  return t.record("scale", scale(a.value, c), {a.node}, [c](const Tensor& g) {
    return std::vector<Tensor>{scale(g, c)};
  });
}

Traced matmul(GradTape& t, const Traced& a, const Traced& b) {
  return t.record("matmul", matmul(a.value, b.value), {a.node, b.node},
                  [av = a.value, bv = b.value](const Tensor& g) {
                    return std::vector<Tensor>{matmul(g, transpose(bv)),
                                               matmul(transpose(av), g)};
                  });
}

Traced matmul(GradTape& t, const Tensor& a, const Traced& b) {
  return t.record("matmul", matmul(a, b.value), {b.node},
                  [av = a](const Tensor& g) {
                    return std::vector<Tensor>{matmul(transpose(av), g)};
                  });
}

Traced matmul(GradTape& t, const Traced& a, const Tensor& b) {
  return t.record("matmul", matmul(a.value, b), {a.node},
                  [bv = b](const Tensor& g) {
                    return std::vector<Tensor>{matmul(g, transpose(bv))};
                  });
}

Traced transpose(GradTape& t, const Traced& a) {
  return t.record("transpose", transpose(a.value), {a.node},
                  [](const Tensor& g) {
                    return std::vector<Tensor>{transpose(g)};
                  });
}

namespace {

// Canonical conv operand extents; mirrors the promotion in xmd::conv1d.
struct ConvDims {
  std::size_t c_in, len, c_out, k;
};

ConvDims conv_dims(const Tensor& x, const Tensor& kernels) {
  ConvDims d;
  d.c_in = x.rank() == 1 ? 1 : x.extent(0);
  d.len = x.rank() == 1 ? x.extent(0) : x.extent(1);
  d.c_out = kernels.rank() == 1 ? 1 : kernels.extent(0);
  d.k = kernels.rank() == 1 ? kernels.extent(0) : kernels.extent(2);
  return d;
}

}  // namespace

Traced conv1d(GradTape& t, const Traced& x, const Traced& kernels,
              std::size_t stride) {
  Tensor out = conv1d(x.value, kernels.value, stride);
  const ConvDims d = conv_dims(x.value, kernels.value);
  auto vjp = [xv = x.value, kv = kernels.value, d, stride](const Tensor& g) {
    const std::size_t out_len = g.rank() == 1 ? g.extent(0) : g.extent(1);
    std::vector<double> dx(d.c_in * d.len, 0.0);
    std::vector<double> dk(d.c_out * d.c_in * d.k, 0.0);
    const double* gd = g.data();
    const double* xd = xv.data();
    const double* kd = kv.data();
    for (std::size_t o = 0; o < d.c_out; ++o) {
      for (std::size_t j = 0; j < out_len; ++j) {
        const double gv = gd[o * out_len + j];
        const std::size_t base = j * stride;
        for (std::size_t c = 0; c < d.c_in; ++c) {
          double* dxrow = dx.data() + c * d.len + base;
          const double* xrow = xd + c * d.len + base;
          const double* krow = kd + (o * d.c_in + c) * d.k;
          double* dkrow = dk.data() + (o * d.c_in + c) * d.k;
          for (std::size_t i = 0; i < d.k; ++i) {
            dxrow[i] += gv * krow[i];
            dkrow[i] += gv * xrow[i];
          }
        }
      }
    }
    return std::vector<Tensor>{Tensor(xv.shape(), std::move(dx)),
                               Tensor(kv.shape(), std::move(dk))};
  };
  return t.record("conv1d", std::move(out), {x.node, kernels.node}, std::move(vjp));
}

Traced layer_norm(GradTape& t, const Traced& x, const Traced& gain,
                  const Traced& bias, double eps) {
  Tensor out = layer_norm(x.value, gain.value, bias.value, eps);
  auto vjp = [xv = x.value, gv = gain.value, eps](const Tensor& g) {
    const std::size_t d = xv.rank() == 1 ? xv.extent(0) : xv.extent(1);
    const std::size_t rows = xv.numel() / d;
    std::vector<double> dx(xv.numel());
    std::vector<double> dgain(d, 0.0);
    std::vector<double> dbias(d, 0.0);
    const double* xd = xv.data();
    const double* gaind = gv.data();
    const double* gd = g.data();
    std::vector<double> xhat(d), dxhat(d);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* row = xd + r * d;
      const double* grow = gd + r * d;
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
      double m1 = 0.0, m2 = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        xhat[i] = (row[i] - mean) * inv_sd;
        dxhat[i] = grow[i] * gaind[i];
        m1 += dxhat[i];
        m2 += dxhat[i] * xhat[i];
        dgain[i] += grow[i] * xhat[i];
        dbias[i] += grow[i];
      }
      m1 /= static_cast<double>(d);
      m2 /= static_cast<double>(d);
      for (std::size_t i = 0; i < d; ++i) {
        dx[r * d + i] = inv_sd * (dxhat[i] - m1 - xhat[i] * m2);
      }
    }
    return std::vector<Tensor>{Tensor(xv.shape(), std::move(dx)),
                               Tensor({d}, std::move(dgain)),
                               Tensor({d}, std::move(dbias))};
  };
  return t.record("layer_norm", std::move(out), {x.node, gain.node, bias.node},
                  std::move(vjp));
}

Traced softmax(GradTape& t, const Traced& x) {
  Tensor out = softmax(x.value);
  auto vjp = [y = out](const Tensor& g) {
    const std::size_t d = y.rank() == 1 ? y.extent(0) : y.extent(1);
    const std::size_t rows = y.numel() / d;
    std::vector<double> dx(y.numel());
    const double* yd = y.data();
    const double* gd = g.data();
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t i = 0; i < d; ++i) s += gd[r * d + i] * yd[r * d + i];
      for (std::size_t i = 0; i < d; ++i) {
        dx[r * d + i] = yd[r * d + i] * (gd[r * d + i] - s);
      }
    }
    return std::vector<Tensor>{Tensor(y.shape(), std::move(dx))};
  };
  return t.record("softmax", out, {x.node}, std::move(vjp));
}

Traced gelu(GradTape& t, const Traced& x) {
  return t.record("gelu", gelu(x.value), {x.node},
                  [xv = x.value](const Tensor& g) {
                    std::vector<double> dx(xv.numel());
                    const double* xd = xv.data();
                    const double* gd = g.data();
                    for (std::size_t i = 0; i < dx.size(); ++i) {
                      dx[i] = gd[i] * detail::gelu_grad_scalar(xd[i]);
                    }
                    return std::vector<Tensor>{Tensor(xv.shape(), std::move(dx))};
                  });
}

Traced sin(GradTape& t, const Traced& x) {
  return t.record("sin", sin(x.value), {x.node},
                  [xv = x.value](const Tensor& g) {
                    std::vector<double> dx(xv.numel());
                    const double* xd = xv.data();
                    const double* gd = g.data();
                    for (std::size_t i = 0; i < dx.size(); ++i) {
                      dx[i] = gd[i] * std::cos(xd[i]);
                    }
                    return std::vector<Tensor>{Tensor(xv.shape(), std::move(dx))};
                  });
}

Traced exp(GradTape& t, const Traced& x) {
  Tensor out = exp(x.value);
  return t.record("exp", out, {x.node}, [y = out](const Tensor& g) {
    return std::vector<Tensor>{mul(g, y)};
  });
}

namespace {

Traced reduce_traced(GradTape& t, const Traced& x, std::size_t axis, bool mean) {
  Tensor out = mean ? reduce_mean(x.value, axis) : reduce_sum(x.value, axis);
  auto vjp = [shape = x.value.shape(), axis, mean](const Tensor& g) {
    const std::size_t extent = shape[axis];
    const double w = mean ? 1.0 / static_cast<double>(extent) : 1.0;
    std::vector<double> dx(shape_numel(shape));
    const double* gd = g.data();
    if (shape.size() == 1) {
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = gd[0] * w;
    } else {
      const std::size_t rows = shape[0], cols = shape[1];
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          dx[r * cols + c] = (axis == 0 ? gd[c] : gd[r]) * w;
        }
      }
    }
    return std::vector<Tensor>{Tensor(shape, std::move(dx))};
  };
  return t.record(mean ? "reduce_mean" : "reduce_sum", std::move(out), {x.node},
                  std::move(vjp));
}

}  // namespace

Traced reduce_mean(GradTape& t, const Traced& x, std::size_t axis) {
  return reduce_traced(t, x, axis, true);
}

Traced reduce_sum(GradTape& t, const Traced& x, std::size_t axis) {
  return reduce_traced(t, x, axis, false);
}

Traced add_rowvec(GradTape& t, const Traced& x, const Traced& b) {
  return t.record("add_rowvec", add_rowvec(x.value, b.value), {x.node, b.node},
                  [](const Tensor& g) {
                    return std::vector<Tensor>{g, reduce_sum(g, 0)};
                  });
}

Traced slice_cols(GradTape& t, const Traced& x, std::size_t start,
                  std::size_t len) {
  Tensor out = slice_cols(x.value, start, len);
  auto vjp = [shape = x.value.shape(), start, len](const Tensor& g) {
    const std::size_t rows = shape[0], cols = shape[1];
    std::vector<double> dx(rows * cols, 0.0);
    const double* gd = g.data();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < len; ++c) {
        dx[r * cols + start + c] = gd[r * len + c];
      }
    }
    return std::vector<Tensor>{Tensor(shape, std::move(dx))};
  };
  return t.record("slice_cols", std::move(out), {x.node}, std::move(vjp));
}

Traced slice_rows(GradTape& t, const Traced& x, std::size_t start,
                  std::size_t len) {
  Tensor out = slice_rows(x.value, start, len);
  auto vjp = [shape = x.value.shape(), start, len](const Tensor& g) {
    const std::size_t cols = shape[1];
    std::vector<double> dx(shape[0] * cols, 0.0);
    std::copy(g.data(), g.data() + len * cols, dx.data() + start * cols);
    return std::vector<Tensor>{Tensor(shape, std::move(dx))};
  };
  return t.record("slice_rows", std::move(out), {x.node}, std::move(vjp));
}

Traced concat_cols(GradTape& t, std::span<const Traced> parts) {
  std::vector<Tensor> values;
  std::vector<std::size_t> inputs;
  std::vector<std::size_t> widths;
  values.reserve(parts.size());
  for (const Traced& p : parts) {
    values.push_back(p.value);
    inputs.push_back(p.node);
    widths.push_back(p.value.rank() == 2 ? p.value.extent(1) : 0);
  }
  Tensor out = concat_cols(values);
  auto vjp = [widths](const Tensor& g) {
    std::vector<Tensor> grads;
    grads.reserve(widths.size());
    std::size_t off = 0;
    for (std::size_t w : widths) {
      grads.push_back(slice_cols(g, off, w));
      off += w;
    }
    return grads;
  };
  return t.record("concat_cols", std::move(out), std::move(inputs), std::move(vjp));
}

Traced stack_rows(GradTape& t, std::span<const Traced> rows) {
  std::vector<Tensor> values;
  std::vector<std::size_t> inputs;
  values.reserve(rows.size());
  for (const Traced& r : rows) {
    values.push_back(r.value);
    inputs.push_back(r.node);
  }
  Tensor out = stack_rows(values);
  auto vjp = [n = values.size()](const Tensor& g) {
    const std::size_t d = g.extent(1);
    std::vector<Tensor> grads;
    grads.reserve(n);
    const double* gd = g.data();
    for (std::size_t r = 0; r < n; ++r) {
      grads.push_back(Tensor({d}, std::vector<double>(gd + r * d, gd + (r + 1) * d)));
    }
    return grads;
  };
  return t.record("stack_rows", std::move(out), std::move(inputs), std::move(vjp));
}

Traced scale_by(GradTape& t, const Traced& x, const Traced& s) {
  const double sv = s.value.scalar_value();
  Tensor out = scale(x.value, sv);
  auto vjp = [xv = x.value, sv](const Tensor& g) {
    double ds = 0.0;
    const double* gd = g.data();
    const double* xd = xv.data();
    for (std::size_t i = 0; i < xv.numel(); ++i) ds += gd[i] * xd[i];
    return std::vector<Tensor>{scale(g, sv), Tensor::scalar(ds)};
  };
  return t.record("scale_by", std::move(out), {x.node, s.node}, std::move(vjp));
}

namespace {

// d(cosine rows)/d(raw rows): given unit rows ahat [B x d] and the gradient
// w.r.t. ahat, projects out the radial component and rescales by 1/norm.
MatrixRM unnormalize_grad(const MatrixRM& dahat, const MatrixRM& ahat,
                          const Eigen::VectorXd& norms) {
  MatrixRM da(dahat.rows(), dahat.cols());
  for (Eigen::Index r = 0; r < dahat.rows(); ++r) {
    const double radial = ahat.row(r).dot(dahat.row(r));
    da.row(r) = (dahat.row(r) - radial * ahat.row(r)) / norms[r];
  }
  return da;
}

struct CosineParts {
  MatrixRM ahat, bhat;
  Eigen::VectorXd anorm, bnorm;
};

CosineParts cosine_parts(const Tensor& a, const Tensor& b) {
  CosineParts p;
  p.ahat = a.matrix();
  p.bhat = b.matrix();
  p.anorm.resize(p.ahat.rows());
  p.bnorm.resize(p.bhat.rows());
  for (Eigen::Index r = 0; r < p.ahat.rows(); ++r) {
    p.anorm[r] = p.ahat.row(r).norm();
    p.ahat.row(r) /= p.anorm[r];
  }
  for (Eigen::Index r = 0; r < p.bhat.rows(); ++r) {
    p.bnorm[r] = p.bhat.row(r).norm();
    p.bhat.row(r) /= p.bnorm[r];
  }
  return p;
}

}  // namespace

Traced cosine_similarity_matrix(GradTape& t, const Traced& a, const Tensor& b) {
  Tensor out = cosine_similarity_matrix(a.value, b);
  auto vjp = [av = a.value, bv = b](const Tensor& g) {
    const CosineParts p = cosine_parts(av, bv);
    MatrixRM dahat = g.matrix() * p.bhat;
    return std::vector<Tensor>{
        tensor_from_matrix(unnormalize_grad(dahat, p.ahat, p.anorm))};
  };
  return t.record("cosine_similarity_matrix", std::move(out), {a.node},
                  std::move(vjp));
}

Traced cosine_similarity_matrix(GradTape& t, const Traced& a, const Traced& b) {
  Tensor out = cosine_similarity_matrix(a.value, b.value);
  auto vjp = [av = a.value, bv = b.value](const Tensor& g) {
    const CosineParts p = cosine_parts(av, bv);
    MatrixRM dahat = g.matrix() * p.bhat;
    MatrixRM dbhat = g.matrix().transpose() * p.ahat;
    return std::vector<Tensor>{
        tensor_from_matrix(unnormalize_grad(dahat, p.ahat, p.anorm)),
        tensor_from_matrix(unnormalize_grad(dbhat, p.bhat, p.bnorm))};
  };
  return t.record("cosine_similarity_matrix", std::move(out), {a.node, b.node},
                  std::move(vjp));
}

Traced cross_entropy(GradTape& t, const Traced& logits,
                     std::vector<std::size_t> targets) {
  Tensor out = cross_entropy(logits.value, targets);
  auto vjp = [probs = softmax(logits.value),
              targets = std::move(targets)](const Tensor& g) {
    const std::size_t rows = probs.extent(0), cols = probs.extent(1);
    const double w = g.scalar_value() / static_cast<double>(rows);
    std::vector<double> dx(probs.values().begin(), probs.values().end());
    for (std::size_t r = 0; r < rows; ++r) dx[r * cols + targets[r]] -= 1.0;
    for (double& v : dx) v *= w;
    return std::vector<Tensor>{Tensor({rows, cols}, std::move(dx))};
  };
  return t.record("cross_entropy", std::move(out), {logits.node}, std::move(vjp));
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

double finite_diff_check(
    const std::function<Traced(GradTape&, const Traced&)>& f, const Tensor& x,
    double h) {
  if (!(h > 0.0)) throw ContractError("finite_diff_check: h must be positive");

  GradTape tape;
  Traced xt = tape.leaf(x);
  Traced loss = f(tape, xt);
  if (loss.value.numel() != 1) {
    throw ContractError("finite_diff_check: f must be scalar-valued");
  }
  GradMap grads = backward(tape, loss);
  const Tensor g = grads.at(xt.node);

  auto eval = [&f](const Tensor& point) {
    GradTape t2;
    Traced p = t2.leaf(point);
    return f(t2, p).value.scalar_value();
  };

  std::vector<double> base(x.values().begin(), x.values().end());
  double worst = 0.0;
  for (std::size_t i = 0; i < base.size(); ++i) {
    std::vector<double> plus = base, minus = base;
    plus[i] += h;
    minus[i] -= h;
    const double fd =
        (eval(Tensor(x.shape(), std::move(plus))) -
         eval(Tensor(x.shape(), std::move(minus)))) /
        (2.0 * h);
    const double gi = g.at(i);
    const double denom = std::max({std::abs(fd), std::abs(gi), 1e-8});
    worst = std::max(worst, std::abs(fd - gi) / denom);
  }
  return worst;
}

}  // namespace xmd
