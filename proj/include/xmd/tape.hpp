#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "xmd/ops.hpp"
#include "xmd/tensor.hpp"

namespace xmd {

class GradTape;

// A tensor value bound to a tape node. Obtained from GradTape::leaf /
// GradTape::constant or as the output of a traced op.
struct Traced {
  Tensor value;
  std::size_t node = 0;
};

using GradMap = std::unordered_map<std::size_t, Tensor>;

// Ordered record of primitive ops applied to tracked tensors. Appending is
// single-threaded; backward() replays the record once in reverse and then
// marks the tape consumed. Plain Tensor operands of traced ops are constants:
// they never appear in the gradient map.
class GradTape {
 public:
  GradTape() = default;
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  // Tracked input; its gradient appears in the backward result (zeros when
  // it does not influence the loss).
  Traced leaf(Tensor value);

  // Untracked node: participates in the graph but receives no gradient entry.
  Traced constant(Tensor value);

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  // Used by traced op wrappers. vjp maps the output gradient to one gradient
  // per input, aligned with `inputs`. The output value is checked for
  // finiteness: an op that produces NaN/Inf aborts with NumericError.
  Traced record(const char* op, Tensor output, std::vector<std::size_t> inputs,
                std::function<std::vector<Tensor>(const Tensor&)> vjp);

  friend GradMap backward(GradTape& tape, const Traced& loss);

 private:
  struct Node {
    std::vector<std::size_t> inputs;
    std::function<std::vector<Tensor>(const Tensor&)> vjp;  // empty for leaves/constants
    std::vector<std::size_t> shape;  // leaf shape, for zero gradients
    bool is_leaf = false;
  };
  void check_open() const;
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// Reverse accumulation from a scalar loss. Returns one gradient per leaf,
// keyed by node id; consumes the tape. Non-scalar loss is a contract error.
GradMap backward(GradTape& tape, const Traced& loss);

// Traced primitives. Overloads taking a plain Tensor treat that operand as a
// constant (no gradient path).
Traced add(GradTape& t, const Traced& a, const Traced& b);
Traced add(GradTape& t, const Traced& a, const Tensor& b);
Traced sub(GradTape& t, const Traced& a, const Traced& b);
Traced sub(GradTape& t, const Traced& a, const Tensor& b);
Traced sub(GradTape& t, const Tensor& a, const Traced& b);
Traced mul(GradTape& t, const Traced& a, const Traced& b);
Traced mul(GradTape& t, const Traced& a, const Tensor& b);
Traced scale(GradTape& t, const Traced& a, double c);
Traced matmul(GradTape& t, const Traced& a, const Traced& b);
Traced matmul(GradTape& t, const Tensor& a, const Traced& b);
Traced matmul(GradTape& t, const Traced& a, const Tensor& b);
Traced transpose(GradTape& t, const Traced& a);
Traced conv1d(GradTape& t, const Traced& x, const Traced& kernels,
              std::size_t stride);
Traced layer_norm(GradTape& t, const Traced& x, const Traced& gain,
                  const Traced& bias, double eps);
Traced softmax(GradTape& t, const Traced& x);
Traced gelu(GradTape& t, const Traced& x);
Traced sin(GradTape& t, const Traced& x);
Traced exp(GradTape& t, const Traced& x);
Traced reduce_mean(GradTape& t, const Traced& x, std::size_t axis);
Traced reduce_sum(GradTape& t, const Traced& x, std::size_t axis);
Traced add_rowvec(GradTape& t, const Traced& x, const Traced& b);
Traced slice_cols(GradTape& t, const Traced& x, std::size_t start, std::size_t len);
Traced slice_rows(GradTape& t, const Traced& x, std::size_t start, std::size_t len);
Traced concat_cols(GradTape& t, std::span<const Traced> parts);
Traced stack_rows(GradTape& t, std::span<const Traced> rows);
// Multiplies x elementwise by a traced scalar s.
Traced scale_by(GradTape& t, const Traced& x, const Traced& s);
Traced cosine_similarity_matrix(GradTape& t, const Traced& a, const Tensor& b);
Traced cosine_similarity_matrix(GradTape& t, const Traced& a, const Traced& b);
Traced cross_entropy(GradTape& t, const Traced& logits,
                     std::vector<std::size_t> targets);

// Compares backward() against central differences
// (f(x + h e_i) - f(x - h e_i)) / 2h for a scalar-valued f, elementwise.
// Returns the worst relative error, with an absolute floor of 1e-8 in the
// denominator.
double finite_diff_check(
    const std::function<Traced(GradTape&, const Traced&)>& f, const Tensor& x,
    double h);

}  // namespace xmd
