#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "xmd/rng.hpp"
#include "xmd/tape.hpp"

using namespace xmd;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, SeededRng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.normal();
  return Tensor(std::move(shape), std::move(v));
}

// Scalarizes a tensor against a fixed probe so per-primitive checks exercise
// generic output directions.
Traced dot_probe(GradTape& t, const Traced& y, const Tensor& probe) {
  Traced weighted = mul(t, y, probe);
  if (weighted.value.rank() == 2) {
    return reduce_sum(t, reduce_sum(t, weighted, 1), 0);
  }
  if (weighted.value.rank() == 1) return reduce_sum(t, weighted, 0);
  return weighted;
}

constexpr double kFdTol = 1e-4;
constexpr double kH = 1e-5;

}  // namespace

TEST_CASE("backward: sum of squares") {
  GradTape tape;
  Traced x = tape.leaf(Tensor({2}, {1.0, -2.0}));
  Traced sq = mul(tape, x, x);
  Traced loss = reduce_sum(tape, sq, 0);
  GradMap grads = backward(tape, loss);
  const Tensor& g = grads.at(x.node);
  CHECK(g.at(0) == doctest::Approx(2.0));
  CHECK(g.at(1) == doctest::Approx(-4.0));
}

TEST_CASE("backward: constant loss gives empty gradient map") {
  GradTape tape;
  Traced c = tape.constant(Tensor::scalar(3.0));
  GradMap grads = backward(tape, c);
  CHECK(grads.empty());
}

TEST_CASE("backward: unused leaf receives zero gradient") {
  GradTape tape;
  Traced x = tape.leaf(Tensor::scalar(1.0));
  Traced unused = tape.leaf(Tensor({3}, {1, 2, 3}));
  Traced loss = mul(tape, x, x);
  GradMap grads = backward(tape, loss);
  CHECK(grads.size() == 2);
  CHECK(grads.at(unused.node) == Tensor::zeros({3}));
}

TEST_CASE("backward: non-scalar loss is a contract error") {
  GradTape tape;
  Traced x = tape.leaf(Tensor({2}, {1.0, 2.0}));
  Traced y = mul(tape, x, x);
  CHECK_THROWS_AS(backward(tape, y), ContractError);
}

TEST_CASE("backward consumes the tape") {
  GradTape tape;
  Traced x = tape.leaf(Tensor::scalar(2.0));
  Traced loss = mul(tape, x, x);
  backward(tape, loss);
  CHECK(tape.consumed());
  CHECK_THROWS_AS(backward(tape, loss), ContractError);
  CHECK_THROWS_AS(mul(tape, x, x), ContractError);
}

TEST_CASE("gradient accumulates across multiple uses") {
  GradTape tape;
  Traced x = tape.leaf(Tensor::scalar(3.0));
  Traced y = add(tape, x, x);     // y = 2x
  Traced loss = mul(tape, y, x);  // 2x^2, d/dx = 4x = 12
  GradMap grads = backward(tape, loss);
  CHECK(grads.at(x.node).scalar_value() == doctest::Approx(12.0));
}

TEST_CASE("non-finite op output aborts with a diagnostic") {
  GradTape tape;
  Traced x = tape.leaf(Tensor::scalar(1000.0));
  CHECK_THROWS_AS(exp(tape, x), NumericError);
}

TEST_CASE("finite_diff_check: x squared, linear, sum of sines") {
  auto square = [](GradTape& t, const Traced& x) {
    return reduce_sum(t, mul(t, x, x), 0);
  };
  CHECK(finite_diff_check(square, Tensor({1}, {1.0}), 1e-5) < 1e-6);

  auto linear = [](GradTape& t, const Traced& x) {
    Tensor c({4}, {0.5, -1.5, 2.0, 3.0});
    return reduce_sum(t, mul(t, x, c), 0);
  };
  SeededRng rng(2);
  Tensor x4 = random_tensor({4}, rng);
  CHECK(finite_diff_check(linear, x4, 1e-2) < 1e-10);
  CHECK(finite_diff_check(linear, x4, 1e-3) < 1e-10);

  auto sum_sin = [](GradTape& t, const Traced& x) {
    return reduce_sum(t, sin(t, x), 0);
  };
  Tensor xs = random_tensor({6}, rng);
  CHECK(finite_diff_check(sum_sin, xs, 1e-5) < 1e-4);
  // Independent analytic oracle: gradient of sum(sin) is cos.
  GradTape tape;
  Traced xt = tape.leaf(xs);
  GradMap grads = backward(tape, sum_sin(tape, xt));
  for (std::size_t i = 0; i < xs.numel(); ++i) {
    CHECK(grads.at(xt.node).at(i) ==
          doctest::Approx(std::cos(xs.at(i))).epsilon(1e-12));
  }
}

TEST_CASE("finite_diff_check rejects non-positive h and vector losses") {
  auto identity = [](GradTape&, const Traced& x) { return x; };
  CHECK_THROWS_AS(finite_diff_check(identity, Tensor({2}, {1, 2}), 1e-5),
                  ContractError);
  auto square = [](GradTape& t, const Traced& x) {
    return reduce_sum(t, mul(t, x, x), 0);
  };
  CHECK_THROWS_AS(finite_diff_check(square, Tensor({2}, {1, 2}), 0.0),
                  ContractError);
}

TEST_CASE("finite differences validate every differentiable primitive") {
  // 5 seeded points per primitive; worst relative error must stay within 1e-4.
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    SeededRng rng(seed);

    {
      // matmul (both operands)
      Tensor b = random_tensor({3, 2}, rng);
      Tensor probe = random_tensor({2, 2}, rng);
      auto f = [&](GradTape& t, const Traced& x) {
        return dot_probe(t, matmul(t, x, b), probe);
      };
      CHECK(finite_diff_check(f, random_tensor({2, 3}, rng), kH) < kFdTol);

      Tensor a = random_tensor({2, 3}, rng);
      Tensor probe2 = random_tensor({2, 2}, rng);
      auto f2 = [&](GradTape& t, const Traced& x) {
        return dot_probe(t, matmul(t, a, x), probe2);
      };
      CHECK(finite_diff_check(f2, random_tensor({3, 2}, rng), kH) < kFdTol);
    }

    {
      // conv1d (input and kernels); input 3x9, kernels 2x3x3, stride 2 -> 2x4
      Tensor kern = random_tensor({2, 3, 3}, rng);
      Tensor probe = random_tensor({2, 4}, rng);
      auto f = [&](GradTape& t, const Traced& x) {
        Traced k = t.leaf(kern);
        return dot_probe(t, conv1d(t, x, k, 2), probe);
      };
      CHECK(finite_diff_check(f, random_tensor({3, 9}, rng), kH) < kFdTol);

      Tensor x = random_tensor({3, 9}, rng);
      Tensor probe2 = random_tensor({2, 4}, rng);
      auto fk = [&](GradTape& t, const Traced& k) {
        Traced xt = t.leaf(x);
        return dot_probe(t, conv1d(t, xt, k, 2), probe2);
      };
      CHECK(finite_diff_check(fk, kern, kH) < kFdTol);
    }

    {
      // layer_norm (input and gain)
      Tensor gain = random_tensor({5}, rng);
      Tensor bias = random_tensor({5}, rng);
      Tensor probe = random_tensor({2, 5}, rng);
      auto f = [&](GradTape& t, const Traced& x) {
        return dot_probe(t, layer_norm(t, x, t.leaf(gain), t.leaf(bias), 1e-5),
                         probe);
      };
      CHECK(finite_diff_check(f, random_tensor({2, 5}, rng), kH) < kFdTol);

      Tensor x = random_tensor({2, 5}, rng);
      Tensor probe2 = random_tensor({2, 5}, rng);
      auto fg = [&](GradTape& t, const Traced& g) {
        return dot_probe(t, layer_norm(t, t.leaf(x), g, t.leaf(bias), 1e-5),
                         probe2);
      };
      CHECK(finite_diff_check(fg, gain, kH) < kFdTol);
    }

    {
      // softmax
      Tensor probe = random_tensor({2, 6}, rng);
      auto f = [&](GradTape& t, const Traced& x) {
        return dot_probe(t, softmax(t, x), probe);
      };
      CHECK(finite_diff_check(f, random_tensor({2, 6}, rng), kH) < kFdTol);
    }

    {
      // gelu, sin, exp, and an add/sub/scale/mul composite
      Tensor probe = random_tensor({8}, rng);
      auto f = [&](GradTape& t, const Traced& x) {
        return dot_probe(t, gelu(t, x), probe);
      };
      CHECK(finite_diff_check(f, random_tensor({8}, rng), kH) < kFdTol);

      Tensor probe2 = random_tensor({8}, rng);
      auto fs = [&](GradTape& t, const Traced& x) {
        return dot_probe(t, sin(t, x), probe2);
      };
      CHECK(finite_diff_check(fs, random_tensor({8}, rng), kH) < kFdTol);

      Tensor probe3 = random_tensor({8}, rng);
      auto fe = [&](GradTape& t, const Traced& x) {
        return dot_probe(t, exp(t, x), probe3);
      };
      CHECK(finite_diff_check(fe, random_tensor({8}, rng), kH) < kFdTol);

      Tensor other = random_tensor({8}, rng);
      Tensor probe4 = random_tensor({8}, rng);
      auto fm = [&](GradTape& t, const Traced& x) {
        Traced o = t.leaf(other);
        Traced y = add(t, mul(t, x, o), scale(t, sub(t, x, o), 0.5));
        return dot_probe(t, y, probe4);
      };
      CHECK(finite_diff_check(fm, random_tensor({8}, rng), kH) < kFdTol);
    }

    {
      // reductions, transpose, slices, concat, stack, add_rowvec
      Tensor probe = random_tensor({2}, rng);
      auto f = [&](GradTape& t, const Traced& x) {
        Traced tr = transpose(t, x);          // 4x3
        Traced sc = slice_cols(t, tr, 1, 2);  // 4x2
        Traced sr = slice_rows(t, sc, 0, 3);  // 3x2
        std::vector<Traced> parts = {sr, sr};
        Traced cc = concat_cols(t, parts);    // 3x4
        Traced rv = add_rowvec(t, cc, t.constant(Tensor::full({4}, 0.25)));
        Traced m0 = reduce_mean(t, rv, 0);    // [4]
        std::vector<Traced> rows = {m0, m0};
        Traced st = stack_rows(t, rows);      // 2x4
        return dot_probe(t, reduce_sum(t, st, 1), probe);
      };
      CHECK(finite_diff_check(f, random_tensor({3, 4}, rng), kH) < kFdTol);
    }

    {
      // cosine similarity (traced on one and both sides)
      Tensor b = random_tensor({3, 4}, rng);
      Tensor probe = random_tensor({3, 3}, rng);
      auto f = [&](GradTape& t, const Traced& x) {
        return dot_probe(t, cosine_similarity_matrix(t, x, b), probe);
      };
      CHECK(finite_diff_check(f, random_tensor({3, 4}, rng), kH) < kFdTol);

      Tensor probe2 = random_tensor({3, 3}, rng);
      auto f2 = [&](GradTape& t, const Traced& x) {
        Traced xb = t.leaf(b);
        return dot_probe(t, cosine_similarity_matrix(t, x, xb), probe2);
      };
      CHECK(finite_diff_check(f2, random_tensor({3, 4}, rng), kH) < kFdTol);
    }

    {
      // cross_entropy and scale_by
      std::vector<std::size_t> targets = {0, 1, 2};
      auto f = [&](GradTape& t, const Traced& x) {
        return cross_entropy(t, x, targets);
      };
      CHECK(finite_diff_check(f, random_tensor({3, 4}, rng), kH) < kFdTol);

      Tensor x = random_tensor({3, 3}, rng);
      Tensor probe = random_tensor({3, 3}, rng);
      auto fsb = [&](GradTape& t, const Traced& s) {
        Traced xt = t.leaf(x);
        return dot_probe(t, scale_by(t, xt, s), probe);
      };
      CHECK(finite_diff_check(fsb, Tensor::scalar(0.7), kH) < kFdTol);
    }
  }
}

TEST_CASE("composed conv -> norm -> softmax -> dot gradient matches fd") {
  SeededRng rng(99);
  Tensor kern = random_tensor({2, 1, 4}, rng);
  Tensor gain = Tensor::full({5}, 1.0);
  Tensor bias = Tensor::zeros({5});
  Tensor probe = random_tensor({2, 5}, rng);
  auto f = [&](GradTape& t, const Traced& x) {
    Traced k = t.leaf(kern);
    Traced conv = conv1d(t, x, k, 2);  // 2x5
    Traced normed = layer_norm(t, conv, t.leaf(gain), t.leaf(bias), 1e-5);
    Traced sm = softmax(t, normed);
    Traced dotted = mul(t, sm, probe);
    return reduce_sum(t, reduce_sum(t, dotted, 1), 0);
  };
  Tensor x = random_tensor({1, 12}, rng);
  CHECK(finite_diff_check(f, x, 1e-5) < 1e-4);
}
