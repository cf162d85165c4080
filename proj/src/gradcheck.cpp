#include "xmd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>

#include "xmd/distill.hpp"
#include "xmd/model.hpp"
#include "xmd/rng.hpp"
#include "xmd/tape.hpp"

namespace xmd {

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, SeededRng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.normal();
  return Tensor(std::move(shape), std::move(v));
}

Traced dot_probe(GradTape& t, const Traced& y, const Tensor& probe) {
  Traced weighted = mul(t, y, probe);
  if (weighted.value.rank() == 2) {
    return reduce_sum(t, reduce_sum(t, weighted, 1), 0);
  }
  if (weighted.value.rank() == 1) return reduce_sum(t, weighted, 0);
  return weighted;
}

using CheckFn = std::function<double(SeededRng&, double)>;

double composition_check(std::uint64_t seed, double h) {
  StudentConfig cfg;
  cfg.conv_layers = {{8, 10, 5}, {8, 4, 2}};
  cfg.d_model = 8;
  cfg.n_heads = 1;
  cfg.n_layers = 1;
  cfg.d_ff = 16;
  cfg.d_embed = 8;
  cfg.max_positions = 32;
  StudentEncoder enc = StudentEncoder::init(cfg, seed);
  SeededRng rng = SeededRng::derive(seed, 0x636f6d70);
  Tensor signal = random_tensor({64}, rng);
  Tensor target({1, cfg.d_embed}, [&] {
    std::vector<double> v(cfg.d_embed);
    for (double& x : v) x = rng.normal();
    return v;
  }());

  double worst = 0.0;
  for (const auto& [probe_name, probe_tensor] : enc.parameters()) {
    auto f = [&](GradTape& tape, const Traced& x) {
      std::map<std::string, Traced> traced;
      for (const auto& [name, p] : enc.parameters()) {
        traced.emplace(name, name == probe_name ? x : tape.constant(p));
      }
      Traced emb = encode_pooled(tape, cfg, traced, signal);
      std::vector<Traced> rows = {emb};
      return mse_loss(tape, stack_rows(tape, rows), target);
    };
    worst = std::max(worst, finite_diff_check(f, probe_tensor, h));
  }
  return worst;
}

}  // namespace

std::vector<GradCheckResult> run_grad_checks(std::size_t points, double h,
                                             double tol) {
  std::vector<std::pair<std::string, CheckFn>> checks;

  checks.emplace_back("matmul", [](SeededRng& rng, double h) {
    Tensor b = random_tensor({3, 2}, rng);
    Tensor probe = random_tensor({2, 2}, rng);
    Tensor a0 = random_tensor({2, 3}, rng);
    auto f = [&](GradTape& t, const Traced& x) {
      return dot_probe(t, matmul(t, x, b), probe);
    };
    double worst = finite_diff_check(f, a0, h);
    Tensor a = random_tensor({2, 3}, rng);
    Tensor probe2 = random_tensor({2, 2}, rng);
    auto f2 = [&](GradTape& t, const Traced& x) {
      return dot_probe(t, matmul(t, a, x), probe2);
    };
    return std::max(worst, finite_diff_check(f2, random_tensor({3, 2}, rng), h));
  });

  checks.emplace_back("conv1d", [](SeededRng& rng, double h) {
    Tensor kern = random_tensor({2, 3, 3}, rng);
    Tensor probe = random_tensor({2, 4}, rng);
    Tensor x0 = random_tensor({3, 9}, rng);
    auto f = [&](GradTape& t, const Traced& x) {
      Traced k = t.leaf(kern);
      return dot_probe(t, conv1d(t, x, k, 2), probe);
    };
    double worst = finite_diff_check(f, x0, h);
    Tensor x = random_tensor({3, 9}, rng);
    Tensor probe2 = random_tensor({2, 4}, rng);
    auto fk = [&](GradTape& t, const Traced& k) {
      Traced xt = t.leaf(x);
      return dot_probe(t, conv1d(t, xt, k, 2), probe2);
    };
    return std::max(worst, finite_diff_check(fk, kern, h));
  });

  checks.emplace_back("layer_norm", [](SeededRng& rng, double h) {
    Tensor gain = random_tensor({5}, rng);
    Tensor bias = random_tensor({5}, rng);
    Tensor probe = random_tensor({2, 5}, rng);
    Tensor x0 = random_tensor({2, 5}, rng);
    auto f = [&](GradTape& t, const Traced& x) {
      return dot_probe(t, layer_norm(t, x, t.leaf(gain), t.leaf(bias), 1e-5),
                       probe);
    };
    double worst = finite_diff_check(f, x0, h);
    Tensor x = random_tensor({2, 5}, rng);
    Tensor probe2 = random_tensor({2, 5}, rng);
    auto fg = [&](GradTape& t, const Traced& g) {
      return dot_probe(t, layer_norm(t, t.leaf(x), g, t.leaf(bias), 1e-5),
                       probe2);
    };
    return std::max(worst, finite_diff_check(fg, gain, h));
  });

  checks.emplace_back("softmax", [](SeededRng& rng, double h) {
    Tensor probe = random_tensor({2, 6}, rng);
    auto f = [&](GradTape& t, const Traced& x) {
      return dot_probe(t, softmax(t, x), probe);
    };
    return finite_diff_check(f, random_tensor({2, 6}, rng), h);
  });

  checks.emplace_back("gelu", [](SeededRng& rng, double h) {
    Tensor probe = random_tensor({8}, rng);
    auto f = [&](GradTape& t, const Traced& x) {
      return dot_probe(t, gelu(t, x), probe);
    };
    return finite_diff_check(f, random_tensor({8}, rng), h);
  });

  checks.emplace_back("sin", [](SeededRng& rng, double h) {
    Tensor probe = random_tensor({8}, rng);
    auto f = [&](GradTape& t, const Traced& x) {
      return dot_probe(t, sin(t, x), probe);
    };
    return finite_diff_check(f, random_tensor({8}, rng), h);
  });

  checks.emplace_back("exp", [](SeededRng& rng, double h) {
    Tensor probe = random_tensor({8}, rng);
    auto f = [&](GradTape& t, const Traced& x) {
      return dot_probe(t, exp(t, x), probe);
    };
    return finite_diff_check(f, random_tensor({8}, rng), h);
  });

  checks.emplace_back("elementwise", [](SeededRng& rng, double h) {
    Tensor other = random_tensor({8}, rng);
    Tensor probe = random_tensor({8}, rng);
    auto f = [&](GradTape& t, const Traced& x) {
      Traced o = t.leaf(other);
      Traced y = add(t, mul(t, x, o), scale(t, sub(t, x, o), 0.5));
      return dot_probe(t, y, probe);
    };
    return finite_diff_check(f, random_tensor({8}, rng), h);
  });

  checks.emplace_back("reduce_reshape", [](SeededRng& rng, double h) {
    Tensor probe = random_tensor({2}, rng);
    auto f = [&](GradTape& t, const Traced& x) {
      Traced tr = transpose(t, x);
      Traced sc = slice_cols(t, tr, 1, 2);
      Traced sr = slice_rows(t, sc, 0, 3);
      std::vector<Traced> parts = {sr, sr};
      Traced cc = concat_cols(t, parts);
      Traced rv = add_rowvec(t, cc, t.constant(Tensor::full({4}, 0.25)));
      Traced m0 = reduce_mean(t, rv, 0);
      std::vector<Traced> rows = {m0, m0};
      Traced st = stack_rows(t, rows);
      return dot_probe(t, reduce_sum(t, st, 1), probe);
    };
    return finite_diff_check(f, random_tensor({3, 4}, rng), h);
  });

  checks.emplace_back("cosine_similarity", [](SeededRng& rng, double h) {
    Tensor b = random_tensor({3, 4}, rng);
    Tensor probe = random_tensor({3, 3}, rng);
    Tensor a0 = random_tensor({3, 4}, rng);
    auto f = [&](GradTape& t, const Traced& x) {
      return dot_probe(t, cosine_similarity_matrix(t, x, b), probe);
    };
    double worst = finite_diff_check(f, a0, h);
    Tensor probe2 = random_tensor({3, 3}, rng);
    auto f2 = [&](GradTape& t, const Traced& x) {
      Traced xb = t.leaf(b);
      return dot_probe(t, cosine_similarity_matrix(t, x, xb), probe2);
    };
    return std::max(worst, finite_diff_check(f2, random_tensor({3, 4}, rng), h));
  });

  checks.emplace_back("cross_entropy", [](SeededRng& rng, double h) {
    std::vector<std::size_t> targets = {0, 1, 2};
    auto f = [&](GradTape& t, const Traced& x) {
      return cross_entropy(t, x, targets);
    };
    return finite_diff_check(f, random_tensor({3, 4}, rng), h);
  });

  checks.emplace_back("scale_by", [](SeededRng& rng, double h) {
    Tensor x = random_tensor({3, 3}, rng);
    Tensor probe = random_tensor({3, 3}, rng);
    auto f = [&](GradTape& t, const Traced& s) {
      Traced xt = t.leaf(x);
      return dot_probe(t, scale_by(t, xt, s), probe);
    };
    return finite_diff_check(f, Tensor::scalar(0.7), h);
  });

  checks.emplace_back("mse_loss", [](SeededRng& rng, double h) {
    Tensor teacher = random_tensor({3, 4}, rng);
    auto f = [&](GradTape& t, const Traced& x) { return mse_loss(t, x, teacher); };
    return finite_diff_check(f, random_tensor({3, 4}, rng), h);
  });

  checks.emplace_back("infonce_loss", [](SeededRng& rng, double h) {
    Tensor teacher = random_tensor({4, 5}, rng);
    Tensor student = random_tensor({4, 5}, rng);
    const double log_tau = std::log(0.3);
    auto f = [&](GradTape& t, const Traced& x) {
      Traced lt = t.constant(Tensor::scalar(log_tau));
      return infonce_loss(t, x, teacher, lt);
    };
    double worst = finite_diff_check(f, student, h);
    auto ft = [&](GradTape& t, const Traced& lt) {
      Traced s = t.leaf(student);
      return infonce_loss(t, s, teacher, lt);
    };
    return std::max(worst, finite_diff_check(ft, Tensor::scalar(log_tau), h));
  });

  std::vector<GradCheckResult> results;
  for (const auto& [name, fn] : checks) {
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= points; ++seed) {
      SeededRng rng(seed);
      worst = std::max(worst, fn(rng, h));
    }
    results.push_back({name, worst, worst <= tol});
  }

  double comp_worst = 0.0;
  for (std::uint64_t seed = 1; seed <= points; ++seed) {
    comp_worst = std::max(comp_worst, composition_check(seed, h));
  }
  results.push_back({"encode_pool_mse_composition", comp_worst, comp_worst <= tol});
  return results;
}

}  // namespace xmd
