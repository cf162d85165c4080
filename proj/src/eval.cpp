#include "xmd/eval.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "xmd/ops.hpp"
#include "xmd/util.hpp"

namespace xmd {

void RidgeConfig::validate() const {
  if (!std::isfinite(alpha) || alpha < 0.0) {
    throw ConfigError("ridge config: alpha must be finite and >= 0");
  }
}

Tensor ridge_fit(const Tensor& x, const Tensor& y, const RidgeConfig& config,
                 bool fit_bias) {
  config.validate();
  if (x.rank() != 2) throw DimensionError("ridge_fit: X must be rank 2");
  const std::size_t n = x.extent(0), d = x.extent(1);
  if (n < 1) throw DimensionError("ridge_fit: need at least one row");
  Tensor ymat = y;
  if (y.rank() == 1) {
    ymat = Tensor({y.extent(0), 1},
                  std::vector<double>(y.values().begin(), y.values().end()));
  }
  if (ymat.rank() != 2 || ymat.extent(0) != n) {
    throw DimensionError("ridge_fit: y shape " + y.shape_str() +
                         " does not match X rows " + std::to_string(n));
  }

  const std::size_t cols = fit_bias ? d + 1 : d;
  MatrixRM a(n, cols);
  a.leftCols(static_cast<Eigen::Index>(d)) = x.matrix();
  if (fit_bias) a.col(static_cast<Eigen::Index>(d)).setOnes();

  Eigen::MatrixXd gram = a.transpose() * a;
  for (std::size_t i = 0; i < d; ++i) {
    gram(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) += config.alpha;
  }
  // bias row (when present) is excluded from the penalty

  Eigen::FullPivLU<Eigen::MatrixXd> lu(gram);
  if (!lu.isInvertible()) {
    throw NumericError("ridge_fit: singular system (alpha " +
                       format_double(config.alpha) + ", rank-deficient X)");
  }
  Eigen::MatrixXd rhs = a.transpose() * ymat.matrix();
  MatrixRM w = lu.solve(rhs);
  return tensor_from_matrix(w);
}

Tensor ridge_predict(const Tensor& x, const Tensor& weights, bool has_bias) {
  if (x.rank() != 2 || weights.rank() != 2) {
    throw DimensionError("ridge_predict: rank-2 operands required");
  }
  const std::size_t d = x.extent(1);
  if (weights.extent(0) != d + (has_bias ? 1 : 0)) {
    throw DimensionError("ridge_predict: weight rows " +
                         std::to_string(weights.extent(0)) +
                         " do not match feature width " + std::to_string(d));
  }
  MatrixRM w = weights.matrix();
  MatrixRM out = x.matrix() * w.topRows(static_cast<Eigen::Index>(d));
  if (has_bias) out.rowwise() += w.row(static_cast<Eigen::Index>(d));
  return tensor_from_matrix(out);
}

std::vector<std::size_t> sample_k_shot(const std::vector<PairedExample>& dataset,
                                       const FewShotSpec& spec) {
  if (spec.k == 0) throw ConfigError("sample_k_shot: k must be >= 1");
  std::map<int, std::vector<std::size_t>> pools;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    pools[class_label(dataset[i])].push_back(i);
  }
  std::vector<std::size_t> out;
  out.reserve(spec.k * spec.classes.size());
  for (int cls : spec.classes) {
    auto it = pools.find(cls);
    const std::size_t available = it == pools.end() ? 0 : it->second.size();
    if (available < spec.k) {
      throw DataError("insufficient data: class " + std::to_string(cls) +
                      " has " + std::to_string(available) + " examples, need " +
                      std::to_string(spec.k));
    }
    std::vector<std::size_t>& pool = it->second;
    SeededRng rng = SeededRng::derive(spec.seed,
                                      0x6b73686f74ULL ^ static_cast<std::uint64_t>(cls));
    // partial Fisher-Yates: the first k entries are the draw
    for (std::size_t i = 0; i < spec.k; ++i) {
      const std::size_t j = i + rng.uniform_int(pool.size() - i);
      std::swap(pool[i], pool[j]);
      out.push_back(pool[i]);
    }
  }
  return out;
}

int retrofit_round(double pred, int lo, int hi) {
  if (lo >= hi) throw ContractError("retrofit_round: need lo < hi");
  const double rounded = std::round(pred);  // half away from zero
  const double clamped = std::clamp(rounded, static_cast<double>(lo),
                                    static_cast<double>(hi));
  return static_cast<int>(clamped);
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

namespace {

void require_same_nonempty(std::size_t a, std::size_t b, const char* op) {
  if (a != b) {
    throw ContractError(std::string(op) + ": length mismatch " +
                        std::to_string(a) + " vs " + std::to_string(b));
  }
  if (a == 0) throw ContractError(std::string(op) + ": empty input");
}

}  // namespace

double metric_mae(std::span<const double> pred, std::span<const double> target) {
  require_same_nonempty(pred.size(), target.size(), "metric_mae");
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    total += std::abs(pred[i] - target[i]);
  }
  return total / static_cast<double>(pred.size());
}

double metric_pearson(std::span<const double> pred,
                      std::span<const double> target) {
  require_same_nonempty(pred.size(), target.size(), "metric_pearson");
  const std::size_t n = pred.size();
  if (n < 2) throw ContractError("metric_pearson: need at least two points");
  double mp = 0.0, mt = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mp += pred[i];
    mt += target[i];
  }
  mp /= static_cast<double>(n);
  mt /= static_cast<double>(n);
  double cov = 0.0, vp = 0.0, vt = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dp = pred[i] - mp, dt = target[i] - mt;
    cov += dp * dt;
    vp += dp * dp;
    vt += dt * dt;
  }
  if (vp == 0.0 || vt == 0.0) {
    throw NumericError("metric_pearson: undefined correlation for constant input");
  }
  return cov / std::sqrt(vp * vt);
}

double metric_weighted_f1(std::span<const int> pred, std::span<const int> target) {
  require_same_nonempty(pred.size(), target.size(), "metric_weighted_f1");
  std::set<int> classes(target.begin(), target.end());
  classes.insert(pred.begin(), pred.end());
  double weighted = 0.0;
  std::size_t total_support = 0;
  for (int cls : classes) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const bool p = pred[i] == cls, t = target[i] == cls;
      if (p && t) ++tp;
      if (p && !t) ++fp;
      if (!p && t) ++fn;
    }
    const std::size_t support = tp + fn;
    total_support += support;
    const std::size_t denom = 2 * tp + fp + fn;  // precision+recall == 0 iff 0
    const double f1 =
        denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
    weighted += f1 * static_cast<double>(support);
  }
  return weighted / static_cast<double>(total_support);
}

double metric_accuracy(std::span<const int> pred, std::span<const int> target) {
  require_same_nonempty(pred.size(), target.size(), "metric_accuracy");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] == target[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

double metric_exact_match(std::span<const std::vector<int>> pred,
                          std::span<const std::vector<int>> target) {
  require_same_nonempty(pred.size(), target.size(), "metric_exact_match");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i].size() != target[i].size()) {
      throw ContractError("metric_exact_match: head arity mismatch at example " +
                          std::to_string(i));
    }
    if (pred[i] == target[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

// ---------------------------------------------------------------------------
// Probes
// ---------------------------------------------------------------------------

nlohmann::json MetricReport::to_json() const {
  nlohmann::json j{{"task", task},
                   {"metrics", metrics},
                   {"provenance",
                    {{"seed", seed},
                     {"config_digest", config_digest},
                     {"checkpoint_step", checkpoint_step}}}};
  if (!variant.empty()) j["variant"] = variant;
  return j;
}

double regression_label(const PairedExample& ex) {
  if (!ex.label || !std::holds_alternative<double>(*ex.label)) {
    throw DataError("example \"" + ex.id + "\" has no regression label");
  }
  return std::get<double>(*ex.label);
}

int class_label(const PairedExample& ex) {
  if (!ex.label || !std::holds_alternative<int>(*ex.label)) {
    throw DataError("example \"" + ex.id + "\" has no class label");
  }
  return std::get<int>(*ex.label);
}

SplitIndices split_dataset(std::size_t count, std::uint64_t seed) {
  if (count < 5) throw DataError("split_dataset: need at least 5 examples");
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  SeededRng rng = SeededRng::derive(seed, 0x73706c6974ULL);  // "split"
  for (std::size_t i = count; i > 1; --i) {
    const std::size_t j = rng.uniform_int(i);
    std::swap(order[i - 1], order[j]);
  }
  const std::size_t n_train = count * 6 / 10;
  const std::size_t n_dev = count * 2 / 10;
  SplitIndices s;
  s.train.assign(order.begin(), order.begin() + n_train);
  s.dev.assign(order.begin() + n_train, order.begin() + n_train + n_dev);
  s.test.assign(order.begin() + n_train + n_dev, order.end());
  return s;
}

Tensor embed_dataset(const StudentEncoder& enc,
                     const std::vector<PairedExample>& examples,
                     std::size_t threads) {
  if (examples.empty()) throw ContractError("embed_dataset: empty example set");
  std::vector<Tensor> rows(examples.size());
  parallel_for_indexed(examples.size(), threads, [&](std::size_t i) {
    rows[i] = embed_signal(enc, examples[i].signal);
  });
  return stack_rows(rows);
}

namespace {

std::vector<PairedExample> take(const std::vector<PairedExample>& ds,
                                const std::vector<std::size_t>& idx) {
  std::vector<PairedExample> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(ds[i]);
  return out;
}

Tensor one_hot(std::span<const int> labels, std::size_t n_classes) {
  std::vector<double> data(labels.size() * n_classes, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int c = labels[i];
    if (c < 0 || static_cast<std::size_t>(c) >= n_classes) {
      throw DataError("class label " + std::to_string(c) + " outside [0, " +
                      std::to_string(n_classes) + ")");
    }
    data[i * n_classes + static_cast<std::size_t>(c)] = 1.0;
  }
  return Tensor({labels.size(), n_classes}, std::move(data));
}

std::vector<int> argmax_rows(const Tensor& scores) {
  const std::size_t rows = scores.extent(0), cols = scores.extent(1);
  std::vector<int> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < cols; ++c) {
      if (scores.at(r * cols + c) > scores.at(r * cols + best)) best = c;
    }
    out[r] = static_cast<int>(best);
  }
  return out;
}

// Regression metric block: MAE/Pearson on the raw predictions plus the
// rounding retrofit to the seven-class setup ([-3, 3], Acc7/F1) and the
// sign split (Acc2: rounded prediction >= 0 vs < 0).
std::map<std::string, double> regression_metrics(std::span<const double> pred,
                                                 std::span<const double> target) {
  std::map<std::string, double> m;
  m["mae"] = metric_mae(pred, target);
  m["pearson"] = metric_pearson(pred, target);
  std::vector<int> pred7(pred.size()), target7(target.size());
  std::vector<int> pred2(pred.size()), target2(target.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    pred7[i] = retrofit_round(pred[i], -3, 3);
    target7[i] = retrofit_round(target[i], -3, 3);
    pred2[i] = pred7[i] >= 0 ? 1 : 0;
    target2[i] = target7[i] >= 0 ? 1 : 0;
  }
  m["acc7"] = metric_accuracy(pred7, target7);
  m["acc2"] = metric_accuracy(pred2, target2);
  m["weighted_f1"] = metric_weighted_f1(pred7, target7);
  return m;
}

std::map<std::string, double> classification_metrics(std::span<const int> pred,
                                                     std::span<const int> target) {
  std::map<std::string, double> m;
  m["accuracy"] = metric_accuracy(pred, target);
  m["weighted_f1"] = metric_weighted_f1(pred, target);
  return m;
}

std::vector<double> column(const Tensor& t, std::size_t col) {
  std::vector<double> out(t.extent(0));
  for (std::size_t r = 0; r < t.extent(0); ++r) out[r] = t.at(r * t.extent(1) + col);
  return out;
}

MetricReport evaluate_ridge(const Tensor& train_x,
                            const std::vector<PairedExample>& train_examples,
                            const Tensor& test_x,
                            const std::vector<PairedExample>& test_examples,
                            const ProbeConfig& config) {
  MetricReport report;
  report.seed = config.seed;
  report.checkpoint_step = config.checkpoint_step;
  if (config.task == ProbeTask::Regression) {
    report.task = "regression";
    std::vector<double> y_train(train_examples.size());
    for (std::size_t i = 0; i < train_examples.size(); ++i) {
      y_train[i] = regression_label(train_examples[i]);
    }
    const std::size_t n = y_train.size();
    Tensor w = ridge_fit(train_x, Tensor({n}, std::move(y_train)), config.ridge);
    Tensor pred = ridge_predict(test_x, w);
    std::vector<double> y_test(test_examples.size());
    for (std::size_t i = 0; i < test_examples.size(); ++i) {
      y_test[i] = regression_label(test_examples[i]);
    }
    report.metrics = regression_metrics(column(pred, 0), y_test);
  } else {
    report.task = "classification";
    std::vector<int> y_train(train_examples.size());
    for (std::size_t i = 0; i < train_examples.size(); ++i) {
      y_train[i] = class_label(train_examples[i]);
    }
    Tensor w = ridge_fit(train_x, one_hot(y_train, config.n_classes), config.ridge);
    Tensor scores = ridge_predict(test_x, w);
    std::vector<int> pred = argmax_rows(scores);
    std::vector<int> y_test(test_examples.size());
    for (std::size_t i = 0; i < test_examples.size(); ++i) {
      y_test[i] = class_label(test_examples[i]);
    }
    report.metrics = classification_metrics(pred, y_test);
  }
  return report;
}

}  // namespace

MetricReport run_probe(const StudentEncoder& enc,
                       const std::vector<PairedExample>& dataset,
                       const ProbeConfig& config) {
  const SplitIndices split = split_dataset(dataset.size(), config.seed);
  const std::vector<PairedExample> train = take(dataset, split.train);
  const std::vector<PairedExample> test = take(dataset, split.test);
  Tensor train_x = embed_dataset(enc, train, config.threads);
  Tensor test_x = embed_dataset(enc, test, config.threads);
  MetricReport report = evaluate_ridge(train_x, train, test_x, test, config);
  report.config_digest = digest_hex(enc.config().digest());
  return report;
}

MetricReport run_probe_k_shot(const StudentEncoder& enc,
                              const std::vector<PairedExample>& dataset,
                              const ProbeConfig& config, std::size_t k,
                              std::uint64_t shot_seed) {
  const SplitIndices split = split_dataset(dataset.size(), config.seed);
  std::vector<PairedExample> pool = take(dataset, split.train);
  const std::vector<PairedExample> test = take(dataset, split.test);

  // The k-shot draw operates on class labels; the regression path derives
  // its seven classes through the rounding retrofit.
  std::vector<PairedExample> train_pool = pool;
  if (config.task == ProbeTask::Regression) {
    for (PairedExample& ex : train_pool) {
      ex.label = Label(retrofit_round(regression_label(ex), -3, 3));
    }
  }
  FewShotSpec spec;
  spec.k = k;
  spec.seed = shot_seed;
  std::set<int> classes;
  for (const PairedExample& ex : train_pool) classes.insert(class_label(ex));
  spec.classes.assign(classes.begin(), classes.end());
  const std::vector<std::size_t> chosen = sample_k_shot(train_pool, spec);

  std::vector<PairedExample> train = take(pool, chosen);
  Tensor train_x = embed_dataset(enc, train, config.threads);
  Tensor test_x = embed_dataset(enc, test, config.threads);
  MetricReport report = evaluate_ridge(train_x, train, test_x, test, config);
  report.seed = shot_seed;
  report.config_digest = digest_hex(enc.config().digest());
  report.metrics["k"] = static_cast<double>(k);
  return report;
}

// ---------------------------------------------------------------------------
// Fine-tuned heads
// ---------------------------------------------------------------------------

namespace {

struct HeadSnapshot {
  std::map<std::string, Tensor> params;
  std::uint64_t step = 0;
};

std::map<std::string, double> evaluate_head_snapshot(
    const StudentEncoder& base, const FinetuneConfig& config,
    const std::map<std::string, Tensor>& params,
    const std::vector<PairedExample>& test) {
  StudentEncoder enc = base;
  if (!config.freeze_encoder) {
    std::map<std::string, Tensor> enc_params;
    for (const auto& [name, t] : params) {
      if (!name.starts_with("head.")) enc_params.emplace(name, t);
    }
    enc.set_parameters(std::move(enc_params));
  }
  Tensor x = embed_dataset(enc, test, config.threads);
  Tensor scores = add_rowvec(matmul(x, params.at("head.weight")),
                             params.at("head.bias"));
  if (config.task == ProbeTask::Regression) {
    std::vector<double> y(test.size());
    for (std::size_t i = 0; i < test.size(); ++i) y[i] = regression_label(test[i]);
    return regression_metrics(column(scores, 0), y);
  }
  std::vector<int> y(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) y[i] = class_label(test[i]);
  return classification_metrics(argmax_rows(scores), y);
}

double head_loss_on(const StudentEncoder& base, const FinetuneConfig& config,
                    const std::map<std::string, Tensor>& params,
                    const std::vector<PairedExample>& examples) {
  StudentEncoder enc = base;
  if (!config.freeze_encoder) {
    std::map<std::string, Tensor> enc_params;
    for (const auto& [name, t] : params) {
      if (!name.starts_with("head.")) enc_params.emplace(name, t);
    }
    enc.set_parameters(std::move(enc_params));
  }
  Tensor x = embed_dataset(enc, examples, config.threads);
  Tensor scores = add_rowvec(matmul(x, params.at("head.weight")),
                             params.at("head.bias"));
  if (config.task == ProbeTask::Regression) {
    std::vector<double> y(examples.size());
    for (std::size_t i = 0; i < examples.size(); ++i) {
      y[i] = regression_label(examples[i]);
    }
    const std::size_t n = y.size();
    Tensor target({n, 1}, std::move(y));
    return mse_loss(scores, target);
  }
  std::vector<std::size_t> y(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    y[i] = static_cast<std::size_t>(class_label(examples[i]));
  }
  return cross_entropy(scores, y).scalar_value();
}

}  // namespace

FinetuneResult run_finetune_head(const StudentEncoder& enc,
                                 const std::vector<PairedExample>& dataset,
                                 const FinetuneConfig& config) {
  config.train.validate();
  const StudentConfig& cfg = enc.config();
  const std::size_t n_out =
      config.task == ProbeTask::Regression ? 1 : config.n_classes;

  const SplitIndices split = split_dataset(dataset.size(), config.train.seed);
  const std::vector<PairedExample> train = take(dataset, split.train);
  const std::vector<PairedExample> dev = take(dataset, split.dev);
  const std::vector<PairedExample> test = take(dataset, split.test);
  if (train.size() < config.train.batch_size) {
    throw ConfigError("run_finetune_head: train split smaller than one batch");
  }

  // Working parameter map: the head plus, unless frozen, the encoder.
  std::map<std::string, Tensor> params;
  {
    SeededRng rng = SeededRng::derive(config.train.seed, 0x68656164ULL);  // "head"
    const double bound =
        std::sqrt(6.0 / static_cast<double>(cfg.d_embed + n_out));
    std::vector<double> w(cfg.d_embed * n_out);
    for (double& v : w) v = rng.uniform(-bound, bound);
    params.emplace("head.weight", Tensor({cfg.d_embed, n_out}, std::move(w)));
    params.emplace("head.bias", Tensor::zeros({n_out}));
  }
  if (!config.freeze_encoder) {
    for (const auto& [name, t] : enc.parameters()) params.emplace(name, t);
  }

  FinetuneResult result;
  result.trainable_parameters = 0;
  for (const auto& [name, t] : params) result.trainable_parameters += t.numel();

  OptimState opt;
  std::vector<HeadSnapshot> snapshots;
  auto snapshot = [&](std::uint64_t step) {
    if (!snapshots.empty() && snapshots.back().step == step) return;
    snapshots.push_back(HeadSnapshot{params, step});
  };

  std::uint64_t step = 0, epoch = 0;
  while (step < config.train.total_steps) {
    const std::vector<Batch> batches = iterate_batches(
        train, config.train.batch_size, config.train.seed, epoch, false);
    for (const Batch& batch : batches) {
      if (step >= config.train.total_steps) break;
      step += 1;
      const double lr = lr_at_step(config.train, step);

      GradTape tape;
      std::map<std::string, Traced> traced;
      for (const auto& [name, p] : params) traced.emplace(name, tape.leaf(p));

      std::vector<Traced> rows;
      rows.reserve(batch.examples.size());
      for (const PairedExample& ex : batch.examples) {
        if (config.freeze_encoder) {
          rows.push_back(tape.constant(embed_signal(enc, ex.signal)));
        } else {
          rows.push_back(encode_pooled(tape, cfg, traced, ex.signal));
        }
      }
      Traced x = stack_rows(tape, rows);
      Traced scores = add_rowvec(tape, matmul(tape, x, traced.at("head.weight")),
                                 traced.at("head.bias"));

      Traced loss;
      if (config.task == ProbeTask::Regression) {
        std::vector<double> y(batch.examples.size());
        for (std::size_t i = 0; i < batch.examples.size(); ++i) {
          y[i] = regression_label(batch.examples[i]);
        }
        const std::size_t n = y.size();
        loss = mse_loss(tape, scores, Tensor({n, 1}, std::move(y)));
      } else {
        std::vector<std::size_t> y(batch.examples.size());
        for (std::size_t i = 0; i < batch.examples.size(); ++i) {
          y[i] = static_cast<std::size_t>(class_label(batch.examples[i]));
        }
        loss = cross_entropy(tape, scores, std::move(y));
      }
      result.step_losses.push_back(loss.value.scalar_value());

      GradMap grad_by_node = backward(tape, loss);
      std::map<std::string, Tensor> grads;
      for (const auto& [name, tr] : traced) {
        grads.emplace(name, grad_by_node.at(tr.node));
      }
      adamw_step(params, grads, opt, lr, config.train);

      if (step % config.train.checkpoint_every == 0) snapshot(step);
    }
    epoch += 1;
  }
  snapshot(step);

  // Best snapshot by dev loss, evaluated on the test split.
  std::size_t best_idx = 0;
  double best_dev = head_loss_on(enc, config, snapshots[0].params, dev);
  for (std::size_t i = 1; i < snapshots.size(); ++i) {
    const double dev_loss = head_loss_on(enc, config, snapshots[i].params, dev);
    if (dev_loss < best_dev) {
      best_dev = dev_loss;
      best_idx = i;
    }
  }
  const std::string task_name =
      config.task == ProbeTask::Regression ? "regression" : "classification";
  result.best.task = task_name;
  result.best.variant = "best";
  result.best.seed = config.train.seed;
  result.best.config_digest = digest_hex(cfg.digest());
  result.best.checkpoint_step = snapshots[best_idx].step;
  result.best.metrics =
      evaluate_head_snapshot(enc, config, snapshots[best_idx].params, test);

  if (config.train.average_last_k > 1 && snapshots.size() > 1) {
    const std::size_t k =
        std::min<std::size_t>(config.train.average_last_k, snapshots.size());
    // anchored mean across snapshots, mirroring checkpoint averaging
    std::map<std::string, Tensor> averaged;
    const auto& anchor = snapshots[snapshots.size() - k].params;
    for (const auto& [name, a] : anchor) {
      std::vector<double> delta(a.numel(), 0.0);
      for (std::size_t s = snapshots.size() - k; s < snapshots.size(); ++s) {
        const double* sd = snapshots[s].params.at(name).data();
        const double* ad = a.data();
        for (std::size_t i = 0; i < delta.size(); ++i) delta[i] += sd[i] - ad[i];
      }
      std::vector<double> mean(a.numel());
      const double* ad = a.data();
      for (std::size_t i = 0; i < mean.size(); ++i) {
        mean[i] = ad[i] + delta[i] / static_cast<double>(k);
      }
      averaged.emplace(name, Tensor(a.shape(), std::move(mean)));
    }
    MetricReport avg;
    avg.task = task_name;
    avg.variant = "averaged";
    avg.seed = config.train.seed;
    avg.config_digest = digest_hex(cfg.digest());
    avg.checkpoint_step = snapshots.back().step;
    avg.metrics = evaluate_head_snapshot(enc, config, averaged, test);
    result.averaged = avg;
  }
  return result;
}

}  // namespace xmd
