#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "xmd/data.hpp"
#include "xmd/distill.hpp"
#include "xmd/model.hpp"
#include "xmd/tensor.hpp"

namespace xmd {

struct RidgeConfig {
  double alpha = 100.0;

  void validate() const;
};

// Solves (X'X + alpha I) w = X'y by a direct dense method. With fit_bias a
// column of ones is appended and the bias row is excluded from the penalty;
// the result is [(d+1) x m] with the bias last. A singular system (alpha 0,
// rank-deficient X) is an error.
Tensor ridge_fit(const Tensor& x, const Tensor& y, const RidgeConfig& config,
                 bool fit_bias = true);

// Applies ridge weights; has_bias must match the fit.
Tensor ridge_predict(const Tensor& x, const Tensor& weights, bool has_bias = true);

struct FewShotSpec {
  std::size_t k = 1;
  std::vector<int> classes;
  std::uint64_t seed = 0;
};

// Exactly k examples per class, drawn without replacement, deterministic in
// the seed. A class with fewer than k examples is an insufficient-data error
// naming the class. Returns indices into the dataset.
std::vector<std::size_t> sample_k_shot(const std::vector<PairedExample>& dataset,
                                       const FewShotSpec& spec);

// Round half away from zero, clamped to [lo, hi].
int retrofit_round(double pred, int lo, int hi);

double metric_mae(std::span<const double> pred, std::span<const double> target);
// Sample Pearson r; constant input is an undefined-correlation error.
double metric_pearson(std::span<const double> pred, std::span<const double> target);
// Per-class F1 (0 when precision+recall is 0), weighted by true-class support.
double metric_weighted_f1(std::span<const int> pred, std::span<const int> target);
double metric_accuracy(std::span<const int> pred, std::span<const int> target);
// Fraction of examples where every head matches.
double metric_exact_match(std::span<const std::vector<int>> pred,
                          std::span<const std::vector<int>> target);

struct MetricReport {
  std::string task;
  std::map<std::string, double> metrics;
  std::uint64_t seed = 0;
  std::string config_digest;  // hex
  std::uint64_t checkpoint_step = 0;
  std::string variant;  // e.g. "best", "averaged"; empty for probes

  nlohmann::json to_json() const;
};

enum class ProbeTask { Regression, Classification };

struct ProbeConfig {
  ProbeTask task = ProbeTask::Classification;
  RidgeConfig ridge;
  std::uint64_t seed = 0;          // split shuffling
  std::size_t n_classes = 7;       // classification
  std::uint64_t checkpoint_step = 0;  // provenance only
  std::size_t threads = 1;
};

// Deterministic 60:20:20 split by seeded shuffle.
struct SplitIndices {
  std::vector<std::size_t> train, dev, test;
};
SplitIndices split_dataset(std::size_t count, std::uint64_t seed);

// Frozen-encoder evaluation map: pooled embedding per example, order
// preserved (parallelizable).
Tensor embed_dataset(const StudentEncoder& enc,
                     const std::vector<PairedExample>& examples,
                     std::size_t threads);

// Full-data ridge probe: embeds all examples without gradients, fits ridge
// on the train split (classification uses one-hot targets and argmax),
// evaluates on the test split.
MetricReport run_probe(const StudentEncoder& enc,
                       const std::vector<PairedExample>& dataset,
                       const ProbeConfig& config);

// Ridge probe trained on exactly k examples per class from the train split,
// evaluated on the test split.
MetricReport run_probe_k_shot(const StudentEncoder& enc,
                              const std::vector<PairedExample>& dataset,
                              const ProbeConfig& config, std::size_t k,
                              std::uint64_t shot_seed);

struct FinetuneConfig {
  ProbeTask task = ProbeTask::Classification;
  std::size_t n_classes = 7;
  bool freeze_encoder = false;
  TrainConfig train;  // mode field ignored; losses are task-specific
  std::size_t threads = 1;
};

struct FinetuneResult {
  MetricReport best;                      // best dev-loss checkpoint on test
  std::optional<MetricReport> averaged;   // last-k average on test
  std::size_t trainable_parameters = 0;
  std::vector<double> step_losses;        // training loss per step
};

// Single linear head on the pooled embedding, trained jointly with the
// encoder (or with the encoder frozen) under AdamW + the warmup schedule.
// Regression heads use MSE on the scalar output; classification heads use
// softmax cross-entropy.
FinetuneResult run_finetune_head(const StudentEncoder& enc,
                                 const std::vector<PairedExample>& dataset,
                                 const FinetuneConfig& config);

// Label access helpers (contract errors on missing/mistyped labels).
double regression_label(const PairedExample& ex);
int class_label(const PairedExample& ex);

}  // namespace xmd
