#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "xmd/data.hpp"
#include "xmd/model.hpp"
#include "xmd/tape.hpp"
#include "xmd/teacher.hpp"
#include "xmd/tensor.hpp"

namespace xmd {

enum class TrainMode { MseKd, InfoNce };

struct TrainConfig {
  TrainMode mode = TrainMode::MseKd;
  double peak_lr = 3e-5;
  std::size_t warmup_steps = 5000;
  std::size_t total_steps = 0;
  std::size_t batch_size = 16;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.0;
  std::size_t checkpoint_every = 5000;
  std::size_t average_last_k = 10;
  std::uint64_t seed = 0;
  // Interval for the held-out Eq-style similarity monitor in the log.
  std::size_t monitor_every = 100;

  void validate() const;
};

struct OptimState {
  std::map<std::string, Tensor> m;  // first moments
  std::map<std::string, Tensor> v;  // second moments
  std::uint64_t t = 0;              // completed steps
};

// tau = exp(log_temperature) stays positive without clamping.
struct ContrastiveState {
  double log_temperature = -2.6592600369327783;  // ln(0.07)
  double tau() const;
};

struct Checkpoint {
  std::uint64_t step = 0;
  std::map<std::string, Tensor> params;  // student only
  std::optional<OptimState> opt;
  Digest32 config_digest{};
};

// Mean over the batch of per-example squared L2 distance (sum over the
// embedding axis). Rank-2 [B x d] operands.
double mse_loss(const Tensor& student_emb, const Tensor& teacher_emb);
Traced mse_loss(GradTape& tape, const Traced& student_emb,
                const Tensor& teacher_emb);

// Symmetric InfoNCE over cosine-similarity logits scaled by 1/tau:
// cross-entropy with diagonal targets in both retrieval directions, averaged.
// B >= 2; zero-norm embeddings are degenerate.
double infonce_loss(const Tensor& student_emb, const Tensor& teacher_emb,
                    const ContrastiveState& state);
Traced infonce_loss(GradTape& tape, const Traced& student_emb,
                    const Tensor& teacher_emb, const Traced& log_temperature);

// Mean cosine similarity of matched (diagonal) pairs.
double positive_pair_similarity(const Tensor& student_emb,
                                const Tensor& teacher_emb);

// Linear 0 -> peak over [0, warmup], then linear peak -> 0 over
// [warmup, total]. Steps outside [0, total] are a contract error.
double lr_at_step(const TrainConfig& config, std::size_t step);

// Decoupled-weight-decay Adam update with bias-corrected moments (eps 1e-8).
// Updates params and opt in place; NaN gradients abort.
void adamw_step(std::map<std::string, Tensor>& params,
                const std::map<std::string, Tensor>& grads, OptimState& opt,
                double lr, const TrainConfig& config);

// Elementwise arithmetic mean per named parameter; step is the max input
// step. The mean is anchored on the first checkpoint so averaging K copies
// of one checkpoint is bitwise that checkpoint. Optimizer state is dropped.
Checkpoint average_checkpoints(std::span<const Checkpoint> checkpoints);

struct TrainLogEntry {
  std::uint64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  std::optional<double> s_plus;  // held-out positive-pair similarity
  std::optional<double> tau;     // infonce mode only
  nlohmann::json to_json() const;
};

struct PretrainResult {
  StudentEncoder student;  // final model (averaged when average_last_k > 1)
  std::vector<Checkpoint> checkpoints;
  std::vector<TrainLogEntry> log;
  ContrastiveState contrastive;
  // Held-out monitors over the fixed slice (when a held-out set is given):
  // mean MSE and mean positive-pair similarity at init and for the final model.
  std::optional<double> heldout_mse_init, heldout_mse_final;
  std::optional<double> s_plus_init, s_plus_final;
};

// Runs total_steps optimizer steps over seeded-shuffled batches, saving a
// checkpoint every checkpoint_every steps plus a final one. The teacher is
// only read (targets come from the paired examples it produced); its state
// is never written. heldout may be empty, disabling the monitors.
PretrainResult pretrain(const StudentEncoder& student,
                        const TeacherEmbedder& teacher,
                        const std::vector<PairedExample>& dataset,
                        const std::vector<PairedExample>& heldout,
                        const TrainConfig& config,
                        std::size_t monitor_threads = 1);

// Mean MSE between pooled student embeddings and stored targets.
double heldout_mse(const StudentEncoder& enc,
                   const std::vector<PairedExample>& examples,
                   std::size_t threads = 1);

// Mean positive-pair similarity between pooled student embeddings and
// stored targets.
double heldout_s_plus(const StudentEncoder& enc,
                      const std::vector<PairedExample>& examples,
                      std::size_t threads = 1);

}  // namespace xmd
