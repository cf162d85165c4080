#include "xmd/distill.hpp"

#include <algorithm>
#include <cmath>

#include "xmd/ops.hpp"
#include "xmd/util.hpp"

namespace xmd {

void TrainConfig::validate() const {
  if (total_steps == 0) throw ConfigError("train config: total_steps must be >= 1");
  if (warmup_steps == 0 || warmup_steps > total_steps) {
    throw ConfigError("train config: need 0 < warmup_steps <= total_steps");
  }
  if (batch_size == 0) throw ConfigError("train config: batch_size must be >= 1");
  if (mode == TrainMode::InfoNce && batch_size < 2) {
    throw ConfigError("train config: infonce mode needs batch_size >= 2");
  }
  if (average_last_k == 0) throw ConfigError("train config: average_last_k must be >= 1");
  if (checkpoint_every == 0) throw ConfigError("train config: checkpoint_every must be >= 1");
  if (!(peak_lr > 0.0)) throw ConfigError("train config: peak_lr must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("train config: betas must lie in [0, 1)");
  }
  if (weight_decay < 0.0) throw ConfigError("train config: weight_decay must be >= 0");
  if (monitor_every == 0) throw ConfigError("train config: monitor_every must be >= 1");
}

double ContrastiveState::tau() const { return std::exp(log_temperature); }

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

namespace {

void check_pair_shapes(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rank() != 2 || b.rank() != 2 || !a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": need equal [B x d] shapes, got " +
                         a.shape_str() + " and " + b.shape_str());
  }
}

}  // namespace

double mse_loss(const Tensor& student_emb, const Tensor& teacher_emb) {
  check_pair_shapes(student_emb, teacher_emb, "mse_loss");
  const std::size_t b = student_emb.extent(0), d = student_emb.extent(1);
  const double* s = student_emb.data();
  const double* t = teacher_emb.data();
  double total = 0.0;
  for (std::size_t i = 0; i < b * d; ++i) {
    const double diff = s[i] - t[i];
    total += diff * diff;
  }
  return total / static_cast<double>(b);
}

Traced mse_loss(GradTape& tape, const Traced& student_emb,
                const Tensor& teacher_emb) {
  check_pair_shapes(student_emb.value, teacher_emb, "mse_loss");
  Traced diff = sub(tape, student_emb, teacher_emb);
  Traced sq = mul(tape, diff, diff);
  Traced per_example = reduce_sum(tape, sq, 1);
  return reduce_mean(tape, per_example, 0);
}

double infonce_loss(const Tensor& student_emb, const Tensor& teacher_emb,
                    const ContrastiveState& state) {
  check_pair_shapes(student_emb, teacher_emb, "infonce_loss");
  const std::size_t b = student_emb.extent(0);
  if (b < 2) throw ContractError("infonce_loss: batch size must be >= 2");
  Tensor sims = cosine_similarity_matrix(student_emb, teacher_emb);
  Tensor logits = scale(sims, 1.0 / state.tau());
  std::vector<std::size_t> diag(b);
  for (std::size_t i = 0; i < b; ++i) diag[i] = i;
  const double fwd = cross_entropy(logits, diag).scalar_value();
  const double bwd = cross_entropy(transpose(logits), diag).scalar_value();
  return 0.5 * (fwd + bwd);
}

Traced infonce_loss(GradTape& tape, const Traced& student_emb,
                    const Tensor& teacher_emb, const Traced& log_temperature) {
  check_pair_shapes(student_emb.value, teacher_emb, "infonce_loss");
  const std::size_t b = student_emb.value.extent(0);
  if (b < 2) throw ContractError("infonce_loss: batch size must be >= 2");
  Traced sims = cosine_similarity_matrix(tape, student_emb, teacher_emb);
  Traced inv_tau = exp(tape, scale(tape, log_temperature, -1.0));
  Traced logits = scale_by(tape, sims, inv_tau);
  std::vector<std::size_t> diag(b);
  for (std::size_t i = 0; i < b; ++i) diag[i] = i;
  Traced fwd = cross_entropy(tape, logits, diag);
  Traced bwd = cross_entropy(tape, transpose(tape, logits), diag);
  return scale(tape, add(tape, fwd, bwd), 0.5);
}

double positive_pair_similarity(const Tensor& student_emb,
                                const Tensor& teacher_emb) {
  check_pair_shapes(student_emb, teacher_emb, "positive_pair_similarity");
  const std::size_t b = student_emb.extent(0);
  if (b < 1) throw ContractError("positive_pair_similarity: empty batch");
  Tensor sims = cosine_similarity_matrix(student_emb, teacher_emb);
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) total += sims.at(i * b + i);
  return total / static_cast<double>(b);
}

// ---------------------------------------------------------------------------
// Schedule and optimizer
// ---------------------------------------------------------------------------

double lr_at_step(const TrainConfig& config, std::size_t step) {
  config.validate();
  if (step > config.total_steps) {
    throw ContractError("lr_at_step: step " + std::to_string(step) +
                        " outside [0, " + std::to_string(config.total_steps) + "]");
  }
  const double peak = config.peak_lr;
  if (step <= config.warmup_steps) {
    return peak * static_cast<double>(step) / static_cast<double>(config.warmup_steps);
  }
  const double remaining = static_cast<double>(config.total_steps - step);
  const double span = static_cast<double>(config.total_steps - config.warmup_steps);
  return peak * remaining / span;
}

void adamw_step(std::map<std::string, Tensor>& params,
                const std::map<std::string, Tensor>& grads, OptimState& opt,
                double lr, const TrainConfig& config) {
  constexpr double eps = 1e-8;
  opt.t += 1;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(opt.t));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(opt.t));

  for (auto& [name, p] : params) {
    auto git = grads.find(name);
    if (git == grads.end()) {
      throw ContractError("adamw_step: missing gradient for \"" + name + "\"");
    }
    const Tensor& g = git->second;
    if (!g.same_shape(p)) {
      throw DimensionError("adamw_step: gradient shape " + g.shape_str() +
                           " does not match parameter \"" + name + "\"");
    }
    if (!g.all_finite()) {
      throw NumericError("adamw_step: non-finite gradient for \"" + name + "\"");
    }
    auto mit = opt.m.find(name);
    if (mit == opt.m.end()) {
      mit = opt.m.emplace(name, Tensor::zeros(p.shape())).first;
      opt.v.emplace(name, Tensor::zeros(p.shape()));
    }
    const Tensor& m_old = mit->second;
    const Tensor& v_old = opt.v.at(name);

    std::vector<double> m_new(p.numel()), v_new(p.numel()), p_new(p.numel());
    const double* gd = g.data();
    const double* md = m_old.data();
    const double* vd = v_old.data();
    const double* pd = p.data();
    for (std::size_t i = 0; i < p.numel(); ++i) {
      m_new[i] = config.beta1 * md[i] + (1.0 - config.beta1) * gd[i];
      v_new[i] = config.beta2 * vd[i] + (1.0 - config.beta2) * gd[i] * gd[i];
      const double m_hat = m_new[i] / bc1;
      const double v_hat = v_new[i] / bc2;
      p_new[i] = pd[i] - lr * (m_hat / (std::sqrt(v_hat) + eps) +
                               config.weight_decay * pd[i]);
    }
    opt.m.insert_or_assign(name, Tensor(p.shape(), std::move(m_new)));
    opt.v.insert_or_assign(name, Tensor(p.shape(), std::move(v_new)));
    p = Tensor(p.shape(), std::move(p_new));
  }
}

// ---------------------------------------------------------------------------
// Checkpoint averaging
// ---------------------------------------------------------------------------

Checkpoint average_checkpoints(std::span<const Checkpoint> checkpoints) {
  if (checkpoints.empty()) {
    throw ContractError("average_checkpoints: at least one checkpoint required");
  }
  const Checkpoint& first = checkpoints.front();
  for (const Checkpoint& c : checkpoints) {
    if (c.config_digest != first.config_digest) {
      throw DataError("incompatible checkpoints: config digests differ");
    }
    if (c.params.size() != first.params.size()) {
      throw DataError("incompatible checkpoints: parameter sets differ");
    }
    for (const auto& [name, t] : first.params) {
      auto it = c.params.find(name);
      if (it == c.params.end() || !it->second.same_shape(t)) {
        throw DataError("incompatible checkpoints: parameter \"" + name +
                        "\" missing or reshaped");
      }
    }
  }

  Checkpoint out;
  out.config_digest = first.config_digest;
  out.step = 0;
  for (const Checkpoint& c : checkpoints) out.step = std::max(out.step, c.step);
  const double k = static_cast<double>(checkpoints.size());
  for (const auto& [name, anchor] : first.params) {
    // Anchored mean: anchor + sum(deltas)/K. Exact when all inputs agree.
    std::vector<double> delta(anchor.numel(), 0.0);
    for (const Checkpoint& c : checkpoints) {
      const double* cd = c.params.at(name).data();
      const double* ad = anchor.data();
      for (std::size_t i = 0; i < delta.size(); ++i) delta[i] += cd[i] - ad[i];
    }
    std::vector<double> mean(anchor.numel());
    const double* ad = anchor.data();
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] = ad[i] + delta[i] / k;
    out.params.emplace(name, Tensor(anchor.shape(), std::move(mean)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

nlohmann::json TrainLogEntry::to_json() const {
  nlohmann::json j{{"step", step}, {"lr", lr}, {"loss", loss}};
  if (s_plus) j["s_plus"] = *s_plus;
  if (tau) j["tau"] = *tau;
  return j;
}

namespace {

Tensor stack_targets(const Batch& batch, std::size_t d_embed) {
  std::vector<Tensor> rows;
  rows.reserve(batch.examples.size());
  for (const PairedExample& ex : batch.examples) {
    if (ex.target.rank() != 1 || ex.target.extent(0) != d_embed) {
      throw DimensionError("example \"" + ex.id + "\": target shape " +
                           ex.target.shape_str() + " does not match teacher width " +
                           std::to_string(d_embed));
    }
    rows.push_back(ex.target);
  }
  return stack_rows(rows);
}

Tensor embed_batch(const StudentEncoder& enc, const Batch& batch,
                   std::size_t threads) {
  std::vector<Tensor> rows(batch.examples.size());
  parallel_for_indexed(batch.examples.size(), threads, [&](std::size_t i) {
    rows[i] = embed_signal(enc, batch.examples[i].signal);
  });
  return stack_rows(rows);
}

}  // namespace

double heldout_mse(const StudentEncoder& enc,
                   const std::vector<PairedExample>& examples,
                   std::size_t threads) {
  if (examples.empty()) throw ContractError("heldout_mse: empty example set");
  Batch b{examples};
  return mse_loss(embed_batch(enc, b, threads),
                  stack_targets(b, enc.config().d_embed));
}

double heldout_s_plus(const StudentEncoder& enc,
                      const std::vector<PairedExample>& examples,
                      std::size_t threads) {
  if (examples.empty()) throw ContractError("heldout_s_plus: empty example set");
  Batch b{examples};
  return positive_pair_similarity(embed_batch(enc, b, threads),
                                  stack_targets(b, enc.config().d_embed));
}

PretrainResult pretrain(const StudentEncoder& student,
                        const TeacherEmbedder& teacher,
                        const std::vector<PairedExample>& dataset,
                        const std::vector<PairedExample>& heldout,
                        const TrainConfig& config,
                        std::size_t monitor_threads) {
  config.validate();
  if (dataset.size() < config.batch_size) {
    throw ConfigError("pretrain: dataset of " + std::to_string(dataset.size()) +
                      " examples is smaller than one batch of " +
                      std::to_string(config.batch_size));
  }
  if (teacher.d_embed() != student.config().d_embed) {
    throw DimensionError("pretrain: teacher width " +
                         std::to_string(teacher.d_embed()) +
                         " does not match student d_embed " +
                         std::to_string(student.config().d_embed));
  }

  const StudentConfig& cfg = student.config();
  const Digest32 digest = cfg.digest();
  const bool contrastive = config.mode == TrainMode::InfoNce;

  // Monitor slice is fixed at run start.
  std::vector<PairedExample> monitor_slice(
      heldout.begin(),
      heldout.begin() + std::min<std::size_t>(heldout.size(), 256));

  PretrainResult result{student, {}, {}, ContrastiveState{}, {}, {}, {}, {}};
  StudentEncoder model = student;
  std::map<std::string, Tensor> params = model.parameters();
  OptimState opt;
  ContrastiveState cstate;
  double log_temp_m = 0.0, log_temp_v = 0.0;  // AdamW moments for log tau

  if (!monitor_slice.empty()) {
    result.heldout_mse_init = heldout_mse(model, monitor_slice, monitor_threads);
    result.s_plus_init = heldout_s_plus(model, monitor_slice, monitor_threads);
  }

  auto save_checkpoint = [&](std::uint64_t step) {
    if (!result.checkpoints.empty() && result.checkpoints.back().step == step) {
      return;
    }
    Checkpoint c;
    c.step = step;
    c.params = params;
    c.config_digest = digest;
    result.checkpoints.push_back(std::move(c));
  };

  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  while (step < config.total_steps) {
    const std::vector<Batch> batches =
        iterate_batches(dataset, config.batch_size, config.seed, epoch, contrastive);
    if (batches.empty()) {
      throw ConfigError("pretrain: dataset yields no full batches in infonce mode");
    }
    for (const Batch& batch : batches) {
      if (step >= config.total_steps) break;
      step += 1;
      const double lr = lr_at_step(config, step);

      GradTape tape;
      std::map<std::string, Traced> traced;
      for (const auto& [name, p] : params) traced.emplace(name, tape.leaf(p));

      std::vector<Traced> rows;
      rows.reserve(batch.examples.size());
      for (const PairedExample& ex : batch.examples) {
        rows.push_back(encode_pooled(tape, cfg, traced, ex.signal));
      }
      Traced student_emb = stack_rows(tape, rows);
      Tensor teacher_emb = stack_targets(batch, cfg.d_embed);

      Traced loss;
      Traced log_temp;
      if (contrastive) {
        log_temp = tape.leaf(Tensor::scalar(cstate.log_temperature));
        loss = infonce_loss(tape, student_emb, teacher_emb, log_temp);
      } else {
        loss = mse_loss(tape, student_emb, teacher_emb);
      }
      const double loss_value = loss.value.scalar_value();

      GradMap grad_by_node = backward(tape, loss);
      std::map<std::string, Tensor> grads;
      for (const auto& [name, tr] : traced) {
        grads.emplace(name, grad_by_node.at(tr.node));
      }
      adamw_step(params, grads, opt, lr, config);

      if (contrastive) {
        // Same AdamW update for the scalar temperature parameter.
        const double g = grad_by_node.at(log_temp.node).scalar_value();
        if (!std::isfinite(g)) {
          throw NumericError("adamw_step: non-finite gradient for log_temperature");
        }
        log_temp_m = config.beta1 * log_temp_m + (1.0 - config.beta1) * g;
        log_temp_v = config.beta2 * log_temp_v + (1.0 - config.beta2) * g * g;
        const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(opt.t));
        const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(opt.t));
        const double m_hat = log_temp_m / bc1;
        const double v_hat = log_temp_v / bc2;
        cstate.log_temperature -=
            lr * (m_hat / (std::sqrt(v_hat) + 1e-8) +
                  config.weight_decay * cstate.log_temperature);
      }

      TrainLogEntry entry;
      entry.step = step;
      entry.lr = lr;
      entry.loss = loss_value;
      if (contrastive) entry.tau = cstate.tau();
      if (!monitor_slice.empty() &&
          (step % config.monitor_every == 0 || step == config.total_steps)) {
        model.set_parameters(params);
        entry.s_plus = heldout_s_plus(model, monitor_slice, monitor_threads);
      }
      result.log.push_back(entry);

      if (step % config.checkpoint_every == 0) save_checkpoint(step);
    }
    epoch += 1;
  }
  save_checkpoint(step);

  model.set_parameters(params);
  if (config.average_last_k > 1) {
    const std::size_t k =
        std::min<std::size_t>(config.average_last_k, result.checkpoints.size());
    std::span<const Checkpoint> last(result.checkpoints.data() +
                                         (result.checkpoints.size() - k),
                                     k);
    Checkpoint averaged = average_checkpoints(last);
    model.set_parameters(averaged.params);
  }
  result.student = model;
  result.contrastive = cstate;

  if (!monitor_slice.empty()) {
    result.heldout_mse_final =
        heldout_mse(result.student, monitor_slice, monitor_threads);
    result.s_plus_final =
        heldout_s_plus(result.student, monitor_slice, monitor_threads);
  }
  return result;
}

}  // namespace xmd
