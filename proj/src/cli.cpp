#include "xmd/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "xmd/checkpoint_io.hpp"
#include "xmd/data.hpp"
#include "xmd/distill.hpp"
#include "xmd/eval.hpp"
#include "xmd/gradcheck.hpp"
#include "xmd/model.hpp"
#include "xmd/teacher.hpp"
#include "xmd/util.hpp"

namespace xmd {

namespace {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config-file handling: JSON documents provide defaults, flags override,
// unknown keys are rejected by name.
// ---------------------------------------------------------------------------

json load_config_file(const std::string& path,
                      const std::set<std::string>& known_keys) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path);
  json doc;
  try {
    doc = json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path + ": " + e.what());
  }
  if (!doc.is_object()) throw ConfigError("config file must hold a JSON object");
  for (const auto& [key, value] : doc.items()) {
    if (!known_keys.count(key)) {
      throw ConfigError("unknown config key \"" + key + "\"");
    }
  }
  return doc;
}

// Applies a config value unless the matching flag was given on the command
// line (flags override file values).
template <typename T>
void apply(const json& doc, const char* key, const CLI::Option* opt, T& out) {
  if (!doc.contains(key) || opt->count() > 0) return;
  try {
    out = doc.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config key \"" + std::string(key) + "\": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Shared option blocks
// ---------------------------------------------------------------------------

struct ModelOptions {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 2;
  std::size_t d_ff = 128;
  std::size_t d_embed = 0;  // 0: take the dataset's width
  std::size_t max_positions = 512;
  std::vector<std::size_t> conv;  // flattened (channels, kernel, stride) triples

  struct Opts {
    CLI::Option *d_model, *n_heads, *n_layers, *d_ff, *d_embed, *max_positions,
        *conv;
  } opt;

  void add_flags(CLI::App* app) {
    opt.d_model = app->add_option("--d-model", d_model, "Transformer width");
    opt.n_heads = app->add_option("--n-heads", n_heads, "Attention heads");
    opt.n_layers = app->add_option("--n-layers", n_layers, "Transformer blocks");
    opt.d_ff = app->add_option("--d-ff", d_ff, "Feed-forward width");
    opt.d_embed = app->add_option("--d-embed", d_embed,
                                  "Output embedding width (default: dataset width)");
    opt.max_positions =
        app->add_option("--max-positions", max_positions, "Positional table rows");
    opt.conv = app->add_option(
        "--conv", conv,
        "Conv stack as flattened channels,kernel,stride triples");
  }

  static std::set<std::string> keys() {
    return {"d_model", "n_heads", "n_layers", "d_ff",
            "d_embed", "max_positions", "conv"};
  }

  void apply_config(const json& doc) {
    apply(doc, "d_model", opt.d_model, d_model);
    apply(doc, "n_heads", opt.n_heads, n_heads);
    apply(doc, "n_layers", opt.n_layers, n_layers);
    apply(doc, "d_ff", opt.d_ff, d_ff);
    apply(doc, "d_embed", opt.d_embed, d_embed);
    apply(doc, "max_positions", opt.max_positions, max_positions);
    apply(doc, "conv", opt.conv, conv);
  }

  StudentConfig build(std::size_t dataset_d_embed) const {
    StudentConfig c;
    c.d_model = d_model;
    c.n_heads = n_heads;
    c.n_layers = n_layers;
    c.d_ff = d_ff;
    c.d_embed = d_embed == 0 ? dataset_d_embed : d_embed;
    c.max_positions = max_positions;
    if (conv.empty()) {
      c.conv_layers = {{d_model, 10, 5}, {d_model, 4, 2}};
    } else {
      if (conv.size() % 3 != 0) {
        throw ConfigError("--conv expects channels,kernel,stride triples");
      }
      c.conv_layers.clear();
      for (std::size_t i = 0; i < conv.size(); i += 3) {
        c.conv_layers.push_back({conv[i], conv[i + 1], conv[i + 2]});
      }
    }
    c.validate();
    return c;
  }
};

StudentConfig config_from_sidecar(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open model config: " + path);
  json doc;
  try {
    doc = json::parse(is);
  } catch (const json::exception& e) {
    throw DataError("model config " + path + ": " + e.what());
  }
  return StudentConfig::from_json(doc);
}

// Loads an encoder from a checkpoint plus its architecture description and
// cross-checks the config digest recorded in the checkpoint.
std::pair<StudentEncoder, std::uint64_t> load_encoder(
    const std::string& ckpt_path, const std::string& model_config_path) {
  std::string config_path = model_config_path;
  if (config_path.empty()) {
    config_path =
        (std::filesystem::path(ckpt_path).parent_path() / "config.json").string();
  }
  StudentConfig cfg = config_from_sidecar(config_path);
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  if (ckpt.config_digest != cfg.digest()) {
    throw DataError("checkpoint " + ckpt_path +
                    " does not match model config " + config_path +
                    " (digest mismatch)");
  }
  return {StudentEncoder::from_parameters(cfg, ckpt.params), ckpt.step};
}

// ---------------------------------------------------------------------------
// Report emission: JSON-lines plus a companion CSV, byte-stable.
// ---------------------------------------------------------------------------

struct SweepRow {
  std::string k;  // leading column value (k or step)
  std::string seed;
  std::string metric;
  double value;
};

void emit_reports(const std::vector<MetricReport>& reports,
                  const std::string& path, const std::string& csv_path,
                  const std::string& leading_column, bool with_seed_column) {
  if (reports.empty()) {
    throw ContractError("emit_report: refusing to write an empty report");
  }
  atomic_write_file(path, [&](std::ostream& os) {
    for (const MetricReport& r : reports) os << r.to_json().dump() << '\n';
  });
  atomic_write_file(csv_path, [&](std::ostream& os) {
    if (with_seed_column) {
      os << leading_column << ",seed,metric,value\n";
    } else {
      os << leading_column << ",metric,value\n";
    }
    for (const MetricReport& r : reports) {
      for (const auto& [metric, value] : r.metrics) {
        if (with_seed_column && metric == "k") continue;
        const std::string lead =
            leading_column == "k"
                ? format_double(r.metrics.count("k") ? r.metrics.at("k") : 0.0)
                : std::to_string(r.checkpoint_step);
        os << lead << ',';
        if (with_seed_column) os << r.seed << ',';
        os << metric << ',' << format_double(value) << '\n';
      }
    }
  });
}

std::string default_csv_path(const std::string& report_path) {
  std::filesystem::path p(report_path);
  p.replace_extension(".csv");
  return p.string();
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

int cmd_gen_data(CLI::App* app) {
  auto opts = std::make_shared<SyntheticSpec>();
  auto count = std::make_shared<std::size_t>(1000);
  auto heldout_count = std::make_shared<std::size_t>(0);
  auto out = std::make_shared<std::string>();
  auto heldout_out = std::make_shared<std::string>();
  auto config_path = std::make_shared<std::string>();
  auto label_rule = std::make_shared<std::string>("classification");

  auto o_config = app->add_option("--config", *config_path, "JSON config file");
  auto o_seed = app->add_option("--seed", opts->seed, "Generator seed");
  auto o_count = app->add_option("--count", *count, "Training examples");
  auto o_held = app->add_option("--heldout-count", *heldout_count,
                                "Held-out examples drawn after the training set");
  auto o_vocab = app->add_option("--vocab-size", opts->vocab_size, "Token vocabulary");
  auto o_dembed = app->add_option("--d-embed", opts->d_embed, "Teacher width");
  auto o_seg = app->add_option("--segment-len", opts->segment_len, "Samples per token");
  auto o_base = app->add_option("--base-freq", opts->base_freq, "Base frequency (Hz)");
  auto o_step = app->add_option("--freq-step", opts->freq_step, "Frequency step per token id");
  auto o_noise = app->add_option("--noise-std", opts->noise_std, "Gaussian noise level");
  auto o_rule = app->add_option("--label-rule", *label_rule,
                                "classification | regression");
  auto o_ncls = app->add_option("--n-classes", opts->n_classes, "Classification classes");
  auto o_out = app->add_option("--out", *out, "Output dataset path")->required();
  auto o_hout = app->add_option("--heldout-out", *heldout_out, "Held-out dataset path");

  app->callback([=]() {
    if (!config_path->empty()) {
      const json doc = load_config_file(
          *config_path,
          {"seed", "count", "heldout_count", "vocab_size", "d_embed",
           "segment_len", "base_freq", "freq_step", "noise_std", "label_rule",
           "n_classes", "out", "heldout_out"});
      apply(doc, "seed", o_seed, opts->seed);
      apply(doc, "count", o_count, *count);
      apply(doc, "heldout_count", o_held, *heldout_count);
      apply(doc, "vocab_size", o_vocab, opts->vocab_size);
      apply(doc, "d_embed", o_dembed, opts->d_embed);
      apply(doc, "segment_len", o_seg, opts->segment_len);
      apply(doc, "base_freq", o_base, opts->base_freq);
      apply(doc, "freq_step", o_step, opts->freq_step);
      apply(doc, "noise_std", o_noise, opts->noise_std);
      apply(doc, "label_rule", o_rule, *label_rule);
      apply(doc, "n_classes", o_ncls, opts->n_classes);
      apply(doc, "out", o_out, *out);
      apply(doc, "heldout_out", o_hout, *heldout_out);
    }
    if (*label_rule == "classification") {
      opts->label_rule = LabelRule::Classification;
    } else if (*label_rule == "regression") {
      opts->label_rule = LabelRule::Regression;
    } else {
      throw ConfigError("label-rule must be classification or regression");
    }
    opts->validate();
    if (*heldout_count > 0 && heldout_out->empty()) {
      throw ConfigError("--heldout-out required when --heldout-count > 0");
    }

    std::vector<PairedExample> all =
        generate_synthetic_dataset(*opts, *count + *heldout_count);
    std::vector<PairedExample> train(all.begin(),
                                     all.begin() + static_cast<long>(*count));
    DatasetMeta meta{kCanonicalSampleRate, opts->d_embed, *opts};
    save_paired_dataset(*out, train, meta);
    std::cout << "wrote " << train.size() << " examples to " << *out << '\n';
    if (*heldout_count > 0) {
      std::vector<PairedExample> held(all.begin() + static_cast<long>(*count),
                                      all.end());
      save_paired_dataset(*heldout_out, held, meta);
      std::cout << "wrote " << held.size() << " examples to " << *heldout_out
                << '\n';
    }
  });
  return 0;
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

int cmd_pretrain(CLI::App* app) {
  auto model = std::make_shared<ModelOptions>();
  auto tc = std::make_shared<TrainConfig>();
  auto data_path = std::make_shared<std::string>();
  auto heldout_path = std::make_shared<std::string>();
  auto out_dir = std::make_shared<std::string>();
  auto mode = std::make_shared<std::string>("mse-kd");
  auto init_seed = std::make_shared<std::uint64_t>(0);
  auto threads = std::make_shared<std::size_t>(1);
  auto config_path = std::make_shared<std::string>();

  tc->total_steps = 1000;
  tc->warmup_steps = 100;

  auto o_config = app->add_option("--config", *config_path, "JSON config file");
  auto o_data = app->add_option("--data", *data_path, "Training dataset")->required();
  auto o_held = app->add_option("--heldout", *heldout_path, "Held-out dataset");
  auto o_out = app->add_option("--out", *out_dir, "Output directory")->required();
  auto o_mode = app->add_option("--mode", *mode, "mse-kd | infonce");
  auto o_lr = app->add_option("--peak-lr", tc->peak_lr, "Peak learning rate");
  auto o_warm = app->add_option("--warmup-steps", tc->warmup_steps, "Warmup steps");
  auto o_steps = app->add_option("--total-steps", tc->total_steps, "Optimizer steps");
  auto o_batch = app->add_option("--batch-size", tc->batch_size, "Batch size");
  auto o_b1 = app->add_option("--beta1", tc->beta1, "Adam beta1");
  auto o_b2 = app->add_option("--beta2", tc->beta2, "Adam beta2");
  auto o_wd = app->add_option("--weight-decay", tc->weight_decay, "Decoupled decay");
  auto o_ck = app->add_option("--checkpoint-every", tc->checkpoint_every,
                              "Steps between checkpoints");
  auto o_avg = app->add_option("--average-last-k", tc->average_last_k,
                               "Checkpoints averaged into the final model");
  auto o_seed = app->add_option("--seed", tc->seed, "Batch shuffling seed");
  auto o_mon = app->add_option("--monitor-every", tc->monitor_every,
                               "Held-out monitor interval");
  auto o_init = app->add_option("--init-seed", *init_seed, "Weight init seed");
  auto o_threads = app->add_option("--threads", *threads,
                                   "Held-out monitor embedding threads "
                                   "(training itself is single-threaded)");
  model->add_flags(app);

  app->callback([=]() {
    if (!config_path->empty()) {
      std::set<std::string> keys = ModelOptions::keys();
      for (const char* k :
           {"data", "heldout", "out", "mode", "peak_lr", "warmup_steps",
            "total_steps", "batch_size", "beta1", "beta2", "weight_decay",
            "checkpoint_every", "average_last_k", "seed", "monitor_every",
            "init_seed", "threads"}) {
        keys.insert(k);
      }
      const json doc = load_config_file(*config_path, keys);
      apply(doc, "data", o_data, *data_path);
      apply(doc, "heldout", o_held, *heldout_path);
      apply(doc, "out", o_out, *out_dir);
      apply(doc, "mode", o_mode, *mode);
      apply(doc, "peak_lr", o_lr, tc->peak_lr);
      apply(doc, "warmup_steps", o_warm, tc->warmup_steps);
      apply(doc, "total_steps", o_steps, tc->total_steps);
      apply(doc, "batch_size", o_batch, tc->batch_size);
      apply(doc, "beta1", o_b1, tc->beta1);
      apply(doc, "beta2", o_b2, tc->beta2);
      apply(doc, "weight_decay", o_wd, tc->weight_decay);
      apply(doc, "checkpoint_every", o_ck, tc->checkpoint_every);
      apply(doc, "average_last_k", o_avg, tc->average_last_k);
      apply(doc, "seed", o_seed, tc->seed);
      apply(doc, "monitor_every", o_mon, tc->monitor_every);
      apply(doc, "init_seed", o_init, *init_seed);
      apply(doc, "threads", o_threads, *threads);
      model->apply_config(doc);
    }
    if (*mode == "mse-kd") {
      tc->mode = TrainMode::MseKd;
    } else if (*mode == "infonce") {
      tc->mode = TrainMode::InfoNce;
    } else {
      throw ConfigError("mode must be mse-kd or infonce");
    }

    Dataset train = load_paired_dataset(*data_path);
    std::vector<PairedExample> heldout;
    if (!heldout_path->empty()) {
      heldout = load_paired_dataset(*heldout_path).examples;
    }

    StudentConfig cfg = model->build(train.meta.d_embed);
    StudentEncoder student = StudentEncoder::init(cfg, *init_seed);

    TeacherEmbedder teacher =
        train.meta.provenance
            ? TeacherEmbedder::synthetic(train.meta.provenance->seed,
                                         train.meta.provenance->vocab_size,
                                         train.meta.provenance->d_embed)
            : [&] {
                std::map<std::string, Tensor> table;
                for (const PairedExample& ex : train.examples) {
                  table.emplace(ex.id, ex.target);
                }
                return TeacherEmbedder::file_backed(std::move(table),
                                                    train.meta.d_embed);
              }();

    const auto teacher_before = teacher.serialized();
    PretrainResult result =
        pretrain(student, teacher, train.examples, heldout, *tc, *threads);
    const auto teacher_after = teacher.serialized();

    std::filesystem::create_directories(*out_dir);
    atomic_write_file((std::filesystem::path(*out_dir) / "config.json").string(),
                      [&](std::ostream& os) { os << cfg.to_json().dump(2) << '\n'; });
    for (const Checkpoint& c : result.checkpoints) {
      std::ostringstream name;
      name << "checkpoint_" << std::setw(6) << std::setfill('0') << c.step
           << ".xmdc";
      save_checkpoint((std::filesystem::path(*out_dir) / name.str()).string(), c);
    }
    {
      Checkpoint final_ckpt;
      final_ckpt.step = result.checkpoints.back().step;
      final_ckpt.params = result.student.parameters();
      final_ckpt.config_digest = cfg.digest();
      save_checkpoint((std::filesystem::path(*out_dir) / "final.xmdc").string(),
                      final_ckpt);
    }
    atomic_write_file(
        (std::filesystem::path(*out_dir) / "train_log.jsonl").string(),
        [&](std::ostream& os) {
          for (const TrainLogEntry& e : result.log) os << e.to_json().dump() << '\n';
        });

    json summary{{"steps", tc->total_steps},
                 {"mode", *mode},
                 {"checkpoints", result.checkpoints.size()},
                 {"config_digest", digest_hex(cfg.digest())},
                 {"teacher_unchanged", teacher_before == teacher_after}};
    if (result.heldout_mse_init) summary["heldout_mse_init"] = *result.heldout_mse_init;
    if (result.heldout_mse_final) summary["heldout_mse_final"] = *result.heldout_mse_final;
    if (result.s_plus_init) summary["s_plus_init"] = *result.s_plus_init;
    if (result.s_plus_final) summary["s_plus_final"] = *result.s_plus_final;
    if (tc->mode == TrainMode::InfoNce) summary["final_tau"] = result.contrastive.tau();
    atomic_write_file((std::filesystem::path(*out_dir) / "summary.json").string(),
                      [&](std::ostream& os) { os << summary.dump(2) << '\n'; });
    std::cout << "pretrain complete: " << summary.dump() << '\n';
  });
  return 0;
}

// ---------------------------------------------------------------------------
// probe / fewshot
// ---------------------------------------------------------------------------

struct ProbeCommon {
  std::string data_path, ckpt_path, model_config_path, out_path, csv_path;
  std::string task = "classification";
  ProbeConfig pc;
  std::uint64_t init_seed = 0;  // random-init baseline when no checkpoint
  ModelOptions model;

  struct Opts {
    CLI::Option *data, *ckpt, *model_config, *out, *csv, *task, *alpha, *seed,
        *ncls, *threads, *init_seed;
  } opt;

  void add_flags(CLI::App* app) {
    opt.data = app->add_option("--data", data_path, "Labeled dataset")->required();
    opt.ckpt = app->add_option("--ckpt", ckpt_path,
                               "Checkpoint to probe (omit for a random-init encoder)");
    opt.model_config = app->add_option("--model-config", model_config_path,
                                       "Architecture JSON (default: config.json beside the checkpoint)");
    opt.out = app->add_option("--out", out_path, "Report JSONL path")->required();
    opt.csv = app->add_option("--csv", csv_path, "Companion CSV path");
    opt.task = app->add_option("--task", task, "classification | regression");
    opt.alpha = app->add_option("--alpha", pc.ridge.alpha, "Ridge regularization");
    opt.seed = app->add_option("--seed", pc.seed, "Split seed");
    opt.ncls = app->add_option("--n-classes", pc.n_classes, "Classes");
    opt.threads = app->add_option("--threads", pc.threads, "Embedding threads");
    opt.init_seed = app->add_option("--init-seed", init_seed,
                                    "Weight seed for the random-init encoder");
    model.add_flags(app);
  }

  std::set<std::string> keys() const {
    std::set<std::string> k = ModelOptions::keys();
    for (const char* key : {"data", "ckpt", "model_config", "out", "csv", "task",
                            "alpha", "seed", "n_classes", "threads", "init_seed"}) {
      k.insert(key);
    }
    return k;
  }

  void apply_config(const json& doc) {
    apply(doc, "data", opt.data, data_path);
    apply(doc, "ckpt", opt.ckpt, ckpt_path);
    apply(doc, "model_config", opt.model_config, model_config_path);
    apply(doc, "out", opt.out, out_path);
    apply(doc, "csv", opt.csv, csv_path);
    apply(doc, "task", opt.task, task);
    apply(doc, "alpha", opt.alpha, pc.ridge.alpha);
    apply(doc, "seed", opt.seed, pc.seed);
    apply(doc, "n_classes", opt.ncls, pc.n_classes);
    apply(doc, "threads", opt.threads, pc.threads);
    apply(doc, "init_seed", opt.init_seed, init_seed);
    model.apply_config(doc);
  }

  std::pair<StudentEncoder, Dataset> resolve() {
    Dataset ds = load_paired_dataset(data_path);
    if (task == "classification") {
      pc.task = ProbeTask::Classification;
    } else if (task == "regression") {
      pc.task = ProbeTask::Regression;
    } else {
      throw ConfigError("task must be classification or regression");
    }
    if (!ckpt_path.empty()) {
      auto [enc, step] = load_encoder(ckpt_path, model_config_path);
      pc.checkpoint_step = step;
      return {std::move(enc), std::move(ds)};
    }
    StudentConfig cfg = model.build(ds.meta.d_embed);
    pc.checkpoint_step = 0;
    return {StudentEncoder::init(cfg, init_seed), std::move(ds)};
  }
};

int cmd_probe(CLI::App* app) {
  auto common = std::make_shared<ProbeCommon>();
  auto config_path = std::make_shared<std::string>();
  app->add_option("--config", *config_path, "JSON config file");
  common->add_flags(app);

  app->callback([=]() {
    if (!config_path->empty()) {
      common->apply_config(load_config_file(*config_path, common->keys()));
    }
    auto [enc, ds] = common->resolve();
    MetricReport report = run_probe(enc, ds.examples, common->pc);
    const std::string csv = common->csv_path.empty()
                                ? default_csv_path(common->out_path)
                                : common->csv_path;
    emit_reports({report}, common->out_path, csv, "step", false);
    std::cout << report.to_json().dump() << '\n';
  });
  return 0;
}

int cmd_fewshot(CLI::App* app) {
  auto common = std::make_shared<ProbeCommon>();
  auto config_path = std::make_shared<std::string>();
  auto k_sweep = std::make_shared<std::vector<std::size_t>>(
      std::vector<std::size_t>{4, 8, 16, 32});
  auto n_seeds = std::make_shared<std::size_t>(5);
  app->add_option("--config", *config_path, "JSON config file");
  auto o_k = app->add_option("--k-sweep", *k_sweep, "k values (space separated)");
  auto o_s = app->add_option("--shot-seeds", *n_seeds, "Seeded draws per k");
  common->add_flags(app);

  app->callback([=]() {
    if (!config_path->empty()) {
      std::set<std::string> keys = common->keys();
      keys.insert("k_sweep");
      keys.insert("shot_seeds");
      const json doc = load_config_file(*config_path, keys);
      common->apply_config(doc);
      apply(doc, "k_sweep", o_k, *k_sweep);
      apply(doc, "shot_seeds", o_s, *n_seeds);
    }
    if (k_sweep->empty() || *n_seeds == 0) {
      throw ConfigError("fewshot: k sweep and shot seeds must be non-empty");
    }
    auto [enc, ds] = common->resolve();
    std::vector<MetricReport> reports;
    for (std::size_t k : *k_sweep) {
      for (std::uint64_t s = 0; s < *n_seeds; ++s) {
        reports.push_back(run_probe_k_shot(enc, ds.examples, common->pc, k,
                                           common->pc.seed + s));
      }
    }
    const std::string csv = common->csv_path.empty()
                                ? default_csv_path(common->out_path)
                                : common->csv_path;
    emit_reports(reports, common->out_path, csv, "k", true);
    std::cout << "wrote " << reports.size() << " reports to " << common->out_path
              << '\n';
  });
  return 0;
}

// ---------------------------------------------------------------------------
// finetune
// ---------------------------------------------------------------------------

int cmd_finetune(CLI::App* app) {
  auto common = std::make_shared<ProbeCommon>();
  auto config_path = std::make_shared<std::string>();
  auto fc = std::make_shared<FinetuneConfig>();
  fc->train.total_steps = 200;
  fc->train.warmup_steps = 20;
  fc->train.batch_size = 8;
  fc->train.checkpoint_every = 50;
  fc->train.peak_lr = 3e-5;

  app->add_option("--config", *config_path, "JSON config file");
  auto o_freeze = app->add_flag("--freeze-encoder", fc->freeze_encoder,
                                "Train only the linear head");
  auto o_lr = app->add_option("--peak-lr", fc->train.peak_lr, "Peak learning rate");
  auto o_warm = app->add_option("--warmup-steps", fc->train.warmup_steps, "Warmup steps");
  auto o_steps = app->add_option("--total-steps", fc->train.total_steps, "Optimizer steps");
  auto o_batch = app->add_option("--batch-size", fc->train.batch_size, "Batch size");
  auto o_ck = app->add_option("--checkpoint-every", fc->train.checkpoint_every,
                              "Snapshot interval");
  auto o_avg = app->add_option("--average-last-k", fc->train.average_last_k,
                               "Snapshots averaged for the averaged report");
  common->add_flags(app);

  app->callback([=]() {
    if (!config_path->empty()) {
      std::set<std::string> keys = common->keys();
      for (const char* k : {"freeze_encoder", "peak_lr", "warmup_steps",
                            "total_steps", "batch_size", "checkpoint_every",
                            "average_last_k"}) {
        keys.insert(k);
      }
      const json doc = load_config_file(*config_path, keys);
      common->apply_config(doc);
      apply(doc, "freeze_encoder", o_freeze, fc->freeze_encoder);
      apply(doc, "peak_lr", o_lr, fc->train.peak_lr);
      apply(doc, "warmup_steps", o_warm, fc->train.warmup_steps);
      apply(doc, "total_steps", o_steps, fc->train.total_steps);
      apply(doc, "batch_size", o_batch, fc->train.batch_size);
      apply(doc, "checkpoint_every", o_ck, fc->train.checkpoint_every);
      apply(doc, "average_last_k", o_avg, fc->train.average_last_k);
    }
    auto [enc, ds] = common->resolve();
    fc->task = common->pc.task;
    fc->n_classes = common->pc.n_classes;
    fc->threads = common->pc.threads;
    fc->train.seed = common->pc.seed;
    FinetuneResult result = run_finetune_head(enc, ds.examples, *fc);

    std::vector<MetricReport> reports = {result.best};
    if (result.averaged) reports.push_back(*result.averaged);
    const std::string csv = common->csv_path.empty()
                                ? default_csv_path(common->out_path)
                                : common->csv_path;
    emit_reports(reports, common->out_path, csv, "step", false);
    std::cout << "trainable parameters: " << result.trainable_parameters << '\n';
    for (const MetricReport& r : reports) std::cout << r.to_json().dump() << '\n';
  });
  return 0;
}

// ---------------------------------------------------------------------------
// avg-ckpt
// ---------------------------------------------------------------------------

int cmd_avg_ckpt(CLI::App* app) {
  auto inputs = std::make_shared<std::vector<std::string>>();
  auto dir = std::make_shared<std::string>();
  auto last_k = std::make_shared<std::size_t>(10);
  auto out = std::make_shared<std::string>();
  auto config_path = std::make_shared<std::string>();

  app->add_option("--config", *config_path, "JSON config file");
  auto o_inputs = app->add_option("--inputs", *inputs, "Checkpoint files to average");
  auto o_dir = app->add_option("--dir", *dir,
                               "Directory of checkpoint_*.xmdc files (uses the last K)");
  auto o_last = app->add_option("--last", *last_k, "How many trailing checkpoints");
  auto o_out = app->add_option("--out", *out, "Averaged checkpoint path")->required();

  app->callback([=]() {
    if (!config_path->empty()) {
      const json doc =
          load_config_file(*config_path, {"inputs", "dir", "last", "out"});
      apply(doc, "inputs", o_inputs, *inputs);
      apply(doc, "dir", o_dir, *dir);
      apply(doc, "last", o_last, *last_k);
      apply(doc, "out", o_out, *out);
    }
    std::vector<std::string> paths = *inputs;
    if (paths.empty()) {
      if (dir->empty()) {
        throw ConfigError("avg-ckpt: provide --inputs or --dir");
      }
      std::vector<std::string> found;
      for (const auto& entry : std::filesystem::directory_iterator(*dir)) {
        const std::string name = entry.path().filename().string();
        if (name.starts_with("checkpoint_") && name.ends_with(".xmdc")) {
          found.push_back(entry.path().string());
        }
      }
      std::sort(found.begin(), found.end());
      if (found.empty()) {
        throw DataError("avg-ckpt: no checkpoint_*.xmdc files in " + *dir);
      }
      const std::size_t take = std::min(*last_k, found.size());
      paths.assign(found.end() - static_cast<long>(take), found.end());
    }
    std::vector<Checkpoint> checkpoints;
    checkpoints.reserve(paths.size());
    for (const std::string& p : paths) checkpoints.push_back(load_checkpoint(p));
    Checkpoint averaged = average_checkpoints(checkpoints);
    save_checkpoint(*out, averaged);
    std::cout << "averaged " << checkpoints.size() << " checkpoints into " << *out
              << " (step " << averaged.step << ")\n";
  });
  return 0;
}

// ---------------------------------------------------------------------------
// grad-check
// ---------------------------------------------------------------------------

int cmd_grad_check(CLI::App* app) {
  auto points = std::make_shared<std::size_t>(5);
  auto h = std::make_shared<double>(1e-5);
  auto tol = std::make_shared<double>(1e-4);
  auto out = std::make_shared<std::string>();
  auto config_path = std::make_shared<std::string>();

  app->add_option("--config", *config_path, "JSON config file");
  auto o_points = app->add_option("--points", *points, "Seeded points per primitive");
  auto o_h = app->add_option("--fd-step", *h, "Central-difference step");
  auto o_tol = app->add_option("--tol", *tol, "Pass threshold");
  auto o_out = app->add_option("--out", *out, "Optional JSONL report path");

  app->callback([=]() {
    if (!config_path->empty()) {
      const json doc =
          load_config_file(*config_path, {"points", "fd_step", "tol", "out"});
      apply(doc, "points", o_points, *points);
      apply(doc, "fd_step", o_h, *h);
      apply(doc, "tol", o_tol, *tol);
      apply(doc, "out", o_out, *out);
    }
    const std::vector<GradCheckResult> results = run_grad_checks(*points, *h, *tol);
    bool all_pass = true;
    for (const GradCheckResult& r : results) {
      std::cout << (r.pass ? "PASS" : "FAIL") << "  " << r.name
                << "  max_rel_error=" << format_double(r.max_rel_error) << '\n';
      all_pass = all_pass && r.pass;
    }
    if (!out->empty()) {
      atomic_write_file(*out, [&](std::ostream& os) {
        for (const GradCheckResult& r : results) {
          os << json{{"name", r.name},
                     {"max_rel_error", r.max_rel_error},
                     {"pass", r.pass}}
                    .dump()
             << '\n';
        }
      });
    }
    if (!all_pass) {
      throw NumericError("grad-check: at least one primitive exceeded tolerance");
    }
  });
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Cross-modal knowledge distillation toolkit"};
  app.require_subcommand(1);

  cmd_gen_data(app.add_subcommand("gen-data", "Generate a synthetic paired dataset"));
  cmd_pretrain(app.add_subcommand("pretrain", "Distill the teacher into the student"));
  cmd_probe(app.add_subcommand("probe", "Frozen-encoder ridge probe"));
  cmd_fewshot(app.add_subcommand("fewshot", "k-shot probe sweep"));
  cmd_finetune(app.add_subcommand("finetune", "Train a linear head (encoder tunable or frozen)"));
  cmd_avg_ckpt(app.add_subcommand("avg-ckpt", "Average checkpoint parameters"));
  cmd_grad_check(app.add_subcommand("grad-check", "Finite-difference gradient verification"));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const DimensionError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace xmd
