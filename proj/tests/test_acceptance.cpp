// Acceptance suite: one test case per criterion, each printing a pass/fail
// line. The distillation fixtures (criterion-3 setup) are built once and
// shared across criteria.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "xmd/checkpoint_io.hpp"
#include "xmd/distill.hpp"
#include "xmd/eval.hpp"
#include "xmd/gradcheck.hpp"
#include "xmd/model.hpp"
#include "xmd/rng.hpp"
#include "xmd/teacher.hpp"

using namespace xmd;

namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

double elapsed_s(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

void report(int criterion, bool pass, const std::string& detail) {
  std::cout << (pass ? "[PASS]" : "[FAIL]") << " criterion " << criterion
            << ": " << detail << std::endl;
}

// Criterion-3 pinned setup, shared by criteria 3-6 and 8.
struct DistillFixture {
  std::vector<PairedExample> train, held;
  StudentConfig cfg;
  StudentEncoder init_student;
  TeacherEmbedder teacher;
  std::vector<std::uint8_t> teacher_before;
  PretrainResult mse_run;
  double pretrain_seconds = 0.0;

  DistillFixture()
      : init_student(StudentEncoder::init(make_config(), 0)),
        teacher(TeacherEmbedder::synthetic(0, 16, 32)),
        mse_run{init_student, {}, {}, {}, {}, {}, {}, {}} {
    cfg = make_config();
    SyntheticSpec spec;
    spec.seed = 0;
    spec.vocab_size = 16;
    spec.d_embed = 32;
    spec.segment_len = 64;
    spec.noise_std = 0.05;
    spec.label_rule = LabelRule::Classification;
    spec.n_classes = 7;
    std::vector<PairedExample> all = generate_synthetic_dataset(spec, 2256);
    train.assign(all.begin(), all.begin() + 2000);
    held.assign(all.begin() + 2000, all.end());

    teacher_before = teacher.serialized();
    const auto start = Clock::now();
    mse_run = pretrain(init_student, teacher, train, held, train_config());
    pretrain_seconds = elapsed_s(start);
  }

  static StudentConfig make_config() {
    StudentConfig c;
    c.conv_layers = {{32, 10, 5}, {32, 4, 2}};
    c.d_model = 32;
    c.n_heads = 2;
    c.n_layers = 2;
    c.d_ff = 64;
    c.d_embed = 32;
    c.max_positions = 512;
    return c;
  }

  static TrainConfig train_config() {
    TrainConfig tc;
    tc.mode = TrainMode::MseKd;
    tc.peak_lr = 1e-3;
    tc.warmup_steps = 150;
    tc.total_steps = 1500;
    tc.batch_size = 16;
    tc.checkpoint_every = 100;
    tc.average_last_k = 10;
    tc.monitor_every = 100;
    tc.seed = 0;
    return tc;
  }

  static DistillFixture& get() {
    static DistillFixture fixture;
    return fixture;
  }
};

// Test-only ridge oracle: explicit Gauss-Jordan inverse of the normal matrix.
std::vector<double> ridge_oracle(const Tensor& x, const Tensor& y, double alpha,
                                 bool fit_bias) {
  const std::size_t n = x.extent(0), d = x.extent(1);
  const std::size_t cols = fit_bias ? d + 1 : d;
  std::vector<double> a(n * cols);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c) a[r * cols + c] = x.at(r * d + c);
    if (fit_bias) a[r * cols + d] = 1.0;
  }
  std::vector<double> g(cols * cols, 0.0), rhs(cols, 0.0);
  for (std::size_t i = 0; i < cols; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      double acc = 0.0;
      for (std::size_t r = 0; r < n; ++r) acc += a[r * cols + i] * a[r * cols + j];
      g[i * cols + j] = acc;
    }
    if (i < d) g[i * cols + i] += alpha;
    double acc = 0.0;
    for (std::size_t r = 0; r < n; ++r) acc += a[r * cols + i] * y.at(r);
    rhs[i] = acc;
  }
  std::vector<double> inv(cols * cols, 0.0);
  for (std::size_t i = 0; i < cols; ++i) inv[i * cols + i] = 1.0;
  for (std::size_t p = 0; p < cols; ++p) {
    std::size_t pivot = p;
    for (std::size_t r = p + 1; r < cols; ++r) {
      if (std::abs(g[r * cols + p]) > std::abs(g[pivot * cols + p])) pivot = r;
    }
    for (std::size_t c = 0; c < cols; ++c) {
      std::swap(g[p * cols + c], g[pivot * cols + c]);
      std::swap(inv[p * cols + c], inv[pivot * cols + c]);
    }
    const double diag = g[p * cols + p];
    for (std::size_t c = 0; c < cols; ++c) {
      g[p * cols + c] /= diag;
      inv[p * cols + c] /= diag;
    }
    for (std::size_t r = 0; r < cols; ++r) {
      if (r == p) continue;
      const double factor = g[r * cols + p];
      for (std::size_t c = 0; c < cols; ++c) {
        g[r * cols + c] -= factor * g[p * cols + c];
        inv[r * cols + c] -= factor * inv[p * cols + c];
      }
    }
  }
  std::vector<double> w(cols, 0.0);
  for (std::size_t i = 0; i < cols; ++i) {
    for (std::size_t j = 0; j < cols; ++j) w[i] += inv[i * cols + j] * rhs[j];
  }
  return w;
}

// Test-only confusion-matrix oracle (independent counting route).
std::pair<double, double> confusion_oracle(std::span<const int> pred,
                                           std::span<const int> target) {
  std::set<int> classes(pred.begin(), pred.end());
  classes.insert(target.begin(), target.end());
  std::map<std::pair<int, int>, std::size_t> cm;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    cm[{target[i], pred[i]}] += 1;
    if (pred[i] == target[i]) ++correct;
  }
  double weighted = 0.0;
  for (int cls : classes) {
    std::size_t tp = 0, pred_pos = 0, actual_pos = 0;
    for (const auto& [key, count] : cm) {
      if (key.first == cls && key.second == cls) tp += count;
      if (key.second == cls) pred_pos += count;
      if (key.first == cls) actual_pos += count;
    }
    const std::size_t denom = 2 * tp + (pred_pos - tp) + (actual_pos - tp);
    const double f1 = denom == 0 ? 0.0
                                 : 2.0 * static_cast<double>(tp) /
                                       static_cast<double>(denom);
    weighted += f1 * static_cast<double>(actual_pos);
  }
  return {weighted / static_cast<double>(pred.size()),
          static_cast<double>(correct) / static_cast<double>(pred.size())};
}

Tensor random_rows(std::size_t n, std::size_t d, SeededRng& rng) {
  std::vector<double> v(n * d);
  for (double& x : v) x = rng.normal();
  return Tensor({n, d}, std::move(v));
}

}  // namespace

TEST_CASE("criterion 1: gradient correctness") {
  const auto start = Clock::now();
  const std::vector<GradCheckResult> results = run_grad_checks(5, 1e-5, 1e-4);
  const double seconds = elapsed_s(start);

  double worst = 0.0;
  bool all_pass = true;
  for (const GradCheckResult& r : results) {
    worst = std::max(worst, r.max_rel_error);
    all_pass = all_pass && r.pass;
    CHECK_MESSAGE(r.pass, r.name, " max_rel_error=", r.max_rel_error);
  }
  const bool in_time = seconds < 60.0;
  CHECK(in_time);
  std::ostringstream detail;
  detail << "finite differences on every primitive + encode->pool->mse "
            "composition, worst rel err "
         << worst << " (tol 1e-4), " << seconds << " s";
  report(1, all_pass && in_time, detail.str());
}

TEST_CASE("criterion 2: analytic oracles") {
  bool pass = true;

  // ridge_fit vs explicit normal-equation oracle, 100 random instances
  SeededRng rng(17);
  double worst_ridge = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.uniform_int(63);
    const std::size_t d = 1 + rng.uniform_int(std::min<std::size_t>(16, n));
    const double alpha = rng.uniform(0.1, 50.0);
    const bool fit_bias = rng.uniform() < 0.5;
    Tensor x = random_rows(n, d, rng);
    Tensor y = random_rows(n, 1, rng);
    Tensor w = ridge_fit(x, y, RidgeConfig{alpha}, fit_bias);
    const std::vector<double> oracle = ridge_oracle(x, y, alpha, fit_bias);
    for (std::size_t i = 0; i < oracle.size(); ++i) {
      const double rel = std::abs(w.at(i) - oracle[i]) /
                         std::max(std::abs(oracle[i]), 1e-8);
      worst_ridge = std::max(worst_ridge, rel);
    }
  }
  pass = pass && worst_ridge <= 1e-8;
  CHECK(worst_ridge <= 1e-8);

  // weighted F1 / accuracy vs brute-force confusion-matrix oracle, exact
  SeededRng rng2(21);
  bool metrics_exact = true;
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 1 + rng2.uniform_int(40);
    const int n_cls = 2 + static_cast<int>(rng2.uniform_int(5));
    std::vector<int> pred(n), target(n);
    for (std::size_t i = 0; i < n; ++i) {
      pred[i] = static_cast<int>(rng2.uniform_int(n_cls));
      target[i] = static_cast<int>(rng2.uniform_int(n_cls));
    }
    const auto [f1, acc] = confusion_oracle(pred, target);
    if (metric_weighted_f1(pred, target) != f1) metrics_exact = false;
    if (metric_accuracy(pred, target) != acc) metrics_exact = false;
  }
  pass = pass && metrics_exact;
  CHECK(metrics_exact);

  // infonce equals ln B on equal-similarity batches
  double worst_lnb = 0.0;
  for (std::size_t b : {2u, 4u, 8u}) {
    std::vector<double> v(b * 4, 0.0);
    for (std::size_t i = 0; i < b; ++i) v[i * 4] = 1.0;
    Tensor emb({b, 4}, std::move(v));
    ContrastiveState state;
    worst_lnb = std::max(worst_lnb,
                         std::abs(infonce_loss(emb, emb, state) -
                                  std::log(static_cast<double>(b))));
  }
  pass = pass && worst_lnb <= 1e-9;
  CHECK(worst_lnb <= 1e-9);

  // pinned pearson value
  std::vector<double> p{1, 2, 3}, q{1, 3, 2};
  const double r = metric_pearson(p, q);
  pass = pass && std::abs(r - 0.5) <= 1e-12;
  CHECK(std::abs(r - 0.5) <= 1e-12);

  std::ostringstream detail;
  detail << "ridge worst rel " << worst_ridge
         << " (tol 1e-8); f1/accuracy exact on 500; |infonce - ln B| "
         << worst_lnb << " (tol 1e-9); pearson(1,2,3 ; 1,3,2) = " << r;
  report(2, pass, detail.str());
}

TEST_CASE("criterion 3: distillation learns") {
  DistillFixture& f = DistillFixture::get();
  REQUIRE(f.mse_run.heldout_mse_init.has_value());
  REQUIRE(f.mse_run.heldout_mse_final.has_value());
  const double init = *f.mse_run.heldout_mse_init;
  const double final_mse = *f.mse_run.heldout_mse_final;
  const double ratio = final_mse / init;
  const bool learned = final_mse <= 0.5 * init;
  const bool in_time = f.pretrain_seconds < 600.0;
  CHECK(learned);
  CHECK(in_time);
  std::ostringstream detail;
  detail << "held-out MSE " << init << " -> " << final_mse << " (ratio " << ratio
         << ", bound 0.5), " << f.pretrain_seconds << " s";
  report(3, learned && in_time, detail.str());
}

TEST_CASE("criterion 4: frozen-probe advantage") {
  DistillFixture& f = DistillFixture::get();
  StudentEncoder random_enc = StudentEncoder::init(f.cfg, 1);

  ProbeConfig pc;
  pc.task = ProbeTask::Classification;
  pc.n_classes = 7;
  pc.ridge.alpha = 100.0;
  pc.seed = 0;
  pc.threads = 2;

  const double full_distilled =
      run_probe(f.mse_run.student, f.train, pc).metrics.at("accuracy");
  const double full_random =
      run_probe(random_enc, f.train, pc).metrics.at("accuracy");
  bool pass = full_distilled > full_random;
  CHECK(full_distilled > full_random);

  std::ostringstream detail;
  detail << "ridge probe accuracy distilled vs random: full " << full_distilled
         << " vs " << full_random;
  for (std::size_t k : {4u, 8u, 16u}) {
    double mean_distilled = 0.0, mean_random = 0.0;
    for (std::uint64_t s = 0; s < 5; ++s) {
      mean_distilled +=
          run_probe_k_shot(f.mse_run.student, f.train, pc, k, 100 + s)
              .metrics.at("accuracy");
      mean_random +=
          run_probe_k_shot(random_enc, f.train, pc, k, 100 + s)
              .metrics.at("accuracy");
    }
    mean_distilled /= 5.0;
    mean_random /= 5.0;
    const bool k_pass = mean_distilled > mean_random;
    pass = pass && k_pass;
    CHECK_MESSAGE(k_pass, "k=", k, " distilled=", mean_distilled,
                  " random=", mean_random);
    detail << "; k=" << k << " " << mean_distilled << " vs " << mean_random;
  }
  report(4, pass, detail.str());
}

TEST_CASE("criterion 5: frozen-teacher contract") {
  DistillFixture& f = DistillFixture::get();
  const bool unchanged = f.teacher.serialized() == f.teacher_before;
  CHECK(unchanged);
  report(5, unchanged,
         "teacher serialized state bitwise-identical across the full pretrain run");
}

TEST_CASE("criterion 6: checkpoint-averaging properties") {
  DistillFixture& f = DistillFixture::get();
  REQUIRE(f.mse_run.checkpoints.size() >= 10);

  // K identical checkpoints average to the same bits
  const Checkpoint& sample = f.mse_run.checkpoints.back();
  std::vector<Checkpoint> copies(5, sample);
  Checkpoint averaged_copies = average_checkpoints(copies);
  bool bitwise = true;
  for (const auto& [name, t] : sample.params) {
    if (!(averaged_copies.params.at(name) == t)) bitwise = false;
  }
  CHECK(bitwise);

  // order invariance within 1e-15
  std::vector<Checkpoint> last10(f.mse_run.checkpoints.end() - 10,
                                 f.mse_run.checkpoints.end());
  Checkpoint fwd = average_checkpoints(last10);
  std::vector<Checkpoint> reversed(last10.rbegin(), last10.rend());
  Checkpoint rev = average_checkpoints(reversed);
  double worst_order = 0.0;
  for (const auto& [name, t] : fwd.params) {
    const Tensor& r = rev.params.at(name);
    for (std::size_t i = 0; i < t.numel(); ++i) {
      worst_order = std::max(worst_order, std::abs(t.at(i) - r.at(i)));
    }
  }
  const bool order_ok = worst_order <= 1e-15;
  CHECK(order_ok);

  // averaged model close to the best single checkpoint on held-out MSE
  StudentEncoder probe_enc = f.init_student;
  double best = std::numeric_limits<double>::infinity();
  for (const Checkpoint& c : f.mse_run.checkpoints) {
    probe_enc.set_parameters(c.params);
    best = std::min(best, heldout_mse(probe_enc, f.held));
  }
  probe_enc.set_parameters(fwd.params);
  const double avg_mse = heldout_mse(probe_enc, f.held);
  const bool close = avg_mse <= 1.2 * best;
  CHECK(close);

  std::ostringstream detail;
  detail << "identical-average bitwise; order deviation " << worst_order
         << " (tol 1e-15); avg-last-10 held-out MSE " << avg_mse
         << " vs best single " << best << " (bound 1.2x)";
  report(6, bitwise && order_ok && close, detail.str());
}

namespace {

std::string run_cli_cmd(const std::string& args) {
  const char* bin = std::getenv("XMD_CLI_BIN");
  REQUIRE_MESSAGE(bin != nullptr, "XMD_CLI_BIN must point at the xmd binary");
  const std::string cmd = std::string(bin) + " " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  REQUIRE_MESSAGE(rc == 0, "command failed: ", args);
  return cmd;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE_MESSAGE(is.good(), "missing artifact: ", p.string());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

}  // namespace

TEST_CASE("criterion 7: command determinism") {
  const fs::path root =
      fs::temp_directory_path() / ("xmd_accept_" + std::to_string(::getpid()));
  fs::remove_all(root);
  fs::create_directories(root);

  // Two identical passes of every command, artifacts compared byte-for-byte.
  auto pass_dir = [&](int i) { return root / ("pass" + std::to_string(i)); };
  std::vector<std::string> artifacts;
  for (int i = 1; i <= 2; ++i) {
    const fs::path d = pass_dir(i);
    fs::create_directories(d);
    const std::string train = (d / "train.xmdd").string();
    const std::string held = (d / "held.xmdd").string();
    run_cli_cmd("gen-data --seed 0 --count 80 --heldout-count 20 --vocab-size 8"
                " --d-embed 12 --segment-len 16 --n-classes 4 --out " +
                train + " --heldout-out " + held);
    const std::string run = (d / "run").string();
    run_cli_cmd("pretrain --data " + train + " --heldout " + held + " --out " +
                run +
                " --total-steps 14 --warmup-steps 2 --batch-size 8"
                " --peak-lr 1e-3 --checkpoint-every 7 --average-last-k 2"
                " --monitor-every 7 --d-model 8 --n-heads 1 --n-layers 1"
                " --d-ff 16");
    run_cli_cmd("probe --data " + train + " --ckpt " + run +
                "/final.xmdc --task classification --n-classes 4 --alpha 100"
                " --seed 1 --threads 1 --out " +
                (d / "probe.jsonl").string());
    run_cli_cmd("fewshot --data " + train + " --ckpt " + run +
                "/final.xmdc --task classification --n-classes 4 --k-sweep 2 3"
                " --shot-seeds 2 --seed 1 --threads 1 --out " +
                (d / "fewshot.jsonl").string());
    run_cli_cmd("finetune --data " + train + " --ckpt " + run +
                "/final.xmdc --task classification --n-classes 4"
                " --total-steps 10 --warmup-steps 2 --batch-size 8"
                " --checkpoint-every 5 --average-last-k 2 --peak-lr 1e-3"
                " --seed 1 --threads 1 --out " +
                (d / "finetune.jsonl").string());
    run_cli_cmd("avg-ckpt --dir " + run + " --last 2 --out " +
                (d / "avg.xmdc").string());
    run_cli_cmd("grad-check --points 2 --out " + (d / "grad.jsonl").string());
  }

  const std::vector<std::string> names = {
      "train.xmdd",     "held.xmdd",       "run/final.xmdc",
      "run/train_log.jsonl", "run/summary.json", "run/config.json",
      "run/checkpoint_000007.xmdc", "run/checkpoint_000014.xmdc",
      "probe.jsonl",    "probe.csv",       "fewshot.jsonl",
      "fewshot.csv",    "finetune.jsonl",  "finetune.csv",
      "avg.xmdc",       "grad.jsonl"};
  bool all_equal = true;
  std::string first_diff;
  for (const std::string& name : names) {
    const std::string a = slurp(pass_dir(1) / name);
    const std::string b = slurp(pass_dir(2) / name);
    if (a != b) {
      all_equal = false;
      if (first_diff.empty()) first_diff = name;
    }
  }
  CHECK_MESSAGE(all_equal, "first differing artifact: ", first_diff);
  fs::remove_all(root);
  std::ostringstream detail;
  detail << names.size()
         << " artifacts from gen-data/pretrain/probe/fewshot/finetune/"
            "avg-ckpt/grad-check byte-identical across two runs";
  if (!all_equal) detail << " (first diff: " << first_diff << ")";
  report(7, all_equal, detail.str());
}

TEST_CASE("criterion 8: contrastive path") {
  DistillFixture& f = DistillFixture::get();
  TrainConfig tc = DistillFixture::train_config();
  tc.mode = TrainMode::InfoNce;

  PretrainResult r = pretrain(f.init_student, f.teacher, f.train, f.held, tc);

  bool tau_ok = true;
  double tau_min = std::numeric_limits<double>::infinity(), tau_max = 0.0;
  for (const TrainLogEntry& e : r.log) {
    if (!e.tau.has_value()) {
      tau_ok = false;
      continue;
    }
    if (!(*e.tau > 0.0) || !std::isfinite(*e.tau)) tau_ok = false;
    tau_min = std::min(tau_min, *e.tau);
    tau_max = std::max(tau_max, *e.tau);
  }
  CHECK(tau_ok);

  REQUIRE(r.s_plus_init.has_value());
  REQUIRE(r.s_plus_final.has_value());
  const bool s_plus_up = *r.s_plus_final > *r.s_plus_init;
  CHECK(s_plus_up);

  std::ostringstream detail;
  detail << "infonce run completed; tau in [" << tau_min << ", " << tau_max
         << "] (positive, bounded); held-out positive-pair similarity "
         << *r.s_plus_init << " -> " << *r.s_plus_final;
  report(8, tau_ok && s_plus_up, detail.str());
}
