#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace {

namespace fs = std::filesystem;

std::string cli_path() {
  const char* env = std::getenv("XMD_CLI_BIN");
  REQUIRE_MESSAGE(env != nullptr, "XMD_CLI_BIN must point at the xmd binary");
  return env;
}

struct RunResult {
  int status;
  std::string output;
};

RunResult run(const std::string& args) {
  const std::string cmd = cli_path() + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::string output;
  char buf[512];
  while (fgets(buf, sizeof(buf), pipe)) output += buf;
  const int rc = pclose(pipe);
  return {WEXITSTATUS(rc), output};
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("xmd_cli_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  static int counter;
};
int TempDir::counter = 0;

}  // namespace

TEST_CASE("unknown config keys are rejected by name") {
  TempDir dir;
  const fs::path cfg = dir.path / "bad.json";
  {
    std::ofstream os(cfg);
    os << R"({"lr_peek": 1e-3})";
  }
  RunResult r = run("pretrain --config " + cfg.string() +
                    " --data x.xmdd --out " + (dir.path / "o").string());
  CHECK(r.status == 1);
  CHECK(r.output.find("lr_peek") != std::string::npos);
}

TEST_CASE("missing dataset file is a data error (exit 2)") {
  TempDir dir;
  RunResult r = run("probe --data " + (dir.path / "none.xmdd").string() +
                    " --out " + (dir.path / "r.jsonl").string());
  CHECK(r.status == 2);
}

TEST_CASE("flag overrides config file value") {
  TempDir dir;
  const fs::path cfg = dir.path / "gen.json";
  {
    std::ofstream os(cfg);
    os << R"({"count": 5, "vocab_size": 8, "d_embed": 8, "segment_len": 16})";
  }
  const fs::path out = dir.path / "d.xmdd";
  RunResult r = run("gen-data --config " + cfg.string() + " --count 7 --out " +
                    out.string());
  REQUIRE(r.status == 0);
  CHECK(r.output.find("wrote 7 examples") != std::string::npos);

  // file value used when the flag is absent
  const fs::path out2 = dir.path / "d2.xmdd";
  RunResult r2 = run("gen-data --config " + cfg.string() + " --out " + out2.string());
  REQUIRE(r2.status == 0);
  CHECK(r2.output.find("wrote 5 examples") != std::string::npos);
}

TEST_CASE("gen-data then pretrain then probe round trip") {
  TempDir dir;
  const std::string train = (dir.path / "train.xmdd").string();
  const std::string held = (dir.path / "held.xmdd").string();
  REQUIRE(run("gen-data --seed 0 --count 60 --heldout-count 12 --vocab-size 8 "
              "--d-embed 12 --segment-len 16 --out " +
              train + " --heldout-out " + held)
              .status == 0);

  const std::string out = (dir.path / "run").string();
  RunResult p = run(
      "pretrain --data " + train + " --heldout " + held + " --out " + out +
      " --total-steps 12 --warmup-steps 2 --batch-size 6 --peak-lr 1e-3 "
      "--checkpoint-every 6 --average-last-k 2 --monitor-every 6 "
      "--d-model 8 --n-heads 1 --n-layers 1 --d-ff 16");
  REQUIRE(p.status == 0);
  CHECK(fs::exists(fs::path(out) / "final.xmdc"));
  CHECK(fs::exists(fs::path(out) / "train_log.jsonl"));
  CHECK(fs::exists(fs::path(out) / "config.json"));

  RunResult pr = run("probe --data " + train + " --ckpt " + out +
                     "/final.xmdc --task classification --n-classes 7 "
                     "--alpha 100 --seed 1 --out " +
                     (dir.path / "probe.jsonl").string());
  REQUIRE(pr.status == 0);
  CHECK(fs::exists(dir.path / "probe.jsonl"));
  CHECK(fs::exists(dir.path / "probe.csv"));
  const std::string csv = read_file(dir.path / "probe.csv");
  CHECK(csv.rfind("step,metric,value\n", 0) == 0);
}

TEST_CASE("identical runs produce byte-identical artifacts") {
  TempDir dir;
  auto dataset_bytes = [&](const std::string& name) {
    const std::string path = (dir.path / name).string();
    REQUIRE(run("gen-data --seed 3 --count 40 --vocab-size 8 --d-embed 8 "
                "--segment-len 16 --out " +
                path)
                .status == 0);
    return read_file(path);
  };
  const std::string a = dataset_bytes("a.xmdd");
  const std::string b = dataset_bytes("b.xmdd");
  REQUIRE(!a.empty());
  CHECK(a == b);

  // two pretrain runs over the same data
  auto run_bytes = [&](const std::string& name) {
    const std::string out = (dir.path / name).string();
    REQUIRE(run("pretrain --data " + (dir.path / "a.xmdd").string() +
                " --out " + out +
                " --total-steps 8 --warmup-steps 2 --batch-size 5 "
                "--peak-lr 1e-3 --checkpoint-every 4 --average-last-k 2 "
                "--d-model 8 --n-heads 1 --n-layers 1 --d-ff 16")
                .status == 0);
    return read_file(fs::path(out) / "final.xmdc") +
           read_file(fs::path(out) / "train_log.jsonl");
  };
  CHECK(run_bytes("r1") == run_bytes("r2"));
}

TEST_CASE("avg-ckpt over a run directory produces a loadable checkpoint") {
  TempDir dir;
  const std::string train = (dir.path / "t.xmdd").string();
  REQUIRE(run("gen-data --seed 1 --count 30 --vocab-size 8 --d-embed 8 "
              "--segment-len 16 --out " +
              train)
              .status == 0);
  const std::string out = (dir.path / "run").string();
  REQUIRE(run("pretrain --data " + train + " --out " + out +
              " --total-steps 10 --warmup-steps 2 --batch-size 5 --peak-lr 1e-3 "
              "--checkpoint-every 2 --average-last-k 1 "
              "--d-model 8 --n-heads 1 --n-layers 1 --d-ff 16")
              .status == 0);
  const std::string avg = (dir.path / "avg.xmdc").string();
  REQUIRE(run("avg-ckpt --dir " + out + " --last 3 --out " + avg).status == 0);
  // probing with the averaged checkpoint proves it loads and matches config
  RunResult pr = run("probe --data " + train + " --ckpt " + avg +
                     " --model-config " + out +
                     "/config.json --task classification --n-classes 7 --out " +
                     (dir.path / "p.jsonl").string());
  CHECK(pr.status == 0);
}

TEST_CASE("fewshot emits the documented CSV header") {
  TempDir dir;
  const std::string train = (dir.path / "t.xmdd").string();
  REQUIRE(run("gen-data --seed 2 --count 80 --vocab-size 8 --d-embed 8 "
              "--segment-len 16 --n-classes 4 --out " +
              train)
              .status == 0);
  const std::string fs_out = (dir.path / "fs.jsonl").string();
  RunResult r = run("fewshot --data " + train +
                    " --task classification --n-classes 4 --k-sweep 2 4 "
                    "--shot-seeds 2 --seed 5 --out " +
                    fs_out);
  REQUIRE(r.status == 0);
  const std::string csv = read_file(dir.path / "fs.csv");
  CHECK(csv.rfind("k,seed,metric,value\n", 0) == 0);
}

TEST_CASE("grad-check exits zero and prints per-primitive lines") {
  RunResult r = run("grad-check --points 2");
  CHECK(r.status == 0);
  CHECK(r.output.find("matmul") != std::string::npos);
  CHECK(r.output.find("encode_pool_mse_composition") != std::string::npos);
  CHECK(r.output.find("FAIL") == std::string::npos);
}

TEST_CASE("usage errors exit 1") {
  CHECK(run("no-such-command").status == 1);
  CHECK(run("pretrain").status == 1);  // missing required flags
}
