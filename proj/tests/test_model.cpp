#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "xmd/distill.hpp"
#include "xmd/model.hpp"
#include "xmd/ops.hpp"
#include "xmd/rng.hpp"
#include "xmd/teacher.hpp"

using namespace xmd;

namespace {

StudentConfig tiny_config() {
  StudentConfig c;
  c.conv_layers = {{8, 10, 5}, {8, 4, 2}};
  c.d_model = 8;
  c.n_heads = 1;
  c.n_layers = 1;
  c.d_ff = 16;
  c.d_embed = 8;
  c.max_positions = 32;
  return c;
}

Tensor random_signal(std::size_t len, SeededRng& rng) {
  std::vector<double> v(len);
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor({len}, std::move(v));
}

}  // namespace

TEST_CASE("init_student is deterministic in (config, seed)") {
  StudentConfig c = tiny_config();
  StudentEncoder a = StudentEncoder::init(c, 7);
  StudentEncoder b = StudentEncoder::init(c, 7);
  REQUIRE(a.parameters().size() == b.parameters().size());
  for (const auto& [name, t] : a.parameters()) {
    CHECK(t == b.parameters().at(name));
  }
}

TEST_CASE("different seeds give at least one differing parameter") {
  StudentConfig c = tiny_config();
  StudentEncoder a = StudentEncoder::init(c, 7);
  StudentEncoder b = StudentEncoder::init(c, 8);
  bool any_diff = false;
  for (const auto& [name, t] : a.parameters()) {
    if (t != b.parameters().at(name)) any_diff = true;
  }
  CHECK(any_diff);
}

TEST_CASE("d_model not divisible by n_heads is a configuration error") {
  StudentConfig c = tiny_config();
  c.d_model = 33;
  c.n_heads = 4;
  c.conv_layers.back().channels = 33;
  CHECK_THROWS_AS(StudentEncoder::init(c, 0), ConfigError);
}

TEST_CASE("last conv channels must equal d_model") {
  StudentConfig c = tiny_config();
  c.conv_layers.back().channels = 4;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("extract_features: composed length formula") {
  StudentConfig c = tiny_config();  // conv (8,10,5), (8,4,2)
  StudentEncoder enc = StudentEncoder::init(c, 1);
  SeededRng rng(2);
  Tensor sig = random_signal(100, rng);
  Tensor feats = extract_features(enc, sig);
  // first layer: floor((100-10)/5)+1 = 19; second: floor((19-4)/2)+1 = 8
  CHECK(feats.shape() == std::vector<std::size_t>{8, 8});
  CHECK(feature_length(c, 100) == 8);
}

TEST_CASE("too-short signal names the offending layer") {
  StudentConfig c = tiny_config();
  StudentEncoder enc = StudentEncoder::init(c, 1);
  SeededRng rng(3);
  try {
    extract_features(enc, random_signal(9, rng));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("conv layer 0") != std::string::npos);
  }
  // long enough for layer 0 (len 10 -> 1 frame) but too short for layer 1
  try {
    extract_features(enc, random_signal(14, rng));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("conv layer 1") != std::string::npos);
  }
}

TEST_CASE("zero signal produces finite features") {
  StudentEncoder enc = StudentEncoder::init(tiny_config(), 1);
  Tensor feats = extract_features(enc, Tensor::zeros({64}));
  CHECK(feats.all_finite());
}

TEST_CASE("encode_sequence: shape contract and determinism") {
  StudentEncoder enc = StudentEncoder::init(tiny_config(), 5);
  SeededRng rng(4);
  Tensor sig = random_signal(120, rng);
  EncodedSequence a = encode_sequence(enc, sig);
  EncodedSequence b = encode_sequence(enc, sig);
  CHECK(a.hidden.shape() == std::vector<std::size_t>{a.length, 8});
  CHECK(a.hidden == b.hidden);  // bitwise
  CHECK(a.length == feature_length(enc.config(), 120));
}

TEST_CASE("sequence longer than max_positions is rejected") {
  StudentConfig c = tiny_config();
  c.max_positions = 4;
  StudentEncoder enc = StudentEncoder::init(c, 5);
  SeededRng rng(4);
  CHECK_THROWS_AS(encode_sequence(enc, random_signal(400, rng)), DimensionError);
}

TEST_CASE("positions matter: reversing the signal changes the embedding") {
  StudentEncoder enc = StudentEncoder::init(tiny_config(), 5);
  SeededRng rng(6);
  Tensor sig = random_signal(120, rng);
  std::vector<double> rev(sig.values().rbegin(), sig.values().rend());
  Tensor sig_rev({120}, std::move(rev));
  Tensor a = embed_signal(enc, sig);
  Tensor b = embed_signal(enc, sig_rev);
  CHECK(a != b);
}

TEST_CASE("pool_utterance equals reduce_mean over time and handles l=1") {
  StudentEncoder enc = StudentEncoder::init(tiny_config(), 5);
  SeededRng rng(8);
  EncodedSequence seq = encode_sequence(enc, random_signal(100, rng));
  CHECK(pool_utterance(seq) == reduce_mean(seq.hidden, 0));

  EncodedSequence single{Tensor({1, 3}, {4, 5, 6}), 1};
  CHECK(pool_utterance(single) == Tensor({3}, {4, 5, 6}));

  // mean pooling is invariant to reordering of the hidden vectors
  EncodedSequence two{Tensor({2, 2}, {1, 2, 3, 4}), 2};
  EncodedSequence swapped{Tensor({2, 2}, {3, 4, 1, 2}), 2};
  CHECK(pool_utterance(two) == pool_utterance(swapped));
}

TEST_CASE("encode->pool output is finite over random signals") {
  StudentEncoder enc = StudentEncoder::init(tiny_config(), 9);
  SeededRng rng(10);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t len = 32 + rng.uniform_int(200);
    Tensor emb = embed_signal(enc, random_signal(len, rng));
    CHECK(emb.all_finite());
    CHECK(emb.extent(0) == 8);
  }
}

TEST_CASE("gradient through encode->pool->mse passes finite differences") {
  // Tiny config: d_model 8, 1 layer, 1 head. Check a few parameters fully
  // and every parameter via the aggregated check in the acceptance suite.
  StudentConfig c = tiny_config();
  StudentEncoder enc = StudentEncoder::init(c, 11);
  SeededRng rng(12);
  Tensor sig = random_signal(64, rng);
  Tensor target = [&] {
    std::vector<double> v(c.d_embed);
    for (double& x : v) x = rng.normal();
    return Tensor({c.d_embed}, std::move(v));
  }();

  for (const std::string probe_name :
       {std::string("conv1.kernel"), std::string("layer0.attn.wq"),
        std::string("layer0.ffn.w1"), std::string("proj.weight"),
        std::string("final_norm.gain")}) {
    auto f = [&](GradTape& tape, const Traced& x) {
      std::map<std::string, Traced> traced;
      for (const auto& [name, p] : enc.parameters()) {
        traced.emplace(name, name == probe_name ? x : tape.constant(p));
      }
      Traced emb = encode_pooled(tape, c, traced, sig);
      std::vector<Traced> rows = {emb};
      Traced mat = stack_rows(tape, rows);
      Tensor tgt({1, c.d_embed},
                 std::vector<double>(target.values().begin(), target.values().end()));
      return mse_loss(tape, mat, tgt);
    };
    const double err = finite_diff_check(f, enc.parameters().at(probe_name), 1e-5);
    CAPTURE(probe_name);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("synthetic teacher: deterministic, unit norm, vocab checked") {
  TeacherEmbedder t = TeacherEmbedder::synthetic(3, 16, 32);
  std::vector<int> tokens = {1, 5, 5, 9};
  Tensor a = t.embed_tokens(tokens);
  Tensor b = t.embed_tokens(tokens);
  CHECK(a == b);
  double norm = 0.0;
  for (double v : a.values()) norm += v * v;
  CHECK(std::abs(std::sqrt(norm) - 1.0) <= 1e-12);

  std::vector<int> bad = {1, 99};
  CHECK_THROWS_AS(t.embed_tokens(bad), DataError);
  CHECK_THROWS_AS(t.embed_id("ex0"), ContractError);
}

TEST_CASE("file-backed teacher: lookup and missing id") {
  std::map<std::string, Tensor> table;
  table.emplace("a", Tensor({2}, {1.0, 0.0}));
  TeacherEmbedder t = TeacherEmbedder::file_backed(std::move(table), 2);
  CHECK(t.embed_id("a") == Tensor({2}, {1.0, 0.0}));
  CHECK_THROWS_AS(t.embed_id("b"), DataError);
  std::vector<int> toks = {0};
  CHECK_THROWS_AS(t.embed_tokens(toks), ContractError);
}

TEST_CASE("teacher serialization is stable") {
  TeacherEmbedder a = TeacherEmbedder::synthetic(3, 8, 16);
  TeacherEmbedder b = TeacherEmbedder::synthetic(3, 8, 16);
  CHECK(a.serialized() == b.serialized());
  TeacherEmbedder c = TeacherEmbedder::synthetic(4, 8, 16);
  CHECK(a.serialized() != c.serialized());
}

TEST_CASE("config digest changes with architecture") {
  StudentConfig a = tiny_config();
  StudentConfig b = tiny_config();
  b.n_layers = 2;
  CHECK(a.digest() == tiny_config().digest());
  CHECK(a.digest() != b.digest());
}
