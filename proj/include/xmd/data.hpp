#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "xmd/rng.hpp"
#include "xmd/tensor.hpp"

namespace xmd {

// Regression scalar, single class id, or one class id per head.
using Label = std::variant<double, int, std::vector<int>>;

constexpr int kCanonicalSampleRate = 16000;

struct PairedExample {
  std::string id;
  Tensor signal;  // rank-1 mono sample stream
  int sample_rate = kCanonicalSampleRate;
  Tensor target;  // rank-1 teacher embedding
  std::optional<Label> label;
  std::optional<std::vector<int>> tokens;
};

enum class LabelRule { Classification, Regression };

// Desk-scale paired-data generator: token sequences rendered as sinusoid
// composites on the signal side and embedded by the synthetic teacher on the
// target side, so both modalities share a known latent meaning.
struct SyntheticSpec {
  std::uint64_t seed = 0;
  std::size_t vocab_size = 16;
  std::size_t d_embed = 64;
  std::size_t segment_len = 64;  // samples per token
  double base_freq = 220.0;      // Hz
  double freq_step = 40.0;       // Hz per token id
  double noise_std = 0.05;
  LabelRule label_rule = LabelRule::Classification;
  std::size_t n_classes = 7;

  void validate() const;
};

// Draws token count uniform in [3, 12] and tokens uniform over the vocab;
// renders each token as segment_len samples of two sinusoids
// (base_freq + token * freq_step and 1.7x that) plus Gaussian noise. The
// target is the synthetic teacher embedding of the token sequence; the label
// follows spec.label_rule (classification: first token mod n_classes;
// regression: mean token id scaled to [-3, 3]).
PairedExample generate_synthetic_example(const SyntheticSpec& spec,
                                         SeededRng& rng, std::string id);

std::vector<PairedExample> generate_synthetic_dataset(const SyntheticSpec& spec,
                                                      std::size_t count);

// Dataset container: a JSON-lines index (header + one record per example)
// followed by a binary section ("XMDD" magic, u32 version, little-endian f64
// payload). The index is human-inspectable; offsets are in float units
// relative to the payload start.
struct DatasetMeta {
  int sample_rate = kCanonicalSampleRate;
  std::size_t d_embed = 0;
  std::optional<SyntheticSpec> provenance;  // present for generated data
};

struct Dataset {
  std::vector<PairedExample> examples;
  DatasetMeta meta;
};

void save_paired_dataset(const std::string& path,
                         const std::vector<PairedExample>& examples,
                         const DatasetMeta& meta);

Dataset load_paired_dataset(const std::string& path);

// Canonical model input: 16 kHz mono in [-1, 1]. Rank-2 input is
// [channels x samples] and is averaged to mono; other sample rates are
// rejected (resampling is out of scope).
Tensor to_canonical(const Tensor& signal, int sample_rate, int channels);

struct Batch {
  std::vector<PairedExample> examples;
};

// Deterministic shuffle from (seed, epoch); yields full batches, then the
// final partial batch unless drop_partial is set (contrastive training needs
// full batches).
std::vector<Batch> iterate_batches(const std::vector<PairedExample>& dataset,
                                   std::size_t batch_size, std::uint64_t seed,
                                   std::uint64_t epoch, bool drop_partial);

}  // namespace xmd
