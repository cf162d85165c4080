#pragma once

#include <json.hpp>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "xmd/digest.hpp"
#include "xmd/tape.hpp"
#include "xmd/tensor.hpp"

namespace xmd {

struct ConvLayerSpec {
  std::size_t channels = 0;
  std::size_t kernel = 0;
  std::size_t stride = 0;
};

// Toy-scale analogue of a strided-conv + transformer utterance encoder.
// The last conv layer's channel count must equal d_model (the conv stack
// feeds the transformer directly).
struct StudentConfig {
  std::vector<ConvLayerSpec> conv_layers;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 2;
  std::size_t d_ff = 128;
  std::size_t d_embed = 64;
  std::size_t max_positions = 512;

  // Two strided conv layers ending at d_model channels.
  static StudentConfig defaults();

  void validate() const;  // ConfigError on violation

  nlohmann::json to_json() const;
  static StudentConfig from_json(const nlohmann::json& j);

  // SHA-256 of the canonical JSON form; identifies the architecture in
  // checkpoints and reports.
  Digest32 digest() const;
};

struct EncodedSequence {
  Tensor hidden;       // [l x d_embed]
  std::size_t length;  // l >= 1
};

class StudentEncoder {
 public:
  // Scaled-uniform weights (+-sqrt(6/(fan_in+fan_out))), unit norm gains,
  // zero biases, sinusoidal positional table; deterministic in seed.
  static StudentEncoder init(const StudentConfig& config, std::uint64_t seed);

  // Binds an existing parameter map, validating names and shapes.
  static StudentEncoder from_parameters(const StudentConfig& config,
                                        std::map<std::string, Tensor> params);

  const StudentConfig& config() const { return config_; }
  const std::map<std::string, Tensor>& parameters() const { return params_; }
  std::size_t parameter_count() const;

  // Replaces the full parameter map; names and shapes must match.
  void set_parameters(std::map<std::string, Tensor> params);

 private:
  StudentEncoder(StudentConfig config, std::map<std::string, Tensor> params)
      : config_(std::move(config)), params_(std::move(params)) {}
  StudentConfig config_;
  std::map<std::string, Tensor> params_;
};

// Expected parameter shapes for a config, in a fixed architectural order
// (also the initialization draw order).
std::vector<std::pair<std::string, std::vector<std::size_t>>> parameter_spec(
    const StudentConfig& config);

// Conv front end: each layer is a valid strided conv followed by GELU.
// Returns [l x d_model]. Throws DimensionError naming the offending layer
// when the signal is too short.
Tensor extract_features(const StudentEncoder& enc, const Tensor& signal);

// Full encoder: features + sinusoidal positions -> pre-norm transformer
// blocks -> final norm -> linear projection to d_embed.
EncodedSequence encode_sequence(const StudentEncoder& enc, const Tensor& signal);

// Eq-style temporal mean pool over the encoded sequence.
Tensor pool_utterance(const EncodedSequence& seq);

// Convenience: encode then pool.
Tensor embed_signal(const StudentEncoder& enc, const Tensor& signal);

// Traced encode->pool against leafed parameters (training path). The signal
// is a constant; gradients flow to every entry of `params`.
Traced encode_pooled(GradTape& tape, const StudentConfig& config,
                     const std::map<std::string, Traced>& params,
                     const Tensor& signal);

// Output length of the conv stack for a given signal length; throws
// DimensionError naming the offending layer when too short.
std::size_t feature_length(const StudentConfig& config, std::size_t signal_len);

}  // namespace xmd
