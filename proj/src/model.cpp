#include "xmd/model.hpp"

#include <cmath>
#include <utility>

#include "xmd/ops.hpp"
#include "xmd/rng.hpp"

namespace xmd {

StudentConfig StudentConfig::defaults() {
  StudentConfig c;
  c.conv_layers = {{c.d_model, 10, 5}, {c.d_model, 4, 2}};
  return c;
}

void StudentConfig::validate() const {
  if (conv_layers.empty()) throw ConfigError("config: at least one conv layer required");
  for (std::size_t i = 0; i < conv_layers.size(); ++i) {
    const auto& l = conv_layers[i];
    if (l.channels == 0 || l.kernel == 0 || l.stride == 0) {
      throw ConfigError("config: conv layer " + std::to_string(i) +
                        " has a zero extent");
    }
  }
  if (d_model == 0 || n_heads == 0 || n_layers == 0 || d_ff == 0 ||
      d_embed == 0 || max_positions == 0) {
    throw ConfigError("config: all extents must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("config: d_model " + std::to_string(d_model) +
                      " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (conv_layers.back().channels != d_model) {
    throw ConfigError("config: last conv layer channels " +
                      std::to_string(conv_layers.back().channels) +
                      " must equal d_model " + std::to_string(d_model));
  }
}

nlohmann::json StudentConfig::to_json() const {
  nlohmann::json conv = nlohmann::json::array();
  for (const auto& l : conv_layers) {
    conv.push_back({l.channels, l.kernel, l.stride});
  }
  return nlohmann::json{{"conv_layers", conv}, {"d_model", d_model},
                        {"n_heads", n_heads},  {"n_layers", n_layers},
                        {"d_ff", d_ff},        {"d_embed", d_embed},
                        {"max_positions", max_positions}};
}

StudentConfig StudentConfig::from_json(const nlohmann::json& j) {
  StudentConfig c = StudentConfig::defaults();
  bool conv_given = false;
  for (const auto& [key, value] : j.items()) {
    if (key == "conv_layers") {
      c.conv_layers.clear();
      for (const auto& l : value) {
        if (!l.is_array() || l.size() != 3) {
          throw ConfigError("config: conv_layers entries must be [channels, kernel, stride]");
        }
        c.conv_layers.push_back({l[0].get<std::size_t>(), l[1].get<std::size_t>(),
                                 l[2].get<std::size_t>()});
      }
      conv_given = true;
    } else if (key == "d_model") {
      c.d_model = value.get<std::size_t>();
    } else if (key == "n_heads") {
      c.n_heads = value.get<std::size_t>();
    } else if (key == "n_layers") {
      c.n_layers = value.get<std::size_t>();
    } else if (key == "d_ff") {
      c.d_ff = value.get<std::size_t>();
    } else if (key == "d_embed") {
      c.d_embed = value.get<std::size_t>();
    } else if (key == "max_positions") {
      c.max_positions = value.get<std::size_t>();
    } else {
      throw ConfigError("config: unknown key \"" + key + "\"");
    }
  }
  // Default conv stack follows d_model when not given explicitly.
  if (!conv_given) {
    c.conv_layers = {{c.d_model, 10, 5}, {c.d_model, 4, 2}};
  }
  c.validate();
  return c;
}

Digest32 StudentConfig::digest() const { return sha256(to_json().dump()); }

std::vector<std::pair<std::string, std::vector<std::size_t>>> parameter_spec(
    const StudentConfig& c) {
  std::vector<std::pair<std::string, std::vector<std::size_t>>> spec;
  std::size_t in_ch = 1;
  for (std::size_t i = 0; i < c.conv_layers.size(); ++i) {
    spec.push_back({"conv" + std::to_string(i) + ".kernel",
                    {c.conv_layers[i].channels, in_ch, c.conv_layers[i].kernel}});
    in_ch = c.conv_layers[i].channels;
  }
  spec.push_back({"pos.table", {c.max_positions, c.d_model}});
  for (std::size_t i = 0; i < c.n_layers; ++i) {
    const std::string p = "layer" + std::to_string(i) + ".";
    spec.push_back({p + "ln1.gain", {c.d_model}});
    spec.push_back({p + "ln1.bias", {c.d_model}});
    spec.push_back({p + "attn.wq", {c.d_model, c.d_model}});
    spec.push_back({p + "attn.bq", {c.d_model}});
    // no key bias: softmax rows are invariant to the constant shift it adds
    spec.push_back({p + "attn.wk", {c.d_model, c.d_model}});
    spec.push_back({p + "attn.wv", {c.d_model, c.d_model}});
    spec.push_back({p + "attn.bv", {c.d_model}});
    spec.push_back({p + "attn.wo", {c.d_model, c.d_model}});
    spec.push_back({p + "attn.bo", {c.d_model}});
    spec.push_back({p + "ln2.gain", {c.d_model}});
    spec.push_back({p + "ln2.bias", {c.d_model}});
    spec.push_back({p + "ffn.w1", {c.d_model, c.d_ff}});
    spec.push_back({p + "ffn.b1", {c.d_ff}});
    spec.push_back({p + "ffn.w2", {c.d_ff, c.d_model}});
    spec.push_back({p + "ffn.b2", {c.d_model}});
  }
  spec.push_back({"final_norm.gain", {c.d_model}});
  spec.push_back({"final_norm.bias", {c.d_model}});
  spec.push_back({"proj.weight", {c.d_model, c.d_embed}});
  spec.push_back({"proj.bias", {c.d_embed}});
  return spec;
}

namespace {

Tensor sinusoidal_table(std::size_t positions, std::size_t d) {
  std::vector<double> data(positions * d);
  for (std::size_t p = 0; p < positions; ++p) {
    for (std::size_t i = 0; i < d; ++i) {
      const double exponent = static_cast<double>(2 * (i / 2)) / static_cast<double>(d);
      const double angle = static_cast<double>(p) / std::pow(10000.0, exponent);
      data[p * d + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return Tensor({positions, d}, std::move(data));
}

// fan_in/fan_out for the scaled-uniform init.
std::pair<double, double> fans(const std::vector<std::size_t>& shape) {
  if (shape.size() == 3) {
    // conv kernel [c_out x c_in x k]
    const double k = static_cast<double>(shape[2]);
    return {static_cast<double>(shape[1]) * k, static_cast<double>(shape[0]) * k};
  }
  if (shape.size() == 2) {
    // linear [d_in x d_out] applied as x @ W
    return {static_cast<double>(shape[0]), static_cast<double>(shape[1])};
  }
  return {static_cast<double>(shape[0]), static_cast<double>(shape[0])};
}

Tensor init_parameter(const std::string& name,
                      const std::vector<std::size_t>& shape,
                      const StudentConfig& c, SeededRng& rng) {
  if (name == "pos.table") return sinusoidal_table(c.max_positions, c.d_model);
  if (name.ends_with(".gain")) return Tensor::full(shape, 1.0);
  if (shape.size() == 1) return Tensor::zeros(shape);  // biases
  const auto [fan_in, fan_out] = fans(shape);
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = rng.uniform(-bound, bound);
  return Tensor(shape, std::move(data));
}

}  // namespace

StudentEncoder StudentEncoder::init(const StudentConfig& config,
                                    std::uint64_t seed) {
  config.validate();
  SeededRng rng = SeededRng::derive(seed, 0x6d6f64656c);  // "model" stream
  std::map<std::string, Tensor> params;
  for (const auto& [name, shape] : parameter_spec(config)) {
    params.emplace(name, init_parameter(name, shape, config, rng));
  }
  return StudentEncoder(config, std::move(params));
}

StudentEncoder StudentEncoder::from_parameters(
    const StudentConfig& config, std::map<std::string, Tensor> params) {
  config.validate();
  StudentEncoder enc(config, {});
  enc.set_parameters(std::move(params));
  return enc;
}

void StudentEncoder::set_parameters(std::map<std::string, Tensor> params) {
  const auto spec = parameter_spec(config_);
  if (params.size() != spec.size()) {
    throw DimensionError("parameter map has " + std::to_string(params.size()) +
                         " entries, expected " + std::to_string(spec.size()));
  }
  for (const auto& [name, shape] : spec) {
    auto it = params.find(name);
    if (it == params.end()) {
      throw DimensionError("missing parameter \"" + name + "\"");
    }
    if (it->second.shape() != shape) {
      throw DimensionError("parameter \"" + name + "\" has shape " +
                           it->second.shape_str());
    }
    if (!it->second.all_finite()) {
      throw NumericError("parameter \"" + name + "\" contains non-finite values");
    }
  }
  params_ = std::move(params);
}

std::size_t StudentEncoder::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

std::size_t feature_length(const StudentConfig& config, std::size_t signal_len) {
  std::size_t len = signal_len;
  for (std::size_t i = 0; i < config.conv_layers.size(); ++i) {
    const auto& l = config.conv_layers[i];
    if (len < l.kernel) {
      throw DimensionError("conv layer " + std::to_string(i) + ": input length " +
                           std::to_string(len) + " shorter than kernel " +
                           std::to_string(l.kernel));
    }
    len = (len - l.kernel) / l.stride + 1;
  }
  return len;
}

namespace {

// The encoder forward is written once against a backend: plain tensors for
// evaluation, traced tensors for training.
struct PlainBackend {
  using V = Tensor;
  const std::map<std::string, Tensor>& params;
  V param(const std::string& name) const { return params.at(name); }
  V constant(const Tensor& t) const { return t; }
  V conv1d(const V& x, const V& k, std::size_t s) const { return xmd::conv1d(x, k, s); }
  V gelu(const V& x) const { return xmd::gelu(x); }
  V transpose(const V& x) const { return xmd::transpose(x); }
  V slice_rows(const V& x, std::size_t a, std::size_t n) const {
    return xmd::slice_rows(x, a, n);
  }
  V slice_cols(const V& x, std::size_t a, std::size_t n) const {
    return xmd::slice_cols(x, a, n);
  }
  V concat_cols(const std::vector<V>& parts) const { return xmd::concat_cols(parts); }
  V add(const V& a, const V& b) const { return xmd::add(a, b); }
  V add_rowvec(const V& x, const V& b) const { return xmd::add_rowvec(x, b); }
  V matmul(const V& a, const V& b) const { return xmd::matmul(a, b); }
  V layer_norm(const V& x, const V& g, const V& b, double eps) const {
    return xmd::layer_norm(x, g, b, eps);
  }
  V softmax(const V& x) const { return xmd::softmax(x); }
  V scale(const V& x, double c) const { return xmd::scale(x, c); }
  V reduce_mean(const V& x, std::size_t axis) const { return xmd::reduce_mean(x, axis); }
};

struct TapeBackend {
  using V = Traced;
  GradTape& tape;
  const std::map<std::string, Traced>& params;
  V param(const std::string& name) const { return params.at(name); }
  V constant(const Tensor& t) const { return tape.constant(t); }
  V conv1d(const V& x, const V& k, std::size_t s) const {
    return xmd::conv1d(tape, x, k, s);
  }
  V gelu(const V& x) const { return xmd::gelu(tape, x); }
  V transpose(const V& x) const { return xmd::transpose(tape, x); }
  V slice_rows(const V& x, std::size_t a, std::size_t n) const {
    return xmd::slice_rows(tape, x, a, n);
  }
  V slice_cols(const V& x, std::size_t a, std::size_t n) const {
    return xmd::slice_cols(tape, x, a, n);
  }
  V concat_cols(const std::vector<V>& parts) const {
    return xmd::concat_cols(tape, parts);
  }
  V add(const V& a, const V& b) const { return xmd::add(tape, a, b); }
  V add_rowvec(const V& x, const V& b) const { return xmd::add_rowvec(tape, x, b); }
  V matmul(const V& a, const V& b) const { return xmd::matmul(tape, a, b); }
  V layer_norm(const V& x, const V& g, const V& b, double eps) const {
    return xmd::layer_norm(tape, x, g, b, eps);
  }
  V softmax(const V& x) const { return xmd::softmax(tape, x); }
  V scale(const V& x, double c) const { return xmd::scale(tape, x, c); }
  V reduce_mean(const V& x, std::size_t axis) const {
    return xmd::reduce_mean(tape, x, axis);
  }
};

constexpr double kNormEps = 1e-5;

template <class B>
typename B::V features_impl(B& b, const StudentConfig& cfg, const Tensor& signal) {
  if (signal.rank() != 1) {
    throw DimensionError("encoder input must be a rank-1 signal, got " +
                         signal.shape_str());
  }
  feature_length(cfg, signal.extent(0));  // validates, names offending layer
  const std::size_t len = signal.extent(0);
  typename B::V x = b.constant(Tensor({1, len}, std::vector<double>(
                                                    signal.values().begin(),
                                                    signal.values().end())));
  for (std::size_t i = 0; i < cfg.conv_layers.size(); ++i) {
    x = b.gelu(b.conv1d(x, b.param("conv" + std::to_string(i) + ".kernel"),
                        cfg.conv_layers[i].stride));
  }
  return b.transpose(x);  // [l x d_model]
}

template <class B>
typename B::V encode_impl(B& b, const StudentConfig& cfg, const Tensor& signal) {
  typename B::V x = features_impl(b, cfg, signal);
  const std::size_t l = feature_length(cfg, signal.extent(0));
  if (l > cfg.max_positions) {
    throw DimensionError("sequence length " + std::to_string(l) +
                         " exceeds max_positions " +
                         std::to_string(cfg.max_positions));
  }
  x = b.add(x, b.slice_rows(b.param("pos.table"), 0, l));

  const std::size_t dh = cfg.d_model / cfg.n_heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    const std::string p = "layer" + std::to_string(i) + ".";
    // attention sublayer, pre-norm
    auto h = b.layer_norm(x, b.param(p + "ln1.gain"), b.param(p + "ln1.bias"),
                          kNormEps);
    auto q = b.add_rowvec(b.matmul(h, b.param(p + "attn.wq")), b.param(p + "attn.bq"));
    auto k = b.matmul(h, b.param(p + "attn.wk"));
    auto v = b.add_rowvec(b.matmul(h, b.param(p + "attn.wv")), b.param(p + "attn.bv"));
    std::vector<typename B::V> heads;
    heads.reserve(cfg.n_heads);
    for (std::size_t hh = 0; hh < cfg.n_heads; ++hh) {
      auto qh = b.slice_cols(q, hh * dh, dh);
      auto kh = b.slice_cols(k, hh * dh, dh);
      auto vh = b.slice_cols(v, hh * dh, dh);
      auto scores = b.scale(b.matmul(qh, b.transpose(kh)), inv_sqrt_dh);
      heads.push_back(b.matmul(b.softmax(scores), vh));
    }
    auto attn = b.add_rowvec(b.matmul(b.concat_cols(heads), b.param(p + "attn.wo")),
                             b.param(p + "attn.bo"));
    x = b.add(x, attn);
    // feed-forward sublayer, pre-norm
    auto h2 = b.layer_norm(x, b.param(p + "ln2.gain"), b.param(p + "ln2.bias"),
                           kNormEps);
    auto f = b.gelu(b.add_rowvec(b.matmul(h2, b.param(p + "ffn.w1")),
                                 b.param(p + "ffn.b1")));
    auto f2 = b.add_rowvec(b.matmul(f, b.param(p + "ffn.w2")), b.param(p + "ffn.b2"));
    x = b.add(x, f2);
  }
  x = b.layer_norm(x, b.param("final_norm.gain"), b.param("final_norm.bias"),
                   kNormEps);
  return b.add_rowvec(b.matmul(x, b.param("proj.weight")), b.param("proj.bias"));
}

}  // namespace

Tensor extract_features(const StudentEncoder& enc, const Tensor& signal) {
  PlainBackend b{enc.parameters()};
  return features_impl(b, enc.config(), signal);
}

EncodedSequence encode_sequence(const StudentEncoder& enc, const Tensor& signal) {
  PlainBackend b{enc.parameters()};
  Tensor hidden = encode_impl(b, enc.config(), signal);
  return EncodedSequence{hidden, hidden.extent(0)};
}

Tensor pool_utterance(const EncodedSequence& seq) {
  return reduce_mean(seq.hidden, 0);
}

Tensor embed_signal(const StudentEncoder& enc, const Tensor& signal) {
  return pool_utterance(encode_sequence(enc, signal));
}

Traced encode_pooled(GradTape& tape, const StudentConfig& config,
                     const std::map<std::string, Traced>& params,
                     const Tensor& signal) {
  TapeBackend b{tape, params};
  Traced hidden = encode_impl(b, config, signal);
  return reduce_mean(tape, hidden, 0);
}

}  // namespace xmd
