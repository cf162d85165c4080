#include "xmd/teacher.hpp"

#include <cmath>
#include <cstring>

#include "xmd/rng.hpp"

namespace xmd {

TeacherEmbedder TeacherEmbedder::synthetic(std::uint64_t seed,
                                           std::size_t vocab_size,
                                           std::size_t d_embed) {
  if (vocab_size < 2) throw ConfigError("synthetic teacher: vocab_size must be >= 2");
  if (d_embed == 0) throw ConfigError("synthetic teacher: d_embed must be >= 1");
  TeacherEmbedder t;
  t.synthetic_ = true;
  t.seed_ = seed;
  t.vocab_size_ = vocab_size;
  t.d_embed_ = d_embed;
  t.token_vectors_.reserve(vocab_size);
  for (std::size_t tok = 0; tok < vocab_size; ++tok) {
    SeededRng rng = SeededRng::derive(seed, 0x746f6b0000ULL + tok);
    std::vector<double> v(d_embed);
    for (double& x : v) x = rng.normal();
    t.token_vectors_.push_back(Tensor({d_embed}, std::move(v)));
  }
  return t;
}

TeacherEmbedder TeacherEmbedder::file_backed(std::map<std::string, Tensor> table,
                                             std::size_t d_embed) {
  if (d_embed == 0) throw ConfigError("file-backed teacher: d_embed must be >= 1");
  for (const auto& [id, emb] : table) {
    if (emb.rank() != 1 || emb.extent(0) != d_embed) {
      throw DimensionError("file-backed teacher: embedding for \"" + id +
                           "\" has shape " + emb.shape_str());
    }
  }
  TeacherEmbedder t;
  t.synthetic_ = false;
  t.d_embed_ = d_embed;
  t.table_ = std::move(table);
  return t;
}

Tensor TeacherEmbedder::embed_tokens(std::span<const int> tokens) const {
  if (!synthetic_) {
    throw ContractError("embed_tokens: teacher is file-backed; use embed_id");
  }
  if (tokens.empty()) {
    throw ContractError("embed_tokens: empty token sequence");
  }
  std::vector<double> sum(d_embed_, 0.0);
  for (int tok : tokens) {
    if (tok < 0 || static_cast<std::size_t>(tok) >= vocab_size_) {
      throw DataError("missing target: token " + std::to_string(tok) +
                      " outside vocab of size " + std::to_string(vocab_size_));
    }
    const double* v = token_vectors_[static_cast<std::size_t>(tok)].data();
    for (std::size_t i = 0; i < d_embed_; ++i) sum[i] += v[i];
  }
  double norm = 0.0;
  for (double x : sum) norm += x * x;
  norm = std::sqrt(norm);
  if (!(norm > 1e-12)) {
    throw NumericError("embed_tokens: degenerate (near-zero) embedding");
  }
  for (double& x : sum) x /= norm;
  return Tensor({d_embed_}, std::move(sum));
}

Tensor TeacherEmbedder::embed_id(const std::string& id) const {
  if (synthetic_) {
    throw ContractError("embed_id: teacher is synthetic; use embed_tokens");
  }
  auto it = table_.find(id);
  if (it == table_.end()) {
    throw DataError("missing target: id \"" + id + "\" not in teacher table");
  }
  return it->second;
}

std::vector<std::uint8_t> TeacherEmbedder::serialized() const {
  std::vector<std::uint8_t> out;
  auto push_u64 = [&out](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  };
  auto push_f64 = [&push_u64](double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    push_u64(bits);
  };
  out.push_back(synthetic_ ? 1 : 0);
  push_u64(seed_);
  push_u64(vocab_size_);
  push_u64(d_embed_);
  for (const Tensor& v : token_vectors_) {
    for (double x : v.values()) push_f64(x);
  }
  push_u64(table_.size());
  for (const auto& [id, emb] : table_) {
    push_u64(id.size());
    out.insert(out.end(), id.begin(), id.end());
    for (double x : emb.values()) push_f64(x);
  }
  return out;
}

}  // namespace xmd
