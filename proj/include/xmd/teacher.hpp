#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "xmd/tensor.hpp"

namespace xmd {

// Frozen embedder producing the distillation targets. Two variants: a
// file-backed lookup from example id to embedding, and a deterministic
// synthetic embedder (unit-normalized sum of fixed per-token seeded random
// vectors). Neither exposes a parameter-update path.
class TeacherEmbedder {
 public:
  static TeacherEmbedder synthetic(std::uint64_t seed, std::size_t vocab_size,
                                   std::size_t d_embed);
  static TeacherEmbedder file_backed(std::map<std::string, Tensor> table,
                                     std::size_t d_embed);

  bool is_synthetic() const { return synthetic_; }
  std::size_t d_embed() const { return d_embed_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t vocab_size() const { return vocab_size_; }

  // Synthetic variant. Out-of-vocab tokens are a missing-target error.
  Tensor embed_tokens(std::span<const int> tokens) const;

  // File-backed variant. Unknown ids are a missing-target error.
  Tensor embed_id(const std::string& id) const;

  // Canonical byte serialization, used to verify the frozen contract.
  std::vector<std::uint8_t> serialized() const;

 private:
  TeacherEmbedder() = default;
  bool synthetic_ = false;
  std::uint64_t seed_ = 0;
  std::size_t vocab_size_ = 0;
  std::size_t d_embed_ = 0;
  std::map<std::string, Tensor> table_;          // file-backed
  std::vector<Tensor> token_vectors_;            // synthetic, one per token
};

}  // namespace xmd
