#pragma once

#include <string>

#include "xmd/distill.hpp"

namespace xmd {

// Checkpoint container, bit-exact little-endian layout:
//   magic "XMDC" | format version u32 | config digest (32 bytes) |
//   count u32 | per parameter: name length u16, UTF-8 name, rank u8,
//   dims as u64s, payload as f64s | step u64.
// When optimizer state is included it follows as: step counter u64 and the
// same per-parameter encoding for first then second moments. A file ending
// after the step simply has no optimizer state.
void save_checkpoint(const std::string& path, const Checkpoint& checkpoint);

Checkpoint load_checkpoint(const std::string& path);

}  // namespace xmd
