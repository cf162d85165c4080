#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>

namespace xmd {

using Digest32 = std::array<std::uint8_t, 32>;

// SHA-256 of a byte buffer (OpenSSL EVP).
Digest32 sha256(std::span<const std::uint8_t> bytes);
Digest32 sha256(const std::string& text);

std::string digest_hex(const Digest32& d);

}  // namespace xmd
