#pragma once

#include <cstdint>
#include <functional>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

namespace xmd {

// Little-endian binary primitives (explicit so files are identical across
// hosts).
void write_u16_le(std::ostream& os, std::uint16_t v);
void write_u32_le(std::ostream& os, std::uint32_t v);
void write_u64_le(std::ostream& os, std::uint64_t v);
void write_f64_le(std::ostream& os, double v);
std::uint16_t read_u16_le(std::istream& is);
std::uint32_t read_u32_le(std::istream& is);
std::uint64_t read_u64_le(std::istream& is);
double read_f64_le(std::istream& is);

// Writes via a temp file in the same directory followed by rename, so
// interrupted runs never leave truncated artifacts.
void atomic_write_file(const std::string& path,
                       const std::function<void(std::ostream&)>& writer);

// Shortest round-trip decimal form of a double; stable across runs.
std::string format_double(double v);

// Order-preserving parallel map over [0, n): out[i] = f(i). Results are
// identical to the sequential order for pure f.
void parallel_for_indexed(std::size_t n, std::size_t threads,
                          const std::function<void(std::size_t)>& f);

}  // namespace xmd
