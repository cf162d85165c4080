#include "xmd/util.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <thread>

#include <nlohmann/json.hpp>

#include "xmd/errors.hpp"

namespace xmd {

namespace {

void write_bytes_le(std::ostream& os, std::uint64_t v, int n) {
  char buf[8];
  for (int i = 0; i < n; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(buf, n);
}

std::uint64_t read_bytes_le(std::istream& is, int n) {
  char buf[8];
  is.read(buf, n);
  if (is.gcount() != n) {
    throw DataError("unexpected end of file at byte offset " +
                    std::to_string(static_cast<long long>(is.tellg()) < 0
                                       ? -1
                                       : static_cast<long long>(is.tellg())));
  }
  std::uint64_t v = 0;
  for (int i = 0; i < n; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[i])) << (8 * i);
  }
  return v;
}

}  // namespace

void write_u16_le(std::ostream& os, std::uint16_t v) { write_bytes_le(os, v, 2); }
void write_u32_le(std::ostream& os, std::uint32_t v) { write_bytes_le(os, v, 4); }
void write_u64_le(std::ostream& os, std::uint64_t v) { write_bytes_le(os, v, 8); }

void write_f64_le(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  write_bytes_le(os, bits, 8);
}

std::uint16_t read_u16_le(std::istream& is) {
  return static_cast<std::uint16_t>(read_bytes_le(is, 2));
}
std::uint32_t read_u32_le(std::istream& is) {
  return static_cast<std::uint32_t>(read_bytes_le(is, 4));
}
std::uint64_t read_u64_le(std::istream& is) { return read_bytes_le(is, 8); }

double read_f64_le(std::istream& is) {
  const std::uint64_t bits = read_bytes_le(is, 8);
  double v;
  std::memcpy(&v, &bits, sizeof(v));
  return v;
}

void atomic_write_file(const std::string& path,
                       const std::function<void(std::ostream&)>& writer) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(target.parent_path(), ec);
  }
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open for writing: " + tmp.string());
    writer(os);
    os.flush();
    if (!os) throw DataError("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw DataError("cannot rename " + tmp.string() + " to " + path);
  }
}

std::string format_double(double v) {
  return nlohmann::json(v).dump();
}

void parallel_for_indexed(std::size_t n, std::size_t threads,
                          const std::function<void(std::size_t)>& f) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  const std::size_t workers = std::min(threads, n);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::exception_ptr error;
  std::mutex error_mu;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w]() {
      try {
        for (std::size_t i = w; i < n; i += workers) f(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!error) error = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace xmd
