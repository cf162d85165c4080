#include "xmd/checkpoint_io.hpp"

#include <cstring>
#include <fstream>

#include "xmd/util.hpp"

namespace xmd {

namespace {

constexpr char kMagic[4] = {'X', 'M', 'D', 'C'};
constexpr std::uint32_t kVersion = 1;

void write_entry(std::ostream& os, const std::string& name, const Tensor& t) {
  if (name.size() > 0xFFFF) throw DataError("checkpoint: parameter name too long");
  write_u16_le(os, static_cast<std::uint16_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  if (t.rank() > 0xFF) throw DataError("checkpoint: rank too large");
  os.put(static_cast<char>(t.rank()));
  for (std::size_t d : t.shape()) write_u64_le(os, d);
  for (double v : t.values()) write_f64_le(os, v);
}

std::pair<std::string, Tensor> read_entry(std::istream& is) {
  const std::uint16_t name_len = read_u16_le(is);
  std::string name(name_len, '\0');
  is.read(name.data(), name_len);
  if (is.gcount() != name_len) {
    throw DataError("checkpoint: truncated parameter name");
  }
  const int rank = is.get();
  if (rank < 0) throw DataError("checkpoint: truncated at rank byte");
  std::vector<std::size_t> shape(static_cast<std::size_t>(rank));
  for (std::size_t& d : shape) d = static_cast<std::size_t>(read_u64_le(is));
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = read_f64_le(is);
  Tensor t(std::move(shape), std::move(data));
  if (!t.all_finite()) {
    throw DataError("checkpoint: parameter \"" + name + "\" has non-finite values");
  }
  return {std::move(name), std::move(t)};
}

void write_param_map(std::ostream& os, const std::map<std::string, Tensor>& m) {
  write_u32_le(os, static_cast<std::uint32_t>(m.size()));
  for (const auto& [name, t] : m) write_entry(os, name, t);
}

std::map<std::string, Tensor> read_param_map(std::istream& is) {
  const std::uint32_t count = read_u32_le(is);
  std::map<std::string, Tensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto [name, t] = read_entry(is);
    if (!out.emplace(std::move(name), std::move(t)).second) {
      throw DataError("checkpoint: duplicate parameter name");
    }
  }
  return out;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint) {
  atomic_write_file(path, [&](std::ostream& os) {
    os.write(kMagic, 4);
    write_u32_le(os, kVersion);
    os.write(reinterpret_cast<const char*>(checkpoint.config_digest.data()),
             static_cast<std::streamsize>(checkpoint.config_digest.size()));
    write_param_map(os, checkpoint.params);
    // step metadata and optional optimizer state trail the fixed layout
    write_u64_le(os, checkpoint.step);
    if (checkpoint.opt) {
      write_u64_le(os, checkpoint.opt->t);
      write_param_map(os, checkpoint.opt->m);
      write_param_map(os, checkpoint.opt->v);
    }
  });
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint file: " + path);
  char magic[4];
  is.read(magic, 4);
  if (is.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0) {
    throw DataError("checkpoint: missing XMDC magic: " + path);
  }
  if (read_u32_le(is) != kVersion) {
    throw DataError("checkpoint: unsupported format version");
  }
  Checkpoint c;
  is.read(reinterpret_cast<char*>(c.config_digest.data()),
          static_cast<std::streamsize>(c.config_digest.size()));
  if (is.gcount() != static_cast<std::streamsize>(c.config_digest.size())) {
    throw DataError("checkpoint: truncated config digest");
  }
  c.params = read_param_map(is);
  c.step = read_u64_le(is);
  // Optional optimizer section: detect by trying to read past the params.
  if (is.peek() != std::char_traits<char>::eof()) {
    OptimState opt;
    opt.t = read_u64_le(is);
    opt.m = read_param_map(is);
    opt.v = read_param_map(is);
    c.opt = std::move(opt);
  }
  return c;
}

}  // namespace xmd
