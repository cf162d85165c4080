#include "xmd/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "xmd/teacher.hpp"
#include "xmd/util.hpp"

namespace xmd {

using nlohmann::json;

void SyntheticSpec::validate() const {
  if (vocab_size < 2) throw ConfigError("synthetic spec: vocab_size must be >= 2");
  if (segment_len < 8) throw ConfigError("synthetic spec: segment_len must be >= 8");
  if (noise_std < 0.0) throw ConfigError("synthetic spec: noise_std must be >= 0");
  if (d_embed == 0) throw ConfigError("synthetic spec: d_embed must be >= 1");
  if (label_rule == LabelRule::Classification && n_classes < 2) {
    throw ConfigError("synthetic spec: n_classes must be >= 2");
  }
}

PairedExample generate_synthetic_example(const SyntheticSpec& spec,
                                         SeededRng& rng, std::string id) {
  spec.validate();
  const std::size_t n_tokens = 3 + rng.uniform_int(10);  // [3, 12]
  std::vector<int> tokens(n_tokens);
  for (int& t : tokens) t = static_cast<int>(rng.uniform_int(spec.vocab_size));

  std::vector<double> signal(n_tokens * spec.segment_len);
  const double sr = static_cast<double>(kCanonicalSampleRate);
  const double two_pi = 6.283185307179586476925286766559;
  for (std::size_t ti = 0; ti < n_tokens; ++ti) {
    const double f1 = spec.base_freq + tokens[ti] * spec.freq_step;
    const double f2 = 1.7 * f1;
    double* seg = signal.data() + ti * spec.segment_len;
    for (std::size_t n = 0; n < spec.segment_len; ++n) {
      const double t = static_cast<double>(n) / sr;
      double v = 0.5 * std::sin(two_pi * f1 * t) + 0.5 * std::sin(two_pi * f2 * t);
      if (spec.noise_std > 0.0) v += spec.noise_std * rng.normal();
      seg[n] = v;
    }
  }

  TeacherEmbedder teacher =
      TeacherEmbedder::synthetic(spec.seed, spec.vocab_size, spec.d_embed);
  PairedExample ex;
  ex.id = std::move(id);
  const std::size_t signal_len = signal.size();
  ex.signal = Tensor({signal_len}, std::move(signal));
  ex.sample_rate = kCanonicalSampleRate;
  ex.target = teacher.embed_tokens(tokens);
  if (spec.label_rule == LabelRule::Classification) {
    ex.label = Label(tokens[0] % static_cast<int>(spec.n_classes));
  } else {
    double mean = 0.0;
    for (int t : tokens) mean += static_cast<double>(t);
    mean /= static_cast<double>(n_tokens);
    ex.label = Label(-3.0 + 6.0 * mean / static_cast<double>(spec.vocab_size - 1));
  }
  ex.tokens = std::move(tokens);
  return ex;
}

std::vector<PairedExample> generate_synthetic_dataset(const SyntheticSpec& spec,
                                                      std::size_t count) {
  std::vector<PairedExample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    // each example gets its own derived stream: example i is reproducible
    // in isolation and generation stays pure per (spec, index)
    SeededRng rng = SeededRng::derive(spec.seed, 0x6461746100000000ULL + i);
    std::ostringstream id;
    id << "ex" << std::setw(6) << std::setfill('0') << i;
    out.push_back(generate_synthetic_example(spec, rng, id.str()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Container I/O
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'X', 'M', 'D', 'D'};
constexpr std::uint32_t kVersion = 1;

json label_to_json(const Label& label) {
  if (std::holds_alternative<double>(label)) return std::get<double>(label);
  if (std::holds_alternative<int>(label)) return std::get<int>(label);
  return std::get<std::vector<int>>(label);
}

Label label_from_json(const json& j, std::size_t record) {
  if (j.is_number_float()) return j.get<double>();
  if (j.is_number_integer()) return j.get<int>();
  if (j.is_array()) return j.get<std::vector<int>>();
  throw DataError("dataset record " + std::to_string(record) +
                  ": unsupported label type");
}

json spec_to_json(const SyntheticSpec& s) {
  return json{{"seed", s.seed},
              {"vocab_size", s.vocab_size},
              {"d_embed", s.d_embed},
              {"segment_len", s.segment_len},
              {"base_freq", s.base_freq},
              {"freq_step", s.freq_step},
              {"noise_std", s.noise_std},
              {"label_rule", s.label_rule == LabelRule::Classification
                                 ? "classification"
                                 : "regression"},
              {"n_classes", s.n_classes}};
}

SyntheticSpec spec_from_json(const json& j) {
  SyntheticSpec s;
  s.seed = j.at("seed").get<std::uint64_t>();
  s.vocab_size = j.at("vocab_size").get<std::size_t>();
  s.d_embed = j.at("d_embed").get<std::size_t>();
  s.segment_len = j.at("segment_len").get<std::size_t>();
  s.base_freq = j.at("base_freq").get<double>();
  s.freq_step = j.at("freq_step").get<double>();
  s.noise_std = j.at("noise_std").get<double>();
  const std::string rule = j.at("label_rule").get<std::string>();
  if (rule == "classification") {
    s.label_rule = LabelRule::Classification;
  } else if (rule == "regression") {
    s.label_rule = LabelRule::Regression;
  } else {
    throw DataError("dataset header: unknown label_rule \"" + rule + "\"");
  }
  s.n_classes = j.at("n_classes").get<std::size_t>();
  return s;
}

}  // namespace

void save_paired_dataset(const std::string& path,
                         const std::vector<PairedExample>& examples,
                         const DatasetMeta& meta) {
  atomic_write_file(path, [&](std::ostream& os) {
    json header{{"container", "XMDD"},
                {"version", kVersion},
                {"count", examples.size()},
                {"sample_rate", meta.sample_rate},
                {"d_embed", meta.d_embed}};
    if (meta.provenance) header["teacher"] = spec_to_json(*meta.provenance);
    os << header.dump() << '\n';

    std::size_t offset = 0;  // in f64 units, relative to payload start
    for (const PairedExample& ex : examples) {
      json rec{{"id", ex.id},
               {"signal_offset", offset},
               {"signal_len", ex.signal.numel()}};
      offset += ex.signal.numel();
      rec["target_offset"] = offset;
      rec["target_len"] = ex.target.numel();
      offset += ex.target.numel();
      if (ex.label) rec["label"] = label_to_json(*ex.label);
      if (ex.tokens) rec["tokens"] = *ex.tokens;
      os << rec.dump() << '\n';
    }

    os.write(kMagic, 4);
    write_u32_le(os, kVersion);
    for (const PairedExample& ex : examples) {
      for (double v : ex.signal.values()) write_f64_le(os, v);
      for (double v : ex.target.values()) write_f64_le(os, v);
    }
  });
}

Dataset load_paired_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open dataset file: " + path);

  std::string line;
  if (!std::getline(is, line)) throw DataError("dataset header missing: " + path);
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception& e) {
    throw DataError("malformed dataset header: " + std::string(e.what()));
  }
  if (header.value("container", "") != "XMDD") {
    throw DataError("dataset header: not an XMDD container");
  }
  if (header.value("version", 0u) != kVersion) {
    throw DataError("dataset header: unsupported version");
  }
  Dataset ds;
  ds.meta.sample_rate = header.at("sample_rate").get<int>();
  ds.meta.d_embed = header.at("d_embed").get<std::size_t>();
  if (header.contains("teacher")) {
    ds.meta.provenance = spec_from_json(header.at("teacher"));
  }
  const std::size_t count = header.at("count").get<std::size_t>();

  struct IndexEntry {
    std::string id;
    std::size_t signal_offset, signal_len, target_offset, target_len;
    std::optional<Label> label;
    std::optional<std::vector<int>> tokens;
  };
  std::vector<IndexEntry> index;
  index.reserve(count);
  for (std::size_t r = 0; r < count; ++r) {
    if (!std::getline(is, line)) {
      throw DataError("dataset record " + std::to_string(r) +
                      ": index truncated");
    }
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw DataError("dataset record " + std::to_string(r) + ": " + e.what());
    }
    IndexEntry e;
    try {
      e.id = rec.at("id").get<std::string>();
      e.signal_offset = rec.at("signal_offset").get<std::size_t>();
      e.signal_len = rec.at("signal_len").get<std::size_t>();
      e.target_offset = rec.at("target_offset").get<std::size_t>();
      e.target_len = rec.at("target_len").get<std::size_t>();
      if (rec.contains("label")) e.label = label_from_json(rec.at("label"), r);
      if (rec.contains("tokens")) e.tokens = rec.at("tokens").get<std::vector<int>>();
    } catch (const json::exception& ex) {
      throw DataError("dataset record " + std::to_string(r) + ": " + ex.what());
    }
    if (e.signal_len == 0) {
      throw DataError("dataset record " + std::to_string(r) + ": empty signal");
    }
    if (e.target_len != ds.meta.d_embed) {
      throw DataError("dataset record " + std::to_string(r) + ": target width " +
                      std::to_string(e.target_len) + " does not match header d_embed " +
                      std::to_string(ds.meta.d_embed));
    }
    index.push_back(std::move(e));
  }

  char magic[4];
  const std::streampos payload_header = is.tellg();
  is.read(magic, 4);
  if (is.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0) {
    throw DataError("dataset binary section: missing XMDD magic at byte offset " +
                    std::to_string(static_cast<long long>(payload_header)));
  }
  if (read_u32_le(is) != kVersion) {
    throw DataError("dataset binary section: unsupported version");
  }
  const std::streampos payload_start = is.tellg();

  ds.examples.reserve(count);
  for (std::size_t r = 0; r < count; ++r) {
    const IndexEntry& e = index[r];
    auto read_block = [&](std::size_t offset, std::size_t len) {
      is.seekg(payload_start + static_cast<std::streamoff>(offset * sizeof(double)));
      std::vector<double> buf(len);
      for (std::size_t i = 0; i < len; ++i) {
        if (is.peek() == std::char_traits<char>::eof()) {
          throw DataError("dataset record " + std::to_string(r) +
                          ": payload truncated at byte offset " +
                          std::to_string(static_cast<long long>(payload_start) +
                                         static_cast<long long>((offset + i) *
                                                                sizeof(double))));
        }
        buf[i] = read_f64_le(is);
      }
      return buf;
    };
    PairedExample ex;
    ex.id = e.id;
    ex.sample_rate = ds.meta.sample_rate;
    std::vector<double> sig = read_block(e.signal_offset, e.signal_len);
    std::vector<double> tgt = read_block(e.target_offset, e.target_len);
    try {
      ex.signal = Tensor::from_data({e.signal_len}, std::move(sig));
      ex.target = Tensor::from_data({e.target_len}, std::move(tgt));
    } catch (const NumericError&) {
      throw DataError("dataset record " + std::to_string(r) +
                      ": non-finite payload values");
    }
    ex.label = e.label;
    ex.tokens = e.tokens;
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

Tensor to_canonical(const Tensor& signal, int sample_rate, int channels) {
  if (sample_rate != kCanonicalSampleRate) {
    throw DataError("unsupported format: sample rate " +
                    std::to_string(sample_rate) + " Hz (expected " +
                    std::to_string(kCanonicalSampleRate) + ", resampling not supported)");
  }
  if (channels < 1) throw DataError("unsupported format: channel count must be >= 1");

  std::vector<double> mono;
  if (signal.rank() == 1) {
    if (channels != 1) {
      throw DimensionError("to_canonical: rank-1 signal with " +
                           std::to_string(channels) + " channels");
    }
    mono.assign(signal.values().begin(), signal.values().end());
  } else if (signal.rank() == 2) {
    if (signal.extent(0) != static_cast<std::size_t>(channels)) {
      throw DimensionError("to_canonical: signal shape " + signal.shape_str() +
                           " does not match channel count " +
                           std::to_string(channels));
    }
    const std::size_t n = signal.extent(1);
    mono.assign(n, 0.0);
    for (std::size_t c = 0; c < signal.extent(0); ++c) {
      for (std::size_t i = 0; i < n; ++i) mono[i] += signal.at(c * n + i);
    }
    for (double& v : mono) v /= static_cast<double>(channels);
  } else {
    throw DimensionError("to_canonical: rank 1 or 2 required, got " +
                         signal.shape_str());
  }
  for (double& v : mono) v = std::clamp(v, -1.0, 1.0);
  const std::size_t n = mono.size();
  return Tensor({n}, std::move(mono));
}

std::vector<Batch> iterate_batches(const std::vector<PairedExample>& dataset,
                                   std::size_t batch_size, std::uint64_t seed,
                                   std::uint64_t epoch, bool drop_partial) {
  if (dataset.empty()) throw ConfigError("iterate_batches: empty dataset");
  if (batch_size == 0) throw ConfigError("iterate_batches: batch_size must be >= 1");

  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  SeededRng rng = SeededRng::derive(seed, 0x65706f63ULL ^ (epoch * 0x1000003ULL));
  for (std::size_t i = order.size(); i > 1; --i) {
    const std::size_t j = rng.uniform_int(i);
    std::swap(order[i - 1], order[j]);
  }

  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(start + batch_size, order.size());
    if (drop_partial && end - start < batch_size) break;
    Batch b;
    b.examples.reserve(end - start);
    for (std::size_t i = start; i < end; ++i) {
      b.examples.push_back(dataset[order[i]]);
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

}  // namespace xmd
