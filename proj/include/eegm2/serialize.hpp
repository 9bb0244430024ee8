#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "eegm2/arch.hpp"
#include "eegm2/params.hpp"
#include "eegm2/tensor.hpp"

namespace eegm2 {

// Binary tensor format: 8-byte magic "EEGM2TEN", then u64 dtype tag
// (0 = real32, 1 = real64), u64 rank, rank u64 dims, then raw little-endian
// values. Checkpoints wrap a JSON config header plus named tensors.

inline constexpr char kTensorMagic[8] = {'E', 'E', 'G', 'M', '2', 'T', 'E', 'N'};
inline constexpr char kCheckpointMagic[8] = {'E', 'E', 'G', 'M', '2', 'C', 'K', 'P'};

namespace detail {

inline void write_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw ConfigError("tensor io: truncated stream");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace detail

template <class S>
void write_tensor(std::ostream& os, const Tensor<S>& t) {
  os.write(kTensorMagic, 8);
  detail::write_u64(os, dtype_of<S>() == DType::real32 ? 0 : 1);
  detail::write_u64(os, static_cast<uint64_t>(t.rank()));
  for (int i = 0; i < t.rank(); ++i)
    detail::write_u64(os, static_cast<uint64_t>(t.size(i)));
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(t.numel() * sizeof(S)));
}

template <class S>
Tensor<S> read_tensor(std::istream& is) {
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kTensorMagic, 8) != 0) {
    throw ConfigError("tensor io: bad magic");
  }
  const uint64_t tag = detail::read_u64(is);
  const DType want = dtype_of<S>();
  if ((tag == 0) != (want == DType::real32)) {
    throw ConfigError("tensor io: dtype tag mismatch");
  }
  const uint64_t rank = detail::read_u64(is);
  if (rank > 8) throw ConfigError("tensor io: silly rank");
  Shape shape;
  for (uint64_t i = 0; i < rank; ++i)
    shape.push_back(static_cast<int64_t>(detail::read_u64(is)));
  Tensor<S> t(shape);
  is.read(reinterpret_cast<char*>(t.data()),
          static_cast<std::streamsize>(t.numel() * sizeof(S)));
  if (!is) throw ConfigError("tensor io: truncated payload");
  return t;
}

inline nlohmann::json arch_to_json(const ArchConfig& c) {
  return {{"in_channels", c.in_channels},
          {"stage_widths", {c.stage_widths[0], c.stage_widths[1], c.stage_widths[2]}},
          {"pool", c.pool},
          {"d_state", c.d_state},
          {"n_heads", c.n_heads},
          {"variant", variant_name(c.variant)},
          {"chunk", c.chunk},
          {"norm_eps", c.norm_eps},
          {"dt_min", c.dt_min},
          {"dt_max", c.dt_max},
          {"encoder_only", c.encoder_only}};
}

inline ArchConfig arch_from_json(const nlohmann::json& j) {
  ArchConfig c;
  c.in_channels = j.at("in_channels").get<int64_t>();
  const auto& w = j.at("stage_widths");
  c.stage_widths = {w.at(0).get<int64_t>(), w.at(1).get<int64_t>(), w.at(2).get<int64_t>()};
  c.pool = j.at("pool").get<int64_t>();
  c.d_state = j.at("d_state").get<int64_t>();
  c.n_heads = j.at("n_heads").get<int64_t>();
  c.variant = parse_variant(j.at("variant").get<std::string>());
  c.chunk = j.at("chunk").get<int64_t>();
  c.norm_eps = j.at("norm_eps").get<double>();
  c.dt_min = j.at("dt_min").get<double>();
  c.dt_max = j.at("dt_max").get<double>();
  c.encoder_only = j.at("encoder_only").get<bool>();
  return c;
}

template <class S>
void save_checkpoint(const std::string& path, const ArchConfig& cfg,
                     const ParamSet<S>& params, const nlohmann::json& extra = {}) {
  nlohmann::json header = {{"format", "eegm2-checkpoint-v1"},
                           {"dtype", dtype_of<S>() == DType::real32 ? "real32" : "real64"},
                           {"arch", arch_to_json(cfg)}};
  if (!extra.is_null() && !extra.empty()) header["extra"] = extra;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("save_checkpoint: cannot open " + path);
  os.write(kCheckpointMagic, 8);
  const std::string htxt = header.dump();
  detail::write_u64(os, htxt.size());
  os.write(htxt.data(), static_cast<std::streamsize>(htxt.size()));
  detail::write_u64(os, params.size());
  for (const auto& [name, v] : params) {
    detail::write_u64(os, name.size());
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(os, v.value());
  }
  if (!os) throw ConfigError("save_checkpoint: write failed for " + path);
}

struct CheckpointHeader {
  nlohmann::json header;
  ArchConfig arch;
  std::string dtype;
};

inline CheckpointHeader read_checkpoint_header(std::istream& is) {
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw ConfigError("checkpoint: bad magic");
  }
  const uint64_t hlen = detail::read_u64(is);
  std::string htxt(hlen, '\0');
  is.read(htxt.data(), static_cast<std::streamsize>(hlen));
  if (!is) throw ConfigError("checkpoint: truncated header");
  CheckpointHeader out;
  out.header = nlohmann::json::parse(htxt);
  out.arch = arch_from_json(out.header.at("arch"));
  out.dtype = out.header.at("dtype").get<std::string>();
  return out;
}

inline CheckpointHeader peek_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("checkpoint: cannot open " + path);
  return read_checkpoint_header(is);
}

/// Loads parameters by name into an already-built model's ParamSet. Every
/// registered parameter must be present with a matching shape.
template <class S>
CheckpointHeader load_checkpoint(const std::string& path, ParamSet<S>& params) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("checkpoint: cannot open " + path);
  CheckpointHeader hdr = read_checkpoint_header(is);
  const uint64_t n = detail::read_u64(is);
  std::vector<std::pair<std::string, Tensor<S>>> loaded;
  loaded.reserve(n);
  for (uint64_t i = 0; i < n; ++i) {
    const uint64_t len = detail::read_u64(is);
    std::string name(len, '\0');
    is.read(name.data(), static_cast<std::streamsize>(len));
    loaded.emplace_back(std::move(name), read_tensor<S>(is));
  }
  for (auto& [name, v] : params) {
    bool found = false;
    for (auto& [lname, lt] : loaded) {
      if (lname == name) {
        if (lt.shape() != v.value().shape()) {
          throw ConfigError("checkpoint: shape mismatch for " + name);
        }
        std::copy(lt.data(), lt.data() + lt.numel(), v.value().data());
        found = true;
        break;
      }
    }
    if (!found) throw ConfigError("checkpoint: missing parameter " + name);
  }
  return hdr;
}

}  // namespace eegm2
