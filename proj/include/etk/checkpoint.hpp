#pragma once

// Tensor container shared by checkpoints, datasets and generated latents.
//
//   bytes 0..7    magic "ETKCKPT1"
//   bytes 8..15   header length n, little-endian u64
//   next n bytes  JSON header
//   rest          payload, little-endian float32, tensors in table order
//
// Header: {"format_version", "model_kind", "config_hash", "meta",
//          "tensors": [{"name", "shape", "offset"}]}; offsets are in bytes
// from the payload start.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "etk/nn.hpp"
#include "etk/tensor.hpp"

namespace etk::ckpt {

inline constexpr int kFormatVersion = 1;
inline constexpr char kMagic[9] = "ETKCKPT1";

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { io, parse, version, kind_mismatch, truncated, layout };
  CheckpointError(Kind k, const std::string& msg) : std::runtime_error(msg), kind_(k) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return s;
}

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct Container {
  std::string model_kind;
  std::string config_hash;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const Tensor& get(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t.value;
    throw CheckpointError(CheckpointError::Kind::layout, "no tensor named '" + name + "'");
  }
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64(const char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(p[i]);
  return v;
}

inline void put_f32(std::string& out, double d) {
  const auto u = std::bit_cast<std::uint32_t>(static_cast<float>(d));
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

inline double get_f32(const char* p) {
  std::uint32_t u = 0;
  for (int i = 3; i >= 0; --i) u = (u << 8) | static_cast<unsigned char>(p[i]);
  return static_cast<double>(std::bit_cast<float>(u));
}

}  // namespace detail

inline std::string serialize(const Container& c) {
  nlohmann::json table = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : c.tensors) {
    table.push_back({{"name", t.name}, {"shape", t.value.shape()}, {"offset", offset}});
    offset += 4 * t.value.size();
  }
  nlohmann::json header = {{"format_version", kFormatVersion},
                           {"model_kind", c.model_kind},
                           {"config_hash", c.config_hash},
                           {"meta", c.meta},
                           {"tensors", table}};
  const std::string h = header.dump();
  std::string out(kMagic, 8);
  detail::put_u64(out, h.size());
  out += h;
  out.reserve(out.size() + offset);
  for (const auto& t : c.tensors)
    for (double v : t.value.data()) detail::put_f32(out, v);
  return out;
}

/// Parses a container; `expected_kind` empty accepts any kind.
inline Container deserialize(const std::string& bytes, const std::string& expected_kind = "") {
  using K = CheckpointError::Kind;
  if (bytes.size() < 16 || bytes.compare(0, 8, kMagic) != 0) throw CheckpointError(K::parse, "not a container file");
  const std::uint64_t n = detail::get_u64(bytes.data() + 8);
  if (n > bytes.size() - 16) throw CheckpointError(K::truncated, "header length exceeds the file");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(n));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(K::parse, std::string("bad header: ") + e.what());
  }
  Container c;
  std::uint64_t expect = 0;
  try {
    const int version = h.at("format_version").get<int>();
    if (version != kFormatVersion)
      throw CheckpointError(K::version, "format_version " + std::to_string(version) + ", expected " +
                                            std::to_string(kFormatVersion));
    c.model_kind = h.at("model_kind").get<std::string>();
    c.config_hash = h.at("config_hash").get<std::string>();
    c.meta = h.at("meta");
    if (!expected_kind.empty() && c.model_kind != expected_kind)
      throw CheckpointError(K::kind_mismatch, "model_kind '" + c.model_kind + "', expected '" + expected_kind + "'");
    const char* payload = bytes.data() + 16 + n;
    const std::uint64_t avail = bytes.size() - 16 - n;
    for (const auto& e : h.at("tensors")) {
      const auto shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<std::uint64_t>();
      if (offset != expect) throw CheckpointError(K::layout, "tensor offsets are not contiguous");
      const std::uint64_t room = (avail - offset) / 4;
      std::uint64_t count = 1;
      for (auto d : shape) {
        if (d != 0 && count > room / d + 1) throw CheckpointError(K::truncated, "payload truncated");
        count *= d;
      }
      if (count > room) throw CheckpointError(K::truncated, "payload truncated");
      std::vector<double> v(count);
      for (std::uint64_t i = 0; i < count; ++i) v[i] = detail::get_f32(payload + offset + 4 * i);
      c.tensors.push_back({e.at("name").get<std::string>(), Tensor(shape, std::move(v))});
      expect = offset + 4 * count;
    }
    if (expect != avail) throw CheckpointError(K::layout, "payload has trailing bytes");
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(K::parse, std::string("bad header: ") + e.what());
  }
  return c;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError(CheckpointError::Kind::io, "cannot write " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError(CheckpointError::Kind::io, "write failed: " + path);
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError(CheckpointError::Kind::io, "cannot read " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void save(const std::string& path, const Container& c) { write_file(path, serialize(c)); }
inline Container load(const std::string& path, const std::string& expected_kind = "") {
  return deserialize(read_file(path), expected_kind);
}

/// Parameters of a model as a container.
inline Container from_params(const ParamList& params, const std::string& kind, const std::string& config_hash) {
  Container c{kind, config_hash, nlohmann::json::object(), {}};
  for (const auto& [name, t] : params) c.tensors.push_back({name, t.detach()});
  return c;
}

/// Copies stored values into the model's parameter tensors in place.
/// Names, order and shapes must match exactly.
inline void into_params(const Container& c, const ParamList& params) {
  using K = CheckpointError::Kind;
  if (c.tensors.size() != params.size())
    throw CheckpointError(K::layout, "checkpoint has " + std::to_string(c.tensors.size()) + " tensors, model has " +
                                         std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, t] = params[i];
    const auto& s = c.tensors[i];
    if (s.name != name || s.value.shape() != t.shape())
      throw CheckpointError(K::layout, "tensor " + std::to_string(i) + ": checkpoint " + s.name + " " +
                                           shape_str(s.value.shape()) + " vs model " + name + " " + shape_str(t.shape()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].second;
    t.mutable_data() = c.tensors[i].value.data();
  }
}

inline void save_params(const std::string& path, const ParamList& params, const std::string& kind,
                        const std::string& config_hash, nlohmann::json meta = nlohmann::json::object()) {
  auto c = from_params(params, kind, config_hash);
  c.meta = std::move(meta);
  save(path, c);
}

inline Container load_params(const std::string& path, const ParamList& params, const std::string& kind) {
  auto c = load(path, kind);
  into_params(c, params);
  return c;
}

}  // namespace etk::ckpt
