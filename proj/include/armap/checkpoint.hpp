#pragma once

// Named-tensor checkpoints and their on-disk layout.
//
// File layout (safetensors-compatible):
//   u64 little-endian header length N
//   N bytes of JSON: name -> {"dtype", "shape", "data_offsets": [begin, end]}
//                    plus an optional "__metadata__" string map
//   data region; offsets are relative to its first byte, row-major, LE.
//
// In memory every tensor is 32-bit float. F16 inputs are widened on load.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "armap/error.hpp"

namespace armap {

enum class Dtype { F32, F16 };

inline std::string_view dtype_name(Dtype d) { return d == Dtype::F32 ? "F32" : "F16"; }

inline std::size_t dtype_size(Dtype d) { return d == Dtype::F32 ? 4 : 2; }

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

struct TensorRecord {
  std::string name;
  Dtype dtype = Dtype::F32;
  Shape shape;
  std::vector<float> values;

  std::size_t numel() const {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           std::multiplies<>());
  }
  std::size_t rank() const { return shape.size(); }

  bool all_finite() const {
    return std::all_of(values.begin(), values.end(),
                       [](float v) { return std::isfinite(v); });
  }

  // Bitwise comparison of values, so NaN payloads and signed zeros count.
  friend bool operator==(const TensorRecord& a, const TensorRecord& b) {
    return a.name == b.name && a.dtype == b.dtype && a.shape == b.shape &&
           a.values.size() == b.values.size() &&
           (a.values.empty() ||
            std::memcmp(a.values.data(), b.values.data(),
                        a.values.size() * sizeof(float)) == 0);
  }
};

/// Ordered map of tensors (lexicographic by name) plus opaque metadata.
class Checkpoint {
 public:
  using TensorMap = std::map<std::string, TensorRecord>;
  using Metadata = std::map<std::string, std::string>;

  Checkpoint() = default;

  /// Inserts a tensor. Rejects duplicate names and shape/value-count mismatch.
  void add(TensorRecord t) {
    if (t.values.size() != t.numel()) {
      throw ValueError("tensor '" + t.name + "': shape " + shape_string(t.shape) +
                       " holds " + std::to_string(t.numel()) + " elements but " +
                       std::to_string(t.values.size()) + " values were given");
    }
    t.dtype = Dtype::F32;
    auto name = t.name;
    auto [it, inserted] = tensors_.emplace(std::move(name), std::move(t));
    if (!inserted) throw ValueError("duplicate tensor name '" + it->first + "'");
  }

  void add(std::string name, Shape shape, std::vector<float> values) {
    add(TensorRecord{std::move(name), Dtype::F32, std::move(shape), std::move(values)});
  }

  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  const TensorRecord& at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ValueError("no tensor named '" + name + "'");
    return it->second;
  }

  // Mutable element access for builders; the name and shape stay fixed.
  std::span<float> values(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ValueError("no tensor named '" + name + "'");
    return it->second.values;
  }

  const TensorMap& tensors() const { return tensors_; }
  std::size_t size() const { return tensors_.size(); }
  bool empty() const { return tensors_.empty(); }
  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }

  const Metadata& metadata() const { return metadata_; }
  Metadata& metadata() { return metadata_; }

  bool all_finite() const {
    return std::all_of(tensors_.begin(), tensors_.end(),
                       [](const auto& kv) { return kv.second.all_finite(); });
  }

  friend bool operator==(const Checkpoint& a, const Checkpoint& b) {
    return a.tensors_ == b.tensors_ && a.metadata_ == b.metadata_;
  }

 private:
  TensorMap tensors_;
  Metadata metadata_;
};

inline std::vector<std::string> tensor_names(const Checkpoint& c) {
  std::vector<std::string> out;
  out.reserve(c.size());
  for (const auto& [name, _] : c) out.push_back(name);
  return out;
}

// ---------------------------------------------------------------------------
// Compatibility

struct ShapeMismatch {
  std::string name;
  Shape shape_a;
  Shape shape_b;
  friend bool operator==(const ShapeMismatch&, const ShapeMismatch&) = default;
};

struct CompatReport {
  bool compatible = true;
  std::vector<std::string> missing_in_a;
  std::vector<std::string> missing_in_b;
  std::vector<ShapeMismatch> shape_mismatches;

  std::string summary() const {
    std::string s = compatible ? "compatible" : "incompatible";
    for (const auto& n : missing_in_a) s += "; missing in a: " + n;
    for (const auto& n : missing_in_b) s += "; missing in b: " + n;
    for (const auto& m : shape_mismatches) {
      s += "; shape mismatch " + m.name + ": " + shape_string(m.shape_a) + " vs " +
           shape_string(m.shape_b);
    }
    return s;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["compatible"] = compatible;
    j["missing_in_a"] = missing_in_a;
    j["missing_in_b"] = missing_in_b;
    j["shape_mismatches"] = nlohmann::ordered_json::array();
    for (const auto& m : shape_mismatches) {
      j["shape_mismatches"].push_back(
          {{"name", m.name}, {"shape_a", m.shape_a}, {"shape_b", m.shape_b}});
    }
    return j;
  }
};

/// Two checkpoints disagree on their tensor layout.
class ShapeError : public Error {
 public:
  explicit ShapeError(CompatReport report)
      : Error("incompatible checkpoints: " + report.summary()), report_(std::move(report)) {}
  ShapeError(const std::string& what, CompatReport report)
      : Error(what), report_(std::move(report)) {}
  const CompatReport& report() const { return report_; }

 private:
  CompatReport report_;
};

/// Same names and same shapes on both sides. Incompatibility is data here.
inline CompatReport validate_compatible(const Checkpoint& a, const Checkpoint& b) {
  CompatReport r;
  auto ia = a.begin();
  auto ib = b.begin();
  // Both maps iterate in lexicographic order; walk them as a sorted merge.
  while (ia != a.end() || ib != b.end()) {
    if (ib == b.end() || (ia != a.end() && ia->first < ib->first)) {
      r.missing_in_b.push_back(ia->first);
      ++ia;
    } else if (ia == a.end() || ib->first < ia->first) {
      r.missing_in_a.push_back(ib->first);
      ++ib;
    } else {
      if (ia->second.shape != ib->second.shape) {
        r.shape_mismatches.push_back({ia->first, ia->second.shape, ib->second.shape});
      }
      ++ia;
      ++ib;
    }
  }
  r.compatible =
      r.missing_in_a.empty() && r.missing_in_b.empty() && r.shape_mismatches.empty();
  return r;
}

inline void require_compatible(const Checkpoint& a, const Checkpoint& b) {
  auto r = validate_compatible(a, b);
  if (!r.compatible) throw ShapeError(std::move(r));
}

// ---------------------------------------------------------------------------
// Serialization

/// IEEE binary16 -> binary32, exact for every input including subnormals.
inline float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  const std::uint32_t exp = (h >> 10) & 0x1fu;
  std::uint32_t mant = h & 0x3ffu;
  std::uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      int e = -1;
      do {
        ++e;
        mant <<= 1;
      } while ((mant & 0x400u) == 0);
      bits = sign | static_cast<std::uint32_t>(127 - 15 - e) << 23 | (mant & 0x3ffu) << 13;
    }
  } else if (exp == 0x1f) {
    bits = sign | 0x7f800000u | mant << 13;
  } else {
    bits = sign | (exp + 127 - 15) << 23 | mant << 13;
  }
  return std::bit_cast<float>(bits);
}

struct LoadOptions {
  bool allow_non_finite = false;
};

struct SaveOptions {
  bool allow_non_finite = false;
};

namespace detail {

inline std::uint64_t read_le64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = v << 8 | p[i];
  return v;
}

inline std::uint32_t read_le32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

inline void append_le64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void append_le32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t json_uint(const nlohmann::json& j, const std::string& what) {
  if (!j.is_number_unsigned()) {
    if (j.is_number_integer() && j.get<std::int64_t>() >= 0) return j.get<std::uint64_t>();
    throw FormatError(what + ": expected a non-negative integer");
  }
  return j.get<std::uint64_t>();
}

}  // namespace detail

/// Parses a complete checkpoint image.
inline Checkpoint decode_checkpoint(std::span<const unsigned char> bytes,
                                    const LoadOptions& opts = {}) {
  if (bytes.size() < 8) throw FormatError("file shorter than the 8-byte header length");
  const std::uint64_t header_len = detail::read_le64(bytes.data());
  if (header_len > bytes.size() - 8) {
    throw FormatError("header length " + std::to_string(header_len) +
                      " exceeds file size " + std::to_string(bytes.size()));
  }
  const auto* header_begin = reinterpret_cast<const char*>(bytes.data() + 8);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_begin, header_begin + header_len);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("header is not valid JSON: ") + e.what());
  }
  if (!header.is_object()) throw FormatError("header must be a JSON object");

  const auto data = bytes.subspan(8 + header_len);
  Checkpoint ckpt;

  struct Extent {
    std::uint64_t begin, end;
    std::string name;
  };
  std::vector<Extent> extents;

  for (const auto& [key, entry] : header.items()) {
    if (key == "__metadata__") {
      if (!entry.is_object()) throw FormatError("__metadata__ must be an object");
      for (const auto& [mk, mv] : entry.items()) {
        if (!mv.is_string()) throw FormatError("__metadata__ value for '" + mk + "' is not a string");
        ckpt.metadata()[mk] = mv.get<std::string>();
      }
      continue;
    }
    const std::string where = "tensor '" + key + "'";
    if (!entry.is_object()) throw FormatError(where + ": entry must be an object");
    if (!entry.contains("dtype") || !entry.contains("shape") || !entry.contains("data_offsets")) {
      throw FormatError(where + ": needs dtype, shape and data_offsets");
    }
    const auto& jd = entry["dtype"];
    if (!jd.is_string()) throw FormatError(where + ": dtype must be a string");
    Dtype dtype;
    const auto dname = jd.get<std::string>();
    if (dname == "F32") {
      dtype = Dtype::F32;
    } else if (dname == "F16") {
      dtype = Dtype::F16;
    } else {
      throw DtypeError(where + ": unsupported dtype " + dname);
    }
    const auto& js = entry["shape"];
    if (!js.is_array()) throw FormatError(where + ": shape must be an array");
    Shape shape;
    std::uint64_t numel = 1;
    for (const auto& d : js) {
      const auto dim = detail::json_uint(d, where + " shape");
      if (dim != 0 && numel > std::numeric_limits<std::uint64_t>::max() / dim) {
        throw IntegrityError(where + ": element count overflows");
      }
      numel *= dim;
      shape.push_back(static_cast<std::size_t>(dim));
    }
    const auto& jo = entry["data_offsets"];
    if (!jo.is_array() || jo.size() != 2) throw FormatError(where + ": data_offsets must be [begin, end]");
    const auto begin = detail::json_uint(jo[0], where + " data_offsets");
    const auto end = detail::json_uint(jo[1], where + " data_offsets");
    if (begin > end || end > data.size()) {
      throw IntegrityError(where + ": data_offsets [" + std::to_string(begin) + ", " +
                           std::to_string(end) + "] outside data region of " +
                           std::to_string(data.size()) + " bytes");
    }
    const auto elem = dtype_size(dtype);
    if (numel > std::numeric_limits<std::uint64_t>::max() / elem || end - begin != numel * elem) {
      throw IntegrityError(where + ": byte span " + std::to_string(end - begin) +
                           " does not match shape " + shape_string(shape) + " of " + dname);
    }
    extents.push_back({begin, end, key});

    std::vector<float> values(numel);
    const unsigned char* p = data.data() + begin;
    if (dtype == Dtype::F32) {
      for (std::size_t i = 0; i < numel; ++i) values[i] = std::bit_cast<float>(detail::read_le32(p + 4 * i));
    } else {
      for (std::size_t i = 0; i < numel; ++i) {
        values[i] = half_to_float(static_cast<std::uint16_t>(p[2 * i] | p[2 * i + 1] << 8));
      }
    }
    TensorRecord rec{key, Dtype::F32, std::move(shape), std::move(values)};
    if (!opts.allow_non_finite && !rec.all_finite()) {
      throw ValueError(where + ": contains NaN or Inf");
    }
    ckpt.add(std::move(rec));
  }

  std::sort(extents.begin(), extents.end(),
            [](const Extent& a, const Extent& b) { return a.begin < b.begin; });
  for (std::size_t i = 1; i < extents.size(); ++i) {
    if (extents[i].begin < extents[i - 1].end) {
      throw IntegrityError("data of tensors '" + extents[i - 1].name + "' and '" +
                           extents[i].name + "' overlap");
    }
  }
  return ckpt;
}

/// Serializes to the file layout. Output is a pure function of the checkpoint.
inline std::string encode_checkpoint(const Checkpoint& ckpt, const SaveOptions& opts = {}) {
  nlohmann::ordered_json header = nlohmann::ordered_json::object();
  if (!ckpt.metadata().empty()) {
    nlohmann::ordered_json meta = nlohmann::ordered_json::object();
    for (const auto& [k, v] : ckpt.metadata()) meta[k] = v;
    header["__metadata__"] = std::move(meta);
  }
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ckpt) {
    if (!opts.allow_non_finite && !t.all_finite()) {
      throw ValueError("tensor '" + name + "' contains NaN or Inf");
    }
    const std::uint64_t bytes = t.values.size() * 4;
    header[name] = {{"dtype", "F32"}, {"shape", t.shape}, {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  std::string json = header.dump();
  // Pad so the data region starts 8-byte aligned.
  while (json.size() % 8 != 0) json.push_back(' ');

  std::string out;
  out.reserve(8 + json.size() + offset);
  detail::append_le64(out, json.size());
  out += json;
  for (const auto& [_, t] : ckpt) {
    for (float v : t.values) detail::append_le32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

/// Writes bytes to `path` through a sibling temp file and a rename, so a
/// failed write never leaves a partial file behind.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      out.close();
      std::filesystem::remove(tmp);
      throw IoError("write to '" + tmp.string() + "' failed");
    }
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path, const LoadOptions& opts = {}) {
  const std::string bytes = read_file(path);
  return decode_checkpoint(
      std::span(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size()), opts);
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path,
                            const SaveOptions& opts = {}) {
  write_file_atomic(path, encode_checkpoint(ckpt, opts));
}

}  // namespace armap
