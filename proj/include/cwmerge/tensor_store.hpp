#pragma once

// Named-tensor container files and checkpoint layer partitioning.
//
// Container layout:
//   bytes 0..7     unsigned 64-bit little-endian header length N
//   bytes 8..8+N   UTF-8 JSON object: name -> {"dtype", "shape", "data_offsets"}
//                  plus an optional "__metadata__" string map
//   remainder      raw little-endian tensor bytes, offsets relative to the
//                  end of the header
//
// F16 tensors are widened to float32 on read and narrowed again on write, so
// every value (NaN payloads included) survives a round trip bit-exactly.

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <regex>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cwmerge/error.hpp"
#include "cwmerge/half.hpp"

namespace cwmerge {

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

enum class DType { F32, F16 };

inline std::string_view dtype_name(DType t) { return t == DType::F32 ? "F32" : "F16"; }

inline std::size_t dtype_size(DType t) { return t == DType::F32 ? 4 : 2; }

inline std::optional<DType> parse_dtype(std::string_view s) {
  if (s == "F32") return DType::F32;
  if (s == "F16") return DType::F16;
  return std::nullopt;
}

using Shape = std::vector<std::uint64_t>;

inline std::uint64_t element_count(const Shape& shape) {
  std::uint64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// One named tensor. Values are always held as float32 in row-major order;
/// `dtype` records the on-disk representation.
struct TensorRecord {
  DType dtype = DType::F32;
  Shape shape;
  std::vector<float> data;

  std::size_t size() const { return data.size(); }
};

struct Checkpoint {
  std::map<std::string, TensorRecord> tensors;
  std::map<std::string, std::string> metadata;

  const TensorRecord& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ValidationError("no tensor named '" + name + "'");
    return it->second;
  }
};

inline bool bit_equal(const TensorRecord& a, const TensorRecord& b) {
  return a.dtype == b.dtype && a.shape == b.shape && a.data.size() == b.data.size() &&
         std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0;
}

/// Bit-exact equality of tensors and metadata.
inline bool bit_equal(const Checkpoint& a, const Checkpoint& b) {
  if (a.metadata != b.metadata || a.tensors.size() != b.tensors.size()) return false;
  for (auto ia = a.tensors.begin(), ib = b.tensors.begin(); ia != a.tensors.end(); ++ia, ++ib) {
    if (ia->first != ib->first || !bit_equal(ia->second, ib->second)) return false;
  }
  return true;
}

/// Describes the first incompatibility between two checkpoints, or nullopt
/// if they have identical name sets, shapes and dtypes.
inline std::optional<std::string> incompatibility(const Checkpoint& a, const Checkpoint& b) {
  for (const auto& [name, rec] : a.tensors) {
    auto it = b.tensors.find(name);
    if (it == b.tensors.end()) return "tensor '" + name + "' missing from second checkpoint";
    if (it->second.shape != rec.shape)
      return "tensor '" + name + "' shape " + shape_string(rec.shape) + " vs " +
             shape_string(it->second.shape);
    if (it->second.dtype != rec.dtype)
      return "tensor '" + name + "' dtype " + std::string(dtype_name(rec.dtype)) + " vs " +
             std::string(dtype_name(it->second.dtype));
  }
  for (const auto& [name, rec] : b.tensors) {
    if (!a.tensors.contains(name)) return "tensor '" + name + "' missing from first checkpoint";
  }
  return std::nullopt;
}

inline bool compatible(const Checkpoint& a, const Checkpoint& b) {
  return !incompatibility(a, b).has_value();
}

inline void require_compatible(const Checkpoint& a, const Checkpoint& b, std::string_view context) {
  if (auto why = incompatibility(a, b))
    throw ValidationError(std::string(context) + ": incompatible checkpoints: " + *why);
}

/// Checks the TensorRecord invariant (shape product == element count).
inline void validate(const std::string& name, const TensorRecord& rec) {
  if (element_count(rec.shape) != rec.data.size())
    throw ValidationError("tensor '" + name + "': shape " + shape_string(rec.shape) + " holds " +
                          std::to_string(element_count(rec.shape)) + " elements but data has " +
                          std::to_string(rec.data.size()));
}

// ---------------------------------------------------------------------------
// Reading

inline Checkpoint parse_container(std::span<const std::uint8_t> bytes) {
  using nlohmann::json;
  if (bytes.size() < 8) throw ValidationError("malformed header: file shorter than 8 bytes");
  std::uint64_t header_len = 0;
  std::memcpy(&header_len, bytes.data(), 8);
  if (header_len > bytes.size() - 8)
    throw ValidationError("malformed header: declared header length " + std::to_string(header_len) +
                          " exceeds file size");

  const auto* hbegin = reinterpret_cast<const char*>(bytes.data() + 8);
  std::string_view header_text(hbegin, static_cast<std::size_t>(header_len));

  std::set<std::string> seen;
  std::string duplicate;
  json::parser_callback_t track_keys = [&](int depth, json::parse_event_t event, json& parsed) {
    if (event == json::parse_event_t::key && depth == 1) {
      auto key = parsed.get<std::string>();
      if (!seen.insert(key).second && duplicate.empty()) duplicate = key;
    }
    return true;
  };

  json header;
  try {
    header = json::parse(header_text.begin(), header_text.end(), track_keys);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed header: ") + e.what());
  }
  if (!duplicate.empty()) throw ValidationError("duplicate tensor name '" + duplicate + "'");
  if (!header.is_object()) throw ValidationError("malformed header: not a JSON object");

  const std::uint8_t* data_region = bytes.data() + 8 + header_len;
  const std::uint64_t data_len = bytes.size() - 8 - header_len;

  Checkpoint ckpt;
  for (const auto& [key, entry] : header.items()) {
    if (key == "__metadata__") {
      if (!entry.is_object()) throw ValidationError("malformed header: __metadata__ is not an object");
      for (const auto& [mk, mv] : entry.items()) {
        if (!mv.is_string())
          throw ValidationError("malformed header: metadata value for '" + mk + "' is not a string");
        ckpt.metadata.emplace(mk, mv.get<std::string>());
      }
      continue;
    }
    auto bad = [&](const std::string& what) {
      return ValidationError("malformed header: tensor '" + key + "': " + what);
    };
    if (!entry.is_object()) throw bad("entry is not an object");
    if (!entry.contains("dtype") || !entry["dtype"].is_string()) throw bad("missing dtype");
    if (!entry.contains("shape") || !entry["shape"].is_array()) throw bad("missing shape");
    if (!entry.contains("data_offsets") || !entry["data_offsets"].is_array() ||
        entry["data_offsets"].size() != 2)
      throw bad("missing data_offsets");

    const auto dtype_text = entry["dtype"].get<std::string>();
    const auto dtype = parse_dtype(dtype_text);
    if (!dtype) throw ValidationError("unsupported dtype '" + dtype_text + "' for tensor '" + key + "'");

    TensorRecord rec;
    rec.dtype = *dtype;
    for (const auto& d : entry["shape"]) {
      if (!d.is_number_unsigned()) throw bad("shape entries must be non-negative integers");
      rec.shape.push_back(d.get<std::uint64_t>());
    }
    const auto& offs = entry["data_offsets"];
    if (!offs[0].is_number_unsigned() || !offs[1].is_number_unsigned())
      throw bad("data_offsets must be non-negative integers");
    const auto begin = offs[0].get<std::uint64_t>();
    const auto end = offs[1].get<std::uint64_t>();
    if (end < begin) throw bad("data_offsets end precedes begin");
    const std::uint64_t count = element_count(rec.shape);
    if (end - begin != count * dtype_size(rec.dtype))
      throw bad("shape " + shape_string(rec.shape) + " needs " +
                std::to_string(count * dtype_size(rec.dtype)) + " bytes, offsets span " +
                std::to_string(end - begin));
    if (end > data_len)
      throw ValidationError("truncated data region: tensor '" + key + "' ends at byte " +
                            std::to_string(end) + " but only " + std::to_string(data_len) +
                            " data bytes present");

    rec.data.resize(count);
    const std::uint8_t* src = data_region + begin;
    if (rec.dtype == DType::F32) {
      std::memcpy(rec.data.data(), src, count * 4);
    } else {
      for (std::uint64_t i = 0; i < count; ++i) {
        std::uint16_t h;
        std::memcpy(&h, src + 2 * i, 2);
        rec.data[i] = half::to_float(h);
      }
    }
    ckpt.tensors.emplace(key, std::move(rec));
  }
  return ckpt;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failure on '" + path.string() + "'");
  return bytes;
}

inline Checkpoint read_container(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return parse_container(bytes);
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Writing

struct WriteOptions {
  /// Reject checkpoints containing NaN values.
  bool strict_nan = false;
};

/// Serializes with tensors in lexicographic name order, both in the header
/// and in the data region. The header is space-padded so the data region
/// starts on an 8-byte boundary.
inline std::vector<std::uint8_t> serialize_container(const Checkpoint& ckpt, const WriteOptions& opts = {}) {
  using nlohmann::json;
  json header = json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, rec] : ckpt.tensors) {
    if (name == "__metadata__") throw ValidationError("tensor name '__metadata__' is reserved");
    validate(name, rec);
    if (opts.strict_nan &&
        std::any_of(rec.data.begin(), rec.data.end(), [](float v) { return std::isnan(v); }))
      throw ValidationError("NaN policy violation: tensor '" + name + "' contains NaN");
    const std::uint64_t nbytes = rec.data.size() * dtype_size(rec.dtype);
    header[name] = {{"dtype", dtype_name(rec.dtype)},
                    {"shape", rec.shape},
                    {"data_offsets", {offset, offset + nbytes}}};
    offset += nbytes;
  }
  if (!ckpt.metadata.empty()) header["__metadata__"] = ckpt.metadata;

  std::string text = header.dump();
  while ((8 + text.size()) % 8 != 0) text.push_back(' ');

  std::vector<std::uint8_t> out(8 + text.size() + offset);
  const std::uint64_t hlen = text.size();
  std::memcpy(out.data(), &hlen, 8);
  std::memcpy(out.data() + 8, text.data(), text.size());
  std::uint8_t* dst = out.data() + 8 + text.size();
  for (const auto& [name, rec] : ckpt.tensors) {
    if (rec.dtype == DType::F32) {
      std::memcpy(dst, rec.data.data(), rec.data.size() * 4);
      dst += rec.data.size() * 4;
    } else {
      for (float v : rec.data) {
        const std::uint16_t h = half::from_float(v);
        std::memcpy(dst, &h, 2);
        dst += 2;
      }
    }
  }
  return out;
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failure on '" + path.string() + "'");
}

inline void write_container(const Checkpoint& ckpt, const std::filesystem::path& path,
                            const WriteOptions& opts = {}) {
  write_file_bytes(path, serialize_container(ckpt, opts));
}

// ---------------------------------------------------------------------------
// Layer partitioning

inline constexpr std::string_view kDefaultLayerPattern = R"(blocks\.(\d+)\.)";

/// Assignment of every tensor to a layer index, or nullopt for tensors that
/// sit outside the indexed blocks (embeddings, heads, final norms).
struct LayerMap {
  std::string pattern;
  std::map<std::string, std::optional<std::size_t>> assignments;
  std::size_t layer_count = 0;

  std::optional<std::size_t> layer_of(const std::string& name) const {
    auto it = assignments.find(name);
    if (it == assignments.end()) throw ValidationError("no layer assignment for '" + name + "'");
    return it->second;
  }
};

template <typename NameRange>
LayerMap partition_layer_names(const NameRange& names, std::string_view pattern) {
  std::regex re;
  try {
    re = std::regex(std::string(pattern), std::regex::ECMAScript);
  } catch (const std::regex_error& e) {
    throw ValidationError("invalid layer pattern '" + std::string(pattern) + "': " + e.what());
  }
  if (re.mark_count() != 1)
    throw ValidationError("layer pattern '" + std::string(pattern) + "' must have exactly one capture group, found " +
                          std::to_string(re.mark_count()));

  LayerMap lm;
  lm.pattern = std::string(pattern);
  std::set<std::size_t> seen;
  for (const std::string& name : names) {
    std::smatch m;
    if (!std::regex_search(name, m, re)) {
      lm.assignments[name] = std::nullopt;
      continue;
    }
    const std::string cap = m[1].str();
    std::size_t idx = 0;
    auto [ptr, ec] = std::from_chars(cap.data(), cap.data() + cap.size(), idx);
    if (ec != std::errc{} || ptr != cap.data() + cap.size() || cap.empty())
      throw ValidationError("layer pattern capture '" + cap + "' in tensor '" + name + "' is not an integer");
    lm.assignments[name] = idx;
    seen.insert(idx);
  }
  if (!seen.empty() && *seen.rbegin() + 1 != seen.size()) {
    std::string list;
    for (auto i : seen) list += (list.empty() ? "" : ",") + std::to_string(i);
    throw ValidationError("non-contiguous layer indices {" + list + "}");
  }
  lm.layer_count = seen.size();
  return lm;
}

inline LayerMap partition_layers(const Checkpoint& ckpt, std::string_view pattern = kDefaultLayerPattern) {
  std::vector<std::string> names;
  names.reserve(ckpt.tensors.size());
  for (const auto& kv : ckpt.tensors) names.push_back(kv.first);
  return partition_layer_names(names, pattern);
}

}  // namespace cwmerge
