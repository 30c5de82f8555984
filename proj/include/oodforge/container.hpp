#pragma once

// EMB1 framing shared by embedding files, model checkpoints and detector
// states:
//
//   "EMB1\n" | one compact JSON header line ending in "\n" | binary body
//
// All binary values are little-endian regardless of host byte order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "oodforge/error.hpp"
#include "oodforge/numerics.hpp"

namespace oodforge {

inline constexpr std::string_view kEmbMagic = "EMB1\n";

using OrderedJson = nlohmann::ordered_json;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline void put_f32(std::string& out, double v) {
  put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

inline void put_f64(std::string& out, double v) {
  put_u64(out, std::bit_cast<std::uint64_t>(v));
}

inline void put_i32(std::string& out, std::int32_t v) {
  put_u32(out, static_cast<std::uint32_t>(v));
}

inline double get_f32(const unsigned char* p) {
  return static_cast<double>(std::bit_cast<float>(get_u32(p)));
}

inline double get_f64(const unsigned char* p) { return std::bit_cast<double>(get_u64(p)); }

inline std::int32_t get_i32(const unsigned char* p) {
  return static_cast<std::int32_t>(get_u32(p));
}

}  // namespace detail

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

// Writes to a sibling temporary file and renames it into place so readers
// never observe a partially written file.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  auto tmp = path;
  tmp += ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ConfigError("write failed for " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

// A parsed frame: header JSON plus the raw body bytes.
struct Frame {
  nlohmann::json header;
  std::string body;
};

inline std::string encode_frame(const OrderedJson& header, std::string_view body) {
  std::string out(kEmbMagic);
  out += header.dump();
  out.push_back('\n');
  out.append(body);
  return out;
}

inline Frame decode_frame(std::string_view bytes) {
  if (bytes.substr(0, kEmbMagic.size()) != kEmbMagic) {
    throw FormatError("bad magic: expected EMB1");
  }
  const auto nl = bytes.find('\n', kEmbMagic.size());
  if (nl == std::string_view::npos) throw FormatError("missing header line");
  Frame f;
  try {
    f.header = nlohmann::json::parse(bytes.substr(kEmbMagic.size(), nl - kEmbMagic.size()));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid header JSON: ") + e.what());
  }
  if (!f.header.is_object()) throw FormatError("header is not a JSON object");
  f.body = std::string(bytes.substr(nl + 1));
  return f;
}

// ---------------------------------------------------------------------------
// Named-tensor archives (model checkpoints, detector states).
//
// Header: {"kind":<kind>,"dtype":"f32"|"f64","meta":{...},
//          "tensors":[{"name":..,"rows":..,"cols":..},...]}
// Body:   the tensors' values concatenated in header order, row-major.

enum class Dtype { f32, f64 };

struct NamedTensor {
  std::string name;
  Matrix value;
};

struct Archive {
  std::string kind;
  OrderedJson meta = OrderedJson::object();
  std::vector<NamedTensor> tensors;

  const Matrix& tensor(std::string_view name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t.value;
    throw FormatError("archive has no tensor named '" + std::string(name) + "'");
  }

  bool has_tensor(std::string_view name) const {
    for (const auto& t : tensors)
      if (t.name == name) return true;
    return false;
  }

  void add(std::string name, Matrix value) {
    tensors.push_back({std::move(name), std::move(value)});
  }
};

inline std::string encode_archive(const Archive& a, Dtype dtype) {
  OrderedJson header;
  header["kind"] = a.kind;
  header["dtype"] = dtype == Dtype::f32 ? "f32" : "f64";
  header["meta"] = a.meta;
  header["tensors"] = OrderedJson::array();
  std::string body;
  for (const auto& t : a.tensors) {
    header["tensors"].push_back(
        {{"name", t.name}, {"rows", t.value.rows()}, {"cols", t.value.cols()}});
    for (double v : t.value.data()) {
      if (dtype == Dtype::f32) {
        detail::put_f32(body, v);
      } else {
        detail::put_f64(body, v);
      }
    }
  }
  return encode_frame(header, body);
}

inline Archive decode_archive(std::string_view bytes) {
  Frame f = decode_frame(bytes);
  const auto& h = f.header;
  Archive a;
  try {
    a.kind = h.at("kind").get<std::string>();
    const auto dtype = h.at("dtype").get<std::string>();
    if (dtype != "f32" && dtype != "f64") throw FormatError("unsupported dtype " + dtype);
    const std::size_t width = dtype == "f32" ? 4 : 8;
    a.meta = OrderedJson::parse(h.at("meta").dump());
    std::size_t offset = 0;
    const auto* p = reinterpret_cast<const unsigned char*>(f.body.data());
    for (const auto& t : h.at("tensors")) {
      const auto rows = t.at("rows").get<std::size_t>();
      const auto cols = t.at("cols").get<std::size_t>();
      const std::size_t count = rows * cols;
      if (offset + count * width > f.body.size()) {
        throw LengthError("archive body truncated");
      }
      std::vector<double> values(count);
      for (std::size_t i = 0; i < count; ++i) {
        values[i] = width == 4 ? detail::get_f32(p + offset + 4 * i)
                               : detail::get_f64(p + offset + 8 * i);
      }
      offset += count * width;
      a.add(t.at("name").get<std::string>(), Matrix(rows, cols, std::move(values)));
    }
    if (offset != f.body.size()) throw LengthError("archive body has trailing bytes");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed archive header: ") + e.what());
  }
  return a;
}

inline void write_archive(const std::filesystem::path& path, const Archive& a, Dtype dtype) {
  write_file_atomic(path, encode_archive(a, dtype));
}

inline Archive read_archive(const std::filesystem::path& path) {
  return decode_archive(read_file_bytes(path));
}

inline Matrix row_matrix(std::span<const double> v) {
  return Matrix(1, v.size(), std::vector<double>(v.begin(), v.end()));
}

inline Vector as_vector(const Matrix& m) { return Vector(m.data().begin(), m.data().end()); }

}  // namespace oodforge
