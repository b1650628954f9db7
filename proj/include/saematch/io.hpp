#pragma once

// SAEM container layout (all integers little-endian):
//
//   offset 0   4 bytes   magic "SAEM"
//   offset 4   u32       version (= 1)
//   offset 8   u64       header_len
//   offset 16  header_len bytes of UTF-8 JSON:
//                {"tensors": {name: {"dtype": "f32"|"f64", "shape": [...],
//                                    "offset": n, "nbytes": n}},
//                 "meta": {"layer_id": n, "folded": b, "kind": "sae"|"activations", ...}}
//   payload    raw little-endian row-major tensor data; tensor offsets are
//              relative to the payload start.

#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "saematch/assignment.hpp"
#include "saematch/error.hpp"
#include "saematch/matching.hpp"
#include "saematch/sae.hpp"

namespace saematch::io {

using json = nlohmann::json;

inline constexpr char kMagic[4] = {'S', 'A', 'E', 'M'};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::size_t kPreambleSize = 16;

enum class Dtype { f32, f64 };

constexpr std::size_t dtype_size(Dtype t) noexcept { return t == Dtype::f32 ? 4 : 8; }
constexpr const char* to_string(Dtype t) noexcept { return t == Dtype::f32 ? "f32" : "f64"; }

/// A decoded tensor; f32 data is widened to double on load.
struct Tensor {
  Dtype dtype = Dtype::f64;
  std::vector<std::size_t> shape;
  std::vector<double> values;
};

struct Container {
  json meta = json::object();
  std::map<std::string, Tensor> tensors;
};

namespace detail {

inline void put_le(std::vector<std::uint8_t>& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint64_t get_le(std::span<const std::uint8_t> in, std::size_t pos, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(in[pos + i]) << (8 * i);
  return v;
}

inline std::size_t checked_product(const std::vector<std::size_t>& shape, std::size_t elem) {
  std::size_t n = elem;
  for (std::size_t s : shape) {
    if (s != 0 && n > std::numeric_limits<std::size_t>::max() / s)
      throw Error(ErrorKind::malformed_header, "tensor size overflows");
    n *= s;
  }
  return n;
}

}  // namespace detail

/// Serialises a container. Tensors are laid out back to back in name order.
inline std::vector<std::uint8_t> encode_container(const Container& c) {
  json header;
  header["meta"] = c.meta;
  header["tensors"] = json::object();
  std::size_t offset = 0;
  for (const auto& [name, t] : c.tensors) {
    const std::size_t nbytes = detail::checked_product(t.shape, dtype_size(t.dtype));
    require(nbytes == t.values.size() * dtype_size(t.dtype), ErrorKind::shape_mismatch,
            "tensor '" + name + "' has " + std::to_string(t.values.size()) +
                " values but its shape says otherwise");
    header["tensors"][name] = {{"dtype", to_string(t.dtype)},
                               {"shape", t.shape},
                               {"offset", offset},
                               {"nbytes", nbytes}};
    offset += nbytes;
  }
  const std::string text = header.dump();

  std::vector<std::uint8_t> out;
  out.reserve(kPreambleSize + text.size() + offset);
  out.insert(out.end(), kMagic, kMagic + 4);
  detail::put_le(out, kVersion, 4);
  detail::put_le(out, text.size(), 8);
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& [name, t] : c.tensors) {
    for (double v : t.values) {
      if (t.dtype == Dtype::f64)
        detail::put_le(out, std::bit_cast<std::uint64_t>(v), 8);
      else
        detail::put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4);
    }
  }
  return out;
}

/// Parses and validates a container. Header-declared sizes are never trusted
/// beyond the bounds of `bytes`.
inline Container decode_container(std::span<const std::uint8_t> bytes) {
  require(bytes.size() >= kPreambleSize && std::memcmp(bytes.data(), kMagic, 4) == 0,
          ErrorKind::bad_magic, "not a SAEM file");
  const auto version = detail::get_le(bytes, 4, 4);
  require(version == kVersion, ErrorKind::unsupported_version,
          "SAEM version " + std::to_string(version) + " is not supported");
  const std::uint64_t header_len = detail::get_le(bytes, 8, 8);
  require(header_len <= bytes.size() - kPreambleSize, ErrorKind::out_of_bounds,
          "header length exceeds file size");
  const std::size_t payload_start = kPreambleSize + static_cast<std::size_t>(header_len);
  const std::size_t payload_size = bytes.size() - payload_start;

  json header;
  try {
    header = json::parse(bytes.begin() + kPreambleSize, bytes.begin() + payload_start);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::malformed_header, std::string("header is not valid JSON: ") + e.what());
  }
  require(header.is_object() && header.contains("tensors") && header["tensors"].is_object() &&
              header.contains("meta") && header["meta"].is_object(),
          ErrorKind::malformed_header, "header needs 'tensors' and 'meta' objects");

  struct Range {
    std::size_t begin, end;
    std::string name;
  };
  std::vector<Range> ranges;
  Container c;
  c.meta = header["meta"];
  for (const auto& [name, desc] : header["tensors"].items()) {
    const std::string where = "tensor '" + name + "': ";
    require(desc.is_object() && desc.contains("dtype") && desc["dtype"].is_string() &&
                desc.contains("shape") && desc["shape"].is_array() && desc.contains("offset") &&
                desc["offset"].is_number_unsigned() && desc.contains("nbytes") &&
                desc["nbytes"].is_number_unsigned(),
            ErrorKind::malformed_header, where + "needs dtype, shape, offset, nbytes");
    Tensor t;
    const std::string dtype = desc["dtype"].get<std::string>();
    if (dtype == "f64")
      t.dtype = Dtype::f64;
    else if (dtype == "f32")
      t.dtype = Dtype::f32;
    else
      throw Error(ErrorKind::malformed_header, where + "unknown dtype '" + dtype + "'");
    for (const auto& s : desc["shape"]) {
      require(s.is_number_unsigned(), ErrorKind::malformed_header,
              where + "shape entries must be non-negative integers");
      t.shape.push_back(s.get<std::size_t>());
    }
    const auto offset = desc["offset"].get<std::uint64_t>();
    const auto nbytes = desc["nbytes"].get<std::uint64_t>();
    require(nbytes == detail::checked_product(t.shape, dtype_size(t.dtype)),
            ErrorKind::shape_mismatch, where + "nbytes does not match shape and dtype");
    require(offset <= payload_size && nbytes <= payload_size - offset, ErrorKind::out_of_bounds,
            where + "data range lies outside the payload");
    ranges.push_back({static_cast<std::size_t>(offset), static_cast<std::size_t>(offset + nbytes), name});

    const std::size_t count = static_cast<std::size_t>(nbytes) / dtype_size(t.dtype);
    t.values.resize(count);
    const std::size_t base = payload_start + static_cast<std::size_t>(offset);
    for (std::size_t k = 0; k < count; ++k) {
      if (t.dtype == Dtype::f64)
        t.values[k] = std::bit_cast<double>(detail::get_le(bytes, base + 8 * k, 8));
      else
        t.values[k] = std::bit_cast<float>(
            static_cast<std::uint32_t>(detail::get_le(bytes, base + 4 * k, 4)));
    }
    c.tensors.emplace(name, std::move(t));
  }

  std::sort(ranges.begin(), ranges.end(),
            [](const Range& x, const Range& y) { return x.begin < y.begin; });
  const Range* last = nullptr;
  for (const Range& r : ranges) {
    if (r.begin == r.end) continue;
    require(!last || r.begin >= last->end, ErrorKind::overlapping_tensors,
            "tensors '" + (last ? last->name : r.name) + "' and '" + r.name + "' overlap");
    if (!last || r.end > last->end) last = &r;
  }
  return c;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return bytes;
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorKind::io, "write to '" + path.string() + "' failed");
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline std::string read_text(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

// --- SAE -------------------------------------------------------------------

namespace detail {

inline const Tensor& tensor(const Container& c, const std::string& name) {
  const auto it = c.tensors.find(name);
  require(it != c.tensors.end(), ErrorKind::missing_tensor, "missing tensor '" + name + "'");
  return it->second;
}

inline void expect_shape(const Tensor& t, const std::vector<std::size_t>& shape,
                         const std::string& name) {
  auto fmt = [](const std::vector<std::size_t>& s) {
    std::string out = "[";
    for (std::size_t k = 0; k < s.size(); ++k) out += (k ? "," : "") + std::to_string(s[k]);
    return out + "]";
  };
  require(t.shape == shape, ErrorKind::shape_mismatch,
          "tensor '" + name + "' has shape " + fmt(t.shape) + ", expected " + fmt(shape));
}

inline int meta_int(const json& meta, const char* key) {
  require(meta.contains(key) && meta[key].is_number_integer(), ErrorKind::malformed_header,
          std::string("meta.") + key + " must be an integer");
  return meta[key].get<int>();
}

inline std::string meta_string(const json& meta, const char* key) {
  require(meta.contains(key) && meta[key].is_string(), ErrorKind::malformed_header,
          std::string("meta.") + key + " must be a string");
  return meta[key].get<std::string>();
}

}  // namespace detail

inline Container sae_to_container(const SaeParams& sae, Dtype dtype = Dtype::f64) {
  sae.validate();
  const std::size_t F = sae.num_features();
  const std::size_t d = sae.hidden_dim();
  Container c;
  c.meta = {{"kind", "sae"}, {"layer_id", sae.layer_id}, {"folded", sae.folded}};
  c.tensors["w_enc"] = {dtype, {F, d}, sae.w_enc.storage()};
  c.tensors["b_enc"] = {dtype, {F}, sae.b_enc};
  c.tensors["w_dec"] = {dtype, {d, F}, sae.w_dec.storage()};
  c.tensors["b_dec"] = {dtype, {d}, sae.b_dec};
  c.tensors["theta"] = {dtype, {F}, sae.theta};
  return c;
}

inline SaeParams sae_from_container(const Container& c) {
  require(detail::meta_string(c.meta, "kind") == "sae", ErrorKind::type,
          "container does not hold an SAE");
  require(c.meta.contains("folded") && c.meta["folded"].is_boolean(), ErrorKind::malformed_header,
          "meta.folded must be a boolean");
  static const char* const required[] = {"w_enc", "b_enc", "w_dec", "b_dec", "theta"};
  for (const char* name : required) detail::tensor(c, name);
  for (const auto& [name, t] : c.tensors) {
    bool known = false;
    for (const char* r : required) known = known || name == r;
    require(known, ErrorKind::malformed_header, "unexpected tensor '" + name + "' in SAE file");
  }
  const Tensor& w_enc = detail::tensor(c, "w_enc");
  require(w_enc.shape.size() == 2, ErrorKind::shape_mismatch, "w_enc must be two-dimensional");
  const std::size_t F = w_enc.shape[0];
  const std::size_t d = w_enc.shape[1];
  require(F >= 1 && d >= 1, ErrorKind::shape_mismatch, "SAE needs F >= 1 and d >= 1");
  detail::expect_shape(detail::tensor(c, "b_enc"), {F}, "b_enc");
  detail::expect_shape(detail::tensor(c, "w_dec"), {d, F}, "w_dec");
  detail::expect_shape(detail::tensor(c, "b_dec"), {d}, "b_dec");
  detail::expect_shape(detail::tensor(c, "theta"), {F}, "theta");

  SaeParams sae;
  sae.w_enc = Matrix<double>(F, d, w_enc.values);
  sae.b_enc = detail::tensor(c, "b_enc").values;
  sae.w_dec = Matrix<double>(d, F, detail::tensor(c, "w_dec").values);
  sae.b_dec = detail::tensor(c, "b_dec").values;
  sae.theta = detail::tensor(c, "theta").values;
  sae.layer_id = detail::meta_int(c.meta, "layer_id");
  sae.folded = c.meta["folded"].get<bool>();
  sae.validate();
  return sae;
}

inline void write_sae(const SaeParams& sae, const std::filesystem::path& path,
                      Dtype dtype = Dtype::f64) {
  write_file_bytes(path, encode_container(sae_to_container(sae, dtype)));
}

inline SaeParams read_sae(const std::filesystem::path& path) {
  return sae_from_container(decode_container(read_file_bytes(path)));
}

// --- activations -----------------------------------------------------------

constexpr const char* to_string(ActivationKind k) noexcept {
  switch (k) {
    case ActivationKind::hidden: return "hidden";
    case ActivationKind::feature: return "feature";
    case ActivationKind::logits: return "logits";
  }
  return "?";
}

inline Container activations_to_container(const ActivationBatch& batch, Dtype dtype = Dtype::f64) {
  Container c;
  c.meta = {{"kind", "activations"},
            {"activation_kind", to_string(batch.kind)},
            {"layer_id", batch.layer_id},
            {"folded", false}};
  c.tensors["data"] = {dtype, {batch.tokens(), batch.width()}, batch.data.storage()};
  return c;
}

inline ActivationBatch activations_from_container(const Container& c) {
  require(detail::meta_string(c.meta, "kind") == "activations", ErrorKind::type,
          "container does not hold activations");
  const std::string kind = detail::meta_string(c.meta, "activation_kind");
  ActivationBatch batch;
  if (kind == "hidden")
    batch.kind = ActivationKind::hidden;
  else if (kind == "feature")
    batch.kind = ActivationKind::feature;
  else if (kind == "logits")
    batch.kind = ActivationKind::logits;
  else
    throw Error(ErrorKind::malformed_header, "unknown activation_kind '" + kind + "'");
  const Tensor& data = detail::tensor(c, "data");
  require(data.shape.size() == 2, ErrorKind::shape_mismatch, "activation data must be [T, n]");
  batch.data = Matrix<double>(data.shape[0], data.shape[1], data.values);
  batch.layer_id = detail::meta_int(c.meta, "layer_id");
  batch.validate();
  return batch;
}

inline void write_activations(const ActivationBatch& batch, const std::filesystem::path& path,
                              Dtype dtype = Dtype::f64) {
  write_file_bytes(path, encode_container(activations_to_container(batch, dtype)));
}

inline ActivationBatch read_activations(const std::filesystem::path& path) {
  return activations_from_container(decode_container(read_file_bytes(path)));
}

// --- permutations ----------------------------------------------------------

/// On-disk form of a permutation. Composed or planted maps carry no cost, so
/// total_cost is optional (JSON null) and per_pair_mse may be empty.
struct PermutationRecord {
  Permutation permutation;
  std::optional<double> total_cost;
  std::vector<double> per_pair_mse;
  std::string config_fingerprint;
};

inline PermutationRecord to_record(const MatchResult& r) {
  return {r.permutation, r.total_cost, r.per_pair_mse, r.config_fingerprint};
}

inline json permutation_to_json(const PermutationRecord& rec) {
  rec.permutation.validate();
  json j;
  j["from_layer"] = rec.permutation.from_layer;
  j["to_layer"] = rec.permutation.to_layer;
  j["provenance"] = std::string(saematch::to_string(rec.permutation.provenance));
  j["map"] = rec.permutation.map;
  j["total_cost"] = rec.total_cost ? json(*rec.total_cost) : json(nullptr);
  j["per_pair_mse"] = rec.per_pair_mse;
  j["config_fingerprint"] = rec.config_fingerprint;
  return j;
}

inline PermutationRecord permutation_from_json(const json& j) {
  auto bad = [](const std::string& what) { return Error(ErrorKind::malformed_header, what); };
  if (!j.is_object()) throw bad("permutation document must be a JSON object");
  for (const char* key : {"from_layer", "to_layer", "provenance", "map", "total_cost",
                          "per_pair_mse", "config_fingerprint"})
    if (!j.contains(key)) throw bad(std::string("permutation document lacks '") + key + "'");
  if (!j["from_layer"].is_number_integer() || !j["to_layer"].is_number_integer())
    throw bad("layer ids must be integers");
  if (!j["map"].is_array() || !j["per_pair_mse"].is_array())
    throw bad("map and per_pair_mse must be arrays");
  if (!j["config_fingerprint"].is_string()) throw bad("config_fingerprint must be a string");

  PermutationRecord rec;
  rec.permutation.from_layer = j["from_layer"].get<int>();
  rec.permutation.to_layer = j["to_layer"].get<int>();
  const std::string prov = j["provenance"].is_string() ? j["provenance"].get<std::string>() : "";
  if (prov == "exact")
    rec.permutation.provenance = Provenance::exact;
  else if (prov == "composed")
    rec.permutation.provenance = Provenance::composed;
  else
    throw bad("provenance must be 'exact' or 'composed'");
  for (const auto& v : j["map"]) {
    if (!v.is_number_unsigned()) throw bad("map entries must be non-negative integers");
    rec.permutation.map.push_back(v.get<std::size_t>());
  }
  require(rec.permutation.is_bijection(), ErrorKind::domain, "permutation map is not a bijection");
  if (j["total_cost"].is_number())
    rec.total_cost = j["total_cost"].get<double>();
  else if (!j["total_cost"].is_null())
    throw bad("total_cost must be a number or null");
  for (const auto& v : j["per_pair_mse"]) {
    if (!v.is_number()) throw bad("per_pair_mse entries must be numbers");
    rec.per_pair_mse.push_back(v.get<double>());
  }
  if (!rec.per_pair_mse.empty() && rec.per_pair_mse.size() != rec.permutation.size())
    throw Error(ErrorKind::shape_mismatch, "per_pair_mse length differs from map length");
  rec.config_fingerprint = j["config_fingerprint"].get<std::string>();
  return rec;
}

inline void write_permutation(const PermutationRecord& rec, const std::filesystem::path& path) {
  write_text(path, permutation_to_json(rec).dump(2) + "\n");
}

inline PermutationRecord read_permutation(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::malformed_header, "'" + path.string() + "' is not valid JSON: " + e.what());
  }
  return permutation_from_json(j);
}

/// Rebuilds a MatchResult (weight set and folded flag are not stored).
inline MatchResult to_match_result(const PermutationRecord& rec) {
  MatchResult r;
  r.permutation = rec.permutation;
  r.per_pair_mse = rec.per_pair_mse;
  r.total_cost = rec.total_cost.value_or(0.0);
  r.config_fingerprint = rec.config_fingerprint;
  return r;
}

/// Token targets for cross-entropy: {"targets": [ints]}.
inline std::vector<std::size_t> read_targets(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::malformed_header, "'" + path.string() + "' is not valid JSON: " + e.what());
  }
  require(j.is_object() && j.contains("targets") && j["targets"].is_array(),
          ErrorKind::malformed_header, "targets file needs a 'targets' array");
  std::vector<std::size_t> out;
  for (const auto& v : j["targets"]) {
    require(v.is_number_unsigned(), ErrorKind::malformed_header,
            "targets must be non-negative integers");
    out.push_back(v.get<std::size_t>());
  }
  return out;
}

inline void write_targets(std::span<const std::size_t> targets, const std::filesystem::path& path) {
  write_text(path, json{{"targets", std::vector<std::size_t>(targets.begin(), targets.end())}}.dump() + "\n");
}

// --- CSV reports -----------------------------------------------------------

using CsvValue = std::variant<std::string, double, std::int64_t>;

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<CsvValue>> rows;
};

/// RFC 4180 field quoting: fields containing a comma, quote, CR or LF are
/// wrapped in quotes with embedded quotes doubled.
inline std::string csv_escape(const std::string& field) {
  if (field.find_first_of(",\"\r\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char ch : field) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

/// 17 significant digits, '.' decimal point, independent of the C locale.
inline std::string format_real(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

inline std::string format_csv(const CsvTable& table) {
  std::string out;
  auto emit_row = [&out](const auto& cells, auto&& to_text) {
    for (std::size_t k = 0; k < cells.size(); ++k) {
      if (k) out += ',';
      out += csv_escape(to_text(cells[k]));
    }
    out += "\r\n";
  };
  emit_row(table.header, [](const std::string& s) { return s; });
  for (const auto& row : table.rows) {
    require(row.size() == table.header.size(), ErrorKind::dimension,
            "CSV row width differs from the header");
    emit_row(row, [](const CsvValue& v) {
      return std::visit(
          [](const auto& x) -> std::string {
            using X = std::decay_t<decltype(x)>;
            if constexpr (std::is_same_v<X, std::string>)
              return x;
            else if constexpr (std::is_same_v<X, double>)
              return format_real(x);
            else
              return std::to_string(x);
          },
          v);
    });
  }
  return out;
}

inline void write_report_csv(const CsvTable& table, const std::filesystem::path& path) {
  write_text(path, format_csv(table));
}

}  // namespace saematch::io
