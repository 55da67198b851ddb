#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "iclea/error.hpp"
#include "iclea/matrix.hpp"

namespace iclea {

static_assert(std::endian::native == std::endian::little, "embedding and checkpoint I/O assume a little-endian host");

enum class EmbeddingKind : std::uint8_t { entity_name = 0, entity_description = 1, relation_name = 2, fused = 3 };

inline const char* to_string(EmbeddingKind k) {
  switch (k) {
    case EmbeddingKind::entity_name: return "entity-name";
    case EmbeddingKind::entity_description: return "entity-description";
    case EmbeddingKind::relation_name: return "relation-name";
    case EmbeddingKind::fused: return "fused";
  }
  return "unknown";
}

// Unit-norm rows are required for every kind except fused. Description rows
// may also be all-zero, which marks an entity without a description.
constexpr double kUnitNormTolerance = 1e-3;

struct EmbeddingTable {
  EmbeddingKind kind = EmbeddingKind::fused;
  std::size_t count = 0;
  std::size_t dim = 0;
  std::vector<float> data;

  std::span<const float> row(std::size_t i) const { return {data.data() + i * dim, dim}; }
  std::span<float> row(std::size_t i) { return {data.data() + i * dim, dim}; }

  Matrix as_matrix() const { return Matrix(count, dim, data); }

  friend bool operator==(const EmbeddingTable&, const EmbeddingTable&) = default;
};

inline double row_norm(std::span<const float> r) {
  double acc = 0.0;
  for (float v : r) acc += static_cast<double>(v) * v;
  return std::sqrt(acc);
}

// Throws DataError on NaN/Inf or a norm violation for the table's kind.
inline void validate(const EmbeddingTable& t) {
  if (t.data.size() != t.count * t.dim) throw ShapeError("embedding table payload does not match count*dim");
  for (std::size_t i = 0; i < t.count; ++i) {
    const auto r = t.row(i);
    for (float v : r)
      if (!std::isfinite(v)) throw DataError("row " + std::to_string(i) + " contains NaN or Inf");
    if (t.kind == EmbeddingKind::fused) continue;
    const double n = row_norm(r);
    if (t.kind == EmbeddingKind::entity_description && n == 0.0) continue;
    if (std::abs(n - 1.0) > kUnitNormTolerance)
      throw DataError(std::string(to_string(t.kind)) + " row " + std::to_string(i) + " has norm " + std::to_string(n) + ", expected 1");
  }
}

namespace detail {

constexpr std::array<char, 4> kEmbeddingMagic{'I', 'C', 'L', 'E'};
constexpr std::uint8_t kEmbeddingVersion = 1;
constexpr std::size_t kEmbeddingHeaderBytes = 16;

template <class T>
void put_le(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T>
T get_le(const char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

inline std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace detail

inline std::string encode_embeddings(const EmbeddingTable& t) {
  std::string out;
  out.reserve(detail::kEmbeddingHeaderBytes + t.data.size() * 4);
  out.append(detail::kEmbeddingMagic.data(), 4);
  detail::put_le<std::uint8_t>(out, detail::kEmbeddingVersion);
  detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.kind));
  detail::put_le<std::uint16_t>(out, 0);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.count));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.dim));
  out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float));
  return out;
}

inline EmbeddingTable decode_embeddings(std::string_view bytes, const std::string& source = "<memory>") {
  if (bytes.size() < detail::kEmbeddingHeaderBytes) throw TruncationError(source + ": file shorter than the 16-byte header");
  if (std::memcmp(bytes.data(), detail::kEmbeddingMagic.data(), 4) != 0) throw FormatError(source + ": bad magic, expected ICLE");
  const auto version = detail::get_le<std::uint8_t>(bytes.data() + 4);
  if (version != detail::kEmbeddingVersion) throw FormatError(source + ": unsupported version " + std::to_string(version));
  const auto kind = detail::get_le<std::uint8_t>(bytes.data() + 5);
  if (kind > 3) throw FormatError(source + ": unknown kind code " + std::to_string(kind));
  if (detail::get_le<std::uint16_t>(bytes.data() + 6) != 0) throw FormatError(source + ": reserved header field is not zero");
  EmbeddingTable t;
  t.kind = static_cast<EmbeddingKind>(kind);
  t.count = detail::get_le<std::uint32_t>(bytes.data() + 8);
  t.dim = detail::get_le<std::uint32_t>(bytes.data() + 12);
  const std::size_t expected = t.count * t.dim * sizeof(float);
  const std::size_t payload = bytes.size() - detail::kEmbeddingHeaderBytes;
  if (payload != expected)
    throw TruncationError(source + ": header declares " + std::to_string(t.count) + "x" + std::to_string(t.dim) + " floats (" +
                          std::to_string(expected) + " bytes) but payload has " + std::to_string(payload) + " bytes");
  t.data.resize(t.count * t.dim);
  std::memcpy(t.data.data(), bytes.data() + detail::kEmbeddingHeaderBytes, expected);
  try {
    validate(t);
  } catch (const DataError& e) {
    throw DataError(source + ": " + e.what());
  }
  return t;
}

inline EmbeddingTable read_embeddings(const std::string& path) {
  return decode_embeddings(detail::slurp(path), path);
}

inline void write_embeddings(const std::string& path, const EmbeddingTable& t) {
  validate(t);
  const auto bytes = encode_embeddings(t);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("write failed for " + path);
}

// h_e = Concat(h_name, h_desc). A missing description table contributes a zero block of desc_dim.
inline EmbeddingTable fuse(const EmbeddingTable& name, const EmbeddingTable* desc, std::size_t desc_dim = 0) {
  if (desc && desc->count != name.count)
    throw ShapeError("fuse: name table has " + std::to_string(name.count) + " rows, description table " + std::to_string(desc->count));
  const std::size_t ddim = desc ? desc->dim : desc_dim;
  EmbeddingTable out;
  out.kind = EmbeddingKind::fused;
  out.count = name.count;
  out.dim = name.dim + ddim;
  out.data.assign(out.count * out.dim, 0.0f);
  for (std::size_t i = 0; i < name.count; ++i) {
    auto dst = out.row(i);
    const auto n = name.row(i);
    std::copy(n.begin(), n.end(), dst.begin());
    if (desc) {
      const auto d = desc->row(i);
      std::copy(d.begin(), d.end(), dst.begin() + static_cast<std::ptrdiff_t>(name.dim));
    }
  }
  return out;
}

namespace detail {

inline std::uint64_t mix64(std::uint64_t x) {
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ull;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebull;
  x ^= x >> 31;
  return x;
}

inline std::uint64_t seeded_hash(std::string_view token, std::uint64_t seed) {
  std::uint64_t h = 0xcbf29ce484222325ull ^ mix64(seed);
  for (unsigned char c : token) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return mix64(h);
}

inline std::vector<std::string_view> whitespace_tokens(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; };
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i > start) out.push_back(text.substr(start, i - start));
  }
  return out;
}

}  // namespace detail

// Deterministic stand-in for a pretrained text encoder: signed hashed
// bag-of-words, L2-normalized. Lets the engine run without any model.
inline EmbeddingTable fallback_encode(const std::vector<std::string>& texts, std::size_t dim, std::uint64_t seed,
                                      EmbeddingKind kind = EmbeddingKind::entity_name) {
  if (dim == 0) throw ConfigError("fallback_encode: dim must be >= 1");
  EmbeddingTable t;
  t.kind = kind;
  t.count = texts.size();
  t.dim = dim;
  t.data.assign(t.count * dim, 0.0f);
  std::vector<double> acc(dim);
  for (std::size_t i = 0; i < texts.size(); ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const auto tokens = detail::whitespace_tokens(texts[i]);
    for (auto tok : tokens) {
      const auto h = detail::seeded_hash(tok, seed);
      acc[h % dim] += (h >> 63) ? -1.0 : 1.0;
    }
    double norm = 0.0;
    for (double v : acc) norm += v * v;
    norm = std::sqrt(norm);
    auto dst = t.row(i);
    if (norm == 0.0) {
      // No tokens, or every token cancelled out.
      dst[detail::seeded_hash("\x01<empty>", seed) % dim] = 1.0f;
      continue;
    }
    for (std::size_t d = 0; d < dim; ++d) dst[d] = static_cast<float>(acc[d] / norm);
  }
  return t;
}

}  // namespace iclea
