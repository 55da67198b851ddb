#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "iclea/embedding_io.hpp"
#include "iclea/error.hpp"
#include "iclea/tensor.hpp"

namespace iclea {

class CheckpointError : public CompatibilityError {
 public:
  using CompatibilityError::CompatibilityError;
};

// A named float32 tensor as stored on disk.
struct StoredTensor {
  ad::Shape shape;
  std::vector<float> values;

  friend bool operator==(const StoredTensor&, const StoredTensor&) = default;
};

// Ordered by name, so the byte layout is independent of insertion order.
using TensorMap = std::map<std::string, StoredTensor>;

template <class T>
StoredTensor store(const ad::Tensor<T>& t) {
  StoredTensor s;
  s.shape = t.shape();
  s.values.reserve(t.size());
  for (T v : t.values()) s.values.push_back(static_cast<float>(v));
  return s;
}

namespace detail {
constexpr std::array<char, 4> kCheckpointMagic{'I', 'C', 'L', 'C'};
constexpr std::uint8_t kCheckpointVersion = 1;
}  // namespace detail

inline std::string encode_checkpoint(const TensorMap& tensors) {
  std::string out(detail::kCheckpointMagic.data(), 4);
  detail::put_le<std::uint8_t>(out, detail::kCheckpointVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xFFFF) throw ContractError("tensor name too long: " + name);
    if (t.shape.size() > 0xFF) throw ContractError("tensor rank too large: " + name);
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.append(name);
    detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.shape.size()));
    for (auto e : t.shape) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e));
    out.append(reinterpret_cast<const char*>(t.values.data()), t.values.size() * sizeof(float));
  }
  return out;
}

inline TensorMap decode_checkpoint(std::string_view bytes, const std::string& source = "<memory>") {
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (bytes.size() - pos < n) throw CheckpointError(source + ": truncated checkpoint");
  };
  need(9);
  if (std::memcmp(bytes.data(), detail::kCheckpointMagic.data(), 4) != 0) throw CheckpointError(source + ": bad magic, expected ICLC");
  if (static_cast<std::uint8_t>(bytes[4]) != detail::kCheckpointVersion) throw CheckpointError(source + ": unsupported checkpoint version");
  const auto count = detail::get_le<std::uint32_t>(bytes.data() + 5);
  pos = 9;
  TensorMap out;
  for (std::uint32_t k = 0; k < count; ++k) {
    need(2);
    const auto len = detail::get_le<std::uint16_t>(bytes.data() + pos);
    pos += 2;
    need(len + 1u);
    std::string name(bytes.substr(pos, len));
    pos += len;
    const auto rank = static_cast<std::uint8_t>(bytes[pos++]);
    need(4u * rank);
    StoredTensor t;
    for (unsigned r = 0; r < rank; ++r) {
      t.shape.push_back(detail::get_le<std::uint32_t>(bytes.data() + pos));
      pos += 4;
    }
    const std::size_t n = ad::numel(t.shape);
    need(n * sizeof(float));
    t.values.resize(n);
    std::memcpy(t.values.data(), bytes.data() + pos, n * sizeof(float));
    pos += n * sizeof(float);
    if (!out.emplace(std::move(name), std::move(t)).second) throw CheckpointError(source + ": duplicate tensor name");
  }
  if (pos != bytes.size()) throw CheckpointError(source + ": trailing bytes after last tensor");
  return out;
}

// Writes to a temporary sibling and renames it into place.
inline void write_file_atomic(const std::string& path, std::string_view bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw InputError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline void write_checkpoint(const std::string& path, const TensorMap& tensors) {
  write_file_atomic(path, encode_checkpoint(tensors));
}

inline TensorMap read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path);
}

}  // namespace iclea
