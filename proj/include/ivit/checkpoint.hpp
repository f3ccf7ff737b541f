#pragma once

// Binary tensor container shared by filter banks, fitted attention factors
// and model checkpoints. All integers and floats are little-endian:
//
//   "IATT" | version u32 | tensor count u32 |
//   per tensor: name length u16 | name bytes | rows u32 | cols u32 | rows*cols f64
//
// Metadata is a `key = value` text block stored as a 1 x L tensor named
// "__meta__" whose entries are the text's byte values.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "ivit/key_values.hpp"
#include "ivit/tensors.hpp"

namespace ivit {

inline constexpr char kCheckpointMagic[4] = {'I', 'A', 'T', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr const char* kMetadataTensor = "__meta__";

struct Checkpoint {
  NamedTensors tensors;
  KeyValues metadata;
};

namespace detail {

inline void put_le(std::vector<std::uint8_t>& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  std::uint64_t le(int n) {
    require(pos_ + static_cast<std::size_t>(n) <= bytes_.size(), "checkpoint: truncated file");
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::string text(std::size_t n) {
    require(pos_ + n <= bytes_.size(), "checkpoint: truncated file");
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                  bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  std::vector<std::pair<std::string, const Matrix*>> items;
  for (const auto& [name, m] : ckpt.tensors) {
    require(name != kMetadataTensor, "checkpoint: tensor name is reserved");
    items.emplace_back(name, &m);
  }
  const std::string meta = ckpt.metadata.to_text();
  Matrix meta_tensor(1, meta.size());
  for (std::size_t i = 0; i < meta.size(); ++i) meta_tensor(0, i) = static_cast<unsigned char>(meta[i]);
  if (!meta.empty()) items.emplace_back(kMetadataTensor, &meta_tensor);

  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 4);
  detail::put_le(out, kCheckpointVersion, 4);
  detail::put_le(out, items.size(), 4);
  for (const auto& [name, m] : items) {
    require(name.size() <= 0xffff, "checkpoint: tensor name too long");
    detail::put_le(out, name.size(), 2);
    out.insert(out.end(), name.begin(), name.end());
    detail::put_le(out, m->rows(), 4);
    detail::put_le(out, m->cols(), 4);
    for (double v : m->data()) detail::put_le(out, std::bit_cast<std::uint64_t>(v), 8);
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  detail::Reader in(bytes);
  require(in.text(4) == std::string(kCheckpointMagic, 4), "checkpoint: bad magic");
  const auto version = in.le(4);
  require(version == kCheckpointVersion, "checkpoint: unsupported version " + std::to_string(version));
  const auto count = in.le(4);
  Checkpoint ckpt;
  for (std::uint64_t t = 0; t < count; ++t) {
    const std::string name = in.text(static_cast<std::size_t>(in.le(2)));
    const auto rows = static_cast<std::size_t>(in.le(4));
    const auto cols = static_cast<std::size_t>(in.le(4));
    std::vector<double> data(rows * cols);
    for (double& v : data) v = std::bit_cast<double>(in.le(8));
    Matrix m(rows, cols, std::move(data));
    if (name == kMetadataTensor) {
      std::string text(m.size(), '\0');
      for (std::size_t i = 0; i < m.size(); ++i) text[i] = static_cast<char>(static_cast<unsigned char>(m(0, i)));
      ckpt.metadata = KeyValues::parse(text);
    } else {
      require(!ckpt.tensors.contains(name), "checkpoint: duplicate tensor '" + name + "'");
      ckpt.tensors.set(name, std::move(m));
    }
  }
  require(in.done(), "checkpoint: trailing bytes");
  return ckpt;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), "cannot open '" + path.string() + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), "cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), "write failed for '" + path.string() + "'");
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file_bytes(path, encode_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file_bytes(path));
}

}  // namespace ivit
