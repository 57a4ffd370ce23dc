#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ibq/core/tensor.hpp"

namespace ibq {

// Named-tensor container, little-endian:
//   "IBQA" | u32 version | u32 count |
//   per entry: u32 name_len | name | u32 rank | u32 dims[rank] | u8 tag | payload
// Tags: 0 f32, 1 f64, 2 i64, 3 u64. Entries keep insertion order.
class TensorArchive {
 public:
  static constexpr std::uint32_t kVersion = 1;

  enum class Tag : std::uint8_t { f32 = 0, f64 = 1, i64 = 2, u64 = 3 };

  struct Entry {
    std::string name;
    std::vector<std::uint32_t> dims;
    Tag tag = Tag::f32;
    std::vector<std::uint8_t> payload;
  };

  // Throw ContractError on a duplicate name.
  void put(const std::string& name, const Tensor& t);
  void put_i64(const std::string& name, const std::vector<std::int64_t>& values);
  void put_u64(const std::string& name, const std::vector<std::uint64_t>& values);

  bool contains(const std::string& name) const;
  // Throw DataError when missing or of the wrong kind.
  Tensor get(const std::string& name) const;
  std::vector<std::int64_t> get_i64(const std::string& name) const;
  std::vector<std::uint64_t> get_u64(const std::string& name) const;

  const std::vector<Entry>& entries() const { return entries_; }

  std::vector<std::uint8_t> serialize() const;
  // Parses into a fresh archive; malformed input throws DataError and
  // leaves nothing behind.
  static TensorArchive deserialize(const std::vector<std::uint8_t>& bytes,
                                   const std::string& origin = "<memory>");

  void save(const std::filesystem::path& path) const;
  static TensorArchive load(const std::filesystem::path& path);

 private:
  const Entry& find(const std::string& name) const;
  void add(Entry e);

  std::vector<Entry> entries_;
};

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
// Writes to a sibling temporary then renames, so readers never see a partial file.
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace ibq
