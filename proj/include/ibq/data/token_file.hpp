#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace ibq {

struct TokenRecord {
  std::uint16_t label = 0;
  std::vector<std::uint32_t> indices;  // T entries, raster order
};

// "IBQK" | u32 K | u32 T | u32 num_classes | u32 N | N × (u16 class, T × u32)
struct TokenDataset {
  std::uint32_t K = 0;
  std::uint32_t T = 0;
  std::uint32_t num_classes = 0;
  std::vector<TokenRecord> records;

  // Throws DataError when an index ≥ K, a label ≥ num_classes or a record
  // has the wrong length.
  void validate(const std::string& origin = "<memory>") const;
  std::vector<std::uint8_t> serialize() const;
  static TokenDataset deserialize(const std::vector<std::uint8_t>& bytes,
                                  const std::string& origin = "<memory>");
  void save(const std::filesystem::path& path) const;
  static TokenDataset load(const std::filesystem::path& path);
};

}  // namespace ibq
