#include "ibq/data/token_file.hpp"

#include <cstring>

#include "ibq/core/errors.hpp"
#include "ibq/data/archive.hpp"

namespace ibq {
namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

}  // namespace

void TokenDataset::validate(const std::string& origin) const {
  for (std::size_t r = 0; r < records.size(); ++r) {
    const auto& rec = records[r];
    if (rec.indices.size() != T) {
      throw DataError("token file " + origin + ": record " + std::to_string(r) + " has " +
                      std::to_string(rec.indices.size()) + " indices, expected " + std::to_string(T));
    }
    if (rec.label >= num_classes) {
      throw DataError("token file " + origin + ": record " + std::to_string(r) + " class " +
                      std::to_string(rec.label) + " >= " + std::to_string(num_classes));
    }
    for (auto i : rec.indices) {
      if (i >= K) {
        throw DataError("token file " + origin + ": record " + std::to_string(r) + " index " +
                        std::to_string(i) + " >= K=" + std::to_string(K));
      }
    }
  }
}

std::vector<std::uint8_t> TokenDataset::serialize() const {
  validate();
  std::vector<std::uint8_t> out = {'I', 'B', 'Q', 'K'};
  put_u32(out, K);
  put_u32(out, T);
  put_u32(out, num_classes);
  put_u32(out, static_cast<std::uint32_t>(records.size()));
  out.reserve(out.size() + records.size() * (2 + 4 * T));
  for (const auto& rec : records) {
    out.push_back(static_cast<std::uint8_t>(rec.label & 0xFF));
    out.push_back(static_cast<std::uint8_t>(rec.label >> 8));
    for (auto i : rec.indices) put_u32(out, i);
  }
  return out;
}

TokenDataset TokenDataset::deserialize(const std::vector<std::uint8_t>& b, const std::string& origin) {
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (b.size() - pos < n) {
      throw DataError("token file " + origin + " truncated at byte " + std::to_string(pos));
    }
  };
  auto u32 = [&] {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[pos + i]) << (8 * i);
    pos += 4;
    return v;
  };
  need(4);
  if (std::memcmp(b.data(), "IBQK", 4) != 0) {
    throw DataError("token file " + origin + " has bad magic (expected IBQK)");
  }
  pos = 4;
  TokenDataset d;
  d.K = u32();
  d.T = u32();
  d.num_classes = u32();
  const std::uint32_t n = u32();
  const std::size_t record_bytes = 2 + 4 * static_cast<std::size_t>(d.T);
  if ((b.size() - pos) != record_bytes * n) {
    throw DataError("token file " + origin + " holds " + std::to_string(b.size() - pos) +
                    " record bytes, header implies " + std::to_string(record_bytes * n));
  }
  d.records.resize(n);
  for (auto& rec : d.records) {
    rec.label = static_cast<std::uint16_t>(b[pos] | (b[pos + 1] << 8));
    pos += 2;
    rec.indices.resize(d.T);
    for (auto& i : rec.indices) i = u32();
  }
  d.validate(origin);
  return d;
}

void TokenDataset::save(const std::filesystem::path& path) const {
  write_file_bytes(path, serialize());
}

TokenDataset TokenDataset::load(const std::filesystem::path& path) {
  return deserialize(read_file_bytes(path), path.string());
}

}  // namespace ibq
