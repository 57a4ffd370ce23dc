#include "ibq/data/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace ibq {
namespace {

static_assert(std::endian::native == std::endian::little,
              "archive encoding assumes a little-endian host");

std::size_t tag_size(TensorArchive::Tag t) { return t == TensorArchive::Tag::f32 ? 4 : 8; }

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <class T>
std::vector<std::uint8_t> raw_bytes(const T* data, std::size_t n) {
  std::vector<std::uint8_t> out(n * sizeof(T));
  std::memcpy(out.data(), data, out.size());
  return out;
}

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& b, const std::string& origin)
      : b_(b), origin_(origin) {}

  void need(std::size_t n, const char* what) const {
    if (b_.size() - pos_ < n) {
      throw DataError("archive " + origin_ + " truncated while reading " + what + " at byte " +
                      std::to_string(pos_));
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return b_[pos_++];
  }
  std::vector<std::uint8_t> bytes(std::size_t n, const char* what) {
    need(n, what);
    std::vector<std::uint8_t> v(b_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                b_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return v;
  }
  bool done() const { return pos_ == b_.size(); }
  std::size_t pos() const { return pos_; }

 private:
  const std::vector<std::uint8_t>& b_;
  std::string origin_;
  std::size_t pos_ = 0;
};

std::vector<std::uint32_t> dims_of(const Shape& s) {
  std::vector<std::uint32_t> d;
  for (auto e : s) {
    if (e > 0xFFFFFFFFll) throw ContractError("tensor extent exceeds u32");
    d.push_back(static_cast<std::uint32_t>(e));
  }
  return d;
}

}  // namespace

void TensorArchive::add(Entry e) {
  if (contains(e.name)) throw ContractError("duplicate archive entry '" + e.name + "'");
  entries_.push_back(std::move(e));
}

void TensorArchive::put(const std::string& name, const Tensor& t) {
  Entry e;
  e.name = name;
  e.dims = dims_of(t.shape());
  if (t.dtype() == DType::f32) {
    e.tag = Tag::f32;
    e.payload = raw_bytes(t.data<float>().data(), t.data<float>().size());
  } else {
    e.tag = Tag::f64;
    e.payload = raw_bytes(t.data<double>().data(), t.data<double>().size());
  }
  add(std::move(e));
}

void TensorArchive::put_i64(const std::string& name, const std::vector<std::int64_t>& values) {
  Entry e;
  e.name = name;
  e.dims = {static_cast<std::uint32_t>(values.size())};
  e.tag = Tag::i64;
  e.payload = raw_bytes(values.data(), values.size());
  add(std::move(e));
}

void TensorArchive::put_u64(const std::string& name, const std::vector<std::uint64_t>& values) {
  Entry e;
  e.name = name;
  e.dims = {static_cast<std::uint32_t>(values.size())};
  e.tag = Tag::u64;
  e.payload = raw_bytes(values.data(), values.size());
  add(std::move(e));
}

bool TensorArchive::contains(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return true;
  }
  return false;
}

const TensorArchive::Entry& TensorArchive::find(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e;
  }
  throw DataError("archive has no entry '" + name + "'");
}

Tensor TensorArchive::get(const std::string& name) const {
  const Entry& e = find(name);
  Shape shape(e.dims.begin(), e.dims.end());
  if (e.tag == Tag::f32) {
    std::vector<float> v(e.payload.size() / 4);
    std::memcpy(v.data(), e.payload.data(), e.payload.size());
    return Tensor::from_vector(shape, std::move(v));
  }
  if (e.tag == Tag::f64) {
    std::vector<double> v(e.payload.size() / 8);
    std::memcpy(v.data(), e.payload.data(), e.payload.size());
    return Tensor::from_vector(shape, std::move(v));
  }
  throw DataError("archive entry '" + name + "' is an integer array, not a tensor");
}

std::vector<std::int64_t> TensorArchive::get_i64(const std::string& name) const {
  const Entry& e = find(name);
  if (e.tag != Tag::i64) throw DataError("archive entry '" + name + "' is not i64");
  std::vector<std::int64_t> v(e.payload.size() / 8);
  std::memcpy(v.data(), e.payload.data(), e.payload.size());
  return v;
}

std::vector<std::uint64_t> TensorArchive::get_u64(const std::string& name) const {
  const Entry& e = find(name);
  if (e.tag != Tag::u64) throw DataError("archive entry '" + name + "' is not u64");
  std::vector<std::uint64_t> v(e.payload.size() / 8);
  std::memcpy(v.data(), e.payload.data(), e.payload.size());
  return v;
}

std::vector<std::uint8_t> TensorArchive::serialize() const {
  std::vector<std::uint8_t> out = {'I', 'B', 'Q', 'A'};
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(entries_.size()));
  for (const auto& e : entries_) {
    put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    put_u32(out, static_cast<std::uint32_t>(e.dims.size()));
    for (auto d : e.dims) put_u32(out, d);
    out.push_back(static_cast<std::uint8_t>(e.tag));
    out.insert(out.end(), e.payload.begin(), e.payload.end());
  }
  return out;
}

TensorArchive TensorArchive::deserialize(const std::vector<std::uint8_t>& bytes,
                                         const std::string& origin) {
  Reader r(bytes, origin);
  auto magic = r.bytes(4, "magic");
  if (std::memcmp(magic.data(), "IBQA", 4) != 0) {
    throw DataError("archive " + origin + " has bad magic (expected IBQA)");
  }
  const std::uint32_t version = r.u32("version");
  if (version != kVersion) {
    throw DataError("archive " + origin + " has unsupported version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32("entry count");
  TensorArchive a;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    const std::uint32_t name_len = r.u32("name length");
    auto name = r.bytes(name_len, "name");
    e.name.assign(name.begin(), name.end());
    const std::uint32_t rank = r.u32("rank");
    if (rank > 16) {
      throw DataError("archive " + origin + " entry '" + e.name + "' has implausible rank " +
                      std::to_string(rank));
    }
    std::uint64_t numel = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      e.dims.push_back(r.u32("dims"));
      numel *= e.dims.back();
      if (numel > (std::uint64_t{1} << 40)) throw DataError("archive " + origin + " entry too large");
    }
    const std::uint8_t tag = r.u8("dtype tag");
    if (tag > 3) {
      throw DataError("archive " + origin + " entry '" + e.name + "' has unknown dtype tag " +
                      std::to_string(tag));
    }
    e.tag = static_cast<Tag>(tag);
    if (rank == 0 || numel == 0) {
      throw DataError("archive " + origin + " entry '" + e.name + "' has an empty shape");
    }
    e.payload = r.bytes(numel * tag_size(e.tag), "payload");
    if (a.contains(e.name)) {
      throw DataError("archive " + origin + " has duplicate entry '" + e.name + "'");
    }
    a.entries_.push_back(std::move(e));
  }
  if (!r.done()) {
    throw DataError("archive " + origin + " has " + std::to_string(bytes.size() - r.pos()) +
                    " trailing bytes");
  }
  return a;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

void TensorArchive::save(const std::filesystem::path& path) const {
  write_file_bytes(path, serialize());
}

TensorArchive TensorArchive::load(const std::filesystem::path& path) {
  return deserialize(read_file_bytes(path), path.string());
}

}  // namespace ibq
