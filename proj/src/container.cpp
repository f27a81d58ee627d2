#include "plmix/container.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "plmix/errors.hpp"

namespace plmix {

namespace {

constexpr char kMagic[8] = {'P', 'L', 'M', 'X', 'C', 'N', 'T', '\0'};

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

class Writer {
 public:
  explicit Writer(std::ofstream& out) : out_(out) {}
  template <typename T>
  void pod(T v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void str32(const std::string& s) {
    pod<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void str64(const std::string& s) {
    pod<std::uint64_t>(s.size());
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void raw(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }

 private:
  std::ofstream& out_;
};

class Reader {
 public:
  Reader(std::vector<char> bytes, std::string path) : bytes_(std::move(bytes)), path_(std::move(path)) {}
  template <typename T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str(std::uint64_t n) {
    need(n);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  void raw(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (n > bytes_.size() - pos_) throw FormatError("container '" + path_ + "': truncated file");
  }
  std::vector<char> bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

void Container::put(const std::string& name, const Tensor2& t) {
  Entry e;
  e.name = name;
  e.dtype = Dtype::F64;
  e.rows = t.rows();
  e.cols = t.cols();
  e.f64 = t.storage();
  entries_.push_back(std::move(e));
}

void Container::put_ints(const std::string& name, std::span<const int> values) {
  Entry e;
  e.name = name;
  e.dtype = Dtype::I64;
  e.rows = 1;
  e.cols = values.size();
  e.i64.assign(values.begin(), values.end());
  entries_.push_back(std::move(e));
}

void Container::put_u64(const std::string& name, std::span<const std::uint64_t> values) {
  Entry e;
  e.name = name;
  e.dtype = Dtype::I64;
  e.rows = 1;
  e.cols = values.size();
  e.i64.reserve(values.size());
  for (auto v : values) e.i64.push_back(std::bit_cast<std::int64_t>(v));
  entries_.push_back(std::move(e));
}

bool Container::has(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.name == name; });
}

const Container::Entry& Container::find(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e;
  throw FormatError("container (" + kind_ + "): missing entry '" + name + "'");
}

Tensor2 Container::tensor(const std::string& name) const {
  const auto& e = find(name);
  if (e.dtype != Dtype::F64) throw FormatError("container entry '" + name + "' is not f64");
  return Tensor2(e.rows, e.cols, e.f64);
}

std::vector<int> Container::ints(const std::string& name) const {
  const auto& e = find(name);
  if (e.dtype != Dtype::I64) throw FormatError("container entry '" + name + "' is not i64");
  return {e.i64.begin(), e.i64.end()};
}

std::vector<std::uint64_t> Container::u64s(const std::string& name) const {
  const auto& e = find(name);
  if (e.dtype != Dtype::I64) throw FormatError("container entry '" + name + "' is not i64");
  std::vector<std::uint64_t> out;
  out.reserve(e.i64.size());
  for (auto v : e.i64) out.push_back(std::bit_cast<std::uint64_t>(v));
  return out;
}

void Container::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot open '" + path.string() + "' for writing");
  Writer w(out);
  w.raw(kMagic, sizeof(kMagic));
  w.pod<std::uint32_t>(kFormatVersion);
  w.str32(kind_);
  w.str64(header_.dump());
  w.pod<std::uint64_t>(entries_.size());
  for (const auto& e : entries_) {
    w.str32(e.name);
    w.pod<std::uint8_t>(static_cast<std::uint8_t>(e.dtype));
    w.pod<std::uint64_t>(e.rows);
    w.pod<std::uint64_t>(e.cols);
    if (e.dtype == Dtype::F64)
      w.raw(e.f64.data(), e.f64.size() * sizeof(double));
    else
      w.raw(e.i64.data(), e.i64.size() * sizeof(std::int64_t));
  }
  if (!out) throw InputError("failed writing '" + path.string() + "'");
}

Container Container::load(const std::filesystem::path& path, const std::string& expected_kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path.string() + "'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(std::move(bytes), path.string());
  char magic[8];
  r.raw(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw FormatError("'" + path.string() + "' is not a plmix container");
  const auto version = r.pod<std::uint32_t>();
  if (version != kFormatVersion)
    throw FormatError("'" + path.string() + "': unsupported format version " + std::to_string(version));
  Container c(r.str(r.pod<std::uint32_t>()));
  if (!expected_kind.empty() && c.kind_ != expected_kind) {
    throw FormatError("'" + path.string() + "' holds a " + c.kind_ + " container, expected " +
                      expected_kind);
  }
  try {
    c.header_ = nlohmann::json::parse(r.str(r.pod<std::uint64_t>()));
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError("'" + path.string() + "': bad header: " + ex.what());
  }
  const auto count = r.pod<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    Entry e;
    e.name = r.str(r.pod<std::uint32_t>());
    const auto dtype = r.pod<std::uint8_t>();
    if (dtype > 1) throw FormatError("'" + path.string() + "': bad dtype for '" + e.name + "'");
    e.dtype = static_cast<Dtype>(dtype);
    e.rows = r.pod<std::uint64_t>();
    e.cols = r.pod<std::uint64_t>();
    const std::uint64_t n = e.rows * e.cols;
    if (e.dtype == Dtype::F64) {
      e.f64.resize(n);
      r.raw(e.f64.data(), n * sizeof(double));
    } else {
      e.i64.resize(n);
      r.raw(e.i64.data(), n * sizeof(std::int64_t));
    }
    c.entries_.push_back(std::move(e));
  }
  if (!r.done()) throw FormatError("'" + path.string() + "': trailing bytes");
  return c;
}

}  // namespace plmix
