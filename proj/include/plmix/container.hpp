#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "plmix/tensor.hpp"

namespace plmix {

/// Versioned binary container of named arrays plus a JSON header.
///
/// Layout (little-endian):
///   magic "PLMXCNT\0" | u32 format_version | u32 len + kind | u64 len + header JSON |
///   u64 entry count | entries...
/// Entry: u32 len + name | u8 dtype (0 = f64, 1 = i64) | u64 rows | u64 cols | raw values.
/// Values are stored as their raw IEEE/two's-complement bytes, so round trips are bit-exact.
class Container {
 public:
  static constexpr std::uint32_t kFormatVersion = 1;

  enum class Dtype : std::uint8_t { F64 = 0, I64 = 1 };
  struct Entry {
    std::string name;
    Dtype dtype = Dtype::F64;
    std::uint64_t rows = 0;
    std::uint64_t cols = 0;
    std::vector<double> f64;
    std::vector<std::int64_t> i64;
  };

  Container() = default;
  explicit Container(std::string kind) : kind_(std::move(kind)) {}

  const std::string& kind() const { return kind_; }
  nlohmann::json& header() { return header_; }
  const nlohmann::json& header() const { return header_; }

  void put(const std::string& name, const Tensor2& t);
  void put_ints(const std::string& name, std::span<const int> values);
  void put_u64(const std::string& name, std::span<const std::uint64_t> values);

  bool has(const std::string& name) const;
  Tensor2 tensor(const std::string& name) const;
  std::vector<int> ints(const std::string& name) const;
  std::vector<std::uint64_t> u64s(const std::string& name) const;
  const std::vector<Entry>& entries() const { return entries_; }

  void save(const std::filesystem::path& path) const;
  /// Throws FormatError on malformed input, InputError when the file cannot be opened.
  static Container load(const std::filesystem::path& path, const std::string& expected_kind = "");

 private:
  const Entry& find(const std::string& name) const;

  std::string kind_;
  nlohmann::json header_ = nlohmann::json::object();
  std::vector<Entry> entries_;
};

}  // namespace plmix
