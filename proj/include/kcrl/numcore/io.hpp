#pragma once

#include "kcrl/numcore/tape.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace kcrl::nc {

/// 64-bit FNV-1a.
std::uint64_t fnv1a(std::span<const std::uint8_t> bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a_file(const std::filesystem::path& path);
std::string hex64(std::uint64_t v);

/// Named dense arrays plus a JSON metadata document, stored as
///   "KCRLBLOB" | u32 version | u64 meta_len | meta | u32 count |
///   { u32 name_len | name | u64 rows | u64 cols | f64[rows*cols] }* | u64 fnv1a
/// The checksum covers every byte between the version field and itself.
struct Blob {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Matrix>> tensors;

  void put(const std::string& name, const Matrix& m) { tensors.emplace_back(name, m); }
  const Matrix& get(const std::string& name) const;
  bool has(const std::string& name) const;
};

inline constexpr std::uint32_t kBlobVersion = 1;

/// Writes to a sibling temp file then renames over `path`.
void write_blob(const std::filesystem::path& path, const Blob& blob);
/// Throws DataError on missing file, bad magic, or checksum mismatch and
/// VersionError on an unknown version.
Blob read_blob(const std::filesystem::path& path);

void store_params(Blob& blob, const std::vector<Parameter*>& params);
/// Copies stored values into params by name; shapes must match exactly.
void load_params(const Blob& blob, const std::vector<Parameter*>& params);

/// Atomic text write (temp file + rename).
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace kcrl::nc
