#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "tapt/matrix.hpp"

namespace tapt {

/// Versioned binary container shared by every on-disk artifact.
///
/// Layout: 8-byte magic "TAPTBIN1", u32 format version, u64 header length,
/// UTF-8 JSON header, then each array as raw little-endian float64 in header
/// order. The header records kind, metadata, array shapes and a SHA-256
/// content hash over names, shapes and payload; loading re-verifies it.
struct Container {
  static constexpr std::uint32_t kVersion = 1;

  std::string kind;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Matrix>> arrays;

  const Matrix& get(const std::string& name) const;
  void put(std::string name, Matrix m) { arrays.emplace_back(std::move(name), std::move(m)); }
  std::string content_hash() const;
};

/// Writes via a temporary file and rename so readers never see a partial file.
void write_container(const std::filesystem::path& path, const Container& c);
/// Throws IoError on a missing/corrupt file or a kind mismatch.
Container read_container(const std::filesystem::path& path, const std::string& expected_kind);

/// Atomic text write (temp file + rename).
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace tapt
