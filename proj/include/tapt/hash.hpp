#pragma once

#include <memory>
#include <span>
#include <string>
#include <string_view>

#include "tapt/matrix.hpp"

namespace tapt {

/// Incremental SHA-256; digests render as lowercase hex.
class Hasher {
 public:
  Hasher();
  ~Hasher();
  Hasher(Hasher&&) noexcept;
  Hasher& operator=(Hasher&&) noexcept;

  Hasher& update(std::span<const unsigned char> bytes);
  Hasher& update(std::string_view text);
  Hasher& update(const Matrix& m);
  std::string hex();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

std::string sha256_hex(std::string_view text);

}  // namespace tapt
