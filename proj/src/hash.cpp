#include "tapt/hash.hpp"

#include <openssl/evp.h>

#include <cstdint>
#include <stdexcept>

namespace tapt {

struct Hasher::Impl {
  EVP_MD_CTX* ctx = nullptr;
};

Hasher::Hasher() : impl_(std::make_unique<Impl>()) {
  impl_->ctx = EVP_MD_CTX_new();
  if (impl_->ctx == nullptr || EVP_DigestInit_ex(impl_->ctx, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 init failed");
}

Hasher::~Hasher() {
  if (impl_ && impl_->ctx != nullptr) EVP_MD_CTX_free(impl_->ctx);
}

Hasher::Hasher(Hasher&&) noexcept = default;
Hasher& Hasher::operator=(Hasher&&) noexcept = default;

Hasher& Hasher::update(std::span<const unsigned char> bytes) {
  EVP_DigestUpdate(impl_->ctx, bytes.data(), bytes.size());
  return *this;
}

Hasher& Hasher::update(std::string_view text) {
  EVP_DigestUpdate(impl_->ctx, text.data(), text.size());
  return *this;
}

Hasher& Hasher::update(const Matrix& m) {
  const std::uint64_t dims[2] = {m.rows(), m.cols()};
  EVP_DigestUpdate(impl_->ctx, dims, sizeof(dims));
  EVP_DigestUpdate(impl_->ctx, m.data(), m.size() * sizeof(double));
  return *this;
}

std::string Hasher::hex() {
  unsigned char out[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(impl_->ctx, out, &len);
  static constexpr char digits[] = "0123456789abcdef";
  std::string s;
  s.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    s.push_back(digits[out[i] >> 4]);
    s.push_back(digits[out[i] & 15]);
  }
  EVP_DigestInit_ex(impl_->ctx, EVP_sha256(), nullptr);
  return s;
}

std::string sha256_hex(std::string_view text) { return Hasher().update(text).hex(); }

}  // namespace tapt
