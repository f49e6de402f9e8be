#pragma once

#include <array>
#include <memory>
#include <string>
#include <string_view>

namespace trojanlm {

using Sha256Digest = std::array<unsigned char, 32>;

/// Incremental SHA-256 (OpenSSL EVP).
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, size_t n);
  void update(std::string_view s) { update(s.data(), s.size()); }
  Sha256Digest finish();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

std::string to_hex(const Sha256Digest& d);
std::string sha256_hex(std::string_view data);

}  // namespace trojanlm
