#include "e2mpl/digest.hpp"

#include <array>
#include <cstdint>

#include <openssl/sha.h>

namespace e2mpl {

std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, SHA256_DIGEST_LENGTH> md{};
  SHA256(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(), md.data());
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string hex;
  hex.reserve(md.size() * 2);
  for (const unsigned char b : md) {
    hex.push_back(kDigits[b >> 4]);
    hex.push_back(kDigits[b & 0xf]);
  }
  return hex;
}

Fingerprint& Fingerprint::add(const Matrix& m) {
  const std::int64_t shape[2] = {m.rows(), m.cols()};
  buffer_.append(reinterpret_cast<const char*>(shape), sizeof(shape));
  buffer_.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
  return *this;
}

Fingerprint& Fingerprint::add(std::string_view bytes) {
  buffer_.append(bytes);
  return *this;
}

}  // namespace e2mpl
