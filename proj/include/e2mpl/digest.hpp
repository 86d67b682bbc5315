#pragma once

#include <string>
#include <string_view>

#include "e2mpl/numerics.hpp"

namespace e2mpl {

std::string sha256_hex(std::string_view bytes);

// SHA-256 over the raw bytes of each matrix's shape and entries, in order.
class Fingerprint {
 public:
  Fingerprint& add(const Matrix& m);
  Fingerprint& add(std::string_view bytes);
  std::string hex() const { return sha256_hex(buffer_); }

 private:
  std::string buffer_;
};

}  // namespace e2mpl
