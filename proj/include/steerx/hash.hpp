#pragma once

#include <steerx/error.hpp>

#include <openssl/evp.h>

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace steerx {

/// SHA-256 of `data`, lowercase hex.
inline std::string sha256_hex(std::string_view data) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr) throw Error("sha256: allocation failed");
  bool ok = EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) == 1 &&
            EVP_DigestUpdate(ctx, data.data(), data.size()) == 1 &&
            EVP_DigestFinal_ex(ctx, digest.data(), &len) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok) throw Error("sha256: digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xF]);
  }
  return out;
}

/// Unambiguous hash of a part list: each part is length-prefixed so that
/// ("ab","c") and ("a","bc") hash differently.
inline std::string content_hash(const std::vector<std::string_view>& parts) {
  std::string buf;
  for (const auto& p : parts) {
    buf += std::to_string(p.size());
    buf += ':';
    buf.append(p);
  }
  return sha256_hex(buf);
}

}  // namespace steerx
