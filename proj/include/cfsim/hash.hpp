#pragma once

#include <string>
#include <string_view>

namespace cfsim {

// Lower-case hex SHA-256 of `data`.
std::string sha256_hex(std::string_view data);

// Lower-case hex HMAC-SHA256 of `data` under `key`.
std::string hmac_sha256_hex(std::string_view key, std::string_view data);

// Constant-time equality for token comparison.
bool secure_equal(std::string_view a, std::string_view b);

}  // namespace cfsim
