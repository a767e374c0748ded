#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace vlseg {

// 64-bit FNV-1a, rendered as 16 hex digits.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed = 1469598103934665603ULL);
std::string fnv1a_hex(std::string_view bytes);

}  // namespace vlseg
