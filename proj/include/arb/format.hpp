#pragma once

#include <charconv>
#include <string>

namespace arb {

/// Shortest round-trippable decimal form, used by every CSV writer so that
/// outputs are byte-stable.
inline std::string fmt_num(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

}  // namespace arb
