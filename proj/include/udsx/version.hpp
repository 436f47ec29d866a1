#pragma once

namespace udsx {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace udsx
