#pragma once

namespace derfkit {

inline constexpr const char* kVersion = "0.1.0";

} // namespace derfkit
