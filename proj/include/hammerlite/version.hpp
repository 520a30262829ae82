#pragma once

namespace hammerlite {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace hammerlite
