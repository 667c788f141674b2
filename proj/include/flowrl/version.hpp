#pragma once

namespace flowrl {

inline constexpr const char* kArtifactVersion = "0.1.0";
inline constexpr int kFormatVersion = 1;

}  // namespace flowrl
