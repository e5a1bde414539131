#pragma once

namespace menet {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace menet
