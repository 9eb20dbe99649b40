#pragma once

#include <string_view>

namespace crosspoint {

inline constexpr std::string_view version = "crosspoint 0.1.0";

}  // namespace crosspoint
