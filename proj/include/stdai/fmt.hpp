#pragma once

#include <string>

namespace stdai {

// Shortest round-trip decimal form, locale independent. Infinities come out
// as "inf"/"-inf" so CSV consumers see a stable token.
std::string num_str(double v);

}  // namespace stdai
