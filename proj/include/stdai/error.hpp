#pragma once

#include <stdexcept>
#include <string>

namespace stdai {

// All library failures surface as stdai::Error carrying a message that
// names the operation and the offending values.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw Error(msg);
}

}  // namespace stdai
