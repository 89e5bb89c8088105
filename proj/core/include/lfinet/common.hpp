#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace lfinet {

using index_t = std::int64_t;
using Shape = std::vector<index_t>;

inline index_t numel(const Shape& shape) {
    index_t n = 1;
    for (index_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

template <typename... Args>
[[noreturn]] inline void fail(Args&&... parts) {
    std::ostringstream os;
    (os << ... << parts);
    throw std::invalid_argument(os.str());
}

template <typename... Args>
inline void require(bool cond, Args&&... parts) {
    if (!cond) fail(std::forward<Args>(parts)...);
}

// Caps OpenMP workers from LFINET_THREADS and pins BLAS to one thread so
// parallel sections never nest into threaded GEMM calls.
void init_threads();

}  // namespace lfinet
