#pragma once

#include <cstddef>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace lungseg {

// Rank-4 NCHW shape. Vectors and matrices ride along as degenerate dims,
// e.g. a per-channel bias is (1,C,1,1) and a dense weight matrix (1,1,D,M).
struct Shape {
    int n = 1;
    int c = 1;
    int h = 1;
    int w = 1;

    std::size_t numel() const {
        return static_cast<std::size_t>(n) * c * h * w;
    }
    std::size_t index(int in, int ic, int ih, int iw) const {
        return ((static_cast<std::size_t>(in) * c + ic) * h + ih) * w + iw;
    }
    bool operator==(const Shape& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }
    bool operator!=(const Shape& o) const { return !(*this == o); }

    std::string str() const {
        std::ostringstream os;
        os << "(" << n << "," << c << "," << h << "," << w << ")";
        return os.str();
    }
};

[[noreturn]] inline void fail_shape(const std::string& msg) {
    throw std::invalid_argument(msg);
}

inline void require(bool ok, const std::string& msg) {
    if (!ok) fail_shape(msg);
}

}  // namespace lungseg
