#pragma once

// Small hand-rolled generators for property tests.

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

#include "arb/numkit.hpp"

namespace gen {

struct Source {
    std::mt19937_64 eng;
    explicit Source(std::uint64_t seed) : eng(seed) {}

    double real(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(eng); }
    int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(eng); }
    double gauss() { return std::normal_distribution<double>(0.0, 1.0)(eng); }
    bool coin() { return integer(0, 1) == 1; }

    // Values drawn from a small grid so ties are common.
    std::vector<double> tied(std::size_t n, int levels) {
        std::vector<double> v(n);
        for (auto& x : v) x = integer(0, levels - 1) * 0.5;
        return v;
    }

    std::vector<double> reals(std::size_t n, double lo = -5, double hi = 5) {
        std::vector<double> v(n);
        for (auto& x : v) x = real(lo, hi);
        return v;
    }

    // Binary labels with at least one of each class.
    std::vector<int> labels(std::size_t n) {
        std::vector<int> y(n);
        for (auto& v : y) v = integer(0, 1);
        y[0] = 0;
        y[1] = 1;
        std::shuffle(y.begin(), y.end(), eng);
        return y;
    }

    arb::Matrix matrix(std::size_t r, std::size_t c, double scale = 1.0) {
        arb::Matrix m(r, c);
        for (double& x : m.data()) x = scale * gauss();
        return m;
    }
};

}  // namespace gen
