#pragma once

// Shared helpers for the test suites: independent brute-force oracles and a
// central finite-difference harness. Everything here is deliberately written
// as plainly as possible and stays independent of the library's optimized
// code paths.

#include <cmath>
#include <functional>
#include <vector>

#include "voxmed/rng.hpp"
#include "voxmed/tensor.hpp"

namespace voxmed::testing {

template <typename Container>
void fill_uniform(Container& c, Rng& rng, double lo = -1.0, double hi = 1.0) {
    for (auto& v : c) v = static_cast<typename Container::value_type>(rng.uniform(lo, hi));
}

template <typename T>
void randomize(BlockT<T>& b, Rng& rng, double lo = -1.0, double hi = 1.0) {
    fill_uniform(b.data, rng, lo, hi);
}

template <typename T>
void randomize(Kernel4DT<T>& k, Rng& rng, double lo = -1.0, double hi = 1.0) {
    fill_uniform(k.weights, rng, lo, hi);
    fill_uniform(k.bias, rng, lo, hi);
}

// Six-nested-loop direct summation; accumulates in double regardless of T.
template <typename T>
BlockT<T> conv3d_oracle(const BlockT<T>& in, const Kernel4DT<T>& k) {
    const Dims3 od = in.dims - k.kdims + Dims3(1, 1, 1);
    BlockT<T> out(in.batch, k.fm_out, od);
    for (i64 b = 0; b < in.batch; ++b)
        for (i64 o = 0; o < k.fm_out; ++o)
            for (i64 z = 0; z < od.z; ++z)
                for (i64 y = 0; y < od.y; ++y)
                    for (i64 x = 0; x < od.x; ++x) {
                        double acc = static_cast<double>(k.bias[static_cast<std::size_t>(o)]);
                        for (i64 c = 0; c < k.fm_in; ++c)
                            for (i64 kz = 0; kz < k.kdims.z; ++kz)
                                for (i64 ky = 0; ky < k.kdims.y; ++ky)
                                    for (i64 kx = 0; kx < k.kdims.x; ++kx)
                                        acc += static_cast<double>(
                                                   k.w(o, c, kx, ky, kz)) *
                                               static_cast<double>(
                                                   in.at(b, c, x + kx, y + ky, z + kz));
                        out.at(b, o, x, y, z) = static_cast<T>(acc);
                    }
    return out;
}

template <typename T>
double max_abs_diff(const std::vector<T>& a, const std::vector<T>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    return m;
}

template <typename T>
double rel_error(const std::vector<T>& got, const std::vector<T>& want) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < got.size(); ++i) {
        const double d = static_cast<double>(got[i]) - static_cast<double>(want[i]);
        num += d * d;
        den += static_cast<double>(want[i]) * static_cast<double>(want[i]);
    }
    return den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
}

// Central finite differences on a scalar function of one flattened parameter
// array. Checks the analytic gradient on up to `samples` randomly chosen
// entries and returns the worst relative error.
inline double check_gradient(std::vector<double>& params,
                             const std::function<double()>& eval,
                             const std::vector<double>& analytic_grad, Rng& rng,
                             std::size_t samples = 24, double h = 1e-5) {
    double worst = 0.0;
    const std::size_t n = params.size();
    samples = std::min(samples, n);
    std::vector<std::size_t> picks;
    for (std::size_t s = 0; s < samples; ++s)
        picks.push_back(static_cast<std::size_t>(rng.uniform_index(n)));
    for (std::size_t i : picks) {
        const double saved = params[i];
        params[i] = saved + h;
        const double fp = eval();
        params[i] = saved - h;
        const double fm = eval();
        params[i] = saved;
        const double fd = (fp - fm) / (2.0 * h);
        const double an = analytic_grad[i];
        const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
        worst = std::max(worst, std::abs(fd - an) / denom);
    }
    return worst;
}

}  // namespace voxmed::testing
