#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "voxmed/tensor.hpp"

namespace voxmed {

// Permutohedral lattice for fast approximate high-dimensional Gaussian
// filtering (splat, blur along each lattice axis, slice back). Built once per
// feature set, then usable for any number of value channels. The filtered
// result approximates sum_j exp(-|f_i - f_j|^2 / 2) v_j including the j = i
// term; callers wanting the strict off-diagonal sum subtract the input.
class PermutohedralLattice {
public:
    static constexpr i64 kMaxFeatureDim = 8;

    PermutohedralLattice(std::span<const float> features, i64 n, i64 feature_dim);

    // in/out are n x value_dim, voxel-major. Accumulation runs in double.
    void compute(std::span<const float> in, i64 value_dim, std::span<float> out) const;

    i64 size() const { return n_; }
    i64 lattice_points() const { return m_; }

private:
    i64 n_ = 0;
    i64 d_ = 0;
    i64 m_ = 0;
    std::vector<std::int32_t> offsets_;    // n x (d+1) lattice point ids
    std::vector<float> barycentric_;       // n x (d+1)
    std::vector<std::int32_t> blur_lo_, blur_hi_;  // (d+1) x m neighbor ids (-1 = none)
};

// Off-diagonal Gaussian filtering through the lattice: the self term is
// subtracted so the result matches gaussian_filter_exact up to lattice error.
void permutohedral_filter(std::span<const float> features, i64 n, i64 feature_dim,
                          std::span<const float> values, i64 value_dim, std::span<float> out);

}  // namespace voxmed
