#include "voxmed/permutohedral.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace voxmed {

namespace {

// Open-addressing table mapping lattice keys (d int16 coordinates) to dense
// ids in insertion order.
class KeyTable {
public:
    KeyTable(i64 key_size, i64 expected)
        : key_size_(key_size) {
        capacity_ = 16;
        while (capacity_ < 2 * expected) capacity_ *= 2;
        slots_.assign(static_cast<std::size_t>(capacity_), -1);
        keys_.reserve(static_cast<std::size_t>(expected * key_size));
    }

    std::int32_t find_or_insert(const std::int16_t* key, bool insert) {
        std::size_t h = hash(key) & static_cast<std::size_t>(capacity_ - 1);
        for (;;) {
            const std::int32_t slot = slots_[h];
            if (slot == -1) {
                if (!insert) return -1;
                const std::int32_t id = static_cast<std::int32_t>(size());
                keys_.insert(keys_.end(), key, key + key_size_);
                slots_[h] = id;
                return id;
            }
            if (std::memcmp(keys_.data() + static_cast<std::size_t>(slot) * key_size_, key,
                            static_cast<std::size_t>(key_size_) * sizeof(std::int16_t)) == 0)
                return slot;
            h = (h + 1) & static_cast<std::size_t>(capacity_ - 1);
        }
    }

    i64 size() const { return static_cast<i64>(keys_.size()) / key_size_; }
    const std::int16_t* key(i64 id) const {
        return keys_.data() + static_cast<std::size_t>(id * key_size_);
    }

private:
    std::size_t hash(const std::int16_t* key) const {
        std::size_t h = 0;
        for (i64 i = 0; i < key_size_; ++i) {
            h += static_cast<std::size_t>(static_cast<std::uint16_t>(key[i]));
            h *= 2531011ULL;
        }
        return h;
    }

    i64 key_size_;
    i64 capacity_;
    std::vector<std::int32_t> slots_;
    std::vector<std::int16_t> keys_;
};

}  // namespace

PermutohedralLattice::PermutohedralLattice(std::span<const float> features, i64 n,
                                           i64 feature_dim)
    : n_(n), d_(feature_dim) {
    check(feature_dim >= 1 && feature_dim <= kMaxFeatureDim, "permutohedral: feature dim ",
          feature_dim, " outside [1, ", kMaxFeatureDim, "]");
    check(static_cast<i64>(features.size()) == n * feature_dim,
          "permutohedral: feature array size mismatch");

    const i64 d = d_;
    offsets_.assign(static_cast<std::size_t>(n * (d + 1)), 0);
    barycentric_.assign(static_cast<std::size_t>(n * (d + 1)), 0.0f);

    // canonical simplex coordinates
    std::vector<std::int16_t> canonical(static_cast<std::size_t>((d + 1) * (d + 1)));
    for (i64 i = 0; i <= d; ++i) {
        for (i64 j = 0; j <= d - i; ++j)
            canonical[static_cast<std::size_t>(i * (d + 1) + j)] = static_cast<std::int16_t>(i);
        for (i64 j = d - i + 1; j <= d; ++j)
            canonical[static_cast<std::size_t>(i * (d + 1) + j)] =
                static_cast<std::int16_t>(i - (d + 1));
    }

    // diagonal of the elevation matrix, scaled for unit-variance blur
    const double inv_std_dev = std::sqrt(2.0 / 3.0) * static_cast<double>(d + 1);
    std::vector<double> scale(static_cast<std::size_t>(d));
    for (i64 i = 0; i < d; ++i)
        scale[static_cast<std::size_t>(i)] =
            inv_std_dev / std::sqrt(static_cast<double>((i + 1) * (i + 2)));

    KeyTable table(d, n * (d + 1));
    std::vector<double> elevated(static_cast<std::size_t>(d + 1));
    std::vector<double> rem0(static_cast<std::size_t>(d + 1));
    std::vector<i64> rank(static_cast<std::size_t>(d + 1));
    std::vector<double> bary(static_cast<std::size_t>(d + 2));
    std::vector<std::int16_t> key(static_cast<std::size_t>(d));

    for (i64 k = 0; k < n; ++k) {
        const float* f = features.data() + k * d;

        // elevate onto the hyperplane sum(x) = 0
        double sm = 0.0;
        for (i64 j = d; j > 0; --j) {
            const double cf = static_cast<double>(f[j - 1]) * scale[static_cast<std::size_t>(j - 1)];
            elevated[static_cast<std::size_t>(j)] = sm - static_cast<double>(j) * cf;
            sm += cf;
        }
        elevated[0] = sm;

        // nearest zero-colored lattice point
        const double down = 1.0 / static_cast<double>(d + 1);
        i64 sum = 0;
        for (i64 i = 0; i <= d; ++i) {
            const double v = elevated[static_cast<std::size_t>(i)] * down;
            const i64 r = static_cast<i64>(std::llround(v));
            rem0[static_cast<std::size_t>(i)] = static_cast<double>(r * (d + 1));
            sum += r;
        }

        // rank the residuals
        std::fill(rank.begin(), rank.end(), 0);
        for (i64 i = 0; i < d; ++i) {
            const double di = elevated[static_cast<std::size_t>(i)] -
                              rem0[static_cast<std::size_t>(i)];
            for (i64 j = i + 1; j <= d; ++j) {
                const double dj = elevated[static_cast<std::size_t>(j)] -
                                  rem0[static_cast<std::size_t>(j)];
                if (di < dj)
                    ++rank[static_cast<std::size_t>(i)];
                else
                    ++rank[static_cast<std::size_t>(j)];
            }
        }

        // walk back onto the hyperplane if rounding left it
        for (i64 i = 0; i <= d; ++i) {
            rank[static_cast<std::size_t>(i)] += sum;
            if (rank[static_cast<std::size_t>(i)] < 0) {
                rank[static_cast<std::size_t>(i)] += d + 1;
                rem0[static_cast<std::size_t>(i)] += static_cast<double>(d + 1);
            } else if (rank[static_cast<std::size_t>(i)] > d) {
                rank[static_cast<std::size_t>(i)] -= d + 1;
                rem0[static_cast<std::size_t>(i)] -= static_cast<double>(d + 1);
            }
        }

        // barycentric coordinates
        std::fill(bary.begin(), bary.end(), 0.0);
        for (i64 i = 0; i <= d; ++i) {
            const double v = (elevated[static_cast<std::size_t>(i)] -
                              rem0[static_cast<std::size_t>(i)]) *
                             down;
            bary[static_cast<std::size_t>(d - rank[static_cast<std::size_t>(i)])] += v;
            bary[static_cast<std::size_t>(d - rank[static_cast<std::size_t>(i)] + 1)] -= v;
        }
        bary[0] += 1.0 + bary[static_cast<std::size_t>(d + 1)];

        // register the d+1 simplex vertices
        for (i64 rem = 0; rem <= d; ++rem) {
            for (i64 i = 0; i < d; ++i)
                key[static_cast<std::size_t>(i)] = static_cast<std::int16_t>(
                    static_cast<i64>(rem0[static_cast<std::size_t>(i)]) +
                    canonical[static_cast<std::size_t>(rem * (d + 1) +
                                                       rank[static_cast<std::size_t>(i)])]);
            offsets_[static_cast<std::size_t>(k * (d + 1) + rem)] =
                table.find_or_insert(key.data(), true);
            barycentric_[static_cast<std::size_t>(k * (d + 1) + rem)] =
                static_cast<float>(bary[static_cast<std::size_t>(rem)]);
        }
    }

    m_ = table.size();

    // blur neighbors along each lattice axis
    blur_lo_.assign(static_cast<std::size_t>((d + 1) * m_), -1);
    blur_hi_.assign(static_cast<std::size_t>((d + 1) * m_), -1);
    std::vector<std::int16_t> nkey(static_cast<std::size_t>(d));
    for (i64 j = 0; j <= d; ++j)
        for (i64 i = 0; i < m_; ++i) {
            const std::int16_t* base = table.key(i);
            for (i64 k2 = 0; k2 < d; ++k2)
                nkey[static_cast<std::size_t>(k2)] = static_cast<std::int16_t>(base[k2] - 1);
            if (j < d) nkey[static_cast<std::size_t>(j)] = static_cast<std::int16_t>(base[j] + d);
            blur_lo_[static_cast<std::size_t>(j * m_ + i)] =
                table.find_or_insert(nkey.data(), false);
            for (i64 k2 = 0; k2 < d; ++k2)
                nkey[static_cast<std::size_t>(k2)] = static_cast<std::int16_t>(base[k2] + 1);
            if (j < d) nkey[static_cast<std::size_t>(j)] = static_cast<std::int16_t>(base[j] - d);
            blur_hi_[static_cast<std::size_t>(j * m_ + i)] =
                table.find_or_insert(nkey.data(), false);
        }
}

void PermutohedralLattice::compute(std::span<const float> in, i64 value_dim,
                                   std::span<float> out) const {
    check(static_cast<i64>(in.size()) == n_ * value_dim &&
              static_cast<i64>(out.size()) == n_ * value_dim,
          "permutohedral compute: value array size mismatch");
    const i64 d = d_;
    // slot 0 is a zero sink for missing blur neighbors
    std::vector<double> values(static_cast<std::size_t>((m_ + 1) * value_dim), 0.0);
    std::vector<double> fresh(static_cast<std::size_t>((m_ + 1) * value_dim), 0.0);

    // splat
    for (i64 k = 0; k < n_; ++k)
        for (i64 r = 0; r <= d; ++r) {
            const i64 o = offsets_[static_cast<std::size_t>(k * (d + 1) + r)] + 1;
            const double w = barycentric_[static_cast<std::size_t>(k * (d + 1) + r)];
            for (i64 c = 0; c < value_dim; ++c)
                values[static_cast<std::size_t>(o * value_dim + c)] +=
                    w * static_cast<double>(in[static_cast<std::size_t>(k * value_dim + c)]);
        }

    // blur along each axis
    for (i64 j = 0; j <= d; ++j) {
        for (i64 i = 0; i < m_; ++i) {
            const i64 lo = blur_lo_[static_cast<std::size_t>(j * m_ + i)] + 1;
            const i64 hi = blur_hi_[static_cast<std::size_t>(j * m_ + i)] + 1;
            const double* vc = values.data() + (i + 1) * value_dim;
            const double* vl = values.data() + lo * value_dim;
            const double* vh = values.data() + hi * value_dim;
            double* dst = fresh.data() + (i + 1) * value_dim;
            for (i64 c = 0; c < value_dim; ++c) dst[c] = vc[c] + 0.5 * (vl[c] + vh[c]);
        }
        std::swap(values, fresh);
    }

    // slice, with the analytic amplitude correction of the lattice blur
    const double alpha = 1.0 / (1.0 + std::pow(2.0, -static_cast<double>(d)));
    for (i64 k = 0; k < n_; ++k) {
        for (i64 c = 0; c < value_dim; ++c) {
            double acc = 0.0;
            for (i64 r = 0; r <= d; ++r) {
                const i64 o = offsets_[static_cast<std::size_t>(k * (d + 1) + r)] + 1;
                acc += static_cast<double>(
                           barycentric_[static_cast<std::size_t>(k * (d + 1) + r)]) *
                       values[static_cast<std::size_t>(o * value_dim + c)];
            }
            out[static_cast<std::size_t>(k * value_dim + c)] = static_cast<float>(acc * alpha);
        }
    }
}

void permutohedral_filter(std::span<const float> features, i64 n, i64 feature_dim,
                          std::span<const float> values, i64 value_dim, std::span<float> out) {
    PermutohedralLattice lattice(features, n, feature_dim);
    lattice.compute(values, value_dim, out);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= values[i];
}

}  // namespace voxmed
