#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace voxmed {

using i64 = std::int64_t;

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {
inline void append_all(std::ostringstream&) {}
template <typename T, typename... Rest>
void append_all(std::ostringstream& os, const T& v, const Rest&... rest) {
    os << v;
    append_all(os, rest...);
}
}  // namespace detail

template <typename... Args>
[[noreturn]] void fail(const Args&... args) {
    std::ostringstream os;
    detail::append_all(os, args...);
    throw Error(os.str());
}

template <typename... Args>
void check(bool cond, const Args&... args) {
    if (!cond) fail(args...);
}

// Spatial extent along x, y, z.
struct Dims3 {
    i64 x = 0, y = 0, z = 0;

    constexpr Dims3() = default;
    constexpr Dims3(i64 x_, i64 y_, i64 z_) : x(x_), y(y_), z(z_) {}
    constexpr explicit Dims3(i64 iso) : x(iso), y(iso), z(iso) {}

    i64 voxels() const { return x * y * z; }
    i64 operator[](int axis) const { return axis == 0 ? x : (axis == 1 ? y : z); }
    i64& operator[](int axis) { return axis == 0 ? x : (axis == 1 ? y : z); }
    bool operator==(const Dims3&) const = default;

    friend Dims3 operator+(Dims3 a, Dims3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
    friend Dims3 operator-(Dims3 a, Dims3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
    friend Dims3 operator*(Dims3 a, i64 s) { return {a.x * s, a.y * s, a.z * s}; }
    bool all_ge(Dims3 o) const { return x >= o.x && y >= o.y && z >= o.z; }
    bool all_positive() const { return x > 0 && y > 0 && z > 0; }
};

std::string to_string(Dims3 d);

// Multi-channel 3D scalar grid. Memory order: channel slowest, then z, y,
// and x fastest (matches NIfTI voxel order per channel).
template <typename T>
struct VolumeT {
    i64 channels = 0;
    Dims3 dims;
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    std::vector<T> data;

    VolumeT() = default;
    VolumeT(i64 channels_, Dims3 dims_, std::array<double, 3> spacing_ = {1.0, 1.0, 1.0})
        : channels(channels_), dims(dims_), spacing(spacing_) {
        check(channels >= 1, "volume channel count must be >= 1, got ", channels);
        check(dims.all_positive(), "volume dims must be positive, got ", to_string(dims));
        check(spacing[0] > 0 && spacing[1] > 0 && spacing[2] > 0, "volume spacing must be positive");
        data.assign(static_cast<std::size_t>(channels * dims.voxels()), T{});
    }

    i64 index(i64 c, i64 x, i64 y, i64 z) const {
        return ((c * dims.z + z) * dims.y + y) * dims.x + x;
    }
    T& at(i64 c, i64 x, i64 y, i64 z) { return data[static_cast<std::size_t>(index(c, x, y, z))]; }
    const T& at(i64 c, i64 x, i64 y, i64 z) const {
        return data[static_cast<std::size_t>(index(c, x, y, z))];
    }
    std::span<T> channel(i64 c) {
        return std::span<T>(data).subspan(static_cast<std::size_t>(c * dims.voxels()),
                                          static_cast<std::size_t>(dims.voxels()));
    }
    std::span<const T> channel(i64 c) const {
        return std::span<const T>(data).subspan(static_cast<std::size_t>(c * dims.voxels()),
                                                static_cast<std::size_t>(dims.voxels()));
    }
};

using Volume = VolumeT<float>;
using LabelVolume = VolumeT<std::int32_t>;
using MaskVolume = VolumeT<std::uint8_t>;

// Batched feature maps: (batch, fm, x, y, z), x fastest.
template <typename T>
struct BlockT {
    i64 batch = 0;
    i64 fms = 0;
    Dims3 dims;
    std::vector<T> data;

    BlockT() = default;
    BlockT(i64 batch_, i64 fms_, Dims3 dims_) : batch(batch_), fms(fms_), dims(dims_) {
        check(batch >= 1 && fms >= 1, "block batch and fm counts must be >= 1");
        check(dims.all_positive(), "block dims must be positive, got ", to_string(dims));
        data.assign(static_cast<std::size_t>(batch * fms * dims.voxels()), T{});
    }

    i64 index(i64 b, i64 f, i64 x, i64 y, i64 z) const {
        return ((((b * fms + f) * dims.z + z) * dims.y + y) * dims.x + x);
    }
    T& at(i64 b, i64 f, i64 x, i64 y, i64 z) {
        return data[static_cast<std::size_t>(index(b, f, x, y, z))];
    }
    const T& at(i64 b, i64 f, i64 x, i64 y, i64 z) const {
        return data[static_cast<std::size_t>(index(b, f, x, y, z))];
    }
    T* fm_ptr(i64 b, i64 f) { return data.data() + (b * fms + f) * dims.voxels(); }
    const T* fm_ptr(i64 b, i64 f) const { return data.data() + (b * fms + f) * dims.voxels(); }
    bool same_shape(const BlockT& o) const {
        return batch == o.batch && fms == o.fms && dims == o.dims;
    }
};

using Block = BlockT<float>;

// 4D convolution kernel bank: weights (fm_out, fm_in, kx, ky, kz) with kx
// fastest, plus one bias per output FM. Kernel dims must be odd so every
// receptive field has a central voxel.
template <typename T>
struct Kernel4DT {
    i64 fm_out = 0;
    i64 fm_in = 0;
    Dims3 kdims;
    std::vector<T> weights;
    std::vector<T> bias;

    Kernel4DT() = default;
    Kernel4DT(i64 fm_out_, i64 fm_in_, Dims3 kdims_)
        : fm_out(fm_out_), fm_in(fm_in_), kdims(kdims_) {
        check(fm_out >= 1 && fm_in >= 1, "kernel fm counts must be >= 1");
        check(kdims.all_positive(), "kernel dims must be positive");
        check(kdims.x % 2 == 1 && kdims.y % 2 == 1 && kdims.z % 2 == 1,
              "kernel dims must be odd, got ", to_string(kdims));
        weights.assign(static_cast<std::size_t>(fm_out * fm_in * kdims.voxels()), T{});
        bias.assign(static_cast<std::size_t>(fm_out), T{});
    }

    i64 index(i64 o, i64 c, i64 kx, i64 ky, i64 kz) const {
        return ((((o * fm_in + c) * kdims.z + kz) * kdims.y + ky) * kdims.x + kx);
    }
    T& w(i64 o, i64 c, i64 kx, i64 ky, i64 kz) {
        return weights[static_cast<std::size_t>(index(o, c, kx, ky, kz))];
    }
    const T& w(i64 o, i64 c, i64 kx, i64 ky, i64 kz) const {
        return weights[static_cast<std::size_t>(index(o, c, kx, ky, kz))];
    }
};

using Kernel4D = Kernel4DT<float>;

// Valid (no padding, unit stride) cross-correlation. Output spatial dims
// shrink by kernel-1 per axis; one bias added per output FM.
template <typename T>
BlockT<T> conv3d_valid(const BlockT<T>& input, const Kernel4DT<T>& kernel);

template <typename T>
struct Conv3dGrads {
    BlockT<T> input;
    Kernel4DT<T> kernel;  // holds grad weights and grad bias
};

template <typename T>
Conv3dGrads<T> conv3d_backward(const BlockT<T>& input, const Kernel4DT<T>& kernel,
                               const BlockT<T>& grad_out);

// y = x for x > 0, slope[fm] * x otherwise.
template <typename T>
BlockT<T> prelu(const BlockT<T>& x, std::span<const T> slopes);

template <typename T>
struct PreluGrads {
    BlockT<T> input;
    std::vector<T> slopes;
};

template <typename T>
PreluGrads<T> prelu_backward(const BlockT<T>& x, std::span<const T> slopes,
                             const BlockT<T>& grad_out);

// Position-wise softmax over the FM axis, max-subtracted for stability.
template <typename T>
BlockT<T> softmax_channels(const BlockT<T>& logits);

// Each voxel replicated factor^3 times.
template <typename T>
BlockT<T> upsample_repeat(const BlockT<T>& block, i64 factor);

// Routes grad_out of an upsample_repeat back to the source voxels.
template <typename T>
BlockT<T> upsample_repeat_backward(const BlockT<T>& grad_out, i64 factor, Dims3 source_dims);

// Mean over factor^3 cells; border cells average whatever is available.
template <typename T>
VolumeT<T> downsample_block_average(const VolumeT<T>& vol, i64 factor);

// Centered spatial crop; when the margin is odd the extra voxel is dropped
// from the high-index side.
template <typename T>
BlockT<T> crop_center(const BlockT<T>& block, Dims3 target);

// Scatters grad_out of a centered crop back into a zero block of source dims.
template <typename T>
BlockT<T> crop_center_backward(const BlockT<T>& grad_out, Dims3 source_dims);

// FM axes concatenated in argument order.
template <typename T>
BlockT<T> concat_fms(const BlockT<T>& a, const BlockT<T>& b);

// Mirror padding (symmetric: index -1 maps to 0). pad may exceed the extent;
// the reflection folds as often as needed.
template <typename T>
VolumeT<T> pad_mirror(const VolumeT<T>& vol, Dims3 pad_lo, Dims3 pad_hi);

// Copies window [origin, origin+extent) of a volume into a single-batch block.
template <typename T>
void extract_window(const VolumeT<T>& vol, Dims3 origin, BlockT<T>& out, i64 batch_item);

// Flip a volume along one axis (0 = x, 1 = y, 2 = z).
template <typename T>
VolumeT<T> flip_axis(const VolumeT<T>& vol, int axis);

inline i64 floor_div(i64 a, i64 b) {
    i64 q = a / b, r = a % b;
    return (r != 0 && ((r < 0) != (b < 0))) ? q - 1 : q;
}

// Nearest integer to a/b, ties toward +inf.
inline i64 round_div(i64 a, i64 b) { return floor_div(2 * a + b, 2 * b); }

inline i64 ceil_div(i64 a, i64 b) { return -floor_div(-a, b); }

extern template struct VolumeT<float>;
extern template struct VolumeT<double>;
extern template struct BlockT<float>;
extern template struct BlockT<double>;
extern template struct Kernel4DT<float>;
extern template struct Kernel4DT<double>;

}  // namespace voxmed
