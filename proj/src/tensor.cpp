#include "voxmed/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace voxmed {

std::string to_string(Dims3 d) {
    std::ostringstream os;
    os << d.x << "x" << d.y << "x" << d.z;
    return os.str();
}

namespace {

const char* axis_name(int axis) { return axis == 0 ? "x" : (axis == 1 ? "y" : "z"); }

template <typename T>
void check_conv_shapes(const BlockT<T>& input, const Kernel4DT<T>& kernel) {
    check(input.fms == kernel.fm_in, "conv3d: input has ", input.fms,
          " feature maps but kernel expects ", kernel.fm_in);
    for (int axis = 0; axis < 3; ++axis) {
        check(input.dims[axis] >= kernel.kdims[axis], "conv3d: input extent ", input.dims[axis],
              " smaller than kernel extent ", kernel.kdims[axis], " along axis ", axis_name(axis));
    }
}

// Accumulates out_row[x] += w * in_row[x] over a contiguous run.
template <typename T>
inline void axpy_row(T* out_row, const T* in_row, T w, i64 n) {
#pragma omp simd
    for (i64 x = 0; x < n; ++x) out_row[x] += w * in_row[x];
}

template <typename T>
inline T dot_row(const T* a, const T* b, i64 n) {
    T acc{};
#pragma omp simd reduction(+ : acc)
    for (i64 x = 0; x < n; ++x) acc += a[x] * b[x];
    return acc;
}

}  // namespace

// Direct valid cross-correlation. The tap loop (c, kz, ky, kx) is strictly
// sequential per output element, so every voxel's value is a fixed-order
// reduction independent of how work is split across threads or tiles.
template <typename T>
BlockT<T> conv3d_valid(const BlockT<T>& input, const Kernel4DT<T>& kernel) {
    check_conv_shapes(input, kernel);
    const Dims3 od = input.dims - kernel.kdims + Dims3(1, 1, 1);
    BlockT<T> out(input.batch, kernel.fm_out, od);

    const Dims3 id = input.dims;
    const Dims3 kd = kernel.kdims;

#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (i64 b = 0; b < input.batch; ++b) {
        for (i64 o = 0; o < kernel.fm_out; ++o) {
            T* outfm = out.fm_ptr(b, o);
            std::fill(outfm, outfm + od.voxels(), kernel.bias[static_cast<std::size_t>(o)]);
            for (i64 c = 0; c < kernel.fm_in; ++c) {
                const T* infm = input.fm_ptr(b, c);
                for (i64 kz = 0; kz < kd.z; ++kz)
                    for (i64 ky = 0; ky < kd.y; ++ky)
                        for (i64 kx = 0; kx < kd.x; ++kx) {
                            const T w = kernel.w(o, c, kx, ky, kz);
                            if (w == T{}) continue;
                            for (i64 z = 0; z < od.z; ++z)
                                for (i64 y = 0; y < od.y; ++y) {
                                    const T* in_row =
                                        infm + ((z + kz) * id.y + (y + ky)) * id.x + kx;
                                    T* out_row = outfm + (z * od.y + y) * od.x;
                                    axpy_row(out_row, in_row, w, od.x);
                                }
                        }
            }
        }
    }
    return out;
}

template <typename T>
Conv3dGrads<T> conv3d_backward(const BlockT<T>& input, const Kernel4DT<T>& kernel,
                               const BlockT<T>& grad_out) {
    check_conv_shapes(input, kernel);
    const Dims3 od = input.dims - kernel.kdims + Dims3(1, 1, 1);
    check(grad_out.batch == input.batch && grad_out.fms == kernel.fm_out && grad_out.dims == od,
          "conv3d_backward: grad_out shape ", to_string(grad_out.dims), " (", grad_out.fms,
          " fms) does not match forward output ", to_string(od), " (", kernel.fm_out, " fms)");

    Conv3dGrads<T> grads;
    grads.input = BlockT<T>(input.batch, input.fms, input.dims);
    grads.kernel = Kernel4DT<T>(kernel.fm_out, kernel.fm_in, kernel.kdims);

    const Dims3 id = input.dims;
    const Dims3 kd = kernel.kdims;
    const i64 taps = kd.voxels();

    // Per-item weight/bias gradients are reduced sequentially over the batch
    // afterwards so the result does not depend on the thread count.
    std::vector<std::vector<T>> item_gw(static_cast<std::size_t>(input.batch));
    std::vector<std::vector<T>> item_gb(static_cast<std::size_t>(input.batch));

#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (i64 b = 0; b < input.batch; ++b) {
        auto& gw = item_gw[static_cast<std::size_t>(b)];
        auto& gb = item_gb[static_cast<std::size_t>(b)];
        gw.assign(kernel.weights.size(), T{});
        gb.assign(kernel.bias.size(), T{});

        for (i64 o = 0; o < kernel.fm_out; ++o) {
            const T* gofm = grad_out.fm_ptr(b, o);
            T bias_acc{};
            for (i64 v = 0; v < od.voxels(); ++v) bias_acc += gofm[v];
            gb[static_cast<std::size_t>(o)] = bias_acc;

            for (i64 c = 0; c < kernel.fm_in; ++c) {
                const T* infm = input.fm_ptr(b, c);
                T* gin = grads.input.fm_ptr(b, c);
                T* gw_oc = gw.data() + (o * kernel.fm_in + c) * taps;
                for (i64 kz = 0; kz < kd.z; ++kz)
                    for (i64 ky = 0; ky < kd.y; ++ky)
                        for (i64 kx = 0; kx < kd.x; ++kx) {
                            const T w = kernel.w(o, c, kx, ky, kz);
                            T wacc{};
                            for (i64 z = 0; z < od.z; ++z)
                                for (i64 y = 0; y < od.y; ++y) {
                                    const T* go_row = gofm + (z * od.y + y) * od.x;
                                    const i64 in_off =
                                        ((z + kz) * id.y + (y + ky)) * id.x + kx;
                                    wacc += dot_row(go_row, infm + in_off, od.x);
                                    axpy_row(gin + in_off, go_row, w, od.x);
                                }
                            gw_oc[(kz * kd.y + ky) * kd.x + kx] = wacc;
                        }
            }
        }
    }

    for (i64 b = 0; b < input.batch; ++b) {
        const auto& gw = item_gw[static_cast<std::size_t>(b)];
        const auto& gb = item_gb[static_cast<std::size_t>(b)];
        for (std::size_t i = 0; i < gw.size(); ++i) grads.kernel.weights[i] += gw[i];
        for (std::size_t i = 0; i < gb.size(); ++i) grads.kernel.bias[i] += gb[i];
    }
    return grads;
}

template <typename T>
BlockT<T> prelu(const BlockT<T>& x, std::span<const T> slopes) {
    check(static_cast<i64>(slopes.size()) == x.fms, "prelu: ", slopes.size(), " slopes for ",
          x.fms, " feature maps");
    BlockT<T> y(x.batch, x.fms, x.dims);
    const i64 n = x.dims.voxels();
    for (i64 b = 0; b < x.batch; ++b)
        for (i64 f = 0; f < x.fms; ++f) {
            const T s = slopes[static_cast<std::size_t>(f)];
            const T* xi = x.fm_ptr(b, f);
            T* yi = y.fm_ptr(b, f);
            for (i64 v = 0; v < n; ++v) yi[v] = xi[v] > T{} ? xi[v] : s * xi[v];
        }
    return y;
}

template <typename T>
PreluGrads<T> prelu_backward(const BlockT<T>& x, std::span<const T> slopes,
                             const BlockT<T>& grad_out) {
    check(static_cast<i64>(slopes.size()) == x.fms, "prelu_backward: slope count mismatch");
    check(grad_out.same_shape(x), "prelu_backward: grad_out shape mismatch");
    PreluGrads<T> g;
    g.input = BlockT<T>(x.batch, x.fms, x.dims);
    g.slopes.assign(slopes.size(), T{});
    const i64 n = x.dims.voxels();
    for (i64 b = 0; b < x.batch; ++b)
        for (i64 f = 0; f < x.fms; ++f) {
            const T s = slopes[static_cast<std::size_t>(f)];
            const T* xi = x.fm_ptr(b, f);
            const T* go = grad_out.fm_ptr(b, f);
            T* gi = g.input.fm_ptr(b, f);
            T sacc{};
            for (i64 v = 0; v < n; ++v) {
                if (xi[v] > T{}) {
                    gi[v] = go[v];
                } else {
                    gi[v] = s * go[v];
                    sacc += go[v] * xi[v];
                }
            }
            g.slopes[static_cast<std::size_t>(f)] += sacc;
        }
    return g;
}

template <typename T>
BlockT<T> softmax_channels(const BlockT<T>& logits) {
    check(logits.fms >= 2, "softmax_channels: needs at least 2 classes, got ", logits.fms);
    BlockT<T> p(logits.batch, logits.fms, logits.dims);
    const i64 n = logits.dims.voxels();
    const i64 stride = n;  // fm stride within one batch item
    for (i64 b = 0; b < logits.batch; ++b) {
        const T* in = logits.fm_ptr(b, 0);
        T* out = p.fm_ptr(b, 0);
        for (i64 v = 0; v < n; ++v) {
            T m = in[v];
            for (i64 f = 1; f < logits.fms; ++f) m = std::max(m, in[f * stride + v]);
            T sum{};
            for (i64 f = 0; f < logits.fms; ++f) {
                const T e = std::exp(in[f * stride + v] - m);
                out[f * stride + v] = e;
                sum += e;
            }
            const T inv = T{1} / sum;
            for (i64 f = 0; f < logits.fms; ++f) out[f * stride + v] *= inv;
        }
    }
    return p;
}

template <typename T>
BlockT<T> upsample_repeat(const BlockT<T>& block, i64 factor) {
    check(factor >= 1, "upsample_repeat: factor must be >= 1, got ", factor);
    if (factor == 1) return block;
    BlockT<T> out(block.batch, block.fms, block.dims * factor);
    for (i64 b = 0; b < block.batch; ++b)
        for (i64 f = 0; f < block.fms; ++f) {
            const T* src = block.fm_ptr(b, f);
            T* dst = out.fm_ptr(b, f);
            for (i64 z = 0; z < out.dims.z; ++z)
                for (i64 y = 0; y < out.dims.y; ++y)
                    for (i64 x = 0; x < out.dims.x; ++x)
                        dst[(z * out.dims.y + y) * out.dims.x + x] =
                            src[((z / factor) * block.dims.y + y / factor) * block.dims.x +
                                x / factor];
        }
    return out;
}

template <typename T>
BlockT<T> upsample_repeat_backward(const BlockT<T>& grad_out, i64 factor, Dims3 source_dims) {
    check(factor >= 1, "upsample_repeat_backward: factor must be >= 1");
    check(grad_out.dims == source_dims * factor, "upsample_repeat_backward: dims mismatch");
    BlockT<T> g(grad_out.batch, grad_out.fms, source_dims);
    for (i64 b = 0; b < grad_out.batch; ++b)
        for (i64 f = 0; f < grad_out.fms; ++f) {
            const T* go = grad_out.fm_ptr(b, f);
            T* gi = g.fm_ptr(b, f);
            for (i64 z = 0; z < grad_out.dims.z; ++z)
                for (i64 y = 0; y < grad_out.dims.y; ++y)
                    for (i64 x = 0; x < grad_out.dims.x; ++x)
                        gi[((z / factor) * source_dims.y + y / factor) * source_dims.x +
                           x / factor] += go[(z * grad_out.dims.y + y) * grad_out.dims.x + x];
        }
    return g;
}

template <typename T>
VolumeT<T> downsample_block_average(const VolumeT<T>& vol, i64 factor) {
    check(factor >= 1, "downsample_block_average: factor must be >= 1, got ", factor);
    if (factor == 1) return vol;
    const Dims3 od{ceil_div(vol.dims.x, factor), ceil_div(vol.dims.y, factor),
                   ceil_div(vol.dims.z, factor)};
    VolumeT<T> out(vol.channels, od,
                   {vol.spacing[0] * static_cast<double>(factor),
                    vol.spacing[1] * static_cast<double>(factor),
                    vol.spacing[2] * static_cast<double>(factor)});
    for (i64 c = 0; c < vol.channels; ++c)
        for (i64 z = 0; z < od.z; ++z)
            for (i64 y = 0; y < od.y; ++y)
                for (i64 x = 0; x < od.x; ++x) {
                    const i64 x1 = std::min(vol.dims.x, (x + 1) * factor);
                    const i64 y1 = std::min(vol.dims.y, (y + 1) * factor);
                    const i64 z1 = std::min(vol.dims.z, (z + 1) * factor);
                    double acc = 0.0;
                    i64 count = 0;
                    for (i64 zz = z * factor; zz < z1; ++zz)
                        for (i64 yy = y * factor; yy < y1; ++yy)
                            for (i64 xx = x * factor; xx < x1; ++xx) {
                                acc += static_cast<double>(vol.at(c, xx, yy, zz));
                                ++count;
                            }
                    out.at(c, x, y, z) = static_cast<T>(acc / static_cast<double>(count));
                }
    return out;
}

template <typename T>
BlockT<T> crop_center(const BlockT<T>& block, Dims3 target) {
    check(target.all_positive(), "crop_center: target dims must be positive");
    check(block.dims.all_ge(target), "crop_center: target ", to_string(target),
          " exceeds source ", to_string(block.dims));
    if (block.dims == target) return block;
    const Dims3 off{(block.dims.x - target.x) / 2, (block.dims.y - target.y) / 2,
                    (block.dims.z - target.z) / 2};
    BlockT<T> out(block.batch, block.fms, target);
    for (i64 b = 0; b < block.batch; ++b)
        for (i64 f = 0; f < block.fms; ++f) {
            const T* src = block.fm_ptr(b, f);
            T* dst = out.fm_ptr(b, f);
            for (i64 z = 0; z < target.z; ++z)
                for (i64 y = 0; y < target.y; ++y)
                    std::memcpy(dst + (z * target.y + y) * target.x,
                                src + ((z + off.z) * block.dims.y + (y + off.y)) * block.dims.x +
                                    off.x,
                                static_cast<std::size_t>(target.x) * sizeof(T));
        }
    return out;
}

template <typename T>
BlockT<T> crop_center_backward(const BlockT<T>& grad_out, Dims3 source_dims) {
    check(source_dims.all_ge(grad_out.dims), "crop_center_backward: source smaller than crop");
    BlockT<T> g(grad_out.batch, grad_out.fms, source_dims);
    const Dims3 off{(source_dims.x - grad_out.dims.x) / 2, (source_dims.y - grad_out.dims.y) / 2,
                    (source_dims.z - grad_out.dims.z) / 2};
    for (i64 b = 0; b < grad_out.batch; ++b)
        for (i64 f = 0; f < grad_out.fms; ++f) {
            const T* src = grad_out.fm_ptr(b, f);
            T* dst = g.fm_ptr(b, f);
            for (i64 z = 0; z < grad_out.dims.z; ++z)
                for (i64 y = 0; y < grad_out.dims.y; ++y)
                    std::memcpy(dst + ((z + off.z) * source_dims.y + (y + off.y)) * source_dims.x +
                                    off.x,
                                src + (z * grad_out.dims.y + y) * grad_out.dims.x,
                                static_cast<std::size_t>(grad_out.dims.x) * sizeof(T));
        }
    return g;
}

template <typename T>
BlockT<T> concat_fms(const BlockT<T>& a, const BlockT<T>& b) {
    check(a.batch == b.batch, "concat_fms: batch mismatch (", a.batch, " vs ", b.batch, ")");
    check(a.dims == b.dims, "concat_fms: spatial dims mismatch (", to_string(a.dims), " vs ",
          to_string(b.dims), ")");
    BlockT<T> out(a.batch, a.fms + b.fms, a.dims);
    const std::size_t an = static_cast<std::size_t>(a.fms * a.dims.voxels());
    const std::size_t bn = static_cast<std::size_t>(b.fms * b.dims.voxels());
    for (i64 i = 0; i < a.batch; ++i) {
        std::memcpy(out.fm_ptr(i, 0), a.fm_ptr(i, 0), an * sizeof(T));
        std::memcpy(out.fm_ptr(i, a.fms), b.fm_ptr(i, 0), bn * sizeof(T));
    }
    return out;
}

namespace {
inline i64 mirror_index(i64 i, i64 n) {
    if (n == 1) return 0;
    const i64 period = 2 * n;
    i64 m = i % period;
    if (m < 0) m += period;
    return m < n ? m : period - 1 - m;
}
}  // namespace

template <typename T>
VolumeT<T> pad_mirror(const VolumeT<T>& vol, Dims3 pad_lo, Dims3 pad_hi) {
    check(pad_lo.x >= 0 && pad_lo.y >= 0 && pad_lo.z >= 0 && pad_hi.x >= 0 && pad_hi.y >= 0 &&
              pad_hi.z >= 0,
          "pad_mirror: negative padding");
    VolumeT<T> out(vol.channels, vol.dims + pad_lo + pad_hi, vol.spacing);
    for (i64 c = 0; c < vol.channels; ++c)
        for (i64 z = 0; z < out.dims.z; ++z) {
            const i64 sz = mirror_index(z - pad_lo.z, vol.dims.z);
            for (i64 y = 0; y < out.dims.y; ++y) {
                const i64 sy = mirror_index(y - pad_lo.y, vol.dims.y);
                for (i64 x = 0; x < out.dims.x; ++x)
                    out.at(c, x, y, z) = vol.at(c, mirror_index(x - pad_lo.x, vol.dims.x), sy, sz);
            }
        }
    return out;
}

template <typename T>
void extract_window(const VolumeT<T>& vol, Dims3 origin, BlockT<T>& out, i64 batch_item) {
    check(out.fms == vol.channels, "extract_window: channel count mismatch");
    check(origin.x >= 0 && origin.y >= 0 && origin.z >= 0 &&
              origin.x + out.dims.x <= vol.dims.x && origin.y + out.dims.y <= vol.dims.y &&
              origin.z + out.dims.z <= vol.dims.z,
          "extract_window: window [", to_string(origin), " + ", to_string(out.dims),
          ") outside volume ", to_string(vol.dims));
    for (i64 c = 0; c < vol.channels; ++c) {
        T* dst = out.fm_ptr(batch_item, c);
        for (i64 z = 0; z < out.dims.z; ++z)
            for (i64 y = 0; y < out.dims.y; ++y)
                std::memcpy(dst + (z * out.dims.y + y) * out.dims.x,
                            &vol.at(c, origin.x, origin.y + y, origin.z + z),
                            static_cast<std::size_t>(out.dims.x) * sizeof(T));
    }
}

template <typename T>
VolumeT<T> flip_axis(const VolumeT<T>& vol, int axis) {
    check(axis >= 0 && axis <= 2, "flip_axis: axis must be 0, 1 or 2");
    VolumeT<T> out(vol.channels, vol.dims, vol.spacing);
    for (i64 c = 0; c < vol.channels; ++c)
        for (i64 z = 0; z < vol.dims.z; ++z)
            for (i64 y = 0; y < vol.dims.y; ++y)
                for (i64 x = 0; x < vol.dims.x; ++x) {
                    const i64 sx = axis == 0 ? vol.dims.x - 1 - x : x;
                    const i64 sy = axis == 1 ? vol.dims.y - 1 - y : y;
                    const i64 sz = axis == 2 ? vol.dims.z - 1 - z : z;
                    out.at(c, x, y, z) = vol.at(c, sx, sy, sz);
                }
    return out;
}

template struct VolumeT<float>;
template struct VolumeT<double>;
template struct BlockT<float>;
template struct BlockT<double>;
template struct Kernel4DT<float>;
template struct Kernel4DT<double>;

#define VOXMED_INSTANTIATE_OPS(T)                                                              \
    template BlockT<T> conv3d_valid<T>(const BlockT<T>&, const Kernel4DT<T>&);                 \
    template Conv3dGrads<T> conv3d_backward<T>(const BlockT<T>&, const Kernel4DT<T>&,          \
                                               const BlockT<T>&);                              \
    template BlockT<T> prelu<T>(const BlockT<T>&, std::span<const T>);                         \
    template PreluGrads<T> prelu_backward<T>(const BlockT<T>&, std::span<const T>,             \
                                             const BlockT<T>&);                                \
    template BlockT<T> softmax_channels<T>(const BlockT<T>&);                                  \
    template BlockT<T> upsample_repeat<T>(const BlockT<T>&, i64);                              \
    template BlockT<T> upsample_repeat_backward<T>(const BlockT<T>&, i64, Dims3);              \
    template VolumeT<T> downsample_block_average<T>(const VolumeT<T>&, i64);                   \
    template BlockT<T> crop_center<T>(const BlockT<T>&, Dims3);                                \
    template BlockT<T> crop_center_backward<T>(const BlockT<T>&, Dims3);                       \
    template BlockT<T> concat_fms<T>(const BlockT<T>&, const BlockT<T>&);                      \
    template VolumeT<T> pad_mirror<T>(const VolumeT<T>&, Dims3, Dims3);                        \
    template void extract_window<T>(const VolumeT<T>&, Dims3, BlockT<T>&, i64);                \
    template VolumeT<T> flip_axis<T>(const VolumeT<T>&, int);

VOXMED_INSTANTIATE_OPS(float)
VOXMED_INSTANTIATE_OPS(double)
#undef VOXMED_INSTANTIATE_OPS

template VolumeT<std::int32_t> pad_mirror<std::int32_t>(const VolumeT<std::int32_t>&, Dims3,
                                                        Dims3);
template VolumeT<std::int32_t> flip_axis<std::int32_t>(const VolumeT<std::int32_t>&, int);
template VolumeT<std::uint8_t> pad_mirror<std::uint8_t>(const VolumeT<std::uint8_t>&, Dims3,
                                                        Dims3);
template VolumeT<std::uint8_t> flip_axis<std::uint8_t>(const VolumeT<std::uint8_t>&, int);
template struct VolumeT<std::int32_t>;
template struct VolumeT<std::uint8_t>;

}  // namespace voxmed
