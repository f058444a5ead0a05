#include "voxmed/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace voxmed {

void NetworkSpec::validate() const {
    check(!pathway_layers.empty(), "network spec: needs at least one pathway layer");
    check(input_channels >= 1, "network spec: input_channels must be >= 1");
    check(class_count >= 2, "network spec: class_count must be >= 2");
    check(downsample_factor >= 1, "network spec: downsample factor must be >= 1");
    auto check_layer = [](const LayerSpec& l, const char* what) {
        check(l.fm_count >= 1, "network spec: ", what, " fm_count must be >= 1");
        check(l.kernel.all_positive() && l.kernel.x % 2 == 1 && l.kernel.y % 2 == 1 &&
                  l.kernel.z % 2 == 1,
              "network spec: ", what, " kernel dims must be positive and odd");
        check(l.dropout_rate >= 0.0 && l.dropout_rate < 1.0,
              "network spec: ", what, " dropout rate must be in [0, 1)");
    };
    for (const auto& l : pathway_layers) check_layer(l, "pathway layer");
    for (const auto& l : hidden_layers) {
        check_layer(l, "hidden layer");
        check(l.kernel == Dims3(1), "network spec: hidden layers use 1x1x1 kernels");
    }
}

// --- Geometry ----------------------------------------------------------------

std::vector<Dims3> receptive_field(const NetworkSpec& spec) {
    check(!spec.pathway_layers.empty(), "receptive_field: no layers");
    std::vector<Dims3> phi;
    phi.reserve(spec.pathway_layers.size());
    Dims3 cur(1);
    for (const auto& l : spec.pathway_layers) {
        cur = cur + (l.kernel - Dims3(1));  // unit strides throughout
        phi.push_back(cur);
    }
    return phi;
}

Dims3 receptive_field_total(const NetworkSpec& spec) { return receptive_field(spec).back(); }

std::vector<LayerDims> fm_dims(const NetworkSpec& spec, Dims3 input_dims) {
    const Dims3 phi = receptive_field_total(spec);
    for (int axis = 0; axis < 3; ++axis)
        check(input_dims[axis] >= phi[axis], "fm_dims: input ", to_string(input_dims),
              " smaller than the receptive field; minimum input is ", to_string(phi));
    std::vector<LayerDims> out;
    Dims3 cur = input_dims;
    int idx = 1;
    for (const auto& l : spec.pathway_layers) {
        cur = cur - (l.kernel - Dims3(1));
        out.push_back({"path1/conv" + std::to_string(idx++), cur});
    }
    idx = 1;
    for (std::size_t i = 0; i < spec.hidden_layers.size(); ++i)
        out.push_back({"hidden" + std::to_string(idx++), cur});
    out.push_back({"classifier", cur});
    return out;
}

DualGeometry dual_pathway_geometry(const NetworkSpec& spec, Dims3 target_output_dims) {
    check(target_output_dims.all_positive(), "dual_pathway_geometry: output dims must be >= 1");
    const Dims3 phi = receptive_field_total(spec);
    DualGeometry g;
    g.input_hi = phi + target_output_dims - Dims3(1);
    if (spec.use_low_res_pathway) {
        const i64 f = spec.downsample_factor;
        g.out_lo = {ceil_div(target_output_dims.x, f), ceil_div(target_output_dims.y, f),
                    ceil_div(target_output_dims.z, f)};
        g.input_lo = phi + g.out_lo - Dims3(1);
        check(g.input_lo.all_positive() && g.out_lo.all_positive(),
              "dual_pathway_geometry: infeasible output dims ", to_string(target_output_dims));
    }
    return g;
}

namespace {

i64 kernel_weight_count(const LayerSpec& l, i64 fm_in) { return l.fm_count * fm_in * l.kernel.voxels(); }

LayerParamCount count_layer(const std::string& name, const LayerSpec& l, i64 fm_in) {
    LayerParamCount c;
    c.name = name;
    c.weights = kernel_weight_count(l, fm_in);
    c.biases = l.fm_count;
    c.bn = l.batch_norm ? 4 * l.fm_count : 0;
    c.prelu = l.activation == Activation::prelu ? l.fm_count : 0;
    return c;
}

}  // namespace

ParamCountReport param_count(const NetworkSpec& spec) {
    ParamCountReport r;
    auto add = [&r](LayerParamCount c) {
        r.total_weights += c.weights;
        r.total_other += c.biases + c.bn + c.prelu;
        r.layers.push_back(std::move(c));
    };
    for (i64 p = 0; p < spec.pathway_count(); ++p) {
        i64 fm_in = spec.input_channels;
        int idx = 1;
        for (const auto& l : spec.pathway_layers) {
            add(count_layer("path" + std::to_string(p + 1) + "/conv" + std::to_string(idx++), l,
                            fm_in));
            fm_in = l.fm_count;
        }
    }
    i64 fused = spec.pathway_layers.back().fm_count * spec.pathway_count();
    int idx = 1;
    for (const auto& l : spec.hidden_layers) {
        add(count_layer("hidden" + std::to_string(idx++), l, fused));
        fused = l.fm_count;
    }
    LayerSpec clf;
    clf.kernel = Dims3(1);
    clf.fm_count = spec.class_count;
    clf.activation = Activation::none;
    add(count_layer("classifier", clf, fused));
    return r;
}

GeometryReport geometry_report(const NetworkSpec& spec, Dims3 target_output_dims) {
    spec.validate();
    GeometryReport r;
    r.phi = receptive_field(spec);
    r.phi_total = r.phi.back();
    r.effective_context = r.phi_total * spec.downsample_factor;
    r.segment = dual_pathway_geometry(spec, target_output_dims);
    r.layer_dims = fm_dims(spec, r.segment.input_hi);
    r.params = param_count(spec);
    return r;
}

std::vector<std::string> layer_names(const NetworkSpec& spec) {
    std::vector<std::string> names;
    for (i64 p = 0; p < spec.pathway_count(); ++p)
        for (std::size_t i = 0; i < spec.pathway_layers.size(); ++i)
            names.push_back("path" + std::to_string(p + 1) + "/conv" + std::to_string(i + 1));
    for (std::size_t i = 0; i < spec.hidden_layers.size(); ++i)
        names.push_back("hidden" + std::to_string(i + 1));
    names.push_back("classifier");
    return names;
}

// --- Parameters ----------------------------------------------------------------

namespace {

template <typename T>
LayerParamsT<T> init_layer(const LayerSpec& l, i64 fm_in, InitScheme scheme, Rng& rng) {
    LayerParamsT<T> p;
    p.kernel = Kernel4DT<T>(l.fm_count, fm_in, l.kernel);
    const i64 n_in = fm_in * l.kernel.voxels();
    const double stddev =
        scheme == InitScheme::he ? std::sqrt(2.0 / static_cast<double>(n_in)) : 0.01;
    for (auto& w : p.kernel.weights) w = static_cast<T>(rng.normal(0.0, stddev));
    // biases stay zero
    if (l.activation == Activation::prelu)
        p.prelu_slopes.assign(static_cast<std::size_t>(l.fm_count), static_cast<T>(0.25));
    if (l.batch_norm) {
        p.bn_scale.assign(static_cast<std::size_t>(l.fm_count), T{1});
        p.bn_shift.assign(static_cast<std::size_t>(l.fm_count), T{});
        p.bn_running_mean.assign(static_cast<std::size_t>(l.fm_count), T{});
        p.bn_running_var.assign(static_cast<std::size_t>(l.fm_count), T{1});
    }
    return p;
}

LayerSpec classifier_spec(const NetworkSpec& spec) {
    LayerSpec clf;
    clf.kernel = Dims3(1);
    clf.fm_count = spec.class_count;
    clf.batch_norm = false;
    clf.dropout_rate = 0.0;
    clf.activation = Activation::none;
    return clf;
}

i64 fused_fm_count(const NetworkSpec& spec) {
    return spec.pathway_layers.back().fm_count * spec.pathway_count();
}

}  // namespace

template <typename T>
NetworkParamsT<T> init_params(const NetworkSpec& spec, std::uint64_t seed, InitScheme scheme) {
    spec.validate();
    NetworkParamsT<T> params;
    params.spec = spec;
    params.seed = seed;
    Rng rng(seed);
    auto init_pathway = [&](std::vector<LayerParamsT<T>>& dst) {
        i64 fm_in = spec.input_channels;
        for (const auto& l : spec.pathway_layers) {
            dst.push_back(init_layer<T>(l, fm_in, scheme, rng));
            fm_in = l.fm_count;
        }
    };
    init_pathway(params.pathway1);
    if (spec.use_low_res_pathway) init_pathway(params.pathway2);
    i64 fm_in = fused_fm_count(spec);
    for (const auto& l : spec.hidden_layers) {
        params.hidden.push_back(init_layer<T>(l, fm_in, scheme, rng));
        fm_in = l.fm_count;
    }
    params.classifier = init_layer<T>(classifier_spec(spec), fm_in, scheme, rng);
    return params;
}

template NetworkParamsT<float> init_params<float>(const NetworkSpec&, std::uint64_t, InitScheme);
template NetworkParamsT<double> init_params<double>(const NetworkSpec&, std::uint64_t, InitScheme);

namespace {
template <typename T>
std::vector<double> to_double_vec(const std::vector<T>& v) {
    return std::vector<double>(v.begin(), v.end());
}

LayerParamsT<double> widen_layer(const LayerParamsT<float>& in) {
    LayerParamsT<double> out;
    out.kernel = Kernel4DT<double>(in.kernel.fm_out, in.kernel.fm_in, in.kernel.kdims);
    out.kernel.weights.assign(in.kernel.weights.begin(), in.kernel.weights.end());
    out.kernel.bias.assign(in.kernel.bias.begin(), in.kernel.bias.end());
    out.prelu_slopes = to_double_vec(in.prelu_slopes);
    out.bn_scale = to_double_vec(in.bn_scale);
    out.bn_shift = to_double_vec(in.bn_shift);
    out.bn_running_mean = to_double_vec(in.bn_running_mean);
    out.bn_running_var = to_double_vec(in.bn_running_var);
    return out;
}
}  // namespace

NetworkParamsT<double> widen_to_double(const NetworkParams& p) {
    NetworkParamsT<double> out;
    out.spec = p.spec;
    out.seed = p.seed;
    for (const auto& l : p.pathway1) out.pathway1.push_back(widen_layer(l));
    for (const auto& l : p.pathway2) out.pathway2.push_back(widen_layer(l));
    for (const auto& l : p.hidden) out.hidden.push_back(widen_layer(l));
    out.classifier = widen_layer(p.classifier);
    return out;
}

// --- Batch normalization -------------------------------------------------------

template <typename T>
BlockT<T> batch_norm_train(const BlockT<T>& x, std::span<const T> scale, std::span<const T> shift,
                           BnCache<T>& cache) {
    check(static_cast<i64>(scale.size()) == x.fms && static_cast<i64>(shift.size()) == x.fms,
          "batch_norm: scale/shift size mismatch");
    const i64 n = x.batch * x.dims.voxels();
    check(n >= 2, "batch_norm: needs at least 2 samples per FM in train mode, got ", n);

    cache.xhat = BlockT<T>(x.batch, x.fms, x.dims);
    cache.batch_mean.assign(static_cast<std::size_t>(x.fms), T{});
    cache.batch_var.assign(static_cast<std::size_t>(x.fms), T{});
    cache.inv_std.assign(static_cast<std::size_t>(x.fms), T{});
    BlockT<T> y(x.batch, x.fms, x.dims);

    const i64 vox = x.dims.voxels();
    for (i64 f = 0; f < x.fms; ++f) {
        double sum = 0.0;
        for (i64 b = 0; b < x.batch; ++b) {
            const T* xp = x.fm_ptr(b, f);
            for (i64 v = 0; v < vox; ++v) sum += static_cast<double>(xp[v]);
        }
        const double mean = sum / static_cast<double>(n);
        double var_sum = 0.0;
        for (i64 b = 0; b < x.batch; ++b) {
            const T* xp = x.fm_ptr(b, f);
            for (i64 v = 0; v < vox; ++v) {
                const double d = static_cast<double>(xp[v]) - mean;
                var_sum += d * d;
            }
        }
        const double var = var_sum / static_cast<double>(n);
        const double inv_std = 1.0 / std::sqrt(var + kBnEpsilon);
        cache.batch_mean[static_cast<std::size_t>(f)] = static_cast<T>(mean);
        cache.batch_var[static_cast<std::size_t>(f)] = static_cast<T>(var);
        cache.inv_std[static_cast<std::size_t>(f)] = static_cast<T>(inv_std);
        const T g = scale[static_cast<std::size_t>(f)];
        const T s = shift[static_cast<std::size_t>(f)];
        for (i64 b = 0; b < x.batch; ++b) {
            const T* xp = x.fm_ptr(b, f);
            T* hp = cache.xhat.fm_ptr(b, f);
            T* yp = y.fm_ptr(b, f);
            for (i64 v = 0; v < vox; ++v) {
                hp[v] = static_cast<T>((static_cast<double>(xp[v]) - mean) * inv_std);
                yp[v] = g * hp[v] + s;
            }
        }
    }
    return y;
}

template <typename T>
BlockT<T> batch_norm_infer(const BlockT<T>& x, std::span<const T> scale, std::span<const T> shift,
                           std::span<const T> running_mean, std::span<const T> running_var) {
    check(static_cast<i64>(scale.size()) == x.fms, "batch_norm: scale size mismatch");
    BlockT<T> y(x.batch, x.fms, x.dims);
    const i64 vox = x.dims.voxels();
    for (i64 f = 0; f < x.fms; ++f) {
        const T mean = running_mean[static_cast<std::size_t>(f)];
        const T inv_std =
            static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var[static_cast<std::size_t>(f)]) +
                                           kBnEpsilon));
        const T g = scale[static_cast<std::size_t>(f)];
        const T s = shift[static_cast<std::size_t>(f)];
        for (i64 b = 0; b < x.batch; ++b) {
            const T* xp = x.fm_ptr(b, f);
            T* yp = y.fm_ptr(b, f);
            for (i64 v = 0; v < vox; ++v) yp[v] = g * (xp[v] - mean) * inv_std + s;
        }
    }
    return y;
}

template <typename T>
BnGrads<T> batch_norm_backward(const BnCache<T>& cache, std::span<const T> scale,
                               const BlockT<T>& grad_out) {
    const BlockT<T>& xhat = cache.xhat;
    check(grad_out.same_shape(xhat), "batch_norm_backward: grad_out shape mismatch");
    BnGrads<T> g;
    g.input = BlockT<T>(xhat.batch, xhat.fms, xhat.dims);
    g.scale.assign(static_cast<std::size_t>(xhat.fms), T{});
    g.shift.assign(static_cast<std::size_t>(xhat.fms), T{});
    const i64 vox = xhat.dims.voxels();
    const double n = static_cast<double>(xhat.batch * vox);
    for (i64 f = 0; f < xhat.fms; ++f) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (i64 b = 0; b < xhat.batch; ++b) {
            const T* dy = grad_out.fm_ptr(b, f);
            const T* h = xhat.fm_ptr(b, f);
            for (i64 v = 0; v < vox; ++v) {
                sum_dy += static_cast<double>(dy[v]);
                sum_dy_xhat += static_cast<double>(dy[v]) * static_cast<double>(h[v]);
            }
        }
        g.shift[static_cast<std::size_t>(f)] = static_cast<T>(sum_dy);
        g.scale[static_cast<std::size_t>(f)] = static_cast<T>(sum_dy_xhat);
        const double mean_dy = sum_dy / n;
        const double mean_dy_xhat = sum_dy_xhat / n;
        const double coeff = static_cast<double>(scale[static_cast<std::size_t>(f)]) *
                             static_cast<double>(cache.inv_std[static_cast<std::size_t>(f)]);
        for (i64 b = 0; b < xhat.batch; ++b) {
            const T* dy = grad_out.fm_ptr(b, f);
            const T* h = xhat.fm_ptr(b, f);
            T* dx = g.input.fm_ptr(b, f);
            for (i64 v = 0; v < vox; ++v)
                dx[v] = static_cast<T>(coeff * (static_cast<double>(dy[v]) - mean_dy -
                                                static_cast<double>(h[v]) * mean_dy_xhat));
        }
    }
    return g;
}

template <typename T>
void bn_update_running(std::vector<T>& running_mean, std::vector<T>& running_var,
                       const BnCache<T>& cache) {
    const T d = static_cast<T>(kBnRunningDecay);
    for (std::size_t f = 0; f < running_mean.size(); ++f) {
        running_mean[f] = d * running_mean[f] + (T{1} - d) * cache.batch_mean[f];
        running_var[f] = d * running_var[f] + (T{1} - d) * cache.batch_var[f];
    }
}

// --- Forward / backward ----------------------------------------------------------

namespace {

template <typename T>
void apply_dropout_forward(const LayerSpec& ls, BlockT<T>& x, const ForwardOptions& opts,
                           std::vector<T>& mask_out) {
    if (ls.dropout_rate <= 0.0) return;
    const T keep = static_cast<T>(1.0 - ls.dropout_rate);
    if (opts.mode == Mode::infer) {
        for (auto& v : x.data) v *= keep;  // expected-value correction
        return;
    }
    check(opts.rng != nullptr, "forward: train mode with dropout requires an RNG");
    const i64 vox = x.dims.voxels();
    if (ls.dropout_mode == DropoutMode::fm) {
        mask_out.resize(static_cast<std::size_t>(x.batch * x.fms));
        for (i64 b = 0; b < x.batch; ++b)
            for (i64 f = 0; f < x.fms; ++f) {
                const T m = opts.rng->bernoulli(ls.dropout_rate) ? T{} : T{1};
                mask_out[static_cast<std::size_t>(b * x.fms + f)] = m;
                if (m == T{}) {
                    T* p = x.fm_ptr(b, f);
                    std::fill(p, p + vox, T{});
                }
            }
    } else {
        mask_out.resize(x.data.size());
        for (std::size_t i = 0; i < x.data.size(); ++i) {
            const T m = opts.rng->bernoulli(ls.dropout_rate) ? T{} : T{1};
            mask_out[i] = m;
            x.data[i] *= m;
        }
    }
}

template <typename T>
void apply_dropout_backward(const LayerSpec& ls, const LayerTrace<T>& tr, BlockT<T>& grad) {
    if (ls.dropout_rate <= 0.0 || tr.dropout_mask.empty()) return;
    const i64 vox = grad.dims.voxels();
    if (ls.dropout_mode == DropoutMode::fm) {
        for (i64 b = 0; b < grad.batch; ++b)
            for (i64 f = 0; f < grad.fms; ++f)
                if (tr.dropout_mask[static_cast<std::size_t>(b * grad.fms + f)] == T{}) {
                    T* p = grad.fm_ptr(b, f);
                    std::fill(p, p + vox, T{});
                }
    } else {
        for (std::size_t i = 0; i < grad.data.size(); ++i) grad.data[i] *= tr.dropout_mask[i];
    }
}

template <typename T>
BlockT<T> layer_forward(const LayerSpec& ls, const LayerParamsT<T>& lp, const BlockT<T>& input,
                        const ForwardOptions& opts, LayerTrace<T>& tr) {
    BlockT<T> act = conv3d_valid(input, lp.kernel);
    if (ls.batch_norm) {
        if (opts.mode == Mode::train) {
            act = batch_norm_train<T>(act, lp.bn_scale, lp.bn_shift, tr.bn);
        } else {
            act = batch_norm_infer<T>(act, lp.bn_scale, lp.bn_shift, lp.bn_running_mean,
                                      lp.bn_running_var);
        }
    }
    BlockT<T> out;
    if (ls.activation == Activation::prelu) {
        if (opts.keep_trace) {
            tr.pre_activation = std::move(act);
            out = prelu<T>(tr.pre_activation, lp.prelu_slopes);
        } else {
            out = prelu<T>(act, lp.prelu_slopes);
        }
    } else {
        out = std::move(act);
    }
    apply_dropout_forward(ls, out, opts, tr.dropout_mask);
    return out;
}

// Runs a chain of layers; each trace keeps the layer output when requested.
template <typename T>
BlockT<T> chain_forward(const std::vector<LayerSpec>& specs,
                        const std::vector<LayerParamsT<T>>& params, BlockT<T> input,
                        const ForwardOptions& opts, std::vector<LayerTrace<T>>& traces) {
    traces.resize(specs.size());
    for (std::size_t i = 0; i < specs.size(); ++i) {
        BlockT<T> out = layer_forward(specs[i], params[i], input, opts, traces[i]);
        if (opts.keep_trace || opts.keep_outputs) {
            traces[i].output = out;
            input = std::move(out);
        } else {
            input = std::move(out);
        }
    }
    return input;
}

template <typename T>
LayerParamsT<T> zero_like(const LayerParamsT<T>& p) {
    LayerParamsT<T> z;
    z.kernel = Kernel4DT<T>(p.kernel.fm_out, p.kernel.fm_in, p.kernel.kdims);
    z.prelu_slopes.assign(p.prelu_slopes.size(), T{});
    z.bn_scale.assign(p.bn_scale.size(), T{});
    z.bn_shift.assign(p.bn_shift.size(), T{});
    return z;
}

// grad flowing out of the layer w.r.t. its input; parameter grads accumulate
// into `g`.
template <typename T>
BlockT<T> layer_backward(const LayerSpec& ls, const LayerParamsT<T>& lp, const BlockT<T>& input,
                         const LayerTrace<T>& tr, BlockT<T> grad, LayerParamsT<T>& g) {
    apply_dropout_backward(ls, tr, grad);
    if (ls.activation == Activation::prelu) {
        PreluGrads<T> pg = prelu_backward<T>(tr.pre_activation, lp.prelu_slopes, grad);
        for (std::size_t i = 0; i < pg.slopes.size(); ++i) g.prelu_slopes[i] += pg.slopes[i];
        grad = std::move(pg.input);
    }
    if (ls.batch_norm) {
        BnGrads<T> bg = batch_norm_backward<T>(tr.bn, lp.bn_scale, grad);
        for (std::size_t i = 0; i < bg.scale.size(); ++i) {
            g.bn_scale[i] += bg.scale[i];
            g.bn_shift[i] += bg.shift[i];
        }
        grad = std::move(bg.input);
    }
    Conv3dGrads<T> cg = conv3d_backward<T>(input, lp.kernel, grad);
    for (std::size_t i = 0; i < cg.kernel.weights.size(); ++i)
        g.kernel.weights[i] += cg.kernel.weights[i];
    for (std::size_t i = 0; i < cg.kernel.bias.size(); ++i) g.kernel.bias[i] += cg.kernel.bias[i];
    return std::move(cg.input);
}

template <typename T>
BlockT<T> chain_backward(const std::vector<LayerSpec>& specs,
                         const std::vector<LayerParamsT<T>>& params, const BlockT<T>& chain_input,
                         const std::vector<LayerTrace<T>>& traces, BlockT<T> grad,
                         std::vector<LayerParamsT<T>>& grads) {
    for (std::size_t ri = specs.size(); ri-- > 0;) {
        const BlockT<T>& input = ri == 0 ? chain_input : traces[ri - 1].output;
        grad = layer_backward(specs[ri], params[ri], input, traces[ri], std::move(grad),
                              grads[ri]);
    }
    return grad;
}

}  // namespace

template <typename T>
ForwardTrace<T> forward(const NetworkParamsT<T>& params, const BlockT<T>& hires,
                        const BlockT<T>* lowres, const ForwardOptions& opts) {
    const NetworkSpec& spec = params.spec;
    check(hires.fms == spec.input_channels, "forward: expected ", spec.input_channels,
          " input channels, got ", hires.fms);
    check(spec.use_low_res_pathway == (lowres != nullptr),
          spec.use_low_res_pathway ? "forward: spec uses the low-res pathway but no low-res input given"
                                   : "forward: low-res input given but spec has a single pathway");

    const Dims3 phi = receptive_field_total(spec);
    check(hires.dims.all_ge(phi), "forward: input ", to_string(hires.dims),
          " smaller than receptive field ", to_string(phi));
    const Dims3 out_dims = hires.dims - phi + Dims3(1);

    ForwardTrace<T> trace;
    BlockT<T> features =
        chain_forward(spec.pathway_layers, params.pathway1, hires, opts, trace.path1);

    if (spec.use_low_res_pathway) {
        const DualGeometry geo = dual_pathway_geometry(spec, out_dims);
        check(lowres->fms == spec.input_channels, "forward: low-res channel count mismatch");
        check(lowres->dims == geo.input_lo, "forward: low-res input dims ",
              to_string(lowres->dims), " do not match required ", to_string(geo.input_lo),
              " for output ", to_string(out_dims));
        check(lowres->batch == hires.batch, "forward: pathway batch size mismatch");
        trace.lowres_out_dims = geo.out_lo;
        BlockT<T> lo = chain_forward(spec.pathway_layers, params.pathway2, *lowres, opts,
                                     trace.path2);
        lo = upsample_repeat<T>(lo, spec.downsample_factor);
        lo = crop_center<T>(lo, out_dims);
        features = concat_fms<T>(features, lo);
    }

    if (opts.keep_trace) trace.fused = features;  // hidden-chain input, needed by backward
    BlockT<T> hid =
        chain_forward(spec.hidden_layers, params.hidden, std::move(features), opts, trace.hidden);
    trace.logits = layer_forward(classifier_spec(spec), params.classifier, hid, opts,
                                 trace.classifier);
    if (opts.keep_outputs) trace.classifier.output = trace.logits;
    trace.posteriors = softmax_channels<T>(trace.logits);
    return trace;
}

template <typename T>
NetworkGradsT<T> backward(const NetworkParamsT<T>& params, const BlockT<T>& hires,
                          const BlockT<T>* lowres, const ForwardTrace<T>& trace,
                          const BlockT<T>& grad_logits) {
    const NetworkSpec& spec = params.spec;
    NetworkGradsT<T> grads;
    for (const auto& l : params.pathway1) grads.pathway1.push_back(zero_like(l));
    for (const auto& l : params.pathway2) grads.pathway2.push_back(zero_like(l));
    for (const auto& l : params.hidden) grads.hidden.push_back(zero_like(l));
    grads.classifier = zero_like(params.classifier);

    const BlockT<T>& clf_input =
        spec.hidden_layers.empty() ? trace.fused : trace.hidden.back().output;
    BlockT<T> grad = layer_backward(classifier_spec(spec), params.classifier, clf_input,
                                    trace.classifier, grad_logits, grads.classifier);
    grad = chain_backward(spec.hidden_layers, params.hidden, trace.fused, trace.hidden,
                          std::move(grad), grads.hidden);

    if (spec.use_low_res_pathway) {
        const i64 c1 = spec.pathway_layers.back().fm_count;
        // split fused grad: first c1 FMs belong to pathway 1
        BlockT<T> g1(grad.batch, c1, grad.dims);
        BlockT<T> g2(grad.batch, grad.fms - c1, grad.dims);
        const i64 vox = grad.dims.voxels();
        for (i64 b = 0; b < grad.batch; ++b) {
            std::memcpy(g1.fm_ptr(b, 0), grad.fm_ptr(b, 0),
                        static_cast<std::size_t>(c1 * vox) * sizeof(T));
            std::memcpy(g2.fm_ptr(b, 0), grad.fm_ptr(b, c1),
                        static_cast<std::size_t>((grad.fms - c1) * vox) * sizeof(T));
        }
        grads.grad_hires = chain_backward(spec.pathway_layers, params.pathway1, hires,
                                          trace.path1, std::move(g1), grads.pathway1);
        BlockT<T> gup = crop_center_backward<T>(
            g2, trace.lowres_out_dims * spec.downsample_factor);
        BlockT<T> glo =
            upsample_repeat_backward<T>(gup, spec.downsample_factor, trace.lowres_out_dims);
        grads.grad_lowres = chain_backward(spec.pathway_layers, params.pathway2, *lowres,
                                           trace.path2, std::move(glo), grads.pathway2);
    } else {
        grads.grad_hires = chain_backward(spec.pathway_layers, params.pathway1, hires,
                                          trace.path1, std::move(grad), grads.pathway1);
    }
    return grads;
}

template <typename T>
void commit_bn_running(NetworkParamsT<T>& params, const ForwardTrace<T>& trace) {
    auto commit_chain = [](std::vector<LayerParamsT<T>>& layers,
                           const std::vector<LayerTrace<T>>& traces) {
        for (std::size_t i = 0; i < layers.size(); ++i)
            if (!layers[i].bn_scale.empty() && !traces[i].bn.batch_mean.empty())
                bn_update_running(layers[i].bn_running_mean, layers[i].bn_running_var,
                                  traces[i].bn);
    };
    commit_chain(params.pathway1, trace.path1);
    commit_chain(params.pathway2, trace.path2);
    commit_chain(params.hidden, trace.hidden);
}

// --- Presets ---------------------------------------------------------------------

namespace {
std::vector<LayerSpec> conv_chain(const std::vector<i64>& fms, Dims3 kernel, bool bn,
                                  double dropout) {
    std::vector<LayerSpec> layers;
    for (i64 c : fms) {
        LayerSpec l;
        l.kernel = kernel;
        l.fm_count = c;
        l.batch_norm = bn;
        l.dropout_rate = dropout;
        l.activation = Activation::prelu;
        l.dropout_mode = DropoutMode::fm;
        layers.push_back(l);
    }
    return layers;
}

std::vector<LayerSpec> hidden_chain(const std::vector<i64>& fms, bool bn, double dropout) {
    std::vector<LayerSpec> layers;
    for (i64 c : fms) {
        LayerSpec l;
        l.kernel = Dims3(1);
        l.fm_count = c;
        l.batch_norm = bn;
        l.dropout_rate = dropout;
        l.activation = Activation::prelu;
        l.dropout_mode = DropoutMode::voxel;
        layers.push_back(l);
    }
    return layers;
}
}  // namespace

NetworkSpec preset(const std::string& name, i64 input_channels, i64 class_count) {
    NetworkSpec spec;
    spec.input_channels = input_channels;
    spec.class_count = class_count;
    if (name == "shallow" || name == "shallow_plus") {
        spec.pathway_layers = conv_chain({30, 40, 40, 50}, Dims3(5), name == "shallow_plus", 0.0);
    } else if (name == "deep" || name == "deep_plus") {
        spec.pathway_layers =
            conv_chain({30, 30, 40, 40, 40, 40, 50, 50}, Dims3(3), name == "deep_plus", 0.0);
    } else if (name == "big_deep_plus") {
        spec.pathway_layers = conv_chain({60, 60, 80, 80, 80, 80, 100, 100}, Dims3(3), true, 0.0);
        spec.hidden_layers = hidden_chain({150, 150}, true, 0.5);
    } else if (name == "deepmedic") {
        spec.pathway_layers = conv_chain({30, 30, 40, 40, 40, 40, 50, 50}, Dims3(3), true, 0.02);
        spec.hidden_layers = hidden_chain({150, 150}, true, 0.5);
        spec.use_low_res_pathway = true;
        spec.downsample_factor = 3;
    } else {
        fail("unknown architecture preset '", name,
             "' (known: shallow, shallow_plus, deep, deep_plus, big_deep_plus, deepmedic)");
    }
    spec.validate();
    return spec;
}

NetworkSpec scale_widths(NetworkSpec spec, double multiplier) {
    check(multiplier > 0.0, "scale_widths: multiplier must be positive");
    auto scale = [multiplier](std::vector<LayerSpec>& layers) {
        for (auto& l : layers)
            l.fm_count = std::max<i64>(1, static_cast<i64>(std::llround(
                                              static_cast<double>(l.fm_count) * multiplier)));
    };
    scale(spec.pathway_layers);
    scale(spec.hidden_layers);
    return spec;
}

// --- Instantiations ----------------------------------------------------------------

template struct NetworkParamsT<float>;
template struct NetworkParamsT<double>;

#define VOXMED_INSTANTIATE_NET(T)                                                                \
    template BlockT<T> batch_norm_train<T>(const BlockT<T>&, std::span<const T>,                 \
                                           std::span<const T>, BnCache<T>&);                     \
    template BlockT<T> batch_norm_infer<T>(const BlockT<T>&, std::span<const T>,                 \
                                           std::span<const T>, std::span<const T>,               \
                                           std::span<const T>);                                  \
    template BnGrads<T> batch_norm_backward<T>(const BnCache<T>&, std::span<const T>,            \
                                               const BlockT<T>&);                                \
    template void bn_update_running<T>(std::vector<T>&, std::vector<T>&, const BnCache<T>&);     \
    template ForwardTrace<T> forward<T>(const NetworkParamsT<T>&, const BlockT<T>&,              \
                                        const BlockT<T>*, const ForwardOptions&);                \
    template NetworkGradsT<T> backward<T>(const NetworkParamsT<T>&, const BlockT<T>&,            \
                                          const BlockT<T>*, const ForwardTrace<T>&,              \
                                          const BlockT<T>&);                                     \
    template void commit_bn_running<T>(NetworkParamsT<T>&, const ForwardTrace<T>&);

VOXMED_INSTANTIATE_NET(float)
VOXMED_INSTANTIATE_NET(double)
#undef VOXMED_INSTANTIATE_NET

}  // namespace voxmed
