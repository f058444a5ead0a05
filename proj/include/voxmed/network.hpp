#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "voxmed/rng.hpp"
#include "voxmed/tensor.hpp"

namespace voxmed {

enum class Activation { prelu, none };
enum class DropoutMode { fm, voxel };

struct LayerSpec {
    Dims3 kernel{3, 3, 3};
    i64 fm_count = 0;
    bool batch_norm = false;
    double dropout_rate = 0.0;
    Activation activation = Activation::prelu;
    DropoutMode dropout_mode = DropoutMode::fm;
};

// Architecture description. Both pathways share the same layer structure;
// hidden layers are position-wise (1x1x1) convolutions applied after the
// pathway features are fused. The classification layer (1x1x1 kernel,
// class_count FMs, no activation) is implicit.
struct NetworkSpec {
    i64 input_channels = 1;
    i64 class_count = 2;
    std::vector<LayerSpec> pathway_layers;
    bool use_low_res_pathway = false;
    i64 downsample_factor = 1;  // low-res pathway input downsampling factor
    std::vector<LayerSpec> hidden_layers;

    void validate() const;
    i64 pathway_count() const { return use_low_res_pathway ? 2 : 1; }
};

// --- Geometry calculus -----------------------------------------------------

// Cumulative receptive field after each pathway layer (phi_0 = 1, unit
// strides). Hidden and classification layers use 1x1x1 kernels and do not
// grow it.
std::vector<Dims3> receptive_field(const NetworkSpec& spec);

// Receptive field of the whole network in normal-resolution input space.
Dims3 receptive_field_total(const NetworkSpec& spec);

struct LayerDims {
    std::string name;  // e.g. "path1/conv3", "hidden1", "classifier"
    Dims3 dims;
};

// FM dims for every layer of the normal-resolution chain given the
// normal-resolution input dims. Rejects inputs smaller than the receptive
// field, reporting the required minimum.
std::vector<LayerDims> fm_dims(const NetworkSpec& spec, Dims3 input_dims);

struct DualGeometry {
    Dims3 input_hi;  // normal-resolution input segment dims
    Dims3 input_lo;  // low-resolution input segment dims (in low-res grid voxels)
    Dims3 out_lo;    // FM dims at the end of the low-res pathway
};

// Input dims for both pathways that realize the requested output dims.
DualGeometry dual_pathway_geometry(const NetworkSpec& spec, Dims3 target_output_dims);

struct LayerParamCount {
    std::string name;
    i64 weights = 0;  // kernel weights only
    i64 biases = 0;
    i64 bn = 0;
    i64 prelu = 0;
};

struct ParamCountReport {
    std::vector<LayerParamCount> layers;
    i64 total_weights = 0;
    i64 total_other = 0;
    i64 total() const { return total_weights + total_other; }
};

ParamCountReport param_count(const NetworkSpec& spec);

struct GeometryReport {
    std::vector<Dims3> phi;             // per pathway layer
    Dims3 phi_total;                    // pathway receptive field
    Dims3 effective_context;            // phi scaled by the downsampling factor
    DualGeometry segment;               // for the requested output dims
    std::vector<LayerDims> layer_dims;  // normal-resolution chain dims
    ParamCountReport params;
};

GeometryReport geometry_report(const NetworkSpec& spec, Dims3 target_output_dims);

// Layer names in global declaration order (pathway 1, pathway 2, hidden,
// classifier); ids used by checkpoints and FM dumps are indices herein.
std::vector<std::string> layer_names(const NetworkSpec& spec);

// --- Parameters -------------------------------------------------------------

enum class InitScheme { he, legacy_gaussian };

template <typename T>
struct LayerParamsT {
    Kernel4DT<T> kernel;
    std::vector<T> prelu_slopes;
    std::vector<T> bn_scale, bn_shift, bn_running_mean, bn_running_var;
};

template <typename T>
struct NetworkParamsT {
    NetworkSpec spec;
    std::uint64_t seed = 0;
    std::vector<LayerParamsT<T>> pathway1, pathway2, hidden;
    LayerParamsT<T> classifier;
};

using NetworkParams = NetworkParamsT<float>;

template <typename T>
NetworkParamsT<T> init_params(const NetworkSpec& spec, std::uint64_t seed, InitScheme scheme);

NetworkParamsT<double> widen_to_double(const NetworkParams& p);

// --- Batch normalization ----------------------------------------------------

inline constexpr double kBnEpsilon = 1e-5;
inline constexpr double kBnRunningDecay = 0.9;

template <typename T>
struct BnCache {
    BlockT<T> xhat;
    std::vector<T> batch_mean, batch_var, inv_std;
};

// Train mode: normalize per FM over batch and spatial axes, then scale/shift.
// Batch statistics land in the cache; running statistics are the caller's to
// update (see bn_update_running). Requires at least 2 samples per FM.
template <typename T>
BlockT<T> batch_norm_train(const BlockT<T>& x, std::span<const T> scale,
                           std::span<const T> shift, BnCache<T>& cache);

template <typename T>
BlockT<T> batch_norm_infer(const BlockT<T>& x, std::span<const T> scale, std::span<const T> shift,
                           std::span<const T> running_mean, std::span<const T> running_var);

template <typename T>
struct BnGrads {
    BlockT<T> input;
    std::vector<T> scale, shift;
};

template <typename T>
BnGrads<T> batch_norm_backward(const BnCache<T>& cache, std::span<const T> scale,
                               const BlockT<T>& grad_out);

template <typename T>
void bn_update_running(std::vector<T>& running_mean, std::vector<T>& running_var,
                       const BnCache<T>& cache);

// --- Forward / backward ------------------------------------------------------

enum class Mode { train, infer };

template <typename T>
struct LayerTrace {
    BlockT<T> pre_activation;  // post conv (and BN), input of the nonlinearity
    BlockT<T> output;          // layer output (post activation and dropout)
    BnCache<T> bn;
    std::vector<T> dropout_mask;  // one entry per (batch, fm) or per element
};

template <typename T>
struct ForwardTrace {
    std::vector<LayerTrace<T>> path1, path2, hidden;
    LayerTrace<T> classifier;
    BlockT<T> fused;  // concatenated pathway features, input to hidden chain
    Dims3 lowres_out_dims;
    BlockT<T> logits;
    BlockT<T> posteriors;
};

struct ForwardOptions {
    Mode mode = Mode::infer;
    bool keep_trace = false;    // retain what backward needs
    bool keep_outputs = false;  // retain every layer output (FM dumps)
    Rng* rng = nullptr;         // required in train mode when dropout is active
};

// Dense forward pass. lowres must be present iff the spec uses the low-res
// pathway; its dims must match dual_pathway_geometry for the output dims
// implied by hires.
template <typename T>
ForwardTrace<T> forward(const NetworkParamsT<T>& params, const BlockT<T>& hires,
                        const BlockT<T>* lowres, const ForwardOptions& opts);

template <typename T>
ForwardTrace<T> forward(const NetworkParamsT<T>& params, const BlockT<T>& hires,
                        const ForwardOptions& opts = {}) {
    return forward(params, hires, static_cast<const BlockT<T>*>(nullptr), opts);
}

template <typename T>
struct NetworkGradsT {
    std::vector<LayerParamsT<T>> pathway1, pathway2, hidden;
    LayerParamsT<T> classifier;
    BlockT<T> grad_hires, grad_lowres;  // gradients w.r.t. the input blocks
};

template <typename T>
NetworkGradsT<T> backward(const NetworkParamsT<T>& params, const BlockT<T>& hires,
                          const BlockT<T>* lowres, const ForwardTrace<T>& trace,
                          const BlockT<T>& grad_logits);

// Commit the batch statistics recorded in a train-mode trace to the running
// estimates (single-writer step of the training loop).
template <typename T>
void commit_bn_running(NetworkParamsT<T>& params, const ForwardTrace<T>& trace);

// --- Presets ----------------------------------------------------------------

// Named architectures: shallow, shallow_plus, deep, deep_plus, big_deep_plus,
// deepmedic.
NetworkSpec preset(const std::string& name, i64 input_channels = 1, i64 class_count = 2);

// Scales every FM count by `multiplier` (at least 1 FM per layer).
NetworkSpec scale_widths(NetworkSpec spec, double multiplier);

extern template struct NetworkParamsT<float>;
extern template struct NetworkParamsT<double>;
extern template ForwardTrace<float> forward<float>(const NetworkParamsT<float>&,
                                                   const BlockT<float>&, const BlockT<float>*,
                                                   const ForwardOptions&);
extern template ForwardTrace<double> forward<double>(const NetworkParamsT<double>&,
                                                     const BlockT<double>&, const BlockT<double>*,
                                                     const ForwardOptions&);

}  // namespace voxmed
