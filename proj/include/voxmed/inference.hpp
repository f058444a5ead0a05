#pragma once

#include <string>
#include <vector>

#include "voxmed/network.hpp"
#include "voxmed/segments.hpp"
#include "voxmed/tensor.hpp"

namespace voxmed {

// Per-voxel class posteriors for a whole volume.
struct SoftSegmentation {
    Volume probs;  // one channel per class
    std::vector<std::string> sources;
    Dims3 tile;
};

// Tiled dense inference over a mirror-padded volume. Every original voxel
// receives exactly one prediction; the tiling never changes the result
// because tile origins stay aligned to the low-res grid.
SoftSegmentation segment_volume(const NetworkParams& params, const Volume& image,
                                Dims3 tile_output_dims);

// Arithmetic mean of members (means of simplex points need no renormalizing).
SoftSegmentation ensemble_average(const std::vector<SoftSegmentation>& members);

// Per-voxel argmax; ties break toward the lower class id.
LabelVolume argmax_labels(const SoftSegmentation& soft);

// Collapses the classes in `class_set` into one foreground channel;
// channel 0 holds the complement.
SoftSegmentation merge_foreground(const SoftSegmentation& soft,
                                  const std::vector<i64>& class_set);

struct FeatureMapDump {
    std::string layer;  // name from layer_names()
    i64 layer_id = 0;
    Volume fms;  // one channel per FM, aligned to the predicted region
};

// Runs one dense pass over the whole volume and returns the activations of
// the selected layers (ids index into layer_names()).
std::vector<FeatureMapDump> dump_feature_maps(const NetworkParams& params, const Volume& image,
                                              const std::vector<i64>& layer_ids);

}  // namespace voxmed
