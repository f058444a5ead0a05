#pragma once

#include "voxmed/network.hpp"
#include "voxmed/tensor.hpp"

namespace voxmed {

// Extraction geometry shared by the training sampler and the inference tiler.
//
// A segment is addressed by the start of its predicted output region in
// original volume coordinates. The normal-resolution block is the output
// region grown by the pathway receptive field. The low-resolution block is
// taken from the block-average-downsampled volume so that, after the
// pathway, repetition upsampling and center cropping, low-res feature i sits
// on the low-res cell containing output voxel i. The correspondence is exact
// whenever the output start is a multiple of the downsampling factor and the
// output extent is too (the tiler guarantees both); other placements land on
// the nearest cell, which is the best the grid quantization allows.
struct SegmentGeometry {
    bool dual = false;
    i64 factor = 1;
    Dims3 out_dims;   // predicted region per segment
    Dims3 in_hi;      // normal-resolution block dims
    Dims3 in_lo;      // low-resolution block dims (low-res grid voxels)
    Dims3 out_lo;     // low-res pathway output dims
    Dims3 phi;        // pathway receptive field
    Dims3 crop_gamma; // leading entries dropped by the upsample crop
    Dims3 pad;        // per-side mirror padding (multiple of factor)

    static SegmentGeometry for_spec(const NetworkSpec& spec, Dims3 out_dims);

    // Origins take the output-region start in padded volume coordinates.
    Dims3 hi_origin(Dims3 out_start) const {
        return {out_start.x - (phi.x - 1) / 2, out_start.y - (phi.y - 1) / 2,
                out_start.z - (phi.z - 1) / 2};
    }
    Dims3 lo_origin(Dims3 out_start) const {
        Dims3 g;
        for (int a = 0; a < 3; ++a)
            g[a] = round_div(out_start[a] - crop_gamma[a], factor) - (phi[a] - 1) / 2;
        return g;
    }
};

// One case made ready for segment extraction: mirror-padded image and, for
// dual-pathway networks, its downsampled counterpart.
struct PreparedVolume {
    Volume hi;
    Volume lo;
    Dims3 pad;
    Dims3 orig_dims;
};

PreparedVolume prepare_volume(const Volume& image, const SegmentGeometry& geo);

// Fills batch item `item` of the input block(s) for the segment whose output
// region starts at `out_start` (original volume coordinates; may be negative
// near borders, the padding absorbs it).
void extract_segment(const PreparedVolume& vol, const SegmentGeometry& geo, Dims3 out_start,
                     Block& hires, Block* lowres, i64 item);

}  // namespace voxmed
