#include "voxmed/segments.hpp"

#include <algorithm>

namespace voxmed {

SegmentGeometry SegmentGeometry::for_spec(const NetworkSpec& spec, Dims3 out_dims) {
    spec.validate();
    check(out_dims.all_positive(), "segment geometry: output dims must be >= 1");
    SegmentGeometry g;
    g.dual = spec.use_low_res_pathway;
    g.factor = g.dual ? spec.downsample_factor : 1;
    g.out_dims = out_dims;
    g.phi = receptive_field_total(spec);
    const DualGeometry dg = dual_pathway_geometry(spec, out_dims);
    g.in_hi = dg.input_hi;

    Dims3 pad;
    for (int a = 0; a < 3; ++a) {
        const i64 r = (g.phi[a] - 1) / 2;
        const i64 half_out = (out_dims[a] - 1) / 2;
        i64 need = r + out_dims[a] - 1 - half_out;  // right side dominates for even extents
        if (g.dual) {
            g.out_lo[a] = dg.out_lo[a];
            g.in_lo[a] = dg.input_lo[a];
            g.crop_gamma[a] = (g.out_lo[a] * g.factor - out_dims[a]) / 2;
            const i64 lo_need =
                g.factor * (r + g.out_lo[a]) + half_out + g.crop_gamma[a] + g.factor;
            need = std::max(need, lo_need);
        }
        pad[a] = ceil_div(need, g.factor) * g.factor;
    }
    g.pad = pad;
    return g;
}

PreparedVolume prepare_volume(const Volume& image, const SegmentGeometry& geo) {
    PreparedVolume p;
    p.orig_dims = image.dims;
    p.pad = geo.pad;
    p.hi = pad_mirror(image, geo.pad, geo.pad);
    if (geo.dual) p.lo = downsample_block_average(p.hi, geo.factor);
    return p;
}

void extract_segment(const PreparedVolume& vol, const SegmentGeometry& geo, Dims3 out_start,
                     Block& hires, Block* lowres, i64 item) {
    const Dims3 start_padded = out_start + vol.pad;
    extract_window(vol.hi, geo.hi_origin(start_padded), hires, item);
    if (geo.dual) {
        check(lowres != nullptr, "extract_segment: dual-pathway geometry needs a low-res block");
        extract_window(vol.lo, geo.lo_origin(start_padded), *lowres, item);
    }
}

}  // namespace voxmed
