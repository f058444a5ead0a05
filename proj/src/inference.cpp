#include "voxmed/inference.hpp"

#include <algorithm>
#include <cmath>

namespace voxmed {

namespace {

Dims3 align_tile(const NetworkSpec& spec, Dims3 requested) {
    check(requested.all_positive(), "segment_volume: tile dims must be >= 1");
    if (!spec.use_low_res_pathway) return requested;
    const i64 f = spec.downsample_factor;
    return {ceil_div(requested.x, f) * f, ceil_div(requested.y, f) * f,
            ceil_div(requested.z, f) * f};
}

}  // namespace

SoftSegmentation segment_volume(const NetworkParams& params, const Volume& image,
                                Dims3 tile_output_dims) {
    const NetworkSpec& spec = params.spec;
    check(image.channels == spec.input_channels, "segment_volume: volume has ", image.channels,
          " channels but the checkpoint expects ", spec.input_channels);

    const Dims3 tile = align_tile(spec, tile_output_dims);
    const SegmentGeometry geo = SegmentGeometry::for_spec(spec, tile);
    const PreparedVolume prepared = prepare_volume(image, geo);

    SoftSegmentation soft;
    soft.tile = tile;
    soft.probs = Volume(spec.class_count, image.dims, image.spacing);

    std::vector<Dims3> origins;
    for (i64 oz = 0; oz < image.dims.z; oz += tile.z)
        for (i64 oy = 0; oy < image.dims.y; oy += tile.y)
            for (i64 ox = 0; ox < image.dims.x; ox += tile.x)
                origins.push_back({ox, oy, oz});

    Block hires(1, spec.input_channels, geo.in_hi);
    Block lowres;
    if (geo.dual) lowres = Block(1, spec.input_channels, geo.in_lo);

    for (const Dims3 origin : origins) {
        extract_segment(prepared, geo, origin, hires, geo.dual ? &lowres : nullptr, 0);
        auto trace = forward(params, hires, geo.dual ? &lowres : nullptr, ForwardOptions{});
        const Block& post = trace.posteriors;
        const Dims3 limit{std::min(tile.x, image.dims.x - origin.x),
                          std::min(tile.y, image.dims.y - origin.y),
                          std::min(tile.z, image.dims.z - origin.z)};
        for (i64 c = 0; c < spec.class_count; ++c)
            for (i64 z = 0; z < limit.z; ++z)
                for (i64 y = 0; y < limit.y; ++y) {
                    const float* src = post.fm_ptr(0, c) + (z * tile.y + y) * tile.x;
                    float* dst = &soft.probs.at(c, origin.x, origin.y + y, origin.z + z);
                    std::copy(src, src + limit.x, dst);
                }
    }
    return soft;
}

SoftSegmentation ensemble_average(const std::vector<SoftSegmentation>& members) {
    check(!members.empty(), "ensemble_average: no members");
    const auto& first = members.front().probs;
    SoftSegmentation out;
    out.probs = Volume(first.channels, first.dims, first.spacing);
    out.tile = members.front().tile;
    for (const auto& m : members) {
        check(m.probs.channels == first.channels && m.probs.dims == first.dims,
              "ensemble_average: member shape mismatch");
        for (std::size_t i = 0; i < out.probs.data.size(); ++i)
            out.probs.data[i] += m.probs.data[i];
        for (const auto& s : m.sources) out.sources.push_back(s);
    }
    const float inv = 1.0f / static_cast<float>(members.size());
    for (auto& v : out.probs.data) v *= inv;
    return out;
}

LabelVolume argmax_labels(const SoftSegmentation& soft) {
    const Volume& p = soft.probs;
    LabelVolume labels(1, p.dims, p.spacing);
    const i64 n = p.dims.voxels();
    for (i64 v = 0; v < n; ++v) {
        i64 best = 0;
        float best_p = p.data[static_cast<std::size_t>(v)];
        for (i64 c = 1; c < p.channels; ++c) {
            const float pc = p.data[static_cast<std::size_t>(c * n + v)];
            if (pc > best_p) {  // strict: ties stay at the lower id
                best_p = pc;
                best = c;
            }
        }
        labels.data[static_cast<std::size_t>(v)] = static_cast<std::int32_t>(best);
    }
    return labels;
}

SoftSegmentation merge_foreground(const SoftSegmentation& soft,
                                  const std::vector<i64>& class_set) {
    check(!class_set.empty(), "merge_foreground: class set is empty");
    for (i64 c : class_set)
        check(c >= 1 && c < soft.probs.channels, "merge_foreground: class id ", c,
              " invalid (must be a foreground class below ", soft.probs.channels, ")");
    SoftSegmentation out;
    out.sources = soft.sources;
    out.tile = soft.tile;
    out.probs = Volume(2, soft.probs.dims, soft.probs.spacing);
    const i64 n = soft.probs.dims.voxels();
    for (i64 v = 0; v < n; ++v) {
        float fg = 0.0f;
        for (i64 c : class_set) fg += soft.probs.data[static_cast<std::size_t>(c * n + v)];
        out.probs.data[static_cast<std::size_t>(v)] = 1.0f - fg;
        out.probs.data[static_cast<std::size_t>(n + v)] = fg;
    }
    return out;
}

std::vector<FeatureMapDump> dump_feature_maps(const NetworkParams& params, const Volume& image,
                                              const std::vector<i64>& layer_ids) {
    const NetworkSpec& spec = params.spec;
    const auto names = layer_names(spec);
    for (i64 id : layer_ids)
        check(id >= 0 && id < static_cast<i64>(names.size()), "dump_feature_maps: layer id ", id,
              " out of range [0, ", names.size(), ")");

    // one dense pass over the whole volume
    const Dims3 tile = align_tile(spec, image.dims);
    const SegmentGeometry geo = SegmentGeometry::for_spec(spec, tile);
    const PreparedVolume prepared = prepare_volume(image, geo);
    Block hires(1, spec.input_channels, geo.in_hi);
    Block lowres;
    if (geo.dual) lowres = Block(1, spec.input_channels, geo.in_lo);
    extract_segment(prepared, geo, Dims3(0, 0, 0), hires, geo.dual ? &lowres : nullptr, 0);
    ForwardOptions opts;
    opts.keep_outputs = true;
    auto trace = forward(params, hires, geo.dual ? &lowres : nullptr, opts);

    const i64 p = static_cast<i64>(spec.pathway_layers.size());
    auto layer_output = [&](i64 id) -> const Block& {
        if (id < p) return trace.path1[static_cast<std::size_t>(id)].output;
        if (spec.use_low_res_pathway && id < 2 * p)
            return trace.path2[static_cast<std::size_t>(id - p)].output;
        const i64 hidden_base = spec.use_low_res_pathway ? 2 * p : p;
        if (id < hidden_base + static_cast<i64>(spec.hidden_layers.size()))
            return trace.hidden[static_cast<std::size_t>(id - hidden_base)].output;
        return trace.classifier.output;
    };

    std::vector<FeatureMapDump> dumps;
    for (i64 id : layer_ids) {
        const Block& block = layer_output(id);
        FeatureMapDump d;
        d.layer = names[static_cast<std::size_t>(id)];
        d.layer_id = id;
        d.fms = Volume(block.fms, block.dims, image.spacing);
        for (i64 f = 0; f < block.fms; ++f) {
            const float* src = block.fm_ptr(0, f);
            std::copy(src, src + block.dims.voxels(), d.fms.channel(f).data());
        }
        dumps.push_back(std::move(d));
    }
    return dumps;
}

}  // namespace voxmed
