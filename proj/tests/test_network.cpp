#include <doctest.h>

#include <cmath>

#include "support.hpp"
#include "voxmed/network.hpp"
#include "voxmed/segments.hpp"

using namespace voxmed;
using namespace voxmed::testing;

TEST_SUITE_BEGIN("network");

namespace {

NetworkSpec tiny_single(i64 channels = 1, i64 classes = 2, bool bn = false) {
    NetworkSpec s;
    s.input_channels = channels;
    s.class_count = classes;
    s.pathway_layers = {{Dims3(3), 3, bn, 0.0, Activation::prelu, DropoutMode::fm},
                        {Dims3(3), 4, bn, 0.0, Activation::prelu, DropoutMode::fm}};
    s.hidden_layers = {{Dims3(1), 5, bn, 0.0, Activation::prelu, DropoutMode::voxel}};
    return s;
}

NetworkSpec tiny_dual(i64 channels = 1, i64 classes = 2, bool bn = false) {
    NetworkSpec s = tiny_single(channels, classes, bn);
    s.use_low_res_pathway = true;
    s.downsample_factor = 3;
    return s;
}

}  // namespace

TEST_CASE("receptive field: 4x5^3 and 8x3^3 both give 17^3, 1^3 gives 1") {
    auto phi5 = receptive_field(preset("shallow"));
    CHECK(phi5.back() == Dims3(17));
    auto phi3 = receptive_field(preset("deep"));
    CHECK(phi3.size() == 8);
    CHECK(phi3.back() == Dims3(17));

    NetworkSpec one;
    one.pathway_layers = {{Dims3(1), 4, false, 0.0, Activation::prelu, DropoutMode::fm}};
    CHECK(receptive_field(one).back() == Dims3(1));
}

TEST_CASE("fm dims: 25^3 -> 9^3, 17^3 -> 1^3, 19^3 -> 3^3, undersized rejected") {
    auto spec = preset("deep_plus");
    CHECK(fm_dims(spec, Dims3(25)).back().dims == Dims3(9));
    CHECK(fm_dims(spec, Dims3(17)).back().dims == Dims3(1));
    CHECK(fm_dims(spec, Dims3(19)).back().dims == Dims3(3));
    CHECK_THROWS_WITH_AS(fm_dims(spec, Dims3(16)), doctest::Contains("17x17x17"), Error);
}

TEST_CASE("dual pathway geometry: the published 25/19 segment pair") {
    auto spec = preset("deepmedic");
    auto g = dual_pathway_geometry(spec, Dims3(9));
    CHECK(g.input_hi == Dims3(25));
    CHECK(g.input_lo == Dims3(19));
    CHECK(g.out_lo == Dims3(3));
    CHECK(receptive_field_total(spec) * spec.downsample_factor == Dims3(51));

    // feeding the inputs back through fm_dims reproduces both output dims
    CHECK(fm_dims(spec, g.input_hi)[7].dims == Dims3(9));
    CHECK(fm_dims(spec, g.input_lo)[7].dims == Dims3(3));

    NetworkSpec f1 = spec;
    f1.downsample_factor = 1;
    auto g1 = dual_pathway_geometry(f1, Dims3(9));
    CHECK(g1.input_hi == g1.input_lo);
}

TEST_CASE("param count: 200k vs 86.4k and the 4.6 cost ratio") {
    NetworkSpec five;
    five.input_channels = 40;
    five.pathway_layers = {{Dims3(5), 40, false, 0.0, Activation::prelu, DropoutMode::fm}};
    CHECK(param_count(five).layers[0].weights == 200000);

    NetworkSpec three;
    three.input_channels = 40;
    three.pathway_layers = {{Dims3(3), 40, false, 0.0, Activation::prelu, DropoutMode::fm},
                            {Dims3(3), 40, false, 0.0, Activation::prelu, DropoutMode::fm}};
    auto pc = param_count(three);
    CHECK(pc.layers[0].weights + pc.layers[1].weights == 86400);

    const double ratio = 125.0 / 27.0;
    CHECK(std::round(ratio * 100.0) / 100.0 == doctest::Approx(4.63));

    NetworkSpec clf;
    clf.input_channels = 1;
    clf.pathway_layers = {{Dims3(1), 150, false, 0.0, Activation::prelu, DropoutMode::fm}};
    clf.class_count = 2;
    CHECK(param_count(clf).layers.back().weights == 300);
}

TEST_CASE("presets match the published architecture table") {
    auto dm = preset("deepmedic", 4, 5);
    CHECK(dm.use_low_res_pathway);
    CHECK(dm.downsample_factor == 3);
    REQUIRE(dm.pathway_layers.size() == 8);
    const i64 want[8] = {30, 30, 40, 40, 40, 40, 50, 50};
    for (int i = 0; i < 8; ++i) {
        CHECK(dm.pathway_layers[static_cast<std::size_t>(i)].fm_count == want[i]);
        CHECK(dm.pathway_layers[static_cast<std::size_t>(i)].kernel == Dims3(3));
        CHECK(dm.pathway_layers[static_cast<std::size_t>(i)].batch_norm);
    }
    REQUIRE(dm.hidden_layers.size() == 2);
    CHECK(dm.hidden_layers[0].fm_count == 150);
    CHECK(dm.hidden_layers[1].dropout_rate == doctest::Approx(0.5));
    CHECK(dm.class_count == 5);

    auto sh = preset("shallow");
    CHECK(sh.pathway_layers.size() == 4);
    CHECK(sh.pathway_layers[0].fm_count == 30);
    CHECK(sh.pathway_layers[3].fm_count == 50);
    CHECK(sh.pathway_layers[0].kernel == Dims3(5));
    CHECK_FALSE(sh.pathway_layers[0].batch_norm);
    CHECK_FALSE(sh.use_low_res_pathway);

    auto big = preset("big_deep_plus");
    CHECK(big.pathway_layers.front().fm_count == 60);
    CHECK(big.pathway_layers.back().fm_count == 100);
    CHECK(big.hidden_layers.size() == 2);

    CHECK_THROWS_AS(preset("colossal"), Error);
}

TEST_CASE("init_params: He and legacy statistics, determinism") {
    NetworkSpec s;
    s.input_channels = 32;  // n_in = 32 * 25 = 800
    s.pathway_layers = {{Dims3(5, 5, 1), 128, false, 0.0, Activation::prelu, DropoutMode::fm}};
    auto p = init_params<float>(s, 99, InitScheme::he);
    const auto& w = p.pathway1[0].kernel.weights;
    REQUIRE(w.size() == 32u * 25u * 128u);  // > 1e5 samples
    double mean = 0.0, sq = 0.0;
    for (float v : w) {
        mean += v;
        sq += static_cast<double>(v) * v;
    }
    mean /= static_cast<double>(w.size());
    const double std = std::sqrt(sq / static_cast<double>(w.size()) - mean * mean);
    const double want = std::sqrt(2.0 / 800.0);
    CHECK(std == doctest::Approx(want).epsilon(0.05));

    auto q = init_params<float>(s, 99, InitScheme::he);
    CHECK(q.pathway1[0].kernel.weights == w);

    auto legacy = init_params<float>(s, 11, InitScheme::legacy_gaussian);
    double sq2 = 0.0;
    for (float v : legacy.pathway1[0].kernel.weights) sq2 += static_cast<double>(v) * v;
    CHECK(std::sqrt(sq2 / static_cast<double>(w.size())) == doctest::Approx(0.01).epsilon(0.05));

    for (float b : p.pathway1[0].kernel.bias) CHECK(b == 0.0f);
    for (float sl : p.pathway1[0].prelu_slopes) CHECK(sl == 0.25f);
}

TEST_CASE("batch_norm: normalization statistics and degenerate inputs") {
    Rng rng(21);
    BlockT<double> x(3, 2, Dims3(4));
    randomize(x, rng, -3.0, 5.0);
    std::vector<double> scale{1.0, 1.0}, shift{0.0, 0.0};
    BnCache<double> cache;
    auto y = batch_norm_train<double>(x, scale, shift, cache);
    for (i64 f = 0; f < 2; ++f) {
        double s = 0.0, sq = 0.0;
        const i64 n = x.batch * x.dims.voxels();
        for (i64 b = 0; b < x.batch; ++b)
            for (i64 v = 0; v < x.dims.voxels(); ++v) {
                const double val = y.fm_ptr(b, f)[v];
                s += val;
                sq += val * val;
            }
        const double mean = s / static_cast<double>(n);
        CHECK(std::abs(mean) < 1e-3);
        CHECK(std::abs(sq / static_cast<double>(n) - mean * mean - 1.0) < 1e-3);
    }

    BlockT<double> flat(2, 1, Dims3(2));
    for (auto& v : flat.data) v = 4.0;  // zero variance
    std::vector<double> s1{1.0}, s0{0.0};
    BnCache<double> c2;
    auto z = batch_norm_train<double>(flat, s1, s0, c2);
    for (double v : z.data) CHECK(std::abs(v) < 1e-6);

    BlockT<double> single(1, 1, Dims3(1));
    CHECK_THROWS_AS(batch_norm_train<double>(single, s1, s0, c2), Error);
}

TEST_CASE("batch_norm backward: matches central finite differences") {
    Rng rng(22);
    BlockT<double> x(2, 2, Dims3(3));
    randomize(x, rng, -2.0, 2.0);
    std::vector<double> scale{1.3, 0.8}, shift{0.2, -0.4};
    BlockT<double> gout(2, 2, Dims3(3));
    randomize(gout, rng);

    auto objective = [&]() {
        BnCache<double> c;
        auto y = batch_norm_train<double>(x, scale, shift, c);
        double s = 0.0;
        for (std::size_t i = 0; i < y.data.size(); ++i) s += y.data[i] * gout.data[i];
        return s;
    };
    BnCache<double> cache;
    batch_norm_train<double>(x, scale, shift, cache);
    auto g = batch_norm_backward<double>(cache, scale, gout);
    CHECK(check_gradient(x.data, objective, g.input.data, rng) < 1e-4);
    CHECK(check_gradient(scale, objective, g.scale, rng, 2) < 1e-4);
    CHECK(check_gradient(shift, objective, g.shift, rng, 2) < 1e-4);
}

TEST_CASE("forward: input of exactly the receptive field yields one prediction") {
    auto spec = tiny_single();
    auto params = init_params<float>(spec, 7, InitScheme::he);
    BlockT<float> x(1, 1, Dims3(5));
    Rng rng(23);
    randomize(x, rng);
    auto trace = forward(params, x, {});
    CHECK(trace.posteriors.dims == Dims3(1));
    const float p0 = trace.posteriors.at(0, 0, 0, 0, 0);
    const float p1 = trace.posteriors.at(0, 1, 0, 0, 0);
    CHECK(p0 + p1 == doctest::Approx(1.0));
}

TEST_CASE("forward: zero classifier weights give uniform posteriors") {
    auto spec = tiny_single();
    auto params = init_params<float>(spec, 7, InitScheme::he);
    std::fill(params.classifier.kernel.weights.begin(), params.classifier.kernel.weights.end(),
              0.0f);
    std::fill(params.classifier.kernel.bias.begin(), params.classifier.kernel.bias.end(), 0.0f);
    BlockT<float> x(1, 1, Dims3(9));
    Rng rng(24);
    randomize(x, rng);
    auto trace = forward(params, x, {});
    for (float v : trace.posteriors.data) CHECK(v == doctest::Approx(0.5));
}

TEST_CASE("dense inference equals patch-wise inference") {
    Rng rng(25);

    auto run = [&](const NetworkSpec& spec) {
        auto params = init_params<float>(spec, 31, InitScheme::he);
        const Dims3 out_dims(6);  // multiple of the downsampling factor
        const auto geo = SegmentGeometry::for_spec(spec, out_dims);
        Volume image(spec.input_channels, Dims3(24));
        fill_uniform(image.data, rng);
        auto prepared = prepare_volume(image, geo);

        // dense pass over the region starting at the origin
        Block hi(1, spec.input_channels, geo.in_hi);
        Block lo(1, spec.input_channels, geo.dual ? geo.in_lo : Dims3(1));
        extract_segment(prepared, geo, Dims3(0, 0, 0), hi, geo.dual ? &lo : nullptr, 0);
        auto dense = forward(params, hi, geo.dual ? &lo : nullptr, {});
        REQUIRE(dense.posteriors.dims == out_dims);

        // patch-wise oracle: one independent forward per predicted voxel
        const auto pgeo = SegmentGeometry::for_spec(spec, Dims3(1));
        auto pprep = prepare_volume(image, pgeo);
        double worst = 0.0;
        for (i64 z = 0; z < out_dims.z; ++z)
            for (i64 y = 0; y < out_dims.y; ++y)
                for (i64 x = 0; x < out_dims.x; ++x) {
                    Block phi_blk(1, spec.input_channels, pgeo.in_hi);
                    Block plo(1, spec.input_channels, pgeo.dual ? pgeo.in_lo : Dims3(1));
                    extract_segment(pprep, pgeo, Dims3(x, y, z), phi_blk,
                                    pgeo.dual ? &plo : nullptr, 0);
                    auto single = forward(params, phi_blk, pgeo.dual ? &plo : nullptr, {});
                    for (i64 c = 0; c < spec.class_count; ++c)
                        worst = std::max(
                            worst, std::abs(static_cast<double>(
                                                single.posteriors.at(0, c, 0, 0, 0)) -
                                            dense.posteriors.at(0, c, x, y, z)));
                }
        return worst;
    };

    CHECK(run(tiny_single()) < 1e-5);
    CHECK(run(tiny_dual()) < 1e-5);
    CHECK(run(tiny_dual(2, 3, true)) < 1e-5);
}

TEST_CASE("connectivity probe: one output voxel sees exactly a phi-sized cube") {
    auto spec = tiny_single();
    auto params = init_params<float>(spec, 41, InitScheme::he);
    const Dims3 phi = receptive_field_total(spec);
    BlockT<float> x(1, 1, Dims3(9));
    Rng rng(26);
    randomize(x, rng);
    ForwardOptions opts;
    opts.keep_trace = true;
    auto trace = forward(params, x, opts);

    BlockT<float> grad_logits(1, 2, trace.logits.dims);
    grad_logits.at(0, 0, 2, 2, 2) = 1.0f;  // probe output voxel (2,2,2)
    auto grads = backward(params, x, static_cast<const Block*>(nullptr), trace, grad_logits);

    for (i64 z = 0; z < 9; ++z)
        for (i64 y = 0; y < 9; ++y)
            for (i64 xx = 0; xx < 9; ++xx) {
                const bool inside = xx >= 2 && xx < 2 + phi.x && y >= 2 && y < 2 + phi.y &&
                                    z >= 2 && z < 2 + phi.z;
                const bool nonzero = grads.grad_hires.at(0, 0, xx, y, z) != 0.0f;
                if (!inside) CHECK_FALSE(nonzero);
            }
    // every voxel of the cube reaches the probe through some path
    i64 nonzero_in_cube = 0;
    for (i64 z = 2; z < 2 + phi.z; ++z)
        for (i64 y = 2; y < 2 + phi.y; ++y)
            for (i64 xx = 2; xx < 2 + phi.x; ++xx)
                if (grads.grad_hires.at(0, 0, xx, y, z) != 0.0f) ++nonzero_in_cube;
    CHECK(nonzero_in_cube == phi.voxels());
}

TEST_CASE("forward: train mode uses batch statistics, infer mode the running ones") {
    auto spec = tiny_single(1, 2, true);
    auto params = init_params<float>(spec, 55, InitScheme::he);
    BlockT<float> x(2, 1, Dims3(7));
    Rng rng(27);
    randomize(x, rng);
    ForwardOptions train_opts;
    train_opts.mode = Mode::train;
    train_opts.keep_trace = true;
    Rng drop(1);
    train_opts.rng = &drop;
    auto t1 = forward(params, x, train_opts);
    commit_bn_running(params, t1);
    auto t2 = forward(params, x, {});
    CHECK(t1.posteriors.dims == t2.posteriors.dims);
    // running stats after one update are still dominated by the init values,
    // so infer differs from train
    CHECK(max_abs_diff(t1.posteriors.data, t2.posteriors.data) > 0.0);
}

TEST_CASE("scale_widths halves the published widths") {
    auto spec = scale_widths(preset("deepmedic"), 0.5);
    CHECK(spec.pathway_layers[0].fm_count == 15);
    CHECK(spec.pathway_layers[7].fm_count == 25);
    CHECK(spec.hidden_layers[0].fm_count == 75);
}

TEST_SUITE_END();
