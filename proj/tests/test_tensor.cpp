#include <doctest.h>

#include "support.hpp"
#include "voxmed/tensor.hpp"

using namespace voxmed;
using namespace voxmed::testing;

TEST_SUITE_BEGIN("tensor");

TEST_CASE("conv3d: chained 5^3 kernels collapse a 17^3 input to a single voxel") {
    Rng rng(1);
    BlockT<float> x(1, 1, Dims3(17));
    randomize(x, rng);
    for (int i = 0; i < 4; ++i) {
        Kernel4D k(1, 1, Dims3(5));
        randomize(k, rng, -0.2, 0.2);
        x = conv3d_valid(x, k);
    }
    CHECK(x.dims == Dims3(1));
}

TEST_CASE("conv3d: all-zero input with zero bias stays zero") {
    BlockT<float> x(2, 3, Dims3(6, 5, 7));
    Kernel4D k(4, 3, Dims3(3));
    Rng rng(2);
    fill_uniform(k.weights, rng);
    auto y = conv3d_valid(x, k);
    for (float v : y.data) CHECK(v == 0.0f);
}

TEST_CASE("conv3d: matches the nested-loop oracle") {
    Rng rng(3);
    SUBCASE("spec example: 2-channel 7^3 input, 3x2x3^3 kernel") {
        BlockT<float> x(1, 2, Dims3(7));
        Kernel4D k(3, 2, Dims3(3));
        randomize(x, rng);
        randomize(k, rng);
        auto got = conv3d_valid(x, k);
        auto want = conv3d_oracle(x, k);
        CHECK(rel_error(got.data, want.data) < 1e-6);
    }
    SUBCASE("random shapes up to 9^3") {
        for (int trial = 0; trial < 12; ++trial) {
            const i64 cin = 1 + static_cast<i64>(rng.uniform_index(3));
            const i64 cout = 1 + static_cast<i64>(rng.uniform_index(3));
            const i64 ks = 1 + 2 * static_cast<i64>(rng.uniform_index(3));  // 1, 3 or 5
            Dims3 id{ks + static_cast<i64>(rng.uniform_index(5)),
                     ks + static_cast<i64>(rng.uniform_index(5)),
                     ks + static_cast<i64>(rng.uniform_index(5))};
            id.x = std::min<i64>(id.x, 9);
            id.y = std::min<i64>(id.y, 9);
            id.z = std::min<i64>(id.z, 9);
            BlockT<float> x(1 + static_cast<i64>(rng.uniform_index(2)), cin, id);
            Kernel4D k(cout, cin, Dims3(ks));
            randomize(x, rng);
            randomize(k, rng);
            auto got = conv3d_valid(x, k);
            auto want = conv3d_oracle(x, k);
            CHECK(rel_error(got.data, want.data) < 1e-6);
        }
    }
}

TEST_CASE("conv3d: translation covariance") {
    Rng rng(4);
    BlockT<float> x(1, 1, Dims3(8));
    randomize(x, rng);
    Kernel4D k(1, 1, Dims3(3));
    randomize(k, rng);
    // shift input by one voxel along x
    BlockT<float> xs(1, 1, Dims3(8));
    for (i64 z = 0; z < 8; ++z)
        for (i64 y = 0; y < 8; ++y)
            for (i64 xx = 1; xx < 8; ++xx) xs.at(0, 0, xx, y, z) = x.at(0, 0, xx - 1, y, z);
    auto y0 = conv3d_valid(x, k);
    auto y1 = conv3d_valid(xs, k);
    for (i64 z = 0; z < y0.dims.z; ++z)
        for (i64 yy = 0; yy < y0.dims.y; ++yy)
            for (i64 xx = 1; xx < y0.dims.x; ++xx)
                CHECK(y1.at(0, 0, xx, yy, z) == y0.at(0, 0, xx - 1, yy, z));
}

TEST_CASE("conv3d: rejects mismatched shapes naming the axis") {
    BlockT<float> x(1, 2, Dims3(4, 4, 2));
    Kernel4D k(1, 2, Dims3(3));
    CHECK_THROWS_WITH_AS(conv3d_valid(x, k), doctest::Contains("axis z"), Error);
    Kernel4D kc(1, 3, Dims3(1));
    CHECK_THROWS_AS(conv3d_valid(x, kc), Error);
}

TEST_CASE("conv3d backward: zero upstream gradient gives zero gradients") {
    Rng rng(5);
    BlockT<double> x(1, 2, Dims3(5));
    Kernel4DT<double> k(2, 2, Dims3(3));
    randomize(x, rng);
    randomize(k, rng);
    BlockT<double> gout(1, 2, Dims3(3));
    auto g = conv3d_backward(x, k, gout);
    for (double v : g.input.data) CHECK(v == 0.0);
    for (double v : g.kernel.weights) CHECK(v == 0.0);
    for (double v : g.kernel.bias) CHECK(v == 0.0);
}

TEST_CASE("conv3d backward: identity kernel routes a single-voxel gradient through") {
    BlockT<double> x(1, 1, Dims3(3));
    Kernel4DT<double> k(1, 1, Dims3(1));
    k.weights[0] = 1.0;
    BlockT<double> gout(1, 1, Dims3(3));
    gout.at(0, 0, 1, 2, 0) = 1.0;
    auto g = conv3d_backward(x, k, gout);
    CHECK(g.input.at(0, 0, 1, 2, 0) == 1.0);
    double total = 0.0;
    for (double v : g.input.data) total += std::abs(v);
    CHECK(total == 1.0);
}

TEST_CASE("conv3d backward: matches central finite differences") {
    Rng rng(6);
    for (int trial = 0; trial < 4; ++trial) {
        BlockT<double> x(2, 2, Dims3(5, 4, 5));
        Kernel4DT<double> k(2, 2, Dims3(3));
        randomize(x, rng);
        randomize(k, rng);
        BlockT<double> gout(2, 2, Dims3(3, 2, 3));
        randomize(gout, rng);

        auto objective = [&]() {
            auto y = conv3d_valid(x, k);
            double s = 0.0;
            for (std::size_t i = 0; i < y.data.size(); ++i) s += y.data[i] * gout.data[i];
            return s;
        };
        auto g = conv3d_backward(x, k, gout);
        CHECK(check_gradient(x.data, objective, g.input.data, rng) < 1e-4);
        CHECK(check_gradient(k.weights, objective, g.kernel.weights, rng) < 1e-4);
        CHECK(check_gradient(k.bias, objective, g.kernel.bias, rng, 4) < 1e-4);
    }
}

TEST_CASE("prelu: positive input is untouched, negative scales by the slope") {
    BlockT<float> x(1, 2, Dims3(2, 1, 1));
    x.at(0, 0, 0, 0, 0) = 3.0f;
    x.at(0, 0, 1, 0, 0) = -4.0f;
    x.at(0, 1, 0, 0, 0) = -2.0f;
    x.at(0, 1, 1, 0, 0) = 0.5f;
    const float slopes[2] = {0.25f, 0.0f};
    auto y = prelu(x, std::span<const float>(slopes, 2));
    CHECK(y.at(0, 0, 0, 0, 0) == 3.0f);
    CHECK(y.at(0, 0, 1, 0, 0) == -1.0f);   // 0.25 * -4
    CHECK(y.at(0, 1, 0, 0, 0) == 0.0f);    // slope 0 behaves like ReLU
    CHECK(y.at(0, 1, 1, 0, 0) == 0.5f);
    const float bad[1] = {0.1f};
    CHECK_THROWS_AS(prelu(x, std::span<const float>(bad, 1)), Error);
}

TEST_CASE("prelu backward: matches central finite differences") {
    Rng rng(7);
    BlockT<double> x(2, 3, Dims3(4));
    randomize(x, rng);
    std::vector<double> slopes{0.25, -0.3, 0.7};
    BlockT<double> gout(2, 3, Dims3(4));
    randomize(gout, rng);
    auto objective = [&]() {
        auto y = prelu<double>(x, slopes);
        double s = 0.0;
        for (std::size_t i = 0; i < y.data.size(); ++i) s += y.data[i] * gout.data[i];
        return s;
    };
    auto g = prelu_backward<double>(x, slopes, gout);
    CHECK(check_gradient(x.data, objective, g.input.data, rng) < 1e-4);
    CHECK(check_gradient(slopes, objective, g.slopes, rng, 3) < 1e-4);
}

TEST_CASE("softmax_channels: equal logits, exact values, shift invariance") {
    BlockT<float> logits(1, 2, Dims3(1));
    auto p = softmax_channels(logits);
    CHECK(p.at(0, 0, 0, 0, 0) == doctest::Approx(0.5));
    CHECK(p.at(0, 1, 0, 0, 0) == doctest::Approx(0.5));

    logits.at(0, 1, 0, 0, 0) = std::log(3.0f);
    p = softmax_channels(logits);
    CHECK(p.at(0, 0, 0, 0, 0) == doctest::Approx(0.25).epsilon(1e-6));
    CHECK(p.at(0, 1, 0, 0, 0) == doctest::Approx(0.75).epsilon(1e-6));

    Rng rng(8);
    BlockT<float> big(2, 4, Dims3(3));
    randomize(big, rng, -5.0, 5.0);
    auto p1 = softmax_channels(big);
    BlockT<float> shifted = big;
    for (i64 b = 0; b < big.batch; ++b)
        for (i64 f = 0; f < big.fms; ++f)
            for (i64 v = 0; v < big.dims.voxels(); ++v)
                shifted.fm_ptr(b, f)[v] += 7.25f;  // same constant at every voxel
    auto p2 = softmax_channels(shifted);
    CHECK(max_abs_diff(p1.data, p2.data) < 1e-6);

    // per-voxel sums
    for (i64 b = 0; b < big.batch; ++b)
        for (i64 v = 0; v < big.dims.voxels(); ++v) {
            double s = 0.0;
            for (i64 f = 0; f < big.fms; ++f) s += p1.fm_ptr(b, f)[v];
            CHECK(std::abs(s - 1.0) < 1e-6);
        }
}

TEST_CASE("upsample_repeat: factor 1 identity, cube replication") {
    BlockT<float> one(1, 1, Dims3(1));
    one.at(0, 0, 0, 0, 0) = 2.5f;
    CHECK(upsample_repeat(one, 1).data == one.data);
    auto up = upsample_repeat(one, 3);
    CHECK(up.dims == Dims3(3));
    for (float v : up.data) CHECK(v == 2.5f);

    BlockT<float> c(1, 1, Dims3(2));
    for (i64 i = 0; i < 8; ++i) c.data[static_cast<std::size_t>(i)] = static_cast<float>(i);
    auto u2 = upsample_repeat(c, 2);
    CHECK(u2.dims == Dims3(4));
    for (i64 z = 0; z < 4; ++z)
        for (i64 y = 0; y < 4; ++y)
            for (i64 x = 0; x < 4; ++x)
                CHECK(u2.at(0, 0, x, y, z) == c.at(0, 0, x / 2, y / 2, z / 2));
    CHECK_THROWS_AS(upsample_repeat(c, 0), Error);
}

TEST_CASE("downsample_block_average: identity, constants and the 1..27 mean") {
    Volume v(1, Dims3(3));
    for (i64 i = 0; i < 27; ++i) v.data[static_cast<std::size_t>(i)] = static_cast<float>(i + 1);
    auto d = downsample_block_average(v, 3);
    CHECK(d.dims == Dims3(1));
    CHECK(d.data[0] == doctest::Approx(14.0));

    Volume c(2, Dims3(7, 5, 4));
    for (auto& x : c.data) x = 3.25f;
    auto dc = downsample_block_average(c, 2);
    CHECK(dc.dims == Dims3(4, 3, 2));  // partial border blocks still average
    for (float x : dc.data) CHECK(x == doctest::Approx(3.25));
    CHECK(downsample_block_average(c, 1).data == c.data);
    CHECK_THROWS_AS(downsample_block_average(c, 0), Error);
}

TEST_CASE("downsample then upsample of a constant volume is the identity") {
    Volume v(1, Dims3(6));
    for (auto& x : v.data) x = -1.75f;
    auto d = downsample_block_average(v, 3);
    BlockT<float> b(1, 1, d.dims);
    std::copy(d.data.begin(), d.data.end(), b.data.begin());
    auto u = upsample_repeat(b, 3);
    CHECK(u.dims == v.dims);
    for (float x : u.data) CHECK(x == -1.75f);
}

TEST_CASE("crop_center: identity crop, rim drop, oversize rejection") {
    Rng rng(9);
    BlockT<float> x(1, 2, Dims3(5));
    randomize(x, rng);
    CHECK(crop_center(x, Dims3(5)).data == x.data);
    auto c = crop_center(x, Dims3(3));
    for (i64 z = 0; z < 3; ++z)
        for (i64 y = 0; y < 3; ++y)
            for (i64 xx = 0; xx < 3; ++xx)
                CHECK(c.at(0, 1, xx, y, z) == x.at(0, 1, xx + 1, y + 1, z + 1));
    // even margin: tie broken toward the lower index
    auto c2 = crop_center(x, Dims3(4));
    CHECK(c2.at(0, 0, 0, 0, 0) == x.at(0, 0, 0, 0, 0));
    CHECK_THROWS_AS(crop_center(x, Dims3(6)), Error);
}

TEST_CASE("concat_fms: counts add up, order preserved") {
    Rng rng(10);
    BlockT<float> a(2, 3, Dims3(4));
    BlockT<float> b(2, 4, Dims3(4));
    randomize(a, rng);
    randomize(b, rng);
    auto cat = concat_fms(a, b);
    CHECK(cat.fms == 7);
    CHECK(cat.at(1, 2, 1, 2, 3) == a.at(1, 2, 1, 2, 3));
    CHECK(cat.at(1, 5, 1, 2, 3) == b.at(1, 2, 1, 2, 3));
    BlockT<float> wrong(2, 1, Dims3(3));
    CHECK_THROWS_AS(concat_fms(a, wrong), Error);
}

TEST_CASE("pad_mirror: reflects without repeating the edge twice beyond it") {
    Volume v(1, Dims3(3, 1, 1));
    v.data = {1.0f, 2.0f, 3.0f};
    auto p = pad_mirror(v, Dims3(2, 0, 0), Dims3(2, 0, 0));
    std::vector<float> want{2.0f, 1.0f, 1.0f, 2.0f, 3.0f, 3.0f, 2.0f};
    CHECK(p.data == want);
}

TEST_CASE("flip_axis: involution and coordinate mapping") {
    Rng rng(11);
    Volume v(2, Dims3(5, 4, 3));
    fill_uniform(v.data, rng);
    auto f = flip_axis(v, 0);
    CHECK(f.at(1, 0, 2, 1) == v.at(1, 4, 2, 1));
    auto ff = flip_axis(f, 0);
    CHECK(ff.data == v.data);
}

TEST_SUITE_END();
