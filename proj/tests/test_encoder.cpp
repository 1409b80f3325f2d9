#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "bevflow/encoder.hpp"
#include "bevflow/synth.hpp"
#include "helpers.hpp"

using namespace bevflow;
using bevflow::testing::close;
using bevflow::testing::gradcheck;

namespace {

EncoderSpec toy_spec(int stride = 8) {
    EncoderSpec s;
    s.stride = stride;
    s.c_depth = 6;
    s.c_feat = 8;
    s.stage_channels = {8, 12, 16, 16};
    return s;
}

ImageSweep make_sweep(int64_t t, int64_t nc, int64_t h, int64_t w, Rng& rng) {
    ImageSweep sweep;
    sweep.images = Tensor::rand_uniform({t, nc, 3, h, w}, rng);
    sweep.rig = make_ring_rig(nc, h, w, 70.0, 1.6);
    sweep.trajectory.poses.resize(static_cast<size_t>(t));
    return sweep;
}

}  // namespace

TEST_CASE("encoder output shape contract across configs") {
    Rng rng(1);
    for (int stride : {4, 8}) {
        ImageEncoder enc(toy_spec(stride), rng);
        Tensor imgs = Tensor::rand_uniform({5, 3, 64, 32}, rng);
        Tensor out = enc.forward(imgs, false);
        CHECK(out.shape() == Shape{5, 6 + 8, 64 / stride, 32 / stride});
    }
}

TEST_CASE("all frames and cameras go through one batched pass") {
    Rng rng(2);
    ImageEncoder enc(toy_spec(), rng);
    ImageSweep sweep = make_sweep(3, 6, 32, 64, rng);
    EncodedSweep out = encode_images(sweep, enc, false);
    CHECK(out.depth_logits.shape() == Shape{3, 6, 6, 4, 8});
    CHECK(out.features.shape() == Shape{3, 6, 8, 4, 8});

    // identical to encoding the flattened batch of 18 in one call
    Tensor flat = enc.forward(reshape(sweep.images, {18, 3, 32, 64}), false);
    Tensor d = slice(flat, 1, 0, 6);
    for (size_t i = 0; i < d.data().size(); ++i) {
        CHECK(out.depth_logits.data()[i] == d.data()[i]);
    }
}

TEST_CASE("zero-weight encoder emits zeros and uniform depth") {
    Rng rng(3);
    ImageEncoder enc(toy_spec(), rng);
    ParamSet ps;
    enc.collect("enc", ps);
    for (auto& p : ps.trainable) {
        std::fill(p.value.mutable_data().begin(), p.value.mutable_data().end(), 0.0f);
    }
    ImageSweep sweep = make_sweep(1, 2, 32, 64, rng);
    EncodedSweep out = encode_images(sweep, enc, false);
    for (float v : out.features.data()) CHECK(v == 0.0f);
    Tensor probs = softmax(reshape(out.depth_logits, {2, 6, 4 * 8}), 1);
    for (float v : probs.data()) CHECK(close(v, 1.0f / 6.0f, 1e-6f, 1e-7f));
}

TEST_CASE("camera-order equivariance is exact") {
    Rng rng(4);
    ImageEncoder enc(toy_spec(), rng);
    ImageSweep sweep = make_sweep(2, 3, 32, 64, rng);
    EncodedSweep base = encode_images(sweep, enc, false);

    // swap cameras 0 and 2
    ImageSweep swapped = sweep;
    Tensor c0 = slice(sweep.images, 1, 0, 1);
    Tensor c1 = slice(sweep.images, 1, 1, 1);
    Tensor c2 = slice(sweep.images, 1, 2, 1);
    swapped.images = concat({c2, c1, c0}, 1);
    EncodedSweep perm = encode_images(swapped, enc, false);

    for (int64_t t = 0; t < 2; ++t) {
        for (int64_t ci = 0; ci < 3; ++ci) {
            const int64_t src = ci == 0 ? 2 : ci == 2 ? 0 : 1;
            Tensor a = slice(slice(base.features, 0, t, 1), 1, src, 1);
            Tensor b = slice(slice(perm.features, 0, t, 1), 1, ci, 1);
            REQUIRE(a.data().size() == b.data().size());
            for (size_t i = 0; i < a.data().size(); ++i) CHECK(a.data()[i] == b.data()[i]);
        }
    }
}

TEST_CASE("indivisible spatial size is a configuration error") {
    Rng rng(5);
    ImageEncoder enc(toy_spec(), rng);
    Tensor imgs = Tensor::rand_uniform({1, 3, 30, 64}, rng);
    CHECK_THROWS_AS(enc.forward(imgs, false), ConfigError);
    EncoderSpec bad = toy_spec();
    bad.stride = 3;
    CHECK_THROWS_AS(ImageEncoder(bad, rng), ConfigError);
}

TEST_CASE("gradient check through the full encoder") {
    Rng rng(6);
    EncoderSpec spec;
    spec.stride = 4;
    spec.c_depth = 3;
    spec.c_feat = 4;
    spec.stage_channels = {4, 6};
    ImageEncoder enc(spec, rng);
    Tensor imgs = Tensor::rand_uniform({2, 3, 16, 8}, rng, -1, 1, true);
    ParamSet ps;
    enc.collect("enc", ps);
    Rng wrng(7);
    Tensor lw = Tensor::rand_uniform({2, 7, 4, 2}, wrng, 0.1f, 0.4f);
    std::vector<Tensor> wrt = {imgs};
    for (auto& p : ps.trainable) wrt.push_back(p.value);
    auto res = gradcheck([&] { return sum_all(mul(enc.forward(imgs, true), lw)); }, wrt);
    CHECK_MESSAGE(res.ok, res.where, " analytic=", res.analytic, " numeric=", res.numeric);
}
