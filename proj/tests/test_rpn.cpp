#include <cmath>
#include <filesystem>

#include <gtest/gtest.h>

#include "rap/rpn.hpp"

using namespace rap;
namespace fs = std::filesystem;

namespace {

ArchitectureDescriptor small_descriptor(std::uint64_t seed = 1) {
    ArchitectureDescriptor d;
    d.name = "small";
    d.depth = 2;
    d.width = 4;
    d.kernel = 3;
    d.seed = seed;
    return d;
}

}  // namespace

TEST(Anchors, SingleCellCenter) {
    AnchorConfig cfg{16, {32.0}, {1.0}};
    auto a = generate_anchors(cfg, 1, 1);
    ASSERT_EQ(a.size(), 1u);
    EXPECT_EQ(a[0], (Box{8, 8, 32, 32}));
}

TEST(Anchors, CountIsCellsTimesPerCell) {
    AnchorConfig cfg{8, {16.0, 32.0, 64.0}, {0.5, 2.0}};
    EXPECT_EQ(generate_anchors(cfg, 4, 4).size(), 96u);
}

TEST(Anchors, RatioIsHeightOverWidth) {
    AnchorConfig cfg{8, {32.0}, {2.0}};
    auto a = generate_anchors(cfg, 1, 1)[0];
    EXPECT_NEAR(a.w, 32.0 / std::sqrt(2.0), 1e-12);
    EXPECT_NEAR(a.h, 32.0 * std::sqrt(2.0), 1e-12);
    EXPECT_NEAR(a.w, 22.63, 0.01);
    EXPECT_NEAR(a.h, 45.25, 0.01);
}

TEST(Anchors, OrderIsCellThenScaleThenRatio) {
    AnchorConfig cfg;
    auto a = generate_anchors(cfg, 8, 8);
    ASSERT_EQ(a.size(), 256u);
    // Cell (0,1), scale 32, ratio 1 is index (0*8+1)*4 + 1*2 + 0.
    EXPECT_EQ(a[6], (Box{12, 4, 32, 32}));
    EXPECT_EQ(a[255].x, 60.0);
    EXPECT_EQ(a[255].y, 60.0);
}

TEST(BoxCoding, ZeroOffsetsDecodeToAnchor) {
    Box anchor{8, 8, 32, 32};
    EXPECT_EQ(decode_box(anchor, {}), anchor);
}

TEST(BoxCoding, LogTwoDoublesWidth) {
    Box anchor{8, 8, 32, 16};
    auto b = decode_box(anchor, {0, 0, std::log(2.0), 0});
    EXPECT_NEAR(b.w, 64.0, 1e-12);
    EXPECT_EQ(b.h, 16.0);
    EXPECT_EQ(b.x, 8.0);
    EXPECT_EQ(b.y, 8.0);
}

TEST(BoxCoding, UnitShiftMovesByAnchorWidth) {
    EXPECT_EQ(decode_box(Box{8, 8, 32, 32}, {1, 0, 0, 0}).x, 40.0);
}

TEST(BoxCoding, ScaleExponentIsClamped) {
    auto b = decode_box(Box{8, 8, 2, 2}, {0, 0, 1e5, 1e5});
    EXPECT_EQ(b.w, 2.0 * std::exp(kMaxLogScale));
    EXPECT_TRUE(std::isfinite(b.h));
}

TEST(BoxCoding, EncodeThenDecodeIsIdentity) {
    KeyedRng rng{9};
    for (int i = 0; i < 1000; ++i) {
        Box anchor{rng.uniform(0, 64), rng.uniform(0, 64), rng.uniform(4, 50), rng.uniform(4, 50)};
        Box target{rng.uniform(0, 64), rng.uniform(0, 64), rng.uniform(4, 50), rng.uniform(4, 50)};
        auto back = decode_box(anchor, encode_box(anchor, target));
        EXPECT_NEAR(back.x, target.x, 1e-9 * std::abs(target.x));
        EXPECT_NEAR(back.y, target.y, 1e-9 * std::abs(target.y));
        EXPECT_NEAR(back.w, target.w, 1e-9 * target.w);
        EXPECT_NEAR(back.h, target.h, 1e-9 * target.h);
    }
}

TEST(Descriptor, DefaultPoolScheduleMultipliesToStride) {
    for (std::size_t depth : {1, 2, 3, 4, 5}) {
        ArchitectureDescriptor d;
        d.depth = depth;
        auto pools = d.pool_factors();
        ASSERT_EQ(pools.size(), depth);
        std::size_t prod = 1;
        for (auto p : pools) prod *= p;
        EXPECT_EQ(prod, 8u) << "depth " << depth;
    }
}

TEST(Descriptor, RejectsInvalidPools) {
    ArchitectureDescriptor d;
    d.depth = 2;
    d.pools = {2, 2};
    EXPECT_THROW(d.validate(), std::invalid_argument);
    d.pools = {8, 1, 1};
    EXPECT_THROW(d.validate(), std::invalid_argument);
}

TEST(Descriptor, JsonRoundTrip) {
    ArchitectureDescriptor d = small_descriptor(5);
    d.pools = {4, 2};
    EXPECT_EQ(ArchitectureDescriptor::from_json(d.to_json()), d);
}

TEST(Model, EqualDescriptorsGiveIdenticalParameters) {
    auto a = make_model(small_descriptor(3)), b = make_model(small_descriptor(3)), c = make_model(small_descriptor(4));
    ASSERT_EQ(a.parameters.size(), b.parameters.size());
    bool differs = false;
    for (std::size_t i = 0; i < a.parameters.size(); ++i) {
        EXPECT_EQ(a.parameters[i].name, b.parameters[i].name);
        auto va = a.parameters[i].value.values(), vb = b.parameters[i].value.values();
        EXPECT_TRUE(std::equal(va.begin(), va.end(), vb.begin(), vb.end()));
        auto vc = c.parameters[i].value.values();
        differs = differs || !std::equal(va.begin(), va.end(), vc.begin(), vc.end());
    }
    EXPECT_TRUE(differs);
}

TEST(Model, HeadsEmitOneAndFourChannelsPerAnchor) {
    auto m = make_model(small_descriptor());
    EXPECT_EQ(m.parameter("objectness.weight").shape()[0], 4u);
    EXPECT_EQ(m.parameter("offsets.weight").shape()[0], 16u);
}

TEST(Forward, ZeroParametersGiveHalfScoresAndZeroOffsets) {
    auto m = zero_model(small_descriptor());
    auto img = generate_scene(1, 0, GeometryConfig{}).image;
    auto ps = forward(m, img);
    ASSERT_EQ(ps.size(), 256u);
    for (const auto& p : ps.proposals()) {
        EXPECT_EQ(p.score, 0.5);
        EXPECT_EQ(p.offsets.dx, 0.0);
        EXPECT_EQ(p.offsets.dh, 0.0);
        EXPECT_EQ(p.decoded, p.anchor);
    }
}

TEST(Forward, LengthMatchesAnchorGrid) {
    auto m = make_model(small_descriptor());
    Image img(32, 48, 100.0);
    auto ps = forward(m, img);
    EXPECT_EQ(ps.size(), generate_anchors(m.descriptor.anchors, 4, 6).size());
}

TEST(Forward, IsBitwiseDeterministic) {
    auto m = make_model(small_descriptor());
    auto img = generate_scene(1, 3, GeometryConfig{}).image;
    auto a = forward(m, img), b = forward(m, img);
    auto sa = a.scores.values(), sb = b.scores.values();
    EXPECT_TRUE(std::equal(sa.begin(), sa.end(), sb.begin(), sb.end()));
    auto oa = a.offsets.values(), ob = b.offsets.values();
    EXPECT_TRUE(std::equal(oa.begin(), oa.end(), ob.begin(), ob.end()));
}

TEST(Forward, RejectsStrideMismatch) {
    auto m = make_model(small_descriptor());
    EXPECT_THROW(forward(m, Image(60, 64, 0.0)), std::invalid_argument);
}

TEST(Forward, ScoreGradientPassesFiniteDifferenceCheck) {
    auto d = small_descriptor(2);
    d.input_height = d.input_width = 16;
    auto m = make_model(d);
    KeyedRng rng{17};
    Image img(16, 16);
    for (auto& v : img.pixels) v = rng.uniform(0, 255);
    for (std::size_t j : {0u, 5u, 14u}) {
        double err = ad::finite_diff_check(
            [&](const ad::Tensor& t) {
                auto ps = forward(m, t);
                std::vector<std::uint8_t> pick(ps.size(), 0);
                pick[j] = 1;
                return ad::sum(ad::masked_select(ps.scores, ps.score_mask(pick)));
            },
            image_tensor(img), 1e-3);
        EXPECT_LT(err, 1e-4) << "proposal " << j;
    }
}

TEST(Assignment, ThresholdsAndBestAnchor) {
    std::vector<Box> anchors{{10, 10, 10, 10}, {12, 10, 10, 10}, {40, 40, 10, 10}, {17, 10, 10, 10}};
    GroundTruth truth{{Box{10, 10, 10, 10}}};
    auto a = assign_anchors(anchors, truth);
    EXPECT_EQ(a.labels[0], 1);   // IoU 1
    EXPECT_EQ(a.labels[1], -1);  // IoU 80/120 lies between the thresholds
    EXPECT_EQ(a.labels[2], 0);   // disjoint
    EXPECT_EQ(a.labels[3], 0);   // IoU 30/170
}

TEST(Assignment, BestAnchorIsPositiveEvenBelowThreshold) {
    std::vector<Box> anchors{{10, 10, 10, 10}, {40, 40, 10, 10}};
    GroundTruth truth{{Box{14, 10, 10, 10}}};  // IoU 6/14 with the first anchor
    auto a = assign_anchors(anchors, truth);
    EXPECT_EQ(a.labels[0], 1);
    EXPECT_EQ(a.matched[0], 0u);
    EXPECT_EQ(a.labels[1], 0);
}

TEST(Training, ZeroEpochsLeavesModelUnchanged) {
    auto m = make_model(small_descriptor());
    TrainingConfig cfg;
    cfg.epochs = 0;
    auto r = train_rpn(m, generate_dataset(1, 3, GeometryConfig{}), cfg);
    EXPECT_TRUE(r.loss_history.empty());
    EXPECT_EQ(encode_checkpoint(r.model), encode_checkpoint(m));
}

TEST(Training, SkipsScenesWithoutTruth) {
    auto scenes = generate_dataset(1, 3, GeometryConfig{});
    scenes[1].truth.boxes.clear();
    TrainingConfig cfg;
    cfg.epochs = 1;
    auto r = train_rpn(make_model(small_descriptor()), scenes, cfg);
    EXPECT_EQ(r.skipped_images, 1u);
    EXPECT_THROW(train_rpn(make_model(small_descriptor()), {}, cfg), std::invalid_argument);
}

TEST(Training, LossDecreasesAndRunsAreReproducible) {
    auto scenes = generate_dataset(1, 40, GeometryConfig{});
    TrainingConfig cfg;
    cfg.epochs = 4;
    auto a = train_rpn(make_model(small_descriptor()), scenes, cfg);
    auto b = train_rpn(make_model(small_descriptor()), scenes, cfg);
    ASSERT_EQ(a.loss_history.size(), 4u);
    EXPECT_LT(a.loss_history.back(), a.loss_history.front());
    EXPECT_EQ(a.loss_history, b.loss_history);
    EXPECT_EQ(encode_checkpoint(a.model), encode_checkpoint(b.model));
}

TEST(Training, LossGradientPassesFiniteDifferenceCheck) {
    auto d = small_descriptor();
    auto m = make_model(d);
    // Zero biases put dead-input pre-activations exactly on the ReLU kink.
    for (auto& p : m.parameters) {
        if (p.name.starts_with("backbone") && p.name.ends_with("bias")) p.value = ad::Tensor::full(p.value.shape(), 0.05);
    }
    auto scene = generate_scene(1, 0, GeometryConfig{});
    auto anchors = generate_anchors(d.anchors, 8, 8);
    auto assign = assign_anchors(anchors, scene.truth);
    auto img = image_tensor(scene.image);
    TrainingConfig cfg;
    auto params = parameter_values(m);
    for (std::size_t p : {std::size_t{0}, std::size_t{3}, params.size() - 4, params.size() - 1}) {
        double err = ad::finite_diff_check(
            [&](const ad::Tensor& t) {
                auto local = params;
                local[p] = t;
                KeyedRng rng{1};
                return detail::rpn_training_loss(forward_with(d, local, img), assign, scene.truth, cfg, rng);
            },
            params[p], 1e-5);
        EXPECT_LT(err, 1e-4) << m.parameters[p].name;
    }
}

TEST(Checkpoint, RoundTripsBitwise) {
    auto dir = fs::temp_directory_path() / "rap_ckpt";
    fs::create_directories(dir);
    auto d = small_descriptor(7);
    d.pools = {4, 2};
    auto m = make_model(d);
    save_checkpoint(dir / "m.rapm", m);
    auto back = load_checkpoint(dir / "m.rapm");
    EXPECT_EQ(back.descriptor, m.descriptor);
    EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(m));
}

TEST(Checkpoint, RejectsCorruption) {
    auto bytes = encode_checkpoint(make_model(small_descriptor()));
    auto truncated = bytes;
    truncated.resize(bytes.size() - 5);
    EXPECT_THROW(decode_checkpoint(truncated), io::FormatError);
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_THROW(decode_checkpoint(bad_magic), io::FormatError);
    auto bad_version = bytes;
    bad_version[4] = 9;
    EXPECT_THROW(decode_checkpoint(bad_version), io::FormatError);
    auto trailing = bytes;
    trailing.push_back(0);
    EXPECT_THROW(decode_checkpoint(trailing), io::FormatError);
}
