#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "rap/metrics.hpp"

using namespace rap;

namespace {

Image flat(std::size_t h, std::size_t w, double v) { return Image(h, w, v); }

/// Brute-force greedy suppression: repeatedly take the best remaining
/// detection (earliest index on ties) and drop everything overlapping it.
std::vector<Detection> suppression_oracle(std::vector<Detection> dets, double thr) {
    std::vector<std::size_t> idx(dets.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::vector<Detection> kept;
    while (!idx.empty()) {
        auto best = idx.begin();
        for (auto it = idx.begin(); it != idx.end(); ++it) {
            if (dets[*it].score > dets[*best].score) best = it;
        }
        Detection d = dets[*best];
        kept.push_back(d);
        std::vector<std::size_t> rest;
        for (auto i : idx) {
            if (i != *best && !(iou(d.box, dets[i].box) > thr)) rest.push_back(i);
        }
        idx = rest;
    }
    return kept;
}

}  // namespace

TEST(Iou, IdenticalDisjointAndHalfOverlap) {
    Box a{10, 10, 4, 6};
    EXPECT_EQ(iou(a, a), 1.0);
    EXPECT_EQ(iou(a, Box{30, 30, 4, 4}), 0.0);
    EXPECT_DOUBLE_EQ(iou(Box{0, 0, 2, 2}, Box{1, 0, 2, 2}), 1.0 / 3.0);
}

TEST(Iou, SymmetricAndTranslationInvariant) {
    KeyedRng rng{21};
    for (int i = 0; i < 500; ++i) {
        Box a{rng.uniform(0, 30), rng.uniform(0, 30), rng.uniform(1, 20), rng.uniform(1, 20)};
        Box b{rng.uniform(0, 30), rng.uniform(0, 30), rng.uniform(1, 20), rng.uniform(1, 20)};
        EXPECT_EQ(iou(a, b), iou(b, a));
        Box at{a.x + 7, a.y - 3, a.w, a.h}, bt{b.x + 7, b.y - 3, b.w, b.h};
        EXPECT_NEAR(iou(at, bt), iou(a, b), 1e-12);
        EXPECT_GE(iou(a, b), 0.0);
        EXPECT_LE(iou(a, b), 1.0);
    }
}

TEST(Iou, DegenerateUnionIsZero) { EXPECT_EQ(iou(Box{1, 1, 0, 0}, Box{1, 1, 0, 0}), 0.0); }

TEST(Psnr, IdenticalImagesAreInfiniteAndSerializeAsSentinel) {
    auto a = flat(4, 4, 10);
    EXPECT_TRUE(std::isinf(psnr_luminance(a, a)));
    EXPECT_EQ(serializable_psnr(psnr_luminance(a, a)), 999.0);
}

TEST(Psnr, ClosedFormForUniformOffsets) {
    auto a = flat(3, 5, 0.0);
    auto b = flat(3, 5, 1.0);
    EXPECT_NEAR(psnr_luminance(a, b), 20.0 * std::log10(255.0), 1e-9);
    EXPECT_NEAR(psnr_luminance(a, b), 48.13, 0.005);
    EXPECT_NEAR(psnr_luminance(a, flat(3, 5, 255.0)), 0.0, 1e-9);
}

TEST(Psnr, UsesLuminanceWeights) {
    auto a = flat(2, 2, 100.0);
    auto b = a;
    for (std::size_t i = 0; i < b.pixels.size(); i += 3) b.pixels[i] += 10.0;  // red only
    EXPECT_NEAR(psnr_luminance(a, b), 20.0 * std::log10(255.0 / (0.299 * 10.0)), 1e-9);
}

TEST(Psnr, DecreasesWithOffsetMagnitude) {
    auto a = flat(4, 4, 50.0);
    double prev = std::numeric_limits<double>::infinity();
    for (double d = 0.5; d < 100.0; d *= 1.5) {
        double p = psnr_luminance(a, flat(4, 4, 50.0 + d));
        EXPECT_LT(p, prev);
        prev = p;
    }
}

TEST(Psnr, RejectsShapeMismatch) { EXPECT_THROW(psnr_luminance(flat(2, 2, 0), flat(2, 3, 0)), std::invalid_argument); }

TEST(Nms, SingleDetectionUnchanged) {
    std::vector<Detection> d{{Box{5, 5, 4, 4}, 0.3}};
    auto k = nms(d);
    ASSERT_EQ(k.size(), 1u);
    EXPECT_EQ(k[0].box, d[0].box);
}

TEST(Nms, IdenticalBoxesKeepHigherScore) {
    auto k = nms({{Box{5, 5, 4, 4}, 0.8}, {Box{5, 5, 4, 4}, 0.9}});
    ASSERT_EQ(k.size(), 1u);
    EXPECT_EQ(k[0].score, 0.9);
}

TEST(Nms, ChainKeepsFirstAndThird) {
    // Widths 10 at x = 0, 2.5, 5: IoU(a,b) = IoU(b,c) = 0.6, IoU(a,c) = 1/3.
    Box a{0, 0, 10, 10}, b{2.5, 0, 10, 10}, c{5, 0, 10, 10};
    ASSERT_NEAR(iou(a, b), 0.6, 1e-12);
    ASSERT_NEAR(iou(b, c), 0.6, 1e-12);
    auto k = nms({{a, 0.9}, {b, 0.8}, {c, 0.7}}, 0.5);
    ASSERT_EQ(k.size(), 2u);
    EXPECT_EQ(k[0].box, a);
    EXPECT_EQ(k[1].box, c);
}

TEST(Nms, TiesKeepEarlierIndex) {
    auto k = nms({{Box{5, 5, 4, 4}, 0.5}, {Box{5.1, 5, 4, 4}, 0.5}});
    ASSERT_EQ(k.size(), 1u);
    EXPECT_EQ(k[0].box.x, 5.0);
}

TEST(Nms, MatchesBruteForceOracle) {
    KeyedRng rng{22};
    for (int c = 0; c < 2000; ++c) {
        std::size_t n = static_cast<std::size_t>(rng.integer(0, 8));
        std::vector<Detection> d;
        for (std::size_t i = 0; i < n; ++i) {
            d.push_back({Box{double(rng.integer(0, 10)), double(rng.integer(0, 10)), double(rng.integer(2, 8)),
                             double(rng.integer(2, 8))},
                         0.25 * double(rng.integer(0, 4))});
        }
        double thr = rng.uniform(0.05, 1.0);
        auto got = nms(d, thr);
        auto want = suppression_oracle(d, thr);
        ASSERT_EQ(got.size(), want.size());
        for (std::size_t i = 0; i < got.size(); ++i) {
            EXPECT_EQ(got[i].box, want[i].box);
            EXPECT_EQ(got[i].score, want[i].score);
        }
    }
}

TEST(Nms, RejectsBadThreshold) {
    EXPECT_THROW(nms({}, 0.0), std::invalid_argument);
    EXPECT_THROW(nms({}, 1.5), std::invalid_argument);
}

TEST(AveragePrecision, HandEnumeratedFixtures) {
    GroundTruth one{{Box{10, 10, 8, 8}}};
    Detection tp{Box{10, 10, 8, 8}, 0.9}, fp{Box{40, 40, 8, 8}, 0.8};
    EXPECT_EQ(average_precision({{tp, fp}}, {one}, 0.5), 1.0);
    tp.score = 0.8;
    fp.score = 0.9;
    EXPECT_EQ(average_precision({{tp, fp}}, {one}, 0.5), 0.5);
}

TEST(AveragePrecision, PerfectAndEmpty) {
    GroundTruth t{{Box{10, 10, 8, 8}, Box{30, 30, 8, 8}}};
    EXPECT_EQ(average_precision({{{t.boxes[0], 1.0}, {t.boxes[1], 1.0}}}, {t}, 0.5), 1.0);
    EXPECT_EQ(average_precision({{}}, {t}, 0.5), 0.0);
}

TEST(AveragePrecision, EnvelopeOverTwoScenes) {
    // Sweep: TP(0.9,s0) FP(0.8,s1) TP(0.7,s1), 3 truths.
    // Precision/recall: 1/1 @1/3, 1/2 @1/3, 2/3 @2/3. AP = 1/3*1 + 1/3*2/3.
    GroundTruth t0{{Box{10, 10, 8, 8}, Box{40, 40, 8, 8}}};
    GroundTruth t1{{Box{20, 20, 8, 8}}};
    std::vector<std::vector<Detection>> dets{{{t0.boxes[0], 0.9}}, {{Box{50, 5, 6, 6}, 0.8}, {t1.boxes[0], 0.7}}};
    EXPECT_NEAR(average_precision(dets, {t0, t1}, 0.5), 1.0 / 3.0 + 2.0 / 9.0, 1e-15);
}

TEST(AveragePrecision, DuplicatesAreFalsePositives) {
    GroundTruth t{{Box{10, 10, 8, 8}}};
    auto m = match_and_score({{{t.boxes[0], 0.9}, {t.boxes[0], 0.8}}}, {t}, 0.5);
    EXPECT_EQ(m.matched_truths, 1u);
    EXPECT_EQ(m.ap, 1.0);
}

TEST(AveragePrecision, LowScoreZeroIouFalsePositiveNeverHelps) {
    KeyedRng rng{23};
    for (int c = 0; c < 200; ++c) {
        GroundTruth t;
        std::vector<Detection> d;
        for (int i = 0; i < 3; ++i) {
            Box b{rng.uniform(5, 30), rng.uniform(5, 30), rng.uniform(4, 10), rng.uniform(4, 10)};
            t.boxes.push_back(b);
            d.push_back({Box{b.x + rng.uniform(-3, 3), b.y, b.w, b.h}, rng.uniform(0.2, 1.0)});
        }
        double base = average_precision({d}, {t}, 0.5);
        d.push_back({Box{200, 200, 5, 5}, 0.01});
        EXPECT_LE(average_precision({d}, {t}, 0.5), base);
        EXPECT_GE(base, 0.0);
        EXPECT_LE(base, 1.0);
    }
}

TEST(AveragePrecision, ResultIsIndependentOfSceneOrderWithinTies) {
    GroundTruth t0{{Box{10, 10, 8, 8}}}, t1{{Box{30, 30, 8, 8}}};
    std::vector<std::vector<Detection>> a{{{t0.boxes[0], 0.5}, {Box{50, 50, 4, 4}, 0.5}}, {{t1.boxes[0], 0.5}}};
    double ap = average_precision(a, {t0, t1}, 0.5);
    EXPECT_EQ(ap, average_precision(a, {t0, t1}, 0.5));
    EXPECT_GE(ap, 0.0);
}

TEST(AveragePrecision, RejectsZeroTruths) {
    EXPECT_THROW(average_precision({{}}, {GroundTruth{}}, 0.5), std::invalid_argument);
}

TEST(Evaluate, ZeroPerturbationEqualsClean) {
    ArchitectureDescriptor d;
    d.depth = 2;
    d.width = 4;
    d.kernel = 3;
    auto m = make_model(d);
    auto scenes = generate_dataset(1, 5, GeometryConfig{});
    std::vector<std::vector<double>> zeros(5, std::vector<double>(64 * 64 * 3, 0.0));
    auto a = evaluate(m, scenes);
    auto b = evaluate(m, scenes, &zeros);
    EXPECT_EQ(a.ap50, b.ap50);
    EXPECT_EQ(a.ap70, b.ap70);
    EXPECT_EQ(a.recall50, b.recall50);
    EXPECT_LE(a.detections, 5u * 50u);
}

TEST(Evaluate, RejectsMismatchedPerturbations) {
    ArchitectureDescriptor d;
    d.depth = 2;
    d.width = 4;
    auto m = make_model(d);
    auto scenes = generate_dataset(1, 2, GeometryConfig{});
    std::vector<std::vector<double>> wrong(2, std::vector<double>(10, 0.0));
    EXPECT_THROW(evaluate(m, scenes, &wrong), std::invalid_argument);
    wrong.resize(1);
    EXPECT_THROW(evaluate(m, scenes, &wrong), std::invalid_argument);
}
