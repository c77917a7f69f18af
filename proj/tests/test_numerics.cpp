#include <gtest/gtest.h>

#include "rap/numerics.hpp"
#include "rap/random.hpp"

namespace ad = rap::ad;
using ad::Tensor;

namespace {

Tensor vec(std::vector<double> v) {
    auto n = v.size();
    return Tensor({n}, std::move(v));
}

Tensor random_tensor(rap::KeyedRng& rng, ad::Shape shape, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(ad::element_count(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(v));
}

/// Naive quadruple-loop convolution used as an oracle.
std::vector<double> conv_oracle(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
                                std::size_t pad) {
    const auto C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    const auto O = w.shape()[0], K = w.shape()[2];
    const auto OH = (H + 2 * pad - K) / stride + 1, OW = (W + 2 * pad - K) / stride + 1;
    std::vector<double> out(O * OH * OW);
    for (std::size_t o = 0; o < O; ++o) {
        for (std::size_t i = 0; i < OH; ++i) {
            for (std::size_t j = 0; j < OW; ++j) {
                double acc = b[o];
                for (std::size_t c = 0; c < C; ++c) {
                    for (std::size_t ki = 0; ki < K; ++ki) {
                        for (std::size_t kj = 0; kj < K; ++kj) {
                            long r = long(i * stride + ki) - long(pad), s = long(j * stride + kj) - long(pad);
                            if (r < 0 || s < 0 || r >= long(H) || s >= long(W)) continue;
                            acc += x[(c * H + r) * W + s] * w[((o * C + c) * K + ki) * K + kj];
                        }
                    }
                }
                out[(o * OH + i) * OW + j] = acc;
            }
        }
    }
    return out;
}

}  // namespace

TEST(Tensor, RejectsMismatchedValueCount) {
    EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), std::invalid_argument);
    EXPECT_THROW(Tensor({0, 3}, std::vector<double>{}), std::invalid_argument);
}

TEST(Tensor, ScalarItem) {
    EXPECT_EQ(Tensor::scalar(3.5).item(), 3.5);
    EXPECT_THROW(vec({1, 2}).item(), std::invalid_argument);
}

TEST(Ops, SigmoidOfZeroIsHalf) { EXPECT_EQ(ad::sigmoid(Tensor::scalar(0.0)).item(), 0.5); }

TEST(Ops, SigmoidIsStableForLargeMagnitudes) {
    auto s = ad::sigmoid(vec({-800.0, 800.0}));
    EXPECT_EQ(s[0], 0.0);
    EXPECT_EQ(s[1], 1.0);
}

TEST(Ops, IdentityKernelConvolutionReturnsInput) {
    rap::KeyedRng rng{1};
    auto x = random_tensor(rng, {2, 5, 4});
    Tensor w({2, 2, 1, 1}, {1, 0, 0, 1});
    auto y = ad::conv2d(x, w, Tensor::zeros({2}), {1, 0});
    ASSERT_EQ(y.shape(), x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Ops, ConvolutionMatchesQuadrupleLoopOracle) {
    rap::KeyedRng rng{2};
    auto x = random_tensor(rng, {3, 9, 7});
    auto w = random_tensor(rng, {4, 3, 3, 3});
    auto b = random_tensor(rng, {4});
    for (std::size_t stride : {1, 2, 3}) {
        for (std::size_t pad : {0, 1, 2}) {
            auto y = ad::conv2d(x, w, b, {stride, pad});
            auto want = conv_oracle(x, w, b, stride, pad);
            ASSERT_EQ(y.size(), want.size());
            for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(y[i], want[i], 1e-12);
        }
    }
}

TEST(Ops, ConvolutionRejectsChannelMismatch) {
    EXPECT_THROW(ad::conv2d(Tensor::zeros({2, 4, 4}), Tensor::zeros({1, 3, 1, 1}), Tensor::zeros({1}), {1, 0}),
                 std::invalid_argument);
}

TEST(Ops, MaxPoolTakesWindowMaximum) {
    Tensor x({1, 2, 4}, {1, 5, 2, 2, 3, 4, 9, 0});
    auto y = ad::max_pool2d(x, 2);
    ASSERT_EQ(y.shape(), (ad::Shape{1, 1, 2}));
    EXPECT_EQ(y[0], 5);
    EXPECT_EQ(y[1], 9);
}

TEST(Ops, MaskedSelectKeepsRowMajorOrder) {
    auto y = ad::masked_select(vec({1, 2, 3, 4}), {0, 1, 0, 1});
    ASSERT_EQ(y.size(), 2u);
    EXPECT_EQ(y[0], 2);
    EXPECT_EQ(y[1], 4);
    EXPECT_THROW(ad::masked_select(vec({1, 2}), {1}), std::invalid_argument);
}

TEST(Ops, ShapeMismatchDiagnosticNamesOpAndShapes) {
    try {
        ad::mul(vec({1, 2}), vec({1, 2, 3}));
        FAIL() << "expected a throw";
    } catch (const std::invalid_argument& e) {
        std::string what = e.what();
        EXPECT_NE(what.find("mul"), std::string::npos);
        EXPECT_NE(what.find("[2]"), std::string::npos);
        EXPECT_NE(what.find("[3]"), std::string::npos);
    }
}

TEST(Ops, LogRejectsNonPositive) {
    EXPECT_THROW(ad::log(vec({1.0, 0.0})), std::domain_error);
    EXPECT_THROW(ad::log(vec({-1.0})), std::domain_error);
}

TEST(Ops, NonFiniteResultsAreRejected) { EXPECT_THROW(ad::exp(vec({1000.0})), std::domain_error); }

TEST(Backward, SumOfSquaresGradient) {
    ad::Tape tape;
    auto x = tape.variable(vec({1, 2}));
    auto y = ad::sum(ad::square(x));
    EXPECT_EQ(y.item(), 5.0);
    auto g = tape.backward(y).wrt(x);
    EXPECT_EQ(g[0], 2.0);
    EXPECT_EQ(g[1], 4.0);
}

TEST(Backward, IndependentLeafHasZeroGradient) {
    ad::Tape tape;
    auto x = tape.variable(vec({1, 2, 3}));
    auto y = tape.variable(vec({4, 5}));
    auto g = tape.backward(ad::sum(ad::square(y))).wrt(x);
    for (double v : g.values()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, SumGivesOnes) {
    ad::Tape tape;
    auto x = tape.variable(Tensor::full({2, 3}, 7.0));
    auto g = tape.backward(ad::sum(x)).wrt(x);
    for (double v : g.values()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, SigmoidAtZeroGivesQuarter) {
    ad::Tape tape;
    auto x = tape.variable(Tensor::zeros({4}));
    auto g = tape.backward(ad::sum(ad::sigmoid(x))).wrt(x);
    for (double v : g.values()) EXPECT_EQ(v, 0.25);
}

TEST(Backward, RejectsNonScalarRoot) {
    ad::Tape tape;
    auto x = tape.variable(vec({1, 2}));
    EXPECT_THROW(tape.backward(ad::square(x)), std::invalid_argument);
}

TEST(Backward, ReusedOperandAccumulates) {
    ad::Tape tape;
    auto x = tape.variable(vec({3.0}));
    auto g = tape.backward(ad::sum(ad::add(ad::mul(x, x), x))).wrt(x);
    EXPECT_EQ(g[0], 7.0);
}

TEST(Backward, IsDeterministic) {
    rap::KeyedRng rng{3};
    auto x0 = random_tensor(rng, {2, 6, 6});
    auto w = random_tensor(rng, {3, 2, 3, 3});
    auto b = random_tensor(rng, {3});
    auto grad = [&] {
        ad::Tape tape;
        auto x = tape.variable(x0);
        auto y = ad::sum(ad::sigmoid(ad::max_pool2d(ad::relu(ad::conv2d(x, w, b, {1, 1})), 2)));
        auto g = tape.backward(y).wrt(x);
        return std::vector<double>(g.values().begin(), g.values().end());
    };
    EXPECT_EQ(grad(), grad());
}

TEST(Backward, GradientOfSumIsSumOfGradients) {
    rap::KeyedRng rng{4};
    auto x0 = random_tensor(rng, {10}, 0.5, 2.0);
    auto f1 = [](const Tensor& t) { return ad::sum(ad::log(t)); };
    auto f2 = [](const Tensor& t) { return ad::sum(ad::square(ad::add_scalar(t, -3.0))); };
    auto grad = [&](auto f) {
        ad::Tape tape;
        auto x = tape.variable(x0);
        auto g = tape.backward(f(x)).wrt(x);
        return std::vector<double>(g.values().begin(), g.values().end());
    };
    auto g1 = grad(f1), g2 = grad(f2);
    auto g12 = grad([&](const Tensor& t) { return ad::add(f1(t), f2(t)); });
    for (std::size_t i = 0; i < g12.size(); ++i) EXPECT_NEAR(g12[i], g1[i] + g2[i], 1e-12);
}

TEST(Tape, ClearInvalidatesOldTensors) {
    ad::Tape tape;
    auto x = tape.variable(vec({1, 2}));
    auto y = ad::sum(x);
    tape.clear();
    EXPECT_THROW(tape.backward(y), std::logic_error);
}

TEST(Tape, MixingTapesIsRejected) {
    ad::Tape a, b;
    auto x = a.variable(vec({1}));
    auto y = b.variable(vec({2}));
    EXPECT_THROW(ad::add(x, y), std::logic_error);
}

TEST(Tape, UntrackedRootHasZeroGradients) {
    ad::Tape tape;
    auto x = tape.variable(vec({1, 2}));
    auto g = tape.backward(ad::sum(vec({3, 4}))).wrt(x);
    for (double v : g.values()) EXPECT_EQ(v, 0.0);
}

TEST(FiniteDiff, QuadraticIsAccurate) {
    rap::KeyedRng rng{5};
    auto x = random_tensor(rng, {8});
    double err = ad::finite_diff_check([](const Tensor& t) { return ad::sum(ad::square(t)); }, x, 1e-3);
    EXPECT_LT(err, 1e-6);
}

TEST(FiniteDiff, ConstantFunctionHasZeroError) {
    auto x = vec({1, 2, 3});
    EXPECT_EQ(ad::finite_diff_check([](const Tensor&) { return Tensor::scalar(4.0); }, x, 1e-3), 0.0);
}

TEST(FiniteDiff, DetectsAWrongGradient) {
    // Rebuilding through detach() drops the gradient, so analytic = 0 while
    // the function is not constant.
    auto x = vec({1, 2});
    double err = ad::finite_diff_check([](const Tensor& t) { return ad::sum(ad::square(t.detach())); }, x, 1e-3);
    EXPECT_GT(err, 0.5);
}

class PrimitiveGradient : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradient, PassesFiniteDifferenceCheck) {
    rap::KeyedRng rng{100, static_cast<std::uint64_t>(GetParam())};
    auto w = random_tensor(rng, {12});
    auto other = random_tensor(rng, {12});
    auto x = random_tensor(rng, {12}, 0.2, 2.0);  // positive and away from relu/clamp kinks at 0
    auto reduce = [&](const Tensor& t) { return ad::sum(ad::mul(t, w)); };
    std::function<Tensor(const Tensor&)> f;
    switch (GetParam()) {
        case 0: f = [&](const Tensor& t) { return reduce(ad::add(t, other)); }; break;
        case 1: f = [&](const Tensor& t) { return reduce(ad::sub(t, other)); }; break;
        case 2: f = [&](const Tensor& t) { return reduce(ad::mul(t, other)); }; break;
        case 3: f = [&](const Tensor& t) { return reduce(ad::scale(t, 2.5)); }; break;
        case 4: f = [&](const Tensor& t) { return reduce(ad::square(t)); }; break;
        case 5: f = [&](const Tensor& t) { return reduce(ad::log(t)); }; break;
        case 6: f = [&](const Tensor& t) { return reduce(ad::exp(t)); }; break;
        case 7: f = [&](const Tensor& t) { return reduce(ad::sigmoid(t)); }; break;
        case 8: f = [&](const Tensor& t) { return reduce(ad::relu(ad::add_scalar(t, -1.1))); }; break;
        case 9: f = [&](const Tensor& t) { return reduce(ad::softplus(t)); }; break;
        case 10: f = [&](const Tensor& t) { return reduce(ad::clamp_min(t, 1.05)); }; break;
        case 11: f = [&](const Tensor& t) { return reduce(ad::smooth_l1(ad::add_scalar(t, -1.0), 0.5)); }; break;
        case 12: f = [&](const Tensor& t) { return ad::sum(ad::masked_select(ad::mul(t, w), {1, 0, 1, 1, 0, 0, 1, 0, 1, 1, 0, 1})); }; break;
    }
    EXPECT_LT(ad::finite_diff_check(f, x, 1e-3), 1e-4);
}

INSTANTIATE_TEST_SUITE_P(AllPrimitives, PrimitiveGradient, ::testing::Range(0, 13));

TEST(ConvGradient, PassesFiniteDifferenceCheckForEveryOperand) {
    rap::KeyedRng rng{6};
    auto x = random_tensor(rng, {2, 6, 5});
    auto w = random_tensor(rng, {3, 2, 3, 3});
    auto b = random_tensor(rng, {3});
    for (std::size_t stride : {1, 2}) {
        for (std::size_t pad : {0, 1}) {
            ad::Conv2dOptions opt{stride, pad};
            auto loss = [&](const Tensor& a, const Tensor& k, const Tensor& c) {
                return ad::sum(ad::square(ad::conv2d(a, k, c, opt)));
            };
            EXPECT_LT(ad::finite_diff_check([&](const Tensor& t) { return loss(t, w, b); }, x, 1e-3), 1e-4);
            EXPECT_LT(ad::finite_diff_check([&](const Tensor& t) { return loss(x, t, b); }, w, 1e-3), 1e-4);
            EXPECT_LT(ad::finite_diff_check([&](const Tensor& t) { return loss(x, w, t); }, b, 1e-3), 1e-4);
        }
    }
}

TEST(PoolGradient, RoutesToArgmax) {
    ad::Tape tape;
    auto x = tape.variable(Tensor({1, 2, 2}, {1, 4, 3, 2}));
    auto g = tape.backward(ad::sum(ad::max_pool2d(x, 2))).wrt(x);
    EXPECT_EQ(std::vector<double>(g.values().begin(), g.values().end()), (std::vector<double>{0, 1, 0, 0}));
}
