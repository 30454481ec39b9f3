#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "qdown/adam.hpp"
#include "qdown/ops.hpp"
#include "support/gradcheck.hpp"

using namespace qdown;
using qdown::testing::random_tensor;

TEST(Tensor, ShapeAndDataMustAgree)
{
    EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), Error);
    Tensor t({2, 3}, 1.5);
    EXPECT_EQ(t.size(), 6u);
    EXPECT_EQ(t.rank(), 2u);
}

TEST(Ops, SoftplusAtZeroIsLn2)
{
    Graph g;
    Var y = softplus(g.constant(Tensor({1}, 0.0)));
    EXPECT_NEAR(y.value()[0], std::numbers::ln2, 1e-15);
}

TEST(Ops, SoftplusGradientMatchesCentralDifference)
{
    const double x0 = 0.3, h = 1e-5;
    Graph g;
    Var x = g.input(Tensor({1}, x0));
    g.backward(sum(softplus(x)));
    const double analytic = g.grad(x)[0];
    auto f = [](double x) { return std::log1p(std::exp(x)); };
    const double numeric = (f(x0 + h) - f(x0 - h)) / (2 * h);
    EXPECT_LT(std::abs(analytic - numeric) / std::abs(numeric), 1e-6);
}

TEST(Ops, IdentityKernelConvolutionIsIdentity)
{
    Stream s(3);
    for (std::size_t C : {1u, 4u, 12u}) {
        Tensor x = random_tensor(s, {2, C, 5, 7});
        Tensor w({C, C, 1, 1});
        for (std::size_t c = 0; c < C; ++c)
            w[c * C + c] = 1.0;
        Graph g;
        Var y = conv2d(g.constant(x), g.constant(w), g.constant(Tensor({C})));
        EXPECT_EQ(y.value(), x);
    }
}

TEST(Ops, ConvolutionMatchesDirectLoop)
{
    Stream s(8);
    for (std::size_t co : {2u, 12u})
        for (std::size_t k : {1u, 3u, 5u}) {
            const std::size_t N = 2, C = 3, H = 6, W = 5, pad = k / 2;
            Tensor x = random_tensor(s, {N, C, H, W}), w = random_tensor(s, {co, C, k, k}), b = random_tensor(s, {co});
            Graph g;
            const Tensor y = conv2d(g.constant(x), g.constant(w), g.constant(b)).value();
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t o = 0; o < co; ++o)
                    for (std::size_t i = 0; i < H; ++i)
                        for (std::size_t j = 0; j < W; ++j) {
                            double acc = b[o];
                            for (std::size_t c = 0; c < C; ++c)
                                for (std::size_t a = 0; a < k; ++a)
                                    for (std::size_t e = 0; e < k; ++e) {
                                        const long ii = long(i + a) - long(pad), jj = long(j + e) - long(pad);
                                        if (ii >= 0 && jj >= 0 && ii < long(H) && jj < long(W))
                                            acc += w[((o * C + c) * k + a) * k + e] * x.at(n, c, ii, jj);
                                    }
                            EXPECT_NEAR(y.at(n, o, i, j), acc, 1e-12);
                        }
        }
}

TEST(Ops, ShapeMismatchNamesShapes)
{
    Graph g;
    try {
        add(g.constant(Tensor({2, 3})), g.constant(Tensor({3, 2})));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::shape);
        EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("[3,2]"), std::string::npos);
    }
}

TEST(Ops, PixelShuffleInverseIsIdentity)
{
    Stream s(4);
    Tensor x = random_tensor(s, {2, 3 * 2 * 4, 3, 5});
    Graph g;
    Var y = pixel_unshuffle(pixel_shuffle(g.constant(x), 2, 4), 2, 4);
    EXPECT_EQ(y.value(), x);
    EXPECT_EQ(pixel_shuffle(g.constant(x), 2, 4).shape(), (Shape{2, 3, 6, 20}));
}

TEST(Ops, DropoutEvalIsIdentityAndTrainZeroesWholeChannels)
{
    Stream s(5);
    Tensor x = random_tensor(s, {2, 16, 4, 4}, 0.5, 1.0);
    Graph eval(false);
    EXPECT_EQ(spatial_dropout(eval.constant(x), 0.5).value(), x);
    Graph train(true, 9);
    const Tensor y = spatial_dropout(train.constant(x), 0.5).value();
    std::size_t dropped = 0;
    for (std::size_t nc = 0; nc < 32; ++nc) {
        const bool zero = y[nc * 16] == 0.0;
        dropped += zero;
        for (std::size_t p = 0; p < 16; ++p) {
            if (zero)
                EXPECT_EQ(y[nc * 16 + p], 0.0);
            else
                EXPECT_DOUBLE_EQ(y[nc * 16 + p], 2.0 * x[nc * 16 + p]);
        }
    }
    EXPECT_GT(dropped, 0u);
    EXPECT_LT(dropped, 32u);
}

TEST(Backward, SumGivesOnes)
{
    Tensor p({3, 2}, 0.7);
    Graph g;
    g.backward(sum(g.parameter(p)));
    for (double v : p.grad())
        EXPECT_EQ(v, 1.0);
}

TEST(Backward, HalfSquaredNormGivesValue)
{
    Stream s(1);
    Tensor p = random_tensor(s, {5});
    Graph g;
    Var v = g.parameter(p);
    g.backward(scale(sum(mul(v, v)), 0.5));
    for (std::size_t i = 0; i < p.size(); ++i)
        EXPECT_DOUBLE_EQ(p.grad()[i], p[i]);
}

TEST(Backward, UnreachableParameterHoldsZero)
{
    Tensor a({2}, 1.0), b({2}, 1.0);
    b.grad()[0] = 42.0;
    Graph g;
    Var va = g.parameter(a);
    g.parameter(b);
    g.backward(sum(va));
    EXPECT_EQ(b.grad()[0], 0.0);
    EXPECT_EQ(b.grad()[1], 0.0);
}

TEST(Backward, RejectsNonScalarLoss)
{
    Graph g;
    Var x = g.input(Tensor({3}, 1.0));
    EXPECT_THROW(g.backward(x), Error);
}

TEST(Backward, RepeatedBackwardIsDeterministic)
{
    Stream s(2);
    Tensor w = random_tensor(s, {4, 3, 3, 3}), b = random_tensor(s, {4});
    Tensor x = random_tensor(s, {2, 3, 5, 5});
    Graph g;
    Var out = sum(softplus(conv2d(g.constant(x), g.parameter(w), g.parameter(b))));
    g.backward(out);
    const auto first = w.grad();
    g.backward(out);
    EXPECT_EQ(w.grad(), first);
}

TEST(Backward, RandomThreeLayerCompositionMatchesFiniteDifferences)
{
    Stream s(77);
    for (int trial = 0; trial < 10; ++trial) {
        qdown::testing::GradCase c;
        c.inputs = {random_tensor(s, {1, 2, 4, 4}), random_tensor(s, {3, 2, 3, 3}), random_tensor(s, {3}),
                    random_tensor(s, {2, 3, 1, 1}), random_tensor(s, {2})};
        c.build = [](Graph&, const std::vector<Var>& v) {
            Var h = qdown::tanh(conv2d(v[0], v[1], v[2]));
            h = softplus(conv2d(h, v[3], v[4]));
            return mean(mul(h, h));
        };
        EXPECT_LT(qdown::testing::gradcheck(c, 1).max_rel_error, 1e-4);
    }
}

class OperatorGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(OperatorGradient, HundredRandomCasesMatchFiniteDifferences)
{
    const auto ops = qdown::testing::op_catalogue();
    const auto& op = ops.at(GetParam());
    Stream s(derive_seed(1234, GetParam(), 0));
    double worst = 0.0;
    for (int k = 0; k < 100; ++k) {
        const auto c = op.make(s);
        worst = std::max(worst, qdown::testing::gradcheck(c, s.bits()).max_rel_error);
    }
    EXPECT_LT(worst, 1e-4) << op.name;
}

INSTANTIATE_TEST_SUITE_P(Catalogue, OperatorGradient,
                         ::testing::Range<std::size_t>(0, qdown::testing::op_catalogue().size()),
                         [](const ::testing::TestParamInfo<std::size_t>& info) {
                             return qdown::testing::op_catalogue()[info.param].name;
                         });

TEST(Adam, ZeroGradientLeavesParametersAndCountsStep)
{
    std::vector<Tensor> params{Tensor({3}, 0.25)};
    params[0].grad();
    AdamState st;
    st.init(params);
    adam_step(params, st);
    EXPECT_EQ(st.step, 1);
    for (double v : params[0].values())
        EXPECT_EQ(v, 0.25);
}

TEST(Adam, ConstantGradientMovesAgainstItsSign)
{
    std::vector<Tensor> params{Tensor({2}, 0.0)};
    AdamState st;
    st.init(params);
    for (int i = 0; i < 50; ++i) {
        params[0].grad() = {2.0, -3.0};
        adam_step(params, st);
    }
    EXPECT_LT(params[0][0], 0.0);
    EXPECT_GT(params[0][1], 0.0);
}

TEST(Adam, OneStepOnQuadraticMatchesHandComputation)
{
    // f(p) = (p - 3)^2 at p = 1: g = -4. After one step m = 0.1 g, v = 0.001 g^2,
    // mh = g, vh = g^2, update = -lr * g / (|g| + eps).
    std::vector<Tensor> params{Tensor({1}, 1.0)};
    AdamState st;
    st.lr = 0.01;
    st.init(params);
    Graph g;
    Var p = g.parameter(params[0]);
    Var d = add_scalar(p, -3.0);
    g.backward(sum(mul(d, d)));
    EXPECT_DOUBLE_EQ(params[0].grad()[0], -4.0);
    adam_step(params, st);
    EXPECT_NEAR(params[0][0], 1.0 + 0.01 * 4.0 / (4.0 + 1e-7), 1e-15);
    EXPECT_EQ(params[0].grad()[0], 0.0);
}

TEST(Adam, RejectsUninitializedState)
{
    std::vector<Tensor> params{Tensor({2}, 0.0)};
    AdamState st;
    EXPECT_THROW(adam_step(params, st), Error);
}
