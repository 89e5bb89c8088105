#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "lfinet/gradcheck.hpp"
#include "lfinet/nn.hpp"
#include "lfinet/optim.hpp"
#include "lfinet/rng.hpp"

using namespace lfinet;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                        bool requires_grad = false) {
    std::vector<T> data(static_cast<size_t>(numel(shape)));
    for (auto& v : data) v = static_cast<T>(rng.uniform(lo, hi));
    return Tensor<T>::from_data(std::move(shape), std::move(data), requires_grad);
}

}  // namespace

// --- conv2d ---------------------------------------------------------------

TEST(Conv2d, IdentityKernelDepthwise) {
    Rng rng(7);
    auto x = random_tensor<float>({2, 3, 8, 8}, rng);
    std::vector<float> wv(3 * 1 * 3 * 3, 0.0f);
    for (int c = 0; c < 3; ++c) wv[c * 9 + 4] = 1.0f;  // center tap
    auto w = Tensor<float>::from_data({3, 1, 3, 3}, std::move(wv));
    auto y = conv2d(x, w, 1, 1, 1, /*groups=*/3);
    ASSERT_EQ(y.shape(), x.shape());
    for (size_t i = 0; i < x.data().size(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
}

TEST(Conv2d, FullKernelSum) {
    auto x = Tensor<float>::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    auto w = Tensor<float>::filled({1, 1, 2, 2}, 1.0f);
    auto y = conv2d(x, w);
    ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
    EXPECT_FLOAT_EQ(y.item(), 10.0f);
}

TEST(Conv2d, GradCheck) {
    Rng rng(11);
    auto x = random_tensor<double>({2, 3, 6, 6}, rng, -1, 1, true);
    auto w = random_tensor<double>({4, 3, 3, 3}, rng, -1, 1, true);
    auto b = random_tensor<double>({4}, rng, -1, 1, true);
    auto fwd = [&] { return probe_loss(conv2d(x, w, b, 2, 1, 1, 1)); };
    GradCheckOptions opt;
    opt.tol = 1e-6;
    auto rep = gradcheck<double>(fwd, {x, w, b}, opt);
    EXPECT_LT(rep.max_rel_err, 1e-6);
}

TEST(Conv2d, GradCheckDilatedGroups) {
    Rng rng(13);
    auto x = random_tensor<double>({1, 4, 7, 7}, rng, -1, 1, true);
    auto w = random_tensor<double>({6, 2, 3, 3}, rng, -1, 1, true);
    auto fwd = [&] { return probe_loss(conv2d(x, w, 1, 2, 2, 2)); };
    auto rep = gradcheck<double>(fwd, {x, w});
    EXPECT_LT(rep.max_rel_err, 1e-6);
}

TEST(Conv2d, GradCheckDepthwiseDilated) {
    Rng rng(17);
    auto x = random_tensor<double>({2, 4, 9, 9}, rng, -1, 1, true);
    auto w = random_tensor<double>({4, 1, 5, 5}, rng, -1, 1, true);
    auto b = random_tensor<double>({4}, rng, -1, 1, true);
    // "same" padding for k=5, d=2
    auto fwd = [&] { return probe_loss(conv2d(x, w, b, 1, 4, 2, 4)); };
    auto rep = gradcheck<double>(fwd, {x, w, b});
    EXPECT_LT(rep.max_rel_err, 1e-6);
}

TEST(Conv2d, RejectsBadShapes) {
    auto x = Tensor<float>::zeros({1, 5, 4, 4});
    auto w = Tensor<float>::zeros({4, 2, 3, 3});
    EXPECT_THROW(
        {
            try {
                conv2d(x, w, 1, 1, 1, 2);
            } catch (const std::invalid_argument& e) {
                EXPECT_NE(std::string(e.what()).find("in-channels"), std::string::npos);
                throw;
            }
        },
        std::invalid_argument);
    auto x3 = Tensor<float>::zeros({5, 4, 4});
    EXPECT_THROW(conv2d(x3, w), std::invalid_argument);
    // output extent would be empty
    auto xs = Tensor<float>::zeros({1, 2, 2, 2});
    auto ws = Tensor<float>::zeros({4, 2, 3, 3});
    EXPECT_THROW(conv2d(xs, ws), std::invalid_argument);
}

// --- conv_transpose2d -------------------------------------------------------

TEST(ConvTranspose2d, ExpandsSinglePixel) {
    auto x = Tensor<float>::from_data({1, 1, 1, 1}, {5});
    auto w = Tensor<float>::filled({1, 1, 2, 2}, 1.0f);
    auto y = conv_transpose2d(x, w, 2);
    ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
    for (float v : y.data()) EXPECT_FLOAT_EQ(v, 5.0f);
}

TEST(ConvTranspose2d, ZeroInputZeroOutput) {
    auto x = Tensor<float>::zeros({2, 3, 4, 4});
    Rng rng(3);
    auto w = random_tensor<float>({3, 5, 2, 2}, rng);
    auto y = conv_transpose2d(x, w, 2);
    ASSERT_EQ(y.shape(), (Shape{2, 5, 8, 8}));
    for (float v : y.data()) EXPECT_EQ(v, 0.0f);
}

TEST(ConvTranspose2d, GradCheck) {
    Rng rng(5);
    auto x = random_tensor<double>({2, 3, 3, 3}, rng, -1, 1, true);
    auto w = random_tensor<double>({3, 4, 2, 2}, rng, -1, 1, true);
    auto b = random_tensor<double>({4}, rng, -1, 1, true);
    auto fwd = [&] { return probe_loss(conv_transpose2d(x, w, b, 2)); };
    auto rep = gradcheck<double>(fwd, {x, w, b});
    EXPECT_LT(rep.max_rel_err, 1e-6);
}

TEST(ConvTranspose2d, RejectsNon4d) {
    auto x = Tensor<float>::zeros({3, 4, 4});
    auto w = Tensor<float>::zeros({3, 4, 2, 2});
    EXPECT_THROW(conv_transpose2d(x, w), std::invalid_argument);
}

// --- pooling ----------------------------------------------------------------

TEST(AvgPool, TwoByTwoMean) {
    auto x = Tensor<float>::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    auto y = avg_pool2x2(x);
    ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
    EXPECT_FLOAT_EQ(y.item(), 2.5f);
}

TEST(AvgPool, ConstantStaysConstant) {
    auto x = Tensor<float>::filled({1, 2, 8, 8}, 3.25f);
    auto y = avg_pool2x2(x);
    ASSERT_EQ(y.shape(), (Shape{1, 2, 4, 4}));
    for (float v : y.data()) EXPECT_FLOAT_EQ(v, 3.25f);
}

TEST(AvgPool, RejectsOddExtent) {
    EXPECT_THROW(avg_pool2x2(Tensor<float>::zeros({1, 1, 5, 4})), std::invalid_argument);
    EXPECT_THROW(avg_pool2x2(Tensor<float>::zeros({1, 1, 4, 7})), std::invalid_argument);
}

TEST(AvgPool, AdjointSpreadsQuarter) {
    Rng rng(21);
    auto x = random_tensor<double>({1, 1, 4, 4}, rng, -1, 1, true);
    auto y = avg_pool2x2(x);
    y.backward_with_seed(std::vector<double>(4, 1.0));
    for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 0.25);
    auto rep = gradcheck<double>([&] { return probe_loss(avg_pool2x2(x)); }, {x});
    EXPECT_LT(rep.max_rel_err, 1e-6);
}

TEST(GlobalAvgPool, Values) {
    auto x = Tensor<float>::from_data({1, 1, 2, 2}, {1, 3, 5, 7});
    EXPECT_FLOAT_EQ(global_avg_pool(x).item(), 4.0f);
    auto c = Tensor<float>::filled({2, 3, 4, 4}, 1.5f);
    for (float v : global_avg_pool(c).data()) EXPECT_FLOAT_EQ(v, 1.5f);
}

TEST(GlobalAvgPool, GradCheck) {
    Rng rng(23);
    auto x = random_tensor<double>({2, 3, 4, 4}, rng, -1, 1, true);
    auto rep = gradcheck<double>([&] { return probe_loss(global_avg_pool(x)); }, {x});
    EXPECT_LT(rep.max_rel_err, 1e-6);
}

// --- bilinear upsample -------------------------------------------------------

TEST(Bilinear, ConstantStaysConstant) {
    for (index_t scale : {2, 4, 8}) {
        auto x = Tensor<float>::filled({1, 1, 4, 4}, 0.75f);
        auto y = bilinear_upsample(x, scale);
        ASSERT_EQ(y.dim(2), 4 * scale);
        for (float v : y.data()) EXPECT_FLOAT_EQ(v, 0.75f);
    }
}

TEST(Bilinear, HalfPixelCenters) {
    auto x = Tensor<float>::from_data({1, 1, 2, 2}, {0, 2, 0, 2});
    auto y = bilinear_upsample(x, 2);
    ASSERT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
    const float expect[4] = {0.0f, 0.5f, 1.5f, 2.0f};
    for (index_t r = 0; r < 4; ++r)
        for (index_t c = 0; c < 4; ++c) EXPECT_FLOAT_EQ(y.data()[r * 4 + c], expect[c]);
}

TEST(Bilinear, RejectsBadScale) {
    auto x = Tensor<float>::zeros({1, 1, 2, 2});
    EXPECT_THROW(bilinear_upsample(x, 3), std::invalid_argument);
    EXPECT_THROW(bilinear_upsample(x, 16), std::invalid_argument);
}

TEST(Bilinear, GradCheck) {
    Rng rng(29);
    auto x = random_tensor<double>({1, 2, 3, 3}, rng, -1, 1, true);
    auto rep = gradcheck<double>([&] { return probe_loss(bilinear_upsample(x, 2)); }, {x});
    EXPECT_LT(rep.max_rel_err, 1e-6);
}

// --- batch norm ---------------------------------------------------------------

TEST(BatchNorm, NormalizedInputPassesThrough) {
    // per-channel mean 0, var 1 by construction
    std::vector<float> data = {-1, 1, -1, 1, -1, -1, 1, 1};
    auto x = Tensor<float>::from_data({2, 1, 2, 2}, std::move(data));
    auto gamma = Tensor<float>::filled({1}, 1.0f);
    auto beta = Tensor<float>::filled({1}, 0.0f);
    std::vector<float> rm(1, 0.0f), rv(1, 1.0f);
    auto y = batchnorm2d(x, gamma, beta, rm, rv, /*training=*/true);
    for (size_t i = 0; i < y.data().size(); ++i)
        EXPECT_NEAR(y.data()[i], x.data()[i], 1e-5f);
}

TEST(BatchNorm, AffineCollapse) {
    Rng rng(31);
    auto x = random_tensor<float>({2, 3, 4, 4}, rng);
    auto gamma = Tensor<float>::filled({3}, 0.0f);
    auto beta = Tensor<float>::filled({3}, 7.0f);
    std::vector<float> rm(3, 0.0f), rv(3, 1.0f);
    auto y = batchnorm2d(x, gamma, beta, rm, rv, true);
    for (float v : y.data()) EXPECT_FLOAT_EQ(v, 7.0f);
}

TEST(BatchNorm, RunningStatsUpdate) {
    auto x = Tensor<float>::filled({1, 1, 2, 2}, 4.0f);
    auto gamma = Tensor<float>::filled({1}, 1.0f);
    auto beta = Tensor<float>::filled({1}, 0.0f);
    std::vector<float> rm(1, 0.0f), rv(1, 1.0f);
    batchnorm2d(x, gamma, beta, rm, rv, true);
    EXPECT_FLOAT_EQ(rm[0], 0.4f);          // 0.9*0 + 0.1*4
    EXPECT_FLOAT_EQ(rv[0], 0.9f);          // 0.9*1 + 0.1*0
    // eval mode consumes, does not update
    auto y = batchnorm2d(x, gamma, beta, rm, rv, false);
    EXPECT_FLOAT_EQ(rm[0], 0.4f);
    EXPECT_NEAR(y.data()[0], (4.0f - 0.4f) / std::sqrt(0.9f + 1e-5f), 1e-5f);
}

TEST(BatchNorm, RejectsChannelMismatch) {
    auto x = Tensor<float>::zeros({1, 4, 2, 2});
    auto gamma = Tensor<float>::filled({3}, 1.0f);
    auto beta = Tensor<float>::filled({4}, 0.0f);
    std::vector<float> rm(4, 0.0f), rv(4, 1.0f);
    EXPECT_THROW(batchnorm2d(x, gamma, beta, rm, rv, true), std::invalid_argument);
}

TEST(BatchNorm, GradCheckTrainMode) {
    Rng rng(37);
    auto x = random_tensor<double>({3, 2, 3, 3}, rng, -1, 1, true);
    auto gamma = random_tensor<double>({2}, rng, 0.5, 1.5, true);
    auto beta = random_tensor<double>({2}, rng, -0.5, 0.5, true);
    auto fwd = [&] {
        std::vector<double> rm(2, 0.0), rv(2, 1.0);  // fresh stats; output ignores them
        return probe_loss(batchnorm2d(x, gamma, beta, rm, rv, true));
    };
    GradCheckOptions opt;
    opt.tol = 1e-5;
    auto rep = gradcheck<double>(fwd, {x, gamma, beta}, opt);
    EXPECT_LT(rep.max_rel_err, 1e-5);
}

// --- layer norm ----------------------------------------------------------------

TEST(LayerNorm, GradCheck) {
    Rng rng(41);
    auto x = random_tensor<double>({2, 3, 5}, rng, -1, 1, true);
    auto gamma = random_tensor<double>({5}, rng, 0.5, 1.5, true);
    auto beta = random_tensor<double>({5}, rng, -0.5, 0.5, true);
    auto rep = gradcheck<double>([&] { return probe_loss(layer_norm(x, gamma, beta)); },
                                 {x, gamma, beta});
    EXPECT_LT(rep.max_rel_err, 1e-5);
}

// --- activations -----------------------------------------------------------------

TEST(Activation, PointValues) {
    auto x = Tensor<float>::from_data({3}, {-1.0f, 0.0f, 3.0f});
    auto r = relu(x);
    EXPECT_FLOAT_EQ(r.data()[0], 0.0f);
    EXPECT_FLOAT_EQ(r.data()[2], 3.0f);
    EXPECT_FLOAT_EQ(sigmoid(x).data()[1], 0.5f);
    EXPECT_FLOAT_EQ(gelu(x).data()[1], 0.0f);
}

TEST(Activation, GradChecks) {
    Rng rng(43);
    for (Act kind : {Act::relu, Act::gelu, Act::sigmoid}) {
        // keep relu inputs away from the kink at 0
        auto x = random_tensor<double>({64}, rng, 0.05, 2.0, true);
        auto neg = random_tensor<double>({64}, rng, -2.0, -0.05, true);
        for (auto& t : {x, neg}) {
            auto tt = t;
            auto rep =
                gradcheck<double>([&] { return probe_loss(activation(tt, kind)); }, {tt});
            EXPECT_LT(rep.max_rel_err, 1e-6);
        }
    }
}

// --- softmax ----------------------------------------------------------------------

TEST(Softmax, UniformAndAnalytic) {
    auto x = Tensor<float>::filled({3}, 0.7f);
    for (float v : softmax(x, 0).data()) EXPECT_NEAR(v, 1.0f / 3.0f, 1e-6f);

    auto y = Tensor<float>::from_data({2}, {0.0f, std::log(2.0f)});
    auto s = softmax(y, 0);
    EXPECT_NEAR(s.data()[0], 1.0f / 3.0f, 1e-6f);
    EXPECT_NEAR(s.data()[1], 2.0f / 3.0f, 1e-6f);
}

TEST(Softmax, SumsToOneOnRandomInputs) {
    Rng rng(47);
    auto x = random_tensor<float>({4, 5, 6}, rng, -10, 10);
    auto s = softmax(x, 1);
    for (index_t o = 0; o < 4; ++o)
        for (index_t in = 0; in < 6; ++in) {
            float sum = 0;
            for (index_t a = 0; a < 5; ++a) sum += s.data()[(o * 5 + a) * 6 + in];
            EXPECT_NEAR(sum, 1.0f, 1e-6f);
        }
}

TEST(Softmax, GradCheck) {
    Rng rng(53);
    auto x = random_tensor<double>({3, 4}, rng, -2, 2, true);
    auto rep = gradcheck<double>([&] { return probe_loss(softmax(x, 1)); }, {x});
    EXPECT_LT(rep.max_rel_err, 1e-6);
}

// --- concat / slice -----------------------------------------------------------------

TEST(ConcatSlice, RoundTripIdentity) {
    Rng rng(59);
    auto x = random_tensor<float>({2, 8, 3, 3}, rng);
    auto parts = slice_channels(x, {{0, 1}, {1, 4}, {4, 8}});
    ASSERT_EQ(parts.size(), 3u);
    EXPECT_EQ(parts[0].dim(1), 1);
    EXPECT_EQ(parts[1].dim(1), 3);
    EXPECT_EQ(parts[2].dim(1), 4);
    auto back = concat_channels(parts);
    ASSERT_EQ(back.shape(), x.shape());
    for (size_t i = 0; i < x.data().size(); ++i) EXPECT_EQ(back.data()[i], x.data()[i]);
}

TEST(ConcatSlice, ChannelCountsAdd) {
    auto a = Tensor<float>::zeros({1, 2, 4, 4});
    auto b = Tensor<float>::zeros({1, 5, 4, 4});
    EXPECT_EQ(concat_channels<float>({a, b}).dim(1), 7);
}

TEST(ConcatSlice, RejectsGapOrOverlap) {
    auto x = Tensor<float>::zeros({1, 8, 2, 2});
    EXPECT_THROW(slice_channels(x, {{0, 2}, {3, 8}}), std::invalid_argument);   // gap
    EXPECT_THROW(slice_channels(x, {{0, 4}, {3, 8}}), std::invalid_argument);   // overlap
    EXPECT_THROW(slice_channels(x, {{0, 4}}), std::invalid_argument);           // short
}

TEST(ConcatSlice, GradCheck) {
    Rng rng(61);
    auto a = random_tensor<double>({1, 2, 3, 3}, rng, -1, 1, true);
    auto b = random_tensor<double>({1, 3, 3, 3}, rng, -1, 1, true);
    auto fwd = [&] {
        auto cat = concat_channels<double>({a, b});
        auto parts = slice_channels(cat, {{0, 4}, {4, 5}});
        return add(probe_loss(parts[0], 1), probe_loss(parts[1], 2));
    };
    auto rep = gradcheck<double>(fwd, {a, b});
    EXPECT_LT(rep.max_rel_err, 1e-6);
}

// --- matmul / attention ----------------------------------------------------------------

TEST(MatMul, GradCheck) {
    Rng rng(67);
    auto a = random_tensor<double>({3, 4}, rng, -1, 1, true);
    auto b = random_tensor<double>({4, 5}, rng, -1, 1, true);
    auto rep = gradcheck<double>([&] { return probe_loss(matmul(a, b)); }, {a, b});
    EXPECT_LT(rep.max_rel_err, 1e-6);
    EXPECT_THROW(matmul(a, a), std::invalid_argument);
}

TEST(Attention, SingleTokenReturnsValue) {
    Rng rng(71);
    auto q = random_tensor<float>({1, 1, 8}, rng);
    auto k = random_tensor<float>({1, 1, 8}, rng);
    auto v = random_tensor<float>({1, 1, 8}, rng);
    auto out = scaled_dot_attention(q, k, v, 2);
    ASSERT_EQ(out.shape(), v.shape());
    for (size_t i = 0; i < v.data().size(); ++i) EXPECT_FLOAT_EQ(out.data()[i], v.data()[i]);
}

TEST(Attention, IdenticalKeysAverageValues) {
    Rng rng(73);
    const index_t Tk = 5, D = 8;
    std::vector<float> krow(D);
    for (auto& x : krow) x = static_cast<float>(rng.uniform(-1, 1));
    std::vector<float> kd;
    for (index_t t = 0; t < Tk; ++t) kd.insert(kd.end(), krow.begin(), krow.end());
    auto k = Tensor<float>::from_data({1, Tk, D}, std::move(kd));
    auto q = random_tensor<float>({1, Tk, D}, rng);
    auto v = random_tensor<float>({1, Tk, D}, rng);
    auto out = scaled_dot_attention(q, k, v, 2);
    for (index_t d = 0; d < D; ++d) {
        float mean = 0;
        for (index_t t = 0; t < Tk; ++t) mean += v.data()[t * D + d];
        mean /= static_cast<float>(Tk);
        for (index_t t = 0; t < Tk; ++t) EXPECT_NEAR(out.data()[t * D + d], mean, 1e-5f);
    }
}

TEST(Attention, GradCheck) {
    Rng rng(79);
    auto q = random_tensor<double>({2, 3, 4}, rng, -1, 1, true);
    auto k = random_tensor<double>({2, 3, 4}, rng, -1, 1, true);
    auto v = random_tensor<double>({2, 3, 4}, rng, -1, 1, true);
    auto fwd = [&] { return probe_loss(scaled_dot_attention(q, k, v, 2)); };
    GradCheckOptions opt;
    opt.tol = 1e-5;
    auto rep = gradcheck<double>(fwd, {q, k, v}, opt);
    EXPECT_LT(rep.max_rel_err, 1e-5);
    auto bad = random_tensor<double>({2, 3, 5}, rng);
    EXPECT_THROW(scaled_dot_attention(bad, bad, bad, 2), std::invalid_argument);
}

TEST(Linear, GradCheck) {
    Rng rng(83);
    auto x = random_tensor<double>({2, 3, 4}, rng, -1, 1, true);
    auto w = random_tensor<double>({4, 6}, rng, -1, 1, true);
    auto b = random_tensor<double>({6}, rng, -1, 1, true);
    auto rep = gradcheck<double>([&] { return probe_loss(linear(x, w, b)); }, {x, w, b});
    EXPECT_LT(rep.max_rel_err, 1e-6);
}

TEST(ShapeOps, PermuteReshapeGradCheck) {
    Rng rng(89);
    auto x = random_tensor<double>({2, 3, 4}, rng, -1, 1, true);
    auto fwd = [&] {
        return probe_loss(reshape(permute(x, {2, 0, 1}), {4, 6}));
    };
    auto rep = gradcheck<double>(fwd, {x});
    EXPECT_LT(rep.max_rel_err, 1e-6);
}

TEST(MulChannelAddRows, GradCheck) {
    Rng rng(97);
    auto x = random_tensor<double>({2, 3, 2, 2}, rng, -1, 1, true);
    auto s = random_tensor<double>({2, 3, 1, 1}, rng, -1, 1, true);
    auto rep = gradcheck<double>([&] { return probe_loss(mul_channel(x, s)); }, {x, s});
    EXPECT_LT(rep.max_rel_err, 1e-6);

    auto tok = random_tensor<double>({2, 3, 4}, rng, -1, 1, true);
    auto tab = random_tensor<double>({3, 4}, rng, -1, 1, true);
    auto rep2 = gradcheck<double>([&] { return probe_loss(add_rows(tok, tab)); }, {tok, tab});
    EXPECT_LT(rep2.max_rel_err, 1e-6);
}

// --- autodiff graph semantics ------------------------------------------------------------

TEST(Autodiff, AccumulationAcrossConsumers) {
    Rng rng(101);
    auto x = random_tensor<double>({8}, rng, 0.1, 1.0, true);
    auto fwd = [&] { return add(probe_loss(relu(x), 5), probe_loss(sigmoid(x), 6)); };
    auto rep = gradcheck<double>(fwd, {x});
    EXPECT_LT(rep.max_rel_err, 1e-6);
}

TEST(Autodiff, NonParticipatingLeafHasZeroGrad) {
    auto x = Tensor<float>::filled({4}, 1.0f, true);
    auto y = Tensor<float>::filled({4}, 2.0f, true);
    auto loss = sum_all(scale(x, 3.0f));
    loss.backward();
    for (float g : x.grad()) EXPECT_FLOAT_EQ(g, 3.0f);
    for (float g : y.grad()) EXPECT_FLOAT_EQ(g, 0.0f);
}

TEST(Autodiff, BackwardVisitsSharedSubgraphOnce) {
    auto x = Tensor<double>::filled({1}, 2.0, true);
    auto y = mul(x, x);           // x^2
    auto z = add(y, y);           // 2 x^2 -> dz/dx = 4x = 8
    z.backward();
    EXPECT_DOUBLE_EQ(x.grad()[0], 8.0);
}

TEST(Autodiff, DeterministicForwardBackward) {
    Rng rngA(111), rngB(111);
    auto xa = random_tensor<float>({2, 3, 8, 8}, rngA, -1, 1, true);
    auto wa = random_tensor<float>({4, 3, 3, 3}, rngA, -1, 1, true);
    auto xb = random_tensor<float>({2, 3, 8, 8}, rngB, -1, 1, true);
    auto wb = random_tensor<float>({4, 3, 3, 3}, rngB, -1, 1, true);
    auto la = sum_all(gelu(conv2d(xa, wa, 1, 1)));
    auto lb = sum_all(gelu(conv2d(xb, wb, 1, 1)));
    la.backward();
    lb.backward();
    EXPECT_EQ(la.item(), lb.item());
    EXPECT_EQ(0, std::memcmp(xa.grad().data(), xb.grad().data(),
                             xa.grad().size() * sizeof(float)));
    EXPECT_EQ(0, std::memcmp(wa.grad().data(), wb.grad().data(),
                             wa.grad().size() * sizeof(float)));
}

// --- Adam -------------------------------------------------------------------------------

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
    ParamSet<float> ps;
    ps.add("w", Tensor<float>::filled({4}, 2.0f, true));
    Adam<float> opt(0.1f);
    opt.register_params(ps);
    ps.zero_grad();
    opt.step(ps);
    for (float v : ps.find("w")->data()) EXPECT_FLOAT_EQ(v, 2.0f);
}

TEST(Adam, FirstStepMatchesAnalytic) {
    ParamSet<double> ps;
    ps.add("x", Tensor<double>::filled({1}, 0.0, true));
    Adam<double> opt(0.1);
    opt.register_params(ps);
    ps.find("x")->grad_mut()[0] = 1.0;
    opt.step(ps);
    // bias-corrected mhat/sqrt(vhat) = 1 on the first step
    EXPECT_NEAR(ps.find("x")->data()[0], -0.1, 1e-6);
}

TEST(Adam, QuadraticConverges) {
    ParamSet<double> ps;
    ps.add("x", Tensor<double>::filled({1}, 5.0, true));
    Adam<double> opt(0.1);
    opt.register_params(ps);
    for (int i = 0; i < 200; ++i) {
        auto* x = ps.find("x");
        x->zero_grad();
        x->grad_mut()[0] = 2.0 * x->data()[0];  // d/dx x^2
        opt.step(ps);
    }
    EXPECT_LT(std::abs(ps.find("x")->data()[0]), 0.1);
}

TEST(Adam, MissingStateRejected) {
    ParamSet<float> ps;
    ps.add("w", Tensor<float>::filled({1}, 1.0f, true));
    Adam<float> opt(0.1f);
    opt.register_params(ps);
    ps.add("late", Tensor<float>::filled({1}, 1.0f, true));
    ps.zero_grad();
    EXPECT_THROW(opt.step(ps), std::invalid_argument);
}

TEST(ParamSet, RejectsDuplicateNames) {
    ParamSet<float> ps;
    ps.add("a.w", Tensor<float>::zeros({1}, true));
    EXPECT_THROW(ps.add("a.w", Tensor<float>::zeros({1}, true)), std::invalid_argument);
}
