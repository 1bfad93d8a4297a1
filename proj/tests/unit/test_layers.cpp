#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "percept/nn/adam.hpp"
#include "percept/nn/layers.hpp"

using namespace percept;
using gradcheck::numeric;
using gradcheck::relative_error;
using gradcheck::random_tensor;

namespace {

// L = sum(w * y) so that dL/dy = w.
double weighted_sum(const Tensor<double>& y, const Tensor<double>& w) {
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * w[i];
    return s;
}

oracle::Image image_of(const Tensor<double>& x, int n) {
    oracle::Image im{x.dim(1), x.dim(2), x.dim(3), {}};
    im.v.assign(x.slice(n).begin(), x.slice(n).end());
    return im;
}

}  // namespace

TEST(Conv2d, MatchesDirectConvolution) {
    Rng rng(1);
    nn::Conv2d<double> conv(3, 5, 3, 2, 1);
    conv.init(rng);
    const Tensor<double> x = random_tensor({2, 3, 9, 8}, rng);
    const Tensor<double> y = conv.forward(x);
    ASSERT_EQ(y.shape(), (std::vector<int>{2, 5, 5, 4}));
    for (int n = 0; n < 2; ++n) {
        const auto ref = oracle::conv2d(image_of(x, n), conv.weight().vec(), conv.bias().vec(), 5, 3, 2, 1);
        const std::vector<double> got(y.slice(n).begin(), y.slice(n).end());
        EXPECT_LT(relative_error(got, ref.v), 1e-12);
    }
}

TEST(ConvTranspose2d, MatchesDirectScatter) {
    Rng rng(2);
    nn::ConvTranspose2d<double> deconv(4, 3, 5, 2);
    deconv.init(rng);
    const Tensor<double> x = random_tensor({2, 4, 3, 3}, rng);
    const Tensor<double> y = deconv.forward(x);
    ASSERT_EQ(y.shape(), (std::vector<int>{2, 3, 9, 9}));
    for (int n = 0; n < 2; ++n) {
        const auto ref = oracle::conv_transpose2d(image_of(x, n), deconv.weight().vec(), deconv.bias().vec(), 3, 5, 2);
        const std::vector<double> got(y.slice(n).begin(), y.slice(n).end());
        EXPECT_LT(relative_error(got, ref.v), 1e-12);
    }
}

TEST(Im2col, Col2imIsAdjoint) {
    // <im2col(x), c> == <x, col2im(c)>
    Rng rng(3);
    const int C = 2, H = 7, W = 6, K = 3, S = 2, P = 1;
    const int ho = nn::conv_out_size(H, K, S, P), wo = nn::conv_out_size(W, K, S, P);
    const Tensor<double> x = random_tensor({C, H, W}, rng);
    const Tensor<double> c = random_tensor({C * K * K, ho * wo}, rng);
    std::vector<double> cols(c.size()), back(x.size());
    nn::im2col(x.data(), C, H, W, K, S, P, cols.data());
    nn::col2im(c.data(), C, H, W, K, S, P, back.data());
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < cols.size(); ++i) lhs += cols[i] * c[i];
    for (std::size_t i = 0; i < back.size(); ++i) rhs += back[i] * x[i];
    EXPECT_NEAR(lhs, rhs, 1e-10);
}

TEST(GradCheck, Conv2dInputAndParameters) {
    Rng rng(4);
    nn::Conv2d<double> conv(2, 3, 3, 2, 1);
    conv.init(rng);
    Tensor<double> x = random_tensor({2, 2, 7, 7}, rng);
    const Tensor<double> w = random_tensor(conv.forward(x).shape(), rng);
    auto f = [&] { return weighted_sum(conv.forward(x), w); };
    EXPECT_LT(relative_error(conv.backward_input(x.shape(), w).vec(), numeric(f, x)), 1e-5);
    std::vector<nn::Param<double>> params;
    conv.params(params, "c");
    nn::zero_grads(params);
    conv.accumulate_grads(x, w);
    for (auto& p : params) EXPECT_LT(relative_error(p.grad->vec(), numeric(f, *p.value)), 1e-5) << p.name;
}

TEST(GradCheck, ConvTranspose2dInputAndParameters) {
    Rng rng(5);
    nn::ConvTranspose2d<double> deconv(3, 2, 4, 2);
    deconv.init(rng);
    Tensor<double> x = random_tensor({2, 3, 3, 3}, rng);
    const Tensor<double> w = random_tensor(deconv.forward(x).shape(), rng);
    auto f = [&] { return weighted_sum(deconv.forward(x), w); };
    EXPECT_LT(relative_error(deconv.backward_input(x.shape(), w).vec(), numeric(f, x)), 1e-5);
    std::vector<nn::Param<double>> params;
    deconv.params(params, "d");
    nn::zero_grads(params);
    deconv.accumulate_grads(x, w);
    for (auto& p : params) EXPECT_LT(relative_error(p.grad->vec(), numeric(f, *p.value)), 1e-5) << p.name;
}

TEST(GradCheck, LinearInputAndParameters) {
    Rng rng(6);
    nn::Linear<double> lin(5, 4);
    lin.init(rng);
    Tensor<double> x = random_tensor({3, 5}, rng);
    const Tensor<double> w = random_tensor({3, 4}, rng);
    auto f = [&] { return weighted_sum(lin.forward(x), w); };
    EXPECT_LT(relative_error(lin.backward_input(x.shape(), w).vec(), numeric(f, x)), 1e-5);
    std::vector<nn::Param<double>> params;
    lin.params(params, "l");
    nn::zero_grads(params);
    lin.accumulate_grads(x, w);
    for (auto& p : params) EXPECT_LT(relative_error(p.grad->vec(), numeric(f, *p.value)), 1e-5) << p.name;
}

TEST(GradCheck, MaxPoolReluSigmoid) {
    Rng rng(7);
    Tensor<double> x = random_tensor({2, 2, 7, 7}, rng);
    const auto pooled = nn::maxpool2d_forward(x, 3, 2);
    const Tensor<double> w = random_tensor(pooled.output.shape(), rng);
    auto fpool = [&] { return weighted_sum(nn::maxpool2d_forward(x, 3, 2).output, w); };
    EXPECT_LT(relative_error(nn::maxpool2d_backward(x.shape(), pooled.argmax, w).vec(), numeric(fpool, x)), 1e-5);

    const Tensor<double> w2 = random_tensor(x.shape(), rng);
    auto frelu = [&] { return weighted_sum(nn::relu(x), w2); };
    EXPECT_LT(relative_error(nn::relu_backward(nn::relu(x), w2).vec(), numeric(frelu, x)), 1e-5);
    auto fsig = [&] { return weighted_sum(nn::sigmoid(x), w2); };
    EXPECT_LT(relative_error(nn::sigmoid_backward(nn::sigmoid(x), w2).vec(), numeric(fsig, x)), 1e-5);
}

TEST(Shapes, ConvArithmetic) {
    EXPECT_EQ(nn::conv_out_size(64, 4, 2, 0), 31);
    EXPECT_EQ(nn::conv_out_size(64, 11, 4, 2), 15);
    EXPECT_EQ(nn::conv_out_size(96, 11, 4, 2), 23);
    EXPECT_EQ(nn::deconv_out_size(1, 5, 2), 5);
    EXPECT_EQ(nn::deconv_out_size(30, 6, 2), 64);
    nn::Conv2d<float> c(3, 4, 5, 1, 0);
    EXPECT_THROW(c.forward(Tensor<float>({1, 3, 4, 4})), std::invalid_argument);
    EXPECT_THROW(c.forward(Tensor<float>({1, 2, 8, 8})), std::invalid_argument);
}

TEST(Adam, MinimisesQuadratic) {
    Tensor<double> w({3}, std::vector<double>{3.0, -2.0, 1.0});
    Tensor<double> g({3});
    nn::Adam<double> opt({{"w", &w, &g}}, {.lr = 0.05});
    for (int i = 0; i < 2000; ++i) {
        opt.zero_grad();
        for (int j = 0; j < 3; ++j) g[j] = 2 * (w[j] - j);
        opt.step();
    }
    for (int j = 0; j < 3; ++j) EXPECT_NEAR(w[j], j, 1e-3);
}

TEST(Adam, FirstStepHasLearningRateMagnitude) {
    Tensor<double> w({2}, std::vector<double>{0.0, 0.0});
    Tensor<double> g({2}, std::vector<double>{10.0, -0.001});
    nn::Adam<double> opt({{"w", &w, &g}}, {.lr = 0.01});
    opt.step();
    EXPECT_NEAR(w[0], -0.01, 1e-6);
    EXPECT_NEAR(w[1], 0.01, 1e-4);
}
