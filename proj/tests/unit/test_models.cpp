#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "percept/losses.hpp"
#include "percept/models.hpp"
#include "percept/weights_io.hpp"

using namespace percept;
using gradcheck::numeric;
using gradcheck::random_tensor;
using gradcheck::relative_error;

namespace {

// 10x10 input: conv k4 s2 -> 4x4 -> 1x1; deconv from 1x1 with k 4,4 -> 4 -> 10.
Architecture tiny_arch() { return {10, 3, {3, 4}, 4, 5, {2, 3}, {4, 4}, 2}; }

double weighted_sum(const Tensor<double>& y, const Tensor<double>& w) {
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * w[i];
    return s;
}

}  // namespace

TEST(Architecture, StandardPlansReachInputSize) {
    for (int s : {64, 96}) {
        const auto a = Architecture::standard(s);
        EXPECT_NO_THROW(a.validate());
        EXPECT_EQ(a.decoder_trace().back(), s);
    }
    EXPECT_EQ(Architecture::standard(64).encoder_trace(), (std::vector<int>{64, 31, 14, 6, 2}));
    EXPECT_EQ(Architecture::standard(96).encoder_trace().back(), 1);
    EXPECT_THROW(Architecture::standard(32), std::invalid_argument);
    EXPECT_NO_THROW(tiny_arch().validate());
}

TEST(Model, StandardShapes) {
    for (int s : {64, 96})
        for (bool var : {false, true}) {
            auto m = build_model<float>(32, var, s, 1);
            Rng eps(2);
            const Tensor<float> x({2, 3, s, s}, 0.5f);
            const auto fwd = m.forward(x, &eps);
            EXPECT_EQ(fwd.x_hat().shape(), x.shape());
            EXPECT_EQ(fwd.code().mu.shape(), (std::vector<int>{2, 32}));
            EXPECT_EQ(m.embed(x).shape(), (std::vector<int>{2, 32}));
            for (float v : fwd.x_hat().vec()) {
                ASSERT_GT(v, 0.0f);
                ASSERT_LT(v, 1.0f);
            }
        }
    EXPECT_THROW(build_model<float>(48, false, 64, 1), std::invalid_argument);
    EXPECT_THROW(build_model<float>(32, false, 32, 1), std::invalid_argument);
}

TEST(Model, RejectsWrongInputShape) {
    auto m = build_model<float>(32, false, 64, 1);
    EXPECT_THROW(m.embed(Tensor<float>({1, 3, 96, 96})), std::invalid_argument);
    EXPECT_THROW(m.decode(Tensor<float>({1, 16})), std::invalid_argument);
    auto v = build_model<float>(32, true, 64, 1);
    EXPECT_THROW(v.encode(Tensor<float>({1, 3, 64, 64})), std::invalid_argument);
}

TEST(Model, SeedDeterminesParameters) {
    auto a = build_model<float>(32, false, 64, 5), b = build_model<float>(32, false, 64, 5),
         c = build_model<float>(32, false, 64, 6);
    EXPECT_EQ(hash_params(a.params()), hash_params(b.params()));
    EXPECT_NE(hash_params(a.params()), hash_params(c.params()));
}

TEST(Model, InitDecoderLeavesEncoder) {
    AutoencoderModel<double> m(tiny_arch(), 4, false, 3);
    const std::string enc = hash_params(m.encoder_params());
    const std::string dec = hash_params(m.decoder_params());
    for (auto& p : m.decoder_params()) p.value->fill(0.25);
    m.init_decoder();
    EXPECT_EQ(hash_params(m.encoder_params()), enc);
    EXPECT_EQ(hash_params(m.decoder_params()), dec);
}

TEST(GradCheck, DecodeWithRespectToZ) {
    AutoencoderModel<double> m(tiny_arch(), 4, false, 11);
    Rng rng(12);
    Tensor<double> z = random_tensor({2, 4}, rng);
    const Tensor<double> w = random_tensor({2, 3, 10, 10}, rng);
    auto f = [&] { return weighted_sum(m.decode(z), w); };
    const auto tape = m.decode_tape(z);
    EXPECT_LT(relative_error(m.decoder_input_gradient(tape, w).vec(), numeric(f, z)), 1e-5);
}

TEST(GradCheck, StandardDecoderWithRespectToZ) {
    auto m = build_model<double>(32, false, 64, 13);
    Rng rng(14);
    Tensor<double> z = random_tensor({1, 32}, rng);
    const Tensor<double> w = random_tensor({1, 3, 64, 64}, rng);
    auto f = [&] { return weighted_sum(m.decode(z), w); };
    const auto tape = m.decode_tape(z);
    EXPECT_LT(relative_error(m.decoder_input_gradient(tape, w).vec(), numeric(f, z)), 1e-5);
}

class ModelGrad : public ::testing::TestWithParam<bool> {};

TEST_P(ModelGrad, AllParametersThroughPixelLossAndKl) {
    const bool variational = GetParam();
    AutoencoderModel<double> m(tiny_arch(), 4, variational, 21);
    Rng rng(22);
    const Tensor<double> x = random_tensor({2, 3, 10, 10}, rng, 0.0, 1.0);
    LossSpec<double> spec;
    spec.kl_weight = variational ? 0.7 : 0.0;
    // Fixed eps draws make the objective a deterministic function of the parameters.
    auto f = [&] {
        Rng eps(99);
        const auto fwd = m.forward(x, &eps);
        return static_cast<double>(total_loss(spec, x, fwd.x_hat(), fwd.code()).total);
    };
    auto params = m.params();
    nn::zero_grads(params);
    {
        Rng eps(99);
        const auto fwd = m.forward(x, &eps);
        const auto loss = total_loss(spec, x, fwd.x_hat(), fwd.code(), true);
        m.backward(fwd, loss.d_x_hat, loss.d_mu, loss.d_logvar);
    }
    for (auto& p : params) {
        if (!variational && p.name.rfind("enc.logvar", 0) == 0) continue;
        const auto coords = gradcheck::sample_coords(p.value->size(), 40, 7);
        EXPECT_LT(relative_error(gradcheck::pick(*p.grad, coords), numeric(f, *p.value, coords)), 1e-5) << p.name;
    }
}

INSTANTIATE_TEST_SUITE_P(Kinds, ModelGrad, ::testing::Values(false, true));

TEST(Model, VariationalCodeUsesReparameterisation) {
    AutoencoderModel<double> m(tiny_arch(), 4, true, 31);
    Rng rng(32);
    const Tensor<double> x = random_tensor({3, 3, 10, 10}, rng, 0.0, 1.0);
    Rng eps(5);
    const auto tape = m.encode_tape(x, &eps);
    for (std::size_t i = 0; i < tape.code.z.size(); ++i)
        EXPECT_NEAR(tape.code.z[i], tape.code.mu[i] + std::exp(tape.code.logvar[i] / 2) * tape.eps[i], 1e-12);
    EXPECT_EQ(m.embed(x), tape.code.mu);
}
