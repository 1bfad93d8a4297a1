#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "gradcheck.hpp"
#include "percept/predictors.hpp"

using namespace percept;
using gradcheck::numeric;
using gradcheck::random_tensor;
using gradcheck::relative_error;

TEST(Grid, ThirtySixUniqueConfigsWithNonIncreasingWidths) {
    const auto grid = enumerate_mlp_grid(32, 2);
    ASSERT_EQ(grid.size(), 36u);
    std::set<std::string> names;
    for (const auto& c : grid) {
        EXPECT_NO_THROW(c.validate());
        EXPECT_EQ(c.kind, PredictorKind::mlp);
        EXPECT_GE(c.hidden.size(), 1u);
        EXPECT_LE(c.hidden.size(), 2u);
        if (c.hidden.size() == 2) EXPECT_LE(c.hidden[1], c.hidden[0]);
        names.insert(c.name());
    }
    EXPECT_EQ(names.size(), 36u);
    EXPECT_EQ(grid.front().name(), "mlp[32]-relu-none");
    EXPECT_EQ(grid[1].name(), "mlp[32]-relu-softmax");
    EXPECT_EQ(grid[2].name(), "mlp[32]-sigmoid-none");
    EXPECT_EQ(grid.back().name(), "mlp[128,128]-sigmoid-softmax");
    EXPECT_EQ(enumerate_mlp_grid(), enumerate_mlp_grid());
}

TEST(Config, Validation) {
    PredictorConfig c{PredictorKind::mlp, {64, 128}, Activation::rectify, OutputActivation::none, 4, 2};
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c.hidden = {48};
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c.hidden = {32, 32, 32};
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c.hidden = {32};
    c.input_dim = 0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    PredictorConfig l = linear_config(4, 2);
    EXPECT_NO_THROW(l.validate());
    EXPECT_EQ(l.name(), "linear");
    l.hidden = {32};
    EXPECT_THROW(l.validate(), std::invalid_argument);
}

class MlpGrad : public ::testing::TestWithParam<int> {};

TEST_P(MlpGrad, BackwardMatchesFiniteDifferences) {
    auto grid = enumerate_mlp_grid(5, 3);
    const PredictorConfig cfg = grid[static_cast<std::size_t>(GetParam())];
    Mlp net(cfg, 17);
    Rng rng(18);
    Tensor<double> x = random_tensor({4, 5}, rng);
    const Tensor<double> w = random_tensor({4, 3}, rng);
    auto f = [&] {
        const auto y = net.forward(x);
        double s = 0;
        for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * w[i];
        return s;
    };
    auto params = net.params();
    nn::zero_grads(params);
    net.backward(net.forward_tape(x), w);
    for (auto& p : params) {
        const auto coords = gradcheck::sample_coords(p.value->size(), 60, 3);
        EXPECT_LT(relative_error(gradcheck::pick(*p.grad, coords), numeric(f, *p.value, coords)), 1e-5) << cfg.name() << " " << p.name;
    }
}

// One config per (depth, activation, output activation) combination.
INSTANTIATE_TEST_SUITE_P(Configs, MlpGrad, ::testing::Values(0, 1, 2, 3, 32, 33, 34, 35));

TEST(Mlp, SoftmaxRowsSumToOne) {
    Mlp net(enumerate_mlp_grid(4, 6)[1], 1);
    Rng rng(2);
    const auto y = net.forward(random_tensor({5, 4}, rng, -50, 50));
    for (int r = 0; r < 5; ++r) {
        double s = 0;
        for (int j = 0; j < 6; ++j) s += y[r * 6 + j];
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

namespace {

// Positions are an affine function of the embedding plus tiny noise.
struct Problem {
    Tensor<double> emb;
    std::vector<Label> labels;
    std::vector<std::size_t> train, val;
};

Problem affine_positions(int n, int d, std::uint64_t seed) {
    Rng rng(seed);
    Problem p{random_tensor({n, d}, rng), {}, {}, {}};
    for (int i = 0; i < n; ++i) {
        const double* e = p.emb.data() + static_cast<std::size_t>(i) * d;
        p.labels.emplace_back(Position{32 + 10 * e[0] - 5 * e[1], 20 + 8 * e[2]});
        (i % 5 == 0 ? p.val : p.train).push_back(static_cast<std::size_t>(i));
    }
    return p;
}

Problem separable_classes(int n, int d, std::uint64_t seed) {
    Rng rng(seed);
    Problem p{random_tensor({n, d}, rng), {}, {}, {}};
    for (int i = 0; i < n; ++i) {
        const double* e = p.emb.data() + static_cast<std::size_t>(i) * d;
        const int cls = e[0] > 0.3 ? 2 : (e[0] > -0.3 ? 1 : 0);
        p.labels.emplace_back(ClassId{cls});
        (i % 5 == 0 ? p.val : p.train).push_back(static_cast<std::size_t>(i));
    }
    return p;
}

}  // namespace

TEST(TrainPredictor, LinearRecoversAffineMapExactly) {
    const Problem p = affine_positions(200, 6, 1);
    ProbeOptions opt;
    opt.target_scale = 64;
    const auto tp = train_predictor(linear_config(6, 2), p.emb, p.labels, std::nullopt, p.train, p.val, 3, opt);
    EXPECT_FALSE(tp.failed);
    EXPECT_LT(tp.validation_loss, 1e-20);
    const auto pred = predict(tp, p.emb);
    for (std::size_t i = 0; i < p.labels.size(); ++i) {
        EXPECT_NEAR(pred.positions[i].x, std::get<Position>(p.labels[i]).x, 1e-8);
        EXPECT_NEAR(pred.positions[i].y, std::get<Position>(p.labels[i]).y, 1e-8);
    }
}

TEST(TrainPredictor, LinearFallsBackToGradientWhenUnderdetermined) {
    const Problem p = affine_positions(20, 30, 2);
    ProbeOptions opt;
    opt.target_scale = 64;
    opt.max_epochs = 5;
    const auto tp = train_predictor(linear_config(30, 2), p.emb, p.labels, std::nullopt, p.train, p.val, 3, opt);
    EXPECT_GT(tp.epochs, 0);
    EXPECT_TRUE(std::isfinite(tp.validation_loss));
}

TEST(TrainPredictor, MlpLearnsSeparableClasses) {
    const Problem p = separable_classes(600, 4, 3);
    ProbeOptions opt;
    opt.max_epochs = 150;
    opt.lr = 1e-2;
    const auto tp = train_predictor(enumerate_mlp_grid(4, 3)[0], p.emb, p.labels, 3, p.train, p.val, 4, opt);
    EXPECT_FALSE(tp.failed);
    const auto pred = predict(tp, p.emb);
    int correct = 0;
    for (std::size_t i : p.val) correct += pred.classes[i] == std::get<ClassId>(p.labels[i]);
    EXPECT_GT(static_cast<double>(correct) / p.val.size(), 0.9);
}

TEST(TrainPredictor, SnapshotIsBestValidationAndSeeded) {
    const Problem p = affine_positions(300, 4, 5);
    ProbeOptions opt;
    opt.target_scale = 64;
    opt.max_epochs = 30;
    opt.patience = 5;
    const auto cfg = enumerate_mlp_grid(4, 2)[4];
    const auto a = train_predictor(cfg, p.emb, p.labels, std::nullopt, p.train, p.val, 9, opt);
    const auto b = train_predictor(cfg, p.emb, p.labels, std::nullopt, p.train, p.val, 9, opt);
    EXPECT_EQ(a.validation_loss, b.validation_loss);
    // The returned network reproduces the recorded validation loss.
    const ProbeTargets t = make_targets(p.labels, std::nullopt, 64);
    EXPECT_NEAR(detail::evaluate_loss(a.network, TaskKind::positioning, a.scaler.apply(p.emb), t.values, p.val), a.validation_loss, 1e-12);
}

TEST(InputScaler, TrainRowsBecomeZeroMeanUnitVariance) {
    Rng rng(8);
    Tensor<double> x = random_tensor({40, 3}, rng, -5, 20);
    for (int i = 0; i < 40; ++i) x[i * 3 + 2] = 7.0;  // constant column passes through centred
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < 40; i += 2) rows.push_back(i);
    const InputScaler s = InputScaler::fit(x, rows);
    const Tensor<double> y = s.apply(x);
    for (int j = 0; j < 2; ++j) {
        double m = 0, v = 0;
        for (auto r : rows) m += y[r * 3 + j];
        m /= rows.size();
        for (auto r : rows) v += (y[r * 3 + j] - m) * (y[r * 3 + j] - m);
        EXPECT_NEAR(m, 0.0, 1e-12);
        EXPECT_NEAR(v / rows.size(), 1.0, 1e-12);
    }
    EXPECT_EQ(y[5], 0.0);
    EXPECT_EQ(InputScaler{}.apply(x), x);
}

TEST(TrainPredictor, PredictAppliesStoredScaling) {
    Problem p = affine_positions(200, 3, 9);
    for (auto& v : p.emb.vec()) v = 100 + 40 * v;
    ProbeOptions opt;
    opt.target_scale = 64;
    const auto tp = train_predictor(linear_config(3, 2), p.emb, p.labels, std::nullopt, p.train, p.val, 3, opt);
    EXPECT_FALSE(tp.scaler.mean.empty());
    const auto pred = predict(tp, p.emb);
    for (std::size_t i = 0; i < p.labels.size(); ++i) EXPECT_NEAR(pred.positions[i].x, std::get<Position>(p.labels[i]).x, 1e-6);
}

TEST(TrainPredictor, Errors) {
    const Problem p = affine_positions(50, 4, 6);
    EXPECT_THROW(train_predictor(linear_config(5, 2), p.emb, p.labels, std::nullopt, p.train, p.val, 1), PredictorError);
    EXPECT_THROW(train_predictor(linear_config(4, 3), p.emb, p.labels, std::nullopt, p.train, p.val, 1), PredictorError);
    EXPECT_THROW(train_predictor(linear_config(4, 2), p.emb, p.labels, std::nullopt, {}, p.val, 1), PredictorError);
    std::vector<Label> one_class(50, ClassId{1});
    EXPECT_THROW(train_predictor(linear_config(4, 3), p.emb, one_class, 3, p.train, p.val, 1), PredictorError);
}

TEST(TrainPredictor, NonFiniteEmbeddingsMarkFailure) {
    Problem p = affine_positions(100, 4, 7);
    p.emb[5] = std::numeric_limits<double>::quiet_NaN();
    const auto tp = train_predictor(enumerate_mlp_grid(4, 2)[0], p.emb, p.labels, std::nullopt, p.train, p.val, 1);
    EXPECT_TRUE(tp.failed);
    EXPECT_FALSE(tp.failure.empty());
}
