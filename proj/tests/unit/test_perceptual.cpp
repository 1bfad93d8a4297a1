#include <gtest/gtest.h>

#include <filesystem>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "percept/perceptual.hpp"
#include "percept/weights_io.hpp"

using namespace percept;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    const fs::path d = fs::temp_directory_path() / ("percept_test_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

}  // namespace

TEST(Extractor, FeatureShapes) {
    const auto ex = random_extractor<float>(1);
    EXPECT_EQ(extract_features(ex, Tensor<float>({2, 3, 64, 64}, 0.3f), InputNorm::raw01).shape(),
              (std::vector<int>{2, 192, 7, 7}));
    EXPECT_EQ(extract_features(ex, Tensor<float>({1, 3, 96, 96}, 0.3f), InputNorm::raw01).shape(),
              (std::vector<int>{1, 192, 11, 11}));
    EXPECT_EQ(ex.feature_shape(64), (std::vector<int>{192, 7, 7}));
    EXPECT_THROW(extract_features(ex, Tensor<float>({1, 3, 32, 32}), InputNorm::raw01), std::invalid_argument);
    EXPECT_THROW(extract_features(ex, Tensor<float>({1, 1, 64, 64}), InputNorm::raw01), std::invalid_argument);
}

TEST(Extractor, FeaturesLieInSigmoidOfRectifiedRange) {
    const auto ex = random_extractor<float>(2);
    Rng rng(3);
    const auto x = gradcheck::random_tensor({2, 3, 64, 64}, rng, 0, 1).cast<float>();
    for (InputNorm n : {InputNorm::raw01, InputNorm::imagenet_stats}) {
        const auto f = extract_features(ex, x, n);
        for (float v : f.vec()) {
            ASSERT_GE(v, 0.5f);
            ASSERT_LT(v, 1.0f);
        }
    }
}

TEST(Extractor, MatchesOracleOn96) {
    const auto ex = random_extractor<double>(3);
    Rng rng(4);
    const auto x = gradcheck::random_tensor({1, 3, 96, 96}, rng, 0, 1);
    const auto ref = oracle::extractor_features(ex, x.vec(), 96, false);
    EXPECT_LT(gradcheck::relative_error(ex.forward(x, InputNorm::raw01).vec(), ref.v), 1e-12);
}

TEST(Extractor, ForwardDoesNotMutateAndSeedIsDeterministic) {
    const auto a = random_extractor<float>(5), b = random_extractor<float>(5), c = random_extractor<float>(6);
    EXPECT_EQ(a.weights_hash(), b.weights_hash());
    EXPECT_NE(a.weights_hash(), c.weights_hash());
    const std::string h = a.weights_hash();
    a.forward(Tensor<float>({1, 3, 64, 64}, 0.7f), InputNorm::imagenet_stats);
    EXPECT_EQ(a.weights_hash(), h);
    EXPECT_EQ(a.conv_count(), 2);
}

TEST(Extractor, LoadFromWeightsFile) {
    const auto dir = temp_dir("extractor");
    const auto src = random_extractor<float>(7);
    WeightsFile f;
    f.add("conv1.weight", src.conv1().weight());
    f.add("conv1.bias", src.conv1().bias());
    f.add("conv2.weight", src.conv2().weight());
    f.add("conv2.bias", src.conv2().bias());
    f.add("conv3.weight", Tensor<float>({384, 192, 3, 3}));  // later layers are ignored
    write_weights(dir / "alexnet.wts", f);
    const auto loaded = load_extractor<float>(dir / "alexnet.wts");
    EXPECT_EQ(loaded.weights_hash(), src.weights_hash());
    EXPECT_NE(loaded.source().find("alexnet.wts"), std::string::npos);
    fs::remove_all(dir);
}

TEST(Extractor, ShapeMismatchNamesEntries) {
    const auto dir = temp_dir("extractor_bad");
    WeightsFile f;
    f.add("conv1.weight", Tensor<float>({64, 3, 11, 11}));
    f.add("conv1.bias", Tensor<float>({64}));
    f.add("conv2.weight", Tensor<float>({192, 64, 3, 3}));
    write_weights(dir / "bad.wts", f);
    try {
        load_extractor<float>(dir / "bad.wts");
        FAIL() << "expected WeightsError";
    } catch (const WeightsError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("conv2.weight: expected [192x64x5x5], found [192x64x3x3]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("conv2.bias"), std::string::npos) << msg;
    }
    fs::remove_all(dir);
}

TEST(Extractor, CastPreservesWeights) {
    const auto d = random_extractor<double>(8, {4, 6});
    const auto f = d.cast<float>();
    EXPECT_EQ(f.conv2().weight().cast<double>().vec().size(), d.conv2().weight().size());
    EXPECT_NEAR(f.conv1().weight()[17], d.conv1().weight()[17], 1e-7);
}

TEST(InputNorm, ParseAndName) {
    EXPECT_EQ(parse_input_norm("raw01"), InputNorm::raw01);
    EXPECT_EQ(parse_input_norm(to_string(InputNorm::imagenet_stats)), InputNorm::imagenet_stats);
    EXPECT_THROW(parse_input_norm("zscore"), std::invalid_argument);
}
