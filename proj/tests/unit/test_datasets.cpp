#include <gtest/gtest.h>

#include <filesystem>
#include <map>
#include <set>
#include <type_traits>

#include "gradcheck.hpp"
#include "percept/datasets.hpp"
#include "percept/evaluation.hpp"
#include "percept/lander.hpp"

using namespace percept;
namespace fs = std::filesystem;

namespace {

SceneConfig small_scene() {
    SceneConfig c;
    c.rollouts = 12;
    c.frames = 30;
    return c;
}

class VectorSource final : public SampleSource {
public:
    VectorSource(std::size_t n, int groups) : n_(n), groups_(groups) {}
    std::size_t size() const override { return n_; }
    int side() const override { return 2; }
    void read_image(std::size_t i, std::span<float> out) const override {
        std::fill(out.begin(), out.end(), static_cast<float>(i) / static_cast<float>(n_));
    }
    std::optional<Label> label(std::size_t i) const override { return ClassId{static_cast<int>(i % 3)}; }
    std::int64_t group(std::size_t i) const override { return static_cast<std::int64_t>(i) % groups_; }

private:
    std::size_t n_;
    int groups_;
};

}  // namespace

TEST(ImageTensor, ValidatesShapeAndRange) {
    EXPECT_NO_THROW(ImageTensor(Tensor<float>({3, 4, 4}, 1.0f)));
    EXPECT_THROW(ImageTensor(Tensor<float>({3, 4, 5})), std::invalid_argument);
    EXPECT_THROW(ImageTensor(Tensor<float>({1, 4, 4})), std::invalid_argument);
    EXPECT_THROW(ImageTensor(Tensor<float>({3, 4, 4}, 1.5f)), std::invalid_argument);
}

TEST(SvhnTile, QuadrantIdentityOnRandomImages) {
    Rng rng(1);
    for (int k = 0; k < 100; ++k) {
        const ImageTensor img(gradcheck::random_tensor({3, 32, 32}, rng, 0, 1).cast<float>());
        const ImageTensor t = svhn_tile(img);
        ASSERT_EQ(t.side(), 64);
        for (int c = 0; c < 3; ++c)
            for (int r = 0; r < 32; ++r)
                for (int col = 0; col < 32; ++col) {
                    const float v = img.at(c, r, col);
                    ASSERT_EQ(t.at(c, r, col), v);
                    ASSERT_EQ(t.at(c, r + 32, col), v);
                    ASSERT_EQ(t.at(c, r, col + 32), v);
                    ASSERT_EQ(t.at(c, r + 32, col + 32), v);
                }
    }
    EXPECT_THROW(svhn_tile(ImageTensor(Tensor<float>({3, 64, 64}))), std::invalid_argument);
}

TEST(Split, GroupsNeverStraddle) {
    const VectorSource src(200, 17);
    std::vector<std::size_t> tr, va;
    split_by_group(src, 5, tr, va);
    EXPECT_EQ(tr.size() + va.size(), 200u);
    std::set<std::int64_t> gt, gv;
    for (auto i : tr) gt.insert(src.group(i));
    for (auto i : va) gv.insert(src.group(i));
    for (auto g : gt) EXPECT_EQ(gv.count(g), 0u);
    EXPECT_EQ(gt.size(), 14u);  // round(0.8 * 17)
    std::vector<std::size_t> tr2, va2;
    split_by_group(src, 5, tr2, va2);
    EXPECT_EQ(tr, tr2);
}

TEST(LimitSource, SeededSubsetKeepsOrder) {
    auto base = std::make_shared<VectorSource>(100, 100);
    auto a = limit_source(base, 30, 9), b = limit_source(base, 30, 9), c = limit_source(base, 30, 10);
    ASSERT_EQ(a->size(), 30u);
    std::vector<float> pa(12), pb(12), pc(12);
    bool differs = false;
    float prev = -1;
    for (std::size_t i = 0; i < 30; ++i) {
        a->read_image(i, pa);
        b->read_image(i, pb);
        c->read_image(i, pc);
        EXPECT_EQ(pa, pb);
        EXPECT_GT(pa[0], prev);
        prev = pa[0];
        differs |= pa != pc;
    }
    EXPECT_TRUE(differs);
    EXPECT_EQ(limit_source(base, 0, 1), base);
    EXPECT_EQ(limit_source(base, 500, 1), base);
}

TEST(TestGate, TokenCannotBeDefaultConstructed) {
    static_assert(!std::is_default_constructible_v<TestAccess>);
    const DatasetBundle b = generate_lander_collection(small_scene(), 1);
    EXPECT_GT(b.test_part(TestSetGate::grant()).size(), 0u);
}

TEST(Lander, SplitsByRolloutAndFiltersOffscreen) {
    const auto world = std::make_shared<const LanderWorld>(small_scene(), 3);
    EXPECT_EQ(world->frames().size(), 12u * 30u);
    const DatasetBundle b = bundle_from_world(world);
    EXPECT_EQ(b.task(), TaskKind::positioning);
    EXPECT_EQ(b.side(), 64);
    EXPECT_EQ(b.autoencoder_part().size(), 6u * 30u);
    const auto& pred = b.predictor_part();
    std::set<std::int64_t> ae_groups, pred_groups, test_groups;
    for (std::size_t i = 0; i < b.autoencoder_part().size(); ++i) ae_groups.insert(b.autoencoder_part().source->group(i));
    for (std::size_t i = 0; i < pred.size(); ++i) pred_groups.insert(pred.source->group(i));
    const auto& test = b.test_part(TestSetGate::grant());
    for (std::size_t i = 0; i < test.size(); ++i) test_groups.insert(test.group(i));
    for (auto g : pred_groups) {
        EXPECT_EQ(ae_groups.count(g), 0u);
        EXPECT_EQ(test_groups.count(g), 0u);
    }
    EXPECT_EQ(pred_groups.size() + test_groups.size(), 6u);
    // Predictor/test frames show the whole sprite: its label lies inside the image.
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const auto p = std::get<Position>(*pred.source->label(i));
        EXPECT_GE(p.x, 0);
        EXPECT_LE(p.x, 64);
        EXPECT_GE(p.y, 0);
        EXPECT_LE(p.y, 64);
    }
    EXPECT_GE(removed_fraction(*world), 0.0);
    EXPECT_LE(removed_fraction(*world), 1.0);
}

TEST(Lander, SpriteRenderedAtLabel) {
    const SceneConfig cfg = small_scene();
    const DatasetBundle b = generate_lander_collection(cfg, 4);
    const auto& src = *b.predictor_part().source;
    const float sprite = SceneConfig::quantize(cfg.lander_intensity) / 255.0f;
    for (std::size_t i = 0; i < std::min<std::size_t>(src.size(), 50); ++i) {
        const auto img = src.image(i);
        const auto p = std::get<Position>(*src.label(i));
        const int col = static_cast<int>(p.x), row = static_cast<int>(p.y);
        EXPECT_FLOAT_EQ(img.at(0, row, col), sprite);
    }
}

TEST(Lander, GenerationIsDeterministic) {
    const DatasetBundle a = generate_lander_collection(small_scene(), 7), b = generate_lander_collection(small_scene(), 7);
    ASSERT_EQ(a.predictor_part().size(), b.predictor_part().size());
    std::vector<std::size_t> rows = {0, 5, 11};
    EXPECT_EQ(load_batch(*a.autoencoder_part().source, rows), load_batch(*b.autoencoder_part().source, rows));
    EXPECT_EQ(a.predictor_part().train, b.predictor_part().train);
}

TEST(Lander, FrameStrideSubsamplesTheSameTrajectories) {
    SceneConfig strided = small_scene();
    strided.frame_stride = 7;
    const LanderWorld full(small_scene(), 4), sub(strided, 4);
    ASSERT_EQ(sub.frames().size(), 12u * 5u);  // timesteps 0, 7, 14, 21, 28
    std::map<std::pair<int, int>, LanderFrame> by_step;
    for (const auto& f : full.frames()) by_step[{f.rollout, f.frame}] = f;
    for (const auto& f : sub.frames()) {
        EXPECT_EQ(f.frame % 7, 0);
        const auto& g = by_step.at({f.rollout, f.frame});
        EXPECT_EQ(f.left, g.left);
        EXPECT_EQ(f.top, g.top);
    }
    strided.frame_stride = 31;
    EXPECT_THROW(strided.validate(), std::invalid_argument);
}

TEST(Lander, DiskRoundTrip) {
    const fs::path dir = fs::temp_directory_path() / ("percept_lander_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    const LanderWorld world(small_scene(), 8);
    write_lander_collection(world, dir);
    const DatasetBundle mem = generate_lander_collection(small_scene(), 8);
    const DatasetBundle disk = read_lander_collection(dir);
    ASSERT_EQ(mem.predictor_part().size(), disk.predictor_part().size());
    ASSERT_EQ(mem.test_size(), disk.test_size());
    EXPECT_EQ(mem.predictor_part().train, disk.predictor_part().train);
    std::vector<std::size_t> rows(mem.predictor_part().size());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    EXPECT_EQ(load_batch(*mem.predictor_part().source, rows), load_batch(*disk.predictor_part().source, rows));
    for (std::size_t i = 0; i < rows.size(); ++i)
        EXPECT_EQ(*mem.predictor_part().source->label(i), *disk.predictor_part().source->label(i));
    fs::remove_all(dir);
}

TEST(SceneConfig, Validation) {
    SceneConfig c;
    c.rollouts = 1;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = SceneConfig{};
    c.lander_intensity = c.terrain_intensity = 0.6;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = SceneConfig{};
    c.lander_width = 100;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    SceneConfig d;
    EXPECT_TRUE(set_scene_field(d, "frames", 12));
    EXPECT_EQ(d.frames, 12);
    EXPECT_FALSE(set_scene_field(d, "colour", 1));
}
