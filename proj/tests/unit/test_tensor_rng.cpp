#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "percept/hash.hpp"
#include "percept/rng.hpp"
#include "percept/tensor.hpp"

using namespace percept;

TEST(Tensor, ShapeAndFill) {
    Tensor<float> t({2, 3, 4, 5}, 1.5f);
    EXPECT_EQ(t.size(), 120u);
    EXPECT_EQ(t.rank(), 4u);
    EXPECT_EQ(t.stride0(), 60u);
    EXPECT_FLOAT_EQ(t.sum(), 180.0f);
    t.at(1, 2, 3, 4) = 7;
    EXPECT_EQ(t[119], 7);
}

TEST(Tensor, RejectsMismatchedData) {
    EXPECT_THROW(Tensor<float>({2, 2}, std::vector<float>(3)), std::invalid_argument);
    Tensor<float> t({2, 3});
    EXPECT_THROW(t.reshape({4, 2}), std::invalid_argument);
    t.reshape({3, 2});
    EXPECT_EQ(t.dim(0), 3);
}

TEST(Tensor, CastRoundTrip) {
    Tensor<double> d({3}, std::vector<double>{0.5, -1.25, 2.0});
    EXPECT_EQ(d.cast<float>().cast<double>(), d);
}

TEST(Rng, SameSeedSameStream) {
    Rng a(42), b(42), c(43);
    bool differs = false;
    for (int i = 0; i < 100; ++i) {
        const auto x = a.next_u64();
        EXPECT_EQ(x, b.next_u64());
        differs |= x != c.next_u64();
    }
    EXPECT_TRUE(differs);
}

TEST(Rng, UniformAndNormalMoments) {
    Rng r(7);
    double su = 0, sn = 0, sn2 = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double u = r.uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        su += u;
        const double z = r.normal();
        sn += z;
        sn2 += z * z;
    }
    EXPECT_NEAR(su / n, 0.5, 0.005);
    EXPECT_NEAR(sn / n, 0.0, 0.01);
    EXPECT_NEAR(sn2 / n, 1.0, 0.02);
}

TEST(Rng, BelowCoversRangeAndShuffleIsPermutation) {
    Rng r(3);
    std::set<std::uint64_t> seen;
    for (int i = 0; i < 1000; ++i) seen.insert(r.below(7));
    EXPECT_EQ(seen.size(), 7u);
    EXPECT_EQ(*seen.rbegin(), 6u);
    std::vector<int> v(50);
    for (int i = 0; i < 50; ++i) v[i] = i;
    r.shuffle(v);
    std::set<int> s(v.begin(), v.end());
    EXPECT_EQ(s.size(), 50u);
}

TEST(Rng, DeriveSeedSeparatesTags) {
    EXPECT_EQ(derive_seed(1, 2, 3), derive_seed(1, 2, 3));
    EXPECT_NE(derive_seed(1, 2, 3), derive_seed(1, 3, 2));
    EXPECT_NE(derive_seed(1, 2), derive_seed(2, 2));
    EXPECT_NE(derive_seed(1), derive_seed(1, 0));
}

TEST(Hash, KnownDigests) {
    EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    EXPECT_EQ(Digest("MD5").update("abc").hex(), "900150983cd24fb0d6963f7d28e17f72");
}
