#include "attnseg/cls_masking.hpp"

#include <doctest.h>

using namespace attnseg;

TEST_SUITE("cls-masking")
{
    TEST_CASE("ratio 0 masks nothing and ratio 1 masks every non-label class")
    {
        Rng rng(1);
        for (int i = 0; i < 100; ++i) {
            CHECK(sample_mask({0, 2}, 5, 0.0, rng).count() == 0);
        }
        const MaskVector all = sample_mask({0}, 4, 1.0, rng);
        CHECK(all.m == std::vector<std::uint8_t>{0, 1, 1, 1});
    }

    TEST_CASE("label classes are never masked")
    {
        Rng rng(2);
        std::uniform_int_distribution<int> classes(1, 12);
        std::uniform_real_distribution<double> ratio(0.0, 1.0);
        for (int trial = 0; trial < 10000; ++trial) {
            const int c = classes(rng);
            LabelSet labels;
            const int k = std::uniform_int_distribution<int>(1, c)(rng);
            while (static_cast<int>(labels.size()) < k) labels.insert(std::uniform_int_distribution<int>(0, c - 1)(rng));
            const MaskVector m = sample_mask(labels, c, ratio(rng), rng);
            REQUIRE(m.size() == c);
            for (int l : labels) REQUIRE_FALSE(m.masked(l));
        }
    }

    TEST_CASE("masking frequency of a non-label class matches the ratio")
    {
        Rng rng(3);
        int hits = 0;
        for (int i = 0; i < 10000; ++i) hits += sample_mask({1, 3}, 5, 0.5, rng).m[0];
        const double mean = hits / 10000.0;
        CHECK(mean >= 0.48);
        CHECK(mean <= 0.52);
    }

    TEST_CASE("sampling is deterministic for a fixed seed")
    {
        Rng a(77), b(77);
        for (int i = 0; i < 200; ++i) CHECK(sample_mask({2}, 6, 0.5, a) == sample_mask({2}, 6, 0.5, b));
    }

    TEST_CASE("invalid arguments")
    {
        Rng rng(4);
        CHECK_THROWS_AS(sample_mask({0}, 3, 1.5, rng), ConfigError);
        CHECK_THROWS_AS(sample_mask({0}, 3, -0.1, rng), ConfigError);
        CHECK_THROWS_AS(sample_mask({}, 3, 0.5, rng), InputError);
        CHECK_THROWS_AS(sample_mask({3}, 3, 0.5, rng), InputError);
    }

    TEST_CASE("output masking")
    {
        Mat<double> z(2, 2);
        z << 1, 2, 3, 4;
        CHECK(apply_output_mask(z, MaskVector::none(2)) == z);

        const MaskVector second{{0, 1}};
        Mat<double> expected(2, 2);
        expected << 1, 2, 0, 0;
        CHECK(apply_output_mask(z, second) == expected);

        const MaskVector both{{1, 1}};
        CHECK(apply_output_mask(z, both).isZero(0.0));

        const Mat<double> r = Mat<double>::Random(5, 3);
        const MaskVector m{{1, 0, 1, 0, 0}};
        CHECK(apply_output_mask(apply_output_mask(r, m), m) == apply_output_mask(r, m));

        CHECK_THROWS_AS(apply_output_mask(r, second), ConfigError);
    }
}
