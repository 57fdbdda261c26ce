#include "attnseg/head_gating.hpp"
#include "attnseg/vit.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <cmath>

using namespace attnseg;

namespace {

GateParams<double> single(double log_alpha)
{
    GateParams<double> p(1, 1);
    p.log_alpha(0, 0) = log_alpha;
    return p;
}

}  // namespace

TEST_SUITE("head-gating")
{
    TEST_CASE("closed-form sample at log_alpha = 0, u = 0.5")
    {
        const auto p = single(0.0);
        const auto s = sample_gates(p, Mat<double>::Constant(1, 1, 0.5));
        CHECK(s.g(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
        CHECK(s.mode == GateMode::stochastic);
    }

    TEST_CASE("saturated log_alpha pins the gate")
    {
        Rng rng(1);
        for (int i = 0; i < 1000; ++i) {
            CHECK(sample_gates(single(60.0), rng).g(0, 0) == 1.0);
            CHECK(sample_gates(single(-60.0), rng).g(0, 0) == 0.0);
        }
        CHECK(eval_gates(single(60.0)).g(0, 0) == 1.0);
        CHECK(eval_gates(single(-60.0)).g(0, 0) == 0.0);
    }

    TEST_CASE("deterministic gates")
    {
        CHECK(eval_gates(single(0.0)).g(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
        GateParams<double> p(3, 4);
        p.log_alpha.setRandom();
        p.log_alpha *= 3.0;
        const auto a = eval_gates(p);
        const auto b = eval_gates(p);
        CHECK(a.g == b.g);
        CHECK(a.mode == GateMode::deterministic);
    }

    TEST_CASE("expected L0 penalty values")
    {
        const double p0 = l0_penalty(single(0.0));
        CHECK(p0 == doctest::Approx(0.832).epsilon(1e-3 / 0.832));
        CHECK(1.0 / (1.0 + std::exp(-(0.0 - (2.0 / 3.0) * std::log(0.1 / 1.1)))) == doctest::Approx(p0));

        GateParams<double> sixteen(4, 4);
        sixteen.log_alpha.setZero();
        CHECK(l0_penalty(sixteen) == doctest::Approx(16 * p0));
        CHECK(l0_penalty(sixteen) == doctest::Approx(13.31).epsilon(1e-3));

        GateParams<double> dead(2, 2);
        dead.log_alpha.setConstant(-200.0);
        CHECK(l0_penalty(dead) == doctest::Approx(0.0));
    }

    TEST_CASE("combined objective arithmetic")
    {
        CHECK(total_loss(1.0, 13.31, 0.01) == doctest::Approx(1.1331).epsilon(1e-12));
        CHECK(total_loss(0.7, 13.31, 0.0) == 0.7);
        CHECK(total_loss(0.7, 0.0, 0.01) == 0.7);
    }

    TEST_CASE("L0 gradient matches central differences")
    {
        Rng rng(5);
        std::uniform_real_distribution<double> la(-6.0, 6.0);
        double worst = 0.0;
        for (int draw = 0; draw < 100; ++draw) {
            GateParams<double> p(2, 3);
            for (Eigen::Index i = 0; i < p.log_alpha.size(); ++i) p.log_alpha.data()[i] = la(rng);
            const Mat<double> g = l0_penalty_grad(p);
            for (Eigen::Index i = 0; i < p.log_alpha.size(); ++i) {
                const double h = 1e-5;
                auto up = p, down = p;
                up.log_alpha.data()[i] += h;
                down.log_alpha.data()[i] -= h;
                const double fd = (l0_penalty(up) - l0_penalty(down)) / (2 * h);
                worst = std::max(worst, std::abs(g.data()[i] - fd) / std::max(std::abs(fd), 1e-12));
            }
        }
        CHECK(worst < 1e-4);
    }

    TEST_CASE("L0 penalty is monotone in each log_alpha")
    {
        Rng rng(6);
        GateParams<double> p(3, 3);
        for (int trial = 0; trial < 200; ++trial) {
            p.log_alpha = Mat<double>::Random(3, 3) * 5.0;
            const double base = l0_penalty(p);
            const auto i = std::uniform_int_distribution<Eigen::Index>(0, 8)(rng);
            p.log_alpha.data()[i] += 0.1;
            CHECK(l0_penalty(p) >= base);
        }
    }

    TEST_CASE("sampled gates stay in [0, 1] and hit zero at the closed-form rate")
    {
        for (double la : {-2.0, 0.0, 2.0}) {
            const auto p = single(la);
            Rng rng(derive_seed(7, static_cast<std::uint64_t>(la + 10)));
            long zeros = 0;
            bool in_range = true;
            const long n = 1000000;
            for (long i = 0; i < n; ++i) {
                const double g = sample_gates(p, rng).g(0, 0);
                in_range &= g >= 0.0 && g <= 1.0;
                zeros += g == 0.0;
            }
            const double expected = 1.0 - prob_nonzero(p)(0, 0);
            INFO("log_alpha = " << la);
            CHECK(in_range);
            CHECK(std::abs(static_cast<double>(zeros) / n - expected) < 0.01);
        }
    }

    TEST_CASE("stochastic gate derivative matches differences at fixed noise")
    {
        GateParams<double> p(1, 4);
        p.log_alpha << -0.5, 0.3, 1.0, 2.0;
        Mat<double> u(1, 4);
        u << 0.3, 0.5, 0.2, 0.1;
        const auto s = sample_gates(p, u);
        for (int h = 0; h < 4; ++h) {
            auto up = p, down = p;
            up.log_alpha(0, h) += 1e-6;
            down.log_alpha(0, h) -= 1e-6;
            const double fd = (sample_gates(up, u).g(0, h) - sample_gates(down, u).g(0, h)) / 2e-6;
            CHECK(s.dg_dlogit(0, h) == doctest::Approx(fd).epsilon(1e-6));
        }
    }

    TEST_CASE("pruning by keep probability")
    {
        GateParams<double> p(1, 2);
        // P(g != 0) = 0.9 and 0.02
        const double shift = p.beta * std::log(-p.gamma / p.zeta);
        p.log_alpha(0, 0) = std::log(0.9 / 0.1) + shift;
        p.log_alpha(0, 1) = std::log(0.02 / 0.98) + shift;
        const HeadKeepMask keep = prune_heads(p, 0.05);
        CHECK(keep(0, 0) == 1);
        CHECK(keep(0, 1) == 0);
        CHECK(pruned_fraction(p, 0.05) == 0.5);
        CHECK((prune_heads(p, 0.01) == 1).all());
        CHECK_THROWS_AS(prune_heads(p, 0.0), ConfigError);
    }

    TEST_CASE("a pruned head is closed in every mode and acts like gate 0")
    {
        GateParams<double> p(2, 2);
        p.keep(1, 0) = 0;
        Rng rng(8);
        CHECK(eval_gates(p).g(1, 0) == 0.0);
        for (int i = 0; i < 100; ++i) CHECK(sample_gates(p, rng).g(1, 0) == 0.0);

        ModelConfig cfg;
        cfg.image_size = 8;
        cfg.patch_size = 4;
        cfg.embed_dim = 8;
        cfg.num_layers = 2;
        cfg.num_heads = 2;
        cfg.num_classes = 2;
        const auto model = test::random_model<double>(cfg, 9);
        const Image img = test::random_image(8, 3, 10);
        Mat<double> forced = eval_gates(GateParams<double>(2, 2)).g;
        forced(1, 0) = 0.0;
        const auto a = encoder_forward(img, model, eval_gates(p).g, MaskVector::none(2));
        const auto b = encoder_forward(img, model, forced, MaskVector::none(2));
        CHECK(a.logits == b.logits);
    }

    TEST_CASE("pruning a whole layer warns")
    {
        GateParams<double> p(2, 2);
        p.log_alpha.row(0).setConstant(-50.0);
        mute_warnings(true);
        const long before = warning_count();
        const auto keep = prune_heads(p, 0.05);
        mute_warnings(false);
        CHECK(warning_count() == before + 1);
        CHECK((keep.row(0) == 0).all());
        CHECK((keep.row(1) == 1).all());
    }

    TEST_CASE("option validation")
    {
        HardConcreteOptions o;
        CHECK_NOTHROW(o.validate());
        o.gamma = 0.1;
        CHECK_THROWS_AS(o.validate(), ConfigError);
        o = {};
        o.zeta = 0.9;
        CHECK_THROWS_AS(o.validate(), ConfigError);
        o = {};
        o.lambda = -1.0;
        CHECK_THROWS_AS(o.validate(), ConfigError);
    }
}
