#ifndef ATTNSEG_HEAD_GATING_HPP
#define ATTNSEG_HEAD_GATING_HPP

// Hard Concrete gates on attention heads and the expected-L0 penalty.
//
// A gate sample is g = clamp(s * (zeta - gamma) + gamma, 0, 1) with
// s = sigmoid((log u - log(1 - u) + log_alpha) / beta), u ~ U(0, 1).
// The stretch past [0, 1] puts finite mass on exactly 0 and exactly 1.

#include "attnseg/core.hpp"

#include <algorithm>
#include <limits>
#include <type_traits>

namespace attnseg {

struct HardConcreteOptions {
    double beta{2.0 / 3.0};
    double gamma{-0.1};
    double zeta{1.1};
    double lambda{0.01};
    double init_log_alpha{2.0};
    double prune_threshold{0.05};

    void validate() const
    {
        if (!(beta > 0.0)) throw ConfigError("gate_beta must be > 0");
        if (!(gamma < 0.0)) throw ConfigError("gate_gamma must be < 0");
        if (!(zeta > 1.0)) throw ConfigError("gate_zeta must be > 1");
        if (!(lambda >= 0.0)) throw ConfigError("lambda_reg must be >= 0");
        if (!(prune_threshold > 0.0 && prune_threshold < 1.0)) {
            throw ConfigError("prune_threshold must lie in (0, 1)");
        }
    }
};

/// Per-head keep flags; a pruned head (0) has its gate forced to zero in every mode.
using HeadKeepMask = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
struct GateParams {
    Mat<Scalar> log_alpha;  // num_layers x num_heads
    HeadKeepMask keep;
    Scalar beta{Scalar(2.0 / 3.0)};
    Scalar gamma{Scalar(-0.1)};
    Scalar zeta{Scalar(1.1)};
    Scalar lambda{Scalar(0.01)};

    GateParams() = default;
    GateParams(int layers, int heads, const HardConcreteOptions& opt = {})
        : log_alpha(Mat<Scalar>::Constant(layers, heads, Scalar(opt.init_log_alpha))),
          keep(HeadKeepMask::Ones(layers, heads)),
          beta(Scalar(opt.beta)),
          gamma(Scalar(opt.gamma)),
          zeta(Scalar(opt.zeta)),
          lambda(Scalar(opt.lambda))
    {
    }

    int layers() const noexcept { return static_cast<int>(log_alpha.rows()); }
    int heads() const noexcept { return static_cast<int>(log_alpha.cols()); }
};

enum class GateMode { stochastic, deterministic };

template <typename Scalar>
struct GateSample {
    Mat<Scalar> g;          // layers x heads, every entry in [0, 1]
    Mat<Scalar> dg_dlogit;  // d g / d log_alpha; zero where clamped or pruned
    GateMode mode{GateMode::deterministic};
};

namespace detail {

template <typename Scalar>
void stretch_and_clamp(const GateParams<Scalar>& p, int l, int h, Scalar s, Scalar ds, GateSample<Scalar>& out)
{
    const Scalar stretched = s * (p.zeta - p.gamma) + p.gamma;
    if (!p.keep(l, h) || stretched <= Scalar(0)) {
        out.g(l, h) = Scalar(0);
        out.dg_dlogit(l, h) = Scalar(0);
    } else if (stretched >= Scalar(1)) {
        out.g(l, h) = Scalar(1);
        out.dg_dlogit(l, h) = Scalar(0);
    } else {
        out.g(l, h) = stretched;
        out.dg_dlogit(l, h) = ds * (p.zeta - p.gamma);
    }
}

}  // namespace detail

/// Stochastic gates from explicit uniforms (each entry of `u` in (0, 1)).
template <typename Scalar>
GateSample<Scalar> sample_gates(const GateParams<Scalar>& p, const std::type_identity_t<Mat<Scalar>>& u)
{
    GateSample<Scalar> out{Mat<Scalar>(p.layers(), p.heads()), Mat<Scalar>(p.layers(), p.heads()),
                           GateMode::stochastic};
    const Scalar tiny = std::numeric_limits<Scalar>::min();
    for (int l = 0; l < p.layers(); ++l) {
        for (int h = 0; h < p.heads(); ++h) {
            const Scalar uu = std::clamp(u(l, h), tiny, Scalar(1) - std::numeric_limits<Scalar>::epsilon());
            const Scalar logit = (std::log(uu) - std::log1p(-uu) + p.log_alpha(l, h)) / p.beta;
            const Scalar s = sigmoid(logit);
            detail::stretch_and_clamp(p, l, h, s, s * (Scalar(1) - s) / p.beta, out);
        }
    }
    return out;
}

template <typename Scalar>
GateSample<Scalar> sample_gates(const GateParams<Scalar>& p, Rng& rng)
{
    Mat<Scalar> u(p.layers(), p.heads());
    for (int l = 0; l < p.layers(); ++l) {
        for (int h = 0; h < p.heads(); ++h) {
            u(l, h) = static_cast<Scalar>(uniform_open(rng));
        }
    }
    return sample_gates(p, u);
}

/// Deterministic test-time gates: the noise-free stretched sigmoid.
template <typename Scalar>
GateSample<Scalar> eval_gates(const GateParams<Scalar>& p)
{
    GateSample<Scalar> out{Mat<Scalar>(p.layers(), p.heads()), Mat<Scalar>(p.layers(), p.heads()),
                           GateMode::deterministic};
    for (int l = 0; l < p.layers(); ++l) {
        for (int h = 0; h < p.heads(); ++h) {
            const Scalar s = sigmoid(p.log_alpha(l, h));
            detail::stretch_and_clamp(p, l, h, s, s * (Scalar(1) - s), out);
        }
    }
    return out;
}

/// P(g != 0 | log_alpha) for every head; pruned heads report their pre-pruning value.
template <typename Scalar>
Mat<Scalar> prob_nonzero(const GateParams<Scalar>& p)
{
    const Scalar shift = p.beta * std::log(-p.gamma / p.zeta);
    return p.log_alpha.unaryExpr([shift](Scalar a) { return sigmoid(a - shift); });
}

/// Expected number of open gates, sum_i (1 - P(g_i = 0)).
template <typename Scalar>
Scalar l0_penalty(const GateParams<Scalar>& p)
{
    return prob_nonzero(p).sum();
}

template <typename Scalar>
Mat<Scalar> l0_penalty_grad(const GateParams<Scalar>& p)
{
    return prob_nonzero(p).unaryExpr([](Scalar q) { return q * (Scalar(1) - q); });
}

template <typename Scalar>
Scalar total_loss(Scalar cls_loss, Scalar reg, Scalar lambda) noexcept
{
    return cls_loss + lambda * reg;
}

/// Keep-mask with 0 wherever P(g != 0) < threshold.
template <typename Scalar>
HeadKeepMask prune_heads(const GateParams<Scalar>& p, double threshold)
{
    if (!(threshold > 0.0 && threshold < 1.0)) {
        throw ConfigError("prune threshold must lie in (0, 1)");
    }
    const Mat<Scalar> q = prob_nonzero(p);
    HeadKeepMask keep(p.layers(), p.heads());
    for (int l = 0; l < p.layers(); ++l) {
        int kept = 0;
        for (int h = 0; h < p.heads(); ++h) {
            keep(l, h) = static_cast<double>(q(l, h)) < threshold ? 0 : 1;
            kept += keep(l, h);
        }
        if (kept == 0) {
            warn("all heads pruned in layer " + std::to_string(l) + "; attention block reduces to its residual");
        }
    }
    return keep;
}

/// Fraction of heads whose P(g != 0) falls below `threshold`.
template <typename Scalar>
double pruned_fraction(const GateParams<Scalar>& p, double threshold)
{
    if (p.log_alpha.size() == 0) return 0.0;
    const Mat<Scalar> q = prob_nonzero(p);
    const auto below = (q.array() < Scalar(threshold)).count();
    return static_cast<double>(below) / static_cast<double>(q.size());
}

}  // namespace attnseg

#endif  // ATTNSEG_HEAD_GATING_HPP
