#ifndef ATTNSEG_OBJECTIVE_HPP
#define ATTNSEG_OBJECTIVE_HPP

// Training objective L = L_cls + lambda * L_reg on one batch, with its
// gradient. Class-token masks and gate noise are drawn from per-sample
// streams seeded by (step_seed, sample index), so re-evaluating the same
// step with perturbed parameters reuses the same noise.

#include "attnseg/cls_masking.hpp"
#include "attnseg/head_gating.hpp"
#include "attnseg/metrics.hpp"
#include "attnseg/parallel.hpp"
#include "attnseg/vit.hpp"

#include <span>
#include <vector>

namespace attnseg {

struct BatchItem {
    const Image* input;  // normalized image
    const LabelSet* labels;
};

struct ObjectiveOptions {
    double mask_ratio{0.5};
    bool masked_in_loss{true};
};

template <typename Scalar>
struct ObjectiveResult {
    Scalar loss{0};
    Scalar cls_loss{0};
    Scalar reg_loss{0};
    ModelParams<Scalar> grad;
    Mat<Scalar> grad_log_alpha;
};

template <typename Scalar>
struct ObjectiveWorkspace {
    std::vector<ModelParams<Scalar>> sample_grads;
    std::vector<Mat<Scalar>> sample_dlog_alpha;
    std::vector<Scalar> sample_loss;
};

/// Per-sample noise for one step: class-token mask then gate uniforms.
template <typename Scalar>
std::pair<MaskVector, GateSample<Scalar>> draw_sample_noise(const LabelSet& labels, const GateParams<Scalar>& gates,
                                                             int num_classes, double mask_ratio,
                                                             std::uint64_t step_seed, std::size_t index)
{
    Rng rng(derive_seed(step_seed, 0x5a3e, index));
    MaskVector mask = sample_mask(labels, num_classes, mask_ratio, rng);
    GateSample<Scalar> g = sample_gates(gates, rng);
    return {std::move(mask), std::move(g)};
}

template <typename Scalar>
ObjectiveResult<Scalar> evaluate_objective(std::span<const BatchItem> batch, const ModelParams<Scalar>& model,
                                           const GateParams<Scalar>& gates, const ObjectiveOptions& opt,
                                           std::uint64_t step_seed, ObjectiveWorkspace<Scalar>& ws)
{
    const ModelConfig& cfg = model.config;
    const std::size_t n = batch.size();
    if (n == 0) throw InputError("evaluate_objective: empty batch");
    if (ws.sample_grads.size() < n) ws.sample_grads.resize(n, ModelParams<Scalar>::zeros(cfg));
    ws.sample_dlog_alpha.resize(n);
    ws.sample_loss.assign(n, Scalar(0));

    parallel_for(n, [&](std::size_t i) {
        const auto [mask, gs] =
            draw_sample_noise(*batch[i].labels, gates, cfg.num_classes, opt.mask_ratio, step_seed, i);
        ForwardTrace<Scalar> trace;
        const auto fwd = encoder_forward(*batch[i].input, model, gs.g, mask, &trace);

        Vec<Scalar> targets = Vec<Scalar>::Zero(cfg.num_classes);
        for (int c : *batch[i].labels) targets(c) = Scalar(1);
        std::vector<std::uint8_t> keep(cfg.num_classes, 1);
        if (!opt.masked_in_loss) {
            for (int c = 0; c < cfg.num_classes; ++c) keep[c] = mask.masked(c) ? 0 : 1;
        }
        const auto* loss_mask = opt.masked_in_loss ? nullptr : &keep;
        ws.sample_loss[i] = bce_loss(fwd.logits, targets, loss_mask);
        const Vec<Scalar> dlogits = bce_loss_grad(fwd.logits, targets, loss_mask) / Scalar(n);

        auto& grad = ws.sample_grads[i];
        grad.set_zero();
        Mat<Scalar> dgates = Mat<Scalar>::Zero(cfg.num_layers, cfg.num_heads);
        encoder_backward(dlogits, trace, model, gs.g, grad, dgates);
        ws.sample_dlog_alpha[i] = dgates.cwiseProduct(gs.dg_dlogit);
    });

    ObjectiveResult<Scalar> r;
    r.grad = ModelParams<Scalar>::zeros(cfg);
    r.grad_log_alpha = Mat<Scalar>::Zero(cfg.num_layers, cfg.num_heads);
    auto total = r.grad.tensors();
    for (std::size_t i = 0; i < n; ++i) {
        r.cls_loss += ws.sample_loss[i];
        auto part = ws.sample_grads[i].tensors();
        for (std::size_t t = 0; t < total.size(); ++t) {
            auto dst = total[t].values;
            const auto src = part[t].values;
            for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
        }
        r.grad_log_alpha += ws.sample_dlog_alpha[i];
    }
    r.cls_loss /= Scalar(n);
    r.reg_loss = l0_penalty(gates);
    r.loss = total_loss(r.cls_loss, r.reg_loss, gates.lambda);
    r.grad_log_alpha += gates.lambda * l0_penalty_grad(gates);
    return r;
}

}  // namespace attnseg

#endif  // ATTNSEG_OBJECTIVE_HPP
