#ifndef ATTNSEG_PSEUDOMASK_HPP
#define ATTNSEG_PSEUDOMASK_HPP

// Class-token attention maps -> pseudo segmentation mask.
//
// Pipeline: extract one patch-grid map per predicted class, min-max
// normalize and threshold each, paint the binary maps in ascending
// probability order so the most confident class wins overlaps, then fill
// the remaining holes by neighbour majority vote.

#include "attnseg/cls_masking.hpp"
#include "attnseg/core.hpp"
#include "attnseg/head_gating.hpp"
#include "attnseg/vit.hpp"

#include <type_traits>
#include <vector>

namespace attnseg {

using GridMap = Eigen::MatrixXd;
using BinaryMap = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ClassAttention {
    int class_index{0};
    double probability{0.0};
    GridMap map;  // grid x grid, row-major patch order
};

struct AttentionMapStack {
    std::vector<ClassAttention> maps;
    bool unweighted_fallback{false};
};

enum class BackgroundMode { fill, background_class };
enum class Upsampling { nearest, bilinear };

struct PseudoMaskOptions {
    double tau{0.5};
    double decision_threshold{0.5};
    int attn_layer{-1};  // negative counts from the end
    BackgroundMode background_mode{BackgroundMode::fill};
    Upsampling upsampling{Upsampling::nearest};
};

/// Gate-weighted head mean of the chosen layer's class-token attention over
/// patch tokens. `gates` is num_layers x num_heads (deterministic gates).
template <typename Scalar>
AttentionMapStack extract_class_attention(const ForwardOutput<Scalar>& fwd, const LabelSet& predicted,
                                          const std::type_identity_t<Vec<Scalar>>& probs,
                                          const std::type_identity_t<Mat<Scalar>>& gates,
                                          const ModelConfig& cfg, int attn_layer = -1)
{
    if (predicted.empty()) throw InputError("extract_class_attention: no predicted classes");
    if (fwd.num_layers <= 0) throw ConfigError("extract_class_attention: model has no attention layers");
    const int layer = attn_layer < 0 ? fwd.num_layers + attn_layer : attn_layer;
    if (layer < 0 || layer >= fwd.num_layers) {
        throw ConfigError("extract_class_attention: attn_layer " + std::to_string(attn_layer) + " out of range");
    }
    AttentionMapStack stack;
    Eigen::VectorXd weights(fwd.num_heads);
    for (int h = 0; h < fwd.num_heads; ++h) weights(h) = static_cast<double>(gates(layer, h));
    if (!(weights.sum() > 0.0)) {
        warn("all gates closed in layer " + std::to_string(layer) + "; using unweighted head mean");
        weights.setOnes();
        stack.unweighted_fallback = true;
    }
    weights /= weights.sum();

    const int g = cfg.grid();
    for (int c : predicted) {
        if (c < 0 || c >= cfg.num_classes) throw InputError("extract_class_attention: class out of range");
        Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(cfg.num_patches());
        for (int h = 0; h < fwd.num_heads; ++h) {
            if (weights(h) == 0.0) continue;
            row += weights(h) *
                   fwd.attn(layer, h).row(c).segment(cfg.first_patch(), cfg.num_patches()).template cast<double>();
        }
        // row-major reshape: cell (r, col) is patch r * g + col
        GridMap map = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
            row.data(), g, g);
        stack.maps.push_back({c, static_cast<double>(probs(c)), std::move(map)});
    }
    return stack;
}

/// (v - min) / (max - min), or an all-zero map when the map is constant.
GridMap normalize_map(const GridMap& map);

/// 1 where the min-max normalized value is >= tau.
BinaryMap binarize_map(const GridMap& map, double tau);

struct BinaryClassMap {
    int class_index{0};
    double probability{0.0};
    BinaryMap map;
};

/// Nearest-neighbour upsample of a grid map to size x size pixels.
BinaryMap upsample_nearest(const BinaryMap& map, int size);

/// Paints classes from lowest to highest probability (ties: the lower class
/// index is painted last and wins). Untouched pixels are kUnassigned.
ClassMask merge_maps(const std::vector<BinaryClassMap>& maps, int image_size);

/// Repeatedly assigns each unassigned pixel the modal class among its
/// assigned 8-neighbours (ties: lowest class index) until none remain.
/// Assigned pixels never change. A mask with no assigned pixel is returned
/// unchanged with a warning.
ClassMask fill_unassigned(const ClassMask& mask);

struct PseudoMaskResult {
    ClassMask mask;
    LabelSet predicted;
    Eigen::VectorXd probabilities;
};

/// Classes with sigmoid(logit) > threshold, or the single argmax class when
/// none clears it.
template <typename Scalar>
LabelSet predicted_classes(const Vec<Scalar>& logits, double threshold)
{
    LabelSet out;
    Eigen::Index best = 0;
    for (Eigen::Index c = 0; c < logits.size(); ++c) {
        if (static_cast<double>(sigmoid(logits(c))) > threshold) out.insert(static_cast<int>(c));
        if (logits(c) > logits(best)) best = c;
    }
    if (out.empty() && logits.size() > 0) out.insert(static_cast<int>(best));
    return out;
}

/// Pseudo mask from an already computed eval-mode forward pass.
PseudoMaskResult pseudo_mask_from_attention(const AttentionMapStack& stack, const ModelConfig& cfg,
                                            const PseudoMaskOptions& opt);

template <typename Scalar>
PseudoMaskResult pseudo_mask_from_output(const ForwardOutput<Scalar>& fwd, const std::type_identity_t<Mat<Scalar>>& gates,
                                         const ModelConfig& cfg, const PseudoMaskOptions& opt)
{
    const LabelSet predicted = predicted_classes(fwd.logits, opt.decision_threshold);
    const Vec<Scalar> probs = fwd.logits.unaryExpr([](Scalar l) { return sigmoid(l); });
    auto result =
        pseudo_mask_from_attention(extract_class_attention(fwd, predicted, probs, gates, cfg, opt.attn_layer), cfg, opt);
    result.predicted = predicted;
    result.probabilities = probs.template cast<double>();
    return result;
}

/// End-to-end: eval-mode forward (no class-token masking, deterministic
/// gates with pruned heads closed) followed by the map pipeline.
template <typename Scalar>
PseudoMaskResult generate_pseudo_mask(const Image& image, const ModelParams<Scalar>& model,
                                      const GateParams<Scalar>& gates, const PseudoMaskOptions& opt)
{
    const auto g = eval_gates(gates);
    const auto fwd = encoder_forward(image, model, g.g, MaskVector::none(model.config.num_classes));
    return pseudo_mask_from_output(fwd, g.g, model.config, opt);
}

}  // namespace attnseg

#endif  // ATTNSEG_PSEUDOMASK_HPP
