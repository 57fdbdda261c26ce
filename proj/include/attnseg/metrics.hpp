#ifndef ATTNSEG_METRICS_HPP
#define ATTNSEG_METRICS_HPP

#include "attnseg/cls_masking.hpp"
#include "attnseg/core.hpp"

#include <optional>
#include <vector>

namespace attnseg {

/// Mean binary cross-entropy over the classes selected by `loss_mask`
/// (all classes when absent), in the stable form
/// max(l, 0) - l * t + log(1 + exp(-|l|)).
template <typename Scalar>
Scalar bce_loss(const Vec<Scalar>& logits, const Vec<Scalar>& targets,
                const std::vector<std::uint8_t>* loss_mask = nullptr)
{
    if (!logits.allFinite()) throw NumericError("bce_loss: non-finite logits");
    Scalar sum(0);
    int n = 0;
    for (Eigen::Index i = 0; i < logits.size(); ++i) {
        if (loss_mask && !(*loss_mask)[i]) continue;
        const Scalar l = logits(i);
        sum += std::max(l, Scalar(0)) - l * targets(i) + std::log1p(std::exp(-std::abs(l)));
        ++n;
    }
    return n == 0 ? Scalar(0) : sum / Scalar(n);
}

/// d bce_loss / d logits.
template <typename Scalar>
Vec<Scalar> bce_loss_grad(const Vec<Scalar>& logits, const Vec<Scalar>& targets,
                          const std::vector<std::uint8_t>* loss_mask = nullptr)
{
    Vec<Scalar> g = Vec<Scalar>::Zero(logits.size());
    int n = 0;
    for (Eigen::Index i = 0; i < logits.size(); ++i) {
        if (loss_mask && !(*loss_mask)[i]) continue;
        g(i) = sigmoid(logits(i)) - targets(i);
        ++n;
    }
    return n == 0 ? g : Vec<Scalar>(g / Scalar(n));
}

/// Rows are ground truth, columns prediction.
struct ConfusionMatrix {
    Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic> counts;

    explicit ConfusionMatrix(int num_classes = 0)
        : counts(Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>::Zero(num_classes, num_classes))
    {
    }
    int num_classes() const noexcept { return static_cast<int>(counts.rows()); }
    std::int64_t total() const { return counts.sum(); }
    ConfusionMatrix& operator+=(const ConfusionMatrix& other);
};

/// Tallies every pixel whose ground truth is not `ignore_index`. Any class
/// index outside [0, C) on an evaluated pixel is an input error.
ConfusionMatrix confusion_matrix(const ClassMask& pred, const ClassMask& gt, int num_classes,
                                 std::uint8_t ignore_index = kIgnore);

struct SegmentationScores {
    double miou{0.0};
    double pixel_accuracy{0.0};
    /// IoU per class; empty optional for classes absent from both masks.
    std::vector<std::optional<double>> per_class_iou;
};

SegmentationScores miou_and_pixacc(const ConfusionMatrix& cm);

/// Macro-F1 over classes that have at least one true or predicted positive.
/// Returns 0 when no class qualifies.
double f1_multilabel(const std::vector<LabelSet>& predicted, const std::vector<LabelSet>& truth, int num_classes);

}  // namespace attnseg

#endif  // ATTNSEG_METRICS_HPP
