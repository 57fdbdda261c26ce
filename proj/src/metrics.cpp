#include "attnseg/metrics.hpp"

#include <algorithm>

namespace attnseg {

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other)
{
    if (other.num_classes() != num_classes()) throw ConfigError("confusion matrices differ in class count");
    counts += other.counts;
    return *this;
}

ConfusionMatrix confusion_matrix(const ClassMask& pred, const ClassMask& gt, int num_classes, std::uint8_t ignore_index)
{
    if (pred.rows() != gt.rows() || pred.cols() != gt.cols()) {
        throw InputError("confusion_matrix: prediction " + std::to_string(pred.rows()) + "x" +
                         std::to_string(pred.cols()) + " vs ground truth " + std::to_string(gt.rows()) + "x" +
                         std::to_string(gt.cols()));
    }
    ConfusionMatrix cm(num_classes);
    for (Eigen::Index i = 0; i < gt.size(); ++i) {
        const int g = gt.data()[i];
        if (g == ignore_index) continue;
        const int p = pred.data()[i];
        if (g >= num_classes || p >= num_classes) {
            throw InputError("confusion_matrix: class index " + std::to_string(std::max(g, p)) + " outside [0, " +
                             std::to_string(num_classes) + ")");
        }
        cm.counts(g, p) += 1;
    }
    return cm;
}

SegmentationScores miou_and_pixacc(const ConfusionMatrix& cm)
{
    const std::int64_t total = cm.total();
    if (total <= 0) throw InputError("miou_and_pixacc: confusion matrix is empty");
    SegmentationScores s;
    const int c = cm.num_classes();
    s.per_class_iou.resize(c);
    double sum = 0.0;
    int present = 0;
    for (int k = 0; k < c; ++k) {
        const std::int64_t tp = cm.counts(k, k);
        const std::int64_t uni = cm.counts.row(k).sum() + cm.counts.col(k).sum() - tp;
        if (uni == 0) continue;
        const double iou = static_cast<double>(tp) / static_cast<double>(uni);
        s.per_class_iou[k] = iou;
        sum += iou;
        ++present;
    }
    s.miou = present ? sum / present : 0.0;
    s.pixel_accuracy = static_cast<double>(cm.counts.trace()) / static_cast<double>(total);
    return s;
}

double f1_multilabel(const std::vector<LabelSet>& predicted, const std::vector<LabelSet>& truth, int num_classes)
{
    if (predicted.size() != truth.size()) throw InputError("f1_multilabel: prediction/truth count mismatch");
    double sum = 0.0;
    int counted = 0;
    for (int c = 0; c < num_classes; ++c) {
        long tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < truth.size(); ++i) {
            const bool p = predicted[i].contains(c);
            const bool t = truth[i].contains(c);
            tp += p && t;
            fp += p && !t;
            fn += !p && t;
        }
        if (tp + fp + fn == 0) continue;
        sum += 2.0 * tp / static_cast<double>(2 * tp + fp + fn);
        ++counted;
    }
    return counted ? sum / counted : 0.0;
}

}  // namespace attnseg
