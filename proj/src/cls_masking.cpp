#include "attnseg/cls_masking.hpp"

namespace attnseg {

MaskVector sample_mask(const LabelSet& labels, int num_classes, double ratio, Rng& rng)
{
    if (!(ratio >= 0.0 && ratio <= 1.0)) {
        throw ConfigError("mask_ratio must lie in [0, 1], got " + std::to_string(ratio));
    }
    if (labels.empty()) {
        throw InputError("sample_mask: empty label set during training");
    }
    MaskVector out = MaskVector::none(num_classes);
    for (int label : labels) {
        if (label < 0 || label >= num_classes) {
            throw InputError("sample_mask: label " + std::to_string(label) + " outside [0, " +
                             std::to_string(num_classes) + ")");
        }
    }
    for (int i = 0; i < num_classes; ++i) {
        // one draw per class keeps the stream position independent of the labels
        const double u = uniform01(rng);
        if (!labels.contains(i) && u < ratio) out.m[i] = 1;
    }
    return out;
}

}  // namespace attnseg
