#ifndef ATTNSEG_CLS_MASKING_HPP
#define ATTNSEG_CLS_MASKING_HPP

#include "attnseg/core.hpp"

#include <set>
#include <vector>

namespace attnseg {

using LabelSet = std::set<int>;

/// m(i) over the class tokens: 1 = output embedding zeroed for this sample.
struct MaskVector {
    std::vector<std::uint8_t> m;

    static MaskVector none(int num_classes) { return MaskVector{std::vector<std::uint8_t>(num_classes, 0)}; }
    int size() const noexcept { return static_cast<int>(m.size()); }
    bool masked(int i) const { return m.at(i) != 0; }
    int count() const noexcept
    {
        int n = 0;
        for (auto v : m) n += v;
        return n;
    }
    friend bool operator==(const MaskVector&, const MaskVector&) = default;
};

/// Masks every non-label class independently with probability `ratio`.
/// Label classes are never masked.
MaskVector sample_mask(const LabelSet& labels, int num_classes, double ratio, Rng& rng);

/// Zeroes row i of the class-token embeddings wherever m(i) = 1.
template <typename Derived>
auto apply_output_mask(const Eigen::MatrixBase<Derived>& cls_embeddings, const MaskVector& mask)
{
    using Scalar = typename Derived::Scalar;
    if (cls_embeddings.rows() != mask.size()) {
        throw ConfigError("apply_output_mask: " + std::to_string(cls_embeddings.rows()) + " embeddings vs mask of " +
                          std::to_string(mask.size()));
    }
    Mat<Scalar> out = cls_embeddings;
    for (int i = 0; i < mask.size(); ++i) {
        if (mask.masked(i)) out.row(i).setZero();
    }
    return out;
}

}  // namespace attnseg

#endif  // ATTNSEG_CLS_MASKING_HPP
