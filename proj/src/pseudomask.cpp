#include "attnseg/pseudomask.hpp"

#include <algorithm>
#include <array>
#include <numeric>

namespace attnseg {

GridMap normalize_map(const GridMap& map)
{
    if (!map.allFinite()) throw NumericError("normalize_map: non-finite attention values");
    if (map.size() == 0) return map;
    const double lo = map.minCoeff();
    const double hi = map.maxCoeff();
    if (!(hi > lo)) return GridMap::Zero(map.rows(), map.cols());
    return (map.array() - lo) / (hi - lo);
}

BinaryMap binarize_map(const GridMap& map, double tau)
{
    const GridMap norm = normalize_map(map);
    BinaryMap out(map.rows(), map.cols());
    const bool constant = map.size() == 0 || !(map.maxCoeff() > map.minCoeff());
    for (Eigen::Index r = 0; r < map.rows(); ++r) {
        for (Eigen::Index c = 0; c < map.cols(); ++c) {
            out(r, c) = !constant && norm(r, c) >= tau ? 1 : 0;
        }
    }
    return out;
}

BinaryMap upsample_nearest(const BinaryMap& map, int size)
{
    BinaryMap out(size, size);
    for (int y = 0; y < size; ++y) {
        const auto sy = static_cast<Eigen::Index>(static_cast<long>(y) * map.rows() / size);
        for (int x = 0; x < size; ++x) {
            out(y, x) = map(sy, static_cast<Eigen::Index>(static_cast<long>(x) * map.cols() / size));
        }
    }
    return out;
}

namespace {

// Half-pixel-centred bilinear resampling of a normalized map, thresholded per pixel.
BinaryMap upsample_bilinear_threshold(const GridMap& map, int size, double tau)
{
    const GridMap norm = normalize_map(map);
    BinaryMap out = BinaryMap::Zero(size, size);
    if (map.size() == 0 || !(map.maxCoeff() > map.minCoeff())) return out;
    auto coord = [size](int p, Eigen::Index n) {
        const double s = (p + 0.5) * static_cast<double>(n) / size - 0.5;
        return std::clamp(s, 0.0, static_cast<double>(n - 1));
    };
    for (int y = 0; y < size; ++y) {
        const double sy = coord(y, map.rows());
        const auto y0 = static_cast<Eigen::Index>(sy);
        const auto y1 = std::min<Eigen::Index>(y0 + 1, map.rows() - 1);
        const double fy = sy - y0;
        for (int x = 0; x < size; ++x) {
            const double sx = coord(x, map.cols());
            const auto x0 = static_cast<Eigen::Index>(sx);
            const auto x1 = std::min<Eigen::Index>(x0 + 1, map.cols() - 1);
            const double fx = sx - x0;
            const double v = (1 - fy) * ((1 - fx) * norm(y0, x0) + fx * norm(y0, x1)) +
                             fy * ((1 - fx) * norm(y1, x0) + fx * norm(y1, x1));
            out(y, x) = v >= tau ? 1 : 0;
        }
    }
    return out;
}

}  // namespace

ClassMask merge_maps(const std::vector<BinaryClassMap>& maps, int image_size)
{
    if (maps.empty()) throw InputError("merge_maps: no maps to merge");
    std::vector<std::size_t> order(maps.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&maps](std::size_t a, std::size_t b) {
        if (maps[a].probability != maps[b].probability) return maps[a].probability < maps[b].probability;
        return maps[a].class_index > maps[b].class_index;
    });

    ClassMask out = ClassMask::Constant(image_size, image_size, kUnassigned);
    for (std::size_t idx : order) {
        const auto& m = maps[idx];
        const BinaryMap up = m.map.rows() == image_size && m.map.cols() == image_size
                                 ? m.map
                                 : upsample_nearest(m.map, image_size);
        out = (up != 0).select(ClassMask::Constant(image_size, image_size, static_cast<std::uint8_t>(m.class_index)), out);
    }
    return out;
}

ClassMask fill_unassigned(const ClassMask& mask)
{
    if ((mask != kUnassigned).count() == 0) {
        if (mask.size() > 0) warn("fill_unassigned: mask has no assigned pixel; returned unchanged");
        return mask;
    }
    ClassMask cur = mask;
    const auto rows = cur.rows();
    const auto cols = cur.cols();
    std::array<int, 256> votes{};
    while ((cur == kUnassigned).any()) {
        ClassMask next = cur;
        for (Eigen::Index y = 0; y < rows; ++y) {
            for (Eigen::Index x = 0; x < cols; ++x) {
                if (cur(y, x) != kUnassigned) continue;
                votes.fill(0);
                bool any = false;
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        if (dy == 0 && dx == 0) continue;
                        const auto ny = y + dy;
                        const auto nx = x + dx;
                        if (ny < 0 || nx < 0 || ny >= rows || nx >= cols) continue;
                        const auto v = cur(ny, nx);
                        if (v == kUnassigned) continue;
                        ++votes[v];
                        any = true;
                    }
                }
                if (!any) continue;
                // max_element returns the first maximum, i.e. the lowest class
                next(y, x) = static_cast<std::uint8_t>(std::max_element(votes.begin(), votes.end()) - votes.begin());
            }
        }
        cur = std::move(next);
    }
    return cur;
}

PseudoMaskResult pseudo_mask_from_attention(const AttentionMapStack& stack, const ModelConfig& cfg,
                                            const PseudoMaskOptions& opt)
{
    if (!(opt.tau > 0.0 && opt.tau < 1.0)) throw ConfigError("mask_tau must lie in (0, 1)");
    std::vector<BinaryClassMap> binary;
    binary.reserve(stack.maps.size());
    for (const auto& m : stack.maps) {
        BinaryMap b = opt.upsampling == Upsampling::nearest ? binarize_map(m.map, opt.tau)
                                                             : upsample_bilinear_threshold(m.map, cfg.image_size, opt.tau);
        binary.push_back({m.class_index, m.probability, std::move(b)});
    }
    ClassMask merged = merge_maps(binary, cfg.image_size);
    if (opt.background_mode == BackgroundMode::background_class) {
        merged = (merged == kUnassigned).select(ClassMask::Zero(merged.rows(), merged.cols()), merged);
    }
    if ((merged == kUnassigned).all() && !stack.maps.empty()) {
        // every map was constant: fall back to the most confident class
        const auto best = std::max_element(stack.maps.begin(), stack.maps.end(), [](const auto& a, const auto& b) {
            return a.probability < b.probability || (a.probability == b.probability && a.class_index > b.class_index);
        });
        merged.setConstant(static_cast<std::uint8_t>(best->class_index));
    }
    PseudoMaskResult result;
    result.mask = fill_unassigned(merged);
    for (const auto& m : stack.maps) result.predicted.insert(m.class_index);
    return result;
}

}  // namespace attnseg
