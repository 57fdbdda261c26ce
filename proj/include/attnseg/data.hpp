#ifndef ATTNSEG_DATA_HPP
#define ATTNSEG_DATA_HPP

// Synthetic multi-label shapes benchmark and the on-disk dataset format:
//
//   <root>/images/<id>.png   8-bit RGB
//   <root>/masks/<id>.png    8-bit class index, 255 = ignore
//   <root>/labels.jsonl      {"id": str, "labels": [int]} per line
//   <root>/manifest.json     {num_classes, image_size, mean, std, seed, ...}

#include "attnseg/cls_masking.hpp"
#include "attnseg/core.hpp"

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace attnseg {

enum class ShapeKind { disk, square, triangle, diamond, cross, ring };

inline constexpr std::array<std::string_view, 6> kShapeNames{"disk", "square", "triangle", "diamond", "cross", "ring"};
inline constexpr int kNumShapeKinds = static_cast<int>(kShapeNames.size());

struct Sample {
    std::string id;
    Image image;  // values in [0, 1], multiples of 1/255
    LabelSet labels;
    std::optional<ClassMask> gt_mask;
};

struct SyntheticConfig {
    int num_samples{2000};
    int image_size{64};
    int num_classes{3};
    int min_shapes{1};
    int max_shapes{3};
    double min_shape_area_fraction{0.03};
    double noise_std{0.05};
    std::uint64_t seed{0};

    void validate() const;
};

struct DatasetManifest {
    int num_classes{0};
    int image_size{0};
    std::array<double, 3> mean{0.0, 0.0, 0.0};
    std::array<double, 3> std{1.0, 1.0, 1.0};
    std::uint64_t seed{0};
    std::vector<std::string> class_names;
};

struct Dataset {
    DatasetManifest manifest;
    std::vector<Sample> samples;
};

/// Renders one sample; identical (config.seed, index) always gives identical output.
Sample render_synthetic_sample(const SyntheticConfig& config, int index);

/// Renders all samples in memory (ids are zero-padded indices) and computes
/// the per-channel statistics for the manifest.
Dataset make_synthetic(const SyntheticConfig& config);

/// make_synthetic followed by write_dataset.
Dataset generate_synthetic(const SyntheticConfig& config, const std::filesystem::path& out);

void write_dataset(const Dataset& dataset, const std::filesystem::path& out);

/// Classes covering at least `coverage_threshold` of the non-ignore pixels;
/// falls back to the most frequent class when none qualifies.
LabelSet derive_image_labels(const ClassMask& gt_mask, double coverage_threshold = 0.10);

enum class LoadMode { train, eval };

/// Loads samples in sorted-id order. Eval mode requires every mask.
Dataset load_dataset(const std::filesystem::path& root, LoadMode mode = LoadMode::eval);

DatasetManifest read_manifest(const std::filesystem::path& root);

/// (x - mean_c) / std_c per channel.
Image normalize_image(const Image& image, const DatasetManifest& manifest);

/// Boolean raster of a shape centred at (cy, cx) with half-extent `extent`.
bool shape_contains(ShapeKind kind, double dy, double dx, double extent);

}  // namespace attnseg

#endif  // ATTNSEG_DATA_HPP
