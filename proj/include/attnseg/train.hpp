#ifndef ATTNSEG_TRAIN_HPP
#define ATTNSEG_TRAIN_HPP

#include "attnseg/data.hpp"
#include "attnseg/head_gating.hpp"
#include "attnseg/metrics.hpp"
#include "attnseg/objective.hpp"
#include "attnseg/pseudomask.hpp"
#include "attnseg/run_config.hpp"
#include "attnseg/vit.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <vector>

namespace attnseg {

/// Decoupled-weight-decay Adam over a flat parameter vector.
struct AdamW {
    double beta1{0.9};
    double beta2{0.999};
    double eps{1e-8};
    std::vector<float> m;
    std::vector<float> v;
    long t{0};

    /// One update; `decay` is the per-scalar weight-decay coefficient and
    /// `lr_scale` multiplies `lr` per scalar.
    void step(std::span<float> params, std::span<const float> grads, std::span<const float> decay,
              std::span<const float> lr_scale, double lr);
};

/// Cosine decay from `base` to 0 over `total` steps after a linear warmup.
double cosine_lr(double base, long step, long total, long warmup);

struct TrainState {
    ModelParams<float> model;
    GateParams<float> gates;
    AdamW optimizer;
    long step{0};
    int epoch{0};  // completed epochs
    DatasetManifest normalization;  // input statistics of the training set
    std::vector<nlohmann::json> history;

    static TrainState initialize(const RunConfig& cfg);

    /// Parameters then log_alpha, concatenated in a fixed order.
    std::vector<float> flat_params();
    void set_flat_params(std::span<const float> flat);
};

struct StepLosses {
    double loss{0};
    double cls_loss{0};
    double reg_loss{0};
};

/// Pre-normalized inputs for a dataset split.
struct PreparedSplit {
    const Dataset* dataset{nullptr};
    std::vector<Image> inputs;
};

PreparedSplit prepare_split(const Dataset& ds, const DatasetManifest& normalization);

/// One optimizer update on `batch` (indices into split). Throws NumericError
/// on a non-finite loss.
StepLosses train_step(const PreparedSplit& split, std::span<const std::size_t> batch, TrainState& state,
                      const RunConfig& cfg, long total_steps, ObjectiveWorkspace<float>& ws);

struct EvalResult {
    double f1{0.0};
    double miou{0.0};
    double pixel_accuracy{0.0};
    std::vector<std::optional<double>> per_class_iou;
    double mean_predicted_classes{0.0};
    int num_images{0};
};

/// Classification F1 and pseudo-mask mIoU in eval mode (no class-token
/// masking, deterministic gates).
EvalResult evaluate(const TrainState& state, const PreparedSplit& split, const RunConfig& cfg);

struct FitOptions {
    std::optional<TrainState> resume;
    /// Stop after this many completed epochs (for interrupted runs).
    std::optional<int> stop_after_epoch;
    bool verbose{false};
};

struct FitResult {
    TrainState state;
    EvalResult final_eval;
    double frac_heads_pruned{0.0};
    bool finished{false};
};

/// Epoch loop with seeded shuffling, per-epoch evaluation on `val`, head
/// pruning at the end. When `out` is non-empty writes metrics.jsonl,
/// config.resolved.json, last/ (resumable, every epoch) and checkpoint/
/// (final, pruned).
FitResult fit(const Dataset& train, const Dataset* val, const RunConfig& cfg, const std::filesystem::path& out,
              FitOptions options = {});

void save_checkpoint(const TrainState& state, const RunConfig& cfg, const std::filesystem::path& dir);

struct LoadedCheckpoint {
    RunConfig config;
    TrainState state;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

struct SweepRow {
    double ratio{0.0};
    double pixel_accuracy{0.0};
    double miou{0.0};
    double f1{0.0};
    double frac_heads_pruned{0.0};
    bool ok{false};
    std::string error;
};

inline const std::vector<double> kDefaultSweepRatios{0.0, 0.2, 0.5, 0.8, 1.0};

/// One training run per masking ratio (shared seed), writing sweep.csv and
/// sweep.png under `out`. A failing cell is recorded and the rest still run.
std::vector<SweepRow> sensitivity_sweep(const Dataset& train, const Dataset& val, const RunConfig& base,
                                        const std::vector<double>& ratios, const std::filesystem::path& out,
                                        bool verbose = false);

void write_sweep_csv(const std::vector<SweepRow>& rows, const std::filesystem::path& path);
void write_sweep_plot(const std::vector<SweepRow>& rows, const std::filesystem::path& path);

}  // namespace attnseg

#endif  // ATTNSEG_TRAIN_HPP
