#ifndef ATTNSEG_RUN_CONFIG_HPP
#define ATTNSEG_RUN_CONFIG_HPP

// Flat JSON run configuration. Every key is optional in a config file;
// unknown keys are rejected. Precedence is CLI flag > file > default.

#include "attnseg/head_gating.hpp"
#include "attnseg/model_config.hpp"
#include "attnseg/pseudomask.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>

namespace attnseg {

enum class OptimizerKind { adamw };

struct TrainConfig {
    int epochs{20};
    int batch_size{32};
    double learning_rate{3e-4};
    double gate_learning_rate{0.02};  // peak learning rate of log_alpha
    double weight_decay{0.01};
    double warmup_fraction{0.0};
    double mask_ratio{0.5};
    bool masked_in_loss{true};
    double decision_threshold{0.5};
    OptimizerKind optimizer{OptimizerKind::adamw};

    void validate() const;
};

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    HardConcreteOptions gates;
    PseudoMaskOptions pseudomask;
    std::string data;
    std::string val_data;
    std::string out;
    std::uint64_t seed{0};

    void validate() const;
};

nlohmann::json to_json(const RunConfig& cfg);

/// Overlays the keys of `j` onto `base`. Throws ConfigError on an unknown
/// key or a value of the wrong type.
RunConfig apply_json(RunConfig base, const nlohmann::json& j);

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {});

/// Writes `<dir>/config.resolved.json`.
void write_resolved_config(const RunConfig& cfg, const std::filesystem::path& dir);

}  // namespace attnseg

#endif  // ATTNSEG_RUN_CONFIG_HPP
