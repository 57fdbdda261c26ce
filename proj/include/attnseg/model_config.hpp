#ifndef ATTNSEG_MODEL_CONFIG_HPP
#define ATTNSEG_MODEL_CONFIG_HPP

#include "attnseg/core.hpp"

namespace attnseg {

enum class HeadMode { per_class_linear };

struct ModelConfig {
    int image_size{64};
    int patch_size{8};
    int in_channels{3};
    int embed_dim{64};
    int num_layers{4};
    int num_heads{4};
    int num_classes{3};
    bool use_reg{true};
    HeadMode head_mode{HeadMode::per_class_linear};

    int grid() const noexcept { return image_size / patch_size; }
    int num_patches() const noexcept { return grid() * grid(); }
    int patch_dim() const noexcept { return patch_size * patch_size * in_channels; }
    int head_dim() const noexcept { return embed_dim / num_heads; }
    int mlp_dim() const noexcept { return 4 * embed_dim; }
    /// C class tokens, N patch tokens, optional register token.
    int seq_len() const noexcept { return num_classes + num_patches() + (use_reg ? 1 : 0); }
    int first_patch() const noexcept { return num_classes; }
    int reg_index() const noexcept { return num_classes + num_patches(); }

    void validate() const
    {
        if (image_size <= 0 || patch_size <= 0 || in_channels <= 0 || embed_dim <= 0 ||
            num_heads <= 0 || num_classes <= 0 || num_layers < 0) {
            throw ConfigError("model config: sizes must be positive");
        }
        if (image_size % patch_size != 0) {
            throw ConfigError("model config: image_size " + std::to_string(image_size) +
                              " not divisible by patch_size " + std::to_string(patch_size));
        }
        if (embed_dim % num_heads != 0) {
            throw ConfigError("model config: embed_dim " + std::to_string(embed_dim) +
                              " not divisible by num_heads " + std::to_string(num_heads));
        }
        if (num_classes > 254) {
            throw ConfigError("model config: at most 254 classes fit an 8-bit mask");
        }
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

}  // namespace attnseg

#endif  // ATTNSEG_MODEL_CONFIG_HPP
