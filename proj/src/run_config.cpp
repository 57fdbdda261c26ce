#include "attnseg/run_config.hpp"

#include <fstream>
#include <functional>
#include <map>

namespace attnseg {

using nlohmann::json;

void TrainConfig::validate() const
{
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (batch_size <= 0) throw ConfigError("batch_size must be > 0");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (!(gate_learning_rate >= 0.0)) throw ConfigError("gate_lr must be >= 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw ConfigError("warmup_fraction must lie in [0, 1)");
    if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0)) throw ConfigError("mask_ratio must lie in [0, 1]");
    if (!(decision_threshold > 0.0 && decision_threshold < 1.0)) {
        throw ConfigError("decision_threshold must lie in (0, 1)");
    }
}

void RunConfig::validate() const
{
    model.validate();
    train.validate();
    gates.validate();
    if (!(pseudomask.tau > 0.0 && pseudomask.tau < 1.0)) throw ConfigError("mask_tau must lie in (0, 1)");
    if (pseudomask.attn_layer >= model.num_layers || pseudomask.attn_layer < -model.num_layers) {
        throw ConfigError("attn_layer out of range for num_layers");
    }
}

namespace {

const char* background_name(BackgroundMode m) { return m == BackgroundMode::fill ? "fill" : "background_class"; }
const char* upsampling_name(Upsampling u) { return u == Upsampling::nearest ? "nearest" : "bilinear"; }

template <typename T>
void read_into(const json& v, T& dst, const std::string& key)
{
    try {
        dst = v.get<T>();
    } catch (const json::exception&) {
        throw ConfigError("config key '" + key + "' has the wrong type");
    }
}

using Setter = std::function<void(RunConfig&, const json&, const std::string&)>;

#define ATTNSEG_FIELD(key, expr)                                                                   \
    {                                                                                              \
        key, [](RunConfig& c, const json& v, const std::string& k) { read_into(v, c.expr, k); } \
    }

const std::map<std::string, Setter>& setters()
{
    static const std::map<std::string, Setter> table{
        ATTNSEG_FIELD("image_size", model.image_size),
        ATTNSEG_FIELD("patch_size", model.patch_size),
        ATTNSEG_FIELD("in_channels", model.in_channels),
        ATTNSEG_FIELD("embed_dim", model.embed_dim),
        ATTNSEG_FIELD("num_layers", model.num_layers),
        ATTNSEG_FIELD("num_heads", model.num_heads),
        ATTNSEG_FIELD("num_classes", model.num_classes),
        ATTNSEG_FIELD("use_reg", model.use_reg),
        ATTNSEG_FIELD("epochs", train.epochs),
        ATTNSEG_FIELD("batch_size", train.batch_size),
        ATTNSEG_FIELD("learning_rate", train.learning_rate),
        ATTNSEG_FIELD("gate_lr", train.gate_learning_rate),
        ATTNSEG_FIELD("weight_decay", train.weight_decay),
        ATTNSEG_FIELD("warmup_fraction", train.warmup_fraction),
        ATTNSEG_FIELD("mask_ratio", train.mask_ratio),
        ATTNSEG_FIELD("masked_in_loss", train.masked_in_loss),
        ATTNSEG_FIELD("decision_threshold", train.decision_threshold),
        ATTNSEG_FIELD("lambda_reg", gates.lambda),
        ATTNSEG_FIELD("gate_beta", gates.beta),
        ATTNSEG_FIELD("gate_gamma", gates.gamma),
        ATTNSEG_FIELD("gate_zeta", gates.zeta),
        ATTNSEG_FIELD("gate_init", gates.init_log_alpha),
        ATTNSEG_FIELD("prune_threshold", gates.prune_threshold),
        ATTNSEG_FIELD("mask_tau", pseudomask.tau),
        ATTNSEG_FIELD("attn_layer", pseudomask.attn_layer),
        ATTNSEG_FIELD("data", data),
        ATTNSEG_FIELD("val_data", val_data),
        ATTNSEG_FIELD("out", out),
        ATTNSEG_FIELD("seed", seed),
        {"head_mode",
         [](RunConfig&, const json& v, const std::string& k) {
             if (!v.is_string() || v.get<std::string>() != "per_class_linear") {
                 throw ConfigError("config key '" + k + "' must be \"per_class_linear\"");
             }
         }},
        {"optimizer",
         [](RunConfig&, const json& v, const std::string& k) {
             if (!v.is_string() || v.get<std::string>() != "adamw") {
                 throw ConfigError("config key '" + k + "' must be \"adamw\"");
             }
         }},
        {"background_mode",
         [](RunConfig& c, const json& v, const std::string& k) {
             const std::string s = v.is_string() ? v.get<std::string>() : "";
             if (s == "fill") c.pseudomask.background_mode = BackgroundMode::fill;
             else if (s == "background_class") c.pseudomask.background_mode = BackgroundMode::background_class;
             else throw ConfigError("config key '" + k + "' must be \"fill\" or \"background_class\"");
         }},
        {"upsampling",
         [](RunConfig& c, const json& v, const std::string& k) {
             const std::string s = v.is_string() ? v.get<std::string>() : "";
             if (s == "nearest") c.pseudomask.upsampling = Upsampling::nearest;
             else if (s == "bilinear") c.pseudomask.upsampling = Upsampling::bilinear;
             else throw ConfigError("config key '" + k + "' must be \"nearest\" or \"bilinear\"");
         }},
    };
    return table;
}

#undef ATTNSEG_FIELD

}  // namespace

json to_json(const RunConfig& c)
{
    return json{
        {"image_size", c.model.image_size},
        {"patch_size", c.model.patch_size},
        {"in_channels", c.model.in_channels},
        {"embed_dim", c.model.embed_dim},
        {"num_layers", c.model.num_layers},
        {"num_heads", c.model.num_heads},
        {"num_classes", c.model.num_classes},
        {"use_reg", c.model.use_reg},
        {"head_mode", "per_class_linear"},
        {"epochs", c.train.epochs},
        {"batch_size", c.train.batch_size},
        {"learning_rate", c.train.learning_rate},
        {"gate_lr", c.train.gate_learning_rate},
        {"weight_decay", c.train.weight_decay},
        {"warmup_fraction", c.train.warmup_fraction},
        {"mask_ratio", c.train.mask_ratio},
        {"masked_in_loss", c.train.masked_in_loss},
        {"decision_threshold", c.train.decision_threshold},
        {"optimizer", "adamw"},
        {"lambda_reg", c.gates.lambda},
        {"gate_beta", c.gates.beta},
        {"gate_gamma", c.gates.gamma},
        {"gate_zeta", c.gates.zeta},
        {"gate_init", c.gates.init_log_alpha},
        {"prune_threshold", c.gates.prune_threshold},
        {"mask_tau", c.pseudomask.tau},
        {"attn_layer", c.pseudomask.attn_layer},
        {"background_mode", background_name(c.pseudomask.background_mode)},
        {"upsampling", upsampling_name(c.pseudomask.upsampling)},
        {"data", c.data},
        {"val_data", c.val_data},
        {"out", c.out},
        {"seed", c.seed},
    };
}

RunConfig apply_json(RunConfig base, const json& j)
{
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    const auto& table = setters();
    for (const auto& [key, value] : j.items()) {
        const auto it = table.find(key);
        if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
        it->second(base, value, key);
    }
    return base;
}

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base)
{
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return apply_json(std::move(base), j);
}

void write_resolved_config(const RunConfig& cfg, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "config.resolved.json", std::ios::binary) << to_json(cfg).dump(2) << '\n';
}

}  // namespace attnseg
