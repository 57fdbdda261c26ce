#include "attnseg/cli.hpp"

#include "attnseg/data.hpp"
#include "attnseg/image_io.hpp"
#include "attnseg/train.hpp"

#include <CLI11.hpp>

#include <map>
#include <optional>
#include <nlohmann/json.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

namespace attnseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

bool non_empty_dir(const fs::path& p) { return fs::exists(p) && fs::is_directory(p) && !fs::is_empty(p); }

void prepare_out_dir(const fs::path& out, bool force)
{
    if (non_empty_dir(out)) {
        if (!force) throw UsageError("output directory " + out.string() + " is not empty (use --force)");
        fs::remove_all(out);
    }
    fs::create_directories(out);
}

// ---- generate-data ---------------------------------------------------------

struct GenerateArgs {
    std::string out;
    std::string config;
    std::optional<int> n, classes, image_size, min_shapes, max_shapes;
    std::optional<double> min_area, noise;
    std::optional<std::uint64_t> seed;
    bool force{false};
};

json synthetic_to_json(const SyntheticConfig& c)
{
    return json{{"num_samples", c.num_samples},         {"image_size", c.image_size},
                {"num_classes", c.num_classes},         {"min_shapes", c.min_shapes},
                {"max_shapes", c.max_shapes},           {"min_shape_area_fraction", c.min_shape_area_fraction},
                {"noise_std", c.noise_std},             {"seed", c.seed}};
}

SyntheticConfig synthetic_from_json(SyntheticConfig c, const json& j)
{
    for (const auto& [k, v] : j.items()) {
        try {
            if (k == "num_samples") c.num_samples = v.get<int>();
            else if (k == "image_size") c.image_size = v.get<int>();
            else if (k == "num_classes") c.num_classes = v.get<int>();
            else if (k == "min_shapes") c.min_shapes = v.get<int>();
            else if (k == "max_shapes") c.max_shapes = v.get<int>();
            else if (k == "min_shape_area_fraction") c.min_shape_area_fraction = v.get<double>();
            else if (k == "noise_std") c.noise_std = v.get<double>();
            else if (k == "seed") c.seed = v.get<std::uint64_t>();
            else throw ConfigError("unknown config key '" + k + "'");
        } catch (const json::exception&) {
            throw ConfigError("config key '" + k + "' has the wrong type");
        }
    }
    return c;
}

json read_json_file(const fs::path& p)
{
    std::ifstream in(p);
    if (!in) throw ConfigError("cannot open config file " + p.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError(p.string() + ": " + e.what());
    }
}

int cmd_generate_data(const GenerateArgs& a)
{
    SyntheticConfig cfg;
    if (!a.config.empty()) cfg = synthetic_from_json(cfg, read_json_file(a.config));
    if (a.n) cfg.num_samples = *a.n;
    if (a.classes) cfg.num_classes = *a.classes;
    if (a.image_size) cfg.image_size = *a.image_size;
    if (a.min_shapes) cfg.min_shapes = *a.min_shapes;
    if (a.max_shapes) cfg.max_shapes = *a.max_shapes;
    if (a.min_area) cfg.min_shape_area_fraction = *a.min_area;
    if (a.noise) cfg.noise_std = *a.noise;
    if (a.seed) cfg.seed = *a.seed;
    cfg.validate();

    const fs::path out = a.out;
    prepare_out_dir(out, a.force);
    const Dataset ds = generate_synthetic(cfg, out);
    std::ofstream(out / "config.resolved.json", std::ios::binary) << synthetic_to_json(cfg).dump(2) << '\n';

    std::vector<int> per_class(cfg.num_classes, 0);
    for (const auto& s : ds.samples) {
        for (int c : s.labels) ++per_class[c];
    }
    std::cout << "wrote " << ds.samples.size() << " samples to " << out.string() << "\n";
    for (int c = 0; c < cfg.num_classes; ++c) {
        std::cout << "  class " << c << " (" << kShapeNames[c] << "): " << per_class[c] << " images\n";
    }
    return kExitOk;
}

// ---- shared training flags ---------------------------------------------------

struct TrainArgs {
    std::string config, data, val_data, out, resume, init_from;
    std::optional<int> epochs, batch_size, layers, heads, embed_dim, patch_size;
    std::optional<double> lr, gate_lr, weight_decay, mask_ratio, lambda, decision_threshold, tau, warmup;
    std::optional<std::uint64_t> seed;
    bool no_reg{false};
    bool exclude_masked{false};
    bool verbose{false};
};

void add_train_flags(CLI::App* app, TrainArgs& a)
{
    app->add_option("--config", a.config, "JSON run configuration");
    app->add_option("--data", a.data, "training dataset directory");
    app->add_option("--val-data", a.val_data, "held-out dataset directory (default: last 10% of --data)");
    app->add_option("--out", a.out, "output directory")->required();
    app->add_option("--epochs", a.epochs);
    app->add_option("--batch-size", a.batch_size);
    app->add_option("--lr", a.lr, "peak learning rate");
    app->add_option("--gate-lr", a.gate_lr, "peak learning rate of the head-gate logits");
    app->add_option("--weight-decay", a.weight_decay);
    app->add_option("--warmup", a.warmup, "warmup fraction of total steps");
    app->add_option("--mask-ratio", a.mask_ratio, "class-token masking ratio");
    app->add_option("--lambda", a.lambda, "L0 penalty weight");
    app->add_option("--decision-threshold", a.decision_threshold,
                    "sigmoid probability above which a class counts as present");
    app->add_option("--tau", a.tau, "attention binarization threshold");
    app->add_option("--layers", a.layers);
    app->add_option("--heads", a.heads);
    app->add_option("--embed-dim", a.embed_dim);
    app->add_option("--patch-size", a.patch_size);
    app->add_option("--seed", a.seed);
    app->add_flag("--no-reg", a.no_reg, "drop the register token");
    app->add_flag("--exclude-masked-from-loss", a.exclude_masked, "leave masked classes out of the BCE loss");
    app->add_flag("--verbose", a.verbose, "print per-epoch metrics to stderr");
}

RunConfig resolve_train_config(const TrainArgs& a, const DatasetManifest& manifest)
{
    RunConfig cfg;
    cfg.model.num_classes = manifest.num_classes;
    cfg.model.image_size = manifest.image_size;
    if (!a.config.empty()) cfg = load_run_config(a.config, cfg);
    if (!a.data.empty()) cfg.data = a.data;
    if (!a.val_data.empty()) cfg.val_data = a.val_data;
    cfg.out = a.out;
    if (a.epochs) cfg.train.epochs = *a.epochs;
    if (a.batch_size) cfg.train.batch_size = *a.batch_size;
    if (a.lr) cfg.train.learning_rate = *a.lr;
    if (a.gate_lr) cfg.train.gate_learning_rate = *a.gate_lr;
    if (a.weight_decay) cfg.train.weight_decay = *a.weight_decay;
    if (a.warmup) cfg.train.warmup_fraction = *a.warmup;
    if (a.mask_ratio) cfg.train.mask_ratio = *a.mask_ratio;
    if (a.lambda) cfg.gates.lambda = *a.lambda;
    if (a.decision_threshold) cfg.train.decision_threshold = *a.decision_threshold;
    if (a.tau) cfg.pseudomask.tau = *a.tau;
    if (a.layers) cfg.model.num_layers = *a.layers;
    if (a.heads) cfg.model.num_heads = *a.heads;
    if (a.embed_dim) cfg.model.embed_dim = *a.embed_dim;
    if (a.patch_size) cfg.model.patch_size = *a.patch_size;
    if (a.seed) cfg.seed = *a.seed;
    if (a.no_reg) cfg.model.use_reg = false;
    if (a.exclude_masked) cfg.train.masked_in_loss = false;
    if (cfg.model.num_classes != manifest.num_classes || cfg.model.image_size != manifest.image_size) {
        throw ConfigError("config (" + std::to_string(cfg.model.num_classes) + " classes, " +
                          std::to_string(cfg.model.image_size) + " px) does not match dataset manifest (" +
                          std::to_string(manifest.num_classes) + " classes, " + std::to_string(manifest.image_size) +
                          " px)");
    }
    cfg.validate();
    return cfg;
}

struct LoadedData {
    Dataset train;
    std::optional<Dataset> val;
};

LoadedData load_train_data(const TrainArgs& a)
{
    std::string data = a.data;
    if (data.empty() && !a.config.empty()) data = load_run_config(a.config).data;
    if (data.empty()) throw UsageError("--data is required");
    if (!fs::is_directory(data)) throw UsageError("dataset directory " + data + " does not exist");
    LoadedData d{load_dataset(data, LoadMode::train), std::nullopt};
    std::string val = a.val_data;
    if (val.empty() && !a.config.empty()) val = load_run_config(a.config).val_data;
    if (!val.empty()) {
        if (!fs::is_directory(val)) throw UsageError("validation directory " + val + " does not exist");
        d.val = load_dataset(val, LoadMode::eval);
    }
    return d;
}

int cmd_train(const TrainArgs& a)
{
    LoadedData data = load_train_data(a);
    RunConfig cfg;
    FitOptions fo;
    fo.verbose = a.verbose;
    if (!a.resume.empty()) {
        auto ck = load_checkpoint(a.resume);
        cfg = ck.config;
        cfg.out = a.out;
        if (a.epochs) cfg.train.epochs = *a.epochs;
        fo.resume = std::move(ck.state);
    } else {
        cfg = resolve_train_config(a, data.train.manifest);
        if (!a.init_from.empty()) {
            auto ck = load_checkpoint(a.init_from);
            if (!(ck.config.model == cfg.model)) throw UsageError("--init-from checkpoint has a different model shape");
            TrainState s = TrainState::initialize(cfg);
            s.model = std::move(ck.state.model);
            s.gates.log_alpha = ck.state.gates.log_alpha;
            fo.resume = std::move(s);
        }
    }
    const auto res = fit(data.train, data.val ? &*data.val : nullptr, cfg, a.out, std::move(fo));
    std::cout << "finished " << res.state.epoch << " epochs: f1 " << res.final_eval.f1 << ", mIoU "
              << res.final_eval.miou << ", pixel accuracy " << res.final_eval.pixel_accuracy << ", heads pruned "
              << res.frac_heads_pruned << "\n";
    return kExitOk;
}

// ---- pseudo-mask -----------------------------------------------------------

struct PseudoMaskArgs {
    std::string ckpt, data, out, background_mode, upsampling;
    std::optional<double> tau, decision_threshold;
    std::optional<int> attn_layer;
};

int cmd_pseudo_mask(const PseudoMaskArgs& a)
{
    if (!fs::is_directory(a.ckpt)) throw UsageError("checkpoint directory " + a.ckpt + " does not exist");
    if (!fs::is_directory(a.data)) throw UsageError("dataset directory " + a.data + " does not exist");
    const auto ck = load_checkpoint(a.ckpt);
    const Dataset ds = load_dataset(a.data, LoadMode::train);
    if (ds.manifest.num_classes != ck.config.model.num_classes ||
        ds.manifest.image_size != ck.config.model.image_size) {
        throw UsageError("checkpoint (" + std::to_string(ck.config.model.num_classes) + " classes, " +
                         std::to_string(ck.config.model.image_size) + " px) does not match dataset (" +
                         std::to_string(ds.manifest.num_classes) + " classes, " +
                         std::to_string(ds.manifest.image_size) + " px)");
    }
    RunConfig cfg = ck.config;
    PseudoMaskOptions opt = cfg.pseudomask;
    opt.decision_threshold = cfg.train.decision_threshold;
    if (a.tau) opt.tau = *a.tau;
    if (a.decision_threshold) opt.decision_threshold = *a.decision_threshold;
    if (a.attn_layer) opt.attn_layer = *a.attn_layer;
    if (!a.background_mode.empty()) {
        cfg = apply_json(cfg, json{{"background_mode", a.background_mode}});
        opt.background_mode = cfg.pseudomask.background_mode;
    }
    if (!a.upsampling.empty()) {
        cfg = apply_json(cfg, json{{"upsampling", a.upsampling}});
        opt.upsampling = cfg.pseudomask.upsampling;
    }
    cfg.pseudomask = opt;
    cfg.train.decision_threshold = opt.decision_threshold;
    cfg.out = a.out;
    cfg.validate();

    const fs::path out = a.out;
    fs::create_directories(out);
    write_resolved_config(cfg, out);

    const auto gates = eval_gates(ck.state.gates);
    std::vector<std::size_t> npred(ds.samples.size(), 0);
    parallel_for(ds.samples.size(), [&](std::size_t i) {
        const auto& s = ds.samples[i];
        const Image input = normalize_image(s.image, ck.state.normalization);
        const auto fwd =
            encoder_forward(input, ck.state.model, gates.g, MaskVector::none(cfg.model.num_classes));
        const auto pm = pseudo_mask_from_output(fwd, gates.g, cfg.model, opt);
        npred[i] = pm.predicted.size();
        write_png_mask(out / (s.id + "_mask.png"), pm.mask);
    });
    double total = 0.0;
    for (auto v : npred) total += static_cast<double>(v);
    const json summary{{"num_images", ds.samples.size()},
                       {"mean_predicted_classes", ds.samples.empty() ? 0.0 : total / ds.samples.size()}};
    std::ofstream(out / "summary.json", std::ios::binary) << summary.dump(2) << '\n';
    std::cout << "wrote " << ds.samples.size() << " masks to " << out.string() << "\n";
    return kExitOk;
}

// ---- eval ------------------------------------------------------------------

struct EvalArgs {
    std::string pred, gt, out;
    std::optional<int> classes;
};

int cmd_eval(const EvalArgs& a)
{
    const fs::path gt_root = a.gt;
    const fs::path gt_masks = fs::is_directory(gt_root / "masks") ? gt_root / "masks" : gt_root;
    if (!fs::is_directory(gt_masks)) throw UsageError("ground-truth directory " + a.gt + " does not exist");
    if (!fs::is_directory(a.pred)) throw UsageError("prediction directory " + a.pred + " does not exist");

    std::map<std::string, fs::path> preds;
    for (const auto& e : fs::directory_iterator(a.pred)) {
        if (e.path().extension() != ".png") continue;
        std::string stem = e.path().stem().string();
        constexpr std::string_view suffix = "_mask";
        if (stem.size() > suffix.size() && stem.ends_with(suffix)) stem.resize(stem.size() - suffix.size());
        preds[stem] = e.path();
    }
    std::map<std::string, fs::path> gts;
    for (const auto& e : fs::directory_iterator(gt_masks)) {
        if (e.path().extension() == ".png") gts[e.path().stem().string()] = e.path();
    }

    std::vector<std::pair<ClassMask, ClassMask>> pairs;
    int max_class = -1;
    for (const auto& [id, gp] : gts) {
        const auto it = preds.find(id);
        if (it == preds.end()) continue;
        ClassMask g = read_png_mask(gp);
        ClassMask p = read_png_mask(it->second);
        for (Eigen::Index i = 0; i < g.size(); ++i) {
            if (g.data()[i] != kIgnore) max_class = std::max(max_class, static_cast<int>(g.data()[i]));
            if (p.data()[i] != kUnassigned) max_class = std::max(max_class, static_cast<int>(p.data()[i]));
        }
        pairs.emplace_back(std::move(p), std::move(g));
    }
    if (pairs.empty()) throw UsageError("no overlapping ids between " + a.pred + " and " + gt_masks.string());

    int num_classes = max_class + 1;
    if (a.classes) {
        num_classes = *a.classes;
    } else if (fs::exists(gt_root / "manifest.json")) {
        num_classes = read_manifest(gt_root).num_classes;
    }
    if (num_classes <= 0) throw UsageError("cannot determine the number of classes (use --classes)");

    ConfusionMatrix cm(num_classes);
    for (const auto& [p, g] : pairs) cm += confusion_matrix(p, g, num_classes);
    const auto scores = miou_and_pixacc(cm);
    json per_class = json::object();
    for (int c = 0; c < num_classes; ++c) {
        if (scores.per_class_iou[c]) per_class[std::to_string(c)] = *scores.per_class_iou[c];
    }
    const json result{{"miou", scores.miou},
                      {"pixel_accuracy", scores.pixel_accuracy},
                      {"per_class_iou", per_class},
                      {"num_images", pairs.size()}};
    if (!a.out.empty()) {
        fs::create_directories(a.out);
        const json resolved{{"pred", a.pred}, {"gt", a.gt}, {"out", a.out}, {"num_classes", num_classes}};
        std::ofstream(fs::path(a.out) / "config.resolved.json", std::ios::binary) << resolved.dump(2) << '\n';
        std::ofstream(fs::path(a.out) / "eval.json", std::ios::binary) << result.dump(2) << '\n';
    }
    std::cout << result.dump(2) << "\n";
    return kExitOk;
}

// ---- sweep -----------------------------------------------------------------

std::vector<double> parse_ratios(const std::string& s)
{
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            const double v = std::stod(item, &used);
            if (used != item.size() || !(v >= 0.0 && v <= 1.0)) throw std::invalid_argument(item);
            out.push_back(v);
        } catch (const std::exception&) {
            throw UsageError("invalid ratio '" + item + "' (expected values in [0, 1])");
        }
    }
    if (out.empty()) throw UsageError("--ratios is empty");
    return out;
}

int cmd_sweep(const TrainArgs& a, const std::string& ratios_arg)
{
    const std::vector<double> ratios = ratios_arg.empty() ? kDefaultSweepRatios : parse_ratios(ratios_arg);
    LoadedData data = load_train_data(a);
    RunConfig cfg = resolve_train_config(a, data.train.manifest);
    fs::create_directories(a.out);
    write_resolved_config(cfg, a.out);

    // The sweep needs a fixed held-out set shared by every cell.
    Dataset train = std::move(data.train);
    Dataset val;
    if (data.val) {
        val = std::move(*data.val);
    } else {
        const std::size_t n_val = std::max<std::size_t>(1, train.samples.size() / 10);
        if (train.samples.size() < 2) throw UsageError("dataset too small to hold out a validation split");
        val.manifest = train.manifest;
        val.samples.assign(train.samples.end() - static_cast<std::ptrdiff_t>(n_val), train.samples.end());
        train.samples.resize(train.samples.size() - n_val);
    }
    const auto rows = sensitivity_sweep(train, val, cfg, ratios, a.out, a.verbose);
    bool failed = false;
    for (const auto& r : rows) {
        failed |= !r.ok;
        std::cout << "ratio " << r.ratio << ": "
                  << (r.ok ? "pixacc " + std::to_string(r.pixel_accuracy) + ", mIoU " + std::to_string(r.miou)
                           : "failed: " + r.error)
                  << "\n";
    }
    return failed ? kExitNumeric : kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv)
{
    CLI::App app{"Weakly supervised segmentation from class-token attention maps"};
    app.require_subcommand(1);

    GenerateArgs gen;
    auto* g = app.add_subcommand("generate-data", "write a synthetic multi-label shapes dataset");
    g->add_option("--out", gen.out, "output dataset directory")->required();
    g->add_option("--config", gen.config, "JSON synthetic-data configuration");
    g->add_option("--n", gen.n, "number of samples");
    g->add_option("--classes", gen.classes, "number of shape classes");
    g->add_option("--image-size", gen.image_size);
    g->add_option("--min-shapes", gen.min_shapes);
    g->add_option("--max-shapes", gen.max_shapes);
    g->add_option("--min-area", gen.min_area, "minimum visible area per shape, fraction of the image");
    g->add_option("--noise", gen.noise, "pixel noise standard deviation");
    g->add_option("--seed", gen.seed);
    g->add_flag("--force", gen.force, "overwrite a non-empty output directory");

    TrainArgs tr;
    auto* t = app.add_subcommand("train", "train the multi-class-token ViT");
    add_train_flags(t, tr);
    t->add_option("--resume", tr.resume, "resume from a checkpoint directory (e.g. run/last)");
    t->add_option("--init-from", tr.init_from, "initialize weights from a checkpoint directory");

    PseudoMaskArgs pm;
    auto* p = app.add_subcommand("pseudo-mask", "write pseudo segmentation masks for a dataset");
    p->add_option("--ckpt", pm.ckpt, "checkpoint directory")->required();
    p->add_option("--data", pm.data, "dataset directory")->required();
    p->add_option("--out", pm.out, "output directory")->required();
    p->add_option("--tau", pm.tau, "attention binarization threshold");
    p->add_option("--decision-threshold", pm.decision_threshold,
                  "sigmoid probability above which a class counts as present");
    p->add_option("--attn-layer", pm.attn_layer, "encoder layer whose attention is used (negative counts from the end)");
    p->add_option("--background-mode", pm.background_mode, "fill | background_class");
    p->add_option("--upsampling", pm.upsampling, "nearest | bilinear");

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "score predicted masks against ground truth");
    e->add_option("--pred", ev.pred, "directory of <id>_mask.png predictions")->required();
    e->add_option("--gt", ev.gt, "dataset directory (or a directory of <id>.png masks)")->required();
    e->add_option("--out", ev.out, "output directory for eval.json");
    e->add_option("--classes", ev.classes, "number of classes");

    TrainArgs sw;
    std::string ratios;
    auto* s = app.add_subcommand("sweep", "masking-ratio sensitivity sweep");
    add_train_flags(s, sw);
    s->add_option("--ratios", ratios, "comma-separated masking ratios (default 0,0.2,0.5,0.8,1)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (g->parsed()) return cmd_generate_data(gen);
        if (t->parsed()) return cmd_train(tr);
        if (p->parsed()) return cmd_pseudo_mask(pm);
        if (e->parsed()) return cmd_eval(ev);
        if (s->parsed()) return cmd_sweep(sw, ratios);
    } catch (const NumericError& err) {
        std::cerr << "error: " << err.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}

int run_cli(const std::vector<std::string>& args)
{
    std::vector<const char*> argv{"attnseg"};
    for (const auto& a : args) argv.push_back(a.c_str());
    return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace attnseg
