#include "attnseg/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <numeric>

namespace attnseg {

namespace fs = std::filesystem;
using nlohmann::json;

void AdamW::step(std::span<float> params, std::span<const float> grads, std::span<const float> decay,
                 std::span<const float> lr_scale, double lr)
{
    if (m.size() != params.size()) {
        m.assign(params.size(), 0.0f);
        v.assign(params.size(), 0.0f);
    }
    ++t;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    const float b1 = static_cast<float>(beta1);
    const float b2 = static_cast<float>(beta2);
    const float step_size = static_cast<float>(lr / c1);
    const float inv_c2 = static_cast<float>(1.0 / c2);
    const float e = static_cast<float>(eps);
    const float flr = static_cast<float>(lr);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const float g = grads[i];
        m[i] = b1 * m[i] + (1.0f - b1) * g;
        v[i] = b2 * v[i] + (1.0f - b2) * g * g;
        params[i] -= flr * lr_scale[i] * decay[i] * params[i];
        params[i] -= step_size * lr_scale[i] * m[i] / (std::sqrt(v[i] * inv_c2) + e);
    }
}

double cosine_lr(double base, long step, long total, long warmup)
{
    if (total <= 0) return base;
    if (step < warmup) return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
    const double span = static_cast<double>(std::max(1L, total - warmup));
    const double progress = std::clamp(static_cast<double>(step - warmup) / span, 0.0, 1.0);
    return base * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

TrainState TrainState::initialize(const RunConfig& cfg)
{
    cfg.validate();
    TrainState s;
    s.model = ModelParams<float>::initialize(cfg.model, cfg.seed);
    s.gates = GateParams<float>(cfg.model.num_layers, cfg.model.num_heads, cfg.gates);
    return s;
}

std::vector<float> TrainState::flat_params()
{
    std::vector<float> flat;
    for (const auto& t : model.tensors()) flat.insert(flat.end(), t.values.begin(), t.values.end());
    flat.insert(flat.end(), gates.log_alpha.data(), gates.log_alpha.data() + gates.log_alpha.size());
    return flat;
}

void TrainState::set_flat_params(std::span<const float> flat)
{
    std::size_t off = 0;
    for (auto& t : model.tensors()) {
        if (off + t.values.size() > flat.size()) throw InputError("parameter vector too short");
        std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), t.values.size(), t.values.begin());
        off += t.values.size();
    }
    const auto n = static_cast<std::size_t>(gates.log_alpha.size());
    if (off + n != flat.size()) throw InputError("parameter vector length does not match model");
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), n, gates.log_alpha.data());
}

PreparedSplit prepare_split(const Dataset& ds, const DatasetManifest& normalization)
{
    PreparedSplit split;
    split.dataset = &ds;
    split.inputs.resize(ds.samples.size());
    parallel_for(ds.samples.size(),
                 [&](std::size_t i) { split.inputs[i] = normalize_image(ds.samples[i].image, normalization); });
    return split;
}

namespace {

std::vector<float> decay_coefficients(TrainState& state, double weight_decay)
{
    std::vector<float> decay;
    for (const auto& t : state.model.tensors()) {
        decay.insert(decay.end(), t.values.size(), t.decay ? static_cast<float>(weight_decay) : 0.0f);
    }
    decay.insert(decay.end(), static_cast<std::size_t>(state.gates.log_alpha.size()), 0.0f);
    return decay;
}

std::vector<float> lr_scales(TrainState& state, const TrainConfig& train)
{
    std::vector<float> scale(state.flat_params().size(), 1.0f);
    const auto n_gates = static_cast<std::size_t>(state.gates.log_alpha.size());
    std::fill(scale.end() - static_cast<std::ptrdiff_t>(n_gates), scale.end(),
              static_cast<float>(train.gate_learning_rate / train.learning_rate));
    return scale;
}

double parameter_norm(TrainState& state)
{
    double sq = 0.0;
    for (float v : state.flat_params()) sq += static_cast<double>(v) * v;
    return std::sqrt(sq);
}

}  // namespace

StepLosses train_step(const PreparedSplit& split, std::span<const std::size_t> batch, TrainState& state,
                      const RunConfig& cfg, long total_steps, ObjectiveWorkspace<float>& ws)
{
    std::vector<BatchItem> items;
    items.reserve(batch.size());
    for (std::size_t idx : batch) {
        const auto& s = split.dataset->samples.at(idx);
        if (s.labels.empty()) throw InputError("sample " + s.id + " has no labels");
        items.push_back({&split.inputs[idx], &s.labels});
    }
    const ObjectiveOptions opt{cfg.train.mask_ratio, cfg.train.masked_in_loss};
    const std::uint64_t step_seed = derive_seed(cfg.seed, 0x57e9, static_cast<std::uint64_t>(state.step));
    auto r = evaluate_objective<float>(items, state.model, state.gates, opt, step_seed, ws);

    if (!std::isfinite(r.loss)) {
        throw NumericError("non-finite loss at step " + std::to_string(state.step) + " (epoch " +
                           std::to_string(state.epoch) + ", first sample " +
                           split.dataset->samples.at(batch.front()).id +
                           "); parameter norm = " + std::to_string(parameter_norm(state)));
    }

    std::vector<float> grads;
    for (const auto& t : r.grad.tensors()) grads.insert(grads.end(), t.values.begin(), t.values.end());
    grads.insert(grads.end(), r.grad_log_alpha.data(), r.grad_log_alpha.data() + r.grad_log_alpha.size());

    std::vector<float> params = state.flat_params();
    const std::vector<float> decay = decay_coefficients(state, cfg.train.weight_decay);
    const long warmup = static_cast<long>(cfg.train.warmup_fraction * static_cast<double>(total_steps));
    const std::vector<float> scale = lr_scales(state, cfg.train);
    state.optimizer.step(params, grads, decay, scale, cosine_lr(cfg.train.learning_rate, state.step, total_steps, warmup));
    state.set_flat_params(params);
    ++state.step;
    return {r.loss, r.cls_loss, r.reg_loss};
}

EvalResult evaluate(const TrainState& state, const PreparedSplit& split, const RunConfig& cfg)
{
    const auto& samples = split.dataset->samples;
    const std::size_t n = samples.size();
    EvalResult out;
    out.num_images = static_cast<int>(n);
    if (n == 0) return out;

    const int c = cfg.model.num_classes;
    PseudoMaskOptions pm = cfg.pseudomask;
    pm.decision_threshold = cfg.train.decision_threshold;
    const auto gates = eval_gates(state.gates);

    std::vector<LabelSet> predicted(n);
    std::vector<ConfusionMatrix> cms(n, ConfusionMatrix(c));
    std::vector<std::uint8_t> has_mask(n, 0);
    parallel_for(n, [&](std::size_t i) {
        const auto fwd = encoder_forward(split.inputs[i], state.model, gates.g, MaskVector::none(c));
        auto pmask = pseudo_mask_from_output(fwd, gates.g, cfg.model, pm);
        predicted[i] = pmask.predicted;
        if (samples[i].gt_mask) {
            cms[i] = confusion_matrix(pmask.mask, *samples[i].gt_mask, c);
            has_mask[i] = 1;
        }
    });

    std::vector<LabelSet> truth(n);
    ConfusionMatrix total(c);
    double predicted_count = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        truth[i] = samples[i].labels;
        predicted_count += static_cast<double>(predicted[i].size());
        if (has_mask[i]) total += cms[i];
    }
    out.f1 = f1_multilabel(predicted, truth, c);
    out.mean_predicted_classes = predicted_count / static_cast<double>(n);
    if (total.total() > 0) {
        const auto scores = miou_and_pixacc(total);
        out.miou = scores.miou;
        out.pixel_accuracy = scores.pixel_accuracy;
        out.per_class_iou = scores.per_class_iou;
    }
    return out;
}

namespace {

json checkpoint_manifest(const TrainState& state, const RunConfig& cfg)
{
    return json{{"config", to_json(cfg)},
                {"step", state.step},
                {"epoch", state.epoch},
                {"seed", cfg.seed},
                {"metrics", state.history},
                {"normalization", {{"mean", state.normalization.mean}, {"std", state.normalization.std}}},
                {"format", "attnseg-f32-v1"}};
}

constexpr char kMagic[8] = {'A', 'T', 'S', 'G', 'C', 'K', 'P', '1'};

void write_floats(std::ofstream& out, const std::vector<float>& v)
{
    const std::uint64_t n = v.size();
    out.write(reinterpret_cast<const char*>(&n), sizeof n);
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(n * sizeof(float)));
}

std::vector<float> read_floats(std::ifstream& in, const std::string& what)
{
    std::uint64_t n = 0;
    in.read(reinterpret_cast<char*>(&n), sizeof n);
    if (!in || n > (1ULL << 32)) throw InputError("checkpoint: corrupt " + what + " block");
    std::vector<float> v(n);
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(float)));
    if (!in) throw InputError("checkpoint: truncated " + what + " block");
    return v;
}

}  // namespace

void save_checkpoint(const TrainState& state_in, const RunConfig& cfg, const fs::path& dir)
{
    fs::create_directories(dir);
    TrainState state = state_in;
    std::ofstream bin(dir / "model.bin", std::ios::binary);
    if (!bin) throw InputError("cannot write checkpoint to " + dir.string());
    bin.write(kMagic, sizeof kMagic);
    write_floats(bin, state.flat_params());
    std::vector<float> keep(state.gates.keep.size());
    for (Eigen::Index i = 0; i < state.gates.keep.size(); ++i) keep[i] = state.gates.keep.data()[i];
    write_floats(bin, keep);
    write_floats(bin, state.optimizer.m);
    write_floats(bin, state.optimizer.v);
    const std::int64_t t = state.optimizer.t;
    bin.write(reinterpret_cast<const char*>(&t), sizeof t);
    std::ofstream(dir / "manifest.json", std::ios::binary) << checkpoint_manifest(state, cfg).dump(2) << '\n';
}

LoadedCheckpoint load_checkpoint(const fs::path& dir)
{
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw InputError("checkpoint manifest missing in " + dir.string());
    json manifest;
    try {
        manifest = json::parse(mf);
    } catch (const json::exception& e) {
        throw InputError("checkpoint manifest: " + std::string(e.what()));
    }
    LoadedCheckpoint out;
    out.config = apply_json(RunConfig{}, manifest.at("config"));
    out.state = TrainState::initialize(out.config);
    out.state.step = manifest.at("step").get<long>();
    out.state.epoch = manifest.at("epoch").get<int>();
    for (const auto& r : manifest.at("metrics")) out.state.history.push_back(r);
    if (manifest.contains("normalization")) {
        out.state.normalization.mean = manifest["normalization"].at("mean").get<std::array<double, 3>>();
        out.state.normalization.std = manifest["normalization"].at("std").get<std::array<double, 3>>();
    }
    out.state.normalization.num_classes = out.config.model.num_classes;
    out.state.normalization.image_size = out.config.model.image_size;

    std::ifstream bin(dir / "model.bin", std::ios::binary);
    if (!bin) throw InputError("checkpoint weights missing in " + dir.string());
    char magic[sizeof kMagic];
    bin.read(magic, sizeof magic);
    if (!bin || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw InputError("checkpoint: bad magic");
    out.state.set_flat_params(read_floats(bin, "parameter"));
    const auto keep = read_floats(bin, "keep");
    if (static_cast<Eigen::Index>(keep.size()) != out.state.gates.keep.size()) {
        throw InputError("checkpoint: keep mask does not match config");
    }
    for (std::size_t i = 0; i < keep.size(); ++i) out.state.gates.keep.data()[i] = keep[i] != 0.0f ? 1 : 0;
    out.state.optimizer.m = read_floats(bin, "adam m");
    out.state.optimizer.v = read_floats(bin, "adam v");
    std::int64_t t = 0;
    bin.read(reinterpret_cast<char*>(&t), sizeof t);
    if (!bin) throw InputError("checkpoint: truncated optimizer state");
    out.state.optimizer.t = t;
    return out;
}

namespace {

void write_metrics_log(const std::vector<json>& history, const fs::path& path)
{
    std::ofstream out(path, std::ios::binary);
    for (const auto& r : history) out << r.dump() << '\n';
}

}  // namespace

FitResult fit(const Dataset& train_in, const Dataset* val_in, const RunConfig& cfg, const fs::path& out,
              FitOptions options)
{
    cfg.validate();
    if (train_in.manifest.num_classes != cfg.model.num_classes || train_in.manifest.image_size != cfg.model.image_size) {
        throw ConfigError("dataset (" + std::to_string(train_in.manifest.num_classes) + " classes, " +
                          std::to_string(train_in.manifest.image_size) + " px) does not match model config");
    }

    // Without a validation set the last tenth of the sorted ids is held out.
    Dataset held_train;
    Dataset held_val;
    const Dataset* train = &train_in;
    const Dataset* val = val_in;
    if (!val) {
        const std::size_t n = train_in.samples.size();
        const std::size_t n_val = std::max<std::size_t>(n >= 2 ? 1 : 0, n / 10);
        held_train.manifest = held_val.manifest = train_in.manifest;
        held_train.samples.assign(train_in.samples.begin(), train_in.samples.end() - static_cast<std::ptrdiff_t>(n_val));
        held_val.samples.assign(train_in.samples.end() - static_cast<std::ptrdiff_t>(n_val), train_in.samples.end());
        train = &held_train;
        val = &held_val;
    }

    const PreparedSplit train_split = prepare_split(*train, train_in.manifest);
    const PreparedSplit val_split = prepare_split(*val, train_in.manifest);

    FitResult result;
    result.state = options.resume ? std::move(*options.resume) : TrainState::initialize(cfg);
    TrainState& state = result.state;
    state.normalization = train_in.manifest;

    const std::size_t n = train->samples.size();
    const std::size_t bs = static_cast<std::size_t>(cfg.train.batch_size);
    const long steps_per_epoch = static_cast<long>((n + bs - 1) / bs);
    const long total_steps = steps_per_epoch * cfg.train.epochs;

    if (!out.empty()) {
        write_resolved_config(cfg, out);
        if (state.epoch == 0) save_checkpoint(state, cfg, out / "last");
    }

    ObjectiveWorkspace<float> ws;
    std::vector<std::size_t> order(n);
    for (int epoch = state.epoch; epoch < cfg.train.epochs; ++epoch) {
        if (options.stop_after_epoch && epoch >= *options.stop_after_epoch) {
            if (!out.empty()) write_metrics_log(state.history, out / "metrics.jsonl");
            return result;
        }
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle_rng(derive_seed(cfg.seed, 0xe90c, static_cast<std::uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        double loss = 0.0, cls = 0.0, reg = 0.0;
        long steps = 0;
        for (std::size_t b = 0; b < n; b += bs) {
            const std::span<const std::size_t> batch(order.data() + b, std::min(bs, n - b));
            const auto l = train_step(train_split, batch, state, cfg, total_steps, ws);
            loss += l.loss;
            cls += l.cls_loss;
            reg += l.reg_loss;
            ++steps;
        }
        state.epoch = epoch + 1;
        const auto ev = evaluate(state, val_split, cfg);
        const double denom = std::max(1L, steps);
        json record{{"epoch", state.epoch},
                    {"loss", loss / denom},
                    {"cls_loss", cls / denom},
                    {"reg_loss", reg / denom},
                    {"f1", ev.f1},
                    {"miou", ev.miou},
                    {"pixel_accuracy", ev.pixel_accuracy},
                    {"frac_heads_pruned", pruned_fraction(state.gates, cfg.gates.prune_threshold)}};
        if (options.verbose) std::cerr << record.dump() << '\n';
        state.history.push_back(std::move(record));
        if (!out.empty()) {
            write_metrics_log(state.history, out / "metrics.jsonl");
            save_checkpoint(state, cfg, out / "last");
        }
    }

    result.frac_heads_pruned = pruned_fraction(state.gates, cfg.gates.prune_threshold);
    if (cfg.model.num_layers > 0) state.gates.keep = prune_heads(state.gates, cfg.gates.prune_threshold);
    result.final_eval = evaluate(state, val_split, cfg);
    result.finished = true;
    if (!out.empty()) {
        write_metrics_log(state.history, out / "metrics.jsonl");
        save_checkpoint(state, cfg, out / "checkpoint");
        const json final{{"f1", result.final_eval.f1},
                         {"miou", result.final_eval.miou},
                         {"pixel_accuracy", result.final_eval.pixel_accuracy},
                         {"frac_heads_pruned", result.frac_heads_pruned},
                         {"epochs", state.epoch}};
        std::ofstream(out / "final_metrics.json", std::ios::binary) << final.dump(2) << '\n';
    }
    return result;
}

}  // namespace attnseg
