#include "attnseg/data.hpp"

#include "attnseg/image_io.hpp"
#include "attnseg/parallel.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <regex>
#include <sstream>

namespace attnseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Fully saturated base colours, one per shape kind.
constexpr std::array<std::array<float, 3>, kNumShapeKinds> kPalette{{
    {0.95f, 0.15f, 0.15f},
    {0.15f, 0.85f, 0.20f},
    {0.20f, 0.35f, 0.95f},
    {0.95f, 0.85f, 0.10f},
    {0.85f, 0.20f, 0.90f},
    {0.10f, 0.85f, 0.90f},
}};

constexpr int kMaxAttempts = 100;

std::string sample_id(int index)
{
    std::ostringstream os;
    os << std::setw(6) << std::setfill('0') << index;
    return os.str();
}

float quantize(double v) { return static_cast<float>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)) / 255.0f; }

}  // namespace

void SyntheticConfig::validate() const
{
    if (num_samples < 0) throw ConfigError("num_samples must be >= 0");
    if (image_size < 8) throw ConfigError("image_size must be >= 8");
    if (num_classes < 1 || num_classes > kNumShapeKinds) {
        throw ConfigError("num_classes must lie in [1, " + std::to_string(kNumShapeKinds) + "] (available shape kinds)");
    }
    if (min_shapes < 1 || max_shapes < min_shapes) throw ConfigError("shapes_per_image range is invalid");
    if (!(min_shape_area_fraction > 0.0 && min_shape_area_fraction < 0.25)) {
        throw ConfigError("min_shape_area_fraction must lie in (0, 0.25)");
    }
    if (!(noise_std >= 0.0)) throw ConfigError("noise_std must be >= 0");
}

bool shape_contains(ShapeKind kind, double dy, double dx, double extent)
{
    const double ay = std::abs(dy);
    const double ax = std::abs(dx);
    switch (kind) {
    case ShapeKind::disk:
        return dy * dy + dx * dx <= extent * extent;
    case ShapeKind::square:
        return ay <= extent && ax <= extent;
    case ShapeKind::triangle:
        // apex at the top, base at the bottom of the bounding box
        return dy >= -extent && dy <= extent && ax <= 0.5 * (dy + extent);
    case ShapeKind::diamond:
        return ay + ax <= extent;
    case ShapeKind::cross: {
        const double arm = extent / 3.0;
        return (ax <= arm && ay <= extent) || (ay <= arm && ax <= extent);
    }
    case ShapeKind::ring: {
        const double r2 = dy * dy + dx * dx;
        return r2 <= extent * extent && r2 >= 0.25 * extent * extent;
    }
    }
    return false;
}

Sample render_synthetic_sample(const SyntheticConfig& config, int index)
{
    const int n = config.image_size;
    const double min_pixels = config.min_shape_area_fraction * n * n;
    Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(index)));
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
        const int max_k = std::min(config.max_shapes, config.num_classes);
        const int min_k = std::min(config.min_shapes, max_k);
        const int k = std::uniform_int_distribution<int>(min_k, max_k)(rng);
        std::vector<int> classes(config.num_classes);
        std::iota(classes.begin(), classes.end(), 0);
        std::shuffle(classes.begin(), classes.end(), rng);
        classes.resize(k);

        ClassMask mask = ClassMask::Constant(n, n, kIgnore);
        std::array<float, 3> background{};
        for (auto& c : background) c = static_cast<float>(0.05 + 0.30 * unit(rng));
        Image img(n, n, 3);
        for (int y = 0; y < n; ++y) {
            for (int x = 0; x < n; ++x) {
                for (int c = 0; c < 3; ++c) img.at(y, x, c) = background[c];
            }
        }

        for (int cls : classes) {
            const auto kind = static_cast<ShapeKind>(cls);
            const double extent = n * (0.12 + 0.16 * unit(rng));
            const double cy = extent + unit(rng) * (n - 1 - 2 * extent);
            const double cx = extent + unit(rng) * (n - 1 - 2 * extent);
            const float shade = static_cast<float>(0.75 + 0.25 * unit(rng));
            for (int y = 0; y < n; ++y) {
                for (int x = 0; x < n; ++x) {
                    if (!shape_contains(kind, y - cy, x - cx, extent)) continue;
                    mask(y, x) = static_cast<std::uint8_t>(cls);
                    for (int c = 0; c < 3; ++c) img.at(y, x, c) = kPalette[cls][c] * shade;
                }
            }
        }

        // every placed shape must stay visible after occlusion
        bool ok = true;
        for (int cls : classes) {
            if (static_cast<double>((mask == static_cast<std::uint8_t>(cls)).count()) < min_pixels) ok = false;
        }
        if (!ok) continue;

        std::normal_distribution<double> noise(0.0, config.noise_std);
        for (auto& v : img.data) v = quantize(v + (config.noise_std > 0.0 ? noise(rng) : 0.0));

        Sample s;
        s.id = sample_id(index);
        s.image = std::move(img);
        s.labels = LabelSet(classes.begin(), classes.end());
        s.gt_mask = std::move(mask);
        return s;
    }
    throw InputError("synthetic sample " + std::to_string(index) + ": shapes do not fit the minimum area after " +
                     std::to_string(kMaxAttempts) + " attempts");
}

Dataset make_synthetic(const SyntheticConfig& config)
{
    config.validate();
    Dataset ds;
    ds.samples.resize(config.num_samples);
    parallel_for(ds.samples.size(),
                 [&](std::size_t i) { ds.samples[i] = render_synthetic_sample(config, static_cast<int>(i)); });

    auto& m = ds.manifest;
    m.num_classes = config.num_classes;
    m.image_size = config.image_size;
    m.seed = config.seed;
    for (int c = 0; c < config.num_classes; ++c) m.class_names.emplace_back(kShapeNames[c]);
    std::array<double, 3> sum{}, sq{};
    double count = 0.0;
    for (const auto& s : ds.samples) {
        for (std::size_t i = 0; i < s.image.data.size(); i += 3) {
            for (int c = 0; c < 3; ++c) {
                const double v = s.image.data[i + c];
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        count += static_cast<double>(s.image.data.size() / 3);
    }
    for (int c = 0; c < 3; ++c) {
        if (count == 0.0) break;
        m.mean[c] = sum[c] / count;
        m.std[c] = std::max(1e-6, std::sqrt(std::max(0.0, sq[c] / count - m.mean[c] * m.mean[c])));
    }
    return ds;
}

void write_dataset(const Dataset& dataset, const fs::path& out)
{
    fs::create_directories(out / "images");
    fs::create_directories(out / "masks");
    std::ofstream labels(out / "labels.jsonl", std::ios::binary);
    if (!labels) throw InputError("cannot write " + (out / "labels.jsonl").string());
    for (const auto& s : dataset.samples) {
        write_png_rgb(out / "images" / (s.id + ".png"), s.image);
        if (s.gt_mask) write_png_mask(out / "masks" / (s.id + ".png"), *s.gt_mask);
        labels << json{{"id", s.id}, {"labels", std::vector<int>(s.labels.begin(), s.labels.end())}}.dump() << '\n';
    }
    const auto& m = dataset.manifest;
    const json manifest{{"num_classes", m.num_classes}, {"image_size", m.image_size}, {"mean", m.mean},
                        {"std", m.std},                 {"seed", m.seed},             {"class_names", m.class_names}};
    std::ofstream(out / "manifest.json", std::ios::binary) << manifest.dump(2) << '\n';
}

Dataset generate_synthetic(const SyntheticConfig& config, const fs::path& out)
{
    Dataset ds = make_synthetic(config);
    write_dataset(ds, out);
    return ds;
}

LabelSet derive_image_labels(const ClassMask& gt_mask, double coverage_threshold)
{
    if (!(coverage_threshold >= 0.0 && coverage_threshold <= 1.0)) {
        throw ConfigError("coverage threshold must lie in [0, 1]");
    }
    std::array<long, 256> counts{};
    long valid = 0;
    for (Eigen::Index i = 0; i < gt_mask.size(); ++i) {
        const auto v = gt_mask.data()[i];
        if (v == kIgnore) continue;
        ++counts[v];
        ++valid;
    }
    if (valid == 0) throw InputError("derive_image_labels: mask has no labelled pixel");
    LabelSet out;
    for (int c = 0; c < 255; ++c) {
        if (counts[c] > 0 && static_cast<double>(counts[c]) >= coverage_threshold * static_cast<double>(valid)) {
            out.insert(c);
        }
    }
    if (out.empty()) {
        out.insert(static_cast<int>(std::max_element(counts.begin(), counts.begin() + 255) - counts.begin()));
    }
    return out;
}

DatasetManifest read_manifest(const fs::path& root)
{
    std::ifstream in(root / "manifest.json");
    if (!in) throw InputError("missing manifest.json in " + root.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw InputError("manifest.json: " + std::string(e.what()));
    }
    DatasetManifest m;
    try {
        m.num_classes = j.at("num_classes").get<int>();
        m.image_size = j.at("image_size").get<int>();
        m.mean = j.at("mean").get<std::array<double, 3>>();
        m.std = j.at("std").get<std::array<double, 3>>();
        m.seed = j.value("seed", std::uint64_t{0});
        m.class_names = j.value("class_names", std::vector<std::string>{});
    } catch (const json::exception& e) {
        throw InputError("manifest.json: " + std::string(e.what()));
    }
    return m;
}

Dataset load_dataset(const fs::path& root, LoadMode mode)
{
    Dataset ds;
    ds.manifest = read_manifest(root);
    std::ifstream in(root / "labels.jsonl");
    if (!in) throw InputError("missing labels.jsonl in " + root.string());

    std::map<std::string, LabelSet> labels;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::string id = "<line " + std::to_string(line_no) + ">";
        static const std::regex id_pattern(R"re("id"\s*:\s*"([^"]*)")re");
        if (std::smatch match; std::regex_search(line, match, id_pattern)) id = match[1].str();
        try {
            const json j = json::parse(line);
            if (j.contains("id") && j["id"].is_string()) id = j["id"].get<std::string>();
            const auto values = j.at("labels").get<std::vector<int>>();
            LabelSet set;
            for (int v : values) {
                if (v < 0 || v >= ds.manifest.num_classes) throw InputError("label out of range");
                set.insert(v);
            }
            if (!j.at("id").is_string()) throw InputError("id must be a string");
            labels[id] = std::move(set);
        } catch (const std::exception& e) {
            throw InputError("labels.jsonl: corrupt record for id " + id + ": " + e.what());
        }
    }

    ds.samples.resize(labels.size());
    std::vector<std::pair<std::string, LabelSet>> entries(labels.begin(), labels.end());
    parallel_for(entries.size(), [&](std::size_t i) {
        Sample& s = ds.samples[i];
        s.id = entries[i].first;
        s.labels = entries[i].second;
        s.image = read_png_rgb(root / "images" / (s.id + ".png"));
        if (s.image.height != ds.manifest.image_size || s.image.width != ds.manifest.image_size) {
            throw InputError("image " + s.id + " does not match manifest image_size");
        }
        const fs::path mask_path = root / "masks" / (s.id + ".png");
        if (fs::exists(mask_path)) {
            s.gt_mask = read_png_mask(mask_path);
        } else if (mode == LoadMode::eval) {
            throw InputError("missing mask for id " + s.id + " (required in eval mode)");
        }
    });
    return ds;
}

Image normalize_image(const Image& image, const DatasetManifest& manifest)
{
    Image out = image;
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        const auto c = i % static_cast<std::size_t>(image.channels);
        out.data[i] = static_cast<float>((out.data[i] - manifest.mean[c % 3]) / manifest.std[c % 3]);
    }
    return out;
}

}  // namespace attnseg
