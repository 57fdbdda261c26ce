#ifndef ATTNSEG_TEST_UTIL_HPP
#define ATTNSEG_TEST_UTIL_HPP

#include "attnseg/vit.hpp"

#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>

namespace attnseg::test {

inline Image random_image(int size, int channels, std::uint64_t seed)
{
    Image img(size, size, channels);
    Rng rng(seed);
    std::normal_distribution<float> n(0.0f, 1.0f);
    for (auto& v : img.data) v = n(rng);
    return img;
}

/// Initialized parameters with biases and layer-norm shifts randomized too,
/// so that no gradient path is trivially zero.
template <typename Scalar>
ModelParams<Scalar> random_model(const ModelConfig& cfg, std::uint64_t seed, double scale = 0.3)
{
    auto p = ModelParams<Scalar>::initialize(cfg, seed);
    Rng rng(seed ^ 0xabcdefULL);
    std::normal_distribution<double> n(0.0, scale);
    for (auto& t : p.tensors()) {
        const bool is_scale = t.name.find(".scale") != std::string::npos;
        for (auto& v : t.values) v = static_cast<Scalar>(is_scale ? 1.0 + n(rng) : n(rng));
    }
    return p;
}

inline ModelConfig tiny_config()
{
    ModelConfig c;
    c.image_size = 8;
    c.patch_size = 4;
    c.in_channels = 3;
    c.embed_dim = 8;
    c.num_layers = 1;
    c.num_heads = 2;
    c.num_classes = 2;
    c.use_reg = true;
    return c;
}

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& tag)
    {
        static std::atomic<int> counter{0};
        path = std::filesystem::temp_directory_path() /
               ("attnseg_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir()
    {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
};

inline std::string read_bytes(const std::filesystem::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Byte comparison of two directory trees.
inline bool same_tree(const std::filesystem::path& a, const std::filesystem::path& b)
{
    namespace fs = std::filesystem;
    std::vector<fs::path> fa, fb;
    for (const auto& e : fs::recursive_directory_iterator(a)) {
        if (e.is_regular_file()) fa.push_back(fs::relative(e.path(), a));
    }
    for (const auto& e : fs::recursive_directory_iterator(b)) {
        if (e.is_regular_file()) fb.push_back(fs::relative(e.path(), b));
    }
    std::sort(fa.begin(), fa.end());
    std::sort(fb.begin(), fb.end());
    if (fa != fb) return false;
    for (const auto& f : fa) {
        if (read_bytes(a / f) != read_bytes(b / f)) return false;
    }
    return true;
}

}  // namespace attnseg::test

#endif  // ATTNSEG_TEST_UTIL_HPP
