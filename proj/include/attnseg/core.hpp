#ifndef ATTNSEG_CORE_HPP
#define ATTNSEG_CORE_HPP

#include <Eigen/Dense>

#include <atomic>
#include <cstdint>
#include <iostream>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace attnseg {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// H x W grid of class indices, row-major so that `data()` is PNG scanline order.
using ClassMask = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr std::uint8_t kUnassigned = 255;
inline constexpr std::uint8_t kIgnore = 255;

/// Interleaved HWC image with float samples.
struct Image {
    int height{0};
    int width{0};
    int channels{0};
    std::vector<float> data;

    Image() = default;
    Image(int h, int w, int c, float fill = 0.0f)
        : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill)
    {
    }

    float& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
    float at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }

    friend bool operator==(const Image&, const Image&) = default;
};

struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Rng = std::mt19937_64;

// splitmix64 finalizer; used to derive independent per-sample streams.
constexpr std::uint64_t mix_seed(std::uint64_t x) noexcept
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) noexcept
{
    return mix_seed(mix_seed(mix_seed(seed) ^ a) ^ (b * 0xd6e8feb86659fd93ULL));
}

/// Uniform double in the open interval (0, 1).
inline double uniform_open(Rng& rng) noexcept
{
    return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
}

/// Uniform double in [0, 1).
inline double uniform01(Rng& rng) noexcept
{
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

template <typename Scalar>
Scalar sigmoid(Scalar x) noexcept
{
    if (x >= Scalar(0)) {
        return Scalar(1) / (Scalar(1) + std::exp(-x));
    }
    const Scalar e = std::exp(x);
    return e / (Scalar(1) + e);
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m)
{
    return m.allFinite();
}

namespace detail {
inline std::atomic<long>& warning_counter()
{
    static std::atomic<long> counter{0};
    return counter;
}
inline std::atomic<bool>& warnings_muted()
{
    static std::atomic<bool> muted{false};
    return muted;
}
}  // namespace detail

/// Non-fatal diagnostics go to stderr and bump a process-wide counter.
inline void warn(std::string_view message)
{
    ++detail::warning_counter();
    if (!detail::warnings_muted()) {
        std::cerr << "warning: " << message << '\n';
    }
}

inline long warning_count() noexcept { return detail::warning_counter().load(); }
inline void mute_warnings(bool muted) noexcept { detail::warnings_muted() = muted; }

}  // namespace attnseg

#endif  // ATTNSEG_CORE_HPP
