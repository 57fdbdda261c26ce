#include "attnseg/image_io.hpp"

#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <cmath>

namespace attnseg {

namespace {

void write_or_throw(const std::filesystem::path& path, const cv::Mat& m)
{
    if (!cv::imwrite(path.string(), m)) throw InputError("cannot write " + path.string());
}

}  // namespace

Image read_png_rgb(const std::filesystem::path& path)
{
    const cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) throw InputError("cannot read image " + path.string());
    if (bgr.depth() != CV_8U) throw InputError(path.string() + ": expected 8-bit image");
    Image img(bgr.rows, bgr.cols, 3);
    for (int y = 0; y < bgr.rows; ++y) {
        const auto* row = bgr.ptr<cv::Vec3b>(y);
        for (int x = 0; x < bgr.cols; ++x) {
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<float>(row[x][2 - c]) / 255.0f;
        }
    }
    return img;
}

void write_png_rgb(const std::filesystem::path& path, const Image& image)
{
    if (image.channels != 3) throw InputError("write_png_rgb: expected 3 channels");
    cv::Mat bgr(image.height, image.width, CV_8UC3);
    for (int y = 0; y < image.height; ++y) {
        auto* row = bgr.ptr<cv::Vec3b>(y);
        for (int x = 0; x < image.width; ++x) {
            for (int c = 0; c < 3; ++c) {
                const float v = std::clamp(image.at(y, x, c), 0.0f, 1.0f);
                row[x][2 - c] = static_cast<unsigned char>(std::lround(v * 255.0f));
            }
        }
    }
    write_or_throw(path, bgr);
}

ClassMask read_png_mask(const std::filesystem::path& path)
{
    const cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (m.empty()) throw InputError("cannot read mask " + path.string());
    if (m.type() != CV_8UC1) throw InputError(path.string() + ": mask must be 8-bit single channel");
    ClassMask out(m.rows, m.cols);
    for (int y = 0; y < m.rows; ++y) {
        const auto* row = m.ptr<std::uint8_t>(y);
        for (int x = 0; x < m.cols; ++x) out(y, x) = row[x];
    }
    return out;
}

void write_png_mask(const std::filesystem::path& path, const ClassMask& mask)
{
    cv::Mat m(static_cast<int>(mask.rows()), static_cast<int>(mask.cols()), CV_8UC1);
    for (int y = 0; y < m.rows; ++y) {
        auto* row = m.ptr<std::uint8_t>(y);
        for (int x = 0; x < m.cols; ++x) row[x] = mask(y, x);
    }
    write_or_throw(path, m);
}

}  // namespace attnseg
