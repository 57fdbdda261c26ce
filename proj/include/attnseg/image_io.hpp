#ifndef ATTNSEG_IMAGE_IO_HPP
#define ATTNSEG_IMAGE_IO_HPP

#include "attnseg/core.hpp"

#include <filesystem>

namespace attnseg {

/// 8-bit RGB PNG <-> Image with values k / 255.
Image read_png_rgb(const std::filesystem::path& path);
void write_png_rgb(const std::filesystem::path& path, const Image& image);

/// 8-bit single-channel PNG <-> class-index mask.
ClassMask read_png_mask(const std::filesystem::path& path);
void write_png_mask(const std::filesystem::path& path, const ClassMask& mask);

}  // namespace attnseg

#endif  // ATTNSEG_IMAGE_IO_HPP
