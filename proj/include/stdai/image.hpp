#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace stdai {

// Interleaved RGB, row-major, 3 bytes per pixel.
struct ImageU8 {
    int w = 0, h = 0;
    std::vector<std::uint8_t> data;

    static ImageU8 create(int w, int h);
    std::uint8_t* px(int x, int y) { return data.data() + 3 * (static_cast<std::size_t>(y) * w + x); }
    const std::uint8_t* px(int x, int y) const {
        return data.data() + 3 * (static_cast<std::size_t>(y) * w + x);
    }
};

// Single-channel float image, row-major.
struct ImageF {
    int w = 0, h = 0;
    std::vector<float> data;

    static ImageF create(int w, int h, float fill = 0.0f);
    float& at(int x, int y) { return data[static_cast<std::size_t>(y) * w + x]; }
    float at(int x, int y) const { return data[static_cast<std::size_t>(y) * w + x]; }
};

ImageF to_gray(const ImageU8& img);
ImageF gaussian_blur(const ImageF& img, double sigma);
ImageF downsample2(const ImageF& img);

// Clamp-to-edge bilinear lookup; (x, y) in pixel coordinates.
float bilinear_at(const ImageF& img, double x, double y);

void write_ppm(const std::filesystem::path& path, const ImageU8& img);
ImageU8 read_ppm(const std::filesystem::path& path);

// Values are clamped to [0,1] and mapped onto 0..255.
void write_pgm(const std::filesystem::path& path, const ImageF& img);
ImageF read_pgm(const std::filesystem::path& path);

}  // namespace stdai
