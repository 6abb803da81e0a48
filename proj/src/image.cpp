#include "stdai/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include "stdai/error.hpp"

namespace stdai {

ImageU8 ImageU8::create(int w, int h) {
    require(w > 0 && h > 0, "image: sides must be positive");
    ImageU8 img;
    img.w = w;
    img.h = h;
    img.data.assign(static_cast<std::size_t>(w) * h * 3, 0);
    return img;
}

ImageF ImageF::create(int w, int h, float fill) {
    require(w > 0 && h > 0, "image: sides must be positive");
    ImageF img;
    img.w = w;
    img.h = h;
    img.data.assign(static_cast<std::size_t>(w) * h, fill);
    return img;
}

ImageF to_gray(const ImageU8& img) {
    ImageF out = ImageF::create(img.w, img.h);
    const std::size_t n = static_cast<std::size_t>(img.w) * img.h;
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint8_t* p = img.data.data() + 3 * i;
        out.data[i] = static_cast<float>((0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]) / 255.0);
    }
    return out;
}

ImageF gaussian_blur(const ImageF& img, double sigma) {
    if (sigma <= 0.0) return img;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    double ksum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        const double v = std::exp(-(static_cast<double>(i) * i) / (2.0 * sigma * sigma));
        kernel[static_cast<std::size_t>(i + radius)] = v;
        ksum += v;
    }
    for (double& v : kernel) v /= ksum;

    const int w = img.w, h = img.h;
    ImageF tmp = ImageF::create(w, h);
    for (int y = 0; y < h; ++y) {
        const float* row = img.data.data() + static_cast<std::size_t>(y) * w;
        float* orow = tmp.data.data() + static_cast<std::size_t>(y) * w;
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                const int xi = std::clamp(x + i, 0, w - 1);
                acc += kernel[static_cast<std::size_t>(i + radius)] * row[xi];
            }
            orow[x] = static_cast<float>(acc);
        }
    }
    ImageF out = ImageF::create(w, h);
    for (int y = 0; y < h; ++y) {
        float* orow = out.data.data() + static_cast<std::size_t>(y) * w;
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                const int yi = std::clamp(y + i, 0, h - 1);
                acc += kernel[static_cast<std::size_t>(i + radius)] * tmp.at(x, yi);
            }
            orow[x] = static_cast<float>(acc);
        }
    }
    return out;
}

ImageF downsample2(const ImageF& img) {
    const int ow = std::max(1, img.w / 2), oh = std::max(1, img.h / 2);
    ImageF out = ImageF::create(ow, oh);
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) out.at(x, y) = img.at(2 * x, 2 * y);
    return out;
}

float bilinear_at(const ImageF& img, double x, double y) {
    x = std::clamp(x, 0.0, static_cast<double>(img.w - 1));
    y = std::clamp(y, 0.0, static_cast<double>(img.h - 1));
    const int x0 = std::min(static_cast<int>(x), img.w - 2 >= 0 ? img.w - 2 : 0);
    const int y0 = std::min(static_cast<int>(y), img.h - 2 >= 0 ? img.h - 2 : 0);
    const int x1 = std::min(x0 + 1, img.w - 1);
    const int y1 = std::min(y0 + 1, img.h - 1);
    const double fx = x - x0, fy = y - y0;
    const double v00 = img.at(x0, y0), v10 = img.at(x1, y0);
    const double v01 = img.at(x0, y1), v11 = img.at(x1, y1);
    return static_cast<float>((1 - fy) * ((1 - fx) * v00 + fx * v10) +
                              fy * ((1 - fx) * v01 + fx * v11));
}

void write_ppm(const std::filesystem::path& path, const ImageU8& img) {
    std::ofstream f(path, std::ios::binary);
    require(f.good(), "cannot open " + path.string() + " for writing");
    f << "P6\n" << img.w << " " << img.h << "\n255\n";
    f.write(reinterpret_cast<const char*>(img.data.data()),
            static_cast<std::streamsize>(img.data.size()));
    require(f.good(), "write failed for " + path.string());
}

namespace {

// Reads one whitespace-delimited token, skipping '#' comment lines.
std::string next_token(std::istream& f) {
    std::string tok;
    int c;
    while ((c = f.get()) != EOF) {
        if (c == '#') {
            while ((c = f.get()) != EOF && c != '\n') {
            }
            continue;
        }
        if (std::isspace(c)) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok.push_back(static_cast<char>(c));
    }
    return tok;
}

int parse_dim(const std::string& tok, const std::string& what, const std::string& file) {
    try {
        const int v = std::stoi(tok);
        require(v > 0, what + " must be positive in " + file);
        return v;
    } catch (const Error&) {
        throw;
    } catch (...) {
        throw Error("malformed " + what + " '" + tok + "' in " + file);
    }
}

}  // namespace

ImageU8 read_ppm(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), "cannot open " + path.string());
    require(next_token(f) == "P6", path.string() + " is not a binary PPM (P6)");
    const int w = parse_dim(next_token(f), "width", path.string());
    const int h = parse_dim(next_token(f), "height", path.string());
    const int maxval = parse_dim(next_token(f), "maxval", path.string());
    require(maxval == 255, path.string() + ": only maxval 255 is supported");
    ImageU8 img = ImageU8::create(w, h);
    f.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
    require(f.gcount() == static_cast<std::streamsize>(img.data.size()),
            path.string() + ": truncated pixel data");
    return img;
}

void write_pgm(const std::filesystem::path& path, const ImageF& img) {
    std::ofstream f(path, std::ios::binary);
    require(f.good(), "cannot open " + path.string() + " for writing");
    f << "P5\n" << img.w << " " << img.h << "\n255\n";
    std::vector<std::uint8_t> bytes(img.data.size());
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        const float v = std::clamp(img.data[i], 0.0f, 1.0f);
        bytes[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    require(f.good(), "write failed for " + path.string());
}

ImageF read_pgm(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), "cannot open " + path.string());
    require(next_token(f) == "P5", path.string() + " is not a binary PGM (P5)");
    const int w = parse_dim(next_token(f), "width", path.string());
    const int h = parse_dim(next_token(f), "height", path.string());
    const int maxval = parse_dim(next_token(f), "maxval", path.string());
    require(maxval == 255, path.string() + ": only maxval 255 is supported");
    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(w) * h);
    f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    require(f.gcount() == static_cast<std::streamsize>(bytes.size()),
            path.string() + ": truncated pixel data");
    ImageF img = ImageF::create(w, h);
    for (std::size_t i = 0; i < bytes.size(); ++i) img.data[i] = bytes[i] / 255.0f;
    return img;
}

}  // namespace stdai
