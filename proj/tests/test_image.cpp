#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "stdai/error.hpp"
#include "stdai/image.hpp"
#include "stdai/rng.hpp"

using namespace stdai;
using testutil::TempDir;

TEST_CASE("ppm roundtrip is byte exact") {
    Rng rng(2);
    ImageU8 img = ImageU8::create(7, 5);
    for (std::uint8_t& b : img.data) b = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
    TempDir td;
    write_ppm(td.path() / "x.ppm", img);
    const ImageU8 back = read_ppm(td.path() / "x.ppm");
    CHECK(back.w == 7);
    CHECK(back.h == 5);
    CHECK(back.data == img.data);
}

TEST_CASE("pgm quantizes to 0..255 with clamping") {
    ImageF img = ImageF::create(4, 1);
    img.at(0, 0) = -0.5f;
    img.at(1, 0) = 0.0f;
    img.at(2, 0) = 0.5f;
    img.at(3, 0) = 2.0f;
    TempDir td;
    write_pgm(td.path() / "x.pgm", img);
    const ImageF back = read_pgm(td.path() / "x.pgm");
    CHECK(back.at(0, 0) == doctest::Approx(0.0));
    CHECK(back.at(1, 0) == doctest::Approx(0.0));
    CHECK(back.at(2, 0) == doctest::Approx(128.0 / 255.0).epsilon(1e-6));
    CHECK(back.at(3, 0) == doctest::Approx(1.0));
}

TEST_CASE("reading a missing image fails") {
    TempDir td;
    CHECK_THROWS_AS(read_ppm(td.path() / "absent.ppm"), Error);
}

TEST_CASE("to_gray uses the luminance weights") {
    ImageU8 img = ImageU8::create(1, 1);
    img.px(0, 0)[0] = 255;
    img.px(0, 0)[1] = 0;
    img.px(0, 0)[2] = 0;
    CHECK(to_gray(img).at(0, 0) == doctest::Approx(0.299).epsilon(1e-3));
    img.px(0, 0)[0] = 0;
    img.px(0, 0)[1] = 255;
    CHECK(to_gray(img).at(0, 0) == doctest::Approx(0.587).epsilon(1e-3));
}

TEST_CASE("gaussian blur preserves mean and reduces variance") {
    Rng rng(8);
    ImageF img = ImageF::create(32, 32);
    for (float& v : img.data) v = static_cast<float>(rng.uniform(0.0, 1.0));
    const ImageF b = gaussian_blur(img, 2.0);

    auto stats = [](const ImageF& im) {
        double s = 0.0, s2 = 0.0;
        for (float v : im.data) {
            s += v;
            s2 += v * v;
        }
        const double m = s / im.data.size();
        return std::pair<double, double>(m, s2 / im.data.size() - m * m);
    };
    const auto [m0, v0] = stats(img);
    const auto [m1, v1] = stats(b);
    CHECK(std::fabs(m0 - m1) < 0.02);
    CHECK(v1 < 0.3 * v0);

    // A constant image is a fixed point.
    const ImageF flat = ImageF::create(16, 16, 0.7f);
    const ImageF bf = gaussian_blur(flat, 1.5);
    for (float v : bf.data) CHECK(v == doctest::Approx(0.7).epsilon(1e-6));
}

TEST_CASE("downsample2 decimates on the even lattice") {
    // plain decimation; pyramid callers blur first
    ImageF img = ImageF::create(4, 4);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) img.at(x, y) = float(10 * y + x);
    const ImageF d = downsample2(img);
    CHECK(d.w == 2);
    CHECK(d.h == 2);
    CHECK(d.at(0, 0) == 0.0f);
    CHECK(d.at(1, 0) == 2.0f);
    CHECK(d.at(0, 1) == 20.0f);
    CHECK(d.at(1, 1) == 22.0f);

    // never collapses below one pixel
    const ImageF one = downsample2(downsample2(d));
    CHECK(one.w == 1);
    CHECK(one.h == 1);
}

TEST_CASE("bilinear_at interpolates and clamps at edges") {
    ImageF img = ImageF::create(2, 2);
    img.at(0, 0) = 0.0f;
    img.at(1, 0) = 1.0f;
    img.at(0, 1) = 2.0f;
    img.at(1, 1) = 3.0f;
    CHECK(bilinear_at(img, 0.5, 0.5) == doctest::Approx(1.5));
    CHECK(bilinear_at(img, 0.0, 0.0) == doctest::Approx(0.0));
    CHECK(bilinear_at(img, -5.0, -5.0) == doctest::Approx(0.0));  // clamped
    CHECK(bilinear_at(img, 5.0, 5.0) == doctest::Approx(3.0));
}
