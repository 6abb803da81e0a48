#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "stdai/align.hpp"
#include "stdai/error.hpp"
#include "stdai/phantom.hpp"
#include "stdai/rng.hpp"

using namespace stdai;

namespace {

// Textured scene with blob structure, rendered through a transform so a
// warped pair shares content exactly.
ImageF render_scene(int W, int H, const Transform2D& world_from_img, std::uint64_t key) {
    ImageF img = ImageF::create(W, H);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const Vec2 p = world_from_img.apply({static_cast<double>(x), static_cast<double>(y)});
            double v = 0.25 + 0.18 * value_noise(p.x, p.y, 9.0, key) +
                       0.12 * value_noise(p.x, p.y, 4.0, key ^ 0x9e37ull);
            for (int b = 0; b < 6; ++b) {
                const double bx = 14.0 + 23.0 * value_noise(b * 13.7, 1.0, 1.0, key ^ 77ull) * 3.1;
                const double by = 12.0 + 21.0 * value_noise(1.0, b * 7.3, 1.0, key ^ 78ull) * 3.3;
                const double d2 = (p.x - bx) * (p.x - bx) + (p.y - by) * (p.y - by);
                v += 0.5 * std::exp(-d2 / (2.0 * 16.0));
            }
            img.at(x, y) = static_cast<float>(std::min(1.0, std::max(0.0, v)));
        }
    return img;
}

ImageU8 to_rgb(const ImageF& g) {
    ImageU8 img = ImageU8::create(g.w, g.h);
    for (int y = 0; y < g.h; ++y)
        for (int x = 0; x < g.w; ++x) {
            const auto v = static_cast<std::uint8_t>(std::lround(255.0f * g.at(x, y)));
            img.px(x, y)[0] = v;
            img.px(x, y)[1] = static_cast<std::uint8_t>(255 - v);
            img.px(x, y)[2] = v / 2;
        }
    return img;
}

}  // namespace

TEST_CASE("keypoints are found on structured images and none on flat ones") {
    const ImageF scene = render_scene(96, 96, Transform2D::identity(), 5);
    const Features f = detect_keypoints(scene, 600);
    CHECK(f.keypoints.size() >= 20);
    CHECK(f.keypoints.size() == f.descriptors.size());
    for (std::size_t i = 1; i < f.keypoints.size(); ++i)
        CHECK(f.keypoints[i - 1].response >= f.keypoints[i].response);

    const ImageF flat = ImageF::create(64, 64, 0.5f);
    CHECK(detect_keypoints(flat, 600).keypoints.empty());
}

TEST_CASE("max_count truncates by response") {
    const ImageF scene = render_scene(96, 96, Transform2D::identity(), 6);
    const Features all = detect_keypoints(scene, 1000);
    const Features few = detect_keypoints(scene, 5);
    REQUIRE(few.keypoints.size() <= 5);
    if (all.keypoints.size() >= 5)
        CHECK(few.keypoints.size() == 5);
}

TEST_CASE("matching rejects random descriptor pairs") {
    Rng rng(31);
    Features fa, fb;
    for (int i = 0; i < 200; ++i) {
        Descriptor d;
        double n2 = 0.0;
        for (float& x : d.v) {
            x = static_cast<float>(rng.uniform(0.0, 1.0));
            n2 += x * x;
        }
        for (float& x : d.v) x = static_cast<float>(x / std::sqrt(n2));
        (i % 2 ? fa : fb).descriptors.push_back(d);
        (i % 2 ? fa : fb).keypoints.push_back({});
    }
    const auto m = match_descriptors(fa, fb, 0.8);
    CHECK(m.size() <= 10);  // < 5% spurious survivors
}

TEST_CASE("matched keypoints across a rotation mostly agree geometrically") {
    const double ang = 8.0 * M_PI / 180.0;
    const Transform2D adj_from_central = Transform2D::similarity(ang, 1.0, 5.0, -3.0);
    // Render both frames from shared world coordinates.
    const ImageF a = render_scene(96, 96, Transform2D::identity(), 9);
    const ImageF b = render_scene(96, 96, adj_from_central.inverse(), 9);
    const Features fa = detect_keypoints(a, 400);
    const Features fb = detect_keypoints(b, 400);
    REQUIRE(fa.keypoints.size() >= 10);
    REQUIRE(fb.keypoints.size() >= 10);
    const auto matches = match_descriptors(fa, fb, 0.8);
    REQUIRE(matches.size() >= 8);
    int good = 0;
    for (const Match& m : matches) {
        const Keypoint& ka = fa.keypoints[static_cast<std::size_t>(m.a)];
        const Keypoint& kb = fb.keypoints[static_cast<std::size_t>(m.b)];
        const Vec2 mapped = adj_from_central.apply({ka.x, ka.y});
        const double d = std::hypot(mapped.x - kb.x, mapped.y - kb.y);
        good += d < 3.0;
    }
    CHECK(static_cast<double>(good) >= 0.7 * static_cast<double>(matches.size()));
}

TEST_CASE("ransac recovers a similarity from noisy correspondences with outliers") {
    for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
        Rng rng(seed);
        const Transform2D truth =
            Transform2D::similarity(rng.uniform(-0.15, 0.15), rng.uniform(0.9, 1.1),
                                    rng.uniform(-8.0, 8.0), rng.uniform(-8.0, 8.0));
        std::vector<Vec2> pa, pb;
        for (int i = 0; i < 60; ++i) {
            const Vec2 p{rng.uniform(0.0, 96.0), rng.uniform(0.0, 96.0)};
            Vec2 q = truth.apply(p);
            if (i % 4 == 3) {  // 25% outliers
                q.x = rng.uniform(0.0, 96.0);
                q.y = rng.uniform(0.0, 96.0);
            } else {
                q.x += rng.uniform(-0.3, 0.3);
                q.y += rng.uniform(-0.3, 0.3);
            }
            pa.push_back(p);
            pb.push_back(q);
        }
        RansacParams rp;
        const RansacResult res = estimate_transform_ransac(pa, pb, rp, seed);
        CHECK(!res.low_confidence);
        CHECK(res.inlier_ratio > 0.5);
        double worst = 0.0;
        for (const Vec2 c : {Vec2{0, 0}, Vec2{96, 0}, Vec2{0, 96}, Vec2{96, 96}}) {
            const Vec2 got = res.transform.apply(c);
            const Vec2 want = truth.apply(c);
            worst = std::max(worst, std::hypot(got.x - want.x, got.y - want.y));
        }
        CAPTURE(seed);
        CHECK(worst < 1.0);
    }
}

TEST_CASE("ransac recovers an affine map including shear") {
    Rng rng(44);
    Transform2D truth;
    truth.m = {1.05, 0.12, 4.0, -0.07, 0.95, -2.0};
    std::vector<Vec2> pa, pb;
    for (int i = 0; i < 50; ++i) {
        const Vec2 p{rng.uniform(0.0, 64.0), rng.uniform(0.0, 64.0)};
        Vec2 q = truth.apply(p);
        if (i % 5 == 4) q = {rng.uniform(0.0, 64.0), rng.uniform(0.0, 64.0)};
        pa.push_back(p);
        pb.push_back(q);
    }
    RansacParams rp;
    rp.family = TransformFamily::Affine;
    const RansacResult res = estimate_transform_ransac(pa, pb, rp, 7);
    for (int i = 0; i < 6; ++i) CHECK(res.transform.m[i] == doctest::Approx(truth.m[i]).epsilon(0.02));
}

TEST_CASE("ransac flags low confidence on pure noise") {
    Rng rng(91);
    std::vector<Vec2> pa, pb;
    for (int i = 0; i < 40; ++i) {
        pa.push_back({rng.uniform(0.0, 64.0), rng.uniform(0.0, 64.0)});
        pb.push_back({rng.uniform(0.0, 64.0), rng.uniform(0.0, 64.0)});
    }
    RansacParams rp;
    CHECK(estimate_transform_ransac(pa, pb, rp, 3).low_confidence);
}

TEST_CASE("ransac needs two correspondences") {
    RansacParams rp;
    CHECK_THROWS_AS(estimate_transform_ransac({{0, 0}}, {{1, 1}}, rp, 0), Error);
}

TEST_CASE("transform family parses and rejects") {
    CHECK(transform_family_from_string("similarity") == TransformFamily::Similarity);
    CHECK(transform_family_from_string("affine") == TransformFamily::Affine);
    CHECK_THROWS_AS(transform_family_from_string("projective"), Error);
}

TEST_CASE("align_images recovers the phantom pose end to end") {
    PhantomConfig pc;
    pc.width = 96;
    pc.height = 96;
    pc.adjacent = 1;
    pc.rotation_deg = 6.0;
    pc.translation_px = 5.0;
    pc.seed = 123;
    const Sample s = synth_phantom(pc);
    const Section& central = s.sections[s.central_pos()];
    const Section& adj = s.sections[s.adjacent_pos()[0]];
    REQUIRE(adj.has_truth_transform);

    const AlignOutcome out = align_images(central.histology, adj.histology, {}, 5);
    CHECK(!out.low_confidence);
    double worst = 0.0;
    for (const Vec2 c : {Vec2{0, 0}, Vec2{95, 0}, Vec2{0, 95}, Vec2{95, 95}}) {
        const Vec2 got = out.transform.apply(c);
        const Vec2 want = adj.truth_transform.apply(c);
        worst = std::max(worst, std::hypot(got.x - want.x, got.y - want.y));
    }
    CHECK(worst < 1.5);
}

TEST_CASE("warp_central resamples expression and marks validity") {
    PhantomConfig pc = identity_phantom({});
    pc.width = 32;
    pc.height = 32;
    pc.adjacent = 1;
    pc.seed = 3;
    const Sample s = synth_phantom(pc);
    const Section& central = s.sections[s.central_pos()];

    SUBCASE("identity warp reproduces the section") {
        const AlignedCentral w = warp_central(central, Transform2D::identity(), 32, 32);
        for (std::size_t i = 0; i < w.validity.size(); ++i) CHECK(w.validity[i] == 1);
        for (std::size_t i = 0; i < central.expression.data.size(); ++i)
            CHECK(w.expression.data[i] == doctest::Approx(central.expression.data[i]).epsilon(1e-6));
    }

    SUBCASE("a large shift leaves an invalid band") {
        const AlignedCentral w = warp_central(central, Transform2D::translation(8.0, 0.0), 32, 32);
        // Pixels mapping outside the source are invalid; x >= 8 requires
        // source x - 8 >= 0 under the inverse, so columns 0..7 of the
        // output are fed by x in [-8,-1].
        int invalid = 0;
        for (std::uint8_t v : w.validity) invalid += v == 0;
        CHECK(invalid == 8 * 32);
    }
}
