#include "stdai/phantom.hpp"

#include <algorithm>
#include <cmath>

#include "stdai/error.hpp"
#include "stdai/rng.hpp"

namespace stdai {

namespace {

constexpr double kPi = 3.14159265358979323846;

std::uint64_t hash2(std::int64_t ix, std::int64_t iy, std::uint64_t key) {
    std::uint64_t h = key;
    h ^= static_cast<std::uint64_t>(ix) * 0x9e3779b97f4a7c15ull;
    h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ull;
    h ^= static_cast<std::uint64_t>(iy) * 0xd1b54a32d192ed03ull;
    h = (h ^ (h >> 27)) * 0x94d049bb133111ebull;
    return h ^ (h >> 31);
}

struct Blob {
    double cx, cy, sigma, amp;
    int cls;
};

struct GeneShift {
    double gain = 1.0, gamma = 1.0, bias = 0.0;
    double apply(double v) const {
        if (gain == 1.0 && gamma == 1.0 && bias == 0.0) return v;
        return gain * std::pow(v, gamma) + bias;
    }
};

struct Scene {
    std::vector<Blob> blobs;
    std::vector<std::array<double, 3>> class_color;        // per class RGB
    std::vector<std::vector<double>> response;             // [gene][class]
};

Scene draw_scene(const PhantomConfig& cfg, Rng rng) {
    Scene sc;
    sc.class_color.resize(static_cast<std::size_t>(cfg.classes));
    for (int c = 0; c < cfg.classes; ++c) {
        std::array<double, 3> col{};
        const int dominant = c % 3;
        for (int ch = 0; ch < 3; ++ch)
            col[static_cast<std::size_t>(ch)] =
                ch == dominant ? rng.uniform(0.55, 0.85) : rng.uniform(0.15, 0.45);
        sc.class_color[static_cast<std::size_t>(c)] = col;
    }
    sc.response.assign(static_cast<std::size_t>(cfg.genes),
                       std::vector<double>(static_cast<std::size_t>(cfg.classes), 0.0));
    for (int g = 0; g < cfg.genes; ++g)
        for (int c = 0; c < cfg.classes; ++c) {
            const double u = rng.uniform();
            sc.response[static_cast<std::size_t>(g)][static_cast<std::size_t>(c)] = u * u;
        }
    sc.blobs.resize(static_cast<std::size_t>(cfg.blobs));
    for (Blob& b : sc.blobs) {
        b.cx = rng.uniform(0.12 * cfg.width, 0.88 * cfg.width);
        b.cy = rng.uniform(0.12 * cfg.height, 0.88 * cfg.height);
        b.sigma = rng.uniform(cfg.blob_sigma_lo, cfg.blob_sigma_hi);
        b.amp = rng.uniform(0.7, 1.0);
        b.cls = rng.uniform_int(0, cfg.classes - 1);
    }
    return sc;
}

struct NoiseKeys {
    std::uint64_t tex_coarse, tex_fine, expr;
};

void render_section(Section& out, const PhantomConfig& cfg, const Scene& sc,
                    const std::vector<Blob>& blobs, const Transform2D& to_scene,
                    const std::vector<GeneShift>& shifts, const NoiseKeys& keys) {
    const int W = cfg.width, H = cfg.height;
    out.histology = ImageU8::create(W, H);
    out.expression = Tensor::zeros({cfg.genes, H, W});
    out.mask.assign(static_cast<std::size_t>(W) * H, 1);

    const std::size_t plane = static_cast<std::size_t>(W) * H;
    std::vector<double> blob_w(blobs.size());
    for (int py = 0; py < H; ++py) {
        for (int px = 0; px < W; ++px) {
            const Vec2 sp = to_scene.apply({static_cast<double>(px), static_cast<double>(py)});
            for (std::size_t k = 0; k < blobs.size(); ++k) {
                const Blob& b = blobs[k];
                const double dx = px - b.cx, dy = py - b.cy;
                blob_w[k] = b.amp * std::exp(-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma));
            }

            const double t1 = value_noise(sp.x, sp.y, 9.0, keys.tex_coarse);
            const double t2 = value_noise(sp.x, sp.y, 3.5, keys.tex_fine);
            const double lum = 1.0 - cfg.bg_texture * (0.65 * t1 + 0.35 * t2);
            double col[3] = {0.88 * lum, 0.84 * lum, 0.90 * lum};
            for (std::size_t k = 0; k < blobs.size(); ++k) {
                const double w = std::min(1.0, blob_w[k]);
                const auto& cc = sc.class_color[static_cast<std::size_t>(blobs[k].cls)];
                for (int ch = 0; ch < 3; ++ch)
                    col[ch] = col[ch] * (1.0 - w) + cc[static_cast<std::size_t>(ch)] * w;
            }
            std::uint8_t* px8 = out.histology.px(px, py);
            for (int ch = 0; ch < 3; ++ch)
                px8[ch] = static_cast<std::uint8_t>(
                    std::lround(std::clamp(col[ch], 0.0, 1.0) * 255.0));

            for (int g = 0; g < cfg.genes; ++g) {
                double raw = 0.0;
                for (std::size_t k = 0; k < blobs.size(); ++k)
                    raw += sc.response[static_cast<std::size_t>(g)]
                                      [static_cast<std::size_t>(blobs[k].cls)] *
                           blob_w[k];
                raw += cfg.noise * value_noise(sp.x, sp.y, 5.0,
                                               keys.expr + static_cast<std::uint64_t>(g));
                out.expression.data[static_cast<std::size_t>(g) * plane +
                                    static_cast<std::size_t>(py) * W + px] =
                    static_cast<float>(shifts[static_cast<std::size_t>(g)].apply(raw));
            }
        }
    }
}

}  // namespace

double value_noise(double x, double y, double cell, std::uint64_t key) {
    const double u = x / cell, v = y / cell;
    const double fu = std::floor(u), fv = std::floor(v);
    const auto ix = static_cast<std::int64_t>(fu);
    const auto iy = static_cast<std::int64_t>(fv);
    const double tx = u - fu, ty = v - fv;
    const double sx = tx * tx * (3.0 - 2.0 * tx);
    const double sy = ty * ty * (3.0 - 2.0 * ty);
    const auto at = [key](std::int64_t gx, std::int64_t gy) {
        return static_cast<double>(hash2(gx, gy, key) >> 11) * 0x1.0p-53;
    };
    const double a = at(ix, iy), b = at(ix + 1, iy);
    const double c = at(ix, iy + 1), d = at(ix + 1, iy + 1);
    return (a * (1.0 - sx) + b * sx) * (1.0 - sy) + (c * (1.0 - sx) + d * sx) * sy;
}

PhantomConfig identity_phantom(PhantomConfig cfg) {
    cfg.rotation_deg = 0.0;
    cfg.translation_px = 0.0;
    cfg.scale_lo = cfg.scale_hi = 1.0;
    cfg.blob_jitter_px = 0.0;
    cfg.gain_lo = cfg.gain_hi = 1.0;
    cfg.bias_lo = cfg.bias_hi = 0.0;
    cfg.gamma_lo = cfg.gamma_hi = 1.0;
    return cfg;
}

Sample synth_phantom(const PhantomConfig& cfg) {
    require(cfg.width >= 16 && cfg.height >= 16, "phantom: sides must be at least 16");
    require(cfg.genes >= 1, "phantom: need at least one gene");
    require(cfg.classes >= 1, "phantom: need at least one class");
    require(cfg.blobs >= 1, "phantom: need at least one blob");
    require(cfg.adjacent >= 0, "phantom: negative adjacent count");
    require(cfg.blob_sigma_lo > 0 && cfg.blob_sigma_hi >= cfg.blob_sigma_lo, "phantom: bad sigma range");
    require(cfg.gain_lo > 0 && cfg.gamma_lo > 0, "phantom: shift must stay monotone (gain, gamma > 0)");
    require(cfg.scale_lo > 0 && cfg.scale_hi >= cfg.scale_lo, "phantom: bad scale range");

    const Rng base(cfg.seed);
    const Scene sc = draw_scene(cfg, base.fork("scene"));
    const NoiseKeys keys{base.fork("tex-coarse").seed(), base.fork("tex-fine").seed(),
                         base.fork("expr-noise").seed()};

    Sample sample;
    sample.width = cfg.width;
    sample.height = cfg.height;
    sample.sample_id = "phantom-" + std::to_string(cfg.width) + "x" + std::to_string(cfg.height) +
                       "g" + std::to_string(cfg.genes) + "-s" + std::to_string(cfg.seed);
    for (int g = 0; g < cfg.genes; ++g) sample.genes.push_back("gene" + std::to_string(g));

    const int n = cfg.adjacent + 1;
    const int central_pos = n / 2;
    sample.central_index = central_pos;

    const std::vector<GeneShift> no_shift(static_cast<std::size_t>(cfg.genes));
    const double ccx = (cfg.width - 1) / 2.0, ccy = (cfg.height - 1) / 2.0;

    for (int pos = 0; pos < n; ++pos) {
        Section s;
        s.section_index = pos;
        if (pos == central_pos) {
            s.role = "central";
            render_section(s, cfg, sc, sc.blobs, Transform2D::identity(), no_shift, keys);
        } else {
            s.role = "adjacent";
            Rng rng = base.fork("adjacent-" + std::to_string(pos));
            const double rot = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg) * kPi / 180.0;
            const double scl = rng.uniform(cfg.scale_lo, cfg.scale_hi);
            const double tx = rng.uniform(-cfg.translation_px, cfg.translation_px);
            const double ty = rng.uniform(-cfg.translation_px, cfg.translation_px);

            const bool ident = rot == 0.0 && scl == 1.0 && tx == 0.0 && ty == 0.0;
            Transform2D T = Transform2D::identity();
            if (!ident) {
                T = Transform2D::similarity(rot, scl, 0.0, 0.0);
                T.m[2] = ccx + tx - (T.m[0] * ccx + T.m[1] * ccy);
                T.m[5] = ccy + ty - (T.m[3] * ccx + T.m[4] * ccy);
            }

            std::vector<Blob> blobs = sc.blobs;
            int inside = 0;
            for (Blob& b : blobs) {
                const Vec2 q = T.apply({b.cx, b.cy});
                b.cx = q.x + rng.uniform(-cfg.blob_jitter_px, cfg.blob_jitter_px);
                b.cy = q.y + rng.uniform(-cfg.blob_jitter_px, cfg.blob_jitter_px);
                b.sigma *= scl;
                if (b.cx >= 0 && b.cx < cfg.width && b.cy >= 0 && b.cy < cfg.height) ++inside;
            }
            require(2 * inside >= cfg.blobs,
                    "phantom: adjacent pose pushes more than half of the content out of frame");

            std::vector<GeneShift> shifts(static_cast<std::size_t>(cfg.genes));
            for (GeneShift& gs : shifts) {
                gs.gain = rng.uniform(cfg.gain_lo, cfg.gain_hi);
                gs.bias = rng.uniform(cfg.bias_lo, cfg.bias_hi);
                gs.gamma = rng.uniform(cfg.gamma_lo, cfg.gamma_hi);
            }

            render_section(s, cfg, sc, blobs, ident ? Transform2D::identity() : T.inverse(),
                           shifts, keys);
            s.truth = s.expression;
            s.has_truth = true;
            s.truth_transform = T;
            s.has_truth_transform = true;
        }
        sample.sections.push_back(std::move(s));
    }

    // Raw per-gene range on the central section, recorded in the manifest.
    const Section& central = sample.sections[static_cast<std::size_t>(central_pos)];
    const std::size_t plane = static_cast<std::size_t>(cfg.width) * cfg.height;
    sample.stat_min.resize(static_cast<std::size_t>(cfg.genes));
    sample.stat_max.resize(static_cast<std::size_t>(cfg.genes));
    for (int g = 0; g < cfg.genes; ++g) {
        const float* p = central.expression.ptr() + static_cast<std::size_t>(g) * plane;
        double lo = p[0], hi = p[0];
        for (std::size_t i = 1; i < plane; ++i) {
            lo = std::min(lo, static_cast<double>(p[i]));
            hi = std::max(hi, static_cast<double>(p[i]));
        }
        sample.stat_min[static_cast<std::size_t>(g)] = lo;
        sample.stat_max[static_cast<std::size_t>(g)] = hi;
    }

    sample.validate();
    return sample;
}

}  // namespace stdai
