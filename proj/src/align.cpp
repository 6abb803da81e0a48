#include "stdai/align.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "stdai/error.hpp"
#include "stdai/rng.hpp"

namespace stdai {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kSqrt2 = 1.41421356237309514547;

struct Octave {
    std::vector<ImageF> levels;  // 4 Gaussian levels
    std::vector<ImageF> dog;     // 3 differences
    ImageF gx, gy;               // gradients of levels[1]
    int scale_factor = 1;        // full-res pixels per octave pixel
};

ImageF gradient_x(const ImageF& img) {
    ImageF out = ImageF::create(img.w, img.h);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            const int x0 = std::max(0, x - 1), x1 = std::min(img.w - 1, x + 1);
            out.at(x, y) = 0.5f * (img.at(x1, y) - img.at(x0, y));
        }
    return out;
}

ImageF gradient_y(const ImageF& img) {
    ImageF out = ImageF::create(img.w, img.h);
    for (int y = 0; y < img.h; ++y) {
        const int y0 = std::max(0, y - 1), y1 = std::min(img.h - 1, y + 1);
        for (int x = 0; x < img.w; ++x) out.at(x, y) = 0.5f * (img.at(x, y1) - img.at(x, y0));
    }
    return out;
}

std::vector<Octave> build_pyramid(const ImageF& gray, const SiftParams& p) {
    std::vector<Octave> pyr;
    const double k = kSqrt2;
    // Assume the input carries sigma 0.5 of blur; lift it to sigma0.
    const double lift = std::sqrt(std::max(1e-12, p.sigma0 * p.sigma0 - 0.25));
    ImageF base = gaussian_blur(gray, lift);
    int factor = 1;
    for (int o = 0; o < p.octaves; ++o) {
        if (base.w < 8 || base.h < 8) break;
        Octave oct;
        oct.scale_factor = factor;
        oct.levels.push_back(base);
        for (int i = 1; i < 4; ++i) {
            const double prev = p.sigma0 * std::pow(k, i - 1);
            const double delta = prev * std::sqrt(k * k - 1.0);
            oct.levels.push_back(gaussian_blur(oct.levels.back(), delta));
        }
        for (int i = 0; i < 3; ++i) {
            ImageF d = ImageF::create(base.w, base.h);
            for (std::size_t j = 0; j < d.data.size(); ++j)
                d.data[j] = oct.levels[static_cast<std::size_t>(i + 1)].data[j] -
                            oct.levels[static_cast<std::size_t>(i)].data[j];
            oct.dog.push_back(std::move(d));
        }
        oct.gx = gradient_x(oct.levels[1]);
        oct.gy = gradient_y(oct.levels[1]);
        // levels[2] has sigma0 * 2 of blur relative to this octave's base.
        base = downsample2(oct.levels[2]);
        factor *= 2;
        pyr.push_back(std::move(oct));
    }
    return pyr;
}

bool is_extremum(const std::vector<ImageF>& dog, int x, int y) {
    const float v = dog[1].at(x, y);
    bool hi = true, lo = true;
    for (int s = 0; s < 3; ++s)
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                if (s == 1 && dx == 0 && dy == 0) continue;
                const float n = dog[static_cast<std::size_t>(s)].at(x + dx, y + dy);
                if (v <= n) hi = false;
                if (v >= n) lo = false;
                if (!hi && !lo) return false;
            }
    return hi || lo;
}

struct OrientedPoint {
    double x, y, response;
};

std::vector<double> orientation_histogram(const Octave& oct, double x, double y, double sigma_w) {
    std::vector<double> hist(36, 0.0);
    const int radius = std::max(1, static_cast<int>(std::lround(3.0 * sigma_w)));
    const int cx = static_cast<int>(std::lround(x));
    const int cy = static_cast<int>(std::lround(y));
    for (int dy = -radius; dy <= radius; ++dy) {
        for (int dx = -radius; dx <= radius; ++dx) {
            const int px = cx + dx, py = cy + dy;
            if (px < 1 || py < 1 || px >= oct.gx.w - 1 || py >= oct.gx.h - 1) continue;
            const double gx = oct.gx.at(px, py), gy = oct.gy.at(px, py);
            const double mag = std::sqrt(gx * gx + gy * gy);
            if (mag <= 0.0) continue;
            const double wgt = std::exp(-(static_cast<double>(dx) * dx + static_cast<double>(dy) * dy) /
                                        (2.0 * sigma_w * sigma_w));
            double theta = std::atan2(gy, gx);
            if (theta < 0) theta += 2.0 * kPi;
            int bin = static_cast<int>(theta / (2.0 * kPi) * 36.0);
            if (bin >= 36) bin = 35;
            hist[static_cast<std::size_t>(bin)] += wgt * mag;
        }
    }
    for (int pass = 0; pass < 2; ++pass) {
        std::vector<double> s(36);
        for (int i = 0; i < 36; ++i)
            s[static_cast<std::size_t>(i)] =
                (hist[static_cast<std::size_t>((i + 35) % 36)] + hist[static_cast<std::size_t>(i)] +
                 hist[static_cast<std::size_t>((i + 1) % 36)]) /
                3.0;
        hist = std::move(s);
    }
    return hist;
}

std::vector<double> dominant_angles(const std::vector<double>& hist) {
    const double peak = *std::max_element(hist.begin(), hist.end());
    std::vector<double> out;
    if (peak <= 0.0) return out;
    std::vector<std::pair<double, int>> cands;
    for (int i = 0; i < 36; ++i) {
        const double c = hist[static_cast<std::size_t>(i)];
        const double l = hist[static_cast<std::size_t>((i + 35) % 36)];
        const double r = hist[static_cast<std::size_t>((i + 1) % 36)];
        if (c > l && c > r && c >= 0.8 * peak) cands.emplace_back(-c, i);
    }
    std::sort(cands.begin(), cands.end());
    for (std::size_t n = 0; n < cands.size() && n < 2; ++n) {
        const int i = cands[n].second;
        const double l = hist[static_cast<std::size_t>((i + 35) % 36)];
        const double c = hist[static_cast<std::size_t>(i)];
        const double r = hist[static_cast<std::size_t>((i + 1) % 36)];
        const double denom = l - 2.0 * c + r;
        const double delta = std::abs(denom) < 1e-12 ? 0.0 : 0.5 * (l - r) / denom;
        double theta = (i + 0.5 + delta) * 2.0 * kPi / 36.0;
        if (theta >= 2.0 * kPi) theta -= 2.0 * kPi;
        if (theta < 0) theta += 2.0 * kPi;
        out.push_back(theta);
    }
    return out;
}

Descriptor make_descriptor(const Octave& oct, double x, double y, double angle, double sigma_oct) {
    Descriptor d;
    std::array<double, 128> acc{};
    const double ca = std::cos(angle), sa = std::sin(angle);
    const double spacing = sigma_oct;  // sample step in octave pixels
    for (int gy = 0; gy < 16; ++gy) {
        for (int gx = 0; gx < 16; ++gx) {
            const double u = (gx - 7.5) * spacing;
            const double v = (gy - 7.5) * spacing;
            const double px = x + ca * u - sa * v;
            const double py = y + sa * u + ca * v;
            if (px < 1 || py < 1 || px > oct.gx.w - 2 || py > oct.gx.h - 2) continue;
            const double dxv = bilinear_at(oct.gx, px, py);
            const double dyv = bilinear_at(oct.gy, px, py);
            const double mag = std::sqrt(dxv * dxv + dyv * dyv);
            if (mag <= 0.0) continue;
            double theta = std::atan2(dyv, dxv) - angle;
            while (theta < 0) theta += 2.0 * kPi;
            while (theta >= 2.0 * kPi) theta -= 2.0 * kPi;
            const double wgt =
                std::exp(-(static_cast<double>(gx - 7.5) * (gx - 7.5) + (gy - 7.5) * (gy - 7.5)) /
                         (2.0 * 6.0 * 6.0));

            // Trilinear vote into the 4x4 spatial x 8 orientation grid.
            const double cxf = (gx + 0.5) / 4.0 - 0.5;  // cell coords in [−0.5, 3.5]
            const double cyf = (gy + 0.5) / 4.0 - 0.5;
            const double obf = theta / (2.0 * kPi) * 8.0;
            const int cx0 = static_cast<int>(std::floor(cxf));
            const int cy0 = static_cast<int>(std::floor(cyf));
            const int ob0 = static_cast<int>(std::floor(obf)) % 8;
            const double fx = cxf - std::floor(cxf);
            const double fy = cyf - std::floor(cyf);
            const double fo = obf - std::floor(obf);
            for (int iy = 0; iy < 2; ++iy) {
                const int cy = cy0 + iy;
                if (cy < 0 || cy > 3) continue;
                const double wy = iy ? fy : 1.0 - fy;
                for (int ix = 0; ix < 2; ++ix) {
                    const int cx = cx0 + ix;
                    if (cx < 0 || cx > 3) continue;
                    const double wx = ix ? fx : 1.0 - fx;
                    for (int io = 0; io < 2; ++io) {
                        const int ob = (ob0 + io) % 8;
                        const double wo = io ? fo : 1.0 - fo;
                        acc[static_cast<std::size_t>(((cy * 4) + cx) * 8 + ob)] +=
                            wgt * mag * wy * wx * wo;
                    }
                }
            }
        }
    }
    double norm = 0.0;
    for (double a : acc) norm += a * a;
    norm = std::sqrt(norm);
    if (norm < 1e-12) return d;
    for (auto& a : acc) a = std::min(a / norm, 0.2);
    norm = 0.0;
    for (double a : acc) norm += a * a;
    norm = std::sqrt(norm);
    for (std::size_t i = 0; i < 128; ++i) d.v[i] = static_cast<float>(acc[i] / norm);
    return d;
}

double descriptor_dist2(const Descriptor& a, const Descriptor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < 128; ++i) {
        const double diff = static_cast<double>(a.v[i]) - b.v[i];
        s += diff * diff;
    }
    return s;
}

Transform2D fit_similarity(const std::vector<Vec2>& pa, const std::vector<Vec2>& pb,
                           const std::vector<int>& idx, bool& ok) {
    double pcx = 0, pcy = 0, qcx = 0, qcy = 0;
    for (int i : idx) {
        pcx += pa[static_cast<std::size_t>(i)].x;
        pcy += pa[static_cast<std::size_t>(i)].y;
        qcx += pb[static_cast<std::size_t>(i)].x;
        qcy += pb[static_cast<std::size_t>(i)].y;
    }
    const double n = static_cast<double>(idx.size());
    pcx /= n;
    pcy /= n;
    qcx /= n;
    qcy /= n;
    double saa = 0, sab = 0, spp = 0;
    for (int i : idx) {
        const double px = pa[static_cast<std::size_t>(i)].x - pcx;
        const double py = pa[static_cast<std::size_t>(i)].y - pcy;
        const double qx = pb[static_cast<std::size_t>(i)].x - qcx;
        const double qy = pb[static_cast<std::size_t>(i)].y - qcy;
        saa += px * qx + py * qy;
        sab += px * qy - py * qx;
        spp += px * px + py * py;
    }
    ok = spp > 1e-9;
    Transform2D t;
    if (!ok) return t;
    const double a = saa / spp, b = sab / spp;
    t.m = {a, -b, 0, b, a, 0};
    t.m[2] = qcx - (a * pcx - b * pcy);
    t.m[5] = qcy - (b * pcx + a * pcy);
    ok = !t.near_singular();
    return t;
}

// Solves the 3x3 system A x = rhs in place; returns false when singular.
bool solve3(std::array<std::array<double, 3>, 3> A, std::array<double, 3> rhs,
            std::array<double, 3>& out) {
    for (int col = 0; col < 3; ++col) {
        int piv = col;
        for (int r = col + 1; r < 3; ++r)
            if (std::abs(A[static_cast<std::size_t>(r)][static_cast<std::size_t>(col)]) >
                std::abs(A[static_cast<std::size_t>(piv)][static_cast<std::size_t>(col)]))
                piv = r;
        if (std::abs(A[static_cast<std::size_t>(piv)][static_cast<std::size_t>(col)]) < 1e-12)
            return false;
        std::swap(A[static_cast<std::size_t>(piv)], A[static_cast<std::size_t>(col)]);
        std::swap(rhs[static_cast<std::size_t>(piv)], rhs[static_cast<std::size_t>(col)]);
        for (int r = col + 1; r < 3; ++r) {
            const double f = A[static_cast<std::size_t>(r)][static_cast<std::size_t>(col)] /
                             A[static_cast<std::size_t>(col)][static_cast<std::size_t>(col)];
            for (int c = col; c < 3; ++c)
                A[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] -=
                    f * A[static_cast<std::size_t>(col)][static_cast<std::size_t>(c)];
            rhs[static_cast<std::size_t>(r)] -= f * rhs[static_cast<std::size_t>(col)];
        }
    }
    for (int r = 2; r >= 0; --r) {
        double v = rhs[static_cast<std::size_t>(r)];
        for (int c = r + 1; c < 3; ++c)
            v -= A[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] *
                 out[static_cast<std::size_t>(c)];
        out[static_cast<std::size_t>(r)] = v / A[static_cast<std::size_t>(r)][static_cast<std::size_t>(r)];
    }
    return true;
}

Transform2D fit_affine(const std::vector<Vec2>& pa, const std::vector<Vec2>& pb,
                       const std::vector<int>& idx, bool& ok) {
    std::array<std::array<double, 3>, 3> A{};
    std::array<double, 3> bx{}, by{};
    for (int i : idx) {
        const double x = pa[static_cast<std::size_t>(i)].x, y = pa[static_cast<std::size_t>(i)].y;
        const double r[3] = {x, y, 1.0};
        for (int u = 0; u < 3; ++u) {
            for (int v = 0; v < 3; ++v)
                A[static_cast<std::size_t>(u)][static_cast<std::size_t>(v)] += r[u] * r[v];
            bx[static_cast<std::size_t>(u)] += r[u] * pb[static_cast<std::size_t>(i)].x;
            by[static_cast<std::size_t>(u)] += r[u] * pb[static_cast<std::size_t>(i)].y;
        }
    }
    std::array<double, 3> rx{}, ry{};
    ok = solve3(A, bx, rx) && solve3(A, by, ry);
    Transform2D t;
    if (!ok) return t;
    t.m = {rx[0], rx[1], rx[2], ry[0], ry[1], ry[2]};
    ok = !t.near_singular();
    return t;
}

}  // namespace

TransformFamily transform_family_from_string(const std::string& name) {
    if (name == "similarity") return TransformFamily::Similarity;
    if (name == "affine") return TransformFamily::Affine;
    throw Error("unknown transform family '" + name + "' (expected similarity or affine)");
}

Features detect_keypoints(const ImageF& gray, int max_count, const SiftParams& p) {
    require(gray.w >= 16 && gray.h >= 16, "detect_keypoints: image sides must be at least 16");
    require(max_count > 0, "detect_keypoints: max_count must be positive");

    const auto pyr = build_pyramid(gray, p);
    struct Cand {
        double x, y, response, sigma_oct;
        int octave;
    };
    std::vector<Cand> cands;
    for (std::size_t oi = 0; oi < pyr.size(); ++oi) {
        const Octave& oct = pyr[oi];
        const ImageF& d1 = oct.dog[1];
        const double edge_limit =
            (p.edge_ratio + 1.0) * (p.edge_ratio + 1.0) / p.edge_ratio;
        for (int y = 1; y < d1.h - 1; ++y) {
            for (int x = 1; x < d1.w - 1; ++x) {
                const float v = d1.at(x, y);
                if (std::abs(v) < 0.8f * static_cast<float>(p.contrast_thresh)) continue;
                if (!is_extremum(oct.dog, x, y)) continue;

                const double dxx = d1.at(x + 1, y) - 2.0 * v + d1.at(x - 1, y);
                const double dyy = d1.at(x, y + 1) - 2.0 * v + d1.at(x, y - 1);
                const double dxy = (d1.at(x + 1, y + 1) - d1.at(x - 1, y + 1) -
                                    d1.at(x + 1, y - 1) + d1.at(x - 1, y - 1)) /
                                   4.0;
                const double tr = dxx + dyy, det = dxx * dyy - dxy * dxy;
                if (det <= 0.0 || tr * tr / det >= edge_limit) continue;

                const double gx = (d1.at(x + 1, y) - d1.at(x - 1, y)) / 2.0;
                const double gy = (d1.at(x, y + 1) - d1.at(x, y - 1)) / 2.0;
                double ox = 0.0, oy = 0.0;
                if (std::abs(det) > 1e-12) {
                    ox = -(dyy * gx - dxy * gy) / det;
                    oy = -(-dxy * gx + dxx * gy) / det;
                }
                if (std::abs(ox) > 1.0 || std::abs(oy) > 1.0) continue;
                ox = std::clamp(ox, -0.5, 0.5);
                oy = std::clamp(oy, -0.5, 0.5);
                const double refined = v + 0.5 * (gx * ox + gy * oy);
                if (std::abs(refined) < p.contrast_thresh) continue;

                cands.push_back({x + ox, y + oy, std::abs(refined), p.sigma0 * kSqrt2,
                                 static_cast<int>(oi)});
            }
        }
    }

    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
        if (a.response != b.response) return a.response > b.response;
        if (a.octave != b.octave) return a.octave < b.octave;
        if (a.y != b.y) return a.y < b.y;
        return a.x < b.x;
    });

    Features out;
    for (const Cand& c : cands) {
        if (static_cast<int>(out.keypoints.size()) >= max_count) break;
        const Octave& oct = pyr[static_cast<std::size_t>(c.octave)];
        const auto hist = orientation_histogram(oct, c.x, c.y, 1.5 * c.sigma_oct);
        const auto angles = dominant_angles(hist);
        for (double angle : angles) {
            if (static_cast<int>(out.keypoints.size()) >= max_count) break;
            Descriptor d = make_descriptor(oct, c.x, c.y, angle, c.sigma_oct);
            double norm = 0.0;
            for (float fv : d.v) norm += static_cast<double>(fv) * fv;
            if (norm < 0.5) continue;  // window fell outside the image
            Keypoint kp;
            kp.x = c.x * oct.scale_factor;
            kp.y = c.y * oct.scale_factor;
            kp.scale = c.sigma_oct * oct.scale_factor;
            kp.angle = angle;
            kp.response = c.response;
            kp.octave = c.octave;
            if (kp.x < 0 || kp.y < 0 || kp.x > gray.w - 1 || kp.y > gray.h - 1) continue;
            out.keypoints.push_back(kp);
            out.descriptors.push_back(d);
        }
    }
    return out;
}

std::vector<Match> match_descriptors(const Features& fa, const Features& fb, double ratio) {
    require(!fa.keypoints.empty() && !fb.keypoints.empty(),
            "match_descriptors: empty feature set");
    require(ratio > 0.0 && ratio <= 1.0, "match_descriptors: ratio must lie in (0,1]");

    const auto nearest2 = [](const Features& from, std::size_t i, const Features& to) {
        int best = -1;
        double d1 = 1e300, d2 = 1e300;
        for (std::size_t j = 0; j < to.descriptors.size(); ++j) {
            const double d = descriptor_dist2(from.descriptors[i], to.descriptors[j]);
            if (d < d1) {
                d2 = d1;
                d1 = d;
                best = static_cast<int>(j);
            } else if (d < d2) {
                d2 = d;
            }
        }
        return std::tuple<int, double, double>(best, d1, d2);
    };

    std::vector<int> best_b(fa.descriptors.size(), -1);
    std::vector<double> dist_b(fa.descriptors.size(), 0.0);
    for (std::size_t i = 0; i < fa.descriptors.size(); ++i) {
        const auto [j, d1, d2] = nearest2(fa, i, fb);
        if (j < 0) continue;
        const bool pass = d2 > 0.0 ? std::sqrt(d1) <= ratio * std::sqrt(d2) : d1 == 0.0;
        if (!pass) continue;
        best_b[i] = j;
        dist_b[i] = d1;
    }
    std::vector<int> best_a(fb.descriptors.size(), -1);
    for (std::size_t j = 0; j < fb.descriptors.size(); ++j) {
        int best = -1;
        double d1 = 1e300;
        for (std::size_t i = 0; i < fa.descriptors.size(); ++i) {
            const double d = descriptor_dist2(fa.descriptors[i], fb.descriptors[j]);
            if (d < d1) {
                d1 = d;
                best = static_cast<int>(i);
            }
        }
        best_a[j] = best;
    }

    std::vector<Match> out;
    for (std::size_t i = 0; i < best_b.size(); ++i) {
        const int j = best_b[i];
        if (j >= 0 && best_a[static_cast<std::size_t>(j)] == static_cast<int>(i))
            out.push_back({static_cast<int>(i), j, static_cast<float>(std::sqrt(dist_b[i]))});
    }
    return out;
}

RansacResult estimate_transform_ransac(const std::vector<Vec2>& pa, const std::vector<Vec2>& pb,
                                       const RansacParams& rp, std::uint64_t seed) {
    require(pa.size() == pb.size(), "ransac: correspondence lists differ in length");
    const int minimal = rp.family == TransformFamily::Similarity ? 2 : 3;
    require(static_cast<int>(pa.size()) >= minimal,
            "ransac: need at least " + std::to_string(minimal) + " correspondences, got " +
                std::to_string(pa.size()));

    const int n = static_cast<int>(pa.size());

    // Canonical order: sampling happens on sorted correspondences so the
    // result is invariant to permutation of the input lists.
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int i, int j) {
        const auto ti = std::tie(pa[static_cast<std::size_t>(i)].x, pa[static_cast<std::size_t>(i)].y,
                                 pb[static_cast<std::size_t>(i)].x, pb[static_cast<std::size_t>(i)].y);
        const auto tj = std::tie(pa[static_cast<std::size_t>(j)].x, pa[static_cast<std::size_t>(j)].y,
                                 pb[static_cast<std::size_t>(j)].x, pb[static_cast<std::size_t>(j)].y);
        return ti < tj;
    });
    std::uint64_t h = seed ^ 0x5bf03635d1f4b6a1ull;
    for (int i : order) {
        double vals[4] = {pa[static_cast<std::size_t>(i)].x, pa[static_cast<std::size_t>(i)].y,
                          pb[static_cast<std::size_t>(i)].x, pb[static_cast<std::size_t>(i)].y};
        char bytes[32];
        std::memcpy(bytes, vals, 32);
        h = fnv1a64(std::string_view(bytes, 32), h);
    }
    Rng rng(h);

    const double t2 = rp.inlier_thresh_px * rp.inlier_thresh_px;
    const auto count_inliers = [&](const Transform2D& t, std::vector<int>* keep) {
        int cnt = 0;
        for (int i = 0; i < n; ++i) {
            const Vec2 q = t.apply(pa[static_cast<std::size_t>(i)]);
            const double dx = q.x - pb[static_cast<std::size_t>(i)].x;
            const double dy = q.y - pb[static_cast<std::size_t>(i)].y;
            if (dx * dx + dy * dy < t2) {
                ++cnt;
                if (keep) keep->push_back(i);
            }
        }
        return cnt;
    };

    const auto fit = [&](const std::vector<int>& idx, bool& ok) {
        return rp.family == TransformFamily::Similarity ? fit_similarity(pa, pb, idx, ok)
                                                        : fit_affine(pa, pb, idx, ok);
    };

    Transform2D best;
    int best_count = 0;
    bool have_model = false;
    bool saw_degenerate = false;
    long long iters_needed = rp.max_iters;
    std::vector<int> sample(static_cast<std::size_t>(minimal));
    for (long long it = 0; it < iters_needed && it < rp.max_iters; ++it) {
        for (int k = 0; k < minimal; ++k) {
            int pick;
            bool fresh;
            do {
                pick = order[static_cast<std::size_t>(rng.uniform_int(0, n - 1))];
                fresh = true;
                for (int k2 = 0; k2 < k; ++k2)
                    if (sample[static_cast<std::size_t>(k2)] == pick) fresh = false;
            } while (!fresh);
            sample[static_cast<std::size_t>(k)] = pick;
        }
        bool ok = false;
        const Transform2D t = fit(sample, ok);
        if (!ok) {
            saw_degenerate = true;
            continue;
        }
        const int cnt = count_inliers(t, nullptr);
        if (cnt > best_count) {
            best_count = cnt;
            best = t;
            have_model = true;
            const double w = static_cast<double>(cnt) / n;
            const double denom = std::log(1.0 - std::min(0.999999, std::pow(w, minimal)));
            if (denom < 0.0) {
                const long long need =
                    static_cast<long long>(std::ceil(std::log(1.0 - rp.confidence) / denom));
                iters_needed = std::min<long long>(rp.max_iters, std::max<long long>(need, it + 1));
            }
        }
    }
    if (!have_model) {
        throw Error(saw_degenerate
                        ? "ransac: degenerate configuration (correspondences are collinear or coincident)"
                        : "ransac: no model found");
    }

    RansacResult res;
    res.transform = best;
    for (int pass = 0; pass < 2; ++pass) {
        std::vector<int> inl;
        count_inliers(res.transform, &inl);
        if (static_cast<int>(inl.size()) >= minimal) {
            bool ok = false;
            const Transform2D refit = fit(inl, ok);
            if (ok) res.transform = refit;
        }
    }
    res.inliers.clear();
    count_inliers(res.transform, &res.inliers);
    if (res.inliers.empty()) {
        // Refit drifted off every point; fall back to the minimal-sample model.
        res.transform = best;
        count_inliers(res.transform, &res.inliers);
    }
    res.inlier_ratio = static_cast<double>(res.inliers.size()) / n;
    res.low_confidence = res.inlier_ratio < 0.2;
    return res;
}

AlignedCentral warp_central(const Section& central, const Transform2D& central_to_adj,
                            int out_w, int out_h) {
    require(!central_to_adj.near_singular(), "warp: transform is singular");
    const Transform2D inv = central_to_adj.inverse();
    const int sw = central.histology.w, sh = central.histology.h;
    const int G = central.expression.rank() == 3 ? central.expression.shape[0] : 0;
    require(G > 0, "warp: central expression must be [G,H,W]");

    AlignedCentral out;
    out.histology = ImageU8::create(out_w, out_h);
    out.expression = Tensor::zeros({G, out_h, out_w});
    out.mask.assign(static_cast<std::size_t>(out_w) * out_h, 0);
    out.validity.assign(static_cast<std::size_t>(out_w) * out_h, 0);

    const std::size_t splane = static_cast<std::size_t>(sw) * sh;
    const std::size_t oplane = static_cast<std::size_t>(out_w) * out_h;
    for (int y = 0; y < out_h; ++y) {
        for (int x = 0; x < out_w; ++x) {
            const Vec2 s = inv.apply({static_cast<double>(x), static_cast<double>(y)});
            if (s.x < 0.0 || s.y < 0.0 || s.x > sw - 1 || s.y > sh - 1) continue;
            const std::size_t oi = static_cast<std::size_t>(y) * out_w + x;
            out.validity[oi] = 1;

            int x0 = static_cast<int>(s.x), y0 = static_cast<int>(s.y);
            if (x0 > sw - 2) x0 = sw - 2 < 0 ? 0 : sw - 2;
            if (y0 > sh - 2) y0 = sh - 2 < 0 ? 0 : sh - 2;
            const int x1 = std::min(x0 + 1, sw - 1), y1 = std::min(y0 + 1, sh - 1);
            const double fx = s.x - x0, fy = s.y - y0;
            const double w00 = (1 - fx) * (1 - fy), w10 = fx * (1 - fy);
            const double w01 = (1 - fx) * fy, w11 = fx * fy;

            std::uint8_t* hp = out.histology.px(x, y);
            for (int ch = 0; ch < 3; ++ch) {
                const double v = w00 * central.histology.px(x0, y0)[ch] +
                                 w10 * central.histology.px(x1, y0)[ch] +
                                 w01 * central.histology.px(x0, y1)[ch] +
                                 w11 * central.histology.px(x1, y1)[ch];
                hp[ch] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
            }
            for (int g = 0; g < G; ++g) {
                const float* sp = central.expression.ptr() + static_cast<std::size_t>(g) * splane;
                const double v = w00 * sp[static_cast<std::size_t>(y0) * sw + x0] +
                                 w10 * sp[static_cast<std::size_t>(y0) * sw + x1] +
                                 w01 * sp[static_cast<std::size_t>(y1) * sw + x0] +
                                 w11 * sp[static_cast<std::size_t>(y1) * sw + x1];
                out.expression.data[static_cast<std::size_t>(g) * oplane + oi] = static_cast<float>(v);
            }
            const int nx = std::clamp(static_cast<int>(std::lround(s.x)), 0, sw - 1);
            const int ny = std::clamp(static_cast<int>(std::lround(s.y)), 0, sh - 1);
            out.mask[oi] = central.mask[static_cast<std::size_t>(ny) * sw + nx];
        }
    }
    return out;
}

AlignOutcome align_images(const ImageU8& central, const ImageU8& adjacent, const AlignParams& p,
                          std::uint64_t seed) {
    const Features fa = detect_keypoints(to_gray(central), p.max_keypoints, p.sift);
    const Features fb = detect_keypoints(to_gray(adjacent), p.max_keypoints, p.sift);
    AlignOutcome out;
    out.keypoints_central = static_cast<int>(fa.keypoints.size());
    out.keypoints_adjacent = static_cast<int>(fb.keypoints.size());

    const auto matches = match_descriptors(fa, fb, p.match_ratio);
    out.matches = static_cast<int>(matches.size());
    std::vector<Vec2> pa, pb;
    pa.reserve(matches.size());
    pb.reserve(matches.size());
    for (const Match& m : matches) {
        pa.push_back({fa.keypoints[static_cast<std::size_t>(m.a)].x,
                      fa.keypoints[static_cast<std::size_t>(m.a)].y});
        pb.push_back({fb.keypoints[static_cast<std::size_t>(m.b)].x,
                      fb.keypoints[static_cast<std::size_t>(m.b)].y});
    }
    const RansacResult rr = estimate_transform_ransac(pa, pb, p.ransac, seed);
    out.transform = rr.transform;
    out.inliers = static_cast<int>(rr.inliers.size());
    out.low_confidence = rr.low_confidence;
    return out;
}

}  // namespace stdai
