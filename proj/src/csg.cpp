#include "stdai/csg.hpp"

#include <algorithm>
#include <cmath>

#include "stdai/error.hpp"

namespace stdai {

std::vector<double> observed_confidence(const Tensor& pseudo, const Tensor& measured,
                                        const std::vector<std::uint8_t>& mask) {
    require(pseudo.rank() == 3, "observed_confidence: pseudo must be [G,H,W]");
    require(pseudo.same_shape(measured), "observed_confidence: shape mismatch " +
                                             pseudo.shape_str() + " vs " + measured.shape_str());
    const int G = pseudo.shape[0];
    const std::size_t plane = static_cast<std::size_t>(pseudo.shape[1]) * pseudo.shape[2];
    require(mask.size() == plane, "observed_confidence: mask size mismatch");

    std::vector<double> errs;
    for (std::size_t i = 0; i < plane; ++i) {
        if (!mask[i]) continue;
        double s = 0.0;
        for (int g = 0; g < G; ++g) {
            const std::size_t at = static_cast<std::size_t>(g) * plane + i;
            const double d = static_cast<double>(pseudo.data[at]) - measured.data[at];
            s += d * d;
        }
        errs.push_back(std::sqrt(s));
    }
    require(!errs.empty(), "observed_confidence: no observed pixels");

    const double emax = *std::max_element(errs.begin(), errs.end());
    std::vector<double> w(errs.size(), 1.0);
    if (emax > 0.0)
        for (std::size_t i = 0; i < errs.size(); ++i) w[i] = 1.0 - errs[i] / emax;
    return w;
}

namespace {

// Continuous lattice coordinate of pixel r for nodes at positions pos,
// linear between nodes and clamped to [0, n-1] beyond the ends.
double lattice_coord(const std::vector<int>& pos, int r) {
    const int n = static_cast<int>(pos.size());
    if (n == 1) return 0.0;
    double u;
    if (r <= pos[0]) {
        u = static_cast<double>(r - pos[0]) / (pos[1] - pos[0]);
    } else if (r >= pos[static_cast<std::size_t>(n - 1)]) {
        u = (n - 1) + static_cast<double>(r - pos[static_cast<std::size_t>(n - 1)]) /
                          (pos[static_cast<std::size_t>(n - 1)] - pos[static_cast<std::size_t>(n - 2)]);
    } else {
        int i = 0;
        while (i + 1 < n && pos[static_cast<std::size_t>(i + 1)] <= r) ++i;
        u = i + static_cast<double>(r - pos[static_cast<std::size_t>(i)]) /
                    (pos[static_cast<std::size_t>(i + 1)] - pos[static_cast<std::size_t>(i)]);
    }
    return std::clamp(u, 0.0, static_cast<double>(n - 1));
}

struct CubicAxis {
    int idx[4];
    double w[4];
};

// Catmull-Rom weights at u, neighbours edge-clamped into [0, n-1].
CubicAxis cubic_axis(double u, int n) {
    int i1 = static_cast<int>(std::floor(u));
    if (i1 > n - 2) i1 = n - 2;
    if (i1 < 0) i1 = 0;
    const double t = u - i1;
    CubicAxis ax;
    ax.idx[0] = std::max(0, i1 - 1);
    ax.idx[1] = i1;
    ax.idx[2] = std::min(n - 1, i1 + 1);
    ax.idx[3] = std::min(n - 1, i1 + 2);
    const double t2 = t * t, t3 = t2 * t;
    ax.w[0] = -0.5 * t3 + t2 - 0.5 * t;
    ax.w[1] = 1.5 * t3 - 2.5 * t2 + 1.0;
    ax.w[2] = -1.5 * t3 + 2.0 * t2 + 0.5 * t;
    ax.w[3] = 0.5 * t3 - 0.5 * t2;
    return ax;
}

CubicAxis linear_axis(double u, int n) {
    int i1 = static_cast<int>(std::floor(u));
    if (i1 > n - 2) i1 = n - 2;
    if (i1 < 0) i1 = 0;
    const double t = u - i1;
    CubicAxis ax;
    ax.idx[0] = i1;
    ax.idx[1] = std::min(n - 1, i1 + 1);
    ax.idx[2] = ax.idx[3] = 0;
    ax.w[0] = 1.0 - t;
    ax.w[1] = t;
    ax.w[2] = ax.w[3] = 0.0;
    return ax;
}

}  // namespace

DenseConfidence propagate_confidence(const std::vector<double>& w_obs,
                                     const std::vector<std::uint8_t>& mask, int H, int W,
                                     const GridSpec& grid) {
    const auto rows = grid_rows(H, grid);
    const auto cols = grid_cols(W, grid);
    const int nr = static_cast<int>(rows.size());
    const int nc = static_cast<int>(cols.size());
    require(w_obs.size() == static_cast<std::size_t>(nr) * nc,
            "propagate_confidence: expected " + std::to_string(nr * nc) + " observed scores, got " +
                std::to_string(w_obs.size()));
    require(mask == grid_mask(H, W, grid),
            "propagate_confidence: mask does not match the sampling grid");

    const bool fallback = nr < 4 || nc < 4;
    const int taps = fallback ? 2 : 4;

    std::vector<CubicAxis> row_ax(static_cast<std::size_t>(H));
    for (int r = 0; r < H; ++r) {
        const double u = lattice_coord(rows, r);
        row_ax[static_cast<std::size_t>(r)] = fallback ? linear_axis(u, nr) : cubic_axis(u, nr);
    }
    std::vector<CubicAxis> col_ax(static_cast<std::size_t>(W));
    for (int c = 0; c < W; ++c) {
        const double u = lattice_coord(cols, c);
        col_ax[static_cast<std::size_t>(c)] = fallback ? linear_axis(u, nc) : cubic_axis(u, nc);
    }

    DenseConfidence out;
    out.bilinear_fallback = fallback;
    out.w.assign(static_cast<std::size_t>(H) * W, 0.0f);
    for (int r = 0; r < H; ++r) {
        const CubicAxis& ra = row_ax[static_cast<std::size_t>(r)];
        for (int c = 0; c < W; ++c) {
            const CubicAxis& ca = col_ax[static_cast<std::size_t>(c)];
            double acc = 0.0;
            for (int i = 0; i < taps; ++i) {
                const double wr = ra.w[i];
                const double* lrow = w_obs.data() + static_cast<std::size_t>(ra.idx[i]) * nc;
                for (int j = 0; j < taps; ++j) acc += wr * ca.w[j] * lrow[ca.idx[j]];
            }
            out.w[static_cast<std::size_t>(r) * W + c] =
                static_cast<float>(std::clamp(acc, 0.0, 1.0));
        }
    }
    return out;
}

std::vector<float> finalize_confidence(std::vector<float> w, const std::vector<std::uint8_t>& mask) {
    require(w.size() == mask.size(), "finalize_confidence: size mismatch");
    require(!w.empty(), "finalize_confidence: empty map");
    std::size_t observed = 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        if (mask[i]) {
            w[i] = 1.0f;
            ++observed;
        }
    }
    require(observed > 0, "finalize_confidence: no observed pixels");
    double sum = 0.0;
    for (float v : w) {
        require(v >= 0.0f, "finalize_confidence: negative confidence value");
        sum += v;
    }
    const double mean = sum / static_cast<double>(w.size());
    // mean >= observed/N > 0 after the hard constraint
    for (float& v : w) v = static_cast<float>(v / mean);
    return w;
}

}  // namespace stdai
