#include "stdai/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "stdai/error.hpp"
#include "stdai/fmt.hpp"

namespace stdai {

namespace {

void check_pair(const ImageF& pred, const ImageF& truth, const std::vector<std::uint8_t>& pop,
                const char* what) {
    require(pred.w > 0 && pred.h > 0, std::string(what) + ": empty image");
    require(pred.w == truth.w && pred.h == truth.h,
            std::string(what) + ": prediction and reference dims differ");
    require(pop.size() == static_cast<std::size_t>(pred.w) * pred.h,
            std::string(what) + ": population mask size mismatch");
}

std::size_t pop_count(const std::vector<std::uint8_t>& pop) {
    std::size_t n = 0;
    for (std::uint8_t m : pop) n += m ? 1 : 0;
    return n;
}

}  // namespace

double psnr(const ImageF& pred, const ImageF& truth, const std::vector<std::uint8_t>& pop,
            double peak) {
    check_pair(pred, truth, pop, "psnr");
    require(peak > 0.0, "psnr: peak must be positive");
    const std::size_t n = pop_count(pop);
    require(n > 0, "psnr: empty pixel population");
    double acc = 0.0;
    for (std::size_t i = 0; i < pop.size(); ++i) {
        if (!pop[i]) continue;
        const double d = static_cast<double>(pred.data[i]) - truth.data[i];
        acc += d * d;
    }
    const double mse = acc / static_cast<double>(n);
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

double mae(const ImageF& pred, const ImageF& truth, const std::vector<std::uint8_t>& pop) {
    check_pair(pred, truth, pop, "mae");
    const std::size_t n = pop_count(pop);
    require(n > 0, "mae: empty pixel population");
    double acc = 0.0;
    for (std::size_t i = 0; i < pop.size(); ++i)
        if (pop[i]) acc += std::abs(static_cast<double>(pred.data[i]) - truth.data[i]);
    return acc / static_cast<double>(n);
}

double pcc(const ImageF& pred, const ImageF& truth, const std::vector<std::uint8_t>& pop) {
    check_pair(pred, truth, pop, "pcc");
    const std::size_t n = pop_count(pop);
    require(n > 1, "pcc: needs at least two pixels in the population");
    double sx = 0.0, sy = 0.0;
    for (std::size_t i = 0; i < pop.size(); ++i) {
        if (!pop[i]) continue;
        sx += pred.data[i];
        sy += truth.data[i];
    }
    const double mx = sx / static_cast<double>(n);
    const double my = sy / static_cast<double>(n);
    double vxx = 0.0, vyy = 0.0, vxy = 0.0;
    for (std::size_t i = 0; i < pop.size(); ++i) {
        if (!pop[i]) continue;
        const double dx = pred.data[i] - mx;
        const double dy = truth.data[i] - my;
        vxx += dx * dx;
        vyy += dy * dy;
        vxy += dx * dy;
    }
    require(vxx > 0.0, "pcc: prediction is constant over the evaluated pixels");
    require(vyy > 0.0, "pcc: reference is constant over the evaluated pixels");
    return vxy / std::sqrt(vxx * vyy);
}

double ssim(const ImageF& pred, const ImageF& truth, const std::vector<std::uint8_t>& pop) {
    check_pair(pred, truth, pop, "ssim");
    constexpr int kWin = 11;
    constexpr int kRad = kWin / 2;
    require(pred.w >= kWin && pred.h >= kWin,
            "ssim: image " + std::to_string(pred.w) + "x" + std::to_string(pred.h) +
                " is smaller than the " + std::to_string(kWin) + "x" + std::to_string(kWin) +
                " window");

    double kernel[kWin][kWin];
    {
        const double sigma = 1.5;
        double sum = 0.0;
        for (int y = 0; y < kWin; ++y)
            for (int x = 0; x < kWin; ++x) {
                const double dx = x - kRad, dy = y - kRad;
                kernel[y][x] = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
                sum += kernel[y][x];
            }
        for (int y = 0; y < kWin; ++y)
            for (int x = 0; x < kWin; ++x) kernel[y][x] /= sum;
    }

    constexpr double kL = 1.0;
    const double c1 = (0.01 * kL) * (0.01 * kL);
    const double c2 = (0.03 * kL) * (0.03 * kL);

    double acc = 0.0;
    std::size_t n = 0;
    for (int cy = kRad; cy < pred.h - kRad; ++cy)
        for (int cx = kRad; cx < pred.w - kRad; ++cx) {
            if (!pop[static_cast<std::size_t>(cy) * pred.w + cx]) continue;
            double mx = 0.0, my = 0.0, xx = 0.0, yy = 0.0, xy = 0.0;
            for (int ky = 0; ky < kWin; ++ky)
                for (int kx = 0; kx < kWin; ++kx) {
                    const double w = kernel[ky][kx];
                    const double a = pred.at(cx + kx - kRad, cy + ky - kRad);
                    const double b = truth.at(cx + kx - kRad, cy + ky - kRad);
                    mx += w * a;
                    my += w * b;
                    xx += w * a * a;
                    yy += w * b * b;
                    xy += w * a * b;
                }
            const double vx = xx - mx * mx;
            const double vy = yy - my * my;
            const double cov = xy - mx * my;
            acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) /
                   ((mx * mx + my * my + c1) * (vx + vy + c2));
            ++n;
        }
    require(n > 0, "ssim: no window centers in the pixel population");
    return acc / static_cast<double>(n);
}

GeneMetrics evaluate_plane(const ImageF& pred, const ImageF& truth,
                           const std::vector<std::uint8_t>& pop) {
    GeneMetrics g;
    g.psnr_db = psnr(pred, truth, pop);
    g.ssim = ssim(pred, truth, pop);
    g.mae = mae(pred, truth, pop);
    g.pcc = pcc(pred, truth, pop);
    return g;
}

std::pair<double, double> mean_sd(const std::vector<double>& v) {
    require(!v.empty(), "mean_sd: empty vector");
    double s = 0.0;
    for (double x : v) s += x;
    const double m = s / static_cast<double>(v.size());
    double acc = 0.0;
    for (double x : v) acc += (x - m) * (x - m);
    // sample SD over genes; a single gene reports 0
    const double sd = v.size() > 1 ? std::sqrt(acc / static_cast<double>(v.size() - 1)) : 0.0;
    return {m, sd};
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricRow>& rows) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    require(os.good(), "cannot open '" + path.string() + "' for writing");
    os << "section,gene,population,psnr_db,ssim,mae,pcc\n";
    for (const MetricRow& r : rows)
        os << r.section << ',' << r.gene << ',' << r.population << ',' << num_str(r.psnr_db) << ','
           << num_str(r.ssim) << ',' << num_str(r.mae) << ',' << num_str(r.pcc) << '\n';
    os.flush();
    require(os.good(), "failed writing '" + path.string() + "'");
}

void write_error_map(const std::filesystem::path& path, const ImageF& pred, const ImageF& truth) {
    require(pred.w == truth.w && pred.h == truth.h, "error map: dims differ");
    ImageF diff = ImageF::create(pred.w, pred.h);
    for (std::size_t i = 0; i < diff.data.size(); ++i)
        diff.data[i] = std::abs(pred.data[i] - truth.data[i]);
    write_pgm(path, diff);
}

DensityTable expression_density(const std::vector<float>& values, int bins) {
    require(bins > 0, "expression_density: bin count must be positive");
    require(values.size() >= 2, "expression_density: needs at least two values");
    const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
    const double lo = *lo_it, hi = *hi_it;
    require(hi > lo, "expression_density: all values identical");

    const double width = (hi - lo) / bins;
    DensityTable t;
    t.bin_center.resize(static_cast<std::size_t>(bins));
    t.density.assign(static_cast<std::size_t>(bins), 0.0);
    for (int b = 0; b < bins; ++b)
        t.bin_center[static_cast<std::size_t>(b)] = lo + (b + 0.5) * width;
    for (float v : values) {
        int b = static_cast<int>((static_cast<double>(v) - lo) / width);
        if (b >= bins) b = bins - 1;
        if (b < 0) b = 0;
        t.density[static_cast<std::size_t>(b)] += 1.0;
    }
    const double norm = 1.0 / (static_cast<double>(values.size()) * width);
    for (double& d : t.density) d *= norm;

    // Discrete Gaussian smoothing of the histogram, then re-normalized so the
    // smoothed curve also integrates to one.
    const double sigma = 1.5;  // bins
    const int rad = 5;
    t.smoothed_density.assign(static_cast<std::size_t>(bins), 0.0);
    for (int b = 0; b < bins; ++b) {
        double acc = 0.0, wsum = 0.0;
        for (int k = -rad; k <= rad; ++k) {
            const int j = b + k;
            if (j < 0 || j >= bins) continue;
            const double w = std::exp(-(k * k) / (2.0 * sigma * sigma));
            acc += w * t.density[static_cast<std::size_t>(j)];
            wsum += w;
        }
        t.smoothed_density[static_cast<std::size_t>(b)] = acc / wsum;
    }
    double area = 0.0;
    for (double d : t.smoothed_density) area += d * width;
    if (area > 0.0)
        for (double& d : t.smoothed_density) d /= area;
    return t;
}

void write_density_csv(const std::filesystem::path& path, const DensityTable& t) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    require(os.good(), "cannot open '" + path.string() + "' for writing");
    os << "bin_center,density,smoothed_density\n";
    for (std::size_t i = 0; i < t.bin_center.size(); ++i)
        os << num_str(t.bin_center[i]) << ',' << num_str(t.density[i]) << ','
           << num_str(t.smoothed_density[i]) << '\n';
    os.flush();
    require(os.good(), "failed writing '" + path.string() + "'");
}

}  // namespace stdai
