#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "stdai/image.hpp"

namespace stdai {

// All metrics run over the pixels where pop != 0 and accumulate in double.

// 10*log10(peak^2 / MSE); a zero MSE reports +infinity.
double psnr(const ImageF& pred, const ImageF& truth, const std::vector<std::uint8_t>& pop,
            double peak = 1.0);

double mae(const ImageF& pred, const ImageF& truth, const std::vector<std::uint8_t>& pop);

// Pearson correlation; a constant input over the population is an error.
double pcc(const ImageF& pred, const ImageF& truth, const std::vector<std::uint8_t>& pop);

// Mean local SSIM, 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, L=1.
// Window centers must lie in the population with the full window inside the
// image; images smaller than the window are an error.
double ssim(const ImageF& pred, const ImageF& truth, const std::vector<std::uint8_t>& pop);

struct GeneMetrics {
    double psnr_db = 0.0;
    double ssim = 0.0;
    double mae = 0.0;
    double pcc = 0.0;
};

GeneMetrics evaluate_plane(const ImageF& pred, const ImageF& truth,
                           const std::vector<std::uint8_t>& pop);

std::pair<double, double> mean_sd(const std::vector<double>& v);

struct MetricRow {
    std::string section;
    std::string gene;  // gene name, or "MEAN"/"SD" summary rows
    std::string population;
    double psnr_db = 0.0;
    double ssim = 0.0;
    double mae = 0.0;
    double pcc = 0.0;
};

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricRow>& rows);

// |pred - truth| written as a P5 map; 1.0 saturates at 255.
void write_error_map(const std::filesystem::path& path, const ImageF& pred, const ImageF& truth);

struct DensityTable {
    std::vector<double> bin_center;
    std::vector<double> density;           // histogram normalized to unit area
    std::vector<double> smoothed_density;  // Gaussian-kernel smoothed, unit area
};

// Distribution of one gene's values; needs at least two distinct values.
DensityTable expression_density(const std::vector<float>& values, int bins);

void write_density_csv(const std::filesystem::path& path, const DensityTable& t);

}  // namespace stdai
