#pragma once

#include <cstdint>
#include <vector>

#include "stdai/sampling.hpp"
#include "stdai/tensor.hpp"

namespace stdai {

// Per observed pixel, in row-major scan order: the Euclidean distance
// between the pseudo prediction and the measurement over the gene vector,
// mapped to a score 1 - e / max_e. When every error is zero the natural
// limit is taken and all scores are 1.
std::vector<double> observed_confidence(const Tensor& pseudo, const Tensor& measured,
                                        const std::vector<std::uint8_t>& mask);

struct DenseConfidence {
    std::vector<float> w;  // H*W, clamped to [0,1]
    bool bilinear_fallback = false;
};

// Arranges the observed scores on the sampling lattice and upsamples them
// to H x W with Catmull-Rom bicubic interpolation, edge-clamped, then
// clamps to [0,1]. A lattice smaller than 4x4 falls back to bilinear and
// flags it. The mask must be exactly the lattice produced by `grid`.
DenseConfidence propagate_confidence(const std::vector<double>& w_obs,
                                     const std::vector<std::uint8_t>& mask, int H, int W,
                                     const GridSpec& grid);

// Sets w = 1 at observed pixels first, then rescales everything to unit
// mean, in that order; observed pixels therefore end at 1/mean.
std::vector<float> finalize_confidence(std::vector<float> w, const std::vector<std::uint8_t>& mask);

}  // namespace stdai
