#pragma once

#include <cstdint>

#include "stdai/bundle.hpp"

namespace stdai {

// Synthetic sample with known dense expression and known inter-section
// geometry. Histology is rendered from Gaussian cell-cluster blobs over a
// textured background; expression responds to blob class, so it is
// predictable from the image. Adjacent sections view the same scene
// through a similarity transform with jittered blobs and a per-gene
// monotone intensity shift (gain * v^gamma + bias).
struct PhantomConfig {
    int width = 64;
    int height = 64;
    int genes = 4;
    int classes = 3;
    int blobs = 14;
    int adjacent = 2;

    double blob_sigma_lo = 2.5;
    double blob_sigma_hi = 5.5;

    // Pose draw bounds for each adjacent section.
    double rotation_deg = 5.0;
    double translation_px = 4.0;
    double scale_lo = 1.0, scale_hi = 1.0;

    double blob_jitter_px = 0.5;

    // Per-gene domain shift draw bounds.
    double gain_lo = 0.85, gain_hi = 1.3;
    double bias_lo = 0.0, bias_hi = 0.05;
    double gamma_lo = 0.95, gamma_hi = 1.05;

    double noise = 0.03;       // expression texture-noise amplitude
    double bg_texture = 0.3;   // histology background texture strength

    std::uint64_t seed = 0;
};

// Identity poses, zero jitter, identity shift: adjacent sections come out
// bit-identical to the central one.
PhantomConfig identity_phantom(PhantomConfig cfg);

Sample synth_phantom(const PhantomConfig& cfg);

// Deterministic lattice value noise in [0,1); pure function of its inputs.
double value_noise(double x, double y, double cell, std::uint64_t key);

}  // namespace stdai
