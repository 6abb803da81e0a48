#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "stdai/image.hpp"
#include "stdai/tensor.hpp"
#include "stdai/transform.hpp"

namespace stdai {

struct Section {
    int section_index = 0;
    std::string role;  // "central" | "adjacent"
    ImageU8 histology;
    Tensor expression;               // [G,H,W], raw units
    std::vector<std::uint8_t> mask;  // H*W, 1 = measured

    // Estimated central->this transform, persisted by the align stage.
    bool has_transform = false;
    Transform2D transform;

    // Evaluation-only sidecars written by the phantom generator. The
    // training pipeline never reads these.
    bool has_truth = false;
    Tensor truth;  // [G,H,W] dense ground truth
    bool has_truth_transform = false;
    Transform2D truth_transform;  // true central->this mapping
};

struct Sample {
    std::string sample_id;
    int width = 0, height = 0;
    int central_index = 0;  // section_index of the central section
    std::vector<std::string> genes;
    std::vector<double> stat_min, stat_max;  // per-gene raw range on the central section
    std::vector<Section> sections;

    int gene_count() const { return static_cast<int>(genes.size()); }
    std::size_t central_pos() const;            // position in sections
    std::vector<std::size_t> adjacent_pos() const;
    void validate() const;
};

void write_bundle(const std::filesystem::path& dir, const Sample& sample);
Sample read_bundle(const std::filesystem::path& dir);

// Raw little-endian float32 array I/O used for expression payloads.
void write_f32(const std::filesystem::path& path, const float* data, std::size_t count);
std::vector<float> read_f32(const std::filesystem::path& path, std::size_t expected_count);

struct NormStats {
    std::vector<double> min, max;  // per gene
};

// Per-gene range of the central section's raw expression. A gene that is
// constant on the central section has no usable range and is an error.
NormStats compute_central_stats(const Sample& sample);

Tensor normalize_expression(const Tensor& expr, const NormStats& s);
Tensor denormalize_expression(const Tensor& expr, const NormStats& s);

}  // namespace stdai
