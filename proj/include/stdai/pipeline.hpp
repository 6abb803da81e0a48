#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "stdai/align.hpp"
#include "stdai/autodiff.hpp"
#include "stdai/backbone.hpp"
#include "stdai/bundle.hpp"
#include "stdai/sampling.hpp"
#include "stdai/tensor.hpp"

namespace stdai {

struct TrainConfig {
    int epochs_pretrain = 500;
    int epochs_fmdr = 1000;
    double lr0 = 1e-3;
    bool literal_eq5 = false;  // pseudo labels as targets even at measured pixels
};

// Mean squared gene-vector error over the pixels where valid != 0.
int loss_central_node(Tape& tape, int pred, const Tensor& target,
                      const std::vector<std::uint8_t>& valid);
double loss_central(const Tensor& pred, const Tensor& target,
                    const std::vector<std::uint8_t>& valid);

// Confidence-weighted squared error averaged over every pixel.
int loss_adjacent_node(Tape& tape, int pred, const Tensor& target,
                       const std::vector<float>& weights);
double loss_adjacent(const Tensor& pred, const Tensor& target, const std::vector<float>& weights);

// One section prepared for the network: packed input planes, injected
// histology features, normalized targets, and the loss support.
struct SectionView {
    Tensor input;     // [3+G+1,H,W]
    Tensor features;  // [C_e,H/2^(d-1),W/2^(d-1)]
    Tensor target;    // [G,H,W], normalized units
    std::vector<std::uint8_t> observed;   // pixels fed to the input planes
    std::vector<std::uint8_t> loss_mask;  // pixels the central-style loss runs over
};

// Warped central section, re-sampled on the same grid the adjacents use.
SectionView central_view(const AlignedCentral& warped, const GridSpec& grid,
                         const BackboneConfig& cfg, const NormStats& stats);
SectionView adjacent_view(const Section& adj, const BackboneConfig& cfg, const NormStats& stats);

struct TrainLogRow {
    int epoch = 0;
    double loss_central = 0.0;
    double loss_adjacent = 0.0;
    double lr = 0.0;
};

struct TrainResult {
    std::vector<TrainLogRow> log;
    bool diverged = false;
};

void write_train_log(const std::filesystem::path& path, const std::vector<TrainLogRow>& rows);

// Self-supervised imputation fit on the masked central section. On a
// non-finite loss the loop aborts and the model keeps the parameters of the
// last finite epoch.
TrainResult pretrain_pseudo_network(Model& model, const SectionView& central, int epochs,
                                    double lr0);

Tensor generate_pseudo_labels(const Model& theta0, const SectionView& adjacent);

// Per-pixel targets for the adjacent branch: measurements where available,
// pseudo labels elsewhere. literal_eq5 keeps pseudo labels everywhere.
Tensor adjacent_targets(const Tensor& pseudo, const Tensor& measured_norm,
                        const std::vector<std::uint8_t>& mask, bool literal_eq5);

struct FmdrResult {
    Model theta1;  // central branch: shared frozen backbone + own head
    Model theta2;  // adjacent branch: + recalibration layers when enabled
    TrainResult train;
};

// Dual-branch fine-tune against the joint loss. Backbone tensors are frozen
// structurally and verified bit-identical to theta0 afterwards.
FmdrResult fmdr_refine(const Model& theta0, const SectionView& central,
                       const SectionView& adjacent, const Tensor& adj_target,
                       const std::vector<float>& weights, int epochs, double lr0, bool use_pdl);

// Measured values override predictions wherever the mask is set; bit-exact.
Tensor dco(const Tensor& pred, const Tensor& measured, const std::vector<std::uint8_t>& mask);

struct VolumePrediction {
    std::vector<int> section_indices;  // ascending
    std::vector<std::string> provenance;
    std::vector<Tensor> slices;  // [G,H,W], raw units
};

VolumePrediction assemble_volume(const Sample& sample, const std::map<int, Tensor>& adjacent_finals,
                                 const std::string& adjacent_provenance);

void write_volume(const std::filesystem::path& dir, const Sample& sample,
                  const VolumePrediction& vol);

}  // namespace stdai
