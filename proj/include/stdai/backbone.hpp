#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "stdai/autodiff.hpp"
#include "stdai/image.hpp"
#include "stdai/rng.hpp"
#include "stdai/tensor.hpp"

namespace stdai {

struct BackboneConfig {
    int genes = 4;
    int base_width = 16;
    int depth = 3;  // number of scales; depth-1 poolings
    int feature_channels = 8;
    std::string extractor = "handcrafted";  // or a path to a precomputed feature file

    int in_channels() const { return 3 + genes + 1; }
    int pool_factor() const { return 1 << (depth - 1); }
    void validate() const;
};

struct HistologyFeatures {
    Tensor map;  // [C_e, H/2^(depth-1), W/2^(depth-1)]
    std::string provenance;  // "handcrafted" | "loaded-from-file"
};

// Handcrafted default: 3-scale blurred luminance, gradient magnitude at the
// same scales, and two color-opponent channels, block-averaged down to the
// injection resolution. A file extractor reads raw float32 and checks dims.
HistologyFeatures extract_histology_features(const ImageU8& histology, const BackboneConfig& cfg);

// [3+G+1, H, W]: RGB in [0,1], masked expression channels, then the mask.
Tensor pack_input(const ImageU8& histology, const Tensor& sparse_expr,
                  const std::vector<std::uint8_t>& mask);

using TrainablePred = std::function<bool(const std::string&)>;

enum class TrainStage { pretrain, fmdr_central, fmdr_adjacent };
TrainStage train_stage_from_string(const std::string& s);
TrainablePred trainable_subset(TrainStage stage);

struct ForwardResult {
    int output = -1;      // [G,H,W]
    int head_input = -1;  // activation feeding the final 1x1 conv
    std::vector<std::pair<std::string, int>> param_nodes;  // declaration order
};

class Model {
public:
    Model() = default;

    // He-initialized convolutions, zero biases, no recalibration layers yet.
    static Model init(const BackboneConfig& cfg, Rng& rng);

    // Appends zero-initialized per-channel (a, b) pairs after every block.
    void insert_pdls();
    bool has_pdl() const { return has_pdl_; }
    const std::vector<std::string>& pdl_sites() const { return pdl_sites_; }

    const BackboneConfig& config() const { return cfg_; }

    std::size_t tensor_count() const { return names_.size(); }
    const std::string& name_at(std::size_t i) const { return names_[i]; }
    Tensor& tensor_at(std::size_t i) { return values_[i]; }
    const Tensor& tensor_at(std::size_t i) const { return values_[i]; }
    bool has_tensor(const std::string& name) const;
    Tensor& tensor(const std::string& name);
    const Tensor& tensor(const std::string& name) const;

    long long scalar_count() const;
    long long scalar_count_matching(const TrainablePred& pred) const;

    ForwardResult forward(Tape& tape, const Tensor& input, const Tensor& features,
                          const TrainablePred& trainable, bool apply_pdl) const;

    // Gradient-free convenience evaluations.
    Tensor eval(const Tensor& input, const Tensor& features, bool apply_pdl) const;
    Tensor trunk_eval(const Tensor& input, const Tensor& features, bool apply_pdl) const;

    // Rebuilds only the terminal convolution on a cached trunk activation.
    ForwardResult head_forward(Tape& tape, const Tensor& trunk,
                               const TrainablePred& trainable) const;

private:
    BackboneConfig cfg_;
    std::vector<std::string> names_;
    std::vector<Tensor> values_;
    bool has_pdl_ = false;
    std::vector<std::string> pdl_sites_;

    int find(const std::string& name) const;

    friend Model load_model(const std::filesystem::path& path);
};

void save_model(const std::filesystem::path& path, const Model& model);
Model load_model(const std::filesystem::path& path);

}  // namespace stdai
