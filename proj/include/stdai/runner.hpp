#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "stdai/align.hpp"
#include "stdai/backbone.hpp"
#include "stdai/bundle.hpp"
#include "stdai/error.hpp"
#include "stdai/pipeline.hpp"
#include "stdai/sampling.hpp"

namespace stdai {

// Bad flags, bad config files, unusable bundles, artifact collisions.
struct ConfigError : Error {
    using Error::Error;
};

// A pipeline stage blew up; the stage's .partial directory is left behind.
struct StageError : Error {
    StageError(const std::string& stage, const std::string& msg)
        : Error("stage '" + stage + "' failed: " + msg), stage_name(stage) {}
    std::string stage_name;
};

struct Toggles {
    bool csa = true;
    bool fmdr = true;
    bool pdl = true;
    bool csg = true;
    bool dco = true;
};

struct RunConfig {
    Toggles toggles;
    TrainConfig train;
    BackboneConfig backbone;  // genes is filled from the bundle, not the file
    GridSpec grid;
    AlignParams align;
    std::string population = "unobserved";  // metrics population: unobserved | all
    int density_bins = 64;
};

RunConfig parse_run_config(const std::filesystem::path& path);

// "csa,fmdr" enables exactly the named toggles; "none" disables all five.
void apply_toggle_list(RunConfig& cfg, const std::string& csv);

// Canonical JSON of the effective config (sorted keys) and its 64-bit hash
// rendered as 16 hex digits. Artifact paths derive from this.
std::string canonical_config(const RunConfig& cfg);
std::string config_hash(const RunConfig& cfg);

std::filesystem::path artifact_dir(const std::filesystem::path& out_root,
                                   const std::string& sample_id, const RunConfig& cfg,
                                   std::uint64_t seed);

struct PreparedRun {
    Sample sample;  // adjacent sections sparsified onto the configured grid
    RunConfig cfg;
    std::uint64_t seed = 0;
    std::filesystem::path dir;
    NormStats stats;
    std::vector<std::size_t> adj;         // positions of adjacent sections
    std::vector<Transform2D> transforms;  // central->adjacent, per adj entry
    std::vector<bool> align_low_confidence;
};

// Reads and sparsifies the bundle, resolves transforms (persisted manifest
// entries, a cached align artifact, or a fresh estimate), claims the artifact
// directory, and records config.json.
PreparedRun prepare_run(const std::filesystem::path& bundle_dir, const RunConfig& cfg,
                        std::uint64_t seed, const std::filesystem::path& out_root);

std::vector<Model> stage_pretrain(const PreparedRun& pr);

struct RefineOutput {
    std::vector<Model> finals;  // model used to infer each adjacent section
    std::vector<Tensor> pseudo;
};

RefineOutput stage_refine(const PreparedRun& pr, const std::vector<Model>* theta0);

VolumePrediction stage_infer(const PreparedRun& pr, const RefineOutput* refined);

struct RunSummary {
    bool has_metrics = false;
    double psnr_db = 0.0;
    double ssim = 0.0;
    double mae = 0.0;
    double pcc = 0.0;
    std::filesystem::path dir;  // artifact directory of the run
};

RunSummary stage_eval(const PreparedRun& pr, const VolumePrediction* volume);

RunSummary run_pipeline(const std::filesystem::path& bundle_dir, const RunConfig& cfg,
                        std::uint64_t seed, const std::filesystem::path& out_root);

struct AblationRow {
    std::string label;
    Toggles toggles;
    RunSummary summary;
};

// The seven staged configurations, from nothing enabled to the full method.
std::vector<AblationRow> ablation_plan(const RunConfig& base);

std::vector<AblationRow> run_ablation(const std::filesystem::path& bundle_dir,
                                      const RunConfig& base, std::uint64_t seed,
                                      const std::filesystem::path& out_root, int threads);

void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows);

// STDAI_THREADS, default 1; never below 1.
int thread_cap();

}  // namespace stdai
