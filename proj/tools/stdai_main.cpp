#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>

#include "CLI11.hpp"
#include "stdai/error.hpp"
#include "stdai/fmt.hpp"
#include "stdai/phantom.hpp"
#include "stdai/runner.hpp"

namespace {

using namespace stdai;

struct CommonOpts {
    std::string bundle;
    std::string config;
    std::string toggles;
    std::string out = "out";
    std::uint64_t seed = 0;
};

void add_common(CLI::App* sub, CommonOpts& o) {
    sub->add_option("--bundle", o.bundle, "sample bundle directory")
        ->required()
        ->check(CLI::ExistingDirectory);
    sub->add_option("--config", o.config, "JSON run config")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "run seed");
    sub->add_option("--out", o.out, "artifact root directory");
    sub->add_option("--toggle", o.toggles,
                    "comma list of stages to enable (csa,fmdr,pdl,csg,dco), or 'none'");
}

RunConfig resolve_config(const CommonOpts& o) {
    RunConfig cfg = o.config.empty() ? RunConfig{} : parse_run_config(o.config);
    if (!o.toggles.empty()) apply_toggle_list(cfg, o.toggles);
    return cfg;
}

std::pair<int, int> parse_offset(const std::string& s) {
    const auto comma = s.find(',');
    if (comma == std::string::npos || comma == 0 || comma + 1 >= s.size())
        throw ConfigError("--offset expects 'row,col'");
    try {
        return {std::stoi(s.substr(0, comma)), std::stoi(s.substr(comma + 1))};
    } catch (const std::exception&) {
        throw ConfigError("--offset expects 'row,col'");
    }
}

void print_summary(const RunSummary& s) {
    if (!s.has_metrics) return;
    std::printf("psnr_db=%s ssim=%s mae=%s pcc=%s\n", num_str(s.psnr_db).c_str(),
                num_str(s.ssim).c_str(), num_str(s.mae).c_str(), num_str(s.pcc).c_str());
}

int run_cli(int argc, char** argv) {
    CLI::App app{"single-shot 2.5D expression imputation toolkit"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic sample bundle");
    PhantomConfig pc;
    std::string synth_out;
    bool synth_identity = false;
    synth->add_option("--out", synth_out, "bundle directory to create")->required();
    synth->add_option("--seed", pc.seed, "generator seed");
    synth->add_option("--width", pc.width, "section width in pixels");
    synth->add_option("--height", pc.height, "section height in pixels");
    synth->add_option("--genes", pc.genes, "gene count");
    synth->add_option("--adjacent", pc.adjacent, "adjacent section count");
    synth->add_option("--classes", pc.classes, "cell cluster classes");
    synth->add_option("--blobs", pc.blobs, "cell clusters per section");
    synth->add_option("--noise", pc.noise, "expression noise amplitude");
    synth->add_option("--rotation", pc.rotation_deg, "max |rotation| between sections, degrees");
    synth->add_option("--translation", pc.translation_px, "max |translation| between sections, px");
    synth->add_flag("--identity", synth_identity,
                    "identity poses and zero shift: adjacent sections equal the central one");
    synth->callback([&] {
        if (std::filesystem::exists(std::filesystem::path(synth_out) / "manifest.json"))
            throw ConfigError("'" + synth_out + "' already holds a bundle; refusing to overwrite");
        const Sample s = synth_phantom(synth_identity ? identity_phantom(pc) : pc);
        write_bundle(synth_out, s);
        std::printf("wrote bundle '%s' (%dx%d, %d genes, %d adjacent)\n", synth_out.c_str(),
                    s.width, s.height, s.gene_count(), static_cast<int>(s.adjacent_pos().size()));
    });

    // sample
    auto* sample_cmd = app.add_subcommand("sample", "sparsify adjacent sections onto a grid");
    std::string sample_bundle, sample_offset = "0,0";
    int sample_spacing = 2;
    sample_cmd->add_option("--bundle", sample_bundle, "sample bundle directory")
        ->required()
        ->check(CLI::ExistingDirectory);
    sample_cmd->add_option("--spacing", sample_spacing, "grid spacing in pixels");
    sample_cmd->add_option("--offset", sample_offset, "grid offset as 'row,col'");
    sample_cmd->callback([&] {
        GridSpec g;
        g.stride = sample_spacing;
        std::tie(g.off_r, g.off_c) = parse_offset(sample_offset);
        if (g.stride < 1) throw ConfigError("--spacing must be at least 1");
        if (g.off_r < 0 || g.off_r >= g.stride || g.off_c < 0 || g.off_c >= g.stride)
            throw ConfigError("--offset must lie in [0, spacing)");
        Sample s = read_bundle(sample_bundle);
        const auto gm = grid_mask(s.height, s.width, g);
        int touched = 0;
        for (Section& sec : s.sections) {
            if (sec.role != "adjacent") continue;
            for (std::uint8_t v : sec.mask)
                if (!v)
                    throw ConfigError("section " + std::to_string(sec.section_index) +
                                      " is already sampled; regenerate the bundle to resample");
            sec.mask = gm;
            apply_mask(sec.expression, sec.mask);
            ++touched;
        }
        if (touched == 0) throw ConfigError("bundle has no adjacent sections");
        write_bundle(sample_bundle, s);
        std::printf("sampled %d adjacent section(s) at spacing %d offset %d,%d (%zu of %zu sites kept)\n",
                    touched, g.stride, g.off_r, g.off_c, observed_count(gm),
                    static_cast<std::size_t>(s.height) * s.width);
    });

    // align
    auto* align_cmd = app.add_subcommand("align", "estimate and persist one pair transform");
    std::string align_bundle, align_family = "similarity";
    std::vector<int> align_pair;
    std::uint64_t align_seed_opt = 0;
    align_cmd->add_option("--bundle", align_bundle, "sample bundle directory")
        ->required()
        ->check(CLI::ExistingDirectory);
    align_cmd->add_option("--pair", align_pair, "central and adjacent section indices")
        ->expected(2)
        ->required();
    align_cmd->add_option("--family", align_family, "similarity or affine");
    align_cmd->add_option("--seed", align_seed_opt, "estimator seed");
    align_cmd->callback([&] {
        Sample s = read_bundle(align_bundle);
        const Section& central = s.sections[s.central_pos()];
        if (align_pair[0] != central.section_index)
            throw ConfigError("--pair expects the central section first (central is " +
                              std::to_string(central.section_index) + ")");
        Section* adj = nullptr;
        for (Section& sec : s.sections)
            if (sec.role == "adjacent" && sec.section_index == align_pair[1]) adj = &sec;
        if (adj == nullptr)
            throw ConfigError("no adjacent section with index " + std::to_string(align_pair[1]));
        AlignParams p;
        p.ransac.family = transform_family_from_string(align_family);
        AlignOutcome out;
        try {
            out = align_images(central.histology, adj->histology, p, align_seed_opt);
        } catch (const ConfigError&) {
            throw;
        } catch (const Error& e) {
            throw StageError("align", e.what());
        }
        adj->transform = out.transform;
        adj->has_transform = true;
        write_bundle(align_bundle, s);
        std::printf("aligned %d -> %d: %d/%d matches inliers%s\n", align_pair[0], align_pair[1],
                    out.inliers, out.matches, out.low_confidence ? " (low confidence)" : "");
        std::printf("transform:");
        for (double v : out.transform.m) std::printf(" %s", num_str(v).c_str());
        std::printf("\n");
    });

    // stage commands and full runs share the same option set
    CommonOpts pre_o, ref_o, inf_o, evl_o, run_o, abl_o;
    auto* pretrain_cmd = app.add_subcommand("pretrain", "train the pseudo-expression network");
    add_common(pretrain_cmd, pre_o);
    pretrain_cmd->callback([&] {
        const PreparedRun pr = prepare_run(pre_o.bundle, resolve_config(pre_o), pre_o.seed, pre_o.out);
        stage_pretrain(pr);
        std::printf("wrote %s\n", (pr.dir / "pretrain").string().c_str());
    });

    auto* refine_cmd = app.add_subcommand("refine", "domain-adaptive dual-branch refinement");
    add_common(refine_cmd, ref_o);
    refine_cmd->callback([&] {
        const PreparedRun pr = prepare_run(ref_o.bundle, resolve_config(ref_o), ref_o.seed, ref_o.out);
        stage_refine(pr, nullptr);
        std::printf("wrote %s\n", (pr.dir / "refine").string().c_str());
    });

    auto* infer_cmd = app.add_subcommand("infer", "predict dense expression for adjacent sections");
    add_common(infer_cmd, inf_o);
    infer_cmd->callback([&] {
        const PreparedRun pr = prepare_run(inf_o.bundle, resolve_config(inf_o), inf_o.seed, inf_o.out);
        stage_infer(pr, nullptr);
        std::printf("wrote %s\n", (pr.dir / "infer").string().c_str());
    });

    auto* eval_cmd = app.add_subcommand("eval", "score predictions against ground truth");
    add_common(eval_cmd, evl_o);
    eval_cmd->callback([&] {
        const PreparedRun pr = prepare_run(evl_o.bundle, resolve_config(evl_o), evl_o.seed, evl_o.out);
        const RunSummary s = stage_eval(pr, nullptr);
        print_summary(s);
        std::printf("wrote %s\n", (pr.dir / "eval").string().c_str());
    });

    auto* run_cmd = app.add_subcommand("run", "full pipeline: pretrain, refine, infer, eval");
    add_common(run_cmd, run_o);
    run_cmd->callback([&] {
        const RunSummary s = run_pipeline(run_o.bundle, resolve_config(run_o), run_o.seed, run_o.out);
        print_summary(s);
        std::printf("wrote %s\n", s.dir.string().c_str());
    });

    auto* ablate_cmd = app.add_subcommand("ablate", "run the toggle ablation table");
    add_common(ablate_cmd, abl_o);
    ablate_cmd->callback([&] {
        if (!abl_o.toggles.empty())
            throw ConfigError("ablate sweeps its own toggle plan; --toggle is not accepted");
        const auto rows = run_ablation(abl_o.bundle, resolve_config(abl_o), abl_o.seed, abl_o.out,
                                       thread_cap());
        for (const AblationRow& r : rows)
            std::printf("%-18s psnr_db=%s ssim=%s mae=%s pcc=%s\n", r.label.c_str(),
                        num_str(r.summary.psnr_db).c_str(), num_str(r.summary.ssim).c_str(),
                        num_str(r.summary.mae).c_str(), num_str(r.summary.pcc).c_str());
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run_cli(argc, argv);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const StageError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
}
