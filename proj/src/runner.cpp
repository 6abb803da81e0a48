#include "stdai/runner.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <set>
#include <thread>

#include "json.hpp"
#include "stdai/csg.hpp"
#include "stdai/fmt.hpp"
#include "stdai/metrics.hpp"
#include "stdai/rng.hpp"

namespace stdai {

namespace {

using nlohmann::json;

void check_keys(const json& j, std::initializer_list<const char*> allowed,
                const std::string& where) {
    for (const auto& item : j.items()) {
        bool ok = false;
        for (const char* k : allowed)
            if (item.key() == k) ok = true;
        if (!ok) throw ConfigError("unknown key '" + item.key() + "' in " + where);
    }
}

json load_json(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is.good()) throw ConfigError("cannot open config file '" + path.string() + "'");
    try {
        return json::parse(is);
    } catch (const json::exception& e) {
        throw ConfigError("config file '" + path.string() + "' is not valid JSON: " + e.what());
    }
}

std::string family_name(TransformFamily f) {
    return f == TransformFamily::Similarity ? "similarity" : "affine";
}

void validate_config(const RunConfig& cfg) {
    if (cfg.train.epochs_pretrain < 0 || cfg.train.epochs_fmdr < 0)
        throw ConfigError("epoch counts must be nonnegative");
    if (!(cfg.train.lr0 > 0.0)) throw ConfigError("lr0 must be positive");
    if (cfg.grid.stride < 1) throw ConfigError("grid spacing must be at least 1");
    if (cfg.grid.off_r < 0 || cfg.grid.off_r >= cfg.grid.stride || cfg.grid.off_c < 0 ||
        cfg.grid.off_c >= cfg.grid.stride)
        throw ConfigError("grid offset must lie in [0, spacing)");
    if (cfg.population != "unobserved" && cfg.population != "all")
        throw ConfigError("metrics population must be 'unobserved' or 'all', got '" +
                          cfg.population + "'");
    if (cfg.density_bins < 1) throw ConfigError("density_bins must be positive");
    try {
        BackboneConfig bc = cfg.backbone;
        bc.genes = 1;  // placeholder; the real count comes from the bundle
        bc.validate();
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
}

}  // namespace

RunConfig parse_run_config(const std::filesystem::path& path) {
    const json j = load_json(path);
    if (!j.is_object()) throw ConfigError("config root must be a JSON object");
    RunConfig cfg;
    try {
        check_keys(j, {"toggles", "train", "backbone", "grid", "align", "population",
                       "density_bins"},
                   "config");
        if (j.contains("toggles")) {
            const json& t = j.at("toggles");
            check_keys(t, {"csa", "fmdr", "pdl", "csg", "dco"}, "toggles");
            if (t.contains("csa")) cfg.toggles.csa = t.at("csa").get<bool>();
            if (t.contains("fmdr")) cfg.toggles.fmdr = t.at("fmdr").get<bool>();
            if (t.contains("pdl")) cfg.toggles.pdl = t.at("pdl").get<bool>();
            if (t.contains("csg")) cfg.toggles.csg = t.at("csg").get<bool>();
            if (t.contains("dco")) cfg.toggles.dco = t.at("dco").get<bool>();
        }
        if (j.contains("train")) {
            const json& t = j.at("train");
            check_keys(t, {"epochs_pretrain", "epochs_fmdr", "lr0", "literal_eq5"}, "train");
            if (t.contains("epochs_pretrain"))
                cfg.train.epochs_pretrain = t.at("epochs_pretrain").get<int>();
            if (t.contains("epochs_fmdr")) cfg.train.epochs_fmdr = t.at("epochs_fmdr").get<int>();
            if (t.contains("lr0")) cfg.train.lr0 = t.at("lr0").get<double>();
            if (t.contains("literal_eq5")) cfg.train.literal_eq5 = t.at("literal_eq5").get<bool>();
        }
        if (j.contains("backbone")) {
            const json& b = j.at("backbone");
            if (b.contains("genes"))
                throw ConfigError("backbone.genes is read from the bundle, not the config");
            check_keys(b, {"base_width", "depth", "feature_channels", "extractor"}, "backbone");
            if (b.contains("base_width")) cfg.backbone.base_width = b.at("base_width").get<int>();
            if (b.contains("depth")) cfg.backbone.depth = b.at("depth").get<int>();
            if (b.contains("feature_channels"))
                cfg.backbone.feature_channels = b.at("feature_channels").get<int>();
            if (b.contains("extractor")) cfg.backbone.extractor = b.at("extractor").get<std::string>();
        }
        if (j.contains("grid")) {
            const json& g = j.at("grid");
            check_keys(g, {"spacing", "offset"}, "grid");
            if (g.contains("spacing")) cfg.grid.stride = g.at("spacing").get<int>();
            if (g.contains("offset")) {
                const auto off = g.at("offset").get<std::vector<int>>();
                if (off.size() != 2) throw ConfigError("grid.offset must be [row, col]");
                cfg.grid.off_r = off[0];
                cfg.grid.off_c = off[1];
            }
        }
        if (j.contains("align")) {
            const json& a = j.at("align");
            check_keys(a,
                       {"family", "max_keypoints", "match_ratio", "inlier_thresh_px", "max_iters",
                        "confidence", "octaves", "sigma0", "contrast_thresh", "edge_ratio"},
                       "align");
            if (a.contains("family"))
                cfg.align.ransac.family =
                    transform_family_from_string(a.at("family").get<std::string>());
            if (a.contains("max_keypoints")) cfg.align.max_keypoints = a.at("max_keypoints").get<int>();
            if (a.contains("match_ratio")) cfg.align.match_ratio = a.at("match_ratio").get<double>();
            if (a.contains("inlier_thresh_px"))
                cfg.align.ransac.inlier_thresh_px = a.at("inlier_thresh_px").get<double>();
            if (a.contains("max_iters")) cfg.align.ransac.max_iters = a.at("max_iters").get<int>();
            if (a.contains("confidence"))
                cfg.align.ransac.confidence = a.at("confidence").get<double>();
            if (a.contains("octaves")) cfg.align.sift.octaves = a.at("octaves").get<int>();
            if (a.contains("sigma0")) cfg.align.sift.sigma0 = a.at("sigma0").get<double>();
            if (a.contains("contrast_thresh"))
                cfg.align.sift.contrast_thresh = a.at("contrast_thresh").get<double>();
            if (a.contains("edge_ratio")) cfg.align.sift.edge_ratio = a.at("edge_ratio").get<double>();
        }
        if (j.contains("population")) cfg.population = j.at("population").get<std::string>();
        if (j.contains("density_bins")) cfg.density_bins = j.at("density_bins").get<int>();
    } catch (const json::exception& e) {
        throw ConfigError("config file '" + path.string() + "': " + e.what());
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    validate_config(cfg);
    return cfg;
}

void apply_toggle_list(RunConfig& cfg, const std::string& csv) {
    Toggles t;
    t.csa = t.fmdr = t.pdl = t.csg = t.dco = false;
    if (csv.empty())
        throw ConfigError("empty --toggle list (use 'none' to disable every stage)");
    if (csv != "none") {
        std::size_t at = 0;
        while (at <= csv.size()) {
            const std::size_t comma = csv.find(',', at);
            const std::string name =
                csv.substr(at, comma == std::string::npos ? std::string::npos : comma - at);
            if (name == "csa") t.csa = true;
            else if (name == "fmdr") t.fmdr = true;
            else if (name == "pdl") t.pdl = true;
            else if (name == "csg") t.csg = true;
            else if (name == "dco") t.dco = true;
            else throw ConfigError("unknown toggle '" + name + "' (expected csa,fmdr,pdl,csg,dco)");
            if (comma == std::string::npos) break;
            at = comma + 1;
        }
    }
    cfg.toggles = t;
}

std::string canonical_config(const RunConfig& cfg) {
    json j;
    j["toggles"] = {{"csa", cfg.toggles.csa},
                    {"fmdr", cfg.toggles.fmdr},
                    {"pdl", cfg.toggles.pdl},
                    {"csg", cfg.toggles.csg},
                    {"dco", cfg.toggles.dco}};
    j["train"] = {{"epochs_pretrain", cfg.train.epochs_pretrain},
                  {"epochs_fmdr", cfg.train.epochs_fmdr},
                  {"lr0", cfg.train.lr0},
                  {"literal_eq5", cfg.train.literal_eq5}};
    j["backbone"] = {{"base_width", cfg.backbone.base_width},
                     {"depth", cfg.backbone.depth},
                     {"feature_channels", cfg.backbone.feature_channels},
                     {"extractor", cfg.backbone.extractor}};
    j["grid"] = {{"spacing", cfg.grid.stride}, {"offset", {cfg.grid.off_r, cfg.grid.off_c}}};
    j["align"] = {{"family", family_name(cfg.align.ransac.family)},
                  {"max_keypoints", cfg.align.max_keypoints},
                  {"match_ratio", cfg.align.match_ratio},
                  {"inlier_thresh_px", cfg.align.ransac.inlier_thresh_px},
                  {"max_iters", cfg.align.ransac.max_iters},
                  {"confidence", cfg.align.ransac.confidence},
                  {"octaves", cfg.align.sift.octaves},
                  {"sigma0", cfg.align.sift.sigma0},
                  {"contrast_thresh", cfg.align.sift.contrast_thresh},
                  {"edge_ratio", cfg.align.sift.edge_ratio}};
    j["population"] = cfg.population;
    j["density_bins"] = cfg.density_bins;
    return j.dump();
}

std::string config_hash(const RunConfig& cfg) {
    const std::uint64_t h = fnv1a64(canonical_config(cfg));
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

std::filesystem::path artifact_dir(const std::filesystem::path& out_root,
                                   const std::string& sample_id, const RunConfig& cfg,
                                   std::uint64_t seed) {
    return out_root / sample_id / (config_hash(cfg) + "-seed" + std::to_string(seed));
}

namespace {

// Claims <dir>/<stage>; work happens in <stage>.partial until commit().
// A failed stage leaves the .partial directory behind for inspection.
class StageGuard {
public:
    StageGuard(const std::filesystem::path& dir, const std::string& stage)
        : final_(dir / stage), partial_(dir / (stage + ".partial")) {
        if (std::filesystem::exists(final_))
            throw ConfigError("stage '" + stage + "' already has artifacts at '" +
                              final_.string() + "'; remove them or use a fresh --out");
        std::error_code ec;
        std::filesystem::remove_all(partial_, ec);
        std::filesystem::create_directories(partial_);
    }

    const std::filesystem::path& dir() const { return partial_; }

    void commit() {
        std::filesystem::rename(partial_, final_);
    }

private:
    std::filesystem::path final_, partial_;
};

std::uint64_t align_seed(std::uint64_t run_seed, int section_index) {
    return Rng(run_seed).fork("align-s" + std::to_string(section_index)).seed();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    require(os.good(), "cannot open '" + path.string() + "' for writing");
    os << text;
    os.flush();
    require(os.good(), "failed writing '" + path.string() + "'");
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    require(is.good(), "cannot open '" + path.string() + "'");
    return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

Transform2D transform_from_array(const std::vector<double>& v) {
    require(v.size() == 6, "transform must have 6 entries");
    Transform2D t;
    std::copy(v.begin(), v.end(), t.m.begin());
    return t;
}

std::vector<double> transform_to_array(const Transform2D& t) {
    return std::vector<double>(t.m.begin(), t.m.end());
}

bool mask_all_ones(const std::vector<std::uint8_t>& mask) {
    for (std::uint8_t v : mask)
        if (!v) return false;
    return true;
}

}  // namespace

PreparedRun prepare_run(const std::filesystem::path& bundle_dir, const RunConfig& cfg_in,
                        std::uint64_t seed, const std::filesystem::path& out_root) {
    PreparedRun pr;
    pr.cfg = cfg_in;
    pr.seed = seed;
    validate_config(pr.cfg);
    try {
        pr.sample = read_bundle(bundle_dir);
    } catch (const Error& e) {
        throw ConfigError(std::string("bundle: ") + e.what());
    }
    pr.cfg.backbone.genes = pr.sample.gene_count();

    pr.stats.min = pr.sample.stat_min;
    pr.stats.max = pr.sample.stat_max;
    for (int g = 0; g < pr.sample.gene_count(); ++g)
        if (!(pr.stats.max[static_cast<std::size_t>(g)] > pr.stats.min[static_cast<std::size_t>(g)]))
            throw ConfigError("gene '" + pr.sample.genes[static_cast<std::size_t>(g)] +
                              "' has no usable range on the central section");

    const int H = pr.sample.height, W = pr.sample.width;
    if (H % pr.cfg.backbone.pool_factor() != 0 || W % pr.cfg.backbone.pool_factor() != 0)
        throw ConfigError("bundle is " + std::to_string(W) + "x" + std::to_string(H) +
                          "; height and width must be divisible by " +
                          std::to_string(pr.cfg.backbone.pool_factor()) + " for depth " +
                          std::to_string(pr.cfg.backbone.depth));

    // Sparsify adjacent sections in memory. Fresh bundles (all-ones masks)
    // adopt the configured grid; pre-sampled bundles must match it.
    const auto gm = grid_mask(H, W, pr.cfg.grid);
    for (Section& s : pr.sample.sections) {
        if (s.role != "adjacent") continue;
        if (mask_all_ones(s.mask)) {
            s.mask = gm;
        } else if (s.mask != gm) {
            throw ConfigError("adjacent section " + std::to_string(s.section_index) +
                              " carries a sampling mask that does not match the configured grid "
                              "(spacing " +
                              std::to_string(pr.cfg.grid.stride) + ", offset " +
                              std::to_string(pr.cfg.grid.off_r) + "," +
                              std::to_string(pr.cfg.grid.off_c) + ")");
        }
        apply_mask(s.expression, s.mask);
    }
    pr.adj = pr.sample.adjacent_pos();
    if (pr.adj.empty()) throw ConfigError("bundle has no adjacent sections");

    pr.dir = artifact_dir(out_root, pr.sample.sample_id, pr.cfg, seed);
    std::filesystem::create_directories(pr.dir);
    {
        json meta;
        meta["bundle_id"] = pr.sample.sample_id;
        meta["seed"] = seed;
        meta["hash"] = config_hash(pr.cfg);
        meta["config"] = json::parse(canonical_config(pr.cfg));
        const std::string text = meta.dump(2) + "\n";
        const auto cfg_path = pr.dir / "config.json";
        if (std::filesystem::exists(cfg_path)) {
            if (read_text(cfg_path) != text)
                throw ConfigError("artifact directory '" + pr.dir.string() +
                                  "' holds a different config.json; refusing to mix runs");
        } else {
            write_text(cfg_path, text);
        }
    }

    // Transforms: disabled alignment means identity everywhere; otherwise a
    // cached align artifact wins, then manifest entries, then estimation.
    pr.transforms.assign(pr.adj.size(), Transform2D::identity());
    pr.align_low_confidence.assign(pr.adj.size(), false);
    if (!pr.cfg.toggles.csa) return pr;

    const auto align_art = pr.dir / "align" / "transforms.json";
    if (std::filesystem::exists(align_art)) {
        try {
            const json j = json::parse(read_text(align_art));
            for (std::size_t i = 0; i < pr.adj.size(); ++i) {
                const Section& s = pr.sample.sections[pr.adj[i]];
                bool found = false;
                for (const json& e : j.at("sections")) {
                    if (e.at("section_index").get<int>() != s.section_index) continue;
                    pr.transforms[i] = transform_from_array(e.at("transform").get<std::vector<double>>());
                    pr.align_low_confidence[i] = e.at("low_confidence").get<bool>();
                    found = true;
                }
                require(found, "no transform for section " + std::to_string(s.section_index));
            }
        } catch (const json::exception& e) {
            throw StageError("align", "cached '" + align_art.string() + "' is corrupt: " + e.what());
        } catch (const Error& e) {
            throw StageError("align", std::string(e.what()) + " in '" + align_art.string() + "'");
        }
        return pr;
    }

    try {
        StageGuard guard(pr.dir, "align");
        const Section& central = pr.sample.sections[pr.sample.central_pos()];
        json sections = json::array();
        for (std::size_t i = 0; i < pr.adj.size(); ++i) {
            const Section& s = pr.sample.sections[pr.adj[i]];
            json e;
            e["section_index"] = s.section_index;
            if (s.has_transform) {
                pr.transforms[i] = s.transform;
                e["provenance"] = "manifest";
                e["low_confidence"] = false;
            } else {
                const AlignOutcome out = align_images(central.histology, s.histology, pr.cfg.align,
                                                      align_seed(seed, s.section_index));
                pr.transforms[i] = out.transform;
                pr.align_low_confidence[i] = out.low_confidence;
                e["provenance"] = "estimated";
                e["keypoints_central"] = out.keypoints_central;
                e["keypoints_adjacent"] = out.keypoints_adjacent;
                e["matches"] = out.matches;
                e["inliers"] = out.inliers;
                e["low_confidence"] = out.low_confidence;
            }
            e["transform"] = transform_to_array(pr.transforms[i]);
            sections.push_back(std::move(e));
        }
        json j;
        j["sections"] = std::move(sections);
        write_text(guard.dir() / "transforms.json", j.dump(2) + "\n");
        guard.commit();
    } catch (const ConfigError&) {
        throw;
    } catch (const StageError&) {
        throw;
    } catch (const Error& e) {
        throw StageError("align", e.what());
    }
    return pr;
}

namespace {

std::filesystem::path section_dir(const std::filesystem::path& base, int section_index) {
    return base / ("section_" + std::to_string(section_index));
}

SectionView make_central_view(const PreparedRun& pr, std::size_t i) {
    const Section& central = pr.sample.sections[pr.sample.central_pos()];
    const AlignedCentral warped =
        warp_central(central, pr.transforms[i], pr.sample.width, pr.sample.height);
    return central_view(warped, pr.cfg.grid, pr.cfg.backbone, pr.stats);
}

}  // namespace

std::vector<Model> stage_pretrain(const PreparedRun& pr) {
    try {
        StageGuard guard(pr.dir, "pretrain");
        Rng master(pr.seed);
        std::vector<Model> out;
        for (std::size_t i = 0; i < pr.adj.size(); ++i) {
            const Section& adj = pr.sample.sections[pr.adj[i]];
            const auto sub = section_dir(guard.dir(), adj.section_index);
            std::filesystem::create_directories(sub);

            const SectionView cv = make_central_view(pr, i);
            Rng init_rng = master.fork("init-s" + std::to_string(adj.section_index));
            Model model = Model::init(pr.cfg.backbone, init_rng);
            const TrainResult tr =
                pretrain_pseudo_network(model, cv, pr.cfg.train.epochs_pretrain, pr.cfg.train.lr0);
            save_model(sub / "theta0.ckpt", model);
            write_train_log(sub / "train_log.csv", tr.log);
            if (tr.diverged)
                throw Error("training diverged on section " + std::to_string(adj.section_index) +
                            " at epoch " + std::to_string(tr.log.back().epoch) +
                            "; checkpoint of the last finite epoch kept at '" +
                            (sub / "theta0.ckpt").string() + "'");
            out.push_back(std::move(model));
        }
        guard.commit();
        return out;
    } catch (const ConfigError&) {
        throw;
    } catch (const StageError&) {
        throw;
    } catch (const Error& e) {
        throw StageError("pretrain", e.what());
    }
}

RefineOutput stage_refine(const PreparedRun& pr, const std::vector<Model>* theta0) {
    std::vector<Model> loaded;
    if (theta0 == nullptr) {
        for (std::size_t i = 0; i < pr.adj.size(); ++i) {
            const auto p = section_dir(pr.dir / "pretrain", pr.sample.sections[pr.adj[i]].section_index) /
                           "theta0.ckpt";
            if (!std::filesystem::exists(p))
                throw StageError("refine", "missing checkpoint '" + p.string() +
                                               "'; run `stdai pretrain` first");
            try {
                loaded.push_back(load_model(p));
            } catch (const Error& e) {
                throw StageError("refine", e.what());
            }
        }
        theta0 = &loaded;
    }
    require(theta0->size() == pr.adj.size(), "refine: one pretrained model per adjacent section");

    try {
        StageGuard guard(pr.dir, "refine");
        const int H = pr.sample.height, W = pr.sample.width;
        RefineOutput out;
        for (std::size_t i = 0; i < pr.adj.size(); ++i) {
            const Section& adj = pr.sample.sections[pr.adj[i]];
            const auto sub = section_dir(guard.dir(), adj.section_index);
            std::filesystem::create_directories(sub);

            const SectionView av = adjacent_view(adj, pr.cfg.backbone, pr.stats);
            const Model& t0 = (*theta0)[i];
            Tensor pseudo = generate_pseudo_labels(t0, av);

            std::vector<float> weights;
            if (pr.cfg.toggles.csg) {
                const auto w_obs = observed_confidence(pseudo, av.target, adj.mask);
                const auto dense = propagate_confidence(w_obs, adj.mask, H, W, pr.cfg.grid);
                weights = finalize_confidence(dense.w, adj.mask);
            } else {
                weights.assign(static_cast<std::size_t>(H) * W, 1.0f);
            }
            {
                // stored so that a weight of 1.0 lands on gray level 128
                ImageF conf = ImageF::create(W, H);
                for (std::size_t k = 0; k < conf.data.size(); ++k)
                    conf.data[k] = weights[k] * (128.0f / 255.0f);
                write_pgm(sub / "confidence.pgm", conf);
            }

            if (pr.cfg.toggles.fmdr) {
                const SectionView cv = make_central_view(pr, i);
                const Tensor targets =
                    adjacent_targets(pseudo, av.target, adj.mask, pr.cfg.train.literal_eq5);
                FmdrResult fr = fmdr_refine(t0, cv, av, targets, weights, pr.cfg.train.epochs_fmdr,
                                            pr.cfg.train.lr0, pr.cfg.toggles.pdl);
                save_model(sub / "theta1.ckpt", fr.theta1);
                save_model(sub / "theta2.ckpt", fr.theta2);
                write_train_log(sub / "train_log.csv", fr.train.log);
                if (fr.train.diverged)
                    throw Error("refinement diverged on section " +
                                std::to_string(adj.section_index) + " at epoch " +
                                std::to_string(fr.train.log.back().epoch) +
                                "; checkpoints of the last finite epoch kept at '" + sub.string() +
                                "'");
                out.finals.push_back(std::move(fr.theta2));
            } else {
                out.finals.push_back(t0);
            }
            out.pseudo.push_back(std::move(pseudo));
        }
        guard.commit();
        return out;
    } catch (const ConfigError&) {
        throw;
    } catch (const StageError&) {
        throw;
    } catch (const Error& e) {
        throw StageError("refine", e.what());
    }
}

VolumePrediction stage_infer(const PreparedRun& pr, const RefineOutput* refined) {
    RefineOutput loaded;
    if (refined == nullptr) {
        const bool from_refine = pr.cfg.toggles.fmdr;
        for (std::size_t i = 0; i < pr.adj.size(); ++i) {
            const int idx = pr.sample.sections[pr.adj[i]].section_index;
            const auto p = from_refine
                               ? section_dir(pr.dir / "refine", idx) / "theta2.ckpt"
                               : section_dir(pr.dir / "pretrain", idx) / "theta0.ckpt";
            if (!std::filesystem::exists(p))
                throw StageError("infer", "missing checkpoint '" + p.string() + "'; run `stdai " +
                                              (from_refine ? "refine" : "pretrain") + "` first");
            try {
                loaded.finals.push_back(load_model(p));
            } catch (const Error& e) {
                throw StageError("infer", e.what());
            }
        }
        refined = &loaded;
    }
    require(refined->finals.size() == pr.adj.size(), "infer: one model per adjacent section");

    try {
        StageGuard guard(pr.dir, "infer");
        std::map<int, Tensor> finals;
        for (std::size_t i = 0; i < pr.adj.size(); ++i) {
            const Section& adj = pr.sample.sections[pr.adj[i]];
            const SectionView av = adjacent_view(adj, pr.cfg.backbone, pr.stats);
            const Model& m = refined->finals[i];
            const Tensor pred_norm = m.eval(av.input, av.features, m.has_pdl());
            Tensor pred_raw = denormalize_expression(pred_norm, pr.stats);
            if (pr.cfg.toggles.dco) pred_raw = dco(pred_raw, adj.expression, adj.mask);
            finals.emplace(adj.section_index, std::move(pred_raw));
        }
        VolumePrediction vol = assemble_volume(
            pr.sample, finals, pr.cfg.toggles.dco ? "predicted+dco" : "predicted");
        write_volume(guard.dir(), pr.sample, vol);
        guard.commit();
        return vol;
    } catch (const ConfigError&) {
        throw;
    } catch (const StageError&) {
        throw;
    } catch (const Error& e) {
        throw StageError("infer", e.what());
    }
}

namespace {

VolumePrediction load_volume(const PreparedRun& pr) {
    const auto vj = pr.dir / "infer" / "volume.json";
    if (!std::filesystem::exists(vj))
        throw StageError("eval", "missing '" + vj.string() + "'; run `stdai infer` first");
    VolumePrediction vol;
    try {
        const json j = json::parse(read_text(vj));
        const std::size_t plane =
            static_cast<std::size_t>(pr.sample.height) * pr.sample.width;
        for (const json& e : j.at("sections")) {
            vol.section_indices.push_back(e.at("section_index").get<int>());
            vol.provenance.push_back(e.at("provenance").get<std::string>());
            const auto file = pr.dir / "infer" / e.at("file").get<std::string>();
            auto data = read_f32(file, static_cast<std::size_t>(pr.sample.gene_count()) * plane);
            vol.slices.push_back(Tensor::from(
                {pr.sample.gene_count(), pr.sample.height, pr.sample.width}, std::move(data)));
        }
    } catch (const json::exception& e) {
        throw StageError("eval", "volume manifest '" + vj.string() + "' is corrupt: " + e.what());
    } catch (const Error& e) {
        throw StageError("eval", e.what());
    }
    return vol;
}

ImageF plane_image(const Tensor& t, int g, int H, int W) {
    ImageF img = ImageF::create(W, H);
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    std::copy(t.data.begin() + static_cast<std::ptrdiff_t>(g * plane),
              t.data.begin() + static_cast<std::ptrdiff_t>((g + 1) * plane), img.data.begin());
    return img;
}

}  // namespace

RunSummary stage_eval(const PreparedRun& pr, const VolumePrediction* volume) {
    VolumePrediction loaded;
    if (volume == nullptr) {
        loaded = load_volume(pr);
        volume = &loaded;
    }

    try {
        StageGuard guard(pr.dir, "eval");
        const int H = pr.sample.height, W = pr.sample.width, G = pr.sample.gene_count();
        const std::size_t plane = static_cast<std::size_t>(H) * W;

        std::vector<MetricRow> rows;
        std::vector<double> all_psnr, all_ssim, all_mae, all_pcc;

        for (std::size_t i = 0; i < pr.adj.size(); ++i) {
            const Section& adj = pr.sample.sections[pr.adj[i]];
            if (!adj.has_truth)
                throw Error("section " + std::to_string(adj.section_index) +
                            " has no ground-truth sidecar; evaluation needs a synthetic bundle");

            const Tensor* slice = nullptr;
            for (std::size_t k = 0; k < volume->section_indices.size(); ++k)
                if (volume->section_indices[k] == adj.section_index) slice = &volume->slices[k];
            require(slice != nullptr, "volume has no slice for section " +
                                          std::to_string(adj.section_index));

            const Tensor pred_norm = normalize_expression(*slice, pr.stats);
            const Tensor truth_norm = normalize_expression(adj.truth, pr.stats);

            std::vector<std::uint8_t> pop(plane, 1);
            if (pr.cfg.population == "unobserved")
                for (std::size_t k = 0; k < plane; ++k) pop[k] = adj.mask[k] ? 0 : 1;

            std::vector<double> g_psnr, g_ssim, g_mae, g_pcc;
            for (int g = 0; g < G; ++g) {
                const ImageF p = plane_image(pred_norm, g, H, W);
                const ImageF t = plane_image(truth_norm, g, H, W);
                const GeneMetrics m = evaluate_plane(p, t, pop);
                rows.push_back({std::to_string(adj.section_index), pr.sample.genes[static_cast<std::size_t>(g)],
                                pr.cfg.population, m.psnr_db, m.ssim, m.mae, m.pcc});
                g_psnr.push_back(m.psnr_db);
                g_ssim.push_back(m.ssim);
                g_mae.push_back(m.mae);
                g_pcc.push_back(m.pcc);
                write_error_map(guard.dir() / ("error_s" + std::to_string(adj.section_index) + "_" +
                                               pr.sample.genes[static_cast<std::size_t>(g)] + ".pgm"),
                                p, t);
            }
            const auto [mp, sp] = mean_sd(g_psnr);
            const auto [ms, ss] = mean_sd(g_ssim);
            const auto [mm, sm] = mean_sd(g_mae);
            const auto [mc, sc] = mean_sd(g_pcc);
            rows.push_back({std::to_string(adj.section_index), "MEAN", pr.cfg.population, mp, ms,
                            mm, mc});
            rows.push_back({std::to_string(adj.section_index), "SD", pr.cfg.population, sp, ss, sm,
                            sc});
            all_psnr.insert(all_psnr.end(), g_psnr.begin(), g_psnr.end());
            all_ssim.insert(all_ssim.end(), g_ssim.begin(), g_ssim.end());
            all_mae.insert(all_mae.end(), g_mae.begin(), g_mae.end());
            all_pcc.insert(all_pcc.end(), g_pcc.begin(), g_pcc.end());
        }
        write_metrics_csv(guard.dir() / "metrics.csv", rows);

        // Distribution diagnostics: the central section against each
        // section's final prediction, per gene, in raw units.
        const Section& central = pr.sample.sections[pr.sample.central_pos()];
        for (int g = 0; g < G; ++g) {
            const std::string& gene = pr.sample.genes[static_cast<std::size_t>(g)];
            std::vector<float> cv(central.expression.data.begin() + static_cast<std::ptrdiff_t>(g * plane),
                                  central.expression.data.begin() + static_cast<std::ptrdiff_t>((g + 1) * plane));
            write_density_csv(guard.dir() / ("density_" + gene + "_central.csv"),
                              expression_density(cv, pr.cfg.density_bins));
            for (std::size_t i = 0; i < pr.adj.size(); ++i) {
                const Section& adj = pr.sample.sections[pr.adj[i]];
                const Tensor* slice = nullptr;
                for (std::size_t k = 0; k < volume->section_indices.size(); ++k)
                    if (volume->section_indices[k] == adj.section_index) slice = &volume->slices[k];
                std::vector<float> pv(slice->data.begin() + static_cast<std::ptrdiff_t>(g * plane),
                                      slice->data.begin() + static_cast<std::ptrdiff_t>((g + 1) * plane));
                write_density_csv(guard.dir() / ("density_" + gene + "_s" +
                                                 std::to_string(adj.section_index) + "_pred.csv"),
                                  expression_density(pv, pr.cfg.density_bins));
            }
        }

        RunSummary s;
        s.has_metrics = true;
        s.dir = pr.dir;
        s.psnr_db = mean_sd(all_psnr).first;
        s.ssim = mean_sd(all_ssim).first;
        s.mae = mean_sd(all_mae).first;
        s.pcc = mean_sd(all_pcc).first;
        guard.commit();
        return s;
    } catch (const ConfigError&) {
        throw;
    } catch (const StageError&) {
        throw;
    } catch (const Error& e) {
        throw StageError("eval", e.what());
    }
}

RunSummary run_pipeline(const std::filesystem::path& bundle_dir, const RunConfig& cfg,
                        std::uint64_t seed, const std::filesystem::path& out_root) {
    PreparedRun pr = prepare_run(bundle_dir, cfg, seed, out_root);
    const std::vector<Model> theta0 = stage_pretrain(pr);
    const RefineOutput refined = stage_refine(pr, &theta0);
    const VolumePrediction vol = stage_infer(pr, &refined);

    bool any_truth = false;
    for (std::size_t i : pr.adj) any_truth |= pr.sample.sections[i].has_truth;
    if (!any_truth) {
        std::fprintf(stderr, "note: bundle has no ground-truth sidecars; skipping eval\n");
        RunSummary s;
        s.dir = pr.dir;
        return s;
    }
    return stage_eval(pr, &vol);
}

std::vector<AblationRow> ablation_plan(const RunConfig&) {
    auto t = [](bool csa, bool fmdr, bool pdl, bool csg, bool dco) {
        Toggles x;
        x.csa = csa;
        x.fmdr = fmdr;
        x.pdl = pdl;
        x.csg = csg;
        x.dco = dco;
        return x;
    };
    return {
        {"baseline", t(false, false, false, false, false), {}},
        {"fmdr", t(false, true, false, false, false), {}},
        {"csa", t(true, false, false, false, false), {}},
        {"csa+fmdr", t(true, true, false, false, false), {}},
        {"csa+fmdr+pdl", t(true, true, true, false, false), {}},
        {"csa+fmdr+pdl+csg", t(true, true, true, true, false), {}},
        {"full", t(true, true, true, true, true), {}},
    };
}

int thread_cap() {
    const char* env = std::getenv("STDAI_THREADS");
    if (env == nullptr || *env == '\0') return 1;
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) return 1;
    return static_cast<int>(std::min<long>(v, 256));
}

std::vector<AblationRow> run_ablation(const std::filesystem::path& bundle_dir,
                                      const RunConfig& base, std::uint64_t seed,
                                      const std::filesystem::path& out_root, int threads) {
    std::string sample_id;
    try {
        sample_id = read_bundle(bundle_dir).sample_id;
    } catch (const Error& e) {
        throw ConfigError(std::string("bundle: ") + e.what());
    }
    const auto root = out_root / sample_id /
                      ("ablate-" + config_hash(base) + "-seed" + std::to_string(seed));
    if (std::filesystem::exists(root / "ablation.csv"))
        throw ConfigError("ablation results already exist at '" + (root / "ablation.csv").string() +
                          "'; remove them or use a fresh --out");
    std::filesystem::create_directories(root);

    std::vector<AblationRow> rows = ablation_plan(base);
    std::atomic<std::size_t> next{0};
    std::mutex mtx;
    std::exception_ptr first_error;

    auto work = [&]() {
        for (;;) {
            const std::size_t k = next.fetch_add(1);
            if (k >= rows.size()) return;
            RunConfig rc = base;
            rc.toggles = rows[k].toggles;
            try {
                rows[k].summary = run_pipeline(bundle_dir, rc, seed, root / rows[k].label);
            } catch (...) {
                std::lock_guard<std::mutex> lock(mtx);
                if (!first_error) first_error = std::current_exception();
                return;
            }
        }
    };

    const int T = std::max(1, std::min<int>(threads, static_cast<int>(rows.size())));
    std::vector<std::thread> pool;
    for (int i = 1; i < T; ++i) pool.emplace_back(work);
    work();
    for (std::thread& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);

    write_ablation_csv(root / "ablation.csv", rows);
    return rows;
}

void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    require(os.good(), "cannot open '" + path.string() + "' for writing");
    os << "label,csa,fmdr,pdl,csg,dco,psnr_db,ssim,mae,pcc\n";
    for (const AblationRow& r : rows) {
        os << r.label << ',' << (r.toggles.csa ? 1 : 0) << ',' << (r.toggles.fmdr ? 1 : 0) << ','
           << (r.toggles.pdl ? 1 : 0) << ',' << (r.toggles.csg ? 1 : 0) << ','
           << (r.toggles.dco ? 1 : 0) << ',' << num_str(r.summary.psnr_db) << ','
           << num_str(r.summary.ssim) << ',' << num_str(r.summary.mae) << ','
           << num_str(r.summary.pcc) << '\n';
    }
    os.flush();
    require(os.good(), "failed writing '" + path.string() + "'");
}

}  // namespace stdai
