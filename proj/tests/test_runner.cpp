#include <cctype>
#include <cstdlib>
#include <fstream>

#include "doctest.h"
#include "helpers.hpp"
#include "stdai/phantom.hpp"
#include "stdai/runner.hpp"

using namespace stdai;

namespace {

void write_text(const std::filesystem::path& p, const std::string& text) {
    std::ofstream os(p, std::ios::binary | std::ios::trunc);
    os << text;
}

std::filesystem::path write_config(const std::filesystem::path& dir, const std::string& text) {
    auto p = dir / "config.json";
    write_text(p, text);
    return p;
}

// 16x16 identity phantom bundle on disk: small enough for fast runs, aligned
// poses so the geometry stage is a no-op.
std::filesystem::path make_bundle(const std::filesystem::path& dir, int adjacent = 1) {
    PhantomConfig pc;
    pc.width = 16;
    pc.height = 16;
    pc.genes = 2;
    pc.blobs = 4;
    pc.adjacent = adjacent;
    pc.seed = 99;
    Sample s = synth_phantom(identity_phantom(pc));
    write_bundle(dir, s);
    return dir;
}

RunConfig quick_config() {
    RunConfig cfg;
    cfg.toggles.csa = false;  // identity bundle, skip estimation
    cfg.train.epochs_pretrain = 2;
    cfg.train.epochs_fmdr = 2;
    cfg.backbone.base_width = 4;
    return cfg;
}

}  // namespace

TEST_CASE("config files parse into effective settings") {
    testutil::TempDir tmp;

    SUBCASE("defaults from an empty object") {
        RunConfig cfg = parse_run_config(write_config(tmp.path(), "{}"));
        CHECK(cfg.toggles.csa);
        CHECK(cfg.toggles.dco);
        CHECK(cfg.train.epochs_pretrain == 500);
        CHECK(cfg.train.epochs_fmdr == 1000);
        CHECK(cfg.train.lr0 == doctest::Approx(1e-3));
        CHECK(cfg.grid.stride == 2);
        CHECK(cfg.population == "unobserved");
        CHECK(cfg.density_bins == 64);
    }
    SUBCASE("explicit values land in every section") {
        RunConfig cfg = parse_run_config(write_config(tmp.path(), R"({
            "toggles": {"csa": false, "pdl": false},
            "train": {"epochs_pretrain": 7, "epochs_fmdr": 9, "lr0": 0.01, "literal_eq5": true},
            "backbone": {"base_width": 8, "depth": 2},
            "grid": {"spacing": 3, "offset": [1, 2]},
            "align": {"family": "affine", "max_iters": 500},
            "population": "all",
            "density_bins": 16
        })"));
        CHECK(!cfg.toggles.csa);
        CHECK(cfg.toggles.fmdr);
        CHECK(!cfg.toggles.pdl);
        CHECK(cfg.train.epochs_pretrain == 7);
        CHECK(cfg.train.literal_eq5);
        CHECK(cfg.backbone.base_width == 8);
        CHECK(cfg.backbone.depth == 2);
        CHECK(cfg.grid.stride == 3);
        CHECK(cfg.grid.off_r == 1);
        CHECK(cfg.grid.off_c == 2);
        CHECK(cfg.align.ransac.family == TransformFamily::Affine);
        CHECK(cfg.align.ransac.max_iters == 500);
        CHECK(cfg.population == "all");
        CHECK(cfg.density_bins == 16);
    }
    SUBCASE("unknown keys are rejected and named") {
        CHECK_THROWS_WITH_AS(parse_run_config(write_config(tmp.path(), R"({"epochs": 5})")),
                             doctest::Contains("epochs"), ConfigError);
        CHECK_THROWS_WITH_AS(
            parse_run_config(write_config(tmp.path(), R"({"train": {"epochs": 5}})")),
            doctest::Contains("epochs"), ConfigError);
    }
    SUBCASE("gene count cannot come from the config") {
        CHECK_THROWS_WITH_AS(
            parse_run_config(write_config(tmp.path(), R"({"backbone": {"genes": 4}})")),
            doctest::Contains("bundle"), ConfigError);
    }
    SUBCASE("malformed values surface as config errors") {
        CHECK_THROWS_AS(parse_run_config(write_config(tmp.path(), R"({"train": {"lr0": "x"}})")),
                        ConfigError);
        CHECK_THROWS_AS(parse_run_config(write_config(tmp.path(), "not json")), ConfigError);
        CHECK_THROWS_AS(parse_run_config(tmp.path() / "absent.json"), ConfigError);
        CHECK_THROWS_AS(
            parse_run_config(write_config(tmp.path(), R"({"grid": {"offset": [1]}})")),
            ConfigError);
    }
    SUBCASE("semantic bounds are enforced") {
        CHECK_THROWS_AS(
            parse_run_config(write_config(tmp.path(), R"({"train": {"epochs_pretrain": -1}})")),
            ConfigError);
        CHECK_THROWS_AS(parse_run_config(write_config(tmp.path(), R"({"train": {"lr0": 0}})")),
                        ConfigError);
        CHECK_THROWS_AS(parse_run_config(write_config(tmp.path(), R"({"grid": {"spacing": 0}})")),
                        ConfigError);
        CHECK_THROWS_AS(
            parse_run_config(write_config(tmp.path(),
                                          R"({"grid": {"spacing": 2, "offset": [2, 0]}})")),
            ConfigError);
        CHECK_THROWS_AS(parse_run_config(write_config(tmp.path(), R"({"population": "some"})")),
                        ConfigError);
        CHECK_THROWS_AS(parse_run_config(write_config(tmp.path(), R"({"density_bins": 0})")),
                        ConfigError);
    }
}

TEST_CASE("toggle lists") {
    RunConfig cfg;

    SUBCASE("names enable exactly what they say") {
        apply_toggle_list(cfg, "csa,dco");
        CHECK(cfg.toggles.csa);
        CHECK(!cfg.toggles.fmdr);
        CHECK(!cfg.toggles.pdl);
        CHECK(!cfg.toggles.csg);
        CHECK(cfg.toggles.dco);
    }
    SUBCASE("'none' turns everything off") {
        apply_toggle_list(cfg, "none");
        CHECK(!cfg.toggles.csa);
        CHECK(!cfg.toggles.fmdr);
        CHECK(!cfg.toggles.pdl);
        CHECK(!cfg.toggles.csg);
        CHECK(!cfg.toggles.dco);
    }
    SUBCASE("unknown names are rejected") {
        CHECK_THROWS_WITH_AS(apply_toggle_list(cfg, "csa,warp"), doctest::Contains("warp"),
                             ConfigError);
    }
    SUBCASE("an empty list is rejected") {
        CHECK_THROWS_AS(apply_toggle_list(cfg, ""), ConfigError);
    }
}

TEST_CASE("config hashing is stable and sensitive") {
    RunConfig a;
    const std::string h1 = config_hash(a);
    const std::string h2 = config_hash(a);
    CHECK(h1 == h2);
    CHECK(h1.size() == 16);
    for (char c : h1) CHECK(std::isxdigit(static_cast<unsigned char>(c)));

    RunConfig b = a;
    b.train.epochs_fmdr += 1;
    CHECK(config_hash(b) != h1);

    RunConfig c = a;
    c.toggles.csg = false;
    CHECK(config_hash(c) != h1);

    // canonical form mentions every effective setting
    const std::string canon = canonical_config(a);
    for (const char* key : {"csa", "fmdr", "pdl", "csg", "dco", "epochs_pretrain", "epochs_fmdr",
                            "lr0", "spacing", "population", "density_bins", "base_width"})
        CHECK(canon.find(key) != std::string::npos);
}

TEST_CASE("artifact paths carry sample, config hash, and seed") {
    RunConfig cfg;
    const auto dir = artifact_dir("out", "phantom-a", cfg, 42);
    CHECK(dir == std::filesystem::path("out") / "phantom-a" / (config_hash(cfg) + "-seed42"));
}

TEST_CASE("run preparation sparsifies onto the configured lattice") {
    testutil::TempDir tmp;
    const auto bundle = make_bundle(tmp.path() / "bundle");
    const RunConfig cfg = quick_config();

    PreparedRun pr = prepare_run(bundle, cfg, 5, tmp.path() / "out");
    CHECK(pr.sample.gene_count() == 2);
    REQUIRE(pr.adj.size() == 1);
    const Section& adj = pr.sample.sections[pr.adj[0]];
    const auto want = grid_mask(16, 16, cfg.grid);
    CHECK(adj.mask == want);
    // off-lattice values were zeroed in every gene plane
    for (int g = 0; g < 2; ++g)
        for (std::size_t i = 0; i < want.size(); ++i)
            if (!want[i]) CHECK(adj.expression.data[static_cast<std::size_t>(g) * 256 + i] == 0.0f);
    // the central section keeps its dense measurements
    CHECK(observed_count(pr.sample.sections[pr.sample.central_pos()].mask) == 256);
    // geometry defaults to identity when estimation is off
    REQUIRE(pr.transforms.size() == 1);
    CHECK(pr.transforms[0].m[0] == doctest::Approx(1.0));
    CHECK(pr.transforms[0].m[2] == doctest::Approx(0.0));
    CHECK(std::filesystem::exists(pr.dir / "config.json"));

    SUBCASE("re-preparing is fine, re-running a finished stage collides") {
        // the staged commands share one artifact directory, so preparation
        // must be repeatable; the collision bites when a stage re-claims
        PreparedRun again = prepare_run(bundle, cfg, 5, tmp.path() / "out");
        CHECK(again.dir == pr.dir);
        stage_pretrain(again);
        PreparedRun third = prepare_run(bundle, cfg, 5, tmp.path() / "out");
        CHECK_THROWS_WITH_AS(stage_pretrain(third),
                             doctest::Contains("already has artifacts"), ConfigError);
    }
    SUBCASE("a different seed claims a sibling directory") {
        PreparedRun other = prepare_run(bundle, cfg, 6, tmp.path() / "out");
        CHECK(other.dir != pr.dir);
        CHECK(other.dir.parent_path() == pr.dir.parent_path());
    }
}

TEST_CASE("run preparation rejects a bundle sampled on a different lattice") {
    testutil::TempDir tmp;
    PhantomConfig pc;
    pc.width = 16;
    pc.height = 16;
    pc.genes = 2;
    pc.blobs = 4;
    pc.adjacent = 1;
    pc.seed = 17;
    Sample s = synth_phantom(identity_phantom(pc));
    Section& adj = s.sections[s.adjacent_pos()[0]];
    adj.mask = grid_mask(16, 16, {3, 0, 0});
    apply_mask(adj.expression, adj.mask);
    write_bundle(tmp.path() / "bundle", s);

    RunConfig cfg = quick_config();  // spacing 2
    CHECK_THROWS_WITH_AS(prepare_run(tmp.path() / "bundle", cfg, 1, tmp.path() / "out"),
                         doctest::Contains("spacing"), ConfigError);
}

TEST_CASE("run preparation rejects dimensions the network cannot pool") {
    testutil::TempDir tmp;
    PhantomConfig pc;
    pc.width = 18;
    pc.height = 16;
    pc.genes = 2;
    pc.blobs = 4;
    pc.adjacent = 1;
    pc.seed = 18;
    write_bundle(tmp.path() / "bundle", synth_phantom(identity_phantom(pc)));

    RunConfig cfg = quick_config();  // depth 3 wants multiples of 4
    CHECK_THROWS_AS(prepare_run(tmp.path() / "bundle", cfg, 1, tmp.path() / "out"), ConfigError);
}

TEST_CASE("a full small run writes the artifact tree and metrics") {
    testutil::TempDir tmp;
    const auto bundle = make_bundle(tmp.path() / "bundle");
    const RunConfig cfg = quick_config();

    RunSummary s = run_pipeline(bundle, cfg, 3, tmp.path() / "out");
    REQUIRE(s.has_metrics);
    CHECK(std::isfinite(s.psnr_db));
    CHECK(std::isfinite(s.ssim));
    CHECK(std::isfinite(s.mae));
    CHECK(std::isfinite(s.pcc));

    CHECK(std::filesystem::exists(s.dir / "config.json"));
    CHECK(std::filesystem::exists(s.dir / "pretrain" / "section_0" / "theta0.ckpt"));
    CHECK(std::filesystem::exists(s.dir / "refine" / "section_0" / "theta2.ckpt"));
    CHECK(std::filesystem::exists(s.dir / "refine" / "section_0" / "confidence.pgm"));
    CHECK(std::filesystem::exists(s.dir / "infer" / "volume.json"));
    CHECK(std::filesystem::exists(s.dir / "eval" / "metrics.csv"));
    CHECK(!std::filesystem::exists(s.dir / "eval.partial"));

    // metrics.csv carries per-gene rows plus the summary pair
    std::ifstream is(s.dir / "eval" / "metrics.csv");
    std::string line;
    std::getline(is, line);
    CHECK(line == "section,gene,population,psnr_db,ssim,mae,pcc");
    int rows = 0;
    bool saw_mean = false, saw_sd = false;
    while (std::getline(is, line)) {
        ++rows;
        if (line.find(",MEAN,") != std::string::npos) saw_mean = true;
        if (line.find(",SD,") != std::string::npos) saw_sd = true;
    }
    CHECK(rows == 4);  // 2 genes + MEAN + SD for one adjacent section
    CHECK(saw_mean);
    CHECK(saw_sd);
}

TEST_CASE("the ablation plan walks from nothing to the full method") {
    RunConfig cfg;
    const auto plan = ablation_plan(cfg);
    REQUIRE(plan.size() == 7);
    CHECK(plan.front().label == "baseline");
    CHECK(plan.back().label == "full");
    const Toggles& base = plan.front().toggles;
    CHECK((!base.csa && !base.fmdr && !base.pdl && !base.csg && !base.dco));
    const Toggles& full = plan.back().toggles;
    CHECK((full.csa && full.fmdr && full.pdl && full.csg && full.dco));
    // labels are unique
    for (std::size_t i = 0; i < plan.size(); ++i)
        for (std::size_t j = i + 1; j < plan.size(); ++j)
            CHECK(plan[i].label != plan[j].label);
}

TEST_CASE("worker cap comes from the environment") {
    unsetenv("STDAI_THREADS");
    CHECK(thread_cap() == 1);

    setenv("STDAI_THREADS", "4", 1);
    CHECK(thread_cap() == 4);

    setenv("STDAI_THREADS", "0", 1);
    CHECK(thread_cap() == 1);

    setenv("STDAI_THREADS", "junk", 1);
    CHECK(thread_cap() == 1);

    setenv("STDAI_THREADS", "100000", 1);
    CHECK(thread_cap() == 256);

    unsetenv("STDAI_THREADS");
}
