#include <cmath>
#include <fstream>

#include "doctest.h"
#include "helpers.hpp"
#include "stdai/backbone.hpp"
#include "stdai/bundle.hpp"
#include "stdai/error.hpp"
#include "stdai/rng.hpp"
#include "stdai/sampling.hpp"

using namespace stdai;
using testutil::TempDir;

namespace {

Model default_model(std::uint64_t seed = 1) {
    Rng rng(seed);
    return Model::init(BackboneConfig{}, rng);
}

Tensor random_input(const BackboneConfig& cfg, int H, int W, Rng& rng) {
    return testutil::rand_tensor({cfg.in_channels(), H, W}, rng, 0.0f, 1.0f);
}

Tensor random_features(const BackboneConfig& cfg, int H, int W, Rng& rng) {
    const int f = cfg.pool_factor();
    return testutil::rand_tensor({cfg.feature_channels, H / f, W / f}, rng, 0.0f, 1.0f);
}

}  // namespace

TEST_CASE("parameter counts for the default configuration are pinned") {
    Model m = default_model();
    CHECK(m.scalar_count() == 123724);  // trunk 123656 + terminal 68

    const auto head_only = trainable_subset(TrainStage::fmdr_central);
    CHECK(m.scalar_count_matching(head_only) == 68);
    CHECK(m.scalar_count_matching([](const std::string& n) {
        return n.rfind("head.", 0) != 0;
    }) == 123656);

    m.insert_pdls();
    CHECK(m.scalar_count() == 124044);
    CHECK(m.scalar_count_matching([](const std::string& n) { return n.rfind("pdl.", 0) == 0; }) ==
          320);  // 2 * (16 + 32 + 64 + 32 + 16)
    CHECK(m.pdl_sites().size() == 5);

    const auto adj_trainable = trainable_subset(TrainStage::fmdr_adjacent);
    CHECK(m.scalar_count_matching(adj_trainable) == 68 + 320);

    // The refinement pool: one shared trunk plus two terminal layers plus
    // the recalibration scalars; its trainable share stays tiny.
    const long long pool = 123656 + 68 + 68 + 320;
    const long long trainable = 68 + 68 + 320;
    CHECK(pool == 124112);
    CHECK(trainable == 456);
    CHECK(static_cast<double>(trainable) / static_cast<double>(pool) < 0.05);
}

TEST_CASE("initialization is seed-deterministic") {
    Model a = default_model(9), b = default_model(9), c = default_model(10);
    REQUIRE(a.tensor_count() == b.tensor_count());
    for (std::size_t i = 0; i < a.tensor_count(); ++i)
        CHECK(a.tensor_at(i).data == b.tensor_at(i).data);
    CHECK(a.tensor("enc1.conv1.w").data != c.tensor("enc1.conv1.w").data);
}

TEST_CASE("weights are He-scaled and biases start at zero") {
    Model m = default_model(3);
    const Tensor& w = m.tensor("enc2.conv1.w");  // fan_in = 16 * 9
    double s2 = 0.0;
    for (float v : w.data) s2 += static_cast<double>(v) * v;
    const double std_got = std::sqrt(s2 / static_cast<double>(w.numel()));
    const double std_want = std::sqrt(2.0 / (16.0 * 9.0));
    CHECK(std_got == doctest::Approx(std_want).epsilon(0.15));
    for (float v : m.tensor("enc1.conv1.b").data) CHECK(v == 0.0f);
}

TEST_CASE("forward produces the right shapes and is bit-deterministic") {
    const BackboneConfig cfg;
    Model m = default_model(5);
    Rng rng(7);
    const Tensor in = random_input(cfg, 16, 12, rng);
    const Tensor feat = random_features(cfg, 16, 12, rng);

    Tape t;
    const ForwardResult f = m.forward(t, in, feat, trainable_subset(TrainStage::pretrain), false);
    CHECK(t.value(f.output).shape == std::vector<int>{4, 16, 12});
    CHECK(t.value(f.head_input).shape == std::vector<int>{16, 16, 12});
    CHECK(f.param_nodes.size() == m.tensor_count());

    const Tensor a = m.eval(in, feat, false);
    const Tensor b = m.eval(in, feat, false);
    CHECK(a.data == b.data);
    for (std::size_t i = 0; i < a.data.size(); ++i) CHECK(a.data[i] == t.value(f.output).data[i]);
}

TEST_CASE("zero-initialized recalibration is an identity within 1e-6") {
    const BackboneConfig cfg;
    Model m = default_model(11);
    Rng rng(13);
    const Tensor in = random_input(cfg, 16, 16, rng);
    const Tensor feat = random_features(cfg, 16, 16, rng);
    const Tensor before = m.eval(in, feat, false);
    m.insert_pdls();
    const Tensor after = m.eval(in, feat, true);
    REQUIRE(before.data.size() == after.data.size());
    for (std::size_t i = 0; i < before.data.size(); ++i) {
        const double mag = std::max(1.0, std::fabs(static_cast<double>(before.data[i])));
        CHECK(std::fabs(static_cast<double>(after.data[i]) - before.data[i]) / mag <= 1e-6);
    }
}

TEST_CASE("nonzero recalibration actually changes the output") {
    const BackboneConfig cfg;
    Model m = default_model(21);
    m.insert_pdls();
    m.tensor("pdl.enc1.a").data[0] = 0.5f;
    Rng rng(22);
    const Tensor in = random_input(cfg, 16, 16, rng);
    const Tensor feat = random_features(cfg, 16, 16, rng);
    const Tensor with = m.eval(in, feat, true);
    const Tensor without = m.eval(in, feat, false);
    double diff = 0.0;
    for (std::size_t i = 0; i < with.data.size(); ++i)
        diff = std::max(diff, std::fabs(static_cast<double>(with.data[i]) - without.data[i]));
    CHECK(diff > 1e-4);
}

TEST_CASE("trunk caching composes back to the full forward") {
    const BackboneConfig cfg;
    Model m = default_model(31);
    Rng rng(32);
    const Tensor in = random_input(cfg, 8, 8, rng);
    const Tensor feat = random_features(cfg, 8, 8, rng);

    const Tensor trunk = m.trunk_eval(in, feat, false);
    Tape t;
    const ForwardResult h = m.head_forward(t, trunk, trainable_subset(TrainStage::fmdr_central));
    const Tensor full = m.eval(in, feat, false);
    REQUIRE(t.value(h.output).data.size() == full.data.size());
    for (std::size_t i = 0; i < full.data.size(); ++i)
        CHECK(t.value(h.output).data[i] == full.data[i]);
}

TEST_CASE("only requested subsets receive gradients") {
    const BackboneConfig cfg;
    Model m = default_model(41);
    m.insert_pdls();
    Rng rng(42);
    const Tensor in = random_input(cfg, 8, 8, rng);
    const Tensor feat = random_features(cfg, 8, 8, rng);

    Tape t;
    const auto pred = trainable_subset(TrainStage::fmdr_adjacent);
    const ForwardResult f = m.forward(t, in, feat, pred, true);
    t.backward(t.mean_all(t.mul(f.output, f.output)));
    for (const auto& [name, id] : f.param_nodes) {
        const bool want = pred(name);
        CHECK(t.requires_grad(id) == want);
        if (!want) CHECK(!t.has_gradient(id));
    }
}

TEST_CASE("forward validates input shape and divisibility") {
    const BackboneConfig cfg;
    Model m = default_model(51);
    Rng rng(52);
    const Tensor feat = random_features(cfg, 16, 16, rng);
    Tape t;
    const auto all = trainable_subset(TrainStage::pretrain);
    CHECK_THROWS_AS(m.forward(t, Tensor::zeros({7, 16, 16}), feat, all, false), Error);
    CHECK_THROWS_AS(m.forward(t, Tensor::zeros({8, 18, 16}),
                              Tensor::zeros({8, 5, 4}), all, false),
                    Error);
    CHECK_THROWS_AS(m.forward(t, Tensor::zeros({8, 16, 16}), Tensor::zeros({8, 4, 5}), all, false),
                    Error);
}

TEST_CASE("train stages parse by name") {
    CHECK(train_stage_from_string("pretrain") == TrainStage::pretrain);
    CHECK(train_stage_from_string("fmdr_central") == TrainStage::fmdr_central);
    CHECK(train_stage_from_string("fmdr_adjacent") == TrainStage::fmdr_adjacent);
    CHECK_THROWS_AS(train_stage_from_string("warmup"), Error);
}

TEST_CASE("handcrafted features have the documented layout") {
    const BackboneConfig cfg;
    ImageU8 img = ImageU8::create(16, 16);
    Rng rng(61);
    for (std::uint8_t& b : img.data) b = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
    const HistologyFeatures f = extract_histology_features(img, cfg);
    CHECK(f.provenance == "handcrafted");
    CHECK(f.map.shape == std::vector<int>{8, 4, 4});
    CHECK(f.map.all_finite());

    // A constant gray image: gradient channels vanish, opponents sit at 0.5.
    ImageU8 gray = ImageU8::create(16, 16);
    for (std::uint8_t& b : gray.data) b = 128;
    const Tensor g = extract_histology_features(gray, cfg).map;
    const std::size_t plane = 16;
    for (int c = 3; c < 6; ++c)  // gradient-magnitude channels
        for (std::size_t i = 0; i < plane; ++i)
            CHECK(g.data[static_cast<std::size_t>(c) * plane + i] ==
                  doctest::Approx(0.0).epsilon(1e-6));
    for (int c = 6; c < 8; ++c)  // opponent channels
        for (std::size_t i = 0; i < plane; ++i)
            CHECK(g.data[static_cast<std::size_t>(c) * plane + i] ==
                  doctest::Approx(0.5).epsilon(0.01));
}

TEST_CASE("file extractor loads matching blobs and rejects bad sizes") {
    BackboneConfig cfg;
    TempDir td;
    const auto path = td.path() / "feat.f32";
    std::vector<float> vals(8 * 4 * 4);
    for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = static_cast<float>(i) * 0.01f;
    write_f32(path, vals.data(), vals.size());

    cfg.extractor = path.string();
    ImageU8 img = ImageU8::create(16, 16);
    const HistologyFeatures f = extract_histology_features(img, cfg);
    CHECK(f.provenance == "loaded-from-file");
    CHECK(f.map.shape == std::vector<int>{8, 4, 4});
    CHECK(f.map.data == vals);

    ImageU8 big = ImageU8::create(32, 32);  // needs 8*8*8 values
    CHECK_THROWS_AS(extract_histology_features(big, cfg), Error);
}

TEST_CASE("pack_input stacks image, masked expression, and mask") {
    ImageU8 img = ImageU8::create(2, 2);
    for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 2; ++x) {
            img.px(x, y)[0] = 255;
            img.px(x, y)[1] = 0;
            img.px(x, y)[2] = 51;
        }
    Tensor expr = Tensor::full({2, 2, 2}, 3.0f);
    const std::vector<std::uint8_t> mask = {1, 0, 0, 1};
    const Tensor in = pack_input(img, expr, mask);
    REQUIRE(in.shape == std::vector<int>{6, 2, 2});
    CHECK(in.data[0] == doctest::Approx(1.0));         // R
    CHECK(in.data[4] == doctest::Approx(0.0));         // G
    CHECK(in.data[8] == doctest::Approx(0.2));         // B
    CHECK(in.data[12] == doctest::Approx(3.0));        // gene 0 at observed
    CHECK(in.data[13] == doctest::Approx(0.0));        // gene 0 masked out
    CHECK(in.data[20] == doctest::Approx(1.0));        // mask channel
    CHECK(in.data[21] == doctest::Approx(0.0));
}

TEST_CASE("checkpoints roundtrip bit for bit") {
    Model m = default_model(71);
    m.insert_pdls();
    m.tensor("pdl.bot.a").data[3] = 0.25f;
    TempDir td;
    const auto path = td.path() / "model.ckpt";
    save_model(path, m);
    const Model r = load_model(path);

    CHECK(r.has_pdl());
    CHECK(r.pdl_sites() == m.pdl_sites());
    CHECK(r.config().genes == m.config().genes);
    CHECK(r.config().base_width == m.config().base_width);
    REQUIRE(r.tensor_count() == m.tensor_count());
    for (std::size_t i = 0; i < m.tensor_count(); ++i) {
        CHECK(r.name_at(i) == m.name_at(i));
        CHECK(r.tensor_at(i).data == m.tensor_at(i).data);
    }
}

TEST_CASE("corrupted checkpoints are rejected with the file named") {
    Model m = default_model(81);
    TempDir td;
    const auto path = td.path() / "model.ckpt";
    save_model(path, m);

    SUBCASE("bad magic") {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.write("NOPE", 4);
        f.close();
        CHECK_THROWS_AS(load_model(path), Error);
    }
    SUBCASE("truncated payload") {
        std::error_code ec;
        const auto size = std::filesystem::file_size(path, ec);
        std::filesystem::resize_file(path, size - 40, ec);
        CHECK_THROWS_AS(load_model(path), Error);
    }
    SUBCASE("missing file") {
        try {
            load_model(td.path() / "absent.ckpt");
            FAIL("expected an error");
        } catch (const Error& e) {
            CHECK(std::string(e.what()).find("absent.ckpt") != std::string::npos);
        }
    }
}

TEST_CASE("config validation rejects nonsense") {
    BackboneConfig cfg;
    cfg.depth = 1;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg = BackboneConfig{};
    cfg.genes = 0;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg = BackboneConfig{};
    cfg.base_width = 0;
    CHECK_THROWS_AS(cfg.validate(), Error);
}
