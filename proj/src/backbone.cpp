#include "stdai/backbone.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <unordered_map>

#include "json.hpp"
#include "stdai/bundle.hpp"
#include "stdai/error.hpp"

namespace stdai {

void BackboneConfig::validate() const {
    require(genes > 0, "backbone config: gene count must be positive");
    require(base_width > 0, "backbone config: base width must be positive");
    require(depth >= 2 && depth <= 6, "backbone config: depth must be in [2,6]");
    require(feature_channels > 0, "backbone config: feature channels must be positive");
    require(!extractor.empty(), "backbone config: extractor must be named");
}

namespace {

int width_at(const BackboneConfig& cfg, int scale) { return cfg.base_width << (scale - 1); }

struct TensorSpec {
    std::string name;
    std::vector<int> shape;
};

std::vector<TensorSpec> base_layout(const BackboneConfig& cfg) {
    std::vector<TensorSpec> out;
    auto conv = [&out](const std::string& prefix, int cout, int cin, int k) {
        out.push_back({prefix + ".w", {cout, cin, k, k}});
        out.push_back({prefix + ".b", {cout}});
    };
    int prev = cfg.in_channels();
    for (int i = 1; i < cfg.depth; ++i) {
        const int w = width_at(cfg, i);
        const std::string blk = "enc" + std::to_string(i);
        conv(blk + ".conv1", w, prev, 3);
        conv(blk + ".conv2", w, w, 3);
        prev = w;
    }
    const int wd = width_at(cfg, cfg.depth);
    conv("bot.conv1", wd, prev, 3);
    conv("feature_adapter", cfg.feature_channels, cfg.feature_channels, 1);
    conv("bot.conv2", wd, wd + cfg.feature_channels, 3);
    prev = wd;
    for (int i = cfg.depth - 1; i >= 1; --i) {
        const int w = width_at(cfg, i);
        const std::string blk = "dec" + std::to_string(i);
        conv(blk + ".conv1", w, prev + w, 3);
        conv(blk + ".conv2", w, w, 3);
        prev = w;
    }
    conv("head", cfg.genes, cfg.base_width, 1);
    return out;
}

// Recalibration sites, one per convolution block, with their channel counts.
std::vector<std::pair<std::string, int>> site_layout(const BackboneConfig& cfg) {
    std::vector<std::pair<std::string, int>> sites;
    for (int i = 1; i < cfg.depth; ++i)
        sites.emplace_back("enc" + std::to_string(i), width_at(cfg, i));
    sites.emplace_back("bot", width_at(cfg, cfg.depth));
    for (int i = cfg.depth - 1; i >= 1; --i)
        sites.emplace_back("dec" + std::to_string(i), width_at(cfg, i));
    return sites;
}

}  // namespace

HistologyFeatures extract_histology_features(const ImageU8& histology, const BackboneConfig& cfg) {
    cfg.validate();
    require(histology.w > 0 && histology.h > 0, "extract_histology_features: empty histology");
    const int f = cfg.pool_factor();
    require(histology.w % f == 0 && histology.h % f == 0,
            "extract_histology_features: histology " + std::to_string(histology.w) + "x" +
                std::to_string(histology.h) + " is not divisible by the pooling factor " +
                std::to_string(f));
    const int fw = histology.w / f;
    const int fh = histology.h / f;

    if (cfg.extractor != "handcrafted") {
        const std::size_t n =
            static_cast<std::size_t>(cfg.feature_channels) * fh * fw;
        std::vector<float> data;
        try {
            data = read_f32(cfg.extractor, n);
        } catch (const Error& e) {
            throw Error("feature file '" + cfg.extractor + "' does not match " +
                        std::to_string(cfg.feature_channels) + "x" + std::to_string(fh) + "x" +
                        std::to_string(fw) + ": " + e.what());
        }
        HistologyFeatures out;
        out.map = Tensor::from({cfg.feature_channels, fh, fw}, std::move(data));
        out.provenance = "loaded-from-file";
        return out;
    }

    require(cfg.feature_channels == 8,
            "handcrafted extractor emits 8 channels; config requests " +
                std::to_string(cfg.feature_channels));

    const ImageF gray = to_gray(histology);
    const int W = histology.w, H = histology.h;

    std::vector<ImageF> channels;
    channels.reserve(8);
    const double sigmas[3] = {1.0, 2.0, 4.0};
    std::vector<ImageF> lums;
    for (double s : sigmas) lums.push_back(gaussian_blur(gray, s));
    for (const ImageF& l : lums) channels.push_back(l);
    for (const ImageF& l : lums) {
        ImageF g = ImageF::create(W, H);
        for (int y = 0; y < H; ++y) {
            const int ym = std::max(0, y - 1), yp = std::min(H - 1, y + 1);
            for (int x = 0; x < W; ++x) {
                const int xm = std::max(0, x - 1), xp = std::min(W - 1, x + 1);
                const double gx = 0.5 * (l.at(xp, y) - l.at(xm, y));
                const double gy = 0.5 * (l.at(x, yp) - l.at(x, ym));
                g.at(x, y) = static_cast<float>(std::sqrt(gx * gx + gy * gy));
            }
        }
        channels.push_back(std::move(g));
    }
    ImageF opp1 = ImageF::create(W, H), opp2 = ImageF::create(W, H);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const std::uint8_t* p = histology.px(x, y);
            const double r = p[0] / 255.0, g = p[1] / 255.0, b = p[2] / 255.0;
            opp1.at(x, y) = static_cast<float>(0.5 + 0.5 * (r - g));
            opp2.at(x, y) = static_cast<float>(0.5 + 0.5 * (b - 0.5 * (r + g)));
        }
    channels.push_back(std::move(opp1));
    channels.push_back(std::move(opp2));

    Tensor map = Tensor::zeros({8, fh, fw});
    const double inv = 1.0 / (static_cast<double>(f) * f);
    for (int c = 0; c < 8; ++c) {
        const ImageF& ch = channels[static_cast<std::size_t>(c)];
        for (int by = 0; by < fh; ++by)
            for (int bx = 0; bx < fw; ++bx) {
                double acc = 0.0;
                for (int dy = 0; dy < f; ++dy)
                    for (int dx = 0; dx < f; ++dx) acc += ch.at(bx * f + dx, by * f + dy);
                map.data[(static_cast<std::size_t>(c) * fh + by) * fw + bx] =
                    static_cast<float>(acc * inv);
            }
    }
    HistologyFeatures out;
    out.map = std::move(map);
    out.provenance = "handcrafted";
    return out;
}

Tensor pack_input(const ImageU8& histology, const Tensor& sparse_expr,
                  const std::vector<std::uint8_t>& mask) {
    require(sparse_expr.rank() == 3, "pack_input: expression must be [G,H,W]");
    const int G = sparse_expr.shape[0];
    const int H = sparse_expr.shape[1];
    const int W = sparse_expr.shape[2];
    require(histology.w == W && histology.h == H, "pack_input: histology dims do not match expression");
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    require(mask.size() == plane, "pack_input: mask size mismatch");

    Tensor out = Tensor::zeros({3 + G + 1, H, W});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const std::uint8_t* p = histology.px(x, y);
            const std::size_t i = static_cast<std::size_t>(y) * W + x;
            out.data[0 * plane + i] = static_cast<float>(p[0] / 255.0);
            out.data[1 * plane + i] = static_cast<float>(p[1] / 255.0);
            out.data[2 * plane + i] = static_cast<float>(p[2] / 255.0);
        }
    for (int g = 0; g < G; ++g) {
        const std::size_t base = static_cast<std::size_t>(g) * plane;
        float* dst = out.data.data() + static_cast<std::size_t>(3 + g) * plane;
        for (std::size_t i = 0; i < plane; ++i) dst[i] = mask[i] ? sparse_expr.data[base + i] : 0.0f;
    }
    float* m = out.data.data() + static_cast<std::size_t>(3 + G) * plane;
    for (std::size_t i = 0; i < plane; ++i) m[i] = mask[i] ? 1.0f : 0.0f;
    return out;
}

TrainStage train_stage_from_string(const std::string& s) {
    if (s == "pretrain") return TrainStage::pretrain;
    if (s == "fmdr_central") return TrainStage::fmdr_central;
    if (s == "fmdr_adjacent") return TrainStage::fmdr_adjacent;
    throw Error("unknown training stage '" + s + "'");
}

TrainablePred trainable_subset(TrainStage stage) {
    switch (stage) {
        case TrainStage::pretrain:
            return [](const std::string&) { return true; };
        case TrainStage::fmdr_central:
            return [](const std::string& n) { return n.rfind("head.", 0) == 0; };
        case TrainStage::fmdr_adjacent:
            return [](const std::string& n) {
                return n.rfind("head.", 0) == 0 || n.rfind("pdl.", 0) == 0;
            };
    }
    throw Error("unknown training stage");
}

Model Model::init(const BackboneConfig& cfg, Rng& rng) {
    cfg.validate();
    Model m;
    m.cfg_ = cfg;
    for (const TensorSpec& spec : base_layout(cfg)) {
        Tensor t = Tensor::zeros(spec.shape);
        if (spec.name.size() > 2 && spec.name.compare(spec.name.size() - 2, 2, ".w") == 0) {
            const int fan_in = spec.shape[1] * spec.shape[2] * spec.shape[3];
            const double std = std::sqrt(2.0 / fan_in);
            for (float& v : t.data) v = static_cast<float>(rng.normal() * std);
        }
        m.names_.push_back(spec.name);
        m.values_.push_back(std::move(t));
    }
    return m;
}

void Model::insert_pdls() {
    require(!names_.empty(), "model is uninitialized");
    require(!has_pdl_, "recalibration layers already inserted");
    for (const auto& [site, channels] : site_layout(cfg_)) {
        names_.push_back("pdl." + site + ".a");
        values_.push_back(Tensor::zeros({channels}));
        names_.push_back("pdl." + site + ".b");
        values_.push_back(Tensor::zeros({channels}));
        pdl_sites_.push_back(site);
    }
    has_pdl_ = true;
}

int Model::find(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
        if (names_[i] == name) return static_cast<int>(i);
    return -1;
}

bool Model::has_tensor(const std::string& name) const { return find(name) >= 0; }

Tensor& Model::tensor(const std::string& name) {
    const int i = find(name);
    require(i >= 0, "model has no tensor named '" + name + "'");
    return values_[static_cast<std::size_t>(i)];
}

const Tensor& Model::tensor(const std::string& name) const {
    const int i = find(name);
    require(i >= 0, "model has no tensor named '" + name + "'");
    return values_[static_cast<std::size_t>(i)];
}

long long Model::scalar_count() const {
    long long n = 0;
    for (const Tensor& t : values_) n += static_cast<long long>(t.numel());
    return n;
}

long long Model::scalar_count_matching(const TrainablePred& pred) const {
    long long n = 0;
    for (std::size_t i = 0; i < names_.size(); ++i)
        if (pred(names_[i])) n += static_cast<long long>(values_[i].numel());
    return n;
}

ForwardResult Model::forward(Tape& tape, const Tensor& input, const Tensor& features,
                             const TrainablePred& trainable, bool apply_pdl) const {
    require(!names_.empty(), "model is uninitialized");
    if (apply_pdl) require(has_pdl_, "model has no recalibration layers to apply");
    require(input.rank() == 3 && input.shape[0] == cfg_.in_channels(),
            "model_forward: input must be [" + std::to_string(cfg_.in_channels()) +
                ",H,W], got " + input.shape_str());
    const int H = input.shape[1], W = input.shape[2];
    const int f = cfg_.pool_factor();
    require(H > 0 && W > 0 && H % f == 0 && W % f == 0,
            "model_forward: input " + std::to_string(H) + "x" + std::to_string(W) +
                " must have height and width divisible by " + std::to_string(f) + " (depth " +
                std::to_string(cfg_.depth) + ")");
    require(features.rank() == 3 && features.shape[0] == cfg_.feature_channels &&
                features.shape[1] == H / f && features.shape[2] == W / f,
            "model_forward: features must be [" + std::to_string(cfg_.feature_channels) + "," +
                std::to_string(H / f) + "," + std::to_string(W / f) + "], got " +
                features.shape_str());

    ForwardResult res;
    std::unordered_map<std::string, int> node;
    for (std::size_t i = 0; i < names_.size(); ++i) {
        const std::string& n = names_[i];
        if (!apply_pdl && n.rfind("pdl.", 0) == 0) continue;
        const int id = tape.leaf(values_[i], trainable(n));
        node.emplace(n, id);
        res.param_nodes.emplace_back(n, id);
    }
    auto conv_lrelu = [&](int x, const std::string& prefix) {
        return tape.leaky_relu(tape.conv2d(x, node.at(prefix + ".w"), node.at(prefix + ".b")));
    };
    auto recalibrate = [&](int x, const std::string& site) {
        if (!apply_pdl) return x;
        return tape.channel_affine(x, node.at("pdl." + site + ".a"), node.at("pdl." + site + ".b"));
    };

    int x = tape.leaf(input, false);
    std::vector<int> skips;
    for (int i = 1; i < cfg_.depth; ++i) {
        const std::string blk = "enc" + std::to_string(i);
        x = conv_lrelu(x, blk + ".conv1");
        x = conv_lrelu(x, blk + ".conv2");
        x = recalibrate(x, blk);
        skips.push_back(x);
        x = tape.max_pool2(x);
    }
    x = conv_lrelu(x, "bot.conv1");
    const int adapted =
        tape.conv2d(tape.leaf(features, false), node.at("feature_adapter.w"),
                    node.at("feature_adapter.b"));
    x = tape.concat_channels(x, adapted);
    x = conv_lrelu(x, "bot.conv2");
    x = recalibrate(x, "bot");
    for (int i = cfg_.depth - 1; i >= 1; --i) {
        x = tape.upsample2_nearest(x);
        x = tape.concat_channels(x, skips[static_cast<std::size_t>(i - 1)]);
        const std::string blk = "dec" + std::to_string(i);
        x = conv_lrelu(x, blk + ".conv1");
        x = conv_lrelu(x, blk + ".conv2");
        x = recalibrate(x, blk);
    }
    res.head_input = x;
    res.output = tape.conv2d(x, node.at("head.w"), node.at("head.b"));
    return res;
}

Tensor Model::eval(const Tensor& input, const Tensor& features, bool apply_pdl) const {
    Tape tape;
    const auto res = forward(tape, input, features, [](const std::string&) { return false; },
                             apply_pdl);
    return tape.value(res.output);
}

Tensor Model::trunk_eval(const Tensor& input, const Tensor& features, bool apply_pdl) const {
    Tape tape;
    const auto res = forward(tape, input, features, [](const std::string&) { return false; },
                             apply_pdl);
    return tape.value(res.head_input);
}

ForwardResult Model::head_forward(Tape& tape, const Tensor& trunk,
                                  const TrainablePred& trainable) const {
    require(trunk.rank() == 3 && trunk.shape[0] == cfg_.base_width,
            "head_forward: trunk activation must be [" + std::to_string(cfg_.base_width) +
                ",H,W], got " + trunk.shape_str());
    ForwardResult res;
    const int w = tape.leaf(tensor("head.w"), trainable("head.w"));
    const int b = tape.leaf(tensor("head.b"), trainable("head.b"));
    res.param_nodes.emplace_back("head.w", w);
    res.param_nodes.emplace_back("head.b", b);
    res.head_input = tape.leaf(trunk, false);
    res.output = tape.conv2d(res.head_input, w, b);
    return res;
}

namespace {

void append_f32_le(std::string& out, const float* data, std::size_t count) {
    const std::size_t at = out.size();
    out.resize(at + count * 4);
    if constexpr (std::endian::native == std::endian::little) {
        std::memcpy(out.data() + at, data, count * 4);
    } else {
        for (std::size_t i = 0; i < count; ++i) {
            std::uint32_t u;
            std::memcpy(&u, data + i, 4);
            out[at + 4 * i + 0] = static_cast<char>(u & 0xff);
            out[at + 4 * i + 1] = static_cast<char>((u >> 8) & 0xff);
            out[at + 4 * i + 2] = static_cast<char>((u >> 16) & 0xff);
            out[at + 4 * i + 3] = static_cast<char>((u >> 24) & 0xff);
        }
    }
}

void read_f32_le(const std::string& bytes, std::size_t at, float* data, std::size_t count) {
    if constexpr (std::endian::native == std::endian::little) {
        std::memcpy(data, bytes.data() + at, count * 4);
    } else {
        for (std::size_t i = 0; i < count; ++i) {
            const auto b = [&](std::size_t k) {
                return static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at + 4 * i + k]));
            };
            const std::uint32_t u = b(0) | (b(1) << 8) | (b(2) << 16) | (b(3) << 24);
            std::memcpy(data + i, &u, 4);
        }
    }
}

constexpr char kMagic[8] = {'S', 'T', 'D', 'A', 'I', '0', '0', '1'};

}  // namespace

void save_model(const std::filesystem::path& path, const Model& model) {
    require(model.tensor_count() > 0, "save_model: model is uninitialized");
    const BackboneConfig& cfg = model.config();
    nlohmann::json header;
    header["format"] = "stdai-model";
    header["version"] = 1;
    header["config"] = {{"genes", cfg.genes},
                        {"base_width", cfg.base_width},
                        {"depth", cfg.depth},
                        {"feature_channels", cfg.feature_channels},
                        {"extractor", cfg.extractor}};
    header["has_pdl"] = model.has_pdl();
    header["pdl_sites"] = model.pdl_sites();
    nlohmann::json tensors = nlohmann::json::array();
    for (std::size_t i = 0; i < model.tensor_count(); ++i)
        tensors.push_back({{"name", model.name_at(i)}, {"shape", model.tensor_at(i).shape}});
    header["tensors"] = std::move(tensors);

    const std::string hdr = header.dump();
    require(hdr.size() <= 0xffffffffu, "save_model: header too large");

    std::string out;
    out.append(kMagic, sizeof(kMagic));
    const std::uint32_t len = static_cast<std::uint32_t>(hdr.size());
    out.push_back(static_cast<char>(len & 0xff));
    out.push_back(static_cast<char>((len >> 8) & 0xff));
    out.push_back(static_cast<char>((len >> 16) & 0xff));
    out.push_back(static_cast<char>((len >> 24) & 0xff));
    out += hdr;
    for (std::size_t i = 0; i < model.tensor_count(); ++i) {
        const Tensor& t = model.tensor_at(i);
        append_f32_le(out, t.data.data(), t.numel());
    }

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    require(os.good(), "cannot open '" + path.string() + "' for writing");
    os.write(out.data(), static_cast<std::streamsize>(out.size()));
    os.flush();
    require(os.good(), "failed writing '" + path.string() + "'");
}

Model load_model(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    require(is.good(), "cannot open checkpoint '" + path.string() + "'");
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    require(bytes.size() >= 12, "checkpoint '" + path.string() + "' is truncated");
    require(std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) == 0,
            "'" + path.string() + "' is not a model checkpoint");
    const auto b = [&](std::size_t k) {
        return static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[8 + k]));
    };
    const std::uint32_t hlen = b(0) | (b(1) << 8) | (b(2) << 16) | (b(3) << 24);
    require(bytes.size() >= 12 + static_cast<std::size_t>(hlen),
            "checkpoint '" + path.string() + "' is truncated");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(12, hlen));
    } catch (const nlohmann::json::exception& e) {
        throw Error("checkpoint '" + path.string() + "' has a corrupt header: " + e.what());
    }

    Model m;
    try {
        require(header.at("format").get<std::string>() == "stdai-model",
                "unexpected checkpoint format tag");
        const auto& jc = header.at("config");
        m.cfg_.genes = jc.at("genes").get<int>();
        m.cfg_.base_width = jc.at("base_width").get<int>();
        m.cfg_.depth = jc.at("depth").get<int>();
        m.cfg_.feature_channels = jc.at("feature_channels").get<int>();
        m.cfg_.extractor = jc.at("extractor").get<std::string>();
        m.cfg_.validate();
        m.has_pdl_ = header.at("has_pdl").get<bool>();
        m.pdl_sites_ = header.at("pdl_sites").get<std::vector<std::string>>();

        std::vector<TensorSpec> expected = base_layout(m.cfg_);
        if (m.has_pdl_) {
            for (const auto& [site, channels] : site_layout(m.cfg_)) {
                expected.push_back({"pdl." + site + ".a", {channels}});
                expected.push_back({"pdl." + site + ".b", {channels}});
            }
        }
        const auto& jt = header.at("tensors");
        require(jt.is_array() && jt.size() == expected.size(),
                "tensor list does not match the declared config");
        for (std::size_t i = 0; i < expected.size(); ++i) {
            require(jt[i].at("name").get<std::string>() == expected[i].name &&
                        jt[i].at("shape").get<std::vector<int>>() == expected[i].shape,
                    "tensor '" + expected[i].name + "' missing or mis-shaped");
        }
        for (const TensorSpec& spec : expected) {
            m.names_.push_back(spec.name);
            m.values_.push_back(Tensor::zeros(spec.shape));
        }
        if (m.has_pdl_) {
            std::vector<std::string> sites;
            for (const auto& [site, channels] : site_layout(m.cfg_)) sites.push_back(site);
            require(m.pdl_sites_ == sites, "recalibration site list does not match the config");
        } else {
            require(m.pdl_sites_.empty(), "recalibration sites declared without has_pdl");
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error("checkpoint '" + path.string() + "' has an invalid header: " + e.what());
    } catch (const Error& e) {
        throw Error("checkpoint '" + path.string() + "': " + e.what());
    }

    std::size_t payload = 0;
    for (const Tensor& t : m.values_) payload += t.numel() * 4;
    require(bytes.size() == 12 + hlen + payload,
            "checkpoint '" + path.string() + "' payload size mismatch: expected " +
                std::to_string(12 + hlen + payload) + " bytes, file has " +
                std::to_string(bytes.size()));
    std::size_t at = 12 + hlen;
    for (Tensor& t : m.values_) {
        read_f32_le(bytes, at, t.data.data(), t.numel());
        at += t.numel() * 4;
    }
    return m;
}

}  // namespace stdai
