#include "stdai/bundle.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <set>

#include "json.hpp"
#include "stdai/error.hpp"

namespace stdai {

namespace {

using nlohmann::json;

constexpr const char* kFormat = "stdai-bundle";
constexpr int kVersion = 1;

void swap_f32_bytes(std::vector<float>& v) {
    auto* bytes = reinterpret_cast<unsigned char*>(v.data());
    for (std::size_t i = 0; i < v.size(); ++i) {
        std::swap(bytes[4 * i + 0], bytes[4 * i + 3]);
        std::swap(bytes[4 * i + 1], bytes[4 * i + 2]);
    }
}

std::filesystem::path section_dir(const std::filesystem::path& root, int index) {
    return root / ("section_" + std::to_string(index));
}

json transform_to_json(const Transform2D& t) {
    return json::array({t.m[0], t.m[1], t.m[2], t.m[3], t.m[4], t.m[5]});
}

Transform2D transform_from_json(const json& j, const std::string& where) {
    require(j.is_array() && j.size() == 6, where + ": transform must be an array of 6 numbers");
    Transform2D t;
    for (std::size_t i = 0; i < 6; ++i) t.m[i] = j[i].get<double>();
    return t;
}

void raw_minmax(const Sample& s, std::vector<double>& mins, std::vector<double>& maxs) {
    const Section& c = s.sections[s.central_pos()];
    const int G = s.gene_count();
    const std::size_t plane = static_cast<std::size_t>(s.height) * s.width;
    mins.assign(static_cast<std::size_t>(G), 0.0);
    maxs.assign(static_cast<std::size_t>(G), 0.0);
    for (int g = 0; g < G; ++g) {
        const float* p = c.expression.ptr() + static_cast<std::size_t>(g) * plane;
        double lo = p[0], hi = p[0];
        for (std::size_t i = 1; i < plane; ++i) {
            lo = std::min(lo, static_cast<double>(p[i]));
            hi = std::max(hi, static_cast<double>(p[i]));
        }
        mins[static_cast<std::size_t>(g)] = lo;
        maxs[static_cast<std::size_t>(g)] = hi;
    }
}

}  // namespace

std::size_t Sample::central_pos() const {
    for (std::size_t i = 0; i < sections.size(); ++i)
        if (sections[i].role == "central") return i;
    throw Error("sample '" + sample_id + "' has no central section");
}

std::vector<std::size_t> Sample::adjacent_pos() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < sections.size(); ++i)
        if (sections[i].role == "adjacent") out.push_back(i);
    return out;
}

void Sample::validate() const {
    require(width > 0 && height > 0, "sample '" + sample_id + "': non-positive dimensions");
    require(!genes.empty(), "sample '" + sample_id + "': empty gene panel");
    require(stat_min.size() == genes.size() && stat_max.size() == genes.size(),
            "sample '" + sample_id + "': stats do not cover the gene panel");
    require(!sections.empty(), "sample '" + sample_id + "': no sections");

    int centrals = 0;
    std::set<int> seen;
    int prev = sections.front().section_index - 1;
    for (const Section& s : sections) {
        const std::string where = "sample '" + sample_id + "' section " + std::to_string(s.section_index);
        require(s.role == "central" || s.role == "adjacent", where + ": unknown role '" + s.role + "'");
        require(seen.insert(s.section_index).second, where + ": duplicate section index");
        require(s.section_index > prev, where + ": sections must be ordered by index");
        prev = s.section_index;
        require(s.histology.w == width && s.histology.h == height, where + ": histology dims mismatch");
        const std::vector<int> want{gene_count(), height, width};
        require(s.expression.shape == want, where + ": expression shape " + s.expression.shape_str() +
                                                ", expected [G,H,W] = [" + std::to_string(gene_count()) +
                                                "," + std::to_string(height) + "," + std::to_string(width) + "]");
        require(s.mask.size() == static_cast<std::size_t>(width) * height, where + ": mask size mismatch");
        for (std::uint8_t v : s.mask) require(v == 0 || v == 1, where + ": mask values must be 0 or 1");
        if (s.role == "central") {
            ++centrals;
            require(s.section_index == central_index, where + ": role central but central_index is " +
                                                          std::to_string(central_index));
            for (std::uint8_t v : s.mask) require(v == 1, where + ": central mask must be all ones");
        }
        if (s.has_truth)
            require(s.truth.shape == want, where + ": truth shape " + s.truth.shape_str() + " mismatch");
    }
    require(centrals == 1, "sample '" + sample_id + "': expected exactly one central section, found " +
                               std::to_string(centrals));
}

void write_f32(const std::filesystem::path& path, const float* data, std::size_t count) {
    std::ofstream f(path, std::ios::binary);
    require(f.good(), "cannot open " + path.string() + " for writing");
    if constexpr (std::endian::native == std::endian::little) {
        f.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * 4));
    } else {
        std::vector<float> tmp(data, data + count);
        swap_f32_bytes(tmp);
        f.write(reinterpret_cast<const char*>(tmp.data()), static_cast<std::streamsize>(count * 4));
    }
    require(f.good(), "write failed for " + path.string());
}

std::vector<float> read_f32(const std::filesystem::path& path, std::size_t expected_count) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    require(f.good(), "cannot open " + path.string());
    const auto size = static_cast<std::size_t>(f.tellg());
    require(size == expected_count * 4, path.string() + ": expected " + std::to_string(expected_count * 4) +
                                            " bytes, found " + std::to_string(size));
    f.seekg(0);
    std::vector<float> out(expected_count);
    f.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(size));
    require(f.gcount() == static_cast<std::streamsize>(size), path.string() + ": truncated read");
    if constexpr (std::endian::native != std::endian::little) swap_f32_bytes(out);
    return out;
}

void write_bundle(const std::filesystem::path& dir, const Sample& sample_in) {
    Sample sample = sample_in;
    if (sample.stat_min.empty() && sample.stat_max.empty() && !sample.sections.empty() &&
        !sample.genes.empty()) {
        raw_minmax(sample, sample.stat_min, sample.stat_max);
    }
    sample.validate();
    std::filesystem::create_directories(dir);

    json manifest;
    manifest["format"] = kFormat;
    manifest["version"] = kVersion;
    manifest["sample_id"] = sample.sample_id;
    manifest["width"] = sample.width;
    manifest["height"] = sample.height;
    manifest["central_index"] = sample.central_index;
    manifest["genes"] = sample.genes;
    manifest["stats"] = {{"min", sample.stat_min}, {"max", sample.stat_max}};
    json sections = json::array();
    for (const Section& s : sample.sections) {
        json js;
        js["section_index"] = s.section_index;
        js["role"] = s.role;
        if (s.has_transform) js["transform"] = transform_to_json(s.transform);
        sections.push_back(js);
    }
    manifest["sections"] = sections;

    {
        std::ofstream f(dir / "manifest.json");
        require(f.good(), "cannot open " + (dir / "manifest.json").string() + " for writing");
        f << manifest.dump(2) << "\n";
        require(f.good(), "write failed for " + (dir / "manifest.json").string());
    }

    for (const Section& s : sample.sections) {
        const auto sdir = section_dir(dir, s.section_index);
        std::filesystem::create_directories(sdir);
        write_ppm(sdir / "histology.ppm", s.histology);
        write_f32(sdir / "expression.f32", s.expression.ptr(), s.expression.numel());
        {
            std::ofstream f(sdir / "mask.u8", std::ios::binary);
            require(f.good(), "cannot open " + (sdir / "mask.u8").string() + " for writing");
            f.write(reinterpret_cast<const char*>(s.mask.data()),
                    static_cast<std::streamsize>(s.mask.size()));
            require(f.good(), "write failed for " + (sdir / "mask.u8").string());
        }
        if (s.has_truth) write_f32(sdir / "truth.f32", s.truth.ptr(), s.truth.numel());
        if (s.has_truth_transform) {
            json jt;
            jt["transform"] = transform_to_json(s.truth_transform);
            std::ofstream f(sdir / "truth_transform.json");
            require(f.good(), "cannot open " + (sdir / "truth_transform.json").string() + " for writing");
            f << jt.dump(2) << "\n";
        }
    }
}

Sample read_bundle(const std::filesystem::path& dir) {
    const auto mpath = dir / "manifest.json";
    std::ifstream f(mpath);
    require(f.good(), "cannot open " + mpath.string());
    json manifest;
    try {
        manifest = json::parse(f);
    } catch (const std::exception& e) {
        throw Error(mpath.string() + ": " + e.what());
    }

    Sample sample;
    try {
        require(manifest.at("format").get<std::string>() == kFormat,
                mpath.string() + ": not a bundle manifest");
        require(manifest.at("version").get<int>() == kVersion, mpath.string() + ": unsupported version");
        sample.sample_id = manifest.at("sample_id").get<std::string>();
        sample.width = manifest.at("width").get<int>();
        sample.height = manifest.at("height").get<int>();
        sample.central_index = manifest.at("central_index").get<int>();
        sample.genes = manifest.at("genes").get<std::vector<std::string>>();
        sample.stat_min = manifest.at("stats").at("min").get<std::vector<double>>();
        sample.stat_max = manifest.at("stats").at("max").get<std::vector<double>>();

        for (const json& js : manifest.at("sections")) {
            Section s;
            s.section_index = js.at("section_index").get<int>();
            s.role = js.at("role").get<std::string>();
            if (js.contains("transform")) {
                s.transform = transform_from_json(js["transform"], mpath.string());
                s.has_transform = true;
            }
            sample.sections.push_back(std::move(s));
        }
    } catch (const json::exception& e) {
        throw Error(mpath.string() + ": " + e.what());
    }

    const std::size_t plane = static_cast<std::size_t>(sample.width) * sample.height;
    const std::size_t voxels = plane * sample.genes.size();
    for (Section& s : sample.sections) {
        const auto sdir = section_dir(dir, s.section_index);
        s.histology = read_ppm(sdir / "histology.ppm");
        s.expression = Tensor::from({sample.gene_count(), sample.height, sample.width},
                                    read_f32(sdir / "expression.f32", voxels));
        {
            const auto mp = sdir / "mask.u8";
            std::ifstream mf(mp, std::ios::binary | std::ios::ate);
            require(mf.good(), "cannot open " + mp.string());
            require(static_cast<std::size_t>(mf.tellg()) == plane,
                    mp.string() + ": expected " + std::to_string(plane) + " bytes");
            mf.seekg(0);
            s.mask.resize(plane);
            mf.read(reinterpret_cast<char*>(s.mask.data()), static_cast<std::streamsize>(plane));
            require(mf.gcount() == static_cast<std::streamsize>(plane), mp.string() + ": truncated read");
        }
        if (std::filesystem::exists(sdir / "truth.f32")) {
            s.truth = Tensor::from({sample.gene_count(), sample.height, sample.width},
                                   read_f32(sdir / "truth.f32", voxels));
            s.has_truth = true;
        }
        if (std::filesystem::exists(sdir / "truth_transform.json")) {
            std::ifstream tf(sdir / "truth_transform.json");
            require(tf.good(), "cannot open " + (sdir / "truth_transform.json").string());
            json jt;
            try {
                jt = json::parse(tf);
                s.truth_transform = transform_from_json(jt.at("transform"),
                                                        (sdir / "truth_transform.json").string());
            } catch (const json::exception& e) {
                throw Error((sdir / "truth_transform.json").string() + ": " + e.what());
            }
            s.has_truth_transform = true;
        }
    }
    sample.validate();
    return sample;
}

NormStats compute_central_stats(const Sample& sample) {
    sample.validate();
    NormStats st;
    raw_minmax(sample, st.min, st.max);
    for (std::size_t g = 0; g < st.min.size(); ++g) {
        require(st.max[g] > st.min[g], "gene '" + sample.genes[g] +
                                           "' is constant on the central section; cannot normalize");
    }
    return st;
}

namespace {

Tensor affine_per_gene(const Tensor& expr, const NormStats& s, bool forward) {
    require(expr.rank() == 3, "expression must be [G,H,W], got " + expr.shape_str());
    require(static_cast<std::size_t>(expr.shape[0]) == s.min.size(),
            "stats cover " + std::to_string(s.min.size()) + " genes, expression has " +
                std::to_string(expr.shape[0]));
    const std::size_t plane = static_cast<std::size_t>(expr.shape[1]) * expr.shape[2];
    Tensor out = Tensor::zeros(expr.shape);
    for (int g = 0; g < expr.shape[0]; ++g) {
        const double lo = s.min[static_cast<std::size_t>(g)];
        const double range = s.max[static_cast<std::size_t>(g)] - lo;
        const float* in = expr.ptr() + static_cast<std::size_t>(g) * plane;
        float* op = out.ptr() + static_cast<std::size_t>(g) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
            op[i] = forward ? static_cast<float>((in[i] - lo) / range)
                            : static_cast<float>(in[i] * range + lo);
        }
    }
    return out;
}

}  // namespace

Tensor normalize_expression(const Tensor& expr, const NormStats& s) {
    return affine_per_gene(expr, s, true);
}

Tensor denormalize_expression(const Tensor& expr, const NormStats& s) {
    return affine_per_gene(expr, s, false);
}

}  // namespace stdai
