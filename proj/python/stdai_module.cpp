// numpy-facing bindings over the core operations: phantom synthesis, the
// full pipeline run, registration, sampling, confidence, metrics, and the
// measurement override.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "stdai/align.hpp"
#include "stdai/bundle.hpp"
#include "stdai/csg.hpp"
#include "stdai/error.hpp"
#include "stdai/image.hpp"
#include "stdai/metrics.hpp"
#include "stdai/phantom.hpp"
#include "stdai/pipeline.hpp"
#include "stdai/runner.hpp"
#include "stdai/sampling.hpp"
#include "stdai/tensor.hpp"

namespace py = pybind11;
using namespace stdai;

namespace {

using FloatArr = py::array_t<float, py::array::c_style | py::array::forcecast>;
using ByteArr = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

Tensor tensor3(const FloatArr& a, const char* what) {
    if (a.ndim() != 3) throw Error(std::string(what) + ": expected a (genes, H, W) array");
    Tensor t = Tensor::zeros({static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)),
                              static_cast<int>(a.shape(2))});
    std::memcpy(t.data.data(), a.data(), t.numel() * sizeof(float));
    return t;
}

ImageF planef(const FloatArr& a, const char* what) {
    if (a.ndim() != 2) throw Error(std::string(what) + ": expected an (H, W) array");
    ImageF img = ImageF::create(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)));
    std::memcpy(img.data.data(), a.data(), img.data.size() * sizeof(float));
    return img;
}

std::vector<std::uint8_t> mask2(const ByteArr& a, int h, int w, const char* what) {
    if (a.ndim() != 2 || a.shape(0) != h || a.shape(1) != w)
        throw Error(std::string(what) + ": mask must be (H, W) matching the data");
    return {a.data(), a.data() + static_cast<std::size_t>(h) * w};
}

ImageU8 rgb(const ByteArr& a, const char* what) {
    if (a.ndim() != 3 || a.shape(2) != 3)
        throw Error(std::string(what) + ": expected an (H, W, 3) uint8 array");
    ImageU8 img = ImageU8::create(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)));
    std::memcpy(img.data.data(), a.data(), img.data.size());
    return img;
}

py::array_t<float> to_numpy(const Tensor& t) {
    py::array_t<float> out({t.shape[0], t.shape[1], t.shape[2]});
    std::memcpy(out.mutable_data(), t.data.data(), t.numel() * sizeof(float));
    return out;
}

py::array_t<float> plane_to_numpy(const std::vector<float>& v, int h, int w) {
    py::array_t<float> out({h, w});
    std::memcpy(out.mutable_data(), v.data(), v.size() * sizeof(float));
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "2.5D spatial expression imputation core";

    // translators run newest-first, so the subclass registers after the base
    py::register_exception<Error>(m, "CoreError", PyExc_RuntimeError);
    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

    m.def(
        "phantom_bundle",
        [](const std::filesystem::path& path, int width, int height, int genes, int adjacent,
           std::uint64_t seed, int blobs, double rotation_deg, double translation_px,
           double gain_lo, double gain_hi, bool identity) {
            PhantomConfig cfg;
            cfg.width = width;
            cfg.height = height;
            cfg.genes = genes;
            cfg.adjacent = adjacent;
            cfg.seed = seed;
            cfg.blobs = blobs;
            cfg.rotation_deg = rotation_deg;
            cfg.translation_px = translation_px;
            cfg.gain_lo = gain_lo;
            cfg.gain_hi = gain_hi;
            if (identity) cfg = identity_phantom(cfg);
            write_bundle(path, synth_phantom(cfg));
        },
        py::arg("path"), py::arg("width") = 64, py::arg("height") = 64, py::arg("genes") = 4,
        py::arg("adjacent") = 2, py::arg("seed") = 0, py::arg("blobs") = 14,
        py::arg("rotation_deg") = 5.0, py::arg("translation_px") = 4.0, py::arg("gain_lo") = 0.85,
        py::arg("gain_hi") = 1.3, py::arg("identity") = false,
        "Synthesize a phantom sample and write it as a bundle directory.");

    m.def(
        "run",
        [](const std::filesystem::path& bundle, const std::filesystem::path& out,
           std::uint64_t seed, const std::string& config_json, const std::string& toggles) {
            RunConfig cfg;
            if (!config_json.empty()) {
                const auto tmp = std::filesystem::temp_directory_path() /
                                 ("stdai_py_cfg_" + std::to_string(::getpid()) + ".json");
                {
                    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
                    os << config_json;
                }
                try {
                    cfg = parse_run_config(tmp);
                } catch (...) {
                    std::filesystem::remove(tmp);
                    throw;
                }
                std::filesystem::remove(tmp);
            }
            if (!toggles.empty()) apply_toggle_list(cfg, toggles);
            RunSummary s;
            {
                py::gil_scoped_release release;
                s = run_pipeline(bundle, cfg, seed, out);
            }
            py::dict d;
            d["has_metrics"] = s.has_metrics;
            d["psnr_db"] = s.psnr_db;
            d["ssim"] = s.ssim;
            d["mae"] = s.mae;
            d["pcc"] = s.pcc;
            d["dir"] = s.dir.string();
            return d;
        },
        py::arg("bundle"), py::arg("out"), py::arg("seed") = 0, py::arg("config") = "",
        py::arg("toggles") = "",
        "Run the full pipeline on a bundle; `config` is the JSON config text, "
        "`toggles` a comma list like \"csa,fmdr\" or \"none\".");

    m.def(
        "align",
        [](const ByteArr& central, const ByteArr& adjacent, std::uint64_t seed,
           const std::string& family) {
            AlignParams p;
            p.ransac.family = transform_family_from_string(family);
            const ImageU8 a = rgb(central, "align");
            const ImageU8 b = rgb(adjacent, "align");
            AlignOutcome out;
            {
                py::gil_scoped_release release;
                out = align_images(a, b, p, seed);
            }
            py::array_t<double> t({2, 3});
            std::memcpy(t.mutable_data(), out.transform.m.data(), 6 * sizeof(double));
            py::dict d;
            d["transform"] = t;
            d["keypoints_central"] = out.keypoints_central;
            d["keypoints_adjacent"] = out.keypoints_adjacent;
            d["matches"] = out.matches;
            d["inliers"] = out.inliers;
            d["low_confidence"] = out.low_confidence;
            return d;
        },
        py::arg("central"), py::arg("adjacent"), py::arg("seed") = 0,
        py::arg("family") = "similarity",
        "Estimate the central-to-adjacent transform between two RGB images.");

    m.def(
        "grid_mask",
        [](int h, int w, int stride, int off_r, int off_c) {
            const auto mask = grid_mask(h, w, GridSpec{stride, off_r, off_c});
            py::array_t<std::uint8_t> out({h, w});
            std::memcpy(out.mutable_data(), mask.data(), mask.size());
            return out;
        },
        py::arg("h"), py::arg("w"), py::arg("stride") = 2, py::arg("off_r") = 0,
        py::arg("off_c") = 0, "One observed site per stride-by-stride block.");

    m.def(
        "metrics",
        [](const FloatArr& pred, const FloatArr& truth, const ByteArr& population) {
            const ImageF p = planef(pred, "metrics");
            const ImageF t = planef(truth, "metrics");
            const auto pop = mask2(population, p.h, p.w, "metrics");
            const GeneMetrics g = evaluate_plane(p, t, pop);
            py::dict d;
            d["psnr_db"] = g.psnr_db;
            d["ssim"] = g.ssim;
            d["mae"] = g.mae;
            d["pcc"] = g.pcc;
            return d;
        },
        py::arg("pred"), py::arg("truth"), py::arg("population"),
        "PSNR/SSIM/MAE/PCC of one gene plane over the population mask.");

    m.def(
        "confidence",
        [](const FloatArr& pseudo, const FloatArr& measured, const ByteArr& mask, int stride,
           int off_r, int off_c) {
            const Tensor ps = tensor3(pseudo, "confidence");
            const Tensor ms = tensor3(measured, "confidence");
            const auto mk = mask2(mask, ps.shape[1], ps.shape[2], "confidence");
            const GridSpec g{stride, off_r, off_c};
            const auto wobs = observed_confidence(ps, ms, mk);
            const DenseConfidence dense =
                propagate_confidence(wobs, mk, ps.shape[1], ps.shape[2], g);
            const auto fin = finalize_confidence(dense.w, mk);
            return py::make_tuple(plane_to_numpy(fin, ps.shape[1], ps.shape[2]),
                                  dense.bilinear_fallback);
        },
        py::arg("pseudo"), py::arg("measured"), py::arg("mask"), py::arg("stride") = 2,
        py::arg("off_r") = 0, py::arg("off_c") = 0,
        "Full confidence chain: per-site scores, bicubic propagation, unit-mean "
        "finalization. Returns (weights, bilinear_fallback).");

    m.def(
        "dco",
        [](const FloatArr& pred, const FloatArr& measured, const ByteArr& mask) {
            const Tensor p = tensor3(pred, "dco");
            const Tensor ms = tensor3(measured, "dco");
            const auto mk = mask2(mask, p.shape[1], p.shape[2], "dco");
            return to_numpy(dco(p, ms, mk));
        },
        py::arg("pred"), py::arg("measured"), py::arg("mask"),
        "Measured values override predictions wherever the mask is set; bit-exact.");

    m.def(
        "volume",
        [](const std::filesystem::path& dir) {
            std::ifstream is(dir / "volume.json");
            if (!is.good()) throw Error("volume: cannot open " + (dir / "volume.json").string());
            const nlohmann::json j = nlohmann::json::parse(is);
            const int W = j.at("width").get<int>();
            const int H = j.at("height").get<int>();
            const int G = static_cast<int>(j.at("genes").size());
            py::list sections;
            for (const auto& sec : j.at("sections")) {
                const auto raw = read_f32(dir / sec.at("file").get<std::string>(),
                                          static_cast<std::size_t>(G) * H * W);
                py::array_t<float> arr({G, H, W});
                std::memcpy(arr.mutable_data(), raw.data(), raw.size() * sizeof(float));
                py::dict d;
                d["section_index"] = sec.at("section_index").get<int>();
                d["provenance"] = sec.at("provenance").get<std::string>();
                d["expression"] = arr;
                sections.append(d);
            }
            return sections;
        },
        py::arg("dir"),
        "Read an assembled volume directory: list of {section_index, provenance, expression}.");
}
