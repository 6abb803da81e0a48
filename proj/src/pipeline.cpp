#include "stdai/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"
#include "stdai/error.hpp"
#include "stdai/fmt.hpp"
#include "stdai/optim.hpp"

namespace stdai {

namespace {

void check_loss_shapes(const Tensor& pred, const Tensor& target, std::size_t mask_size,
                       const char* what) {
    require(pred.rank() == 3, std::string(what) + ": prediction must be [G,H,W]");
    require(pred.same_shape(target), std::string(what) + ": target shape " + target.shape_str() +
                                         " does not match prediction " + pred.shape_str());
    const std::size_t plane = static_cast<std::size_t>(pred.shape[1]) * pred.shape[2];
    require(mask_size == plane, std::string(what) + ": per-pixel vector has " +
                                    std::to_string(mask_size) + " entries, expected " +
                                    std::to_string(plane));
}

Tensor tile_plane(const std::vector<float>& plane, int G, int H, int W) {
    Tensor t = Tensor::zeros({G, H, W});
    const std::size_t n = plane.size();
    for (int g = 0; g < G; ++g)
        std::memcpy(t.data.data() + static_cast<std::size_t>(g) * n, plane.data(),
                    n * sizeof(float));
    return t;
}

}  // namespace

int loss_central_node(Tape& tape, int pred, const Tensor& target,
                      const std::vector<std::uint8_t>& valid) {
    // copy the dims up front: creating nodes below may grow the tape's
    // storage and invalidate references into it
    int G, H, W;
    {
        const Tensor& p = tape.value(pred);
        check_loss_shapes(p, target, valid.size(), "loss_central");
        G = p.shape[0];
        H = p.shape[1];
        W = p.shape[2];
    }
    std::size_t n = 0;
    std::vector<float> plane(valid.size(), 0.0f);
    for (std::size_t i = 0; i < valid.size(); ++i)
        if (valid[i]) {
            plane[i] = 1.0f;
            ++n;
        }
    require(n > 0, "loss_central: no valid pixels");
    const int t = tape.leaf(target, false);
    const int w = tape.leaf(tile_plane(plane, G, H, W), false);
    const int d = tape.sub(pred, t);
    const int sq = tape.mul(d, d);
    return tape.scale(tape.sum_all(tape.mul(sq, w)), static_cast<float>(1.0 / static_cast<double>(n)));
}

double loss_central(const Tensor& pred, const Tensor& target,
                    const std::vector<std::uint8_t>& valid) {
    check_loss_shapes(pred, target, valid.size(), "loss_central");
    const int G = pred.shape[0];
    const std::size_t plane = valid.size();
    std::size_t n = 0;
    double acc = 0.0;
    for (std::size_t i = 0; i < plane; ++i) {
        if (!valid[i]) continue;
        ++n;
        for (int g = 0; g < G; ++g) {
            const std::size_t at = static_cast<std::size_t>(g) * plane + i;
            const double d = static_cast<double>(pred.data[at]) - target.data[at];
            acc += d * d;
        }
    }
    require(n > 0, "loss_central: no valid pixels");
    return acc / static_cast<double>(n);
}

int loss_adjacent_node(Tape& tape, int pred, const Tensor& target,
                       const std::vector<float>& weights) {
    int G, H, W;
    {
        const Tensor& p = tape.value(pred);
        check_loss_shapes(p, target, weights.size(), "loss_adjacent");
        G = p.shape[0];
        H = p.shape[1];
        W = p.shape[2];
    }
    for (float w : weights) require(w >= 0.0f, "loss_adjacent: negative confidence weight");
    const int t = tape.leaf(target, false);
    const int w = tape.leaf(tile_plane(weights, G, H, W), false);
    const int d = tape.sub(pred, t);
    const int sq = tape.mul(d, d);
    return tape.scale(tape.sum_all(tape.mul(sq, w)),
                      static_cast<float>(1.0 / static_cast<double>(weights.size())));
}

double loss_adjacent(const Tensor& pred, const Tensor& target, const std::vector<float>& weights) {
    check_loss_shapes(pred, target, weights.size(), "loss_adjacent");
    const int G = pred.shape[0];
    const std::size_t plane = weights.size();
    double acc = 0.0;
    for (std::size_t i = 0; i < plane; ++i) {
        require(weights[i] >= 0.0f, "loss_adjacent: negative confidence weight");
        double sq = 0.0;
        for (int g = 0; g < G; ++g) {
            const std::size_t at = static_cast<std::size_t>(g) * plane + i;
            const double d = static_cast<double>(pred.data[at]) - target.data[at];
            sq += d * d;
        }
        acc += static_cast<double>(weights[i]) * sq;
    }
    return acc / static_cast<double>(plane);
}

SectionView central_view(const AlignedCentral& warped, const GridSpec& grid,
                         const BackboneConfig& cfg, const NormStats& stats) {
    require(warped.expression.rank() == 3, "central_view: expression must be [G,H,W]");
    const int H = warped.expression.shape[1];
    const int W = warped.expression.shape[2];
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    require(warped.validity.size() == plane, "central_view: validity size mismatch");

    const auto gm = grid_mask(H, W, grid);
    std::vector<std::uint8_t> observed(plane, 0);
    for (std::size_t i = 0; i < plane; ++i) observed[i] = (gm[i] && warped.validity[i]) ? 1 : 0;

    SectionView v;
    v.target = normalize_expression(warped.expression, stats);
    v.input = pack_input(warped.histology, v.target, observed);
    v.features = extract_histology_features(warped.histology, cfg).map;
    v.observed = std::move(observed);
    v.loss_mask = warped.validity;
    return v;
}

SectionView adjacent_view(const Section& adj, const BackboneConfig& cfg, const NormStats& stats) {
    require(adj.expression.rank() == 3, "adjacent_view: expression must be [G,H,W]");
    const std::size_t plane =
        static_cast<std::size_t>(adj.expression.shape[1]) * adj.expression.shape[2];
    require(adj.mask.size() == plane, "adjacent_view: mask size mismatch");

    SectionView v;
    v.target = normalize_expression(adj.expression, stats);
    v.input = pack_input(adj.histology, v.target, adj.mask);
    v.features = extract_histology_features(adj.histology, cfg).map;
    v.observed = adj.mask;
    v.loss_mask.assign(plane, 1);
    return v;
}

void write_train_log(const std::filesystem::path& path, const std::vector<TrainLogRow>& rows) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    require(os.good(), "cannot open '" + path.string() + "' for writing");
    os << "epoch,loss_central,loss_adjacent,lr\n";
    for (const TrainLogRow& r : rows)
        os << r.epoch << ',' << num_str(r.loss_central) << ',' << num_str(r.loss_adjacent) << ','
           << num_str(r.lr) << '\n';
    os.flush();
    require(os.good(), "failed writing '" + path.string() + "'");
}

TrainResult pretrain_pseudo_network(Model& model, const SectionView& central, int epochs,
                                    double lr0) {
    require(epochs >= 0, "pretrain: negative epoch count");
    require(lr0 > 0.0, "pretrain: learning rate must be positive");
    TrainResult res;
    if (epochs == 0) return res;

    const TrainablePred all = trainable_subset(TrainStage::pretrain);
    Adam adam;
    CosineSchedule sched(lr0, epochs);
    for (int e = 0; e < epochs; ++e) {
        Tape tape;
        const ForwardResult fr = model.forward(tape, central.input, central.features, all, false);
        const int loss = loss_central_node(tape, fr.output, central.target, central.loss_mask);
        const double L = tape.value(loss).data[0];
        const double lr = sched.lr(e);
        res.log.push_back({e, L, 0.0, lr});
        if (!std::isfinite(L)) {
            res.diverged = true;
            break;
        }
        tape.backward(loss);
        adam.start_step(lr);
        for (const auto& [name, id] : fr.param_nodes)
            if (tape.has_gradient(id)) adam.update(name, model.tensor(name), tape.gradient(id));
    }
    return res;
}

Tensor generate_pseudo_labels(const Model& theta0, const SectionView& adjacent) {
    Tensor out = theta0.eval(adjacent.input, adjacent.features, false);
    require(out.all_finite(), "pseudo labels contain non-finite values");
    return out;
}

Tensor adjacent_targets(const Tensor& pseudo, const Tensor& measured_norm,
                        const std::vector<std::uint8_t>& mask, bool literal_eq5) {
    require(pseudo.rank() == 3, "adjacent_targets: pseudo labels must be [G,H,W]");
    require(pseudo.same_shape(measured_norm), "adjacent_targets: shape mismatch");
    const std::size_t plane = static_cast<std::size_t>(pseudo.shape[1]) * pseudo.shape[2];
    require(mask.size() == plane, "adjacent_targets: mask size mismatch");
    Tensor out = pseudo;
    if (literal_eq5) return out;
    const int G = pseudo.shape[0];
    for (int g = 0; g < G; ++g) {
        const std::size_t base = static_cast<std::size_t>(g) * plane;
        for (std::size_t i = 0; i < plane; ++i)
            if (mask[i]) out.data[base + i] = measured_norm.data[base + i];
    }
    return out;
}

namespace {

bool bits_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    if (a.numel() == 0) return true;
    return std::memcmp(a.data.data(), b.data.data(), a.numel() * sizeof(float)) == 0;
}

}  // namespace

FmdrResult fmdr_refine(const Model& theta0, const SectionView& central,
                       const SectionView& adjacent, const Tensor& adj_target,
                       const std::vector<float>& weights, int epochs, double lr0, bool use_pdl) {
    require(epochs >= 0, "fmdr: negative epoch count");
    require(lr0 > 0.0, "fmdr: learning rate must be positive");

    FmdrResult res;
    res.theta1 = theta0;
    res.theta2 = theta0;
    if (use_pdl) res.theta2.insert_pdls();

    const TrainablePred t1 = trainable_subset(TrainStage::fmdr_central);
    const TrainablePred t2 = trainable_subset(TrainStage::fmdr_adjacent);

    // Frozen backbones over fixed inputs: the trunk activations never change,
    // so each branch without recalibration layers re-runs only its head.
    const Tensor trunk1 = res.theta1.trunk_eval(central.input, central.features, false);
    Tensor trunk2;
    if (!use_pdl) trunk2 = res.theta2.trunk_eval(adjacent.input, adjacent.features, false);

    if (epochs > 0) {
        Adam adam;
        CosineSchedule sched(lr0, epochs);
        for (int e = 0; e < epochs; ++e) {
            Tape tape;
            const ForwardResult f1 = res.theta1.head_forward(tape, trunk1, t1);
            const ForwardResult f2 =
                use_pdl ? res.theta2.forward(tape, adjacent.input, adjacent.features, t2, true)
                        : res.theta2.head_forward(tape, trunk2, t2);
            const int l1 = loss_central_node(tape, f1.output, central.target, central.loss_mask);
            const int l2 = loss_adjacent_node(tape, f2.output, adj_target, weights);
            const int total = tape.add(l1, l2);
            const double L1 = tape.value(l1).data[0];
            const double L2 = tape.value(l2).data[0];
            const double lr = sched.lr(e);
            res.train.log.push_back({e, L1, L2, lr});
            if (!std::isfinite(L1) || !std::isfinite(L2)) {
                res.train.diverged = true;
                break;
            }
            tape.backward(total);
            adam.start_step(lr);
            for (const auto& [name, id] : f1.param_nodes)
                if (tape.has_gradient(id))
                    adam.update("theta1." + name, res.theta1.tensor(name), tape.gradient(id));
            for (const auto& [name, id] : f2.param_nodes)
                if (tape.has_gradient(id))
                    adam.update("theta2." + name, res.theta2.tensor(name), tape.gradient(id));
        }
    }

    for (std::size_t i = 0; i < theta0.tensor_count(); ++i) {
        const std::string& n = theta0.name_at(i);
        if (n.rfind("head.", 0) == 0) continue;
        require(bits_equal(theta0.tensor_at(i), res.theta1.tensor(n)),
                "fmdr: frozen tensor '" + n + "' changed in the central branch");
        require(bits_equal(theta0.tensor_at(i), res.theta2.tensor(n)),
                "fmdr: frozen tensor '" + n + "' changed in the adjacent branch");
    }
    return res;
}

Tensor dco(const Tensor& pred, const Tensor& measured, const std::vector<std::uint8_t>& mask) {
    require(pred.rank() == 3, "dco: prediction must be [G,H,W]");
    require(pred.same_shape(measured), "dco: shape mismatch " + pred.shape_str() + " vs " +
                                           measured.shape_str());
    const std::size_t plane = static_cast<std::size_t>(pred.shape[1]) * pred.shape[2];
    require(mask.size() == plane, "dco: mask size mismatch");
    Tensor out = pred;
    const int G = pred.shape[0];
    for (int g = 0; g < G; ++g) {
        const std::size_t base = static_cast<std::size_t>(g) * plane;
        for (std::size_t i = 0; i < plane; ++i)
            if (mask[i]) out.data[base + i] = measured.data[base + i];
    }
    return out;
}

VolumePrediction assemble_volume(const Sample& sample, const std::map<int, Tensor>& adjacent_finals,
                                 const std::string& adjacent_provenance) {
    sample.validate();
    for (const auto& [idx, t] : adjacent_finals) {
        bool known = false;
        for (const Section& s : sample.sections)
            if (s.section_index == idx && s.role == "adjacent") known = true;
        require(known, "assemble_volume: prediction for unknown adjacent section " +
                           std::to_string(idx));
    }

    VolumePrediction vol;
    std::vector<int> missing;
    for (const Section& s : sample.sections) {
        if (s.role == "central") {
            vol.slices.push_back(s.expression);
            vol.provenance.push_back("measured");
        } else {
            const auto it = adjacent_finals.find(s.section_index);
            if (it == adjacent_finals.end()) {
                missing.push_back(s.section_index);
                continue;
            }
            require(it->second.same_shape(s.expression),
                    "assemble_volume: prediction for section " + std::to_string(s.section_index) +
                        " has shape " + it->second.shape_str() + ", expected " +
                        s.expression.shape_str());
            vol.slices.push_back(it->second);
            vol.provenance.push_back(adjacent_provenance);
        }
        vol.section_indices.push_back(s.section_index);
    }
    if (!missing.empty()) {
        std::string list;
        for (std::size_t i = 0; i < missing.size(); ++i)
            list += (i ? ", " : "") + std::to_string(missing[i]);
        throw Error("assemble_volume: missing predictions for section(s) " + list);
    }
    return vol;
}

void write_volume(const std::filesystem::path& dir, const Sample& sample,
                  const VolumePrediction& vol) {
    require(vol.section_indices.size() == vol.slices.size() &&
                vol.provenance.size() == vol.slices.size(),
            "write_volume: inconsistent volume");
    std::filesystem::create_directories(dir);
    nlohmann::json j;
    j["format"] = "stdai-volume";
    j["version"] = 1;
    j["sample_id"] = sample.sample_id;
    j["width"] = sample.width;
    j["height"] = sample.height;
    j["genes"] = sample.genes;
    nlohmann::json sections = nlohmann::json::array();
    for (std::size_t i = 0; i < vol.slices.size(); ++i) {
        const std::string file = "expr_" + std::to_string(vol.section_indices[i]) + ".f32";
        sections.push_back({{"section_index", vol.section_indices[i]},
                            {"provenance", vol.provenance[i]},
                            {"file", file}});
        write_f32(dir / file, vol.slices[i].data.data(), vol.slices[i].numel());
    }
    j["sections"] = std::move(sections);
    std::ofstream os(dir / "volume.json", std::ios::binary | std::ios::trunc);
    require(os.good(), "cannot open '" + (dir / "volume.json").string() + "' for writing");
    os << j.dump(2) << '\n';
    os.flush();
    require(os.good(), "failed writing '" + (dir / "volume.json").string() + "'");
}

}  // namespace stdai
