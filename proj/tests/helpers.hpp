#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "stdai/autodiff.hpp"
#include "stdai/rng.hpp"
#include "stdai/tensor.hpp"

// Test-side reference implementations, kept independent of the library:
// plain double-precision loops with no shared code, so disagreements
// point at real defects rather than shared bugs.
namespace testutil {

struct DT {
    std::vector<int> shape;
    std::vector<double> v;

    static DT zeros(std::vector<int> s) {
        DT t;
        t.shape = std::move(s);
        std::size_t n = 1;
        for (int d : t.shape) n *= static_cast<std::size_t>(d);
        t.v.assign(n, 0.0);
        return t;
    }
};

inline DT to_ref(const stdai::Tensor& t) {
    DT r;
    r.shape = t.shape;
    r.v.assign(t.data.begin(), t.data.end());
    return r;
}

inline stdai::Tensor to_tensor(const DT& t) {
    std::vector<float> f(t.v.begin(), t.v.end());
    return stdai::Tensor::from(t.shape, std::move(f));
}

inline DT ref_add(const DT& a, const DT& b) {
    DT o = a;
    for (std::size_t i = 0; i < o.v.size(); ++i) o.v[i] += b.v[i];
    return o;
}

inline DT ref_sub(const DT& a, const DT& b) {
    DT o = a;
    for (std::size_t i = 0; i < o.v.size(); ++i) o.v[i] -= b.v[i];
    return o;
}

inline DT ref_mul(const DT& a, const DT& b) {
    DT o = a;
    for (std::size_t i = 0; i < o.v.size(); ++i) o.v[i] *= b.v[i];
    return o;
}

inline DT ref_scale(const DT& a, double s) {
    DT o = a;
    for (double& x : o.v) x *= s;
    return o;
}

inline DT ref_leaky_relu(const DT& a, double slope) {
    DT o = a;
    for (double& x : o.v) x = x >= 0.0 ? x : slope * x;
    return o;
}

inline DT ref_conv2d(const DT& in, const DT& w, const DT* bias) {
    const int Cin = in.shape[0], H = in.shape[1], W = in.shape[2];
    const int Cout = w.shape[0], kh = w.shape[2], kw = w.shape[3];
    const int ph = kh / 2, pw = kw / 2;
    DT o = DT::zeros({Cout, H, W});
    for (int co = 0; co < Cout; ++co)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double acc = bias ? bias->v[static_cast<std::size_t>(co)] : 0.0;
                for (int ci = 0; ci < Cin; ++ci)
                    for (int dy = 0; dy < kh; ++dy)
                        for (int dx = 0; dx < kw; ++dx) {
                            const int sy = y + dy - ph, sx = x + dx - pw;
                            if (sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
                            acc += in.v[(static_cast<std::size_t>(ci) * H + sy) * W + sx] *
                                   w.v[((static_cast<std::size_t>(co) * Cin + ci) * kh + dy) * kw + dx];
                        }
                o.v[(static_cast<std::size_t>(co) * H + y) * W + x] = acc;
            }
    return o;
}

inline DT ref_max_pool2(const DT& in) {
    const int C = in.shape[0], H = in.shape[1], W = in.shape[2];
    DT o = DT::zeros({C, H / 2, W / 2});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H / 2; ++y)
            for (int x = 0; x < W / 2; ++x) {
                double m = -1e300;
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx)
                        m = std::max(m, in.v[(static_cast<std::size_t>(c) * H + 2 * y + dy) * W +
                                             2 * x + dx]);
                o.v[(static_cast<std::size_t>(c) * (H / 2) + y) * (W / 2) + x] = m;
            }
    return o;
}

inline DT ref_upsample2(const DT& in) {
    const int C = in.shape[0], H = in.shape[1], W = in.shape[2];
    DT o = DT::zeros({C, 2 * H, 2 * W});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < 2 * H; ++y)
            for (int x = 0; x < 2 * W; ++x)
                o.v[(static_cast<std::size_t>(c) * 2 * H + y) * 2 * W + x] =
                    in.v[(static_cast<std::size_t>(c) * H + y / 2) * W + x / 2];
    return o;
}

inline DT ref_concat(const DT& a, const DT& b) {
    DT o = DT::zeros({a.shape[0] + b.shape[0], a.shape[1], a.shape[2]});
    std::copy(a.v.begin(), a.v.end(), o.v.begin());
    std::copy(b.v.begin(), b.v.end(), o.v.begin() + static_cast<std::ptrdiff_t>(a.v.size()));
    return o;
}

inline DT ref_channel_affine(const DT& x, const DT& a, const DT& b) {
    const int C = x.shape[0], H = x.shape[1], W = x.shape[2];
    DT o = x;
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < H * W; ++i)
            o.v[static_cast<std::size_t>(c) * H * W + i] =
                (1.0 + a.v[static_cast<std::size_t>(c)]) *
                    x.v[static_cast<std::size_t>(c) * H * W + i] +
                b.v[static_cast<std::size_t>(c)];
    return o;
}

inline double ref_sum(const DT& a) {
    double s = 0.0;
    for (double x : a.v) s += x;
    return s;
}

inline double ref_mean(const DT& a) { return ref_sum(a) / static_cast<double>(a.v.size()); }

inline stdai::Tensor rand_tensor(std::vector<int> shape, stdai::Rng& rng, float lo = -1.0f,
                                 float hi = 1.0f) {
    stdai::Tensor t = stdai::Tensor::zeros(std::move(shape));
    for (float& x : t.data) x = static_cast<float>(rng.uniform(lo, hi));
    return t;
}

// Central finite differences of a double-precision scalar function against
// the engine's analytic gradients.
struct GradReport {
    double max_rel = 0.0;  // where either magnitude exceeds `cutoff`
    double max_abs = 0.0;  // elsewhere
};

inline GradReport compare_gradients(
    std::vector<stdai::Tensor> leaves,
    const std::function<int(stdai::Tape&, const std::vector<int>&)>& build,
    const std::function<double(const std::vector<DT>&)>& ref, double eps = 1e-3,
    double cutoff = 1e-4) {
    stdai::Tape tape;
    std::vector<int> ids;
    for (const stdai::Tensor& t : leaves) ids.push_back(tape.leaf(t, true));
    const int loss = build(tape, ids);
    tape.backward(loss);

    std::vector<DT> refs;
    for (const stdai::Tensor& t : leaves) refs.push_back(to_ref(t));

    GradReport rep;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        // a leaf the graph never touched has no gradient entry; its analytic
        // gradient is zero and the finite difference must agree
        stdai::Tensor zero = stdai::Tensor::zeros(leaves[li].shape);
        const stdai::Tensor& g =
            tape.has_gradient(ids[li]) ? tape.gradient(ids[li]) : zero;
        for (std::size_t i = 0; i < refs[li].v.size(); ++i) {
            const double keep = refs[li].v[i];
            refs[li].v[i] = keep + eps;
            const double fp = ref(refs);
            refs[li].v[i] = keep - eps;
            const double fm = ref(refs);
            refs[li].v[i] = keep;
            const double fd = (fp - fm) / (2.0 * eps);
            const double an = static_cast<double>(g.data[i]);
            const double mag = std::max(std::fabs(fd), std::fabs(an));
            if (mag > cutoff)
                rep.max_rel = std::max(rep.max_rel, std::fabs(fd - an) / mag);
            else
                rep.max_abs = std::max(rep.max_abs, std::fabs(fd - an));
        }
    }
    return rep;
}

// Unique scratch directory, removed on destruction.
class TempDir {
public:
    TempDir() {
        static std::atomic<unsigned> counter{0};
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() /
                ("stdai_test_" + std::to_string(rd()) + "_" + std::to_string(counter.fetch_add(1)));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

}  // namespace testutil
