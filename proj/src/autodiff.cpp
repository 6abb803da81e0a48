#include "stdai/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "stdai/error.hpp"

namespace stdai {

namespace {

struct ConvDims {
    int cin, H, W, cout, kh, kw, ph, pw;
};

ConvDims conv_dims(const Tensor& input, const Tensor& weight) {
    require(input.rank() == 3, "conv2d: input must be [C,H,W], got " + input.shape_str());
    require(weight.rank() == 4, "conv2d: weight must be [Cout,Cin,kh,kw], got " + weight.shape_str());
    require(weight.shape[1] == input.shape[0],
            "conv2d: weight expects " + std::to_string(weight.shape[1]) +
                " input channels, input has " + std::to_string(input.shape[0]));
    require(weight.shape[2] % 2 == 1 && weight.shape[3] % 2 == 1,
            "conv2d: kernel sides must be odd");
    ConvDims d;
    d.cin = input.shape[0];
    d.H = input.shape[1];
    d.W = input.shape[2];
    d.cout = weight.shape[0];
    d.kh = weight.shape[2];
    d.kw = weight.shape[3];
    d.ph = d.kh / 2;
    d.pw = d.kw / 2;
    return d;
}

void conv_forward(const float* in, const float* wgt, const float* bias, float* out,
                  const ConvDims& d) {
    const int plane = d.H * d.W;
    std::vector<double> acc(static_cast<std::size_t>(plane));
    for (int co = 0; co < d.cout; ++co) {
        std::fill(acc.begin(), acc.end(), bias ? static_cast<double>(bias[co]) : 0.0);
        for (int ci = 0; ci < d.cin; ++ci) {
            const float* ip = in + static_cast<std::size_t>(ci) * plane;
            for (int ky = 0; ky < d.kh; ++ky) {
                const int sy = ky - d.ph;
                const int y0 = std::max(0, -sy), y1 = std::min(d.H, d.H - sy);
                for (int kx = 0; kx < d.kw; ++kx) {
                    const int sx = kx - d.pw;
                    const int x0 = std::max(0, -sx), x1 = std::min(d.W, d.W - sx);
                    const double wv = wgt[((static_cast<std::size_t>(co) * d.cin + ci) * d.kh + ky) * d.kw + kx];
                    for (int y = y0; y < y1; ++y) {
                        const float* row = ip + (y + sy) * d.W + sx;
                        double* arow = acc.data() + static_cast<std::size_t>(y) * d.W;
                        for (int x = x0; x < x1; ++x) arow[x] += wv * row[x];
                    }
                }
            }
        }
        float* op = out + static_cast<std::size_t>(co) * plane;
        for (int i = 0; i < plane; ++i) op[i] = static_cast<float>(acc[static_cast<std::size_t>(i)]);
    }
}

void conv_backward_input(const float* gout, const float* wgt, float* gin, const ConvDims& d) {
    const int plane = d.H * d.W;
    std::vector<double> acc(static_cast<std::size_t>(plane));
    for (int ci = 0; ci < d.cin; ++ci) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (int co = 0; co < d.cout; ++co) {
            const float* gp = gout + static_cast<std::size_t>(co) * plane;
            for (int ky = 0; ky < d.kh; ++ky) {
                const int sy = ky - d.ph;
                const int y0 = std::max(0, sy), y1 = std::min(d.H, d.H + sy);
                for (int kx = 0; kx < d.kw; ++kx) {
                    const int sx = kx - d.pw;
                    const int x0 = std::max(0, sx), x1 = std::min(d.W, d.W + sx);
                    const double wv = wgt[((static_cast<std::size_t>(co) * d.cin + ci) * d.kh + ky) * d.kw + kx];
                    for (int y = y0; y < y1; ++y) {
                        const float* row = gp + (y - sy) * d.W - sx;
                        double* arow = acc.data() + static_cast<std::size_t>(y) * d.W;
                        for (int x = x0; x < x1; ++x) arow[x] += wv * row[x];
                    }
                }
            }
        }
        float* gi = gin + static_cast<std::size_t>(ci) * plane;
        for (int i = 0; i < plane; ++i) gi[i] += static_cast<float>(acc[static_cast<std::size_t>(i)]);
    }
}

void conv_backward_weight(const float* gout, const float* in, float* gw, const ConvDims& d) {
    const int plane = d.H * d.W;
    for (int co = 0; co < d.cout; ++co) {
        const float* gp = gout + static_cast<std::size_t>(co) * plane;
        for (int ci = 0; ci < d.cin; ++ci) {
            const float* ip = in + static_cast<std::size_t>(ci) * plane;
            for (int ky = 0; ky < d.kh; ++ky) {
                const int sy = ky - d.ph;
                const int y0 = std::max(0, -sy), y1 = std::min(d.H, d.H - sy);
                for (int kx = 0; kx < d.kw; ++kx) {
                    const int sx = kx - d.pw;
                    const int x0 = std::max(0, -sx), x1 = std::min(d.W, d.W - sx);
                    double acc = 0.0;
                    for (int y = y0; y < y1; ++y) {
                        const float* grow = gp + static_cast<std::size_t>(y) * d.W;
                        const float* irow = ip + (y + sy) * d.W + sx;
                        for (int x = x0; x < x1; ++x) acc += static_cast<double>(grow[x]) * irow[x];
                    }
                    gw[((static_cast<std::size_t>(co) * d.cin + ci) * d.kh + ky) * d.kw + kx] +=
                        static_cast<float>(acc);
                }
            }
        }
    }
}

}  // namespace

void Tape::check_id(int id) const {
    require(id >= 0 && static_cast<std::size_t>(id) < nodes_.size(),
            "tape: node id " + std::to_string(id) + " out of range");
}

int Tape::emit(Tensor value, bool requires_grad, std::function<void(Tape&)> fn) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward_fn = std::move(fn);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

int Tape::leaf(Tensor value, bool requires_grad) {
    return emit(std::move(value), requires_grad, nullptr);
}

const Tensor& Tape::value(int id) const {
    check_id(id);
    return nodes_[static_cast<std::size_t>(id)].value;
}

bool Tape::requires_grad(int id) const {
    check_id(id);
    return nodes_[static_cast<std::size_t>(id)].requires_grad;
}

bool Tape::has_gradient(int id) const {
    check_id(id);
    return static_cast<std::size_t>(id) < has_grad_.size() && has_grad_[static_cast<std::size_t>(id)];
}

const Tensor& Tape::gradient(int id) const {
    require(has_gradient(id), "tape: node " + std::to_string(id) + " has no gradient");
    return grads_[static_cast<std::size_t>(id)];
}

Tensor& Tape::grad_acc(int id) {
    auto i = static_cast<std::size_t>(id);
    if (!has_grad_[i]) {
        grads_[i] = Tensor::zeros(nodes_[i].value.shape);
        has_grad_[i] = 1;
    }
    return grads_[i];
}

void Tape::backward(int loss_id) {
    check_id(loss_id);
    const auto& loss = nodes_[static_cast<std::size_t>(loss_id)];
    require(loss.value.numel() == 1, "backward: target must be scalar, got " + loss.value.shape_str());
    require(loss.requires_grad, "backward: target does not depend on any trainable node");
    grads_.assign(nodes_.size(), Tensor{});
    has_grad_.assign(nodes_.size(), 0);
    grad_acc(loss_id).data[0] = 1.0f;
    for (int id = loss_id; id >= 0; --id) {
        auto i = static_cast<std::size_t>(id);
        if (!has_grad_[i]) continue;
        if (nodes_[i].backward_fn) nodes_[i].backward_fn(*this);
    }
}

int Tape::add(int a, int b) {
    check_id(a);
    check_id(b);
    const Tensor& va = nodes_[static_cast<std::size_t>(a)].value;
    const Tensor& vb = nodes_[static_cast<std::size_t>(b)].value;
    require(va.same_shape(vb), "add: shape mismatch " + va.shape_str() + " vs " + vb.shape_str());
    Tensor out = Tensor::zeros(va.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = va.data[i] + vb.data[i];
    const bool rg = requires_grad(a) || requires_grad(b);
    const int self = static_cast<int>(nodes_.size());
    return emit(std::move(out), rg, [a, b, self](Tape& t) {
        const Tensor& g = t.grad_of(self);
        if (t.requires_grad(a)) {
            Tensor& ga = t.grad_acc(a);
            for (std::size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
        }
        if (t.requires_grad(b)) {
            Tensor& gb = t.grad_acc(b);
            for (std::size_t i = 0; i < g.numel(); ++i) gb.data[i] += g.data[i];
        }
    });
}

int Tape::sub(int a, int b) {
    check_id(a);
    check_id(b);
    const Tensor& va = nodes_[static_cast<std::size_t>(a)].value;
    const Tensor& vb = nodes_[static_cast<std::size_t>(b)].value;
    require(va.same_shape(vb), "sub: shape mismatch " + va.shape_str() + " vs " + vb.shape_str());
    Tensor out = Tensor::zeros(va.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = va.data[i] - vb.data[i];
    const bool rg = requires_grad(a) || requires_grad(b);
    const int self = static_cast<int>(nodes_.size());
    return emit(std::move(out), rg, [a, b, self](Tape& t) {
        const Tensor& g = t.grad_of(self);
        if (t.requires_grad(a)) {
            Tensor& ga = t.grad_acc(a);
            for (std::size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
        }
        if (t.requires_grad(b)) {
            Tensor& gb = t.grad_acc(b);
            for (std::size_t i = 0; i < g.numel(); ++i) gb.data[i] -= g.data[i];
        }
    });
}

int Tape::mul(int a, int b) {
    check_id(a);
    check_id(b);
    const Tensor& va = nodes_[static_cast<std::size_t>(a)].value;
    const Tensor& vb = nodes_[static_cast<std::size_t>(b)].value;
    require(va.same_shape(vb), "mul: shape mismatch " + va.shape_str() + " vs " + vb.shape_str());
    Tensor out = Tensor::zeros(va.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = va.data[i] * vb.data[i];
    const bool rg = requires_grad(a) || requires_grad(b);
    const int self = static_cast<int>(nodes_.size());
    return emit(std::move(out), rg, [a, b, self](Tape& t) {
        const Tensor& g = t.grad_of(self);
        const Tensor& va2 = t.value(a);
        const Tensor& vb2 = t.value(b);
        if (t.requires_grad(a)) {
            Tensor& ga = t.grad_acc(a);
            for (std::size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] * vb2.data[i];
        }
        if (t.requires_grad(b)) {
            Tensor& gb = t.grad_acc(b);
            for (std::size_t i = 0; i < g.numel(); ++i) gb.data[i] += g.data[i] * va2.data[i];
        }
    });
}

int Tape::scale(int a, float s) {
    check_id(a);
    const Tensor& va = nodes_[static_cast<std::size_t>(a)].value;
    Tensor out = Tensor::zeros(va.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = s * va.data[i];
    const int self = static_cast<int>(nodes_.size());
    return emit(std::move(out), requires_grad(a), [a, s, self](Tape& t) {
        if (!t.requires_grad(a)) return;
        const Tensor& g = t.grad_of(self);
        Tensor& ga = t.grad_acc(a);
        for (std::size_t i = 0; i < g.numel(); ++i) ga.data[i] += s * g.data[i];
    });
}

int Tape::leaky_relu(int a, float slope) {
    check_id(a);
    const Tensor& va = nodes_[static_cast<std::size_t>(a)].value;
    Tensor out = Tensor::zeros(va.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) {
        const float v = va.data[i];
        out.data[i] = v > 0.0f ? v : slope * v;
    }
    const int self = static_cast<int>(nodes_.size());
    return emit(std::move(out), requires_grad(a), [a, slope, self](Tape& t) {
        if (!t.requires_grad(a)) return;
        const Tensor& g = t.grad_of(self);
        const Tensor& v = t.value(a);
        Tensor& ga = t.grad_acc(a);
        for (std::size_t i = 0; i < g.numel(); ++i)
            ga.data[i] += v.data[i] > 0.0f ? g.data[i] : slope * g.data[i];
    });
}

int Tape::conv2d(int input, int weight, int bias) {
    check_id(input);
    check_id(weight);
    const Tensor& vi = nodes_[static_cast<std::size_t>(input)].value;
    const Tensor& vw = nodes_[static_cast<std::size_t>(weight)].value;
    const ConvDims d = conv_dims(vi, vw);
    const float* bp = nullptr;
    if (bias >= 0) {
        check_id(bias);
        const Tensor& vb = nodes_[static_cast<std::size_t>(bias)].value;
        require(vb.rank() == 1 && vb.shape[0] == d.cout,
                "conv2d: bias must be [" + std::to_string(d.cout) + "], got " + vb.shape_str());
        bp = vb.ptr();
    }
    Tensor out = Tensor::zeros({d.cout, d.H, d.W});
    conv_forward(vi.ptr(), vw.ptr(), bp, out.ptr(), d);
    const bool rg = requires_grad(input) || requires_grad(weight) ||
                    (bias >= 0 && requires_grad(bias));
    const int self = static_cast<int>(nodes_.size());
    return emit(std::move(out), rg, [input, weight, bias, d, self](Tape& t) {
        const Tensor& g = t.grad_of(self);
        if (t.requires_grad(input))
            conv_backward_input(g.ptr(), t.value(weight).ptr(), t.grad_acc(input).ptr(), d);
        if (t.requires_grad(weight))
            conv_backward_weight(g.ptr(), t.value(input).ptr(), t.grad_acc(weight).ptr(), d);
        if (bias >= 0 && t.requires_grad(bias)) {
            Tensor& gb = t.grad_acc(bias);
            const int plane = d.H * d.W;
            for (int co = 0; co < d.cout; ++co) {
                const float* gp = g.ptr() + static_cast<std::size_t>(co) * plane;
                double acc = 0.0;
                for (int i = 0; i < plane; ++i) acc += gp[i];
                gb.data[static_cast<std::size_t>(co)] += static_cast<float>(acc);
            }
        }
    });
}

int Tape::max_pool2(int a) {
    check_id(a);
    const Tensor& va = nodes_[static_cast<std::size_t>(a)].value;
    require(va.rank() == 3, "max_pool2: input must be [C,H,W], got " + va.shape_str());
    const int C = va.shape[0], H = va.shape[1], W = va.shape[2];
    require(H % 2 == 0 && W % 2 == 0, "max_pool2: spatial sides must be even, got " + va.shape_str());
    const int OH = H / 2, OW = W / 2;
    Tensor out = Tensor::zeros({C, OH, OW});
    auto argmax = std::make_shared<std::vector<int>>(out.numel());
    for (int c = 0; c < C; ++c) {
        const float* ip = va.ptr() + static_cast<std::size_t>(c) * H * W;
        float* op = out.ptr() + static_cast<std::size_t>(c) * OH * OW;
        int* am = argmax->data() + static_cast<std::size_t>(c) * OH * OW;
        for (int oy = 0; oy < OH; ++oy) {
            for (int ox = 0; ox < OW; ++ox) {
                int best = (2 * oy) * W + 2 * ox;
                float bv = ip[best];
                const int cand[3] = {(2 * oy) * W + 2 * ox + 1, (2 * oy + 1) * W + 2 * ox,
                                     (2 * oy + 1) * W + 2 * ox + 1};
                for (int k = 0; k < 3; ++k) {
                    if (ip[cand[k]] > bv) {
                        bv = ip[cand[k]];
                        best = cand[k];
                    }
                }
                op[oy * OW + ox] = bv;
                am[oy * OW + ox] = c * H * W + best;
            }
        }
    }
    const int self = static_cast<int>(nodes_.size());
    return emit(std::move(out), requires_grad(a), [a, argmax, self](Tape& t) {
        if (!t.requires_grad(a)) return;
        const Tensor& g = t.grad_of(self);
        Tensor& ga = t.grad_acc(a);
        for (std::size_t i = 0; i < g.numel(); ++i)
            ga.data[static_cast<std::size_t>((*argmax)[i])] += g.data[i];
    });
}

int Tape::upsample2_nearest(int a) {
    check_id(a);
    const Tensor& va = nodes_[static_cast<std::size_t>(a)].value;
    require(va.rank() == 3, "upsample2_nearest: input must be [C,H,W], got " + va.shape_str());
    const int C = va.shape[0], H = va.shape[1], W = va.shape[2];
    const int OH = 2 * H, OW = 2 * W;
    Tensor out = Tensor::zeros({C, OH, OW});
    for (int c = 0; c < C; ++c) {
        const float* ip = va.ptr() + static_cast<std::size_t>(c) * H * W;
        float* op = out.ptr() + static_cast<std::size_t>(c) * OH * OW;
        for (int y = 0; y < OH; ++y) {
            const float* irow = ip + (y / 2) * W;
            float* orow = op + static_cast<std::size_t>(y) * OW;
            for (int x = 0; x < OW; ++x) orow[x] = irow[x / 2];
        }
    }
    const int self = static_cast<int>(nodes_.size());
    return emit(std::move(out), requires_grad(a), [a, C, H, W, self](Tape& t) {
        if (!t.requires_grad(a)) return;
        const Tensor& g = t.grad_of(self);
        Tensor& ga = t.grad_acc(a);
        const int OW = 2 * W;
        for (int c = 0; c < C; ++c) {
            const float* gp = g.ptr() + static_cast<std::size_t>(c) * 4 * H * W;
            float* gi = ga.ptr() + static_cast<std::size_t>(c) * H * W;
            for (int y = 0; y < H; ++y) {
                const float* r0 = gp + (2 * y) * OW;
                const float* r1 = gp + (2 * y + 1) * OW;
                for (int x = 0; x < W; ++x) {
                    const double s = static_cast<double>(r0[2 * x]) + r0[2 * x + 1] +
                                     r1[2 * x] + r1[2 * x + 1];
                    gi[y * W + x] += static_cast<float>(s);
                }
            }
        }
    });
}

int Tape::concat_channels(int a, int b) {
    check_id(a);
    check_id(b);
    const Tensor& va = nodes_[static_cast<std::size_t>(a)].value;
    const Tensor& vb = nodes_[static_cast<std::size_t>(b)].value;
    require(va.rank() == 3 && vb.rank() == 3, "concat_channels: inputs must be [C,H,W]");
    require(va.shape[1] == vb.shape[1] && va.shape[2] == vb.shape[2],
            "concat_channels: spatial mismatch " + va.shape_str() + " vs " + vb.shape_str());
    const int Ca = va.shape[0], Cb = vb.shape[0], H = va.shape[1], W = va.shape[2];
    Tensor out = Tensor::zeros({Ca + Cb, H, W});
    std::copy(va.data.begin(), va.data.end(), out.data.begin());
    std::copy(vb.data.begin(), vb.data.end(), out.data.begin() + va.numel());
    const bool rg = requires_grad(a) || requires_grad(b);
    const int self = static_cast<int>(nodes_.size());
    return emit(std::move(out), rg, [a, b, self](Tape& t) {
        const Tensor& g = t.grad_of(self);
        const std::size_t na = t.value(a).numel();
        if (t.requires_grad(a)) {
            Tensor& ga = t.grad_acc(a);
            for (std::size_t i = 0; i < na; ++i) ga.data[i] += g.data[i];
        }
        if (t.requires_grad(b)) {
            Tensor& gb = t.grad_acc(b);
            for (std::size_t i = 0; i < gb.numel(); ++i) gb.data[i] += g.data[na + i];
        }
    });
}

int Tape::channel_affine(int x, int a, int b) {
    check_id(x);
    check_id(a);
    check_id(b);
    const Tensor& vx = nodes_[static_cast<std::size_t>(x)].value;
    const Tensor& va = nodes_[static_cast<std::size_t>(a)].value;
    const Tensor& vb = nodes_[static_cast<std::size_t>(b)].value;
    require(vx.rank() == 3, "channel_affine: input must be [C,H,W], got " + vx.shape_str());
    const int C = vx.shape[0];
    require(va.rank() == 1 && va.shape[0] == C && vb.rank() == 1 && vb.shape[0] == C,
            "channel_affine: scale and shift must be [" + std::to_string(C) + "]");
    const int plane = vx.shape[1] * vx.shape[2];
    Tensor out = Tensor::zeros(vx.shape);
    for (int c = 0; c < C; ++c) {
        const float s = 1.0f + va.data[static_cast<std::size_t>(c)];
        const float off = vb.data[static_cast<std::size_t>(c)];
        const float* xp = vx.ptr() + static_cast<std::size_t>(c) * plane;
        float* op = out.ptr() + static_cast<std::size_t>(c) * plane;
        for (int i = 0; i < plane; ++i) op[i] = s * xp[i] + off;
    }
    const bool rg = requires_grad(x) || requires_grad(a) || requires_grad(b);
    const int self = static_cast<int>(nodes_.size());
    return emit(std::move(out), rg, [x, a, b, C, plane, self](Tape& t) {
        const Tensor& g = t.grad_of(self);
        if (t.requires_grad(x)) {
            const Tensor& va2 = t.value(a);
            Tensor& gx = t.grad_acc(x);
            for (int c = 0; c < C; ++c) {
                const float s = 1.0f + va2.data[static_cast<std::size_t>(c)];
                const float* gp = g.ptr() + static_cast<std::size_t>(c) * plane;
                float* gxp = gx.ptr() + static_cast<std::size_t>(c) * plane;
                for (int i = 0; i < plane; ++i) gxp[i] += s * gp[i];
            }
        }
        if (t.requires_grad(a)) {
            const Tensor& vx2 = t.value(x);
            Tensor& ga = t.grad_acc(a);
            for (int c = 0; c < C; ++c) {
                const float* gp = g.ptr() + static_cast<std::size_t>(c) * plane;
                const float* xp = vx2.ptr() + static_cast<std::size_t>(c) * plane;
                double acc = 0.0;
                for (int i = 0; i < plane; ++i) acc += static_cast<double>(gp[i]) * xp[i];
                ga.data[static_cast<std::size_t>(c)] += static_cast<float>(acc);
            }
        }
        if (t.requires_grad(b)) {
            Tensor& gb = t.grad_acc(b);
            for (int c = 0; c < C; ++c) {
                const float* gp = g.ptr() + static_cast<std::size_t>(c) * plane;
                double acc = 0.0;
                for (int i = 0; i < plane; ++i) acc += gp[i];
                gb.data[static_cast<std::size_t>(c)] += static_cast<float>(acc);
            }
        }
    });
}

int Tape::sum_all(int a) {
    check_id(a);
    const Tensor& va = nodes_[static_cast<std::size_t>(a)].value;
    double acc = 0.0;
    for (float v : va.data) acc += v;
    Tensor out = Tensor::scalar(static_cast<float>(acc));
    const int self = static_cast<int>(nodes_.size());
    return emit(std::move(out), requires_grad(a), [a, self](Tape& t) {
        if (!t.requires_grad(a)) return;
        const float gs = t.grad_of(self).data[0];
        Tensor& ga = t.grad_acc(a);
        for (std::size_t i = 0; i < ga.numel(); ++i) ga.data[i] += gs;
    });
}

int Tape::mean_all(int a) {
    check_id(a);
    const Tensor& va = nodes_[static_cast<std::size_t>(a)].value;
    require(va.numel() > 0, "mean_all: empty tensor");
    double acc = 0.0;
    for (float v : va.data) acc += v;
    const double n = static_cast<double>(va.numel());
    Tensor out = Tensor::scalar(static_cast<float>(acc / n));
    const int self = static_cast<int>(nodes_.size());
    return emit(std::move(out), requires_grad(a), [a, n, self](Tape& t) {
        if (!t.requires_grad(a)) return;
        const float gs = static_cast<float>(t.grad_of(self).data[0] / n);
        Tensor& ga = t.grad_acc(a);
        for (std::size_t i = 0; i < ga.numel(); ++i) ga.data[i] += gs;
    });
}

}  // namespace stdai
