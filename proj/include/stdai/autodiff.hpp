#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "stdai/tensor.hpp"

namespace stdai {

// Eager reverse-mode tape. Operations run immediately and append a node;
// backward() walks the tape in reverse. Nodes whose inputs all have
// requires_grad == false record no backward closure, so frozen parts of a
// model cost nothing during the reverse sweep and never receive gradients.
class Tape {
public:
    int leaf(Tensor value, bool requires_grad);

    const Tensor& value(int id) const;
    bool requires_grad(int id) const;
    bool has_gradient(int id) const;
    const Tensor& gradient(int id) const;
    std::size_t size() const { return nodes_.size(); }

    // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
    // reachable node with requires_grad set. loss must be scalar.
    void backward(int loss_id);

    int add(int a, int b);
    int sub(int a, int b);
    int mul(int a, int b);
    int scale(int a, float s);
    int leaky_relu(int a, float slope = 0.01f);

    // input [Cin,H,W], weight [Cout,Cin,kh,kw] with odd kh,kw; stride 1,
    // zero padding keeps H,W. bias is a [Cout] node id, or -1 for none.
    int conv2d(int input, int weight, int bias);

    int max_pool2(int a);          // [C,H,W] -> [C,H/2,W/2], H,W even
    int upsample2_nearest(int a);  // [C,H,W] -> [C,2H,2W]
    int concat_channels(int a, int b);

    // x [C,H,W]; a,b [C]. out[c] = (1 + a[c]) * x[c] + b[c]
    int channel_affine(int x, int a, int b);

    int sum_all(int a);
    int mean_all(int a);

private:
    struct Node {
        Tensor value;
        bool requires_grad = false;
        std::function<void(Tape&)> backward_fn;
    };

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
    std::vector<char> has_grad_;

    int emit(Tensor value, bool requires_grad, std::function<void(Tape&)> fn);
    Tensor& grad_acc(int id);
    const Tensor& grad_of(int id) const { return grads_[static_cast<std::size_t>(id)]; }
    void check_id(int id) const;
};

}  // namespace stdai
