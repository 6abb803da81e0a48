#include "stdai/tensor.hpp"

#include <cmath>

#include "stdai/error.hpp"

namespace stdai {

std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        require(d >= 0, "tensor dimension must be non-negative");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

Tensor Tensor::zeros(std::vector<int> shape) {
    Tensor t;
    const std::size_t n = shape_numel(shape);
    t.shape = std::move(shape);
    t.data.assign(n, 0.0f);
    return t;
}

Tensor Tensor::full(std::vector<int> shape, float value) {
    Tensor t;
    const std::size_t n = shape_numel(shape);
    t.shape = std::move(shape);
    t.data.assign(n, value);
    return t;
}

Tensor Tensor::scalar(float value) {
    Tensor t;
    t.shape = {};
    t.data.assign(1, value);
    return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<float> values) {
    require(shape_numel(shape) == values.size(),
            "tensor shape does not match element count");
    Tensor t;
    t.shape = std::move(shape);
    t.data = std::move(values);
    return t;
}

bool Tensor::all_finite() const {
    for (float v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

std::string Tensor::shape_str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    s += "]";
    return s;
}

}  // namespace stdai
