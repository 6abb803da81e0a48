#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace stdai {

std::size_t shape_numel(const std::vector<int>& shape);

// Dense row-major float tensor. The last axis varies fastest; a [C,H,W]
// tensor stores channel planes back to back.
struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;

    Tensor() = default;

    static Tensor zeros(std::vector<int> shape);
    static Tensor full(std::vector<int> shape, float value);
    static Tensor scalar(float value);
    static Tensor from(std::vector<int> shape, std::vector<float> values);

    std::size_t numel() const { return data.size(); }
    int rank() const { return static_cast<int>(shape.size()); }
    bool same_shape(const Tensor& other) const { return shape == other.shape; }

    float* ptr() { return data.data(); }
    const float* ptr() const { return data.data(); }

    bool all_finite() const;
    std::string shape_str() const;
};

}  // namespace stdai
