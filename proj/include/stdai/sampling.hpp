#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "stdai/tensor.hpp"

namespace stdai {

// Regular sampling lattice. Row positions are off_r + stride * i for
// i = 0 .. ceil(H / stride) - 1, clamped to H - 1; columns likewise. For
// any offset in [0, stride) this yields exactly one site per stride x
// stride block and ceil(H/stride) * ceil(W/stride) sites in total.
struct GridSpec {
    int stride = 2;
    int off_r = 0;
    int off_c = 0;
};

std::vector<int> grid_rows(int H, const GridSpec& g);
std::vector<int> grid_cols(int W, const GridSpec& g);

// H*W bytes, 1 at sampled sites.
std::vector<std::uint8_t> grid_mask(int H, int W, const GridSpec& g);

std::size_t observed_count(const std::vector<std::uint8_t>& mask);

// Observed (row, col) pairs in row-major scan order.
std::vector<std::pair<int, int>> observed_sites(const std::vector<std::uint8_t>& mask, int H, int W);

// Zeroes entries of a [G,H,W] expression tensor where mask == 0.
void apply_mask(Tensor& expr, const std::vector<std::uint8_t>& mask);

}  // namespace stdai
