#include "stdai/sampling.hpp"

#include "stdai/error.hpp"

namespace stdai {

namespace {

std::vector<int> grid_axis(int n, int stride, int off, const char* axis) {
    require(n > 0, std::string("grid: ") + axis + " size must be positive");
    require(stride >= 1, "grid: stride must be at least 1");
    require(off >= 0 && off < stride, "grid: offset must lie in [0, stride)");
    const int count = (n + stride - 1) / stride;
    std::vector<int> pos(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        int p = off + stride * i;
        if (p > n - 1) p = n - 1;
        pos[static_cast<std::size_t>(i)] = p;
    }
    return pos;
}

}  // namespace

std::vector<int> grid_rows(int H, const GridSpec& g) { return grid_axis(H, g.stride, g.off_r, "row"); }
std::vector<int> grid_cols(int W, const GridSpec& g) { return grid_axis(W, g.stride, g.off_c, "col"); }

std::vector<std::uint8_t> grid_mask(int H, int W, const GridSpec& g) {
    const auto rows = grid_rows(H, g);
    const auto cols = grid_cols(W, g);
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(H) * W, 0);
    for (int r : rows)
        for (int c : cols) mask[static_cast<std::size_t>(r) * W + c] = 1;
    return mask;
}

std::size_t observed_count(const std::vector<std::uint8_t>& mask) {
    std::size_t n = 0;
    for (std::uint8_t v : mask) n += v ? 1 : 0;
    return n;
}

std::vector<std::pair<int, int>> observed_sites(const std::vector<std::uint8_t>& mask, int H, int W) {
    require(mask.size() == static_cast<std::size_t>(H) * W, "observed_sites: mask size mismatch");
    std::vector<std::pair<int, int>> sites;
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c)
            if (mask[static_cast<std::size_t>(r) * W + c]) sites.emplace_back(r, c);
    return sites;
}

void apply_mask(Tensor& expr, const std::vector<std::uint8_t>& mask) {
    require(expr.rank() == 3, "apply_mask: expression must be [G,H,W], got " + expr.shape_str());
    const std::size_t plane = static_cast<std::size_t>(expr.shape[1]) * expr.shape[2];
    require(mask.size() == plane, "apply_mask: mask size does not match expression plane");
    for (int g = 0; g < expr.shape[0]; ++g) {
        float* p = expr.ptr() + static_cast<std::size_t>(g) * plane;
        for (std::size_t i = 0; i < plane; ++i)
            if (!mask[i]) p[i] = 0.0f;
    }
}

}  // namespace stdai
