#include <algorithm>
#include <cstdint>
#include <vector>

#include "doctest.h"
#include "stdai/error.hpp"
#include "stdai/sampling.hpp"
#include "stdai/tensor.hpp"

using namespace stdai;

TEST_CASE("site count is exactly ceil(H/s) * ceil(W/s)") {
    for (int H = 1; H <= 12; ++H)
        for (int W = 1; W <= 12; ++W)
            for (int s = 1; s <= 4; ++s) {
                GridSpec g;
                g.stride = s;
                const auto mask = grid_mask(H, W, g);
                const std::size_t want = static_cast<std::size_t>((H + s - 1) / s) *
                                         static_cast<std::size_t>((W + s - 1) / s);
                CHECK(observed_count(mask) == want);
            }
}

TEST_CASE("every 2x2 block holds exactly one site, exhaustively") {
    for (int H = 4; H <= 9; ++H)
        for (int W = 4; W <= 9; ++W) {
            GridSpec g;
            g.stride = 2;
            for (g.off_r = 0; g.off_r < 2; ++g.off_r)
                for (g.off_c = 0; g.off_c < 2; ++g.off_c) {
                    const auto mask = grid_mask(H, W, g);
                    for (int by = 0; by * 2 < H; ++by)
                        for (int bx = 0; bx * 2 < W; ++bx) {
                            int count = 0;
                            for (int dy = 0; dy < 2; ++dy)
                                for (int dx = 0; dx < 2; ++dx) {
                                    const int y = by * 2 + dy, x = bx * 2 + dx;
                                    if (y < H && x < W)
                                        count += mask[static_cast<std::size_t>(y) * W + x];
                                }
                            CAPTURE(H);
                            CAPTURE(W);
                            CAPTURE(by);
                            CAPTURE(bx);
                            CHECK(count == 1);
                        }
                }
        }
}

TEST_CASE("sites sit on the offset lattice, clamped at the far edge") {
    GridSpec g;
    g.stride = 3;
    g.off_r = 2;
    g.off_c = 1;
    const int H = 8, W = 7;
    CHECK(grid_rows(H, g) == std::vector<int>{2, 5, 7});  // 8 clamps to 7
    CHECK(grid_cols(W, g) == std::vector<int>{1, 4, 6});  // 7 clamps to 6
    const auto mask = grid_mask(H, W, g);
    const auto rows = grid_rows(H, g), cols = grid_cols(W, g);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const bool on = std::count(rows.begin(), rows.end(), y) &&
                            std::count(cols.begin(), cols.end(), x);
            CHECK(static_cast<bool>(mask[static_cast<std::size_t>(y) * W + x]) == on);
        }
}

TEST_CASE("observed_sites enumerates in row-major order") {
    GridSpec g;
    g.stride = 2;
    const auto sites = observed_sites(grid_mask(5, 4, g), 5, 4);
    REQUIRE(sites.size() == 6);
    CHECK(sites[0].first == 0);
    CHECK(sites[0].second == 0);
    CHECK(sites[1].first == 0);
    CHECK(sites[1].second == 2);
    CHECK(sites.back().first == 4);
    CHECK(sites.back().second == 2);
}

TEST_CASE("apply_mask zeroes every unobserved pixel of every channel") {
    GridSpec g;
    g.stride = 2;
    const int H = 4, W = 6;
    const auto mask = grid_mask(H, W, g);
    Tensor t = Tensor::full({3, H, W}, 2.5f);
    apply_mask(t, mask);
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < H * W; ++i) {
            const float want = mask[static_cast<std::size_t>(i)] ? 2.5f : 0.0f;
            CHECK(t.data[static_cast<std::size_t>(c) * H * W + i] == want);
        }
}

TEST_CASE("invalid grids are rejected") {
    GridSpec g;
    g.stride = 0;
    CHECK_THROWS_AS(grid_mask(4, 4, g), Error);
    g.stride = 2;
    g.off_r = 2;
    CHECK_THROWS_AS(grid_mask(4, 4, g), Error);
    g.off_r = -1;
    CHECK_THROWS_AS(grid_mask(4, 4, g), Error);
}
