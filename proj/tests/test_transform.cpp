#include <cmath>

#include "doctest.h"
#include "stdai/error.hpp"
#include "stdai/transform.hpp"

using namespace stdai;

namespace {
bool close(Vec2 a, Vec2 b, double tol = 1e-9) {
    return std::fabs(a.x - b.x) < tol && std::fabs(a.y - b.y) < tol;
}
}  // namespace

TEST_CASE("identity maps points to themselves") {
    const Transform2D t = Transform2D::identity();
    CHECK(close(t.apply({3.0, -2.0}), {3.0, -2.0}));
    CHECK(t.det() == doctest::Approx(1.0));
}

TEST_CASE("similarity rotates, scales, and translates") {
    const double a = 0.5;
    const Transform2D t = Transform2D::similarity(a, 2.0, 3.0, -1.0);
    const Vec2 p = t.apply({1.0, 0.0});
    CHECK(p.x == doctest::Approx(2.0 * std::cos(a) + 3.0));
    CHECK(p.y == doctest::Approx(2.0 * std::sin(a) - 1.0));
    CHECK(t.det() == doctest::Approx(4.0));
}

TEST_CASE("inverse undoes the transform") {
    const Transform2D t = Transform2D::similarity(0.3, 1.4, -2.0, 5.0);
    const Transform2D inv = t.inverse();
    for (const Vec2 p : {Vec2{0, 0}, Vec2{5, -3}, Vec2{-7, 2}})
        CHECK(close(inv.apply(t.apply(p)), p, 1e-9));
}

TEST_CASE("compose applies inner first") {
    const Transform2D shift = Transform2D::translation(1.0, 0.0);
    const Transform2D rot = Transform2D::similarity(M_PI / 2.0, 1.0, 0.0, 0.0);
    // rot ∘ shift: (0,0) -> (1,0) -> (0,1)
    const Vec2 p = rot.compose(shift).apply({0.0, 0.0});
    CHECK(close(p, {0.0, 1.0}, 1e-12));
    // shift ∘ rot: (0,0) -> (0,0) -> (1,0)
    const Vec2 q = shift.compose(rot).apply({0.0, 0.0});
    CHECK(close(q, {1.0, 0.0}, 1e-12));
}

TEST_CASE("singular transforms are flagged and refuse inversion") {
    Transform2D t;
    t.m = {1.0, 2.0, 0.0, 2.0, 4.0, 0.0};  // rank 1
    CHECK(t.near_singular());
    CHECK_THROWS_AS(t.inverse(), Error);
    CHECK(!Transform2D::identity().near_singular());
}
