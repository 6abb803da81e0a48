#pragma once

#include <array>

namespace stdai {

struct Vec2 {
    double x = 0.0, y = 0.0;
};

// Planar transform, row-major 2x3: maps (x, y) to
//   (m[0]*x + m[1]*y + m[2], m[3]*x + m[4]*y + m[5]).
struct Transform2D {
    std::array<double, 6> m{1, 0, 0, 0, 1, 0};

    static Transform2D identity() { return {}; }
    static Transform2D similarity(double angle_rad, double scale, double tx, double ty);
    static Transform2D translation(double tx, double ty);

    Vec2 apply(Vec2 p) const;
    Transform2D inverse() const;
    Transform2D compose(const Transform2D& inner) const;  // this ∘ inner
    double det() const { return m[0] * m[4] - m[1] * m[3]; }
    bool near_singular() const;
};

}  // namespace stdai
