#include "stdai/transform.hpp"

#include <cmath>

#include "stdai/error.hpp"

namespace stdai {

Transform2D Transform2D::similarity(double angle_rad, double scale, double tx, double ty) {
    const double c = scale * std::cos(angle_rad);
    const double s = scale * std::sin(angle_rad);
    Transform2D t;
    t.m = {c, -s, tx, s, c, ty};
    return t;
}

Transform2D Transform2D::translation(double tx, double ty) {
    Transform2D t;
    t.m = {1, 0, tx, 0, 1, ty};
    return t;
}

Vec2 Transform2D::apply(Vec2 p) const {
    return {m[0] * p.x + m[1] * p.y + m[2], m[3] * p.x + m[4] * p.y + m[5]};
}

bool Transform2D::near_singular() const { return std::abs(det()) <= 1e-8; }

Transform2D Transform2D::inverse() const {
    const double d = det();
    require(std::abs(d) > 1e-8, "transform is singular, cannot invert");
    Transform2D r;
    r.m[0] = m[4] / d;
    r.m[1] = -m[1] / d;
    r.m[3] = -m[3] / d;
    r.m[4] = m[0] / d;
    r.m[2] = -(r.m[0] * m[2] + r.m[1] * m[5]);
    r.m[5] = -(r.m[3] * m[2] + r.m[4] * m[5]);
    return r;
}

Transform2D Transform2D::compose(const Transform2D& inner) const {
    Transform2D r;
    r.m[0] = m[0] * inner.m[0] + m[1] * inner.m[3];
    r.m[1] = m[0] * inner.m[1] + m[1] * inner.m[4];
    r.m[2] = m[0] * inner.m[2] + m[1] * inner.m[5] + m[2];
    r.m[3] = m[3] * inner.m[0] + m[4] * inner.m[3];
    r.m[4] = m[3] * inner.m[1] + m[4] * inner.m[4];
    r.m[5] = m[3] * inner.m[2] + m[4] * inner.m[5] + m[5];
    return r;
}

}  // namespace stdai
