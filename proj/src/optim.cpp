#include "stdai/optim.hpp"

#include <cmath>
#include <cstdio>

#include "stdai/error.hpp"

namespace stdai {

void Adam::start_step(double lr) {
    require(lr >= 0.0, "adam: negative learning rate");
    lr_ = lr;
    ++t_;
}

void Adam::update(const std::string& key, Tensor& param, const Tensor& grad) {
    require(t_ > 0, "adam: update() before start_step()");
    require(param.same_shape(grad),
            "adam: gradient shape " + grad.shape_str() + " does not match parameter " +
                param.shape_str() + " for '" + key + "'");
    Moments& mo = state_[key];
    if (mo.m.empty()) {
        mo.m.assign(param.numel(), 0.0);
        mo.v.assign(param.numel(), 0.0);
    }
    require(mo.m.size() == param.numel(), "adam: parameter '" + key + "' changed size");
    require(grad.all_finite(),
            "adam: non-finite gradient for '" + key + "' at step " + std::to_string(t_));
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < param.numel(); ++i) {
        const double g = grad.data[i];
        mo.m[i] = b1 * mo.m[i] + (1.0 - b1) * g;
        mo.v[i] = b2 * mo.v[i] + (1.0 - b2) * g * g;
        const double mhat = mo.m[i] / c1;
        const double vhat = mo.v[i] / c2;
        param.data[i] = static_cast<float>(param.data[i] - lr_ * mhat / (std::sqrt(vhat) + cfg_.eps));
    }
}

CosineSchedule::CosineSchedule(double lr0, int total_epochs, double lr_min)
    : lr0_(lr0), lr_min_(lr_min), total_(total_epochs) {
    require(total_epochs > 0, "cosine schedule: total epochs must be positive");
    require(lr0 >= lr_min, "cosine schedule: lr0 below lr_min");
}

double CosineSchedule::lr(int epoch) const {
    require(epoch >= 0, "cosine schedule: negative step");
    if (epoch > total_) {
        if (!warned_) {
            std::fprintf(stderr, "warning: cosine schedule queried past step %d; holding at floor\n",
                         total_);
            warned_ = true;
        }
        return lr_min_;
    }
    const double phase = 3.14159265358979323846 * static_cast<double>(epoch) / total_;
    return lr_min_ + (lr0_ - lr_min_) * (1.0 + std::cos(phase)) / 2.0;
}

}  // namespace stdai
