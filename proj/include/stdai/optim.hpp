#pragma once

#include <map>
#include <string>
#include <vector>

#include "stdai/tensor.hpp"

namespace stdai {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Keyed Adam. Moment state is created on first update for a key and kept
// in double precision; the parameter itself stays float.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    // Call once per optimization step, before the update() calls for that
    // step. lr overrides cfg_.lr for this step (schedules plug in here).
    void start_step(double lr);
    void update(const std::string& key, Tensor& param, const Tensor& grad);

    long long step_count() const { return t_; }

private:
    struct Moments {
        std::vector<double> m, v;
    };
    AdamConfig cfg_;
    double lr_ = 0.0;
    long long t_ = 0;
    std::map<std::string, Moments> state_;
};

// lr(t) = lr_min + (lr0 - lr_min) * (1 + cos(pi * t / total)) / 2.
// Steps past the end hold at lr_min and warn once.
class CosineSchedule {
public:
    CosineSchedule(double lr0, int total_epochs, double lr_min = 0.0);
    double lr(int epoch) const;

private:
    double lr0_, lr_min_;
    int total_;
    mutable bool warned_ = false;
};

}  // namespace stdai
