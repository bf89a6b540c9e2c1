#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "utka/common.hpp"

namespace utka::optim {

// Named flat view over one trainable array; layout order is fixed and shared
// by the optimizer, serialization, and finite-difference tests.
struct ParamView {
    std::string name;
    double* data;
    size_t size;
};

// Two schedule shapes are in play: the codec decays a base rate on a cosine,
// the token LM warms up linearly to a peak and then steps down once per epoch.
struct ScheduleConfig {
    enum class Kind { cosine, warmup_decay };
    Kind kind = Kind::warmup_decay;
    double peak_lr = 1e-3;
    int warmup_steps = 4000;
    int epoch_steps = 1000;   // steps per decay interval
    double decay = 0.98;      // per-epoch factor
    int total_steps = 10000;  // cosine horizon

    void validate() const {
        if (peak_lr <= 0.0) throw ConfigError("peak learning rate must be positive");
        if (kind == Kind::warmup_decay) {
            if (warmup_steps < 1) throw ConfigError("warmup needs at least one step");
            if (epoch_steps < 1) throw ConfigError("epoch length must be positive");
            if (decay <= 0.0 || decay > 1.0) throw ConfigError("decay must lie in (0, 1]");
        } else {
            if (total_steps < 1) throw ConfigError("cosine schedule needs a horizon");
        }
    }

    // step counts completed updates starting at 1
    double lr_at(int step) const {
        if (kind == Kind::cosine) {
            double frac = std::min(1.0, static_cast<double>(step) / total_steps);
            return peak_lr * 0.5 * (1.0 + std::cos(3.1415926535897932 * frac));
        }
        if (step <= warmup_steps)
            return peak_lr * static_cast<double>(step) / warmup_steps;
        int epochs = (step - warmup_steps) / epoch_steps;
        return peak_lr * std::pow(decay, epochs);
    }
};

// Decoupled-weight-decay adaptive moments over a fixed flat parameter layout.
struct AdamW {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;

    std::vector<double> m, v;
    int64_t step = 0;

    void init(size_t n_params) {
        m.assign(n_params, 0.0);
        v.assign(n_params, 0.0);
        step = 0;
    }

    // one optimization step covers one or more spans laid out back to back
    // in the moment buffers; call begin_step once, then update_span per array
    void begin_step() { ++step; }

    void update_span(double lr, double* theta, const double* grad, size_t n,
                     size_t offset) {
        if (offset + n > m.size()) throw DimensionError("optimizer state size mismatch");
        double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
        double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
        double* ms = m.data() + offset;
        double* vs = v.data() + offset;
        for (size_t i = 0; i < n; ++i) {
            double g = grad[i];
            ms[i] = beta1 * ms[i] + (1.0 - beta1) * g;
            vs[i] = beta2 * vs[i] + (1.0 - beta2) * g * g;
            double mh = ms[i] / c1;
            double vh = vs[i] / c2;
            theta[i] -= lr * (mh / (std::sqrt(vh) + eps) + weight_decay * theta[i]);
        }
    }

    // whole-layout convenience
    void update(double lr, double* theta, const double* grad, size_t n) {
        if (m.size() != n) throw DimensionError("optimizer state size mismatch");
        begin_step();
        update_span(lr, theta, grad, n, 0);
    }
};

}  // namespace utka::optim
