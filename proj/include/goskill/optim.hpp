#pragma once

// Adam with bias correction, plus global-norm gradient clipping.  Parameters
// are shared tensor handles; the optimizer reads whatever gradients the last
// backward pass accumulated and updates values in place.

#include <cstdint>
#include <vector>

#include "goskill/tensor.hpp"

namespace goskill::core {

struct AdamConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Returns the pre-clip global norm.  When it exceeds `max_norm`, every
// gradient is scaled by max_norm / norm.  A non-positive max_norm disables
// clipping (the norm is still computed and returned).
double clip_global_norm(std::vector<Tensor>& params, double max_norm);

class Adam {
public:
    explicit Adam(std::vector<Tensor> params, AdamConfig config = {});

    // One update from the currently accumulated gradients.  Throws
    // NumericError naming the offending parameter if a gradient is not finite.
    void step();

    void zero_grad();

    int64_t step_count() const { return step_; }
    const AdamConfig& config() const { return config_; }
    std::vector<Tensor>& params() { return params_; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    AdamConfig config_;
    int64_t step_ = 0;
};

}  // namespace goskill::core
