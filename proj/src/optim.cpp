#include "goskill/optim.hpp"

#include <cmath>

namespace goskill::core {

double clip_global_norm(std::vector<Tensor>& params, double max_norm) {
    double sq = 0.0;
    for (auto& p : params) {
        if (!p.has_grad()) continue;
        for (double g : p.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double scale = max_norm / norm;
        for (auto& p : params) {
            if (!p.has_grad()) continue;
            for (double& g : p.grad()) g *= scale;
        }
    }
    return norm;
}

Adam::Adam(std::vector<Tensor> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
    if (config_.lr <= 0.0) throw ConfigError("learning rate must be positive");
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
    }
}

void Adam::step() {
    ++step_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
    for (size_t pi = 0; pi < params_.size(); ++pi) {
        Tensor& p = params_[pi];
        auto vals = p.values();
        auto grads = p.grad();
        auto& m = m_[pi];
        auto& v = v_[pi];
        for (size_t i = 0; i < vals.size(); ++i) {
            const double g = grads[i];
            if (!std::isfinite(g)) {
                const std::string& who = p.name();
                throw NumericError("non-finite gradient in parameter '" +
                                   (who.empty() ? std::string("<unnamed>") : who) + "'");
            }
            m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g;
            v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            vals[i] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
        }
    }
}

void Adam::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

}  // namespace goskill::core
