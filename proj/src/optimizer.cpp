#include "ks/optimizer.hpp"

#include <cmath>

namespace ks {

AdamW::AdamW(std::vector<Tensor> params, OptimizerConfig config)
    : params_(std::move(params)), config_(config) {
    first_moment_.reserve(params_.size());
    second_moment_.reserve(params_.size());
    for (const Tensor& p : params_) {
        first_moment_.emplace_back(p.size(), 0.0);
        second_moment_.emplace_back(p.size(), 0.0);
    }
}

void AdamW::step(const GradMap& grads) {
    ++step_count_;
    const double t = static_cast<double>(step_count_);
    const double bc1 = 1.0 - std::pow(config_.beta1, t);
    const double bc2 = 1.0 - std::pow(config_.beta2, t);
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i];
        const std::vector<double>& g = grads.of(p);
        if (g.size() != p.size())
            throw ContractError("gradient size does not match parameter size");
        auto& m = first_moment_[i];
        auto& v = second_moment_[i];
        auto& w = p.mutable_data();
        for (std::size_t j = 0; j < w.size(); ++j) {
            m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g[j];
            v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g[j] * g[j];
            // decoupled decay, then the adaptive step
            w[j] -= config_.learning_rate * config_.weight_decay * w[j];
            w[j] -= config_.learning_rate * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + config_.epsilon);
        }
    }
}

}  // namespace ks
