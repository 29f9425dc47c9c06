#pragma once

#include <cstdint>
#include <vector>

#include "ks/tensor.hpp"

namespace ks {

struct OptimizerConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.01;
};

// AdamW: decoupled weight decay, bias-corrected moments. One instance owns the
// moment state for a fixed parameter list; updates are deterministic.
class AdamW {
public:
    AdamW(std::vector<Tensor> params, OptimizerConfig config);

    void step(const GradMap& grads);

    std::uint64_t step_count() const { return step_count_; }
    const std::vector<Tensor>& params() const { return params_; }
    const OptimizerConfig& config() const { return config_; }

private:
    std::vector<Tensor> params_;
    OptimizerConfig config_;
    std::uint64_t step_count_ = 0;
    std::vector<std::vector<double>> first_moment_;
    std::vector<std::vector<double>> second_moment_;
};

}  // namespace ks
