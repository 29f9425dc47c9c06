#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "ks/data.hpp"
#include "ks/model.hpp"
#include "ks/phases.hpp"

namespace ks {

struct DataConfig {
    std::size_t pretrain_classes = 20;
    std::size_t learn_class_count = 5;
    std::size_t per_class_train = 50;
    std::size_t per_class_test = 20;
    double noise_std = 0.3;
    std::set<int> retain_classes;  // defaults derived from the counts above
    std::set<int> forget_classes;
    std::set<int> learn_classes;
};

struct SeedConfig {
    std::uint64_t model = 1;
    std::uint64_t data = 2;
    std::uint64_t epochs = 3;
    std::uint64_t lora = 4;
};

struct ExperimentConfig {
    ModelConfig model;
    DataConfig data;
    PretrainConfig pretrain_cfg;
    double pretrain_gate_acc = 90.0;
    PhaseConfig learn_phase;
    PhaseConfig forget_phase;
    std::size_t lora_rank = 4;
    bool lora_train_biases = false;
    bool merge_at_stage_boundary = false;
    std::string plan = "L->F";
    SeedConfig seeds;
    std::string output_dir = "out";

    void validate() const;
};

ExperimentConfig load_experiment_config(const std::string& path);
ExperimentConfig parse_experiment_config(const std::string& json_text);
// "model=7", "data=11", "epochs=5", "lora=9"
void apply_seed_override(ExperimentConfig& cfg, const std::string& spec);

struct ExperimentData {
    Dataset pretrain;  // retain ∪ forget classes
    Dataset fresh;     // learn classes
    SwapTaskSpec task;
};

ExperimentData build_experiment_data(const ExperimentConfig& cfg);

// M0: seeded build + full-parameter pretraining on retain ∪ forget.
TransformerClassifier pretrain_m0(const ExperimentConfig& cfg, const ExperimentData& data);

// Per-stage PhaseConfigs for a parsed plan.
std::vector<PhaseConfig> stage_configs(const ExperimentConfig& cfg, const SequencePlan& plan);

}  // namespace ks
