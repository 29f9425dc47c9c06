#pragma once

#include <string>
#include <vector>

#include "ks/model.hpp"
#include "ks/phases.hpp"

namespace ks {

// Per-layer ‖W_after − W_before‖₂ between two snapshots of the same config.
struct LayerDeltaReport {
    std::string from_stage;
    std::string to_stage;
    std::vector<std::string> layer_names;
    std::vector<std::size_t> depth_indices;
    std::vector<double> l2_deltas;
};

// Per-layer log₁₀ of the per-element mean |gradient| over one stage. Layers
// whose mean falls below the floor carry the sentinel instead of a value.
struct GradientLogReport {
    static constexpr double kFloor = 1e-12;
    std::string stage;
    std::vector<std::string> layer_names;
    std::vector<std::size_t> depth_indices;
    std::vector<double> log10_values;  // meaningful only where !below_floor
    std::vector<bool> below_floor;
};

LayerDeltaReport layer_l2_delta(const StageSnapshot& before, const StageSnapshot& after);

GradientLogReport log_avg_gradient(const StageGradAccum& accum, const std::string& stage);

// Σ(norm_depth·delta)/Σdelta over layers, 0 = shallowest, 1 = deepest.
double depth_center_of_mass(const LayerDeltaReport& report);

void export_layer_delta_csv(const LayerDeltaReport& report, const std::string& path);
void export_gradient_log_csv(const GradientLogReport& report, const std::string& path);
LayerDeltaReport parse_layer_delta_csv(const std::string& path);
GradientLogReport parse_gradient_log_csv(const std::string& path);

// Deltas between consecutive records plus one gradient report per trained
// stage, as CSV files under out_dir.
void export_reports(const std::vector<StageRecord>& records, const std::string& out_dir);

}  // namespace ks
