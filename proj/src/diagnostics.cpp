#include "ks/diagnostics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace ks {

namespace {

constexpr const char* kGradHeaderComment =
    "# log base 10 of (sum|grad| / elements) / steps per layer; floor 1e-12";

std::string sanitize(std::string label) {
    std::replace(label.begin(), label.end(), '>', '_');
    std::replace(label.begin(), label.end(), '-', '_');
    return label;
}

std::string fmt_value(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

LayerDeltaReport layer_l2_delta(const StageSnapshot& before, const StageSnapshot& after) {
    if (before.layer_names != after.layer_names)
        throw ContractError("layer_l2_delta: snapshots enumerate different layers");
    LayerDeltaReport report;
    report.from_stage = before.stage_label;
    report.to_stage = after.stage_label;
    report.layer_names = before.layer_names;
    report.depth_indices = before.depth_indices;
    for (std::size_t i = 0; i < before.weights.size(); ++i) {
        const auto& a = before.weights[i];
        const auto& b = after.weights[i];
        if (a.size() != b.size())
            throw ContractError("layer_l2_delta: weight size mismatch at " +
                                before.layer_names[i]);
        double s = 0.0;
        for (std::size_t j = 0; j < a.size(); ++j) s += (b[j] - a[j]) * (b[j] - a[j]);
        report.l2_deltas.push_back(std::sqrt(s));
    }
    return report;
}

GradientLogReport log_avg_gradient(const StageGradAccum& accum, const std::string& stage) {
    if (accum.steps == 0) throw ContractError("log_avg_gradient: zero steps");
    GradientLogReport report;
    report.stage = stage;
    report.layer_names = accum.layer_names;
    report.depth_indices = accum.depth_indices;
    for (std::size_t i = 0; i < accum.layer_names.size(); ++i) {
        const std::size_t elems = accum.element_counts[i];
        const double mean =
            elems == 0 ? 0.0
                       : accum.abs_sums[i] / static_cast<double>(elems) /
                             static_cast<double>(accum.steps);
        if (mean > GradientLogReport::kFloor) {
            report.log10_values.push_back(std::log10(mean));
            report.below_floor.push_back(false);
        } else {
            report.log10_values.push_back(0.0);
            report.below_floor.push_back(true);
        }
    }
    return report;
}

double depth_center_of_mass(const LayerDeltaReport& report) {
    const std::size_t n = report.l2_deltas.size();
    if (n == 0) throw ContractError("depth_center_of_mass: empty report");
    double weighted = 0.0, total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double depth =
            n == 1 ? 0.0
                   : static_cast<double>(report.depth_indices[i]) / static_cast<double>(n - 1);
        weighted += depth * report.l2_deltas[i];
        total += report.l2_deltas[i];
    }
    if (total == 0.0)
        throw ContractError("depth_center_of_mass undefined for an all-zero report");
    return weighted / total;
}

void export_layer_delta_csv(const LayerDeltaReport& report, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write report: " + path);
    out << "# from=" << report.from_stage << " to=" << report.to_stage << '\n'
        << "layer,depth,l2_delta\n";
    for (std::size_t i = 0; i < report.layer_names.size(); ++i)
        out << report.layer_names[i] << ',' << report.depth_indices[i] << ','
            << fmt_value(report.l2_deltas[i]) << '\n';
    if (!out) throw IoError("report write failed: " + path);
}

void export_gradient_log_csv(const GradientLogReport& report, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write report: " + path);
    out << kGradHeaderComment << '\n'
        << "# stage=" << report.stage << '\n'
        << "layer,depth,log10_avg_grad\n";
    for (std::size_t i = 0; i < report.layer_names.size(); ++i) {
        out << report.layer_names[i] << ',' << report.depth_indices[i] << ',';
        if (report.below_floor[i])
            out << "below_floor";
        else
            out << fmt_value(report.log10_values[i]);
        out << '\n';
    }
    if (!out) throw IoError("report write failed: " + path);
}

namespace {

std::vector<std::array<std::string, 3>> read_csv_rows(const std::string& path,
                                                      std::vector<std::string>* comments) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open report: " + path);
    std::vector<std::array<std::string, 3>> rows;
    std::string line;
    bool header_skipped = false;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            if (comments) comments->push_back(line);
            continue;
        }
        if (!header_skipped) {
            header_skipped = true;
            continue;
        }
        std::stringstream ss(line);
        std::array<std::string, 3> row;
        for (auto& cell : row)
            if (!std::getline(ss, cell, ','))
                throw IoError("malformed report row in " + path + ": " + line);
        rows.push_back(std::move(row));
    }
    return rows;
}

// Pulls "key=value" out of the comment lines; value runs to the next space.
std::string comment_field(const std::vector<std::string>& comments, const std::string& key) {
    const std::string needle = key + "=";
    for (const std::string& c : comments) {
        std::size_t pos = c.find(needle);
        if (pos == std::string::npos) continue;
        pos += needle.size();
        std::size_t end = c.find(' ', pos);
        return c.substr(pos, end == std::string::npos ? std::string::npos : end - pos);
    }
    return "";
}

}  // namespace

LayerDeltaReport parse_layer_delta_csv(const std::string& path) {
    LayerDeltaReport report;
    std::vector<std::string> comments;
    for (const auto& row : read_csv_rows(path, &comments)) {
        report.layer_names.push_back(row[0]);
        report.depth_indices.push_back(std::stoul(row[1]));
        report.l2_deltas.push_back(std::stod(row[2]));
    }
    report.from_stage = comment_field(comments, "from");
    report.to_stage = comment_field(comments, "to");
    return report;
}

GradientLogReport parse_gradient_log_csv(const std::string& path) {
    GradientLogReport report;
    std::vector<std::string> comments;
    for (const auto& row : read_csv_rows(path, &comments)) {
        report.layer_names.push_back(row[0]);
        report.depth_indices.push_back(std::stoul(row[1]));
        if (row[2] == "below_floor") {
            report.log10_values.push_back(0.0);
            report.below_floor.push_back(true);
        } else {
            report.log10_values.push_back(std::stod(row[2]));
            report.below_floor.push_back(false);
        }
    }
    report.stage = comment_field(comments, "stage");
    return report;
}

void export_reports(const std::vector<StageRecord>& records, const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    for (std::size_t i = 1; i < records.size(); ++i) {
        LayerDeltaReport delta = layer_l2_delta(records[i - 1].snapshot, records[i].snapshot);
        export_layer_delta_csv(delta, out_dir + "/delta_" + sanitize(delta.from_stage) +
                                          "_to_" + sanitize(delta.to_stage) + ".csv");
        if (records[i].grad_accum.steps > 0) {
            GradientLogReport grads =
                log_avg_gradient(records[i].grad_accum, records[i].label);
            export_gradient_log_csv(grads,
                                    out_dir + "/grads_" + sanitize(records[i].label) + ".csv");
        }
    }
}

}  // namespace ks
