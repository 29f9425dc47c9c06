// swaplab: train, swap, and inspect class knowledge in a small transformer.
//
// Subcommands: gen-data, pretrain, run, matrix, eval, diagnose.
// Exit codes: 0 ok, 2 config error, 3 quality gate unmet, 4 missing or
// corrupt input, 5 incompatible inputs.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#if defined(__SSE2__)
#include <pmmintrin.h>
#include <xmmintrin.h>
#endif

#include <CLI11.hpp>

#include "ks/data.hpp"
#include "ks/diagnostics.hpp"
#include "ks/experiment.hpp"
#include "ks/lora.hpp"
#include "ks/model.hpp"
#include "ks/phases.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitGate = 3;
constexpr int kExitInput = 4;
constexpr int kExitIncompatible = 5;

struct CommonArgs {
    std::string config_path;
    std::string out_dir;
    std::vector<std::string> seed_overrides;
};

ks::ExperimentConfig load_config(const CommonArgs& args) {
    ks::ExperimentConfig cfg = ks::load_experiment_config(args.config_path);
    for (const std::string& s : args.seed_overrides) ks::apply_seed_override(cfg, s);
    if (!args.out_dir.empty()) cfg.output_dir = args.out_dir;
    return cfg;
}

std::string m0_path(const ks::ExperimentConfig& cfg) { return cfg.output_dir + "/m0.ckpt"; }

void print_metrics(const std::string& label, const ks::MetricsReport& m) {
    std::printf("%-12s acc_r=%.2f acc_l=%.2f acc_f=%.2f\n", label.c_str(), m.acc_retain,
                m.acc_learn, m.acc_forget);
}

ks::AdapterSet adapters_from_checkpoint(ks::TransformerClassifier& model,
                                        const ks::LoadedCheckpoint& ckpt) {
    if (ckpt.meta.lora_rank == 0) return ks::AdapterSet();
    ks::AdapterSet set = ks::attach_adapters(model, ckpt.meta.lora_rank, /*seed=*/0);
    for (ks::LoraAdapter& a : set.adapters()) {
        for (const auto& [name, t] : ckpt.lora_tensors) {
            if (name == "lora." + a.target + ".A") a.A.mutable_data() = t.data();
            if (name == "lora." + a.target + ".B") a.B.mutable_data() = t.data();
        }
    }
    return set;
}

void write_eval_csv(const ks::MetricsReport& m, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ks::IoError("cannot write " + path);
    char buf[256];
    out << "acc_r,acc_l,acc_f\n";
    std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.6f\n", m.acc_retain, m.acc_learn, m.acc_forget);
    out << buf;
}

int cmd_gen_data(const CommonArgs& args) {
    ks::ExperimentConfig cfg = load_config(args);
    ks::ExperimentData data = ks::build_experiment_data(cfg);
    std::filesystem::create_directories(cfg.output_dir);
    auto save = [&](const ks::DatasetSplit& split, const std::string& stem) {
        ks::save_dataset(split, cfg.output_dir + "/" + stem + ".csv",
                         cfg.output_dir + "/" + stem + ".json");
        std::printf("%s: %zu examples, %zu classes\n", stem.c_str(), split.examples.size(),
                    split.class_ids.size());
    };
    save(data.pretrain.train, "pretrain_train");
    save(data.pretrain.test, "pretrain_test");
    save(data.fresh.train, "new_train");
    save(data.fresh.test, "new_test");
    return 0;
}

int cmd_pretrain(const CommonArgs& args) {
    ks::ExperimentConfig cfg = load_config(args);
    ks::ExperimentData data = ks::build_experiment_data(cfg);
    ks::TransformerClassifier model = ks::pretrain_m0(cfg, data);
    ks::MetricsReport start = ks::evaluate(model, data.task);
    print_metrics("Start", start);
    std::filesystem::create_directories(cfg.output_dir);
    ks::save_checkpoint(model, m0_path(cfg), "Start");

    ks::StageRecord rec;
    rec.label = "Start";
    rec.metrics = start;
    rec.eval_loss_retain = ks::split_cross_entropy(model, data.task.retain.train);
    rec.eval_loss_learn = ks::split_cross_entropy(model, data.task.learn.train);
    rec.eval_loss_forget = ks::split_cross_entropy(model, data.task.forget.train);
    ks::write_metrics_csv({rec}, cfg.output_dir + "/metrics_start.csv");

    if (start.acc_retain < cfg.pretrain_gate_acc || start.acc_forget < cfg.pretrain_gate_acc) {
        std::fprintf(stderr,
                     "pretraining gate unmet: acc_r=%.2f acc_f=%.2f < gate %.2f\n",
                     start.acc_retain, start.acc_forget, cfg.pretrain_gate_acc);
        return kExitGate;
    }
    return 0;
}

std::vector<ks::StageRecord> run_plan(const ks::ExperimentConfig& cfg,
                                      const ks::ExperimentData& data,
                                      const std::string& plan_text,
                                      const std::string& out_dir) {
    ks::LoadedCheckpoint ckpt = ks::load_checkpoint(m0_path(cfg));
    if (!(ckpt.meta.config == cfg.model))
        throw ks::IoError("m0 checkpoint config does not match the experiment config");
    ks::SequencePlan plan = ks::SequencePlan::parse(plan_text);
    ks::AdapterSet adapters =
        ks::attach_adapters(ckpt.model, cfg.lora_rank, cfg.seeds.lora, cfg.lora_train_biases);
    ks::SequenceOptions options;
    options.epoch_seed_base = cfg.seeds.epochs;
    options.out_dir = out_dir;
    options.merge_at_stage_boundary = cfg.merge_at_stage_boundary;
    options.merge_reseed = cfg.seeds.lora + 1;
    return ks::run_sequence(ckpt.model, adapters, plan, data.task,
                            ks::stage_configs(cfg, plan), options);
}

void write_com_csv(const std::vector<ks::StageRecord>& records, const ks::SequencePlan& plan,
                   const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ks::IoError("cannot write " + path);
    out << "stage,kind,depth_center_of_mass\n";
    char buf[256];
    for (std::size_t i = 1; i < records.size(); ++i) {
        ks::LayerDeltaReport delta =
            ks::layer_l2_delta(records[i - 1].snapshot, records[i].snapshot);
        double com;
        try {
            com = ks::depth_center_of_mass(delta);
        } catch (const ks::ContractError&) {
            continue;  // zero-epoch stage: no movement
        }
        std::snprintf(buf, sizeof buf, "%s,%c,%.10g\n", records[i].label.c_str(),
                      plan.stages[i - 1] == ks::StageKind::Learn ? 'L' : 'F', com);
        out << buf;
    }
}

int cmd_run(const CommonArgs& args) {
    ks::ExperimentConfig cfg = load_config(args);
    ks::ExperimentData data = ks::build_experiment_data(cfg);
    const std::string run_dir = cfg.output_dir + "/run";
    std::vector<ks::StageRecord> records = run_plan(cfg, data, cfg.plan, run_dir);
    for (const ks::StageRecord& r : records) print_metrics(r.label, r.metrics);
    ks::write_metrics_csv(records, cfg.output_dir + "/metrics.csv");
    ks::export_reports(records, cfg.output_dir + "/diagnostics");
    write_com_csv(records, ks::SequencePlan::parse(cfg.plan),
                  cfg.output_dir + "/diagnostics/depth_com.csv");
    return 0;
}

int cmd_matrix(const CommonArgs& args) {
    // Both extended sequences from the same M0, reported as one table:
    // Start, F, F->L, F->L->F, L, L->F, L->F->L.
    ks::ExperimentConfig cfg = load_config(args);
    ks::ExperimentData data = ks::build_experiment_data(cfg);
    std::vector<ks::StageRecord> all;
    bool first = true;
    for (const std::string plan : {"F->L->F", "L->F->L"}) {
        std::string plan_dir = plan;
        std::replace(plan_dir.begin(), plan_dir.end(), '>', '_');
        std::replace(plan_dir.begin(), plan_dir.end(), '-', '_');
        std::vector<ks::StageRecord> records =
            run_plan(cfg, data, plan, cfg.output_dir + "/matrix_" + plan_dir);
        ks::export_reports(records, cfg.output_dir + "/diagnostics_" + plan_dir);
        for (std::size_t i = first ? 0 : 1; i < records.size(); ++i)
            all.push_back(std::move(records[i]));
        first = false;
    }
    for (const ks::StageRecord& r : all) print_metrics(r.label, r.metrics);
    ks::write_metrics_csv(all, cfg.output_dir + "/metrics_matrix.csv");
    return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& checkpoint) {
    ks::ExperimentConfig cfg = load_config(args);
    ks::ExperimentData data = ks::build_experiment_data(cfg);
    ks::LoadedCheckpoint ckpt = ks::load_checkpoint(checkpoint);
    if (!(ckpt.meta.config == cfg.model))
        throw ks::IoError("checkpoint config does not match the experiment config");
    ks::AdapterSet adapters = adapters_from_checkpoint(ckpt.model, ckpt);
    const ks::AdapterSet* ap = ckpt.meta.lora_rank > 0 ? &adapters : nullptr;
    ks::MetricsReport m = ks::evaluate(ckpt.model, data.task, ap);
    print_metrics(ckpt.meta.stage_label, m);
    std::filesystem::create_directories(cfg.output_dir);
    write_eval_csv(m, cfg.output_dir + "/eval.csv");
    return 0;
}

int cmd_diagnose(const CommonArgs& args, const std::string& ckpt_a, const std::string& ckpt_b) {
    ks::LoadedCheckpoint a = ks::load_checkpoint(ckpt_a);
    ks::LoadedCheckpoint b = ks::load_checkpoint(ckpt_b);
    ks::ModelConfig ca = a.meta.config, cb = b.meta.config;
    ca.seed = cb.seed = 0;
    if (!(ca == cb)) {
        std::fprintf(stderr, "checkpoint configs are incompatible\n");
        return kExitIncompatible;
    }
    ks::AdapterSet aa = adapters_from_checkpoint(a.model, a);
    ks::AdapterSet ab = adapters_from_checkpoint(b.model, b);
    ks::StageSnapshot sa = ks::snapshot_weights(a.model, a.meta.stage_label,
                                                a.meta.lora_rank ? &aa : nullptr);
    ks::StageSnapshot sb = ks::snapshot_weights(b.model, b.meta.stage_label,
                                                b.meta.lora_rank ? &ab : nullptr);
    ks::LayerDeltaReport report = ks::layer_l2_delta(sa, sb);
    std::string out = args.out_dir.empty() ? std::string("delta.csv")
                                           : args.out_dir + "/delta.csv";
    if (!args.out_dir.empty()) std::filesystem::create_directories(args.out_dir);
    ks::export_layer_delta_csv(report, out);
    std::printf("wrote %s (%zu layers)\n", out.c_str(), report.layer_names.size());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__SSE2__)
    // saturated softmax gradients produce subnormals that can halve
    // throughput; flushing them to zero changes no reported quantity
    _MM_SET_FLUSH_ZERO_MODE(_MM_FLUSH_ZERO_ON);
    _MM_SET_DENORMALS_ZERO_MODE(_MM_DENORMALS_ZERO_ON);
#endif
    CLI::App app{"knowledge swapping experiment harness"};
    app.require_subcommand(1);

    CommonArgs args;
    std::string checkpoint, ckpt_a, ckpt_b;

    auto add_common = [&](CLI::App* sub, bool needs_config) {
        if (needs_config)
            sub->add_option("--config", args.config_path, "experiment config JSON")->required();
        sub->add_option("--out", args.out_dir, "output directory override");
        sub->add_option("--seed-override", args.seed_overrides,
                        "seed override key=value (model/data/epochs/lora)");
    };

    CLI::App* gen = app.add_subcommand("gen-data", "generate synthetic dataset files");
    add_common(gen, true);
    CLI::App* pre = app.add_subcommand("pretrain", "train the base model M0");
    add_common(pre, true);
    CLI::App* run = app.add_subcommand("run", "run the configured stage sequence from M0");
    add_common(run, true);
    CLI::App* matrix = app.add_subcommand("matrix", "run F->L->F and L->F->L from one M0");
    add_common(matrix, true);
    CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint on the task splits");
    add_common(ev, true);
    ev->add_option("--checkpoint", checkpoint, "checkpoint to evaluate")->required();
    CLI::App* diag = app.add_subcommand("diagnose", "per-layer L2 delta between checkpoints");
    diag->add_option("checkpoint_a", ckpt_a)->required();
    diag->add_option("checkpoint_b", ckpt_b)->required();
    diag->add_option("--out", args.out_dir, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitConfig;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(args);
        if (pre->parsed()) return cmd_pretrain(args);
        if (run->parsed()) return cmd_run(args);
        if (matrix->parsed()) return cmd_matrix(args);
        if (ev->parsed()) return cmd_eval(args, checkpoint);
        if (diag->parsed()) return cmd_diagnose(args, ckpt_a, ckpt_b);
    } catch (const ks::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    } catch (const ks::ValidationError& e) {
        std::fprintf(stderr, "validation error: %s\n", e.what());
        return kExitConfig;
    } catch (const ks::IoError& e) {
        std::fprintf(stderr, "input error: %s\n", e.what());
        return kExitInput;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
