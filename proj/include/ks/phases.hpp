#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ks/data.hpp"
#include "ks/lora.hpp"
#include "ks/model.hpp"
#include "ks/optimizer.hpp"
#include "ks/tensor.hpp"

namespace ks {

enum class StageKind { Learn, Forget };
enum class IncludeLearnInForget { Auto, Always, Never };

struct PhaseConfig {
    double alpha = 0.05;
    double beta = 0.2;
    // Forgetting boundary; unset means 2·ln(num_classes) at mean reduction.
    std::optional<double> bnd;
    std::size_t epochs = 20;
    std::size_t batch_size = 32;
    Reduction reduction = Reduction::Mean;
    IncludeLearnInForget include_learn_in_forget = IncludeLearnInForget::Auto;
    OptimizerConfig optimizer;

    double resolved_bnd(std::size_t num_classes) const;
};

struct SequencePlan {
    std::vector<StageKind> stages;

    static SequencePlan parse(const std::string& text);  // "L->F", "F->L->F", ...
    // Cumulative row labels: {"F", "F->L", "F->L->F"}.
    std::vector<std::string> cumulative_labels() const;
};

struct MetricsReport {
    double acc_retain = 0.0;
    double acc_learn = 0.0;
    double acc_forget = 0.0;
    std::map<int, double> per_class;
};

struct LossBreakdown {
    Tensor total;
    double retain_ce = 0.0;
    double learn_ce = 0.0;
    bool has_learn = false;
    double forget_ce = 0.0;   // raw CE on the forget batch
    double forget_term = 0.0; // max(0, BND − forget_ce)
    bool has_forget = false;
    double regularizer = 0.0;
};

// Per-layer |gradient| totals accumulated over one stage's optimizer steps.
struct StageGradAccum {
    std::vector<std::string> layer_names;   // canonical order
    std::vector<std::size_t> depth_indices;
    std::vector<double> abs_sums;           // Σ over steps of Σ|g| per layer
    std::vector<std::size_t> element_counts;
    std::size_t steps = 0;
};

struct StepLossTrace {
    double total = 0.0;
    double retain = 0.0;
    double learn = 0.0;
    double forget = 0.0;
    double regularizer = 0.0;
};

struct StageRecord {
    std::string label;
    StageSnapshot snapshot;
    MetricsReport metrics;
    StageGradAccum grad_accum;  // empty for the Start record
    std::vector<StepLossTrace> loss_trace;
    // Whole-split CE at record time, for the metrics table.
    double eval_loss_retain = 0.0;
    double eval_loss_learn = 0.0;
    double eval_loss_forget = 0.0;
    double eval_loss_re = 0.0;
    std::string checkpoint_path;
};

// Learning objective: L_retain + β·L_learn + α·L_re.
LossBreakdown learning_loss(const TransformerClassifier& model, const Batch& retain_batch,
                            const Batch& learn_batch, const AdapterSet& adapters,
                            const PhaseConfig& cfg);

// Forgetting objective: L_retain [+ L_learn] + β·ReLU(BND − L_forget_ce) + α·L_re. The
// learn term is included iff include_learn is true (policy resolved upstream).
LossBreakdown forgetting_loss(const TransformerClassifier& model, const Batch& retain_batch,
                              const std::optional<Batch>& learn_batch,
                              const Batch& forget_batch, const AdapterSet& adapters,
                              const PhaseConfig& cfg, bool include_learn);

MetricsReport evaluate(const TransformerClassifier& model, const SwapTaskSpec& task,
                       const AdapterSet* adapters = nullptr);

// Mean CE of a split under the current model.
double split_cross_entropy(const TransformerClassifier& model, const DatasetSplit& split,
                           const AdapterSet* adapters = nullptr,
                           std::size_t batch_size = 64);

struct PretrainConfig {
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    OptimizerConfig optimizer;
};

// Full-parameter cross-entropy training of M0 on the pretraining classes.
void pretrain(TransformerClassifier& model, const DatasetSplit& pretrain_train,
              const PretrainConfig& cfg, std::uint64_t epoch_seed);

DatasetSplit merge_splits(const DatasetSplit& a, const DatasetSplit& b);

// One LoRA training stage. include_learn applies to Forget stages only.
StageRecord run_stage(TransformerClassifier& model, AdapterSet& adapters,
                      const SwapTaskSpec& task, StageKind kind, const PhaseConfig& cfg,
                      std::uint64_t stage_seed, bool include_learn,
                      const std::string& label);

struct SequenceOptions {
    std::uint64_t epoch_seed_base = 0;
    std::string out_dir;  // when set, a checkpoint is written per record
    bool merge_at_stage_boundary = false;
    std::uint64_t merge_reseed = 0;
};

// Executes the plan on one carried model+adapter state, Start record first.
std::vector<StageRecord> run_sequence(TransformerClassifier& model, AdapterSet& adapters,
                                      const SequencePlan& plan, const SwapTaskSpec& task,
                                      const std::vector<PhaseConfig>& stage_cfgs,
                                      const SequenceOptions& options);

// Table-layout CSV: stage,acc_r,acc_l,acc_f,loss_retain,loss_learn,loss_forget,loss_re.
void write_metrics_csv(const std::vector<StageRecord>& records, const std::string& path);

}  // namespace ks
