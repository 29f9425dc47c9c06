#include "ks/phases.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <unordered_map>

namespace ks {

double PhaseConfig::resolved_bnd(std::size_t num_classes) const {
    if (bnd) {
        if (*bnd < 0.0) throw ConfigError("BND must be non-negative");
        return *bnd;
    }
    return 2.0 * std::log(static_cast<double>(num_classes));
}

SequencePlan SequencePlan::parse(const std::string& text) {
    SequencePlan plan;
    std::size_t pos = 0;
    while (pos < text.size()) {
        const char c = text[pos];
        if (c == 'L')
            plan.stages.push_back(StageKind::Learn);
        else if (c == 'F')
            plan.stages.push_back(StageKind::Forget);
        else
            throw ConfigError("sequence plan '" + text + "': unknown stage symbol '" +
                              std::string(1, c) + "'");
        ++pos;
        if (pos == text.size()) break;
        if (text.compare(pos, 2, "->") != 0)
            throw ConfigError("sequence plan '" + text + "': expected '->' at position " +
                              std::to_string(pos));
        pos += 2;
    }
    if (plan.stages.empty()) throw ConfigError("sequence plan is empty");
    return plan;
}

std::vector<std::string> SequencePlan::cumulative_labels() const {
    std::vector<std::string> labels;
    std::string acc;
    for (StageKind k : stages) {
        if (!acc.empty()) acc += "->";
        acc += (k == StageKind::Learn ? "L" : "F");
        labels.push_back(acc);
    }
    return labels;
}

namespace {

std::uint64_t mix_seed(std::uint64_t base, std::uint64_t salt) {
    std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

Tensor ce_of(const TransformerClassifier& model, const Batch& batch,
             const AdapterSet* adapters, Reduction reduction) {
    return softmax_cross_entropy(model.forward(batch.inputs, adapters), batch.labels,
                                 reduction);
}

}  // namespace

LossBreakdown learning_loss(const TransformerClassifier& model, const Batch& retain_batch,
                            const Batch& learn_batch, const AdapterSet& adapters,
                            const PhaseConfig& cfg) {
    if (retain_batch.labels.empty() || learn_batch.labels.empty())
        throw ContractError("learning_loss requires non-empty retain and learn batches");
    Tensor l_retain = ce_of(model, retain_batch, &adapters, cfg.reduction);
    Tensor l_learn = ce_of(model, learn_batch, &adapters, cfg.reduction);
    Tensor l_re = group_regularizer(adapters);
    Tensor total = add(l_retain, add(scale(l_learn, cfg.beta), scale(l_re, cfg.alpha)));
    LossBreakdown out;
    out.total = total;
    out.retain_ce = l_retain.item();
    out.learn_ce = l_learn.item();
    out.has_learn = true;
    out.regularizer = l_re.item();
    return out;
}

LossBreakdown forgetting_loss(const TransformerClassifier& model, const Batch& retain_batch,
                              const std::optional<Batch>& learn_batch,
                              const Batch& forget_batch, const AdapterSet& adapters,
                              const PhaseConfig& cfg, bool include_learn) {
    if (retain_batch.labels.empty() || forget_batch.labels.empty())
        throw ContractError("forgetting_loss requires non-empty retain and forget batches");
    if (include_learn && (!learn_batch || learn_batch->labels.empty()))
        throw ContractError("forgetting_loss: learn term requested without a learn batch");
    const double bnd = cfg.resolved_bnd(model.config().num_classes);

    Tensor l_retain = ce_of(model, retain_batch, &adapters, cfg.reduction);
    Tensor forget_ce = ce_of(model, forget_batch, &adapters, cfg.reduction);
    Tensor l_forget = relu(add(Tensor::scalar(bnd), scale(forget_ce, -1.0)));
    Tensor l_re = group_regularizer(adapters);

    Tensor total = add(l_retain, add(scale(l_forget, cfg.beta), scale(l_re, cfg.alpha)));
    LossBreakdown out;
    if (include_learn) {
        Tensor l_learn = ce_of(model, *learn_batch, &adapters, cfg.reduction);
        total = add(total, l_learn);
        out.learn_ce = l_learn.item();
        out.has_learn = true;
    }
    out.total = total;
    out.retain_ce = l_retain.item();
    out.forget_ce = forget_ce.item();
    out.forget_term = l_forget.item();
    out.has_forget = true;
    out.regularizer = l_re.item();
    return out;
}

MetricsReport evaluate(const TransformerClassifier& model, const SwapTaskSpec& task,
                       const AdapterSet* adapters) {
    auto split_accuracy = [&](const DatasetSplit& split, std::map<int, std::pair<int, int>>& tally) {
        if (split.examples.empty()) throw ContractError("evaluate: empty test split");
        std::size_t correct = 0;
        const std::size_t chunk = 64;
        for (std::size_t start = 0; start < split.examples.size(); start += chunk) {
            std::vector<std::size_t> idx;
            for (std::size_t i = start; i < std::min(split.examples.size(), start + chunk); ++i)
                idx.push_back(i);
            Batch b = make_batch(split, idx);
            Tensor logits = model.forward(b.inputs, adapters);
            const std::size_t classes = logits.cols();
            for (std::size_t i = 0; i < idx.size(); ++i) {
                const double* row = logits.data().data() + i * classes;
                std::size_t best = 0;
                for (std::size_t j = 1; j < classes; ++j)
                    if (row[j] > row[best]) best = j;
                const bool ok = static_cast<int>(best) == b.labels[i];
                correct += ok ? 1 : 0;
                auto& [num, den] = tally[b.labels[i]];
                num += ok ? 1 : 0;
                den += 1;
            }
        }
        return 100.0 * static_cast<double>(correct) /
               static_cast<double>(split.examples.size());
    };
    MetricsReport report;
    std::map<int, std::pair<int, int>> tally;
    report.acc_retain = split_accuracy(task.retain.test, tally);
    report.acc_learn = split_accuracy(task.learn.test, tally);
    report.acc_forget = split_accuracy(task.forget.test, tally);
    for (auto& [cls, nd] : tally)
        report.per_class[cls] = 100.0 * nd.first / static_cast<double>(nd.second);
    return report;
}

double split_cross_entropy(const TransformerClassifier& model, const DatasetSplit& split,
                           const AdapterSet* adapters, std::size_t batch_size) {
    if (split.examples.empty()) throw ContractError("split_cross_entropy: empty split");
    double total = 0.0;
    for (std::size_t start = 0; start < split.examples.size(); start += batch_size) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(split.examples.size(), start + batch_size); ++i)
            idx.push_back(i);
        Batch b = make_batch(split, idx);
        total += softmax_cross_entropy(model.forward(b.inputs, adapters), b.labels,
                                       Reduction::Sum)
                     .item();
    }
    return total / static_cast<double>(split.examples.size());
}

DatasetSplit merge_splits(const DatasetSplit& a, const DatasetSplit& b) {
    if (a.seq_len != b.seq_len || a.input_dim != b.input_dim)
        throw ValidationError("merge_splits: dimension mismatch");
    DatasetSplit out = a;
    out.examples.insert(out.examples.end(), b.examples.begin(), b.examples.end());
    out.class_ids.insert(b.class_ids.begin(), b.class_ids.end());
    return out;
}

void pretrain(TransformerClassifier& model, const DatasetSplit& pretrain_train,
              const PretrainConfig& cfg, std::uint64_t epoch_seed) {
    model.set_all_trainable(true);
    std::vector<Tensor> params;
    for (auto& [name, t] : model.named_parameters()) params.push_back(t);
    AdamW optimizer(params, cfg.optimizer);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (const auto& idx :
             batch_iter(pretrain_train, cfg.batch_size, mix_seed(epoch_seed, epoch))) {
            Batch b = make_batch(pretrain_train, idx);
            Tensor loss =
                softmax_cross_entropy(model.forward(b.inputs), b.labels, Reduction::Mean);
            optimizer.step(backward(loss, params));
        }
    }
}

namespace {

// Adapter gradients report against their target FFN layer; other trainables
// report against their own name.
struct GradBookkeeping {
    std::unordered_map<std::string, std::size_t> layer_slot;
    StageGradAccum accum;

    explicit GradBookkeeping(const TransformerClassifier& model) {
        std::size_t depth = 0;
        for (auto& [name, t] : model.named_parameters()) {
            layer_slot[name] = accum.layer_names.size();
            accum.layer_names.push_back(name);
            accum.depth_indices.push_back(depth++);
            accum.abs_sums.push_back(0.0);
            accum.element_counts.push_back(0);
        }
    }

    void note_elements(const std::string& layer, std::size_t n) {
        accum.element_counts[layer_slot.at(layer)] += n;
    }

    void add(const std::string& layer, const std::vector<double>& g) {
        double s = 0.0;
        for (double v : g) s += std::abs(v);
        accum.abs_sums[layer_slot.at(layer)] += s;
    }
};

}  // namespace

StageRecord run_stage(TransformerClassifier& model, AdapterSet& adapters,
                      const SwapTaskSpec& task, StageKind kind, const PhaseConfig& cfg,
                      std::uint64_t stage_seed, bool include_learn, const std::string& label) {
    std::vector<Tensor> params = adapters.trainable_params(model);
    AdamW optimizer(params, cfg.optimizer);
    GradBookkeeping book(model);
    // element counts per layer, fixed for the stage
    for (const LoraAdapter& a : adapters.adapters())
        book.note_elements(a.target, a.A.size() + a.B.size());
    if (adapters.biases_trainable()) {
        for (std::size_t k = 0; k < model.blocks().size(); ++k) {
            const std::string p = "block" + std::to_string(k) + ".ffn.";
            book.note_elements(p + "b1", model.blocks()[k].ffn_b1.size());
            book.note_elements(p + "b2", model.blocks()[k].ffn_b2.size());
        }
    }

    StageRecord record;
    record.label = label;

    const DatasetSplit& retain_train = task.retain.train;
    const DatasetSplit& learn_train = task.learn.train;
    const DatasetSplit& forget_train = task.forget.train;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto retain_batches =
            batch_iter(retain_train, cfg.batch_size, mix_seed(stage_seed, 3 * epoch));
        auto learn_batches =
            batch_iter(learn_train, cfg.batch_size, mix_seed(stage_seed, 3 * epoch + 1));
        auto forget_batches =
            batch_iter(forget_train, cfg.batch_size, mix_seed(stage_seed, 3 * epoch + 2));
        std::size_t learn_i = 0, forget_i = 0;
        for (const auto& ridx : retain_batches) {
            Batch retain_b = make_batch(retain_train, ridx);
            LossBreakdown breakdown;
            if (kind == StageKind::Learn) {
                Batch learn_b = make_batch(learn_train, learn_batches[learn_i]);
                learn_i = (learn_i + 1) % learn_batches.size();
                breakdown = learning_loss(model, retain_b, learn_b, adapters, cfg);
            } else {
                Batch forget_b = make_batch(forget_train, forget_batches[forget_i]);
                forget_i = (forget_i + 1) % forget_batches.size();
                std::optional<Batch> learn_b;
                if (include_learn) {
                    learn_b = make_batch(learn_train, learn_batches[learn_i]);
                    learn_i = (learn_i + 1) % learn_batches.size();
                }
                breakdown = forgetting_loss(model, retain_b, learn_b, forget_b, adapters,
                                            cfg, include_learn);
            }
            GradMap grads = backward(breakdown.total, params);
            for (const LoraAdapter& a : adapters.adapters()) {
                book.add(a.target, grads.of(a.A));
                book.add(a.target, grads.of(a.B));
            }
            if (adapters.biases_trainable()) {
                for (std::size_t k = 0; k < model.blocks().size(); ++k) {
                    const std::string p = "block" + std::to_string(k) + ".ffn.";
                    book.add(p + "b1", grads.of(model.blocks()[k].ffn_b1));
                    book.add(p + "b2", grads.of(model.blocks()[k].ffn_b2));
                }
            }
            optimizer.step(grads);
            ++book.accum.steps;
            record.loss_trace.push_back({breakdown.total.item(), breakdown.retain_ce,
                                         breakdown.has_learn ? breakdown.learn_ce : 0.0,
                                         breakdown.has_forget ? breakdown.forget_term : 0.0,
                                         breakdown.regularizer});
        }
    }

    record.grad_accum = std::move(book.accum);
    record.snapshot = snapshot_weights(model, label, &adapters);
    record.metrics = evaluate(model, task, &adapters);
    record.eval_loss_retain = split_cross_entropy(model, task.retain.train, &adapters);
    record.eval_loss_learn = split_cross_entropy(model, task.learn.train, &adapters);
    record.eval_loss_forget = split_cross_entropy(model, task.forget.train, &adapters);
    record.eval_loss_re = group_regularizer(adapters).item();
    return record;
}

std::vector<StageRecord> run_sequence(TransformerClassifier& model, AdapterSet& adapters,
                                      const SequencePlan& plan, const SwapTaskSpec& task,
                                      const std::vector<PhaseConfig>& stage_cfgs,
                                      const SequenceOptions& options) {
    if (stage_cfgs.size() != plan.stages.size())
        throw ConfigError("run_sequence: one PhaseConfig required per stage");
    std::vector<StageRecord> records;
    auto persist = [&](StageRecord& rec) {
        if (options.out_dir.empty()) return;
        std::filesystem::create_directories(options.out_dir);
        std::string name = rec.label;
        std::replace(name.begin(), name.end(), '>', '_');
        std::replace(name.begin(), name.end(), '-', '_');
        rec.checkpoint_path = options.out_dir + "/stage_" + name + ".ckpt";
        save_checkpoint(model, rec.checkpoint_path, rec.label, &adapters);
    };

    StageRecord start;
    start.label = "Start";
    start.snapshot = snapshot_weights(model, "Start", &adapters);
    start.metrics = evaluate(model, task, &adapters);
    start.eval_loss_retain = split_cross_entropy(model, task.retain.train, &adapters);
    start.eval_loss_learn = split_cross_entropy(model, task.learn.train, &adapters);
    start.eval_loss_forget = split_cross_entropy(model, task.forget.train, &adapters);
    start.eval_loss_re = group_regularizer(adapters).item();
    persist(start);
    records.push_back(std::move(start));

    const std::vector<std::string> labels = plan.cumulative_labels();
    bool learn_seen = false;
    for (std::size_t s = 0; s < plan.stages.size(); ++s) {
        const PhaseConfig& cfg = stage_cfgs[s];
        bool include_learn = false;
        if (plan.stages[s] == StageKind::Forget) {
            switch (cfg.include_learn_in_forget) {
                case IncludeLearnInForget::Auto: include_learn = learn_seen; break;
                case IncludeLearnInForget::Always: include_learn = true; break;
                case IncludeLearnInForget::Never: include_learn = false; break;
            }
        }
        StageRecord rec = run_stage(model, adapters, task, plan.stages[s], cfg,
                                    mix_seed(options.epoch_seed_base, s), include_learn,
                                    labels[s]);
        if (plan.stages[s] == StageKind::Learn) learn_seen = true;
        if (options.merge_at_stage_boundary)
            merge(adapters, model, mix_seed(options.merge_reseed, s));
        persist(rec);
        records.push_back(std::move(rec));
    }
    return records;
}

void write_metrics_csv(const std::vector<StageRecord>& records, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write metrics csv: " + path);
    out << "stage,acc_r,acc_l,acc_f,loss_retain,loss_learn,loss_forget,loss_re\n";
    char buf[512];
    for (const StageRecord& r : records) {
        std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%.6f,%.10g,%.10g,%.10g,%.10g\n",
                      r.label.c_str(), r.metrics.acc_retain, r.metrics.acc_learn,
                      r.metrics.acc_forget, r.eval_loss_retain, r.eval_loss_learn,
                      r.eval_loss_forget, r.eval_loss_re);
        out << buf;
    }
    if (!out) throw IoError("metrics csv write failed: " + path);
}

}  // namespace ks
