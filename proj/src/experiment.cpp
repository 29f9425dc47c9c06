#include "ks/experiment.hpp"

#include <fstream>

#include <json.hpp>

namespace ks {

namespace {

void read_optimizer(const nlohmann::json& j, OptimizerConfig& opt) {
    if (j.contains("learning_rate")) opt.learning_rate = j.at("learning_rate").get<double>();
    if (j.contains("beta1")) opt.beta1 = j.at("beta1").get<double>();
    if (j.contains("beta2")) opt.beta2 = j.at("beta2").get<double>();
    if (j.contains("epsilon")) opt.epsilon = j.at("epsilon").get<double>();
    if (j.contains("weight_decay")) opt.weight_decay = j.at("weight_decay").get<double>();
}

PhaseConfig read_phase(const nlohmann::json& j) {
    PhaseConfig cfg;
    if (j.contains("alpha")) cfg.alpha = j.at("alpha").get<double>();
    if (j.contains("beta")) cfg.beta = j.at("beta").get<double>();
    if (j.contains("bnd")) cfg.bnd = j.at("bnd").get<double>();
    if (j.contains("epochs")) cfg.epochs = j.at("epochs").get<std::size_t>();
    if (j.contains("batch_size")) cfg.batch_size = j.at("batch_size").get<std::size_t>();
    if (j.contains("reduction")) {
        const std::string r = j.at("reduction").get<std::string>();
        if (r == "mean")
            cfg.reduction = Reduction::Mean;
        else if (r == "sum")
            cfg.reduction = Reduction::Sum;
        else
            throw ConfigError("phases.reduction: expected 'mean' or 'sum', got '" + r + "'");
    }
    if (j.contains("include_learn_in_forget")) {
        const std::string p = j.at("include_learn_in_forget").get<std::string>();
        if (p == "auto")
            cfg.include_learn_in_forget = IncludeLearnInForget::Auto;
        else if (p == "always")
            cfg.include_learn_in_forget = IncludeLearnInForget::Always;
        else if (p == "never")
            cfg.include_learn_in_forget = IncludeLearnInForget::Never;
        else
            throw ConfigError("phases.include_learn_in_forget: expected auto/always/never, got '" +
                              p + "'");
    }
    read_optimizer(j, cfg.optimizer);
    return cfg;
}

}  // namespace

void ExperimentConfig::validate() const {
    model.validate();
    if (data.retain_classes.empty() || data.forget_classes.empty() ||
        data.learn_classes.empty())
        throw ConfigError("data: retain/forget/learn class sets must be non-empty");
    int max_class = -1;
    for (const auto* s : {&data.retain_classes, &data.forget_classes, &data.learn_classes})
        for (int c : *s) {
            if (c < 0) throw ConfigError("data: negative class id " + std::to_string(c));
            max_class = std::max(max_class, c);
        }
    if (static_cast<std::size_t>(max_class) >= model.num_classes)
        throw ConfigError("data: class id " + std::to_string(max_class) +
                          " outside model.num_classes " + std::to_string(model.num_classes));
    if (lora_rank < 1) throw ConfigError("lora_rank must be >= 1");
    SequencePlan::parse(plan);
    if (output_dir.empty()) throw ConfigError("output_dir must be set");
}

ExperimentConfig parse_experiment_config(const std::string& json_text) {
    nlohmann::json j = nlohmann::json::parse(json_text, nullptr, false);
    if (j.is_discarded()) throw ConfigError("experiment config is not valid JSON");
    ExperimentConfig cfg;
    try {
        if (j.contains("model")) {
            const auto& m = j.at("model");
            if (m.contains("num_blocks")) cfg.model.num_blocks = m.at("num_blocks").get<std::size_t>();
            if (m.contains("embed_dim")) cfg.model.embed_dim = m.at("embed_dim").get<std::size_t>();
            if (m.contains("num_heads")) cfg.model.num_heads = m.at("num_heads").get<std::size_t>();
            if (m.contains("ffn_hidden")) cfg.model.ffn_hidden = m.at("ffn_hidden").get<std::size_t>();
            if (m.contains("seq_len")) cfg.model.seq_len = m.at("seq_len").get<std::size_t>();
            if (m.contains("input_dim")) cfg.model.input_dim = m.at("input_dim").get<std::size_t>();
            if (m.contains("num_classes"))
                cfg.model.num_classes = m.at("num_classes").get<std::size_t>();
        }
        if (j.contains("data")) {
            const auto& d = j.at("data");
            if (d.contains("pretrain_classes"))
                cfg.data.pretrain_classes = d.at("pretrain_classes").get<std::size_t>();
            if (d.contains("learn_class_count"))
                cfg.data.learn_class_count = d.at("learn_class_count").get<std::size_t>();
            if (d.contains("per_class_train"))
                cfg.data.per_class_train = d.at("per_class_train").get<std::size_t>();
            if (d.contains("per_class_test"))
                cfg.data.per_class_test = d.at("per_class_test").get<std::size_t>();
            if (d.contains("noise_std")) cfg.data.noise_std = d.at("noise_std").get<double>();
            auto read_set = [&](const char* key, std::set<int>& dst) {
                if (!d.contains(key)) return;
                for (int c : d.at(key).get<std::vector<int>>()) dst.insert(c);
            };
            read_set("retain_classes", cfg.data.retain_classes);
            read_set("forget_classes", cfg.data.forget_classes);
            read_set("learn_classes", cfg.data.learn_classes);
        }
        if (j.contains("pretrain")) {
            const auto& p = j.at("pretrain");
            if (p.contains("epochs")) cfg.pretrain_cfg.epochs = p.at("epochs").get<std::size_t>();
            if (p.contains("batch_size"))
                cfg.pretrain_cfg.batch_size = p.at("batch_size").get<std::size_t>();
            read_optimizer(p, cfg.pretrain_cfg.optimizer);
            if (p.contains("gate_acc")) cfg.pretrain_gate_acc = p.at("gate_acc").get<double>();
        }
        if (j.contains("phases")) {
            const auto& p = j.at("phases");
            if (p.contains("learn")) cfg.learn_phase = read_phase(p.at("learn"));
            if (p.contains("forget")) cfg.forget_phase = read_phase(p.at("forget"));
        }
        if (j.contains("lora")) {
            const auto& l = j.at("lora");
            if (l.contains("rank")) cfg.lora_rank = l.at("rank").get<std::size_t>();
            if (l.contains("train_biases"))
                cfg.lora_train_biases = l.at("train_biases").get<bool>();
            if (l.contains("merge_at_stage_boundary"))
                cfg.merge_at_stage_boundary = l.at("merge_at_stage_boundary").get<bool>();
        }
        if (j.contains("plan")) cfg.plan = j.at("plan").get<std::string>();
        if (j.contains("seeds")) {
            const auto& s = j.at("seeds");
            if (s.contains("model")) cfg.seeds.model = s.at("model").get<std::uint64_t>();
            if (s.contains("data")) cfg.seeds.data = s.at("data").get<std::uint64_t>();
            if (s.contains("epochs")) cfg.seeds.epochs = s.at("epochs").get<std::uint64_t>();
            if (s.contains("lora")) cfg.seeds.lora = s.at("lora").get<std::uint64_t>();
        }
        if (j.contains("output_dir")) cfg.output_dir = j.at("output_dir").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("experiment config: ") + e.what());
    }

    // default class partition: first classes retained, last pretrain classes
    // forgotten, learn classes appended after the pretraining ids
    if (cfg.data.retain_classes.empty() && cfg.data.forget_classes.empty() &&
        cfg.data.learn_classes.empty()) {
        const std::size_t p = cfg.data.pretrain_classes;
        const std::size_t f = std::min<std::size_t>(5, p / 2);
        for (std::size_t c = 0; c < p - f; ++c)
            cfg.data.retain_classes.insert(static_cast<int>(c));
        for (std::size_t c = p - f; c < p; ++c)
            cfg.data.forget_classes.insert(static_cast<int>(c));
        for (std::size_t c = p; c < p + cfg.data.learn_class_count; ++c)
            cfg.data.learn_classes.insert(static_cast<int>(c));
    }
    cfg.model.seed = cfg.seeds.model;
    cfg.validate();
    return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open experiment config: " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_experiment_config(text);
}

void apply_seed_override(ExperimentConfig& cfg, const std::string& spec) {
    const std::size_t eq = spec.find('=');
    if (eq == std::string::npos)
        throw ConfigError("seed override must look like key=value, got '" + spec + "'");
    const std::string key = spec.substr(0, eq);
    std::uint64_t value = 0;
    try {
        value = std::stoull(spec.substr(eq + 1));
    } catch (const std::exception&) {
        throw ConfigError("seed override value is not an integer: '" + spec + "'");
    }
    if (key == "model") {
        cfg.seeds.model = value;
        cfg.model.seed = value;
    } else if (key == "data")
        cfg.seeds.data = value;
    else if (key == "epochs")
        cfg.seeds.epochs = value;
    else if (key == "lora")
        cfg.seeds.lora = value;
    else
        throw ConfigError("unknown seed override key '" + key + "'");
}

ExperimentData build_experiment_data(const ExperimentConfig& cfg) {
    ExperimentData data;
    data.pretrain = generate_synthetic(cfg.data.pretrain_classes, cfg.data.per_class_train,
                                       cfg.data.per_class_test, cfg.model.seq_len,
                                       cfg.model.input_dim, cfg.data.noise_std,
                                       cfg.seeds.data, 0);
    data.fresh = generate_synthetic(cfg.data.learn_class_count, cfg.data.per_class_train,
                                    cfg.data.per_class_test, cfg.model.seq_len,
                                    cfg.model.input_dim, cfg.data.noise_std,
                                    cfg.seeds.data + 1,
                                    static_cast<int>(cfg.data.pretrain_classes));
    data.task = make_swap_split(data.pretrain, data.fresh, cfg.data.retain_classes,
                                cfg.data.forget_classes, cfg.data.learn_classes);
    return data;
}

TransformerClassifier pretrain_m0(const ExperimentConfig& cfg, const ExperimentData& data) {
    TransformerClassifier model(cfg.model);
    DatasetSplit train = merge_splits(data.task.retain.train, data.task.forget.train);
    pretrain(model, train, cfg.pretrain_cfg, cfg.seeds.epochs);
    return model;
}

std::vector<PhaseConfig> stage_configs(const ExperimentConfig& cfg, const SequencePlan& plan) {
    std::vector<PhaseConfig> out;
    for (StageKind k : plan.stages)
        out.push_back(k == StageKind::Learn ? cfg.learn_phase : cfg.forget_phase);
    return out;
}

}  // namespace ks
