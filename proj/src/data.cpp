#include "ks/data.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

namespace ks {

namespace {

std::string role_name(SplitRole r) {
    switch (r) {
        case SplitRole::Pretrain: return "pretrain";
        case SplitRole::Retain: return "retain";
        case SplitRole::Forget: return "forget";
        case SplitRole::Learn: return "learn";
    }
    return "pretrain";
}

SplitRole role_from_name(const std::string& s) {
    if (s == "pretrain") return SplitRole::Pretrain;
    if (s == "retain") return SplitRole::Retain;
    if (s == "forget") return SplitRole::Forget;
    if (s == "learn") return SplitRole::Learn;
    throw ValidationError("unknown split role: " + s);
}

// Fisher–Yates with an explicit generator so the order is stable across
// library versions.
void seeded_shuffle(std::vector<std::size_t>& v, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (std::size_t i = v.size(); i > 1; --i)
        std::swap(v[i - 1], v[rng() % i]);
}

}  // namespace

void DatasetSplit::validate() const {
    for (const LabeledExample& e : examples) {
        if (e.tokens.size() != seq_len * input_dim)
            throw ValidationError("example token count does not match header dimensions");
        if (!class_ids.count(e.label))
            throw ValidationError("example label " + std::to_string(e.label) +
                                  " not in declared class set");
    }
}

void SwapTaskSpec::validate() const {
    auto overlap = [](const std::set<int>& a, const std::set<int>& b, const char* na,
                      const char* nb) {
        for (int c : a)
            if (b.count(c))
                throw ValidationError(std::string("class ") + std::to_string(c) +
                                      " appears in both " + na + " and " + nb);
    };
    overlap(retain.train.class_ids, forget.train.class_ids, "retain", "forget");
    overlap(retain.train.class_ids, learn.train.class_ids, "retain", "learn");
    overlap(forget.train.class_ids, learn.train.class_ids, "forget", "learn");
    for (const auto* d : {&retain, &forget, &learn}) {
        d->train.validate();
        d->test.validate();
        if (d->train.class_ids != d->test.class_ids)
            throw ValidationError("train/test class sets differ within one split");
    }
}

Dataset generate_synthetic(std::size_t num_classes, std::size_t per_class_train,
                           std::size_t per_class_test, std::size_t seq_len,
                           std::size_t input_dim, double noise_std, std::uint64_t seed,
                           int label_offset) {
    if (num_classes < 2) throw ConfigError("generate_synthetic needs num_classes >= 2");
    if (per_class_train < 1 || per_class_test < 1)
        throw ConfigError("generate_synthetic needs per-class counts >= 1");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> unit(0.0, 1.0);
    const std::size_t grid = seq_len * input_dim;
    std::vector<std::vector<double>> prototypes(num_classes, std::vector<double>(grid));
    for (auto& p : prototypes)
        for (double& v : p) v = unit(rng);

    auto fill = [&](DatasetSplit& split, std::size_t per_class, Partition part,
                    std::mt19937_64& noise_rng) {
        split.seq_len = seq_len;
        split.input_dim = input_dim;
        split.partition = part;
        std::normal_distribution<double> noise(0.0, noise_std);
        for (std::size_t c = 0; c < num_classes; ++c) {
            split.class_ids.insert(label_offset + static_cast<int>(c));
            for (std::size_t i = 0; i < per_class; ++i) {
                LabeledExample e;
                e.label = label_offset + static_cast<int>(c);
                e.tokens = prototypes[c];
                if (noise_std > 0.0)
                    for (double& v : e.tokens) v += noise(noise_rng);
                split.examples.push_back(std::move(e));
            }
        }
    };

    Dataset out;
    // test noise comes from an independent stream so the held-out partition
    // never depends on the train sample count
    std::mt19937_64 train_rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::mt19937_64 test_rng(seed ^ 0xc2b2ae3d27d4eb4fULL);
    fill(out.train, per_class_train, Partition::Train, train_rng);
    fill(out.test, per_class_test, Partition::Test, test_rng);
    return out;
}

namespace {

DatasetSplit filter_classes(const DatasetSplit& src, const std::set<int>& classes,
                            SplitRole role) {
    DatasetSplit out;
    out.seq_len = src.seq_len;
    out.input_dim = src.input_dim;
    out.partition = src.partition;
    out.role = role;
    out.class_ids = classes;
    for (const LabeledExample& e : src.examples)
        if (classes.count(e.label)) out.examples.push_back(e);
    return out;
}

}  // namespace

SwapTaskSpec make_swap_split(const Dataset& pretrain_data, const Dataset& new_data,
                             const std::set<int>& retain_classes,
                             const std::set<int>& forget_classes,
                             const std::set<int>& learn_classes) {
    for (int c : retain_classes)
        if (!pretrain_data.train.class_ids.count(c))
            throw ValidationError("retain class " + std::to_string(c) +
                                  " not present in pretraining data");
    for (int c : forget_classes)
        if (!pretrain_data.train.class_ids.count(c))
            throw ValidationError("forget class " + std::to_string(c) +
                                  " not present in pretraining data");
    for (int c : learn_classes) {
        if (pretrain_data.train.class_ids.count(c))
            throw ValidationError("learn class " + std::to_string(c) +
                                  " overlaps the pretraining classes");
        if (!new_data.train.class_ids.count(c))
            throw ValidationError("learn class " + std::to_string(c) +
                                  " not present in the new data");
    }
    SwapTaskSpec task;
    task.retain = {filter_classes(pretrain_data.train, retain_classes, SplitRole::Retain),
                   filter_classes(pretrain_data.test, retain_classes, SplitRole::Retain)};
    task.forget = {filter_classes(pretrain_data.train, forget_classes, SplitRole::Forget),
                   filter_classes(pretrain_data.test, forget_classes, SplitRole::Forget)};
    task.learn = {filter_classes(new_data.train, learn_classes, SplitRole::Learn),
                  filter_classes(new_data.test, learn_classes, SplitRole::Learn)};
    int max_class = -1;
    for (const auto* s : {&retain_classes, &forget_classes, &learn_classes})
        for (int c : *s) max_class = std::max(max_class, c);
    task.class_universe = static_cast<std::size_t>(max_class + 1);
    task.validate();
    return task;
}

void save_dataset(const DatasetSplit& split, const std::string& data_path,
                  const std::string& header_path) {
    nlohmann::json header;
    header["seq_len"] = split.seq_len;
    header["input_dim"] = split.input_dim;
    header["role"] = role_name(split.role);
    header["partition"] = split.partition == Partition::Train ? "train" : "test";
    header["class_ids"] = std::vector<int>(split.class_ids.begin(), split.class_ids.end());
    header["num_examples"] = split.examples.size();
    std::ofstream hout(header_path, std::ios::trunc);
    if (!hout) throw IoError("cannot write dataset header: " + header_path);
    hout << header.dump(2) << "\n";

    std::ofstream out(data_path, std::ios::trunc);
    if (!out) throw IoError("cannot write dataset: " + data_path);
    char buf[32];
    for (const LabeledExample& e : split.examples) {
        out << e.label;
        for (double v : e.tokens) {
            std::snprintf(buf, sizeof buf, "%.17g", v);
            out << ',' << buf;
        }
        out << '\n';
    }
    if (!out) throw IoError("dataset write failed: " + data_path);
}

DatasetSplit load_dataset(const std::string& data_path, const std::string& header_path) {
    std::ifstream hin(header_path);
    if (!hin) throw IoError("cannot open dataset header: " + header_path);
    nlohmann::json header = nlohmann::json::parse(hin, nullptr, false);
    if (header.is_discarded()) throw IoError("unparseable dataset header: " + header_path);

    DatasetSplit split;
    split.seq_len = header.at("seq_len").get<std::size_t>();
    split.input_dim = header.at("input_dim").get<std::size_t>();
    split.role = role_from_name(header.at("role").get<std::string>());
    split.partition =
        header.at("partition").get<std::string>() == "train" ? Partition::Train : Partition::Test;
    for (int c : header.at("class_ids").get<std::vector<int>>()) split.class_ids.insert(c);

    std::ifstream in(data_path);
    if (!in) throw IoError("cannot open dataset: " + data_path);
    const std::size_t width = split.seq_len * split.input_dim;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string field;
        LabeledExample e;
        if (!std::getline(ss, field, ','))
            throw ValidationError("line " + std::to_string(line_no) + ": missing label");
        try {
            e.label = std::stoi(field);
        } catch (const std::exception&) {
            throw ValidationError("line " + std::to_string(line_no) + ": bad label '" + field + "'");
        }
        if (!split.class_ids.count(e.label))
            throw ValidationError("line " + std::to_string(line_no) + ": unknown label " +
                                  std::to_string(e.label));
        e.tokens.reserve(width);
        while (std::getline(ss, field, ',')) {
            try {
                e.tokens.push_back(std::stod(field));
            } catch (const std::exception&) {
                throw ValidationError("line " + std::to_string(line_no) + ": bad value '" +
                                      field + "'");
            }
        }
        if (e.tokens.size() != width)
            throw ValidationError("line " + std::to_string(line_no) + ": expected " +
                                  std::to_string(width) + " values, got " +
                                  std::to_string(e.tokens.size()));
        split.examples.push_back(std::move(e));
    }
    if (header.at("num_examples").get<std::size_t>() != split.examples.size())
        throw ValidationError("dataset row count does not match header num_examples");
    return split;
}

std::vector<std::vector<std::size_t>> batch_iter(const DatasetSplit& split,
                                                 std::size_t batch_size,
                                                 std::uint64_t epoch_seed) {
    if (batch_size < 1) throw ContractError("batch_size must be >= 1");
    std::vector<std::size_t> order(split.examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    seeded_shuffle(order, epoch_seed);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        const std::size_t end = std::min(order.size(), start + batch_size);
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;
}

Batch make_batch(const DatasetSplit& split, const std::vector<std::size_t>& indices) {
    if (indices.empty()) throw ContractError("empty batch");
    const std::size_t width = split.seq_len * split.input_dim;
    std::vector<double> data;
    data.reserve(indices.size() * width);
    Batch batch;
    for (std::size_t i : indices) {
        const LabeledExample& e = split.examples.at(i);
        data.insert(data.end(), e.tokens.begin(), e.tokens.end());
        batch.labels.push_back(e.label);
    }
    batch.inputs = Tensor::from({indices.size(), width}, std::move(data));
    return batch;
}

}  // namespace ks
