#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "ks/tensor.hpp"

namespace ks {

struct LabeledExample {
    std::vector<double> tokens;  // T×input_dim row-major
    int label = 0;
};

enum class SplitRole { Pretrain, Retain, Forget, Learn };
enum class Partition { Train, Test };

struct DatasetSplit {
    std::vector<LabeledExample> examples;
    std::set<int> class_ids;
    SplitRole role = SplitRole::Pretrain;
    Partition partition = Partition::Train;
    std::size_t seq_len = 0;
    std::size_t input_dim = 0;

    void validate() const;
};

// Train+test pair over one class set.
struct Dataset {
    DatasetSplit train;
    DatasetSplit test;
};

// The three-set partition: retain / forget from the pretraining classes,
// learn from new classes disjoint from them.
struct SwapTaskSpec {
    Dataset retain;
    Dataset forget;
    Dataset learn;
    std::size_t class_universe = 0;

    void validate() const;
};

// Seeded prototype-plus-noise generator: each class has a Gaussian prototype
// grid; examples are prototype + N(0, noise_std). Classes are labeled
// label_offset .. label_offset+num_classes-1.
Dataset generate_synthetic(std::size_t num_classes, std::size_t per_class_train,
                           std::size_t per_class_test, std::size_t seq_len,
                           std::size_t input_dim, double noise_std, std::uint64_t seed,
                           int label_offset = 0);

SwapTaskSpec make_swap_split(const Dataset& pretrain_data, const Dataset& new_data,
                             const std::set<int>& retain_classes,
                             const std::set<int>& forget_classes,
                             const std::set<int>& learn_classes);

// CSV rows: label, then T·input_dim values at 17 significant digits; schema
// (T, input_dim, class ids, counts) lives in a JSON sidecar.
void save_dataset(const DatasetSplit& split, const std::string& data_path,
                  const std::string& header_path);
DatasetSplit load_dataset(const std::string& data_path, const std::string& header_path);

// Seeded epoch shuffle; the last batch may be partial.
std::vector<std::vector<std::size_t>> batch_iter(const DatasetSplit& split,
                                                 std::size_t batch_size,
                                                 std::uint64_t epoch_seed);

// Materializes selected examples as a B×(T·input_dim) tensor plus labels.
struct Batch {
    Tensor inputs;
    std::vector<int> labels;
};
Batch make_batch(const DatasetSplit& split, const std::vector<std::size_t>& indices);

}  // namespace ks
