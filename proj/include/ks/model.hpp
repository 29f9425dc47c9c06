#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ks/tensor.hpp"

namespace ks {

class AdapterSet;  // lora.hpp

struct ModelConfig {
    std::size_t num_blocks = 4;
    std::size_t embed_dim = 64;
    std::size_t num_heads = 4;
    std::size_t ffn_hidden = 128;
    std::size_t seq_len = 16;
    std::size_t input_dim = 16;
    std::size_t num_classes = 25;
    std::uint64_t seed = 1;

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

// Pre-norm transformer blocks over token embeddings, mean-pooled into a
// classifier head spanning the full class universe.
class TransformerClassifier {
public:
    struct Block {
        Tensor ln1_scale, ln1_shift;
        Tensor wq, bq, wk, bk, wv, bv, wo, bo;
        Tensor ln2_scale, ln2_shift;
        Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    };

    explicit TransformerClassifier(const ModelConfig& config);

    const ModelConfig& config() const { return config_; }
    std::vector<Block>& blocks() { return blocks_; }
    const std::vector<Block>& blocks() const { return blocks_; }

    Tensor& token_embed() { return token_embed_; }
    Tensor& pos_embed() { return pos_embed_; }
    Tensor& final_ln_scale() { return final_ln_scale_; }
    Tensor& final_ln_shift() { return final_ln_shift_; }
    Tensor& head_weight() { return head_weight_; }
    Tensor& head_bias() { return head_bias_; }

    // Canonical (name, tensor) enumeration; order is the depth order used by
    // snapshots and diagnostics.
    std::vector<std::pair<std::string, Tensor>> named_parameters() const;
    Tensor parameter(const std::string& name) const;
    std::size_t parameter_count() const;

    // batch: B×(T·input_dim) row-major token grids -> B×C logits. Adapters,
    // when given, replace each FFN weight by W0 + A·B in-graph.
    Tensor forward(const Tensor& batch, const AdapterSet* adapters = nullptr) const;

    // FFN of one block on a (rows)×d activation matrix.
    Tensor ffn_forward(const Tensor& x, std::size_t block, const AdapterSet* adapters = nullptr) const;

    void set_all_trainable(bool trainable);

private:
    ModelConfig config_;
    Tensor token_embed_;   // input_dim × d
    Tensor pos_embed_;     // T × d
    std::vector<Block> blocks_;
    Tensor final_ln_scale_, final_ln_shift_;
    Tensor head_weight_;   // d × C
    Tensor head_bias_;     // 1 × C
};

std::size_t expected_parameter_count(const ModelConfig& config);

// Per-layer deep copy of effective weights, in canonical depth order.
struct StageSnapshot {
    std::string stage_label;
    std::vector<std::string> layer_names;
    std::vector<std::size_t> depth_indices;
    std::vector<std::vector<double>> weights;
};

StageSnapshot snapshot_weights(const TransformerClassifier& model,
                               const std::string& stage_label,
                               const AdapterSet* adapters = nullptr);

// Checkpoint file: 8-byte magic "KSCHKPT1", u64 LE manifest length, UTF-8 JSON
// manifest (format version, config, stage label, seed, tensor table with
// shapes and byte offsets), then the little-endian float32 blob.
struct CheckpointMeta {
    ModelConfig config;
    std::string stage_label;
    std::uint64_t seed = 0;
    std::size_t lora_rank = 0;  // 0 when no adapters are stored
};

void save_checkpoint(const TransformerClassifier& model, const std::string& path,
                     const std::string& stage_label, const AdapterSet* adapters = nullptr);

struct LoadedCheckpoint {
    TransformerClassifier model;
    CheckpointMeta meta;
    // Adapter tensors keyed by reserved "lora." names, in file order.
    std::vector<std::pair<std::string, Tensor>> lora_tensors;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace ks
