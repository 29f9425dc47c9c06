#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ks/model.hpp"
#include "ks/tensor.hpp"

namespace ks {

// Low-rank pair for one FFN linear layer: ΔW = A·B, identity at init (B = 0).
struct LoraAdapter {
    std::string target;  // canonical layer name, e.g. "block0.ffn.w1"
    Tensor A;            // in_dim × r
    Tensor B;            // r × out_dim
    std::size_t rank = 0;
    bool enabled = true;
};

// One adapter per FFN linear layer, 2 per block. Attaching freezes the base
// weights; only A/B (and FFN biases when requested) stay trainable.
class AdapterSet {
public:
    AdapterSet() = default;
    AdapterSet(std::vector<LoraAdapter> adapters, std::size_t rank, bool biases_trainable);

    const std::vector<LoraAdapter>& adapters() const { return adapters_; }
    std::vector<LoraAdapter>& adapters() { return adapters_; }
    std::size_t rank() const { return rank_; }
    bool biases_trainable() const { return biases_trainable_; }

    const LoraAdapter* find(const std::string& target) const;

    // A/B of every adapter, plus FFN biases when unfrozen.
    std::vector<Tensor> trainable_params(const TransformerClassifier& model) const;
    std::size_t trainable_parameter_count() const;

private:
    std::vector<LoraAdapter> adapters_;
    std::size_t rank_ = 0;
    bool biases_trainable_ = false;
};

AdapterSet attach_adapters(TransformerClassifier& model, std::size_t rank,
                           std::uint64_t seed, bool train_biases = false);

// W0 + A·B (W0 untouched when the adapter is disabled).
Tensor effective_weight(const LoraAdapter& adapter, const Tensor& w0);

// Σ over adapters of ‖A‖²_F + ‖B‖²_F. The unsquared variant sums plain
// Frobenius norms instead and is exposed for comparison only.
Tensor group_regularizer(const AdapterSet& set, bool squared = true);

// Folds every ΔW into its base weight, reseeds A, zeroes B. Forward outputs
// are unchanged up to rounding.
void merge(AdapterSet& set, TransformerClassifier& model, std::uint64_t reseed);

}  // namespace ks
