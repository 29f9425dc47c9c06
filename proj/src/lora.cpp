#include "ks/lora.hpp"

#include <algorithm>
#include <random>

namespace ks {

AdapterSet::AdapterSet(std::vector<LoraAdapter> adapters, std::size_t rank,
                       bool biases_trainable)
    : adapters_(std::move(adapters)), rank_(rank), biases_trainable_(biases_trainable) {}

const LoraAdapter* AdapterSet::find(const std::string& target) const {
    for (const LoraAdapter& a : adapters_)
        if (a.target == target) return &a;
    return nullptr;
}

std::vector<Tensor> AdapterSet::trainable_params(const TransformerClassifier& model) const {
    std::vector<Tensor> out;
    for (const LoraAdapter& a : adapters_) {
        out.push_back(a.A);
        out.push_back(a.B);
    }
    if (biases_trainable_) {
        for (const auto& block : model.blocks()) {
            out.push_back(block.ffn_b1);
            out.push_back(block.ffn_b2);
        }
    }
    return out;
}

std::size_t AdapterSet::trainable_parameter_count() const {
    std::size_t n = 0;
    for (const LoraAdapter& a : adapters_) n += a.A.size() + a.B.size();
    return n;
}

namespace {

LoraAdapter make_adapter(const std::string& target, std::size_t in_dim, std::size_t out_dim,
                         std::size_t rank, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, 0.02);
    std::vector<double> a(in_dim * rank);
    for (double& v : a) v = dist(rng);
    LoraAdapter adapter;
    adapter.target = target;
    adapter.A = Tensor::param({in_dim, rank}, std::move(a));
    adapter.B = Tensor::param({rank, out_dim}, std::vector<double>(rank * out_dim, 0.0));
    adapter.rank = rank;
    return adapter;
}

void reseed_adapter(LoraAdapter& a, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, 0.02);
    for (double& v : a.A.mutable_data()) v = dist(rng);
    for (double& v : a.B.mutable_data()) v = 0.0;
}

}  // namespace

AdapterSet attach_adapters(TransformerClassifier& model, std::size_t rank,
                           std::uint64_t seed, bool train_biases) {
    const ModelConfig& c = model.config();
    if (rank < 1) throw ConfigError("lora rank must be >= 1");
    if (rank > std::min(c.embed_dim, c.ffn_hidden))
        throw ConfigError("lora rank " + std::to_string(rank) +
                          " exceeds min FFN dimension " +
                          std::to_string(std::min(c.embed_dim, c.ffn_hidden)));
    std::mt19937_64 rng(seed);
    std::vector<LoraAdapter> adapters;
    for (std::size_t k = 0; k < c.num_blocks; ++k) {
        const std::string p = "block" + std::to_string(k) + ".ffn.";
        adapters.push_back(make_adapter(p + "w1", c.embed_dim, c.ffn_hidden, rank, rng));
        adapters.push_back(make_adapter(p + "w2", c.ffn_hidden, c.embed_dim, rank, rng));
    }
    // freeze the base; only A/B (and optionally FFN biases) keep gradients
    model.set_all_trainable(false);
    if (train_biases) {
        for (auto& block : model.blocks()) {
            Tensor b1 = block.ffn_b1, b2 = block.ffn_b2;
            b1.set_requires_grad(true);
            b2.set_requires_grad(true);
        }
    }
    return AdapterSet(std::move(adapters), rank, train_biases);
}

Tensor effective_weight(const LoraAdapter& adapter, const Tensor& w0) {
    if (!adapter.enabled) return w0;
    if (adapter.A.rows() != w0.rows() || adapter.B.cols() != w0.cols())
        throw ShapeError("adapter " + adapter.target + " does not match base weight shape");
    return add(w0, matmul(adapter.A, adapter.B));
}

Tensor group_regularizer(const AdapterSet& set, bool squared) {
    Tensor total = Tensor::scalar(0.0);
    for (const LoraAdapter& a : set.adapters()) {
        Tensor term = squared
            ? add(frobenius_norm_sq(a.A), frobenius_norm_sq(a.B))
            : add(sqrt_eltwise(frobenius_norm_sq(a.A)), sqrt_eltwise(frobenius_norm_sq(a.B)));
        total = add(total, term);
    }
    return total;
}

void merge(AdapterSet& set, TransformerClassifier& model, std::uint64_t reseed) {
    std::mt19937_64 rng(reseed);
    for (LoraAdapter& a : set.adapters()) {
        if (!a.enabled) continue;
        Tensor w0 = model.parameter(a.target);
        auto& w = w0.mutable_data();
        const std::size_t rows = a.A.rows(), r = a.A.cols(), cols = a.B.cols();
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t p = 0; p < r; ++p) {
                const double av = a.A.data()[i * r + p];
                if (av == 0.0) continue;
                for (std::size_t j = 0; j < cols; ++j)
                    w[i * cols + j] += av * a.B.data()[p * cols + j];
            }
        reseed_adapter(a, rng);
    }
}

}  // namespace ks
