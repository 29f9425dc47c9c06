#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "ks/errors.hpp"

namespace ks {

// Dense row-major tensor of 64-bit scalars with an optional reverse-mode
// autodiff node. Copying a Tensor aliases the underlying node; graphs are
// built eagerly by the free-function ops below and torn down when the last
// Tensor referencing them goes out of scope.
class Tensor {
public:
    struct Node {
        std::vector<std::size_t> shape;
        std::vector<double> value;
        std::vector<double> grad;   // valid only when grad_epoch == current pass
        std::uint64_t grad_epoch = 0;
        bool requires_grad = false; // trainable leaf
        bool needs_grad = false;    // requires_grad or depends on one
        std::vector<std::shared_ptr<Node>> parents;
        // Pushes this node's grad into its parents' grads.
        std::function<void(Node&)> backprop;
    };

    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape);
    static Tensor from(std::vector<std::size_t> shape, std::vector<double> data);
    static Tensor scalar(double v);
    // Trainable leaf.
    static Tensor param(std::vector<std::size_t> shape, std::vector<double> data);

    bool defined() const { return node_ != nullptr; }
    const std::vector<std::size_t>& shape() const { return node_->shape; }
    std::size_t size() const { return node_->value.size(); }
    std::size_t rows() const { return node_->shape.at(0); }
    std::size_t cols() const { return node_->shape.at(1); }
    bool is_scalar() const { return node_->value.size() == 1; }
    double item() const;

    const std::vector<double>& data() const { return node_->value; }
    // In-place mutation; legal only on leaves (optimizer updates, perturbations).
    std::vector<double>& mutable_data();

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v);

    // Value copy with no graph attachment.
    Tensor detach() const;

    std::shared_ptr<Node> node() const { return node_; }

    friend bool same_node(const Tensor& a, const Tensor& b) { return a.node_ == b.node_; }

private:
    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}
    std::shared_ptr<Node> node_;

    friend Tensor make_op(std::vector<std::size_t> shape, std::vector<double> value,
                          std::vector<Tensor> parents,
                          std::function<void(Tensor::Node&)> backprop);
};

enum class Reduction { Mean, Sum };

// Gradients of one backward pass, keyed by parameter node.
class GradMap {
public:
    void put(const Tensor& param, std::vector<double> g);
    // Zero-filled when the parameter did not participate in the loss.
    const std::vector<double>& of(const Tensor& param) const;
    bool contains(const Tensor& param) const;

private:
    std::unordered_map<const Tensor::Node*, std::vector<double>> grads_;
    mutable std::unordered_map<const Tensor::Node*, std::vector<double>> zero_cache_;
};

// --- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
// Adds v (R×d) to x (n·R×d) cyclically by row index mod R. R=1 is a bias row.
Tensor add_rows_tiled(const Tensor& x, const Tensor& v);
Tensor relu(const Tensor& x);
Tensor scale(const Tensor& x, double c);
Tensor sum(const Tensor& x);
Tensor sqrt_eltwise(const Tensor& x);
Tensor frobenius_norm_sq(const Tensor& m);
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                             Reduction reduction);
// Row-wise layer norm over the last dimension; gamma/beta have length d.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);
// Scaled dot-product attention over flattened (B·T)×d projections.
Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                           std::size_t batch, std::size_t seq_len, std::size_t num_heads);
// (B·T)×d -> B×d token mean.
Tensor mean_pool(const Tensor& x, std::size_t batch, std::size_t seq_len);

// Reverse-mode pass from a scalar loss. Parameters absent from the graph get
// zero gradients in the returned map.
GradMap backward(const Tensor& loss, const std::vector<Tensor>& params);

// Max over elements of |analytic - central difference| / max(1, |a|, |b|).
double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor& x, double eps);

}  // namespace ks
