#include "ks/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace ks {

namespace {

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
}

std::uint64_t g_grad_epoch = 0;

void ensure_grad(Tensor::Node& n) {
    if (n.grad_epoch != g_grad_epoch) {
        n.grad.assign(n.value.size(), 0.0);
        n.grad_epoch = g_grad_epoch;
    }
}

}  // namespace

Tensor make_op(std::vector<std::size_t> shape, std::vector<double> value,
               std::vector<Tensor> parents,
               std::function<void(Tensor::Node&)> backprop) {
    auto n = std::make_shared<Tensor::Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    for (const auto& p : parents) {
        n->needs_grad = n->needs_grad || p.node()->needs_grad;
        n->parents.push_back(p.node());
    }
    if (n->needs_grad) n->backprop = std::move(backprop);
    return Tensor(std::move(n));
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
    std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::from(std::vector<std::size_t> shape, std::vector<double> data) {
    if (shape_numel(shape) != data.size())
        throw ShapeError("tensor data size " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

Tensor Tensor::param(std::vector<std::size_t> shape, std::vector<double> data) {
    Tensor t = from(std::move(shape), std::move(data));
    t.set_requires_grad(true);
    return t;
}

double Tensor::item() const {
    if (!is_scalar()) throw ContractError("item() on non-scalar tensor " + shape_str(node_->shape));
    return node_->value[0];
}

std::vector<double>& Tensor::mutable_data() {
    if (node_->backprop) throw ContractError("mutation of a non-leaf tensor");
    return node_->value;
}

void Tensor::set_requires_grad(bool v) {
    node_->requires_grad = v;
    node_->needs_grad = v;
}

Tensor Tensor::detach() const {
    return from(node_->shape, node_->value);
}

void GradMap::put(const Tensor& param, std::vector<double> g) {
    grads_[param.node().get()] = std::move(g);
}

const std::vector<double>& GradMap::of(const Tensor& param) const {
    auto it = grads_.find(param.node().get());
    if (it != grads_.end()) return it->second;
    auto& z = zero_cache_[param.node().get()];
    z.assign(param.size(), 0.0);
    return z;
}

bool GradMap::contains(const Tensor& param) const {
    return grads_.count(param.node().get()) > 0;
}

// --- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.rows())
        throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<double> out(m * n, 0.0);
    const double* A = a.data().data();
    const double* B = b.data().data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = A[i * k + p];
            if (aip == 0.0) continue;
            const double* brow = B + p * n;
            double* orow = out.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    auto an = a.node();
    auto bn = b.node();
    return make_op({m, n}, std::move(out), {a, b}, [an, bn, m, k, n](Tensor::Node& self) {
        const double* G = self.grad.data();
        if (an->needs_grad) {
            ensure_grad(*an);
            // dA = G Bᵀ
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    const double* grow = G + i * n;
                    const double* brow = bn->value.data() + p * n;
                    for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    an->grad[i * k + p] += acc;
                }
        }
        if (bn->needs_grad) {
            ensure_grad(*bn);
            // dB = Aᵀ G
            for (std::size_t i = 0; i < m; ++i) {
                const double* arow = an->value.data() + i * k;
                const double* grow = G + i * n;
                for (std::size_t p = 0; p < k; ++p) {
                    const double aip = arow[p];
                    if (aip == 0.0) continue;
                    double* brow = bn->grad.data() + p * n;
                    for (std::size_t j = 0; j < n; ++j) brow[j] += aip * grow[j];
                }
            }
        }
    });
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    auto an = a.node();
    auto bn = b.node();
    return make_op(a.shape(), std::move(out), {a, b}, [an, bn](Tensor::Node& self) {
        for (auto* p : {an.get(), bn.get()}) {
            if (!p->needs_grad) continue;
            ensure_grad(*p);
            for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
        }
    });
}

Tensor add_rows_tiled(const Tensor& x, const Tensor& v) {
    if (x.shape().size() != 2 || v.shape().size() != 2 || x.cols() != v.cols() ||
        v.rows() == 0 || x.rows() % v.rows() != 0)
        throw ShapeError("add_rows_tiled shape mismatch: " + shape_str(x.shape()) + " vs " +
                         shape_str(v.shape()));
    const std::size_t rows = x.rows(), d = x.cols(), period = v.rows();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < rows; ++i) {
        const double* xr = x.data().data() + i * d;
        const double* vr = v.data().data() + (i % period) * d;
        double* o = out.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) o[j] = xr[j] + vr[j];
    }
    auto xn = x.node();
    auto vn = v.node();
    return make_op(x.shape(), std::move(out), {x, v},
                   [xn, vn, rows, d, period](Tensor::Node& self) {
        if (xn->needs_grad) {
            ensure_grad(*xn);
            for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
        }
        if (vn->needs_grad) {
            ensure_grad(*vn);
            for (std::size_t i = 0; i < rows; ++i) {
                double* vr = vn->grad.data() + (i % period) * d;
                const double* g = self.grad.data() + i * d;
                for (std::size_t j = 0; j < d; ++j) vr[j] += g[j];
            }
        }
    });
}

Tensor relu(const Tensor& x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, x.data()[i]);
    auto xn = x.node();
    return make_op(x.shape(), std::move(out), {x}, [xn](Tensor::Node& self) {
        if (!xn->needs_grad) return;
        ensure_grad(*xn);
        // subgradient at 0 taken as 0
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (xn->value[i] > 0.0) xn->grad[i] += self.grad[i];
    });
}

Tensor scale(const Tensor& x, double c) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * x.data()[i];
    auto xn = x.node();
    return make_op(x.shape(), std::move(out), {x}, [xn, c](Tensor::Node& self) {
        if (!xn->needs_grad) return;
        ensure_grad(*xn);
        for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += c * self.grad[i];
    });
}

Tensor sum(const Tensor& x) {
    double s = std::accumulate(x.data().begin(), x.data().end(), 0.0);
    auto xn = x.node();
    return make_op({1}, {s}, {x}, [xn](Tensor::Node& self) {
        if (!xn->needs_grad) return;
        ensure_grad(*xn);
        for (double& g : xn->grad) g += self.grad[0];
    });
}

Tensor sqrt_eltwise(const Tensor& x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(x.data()[i]);
    auto xn = x.node();
    return make_op(x.shape(), std::move(out), {x}, [xn](Tensor::Node& self) {
        if (!xn->needs_grad) return;
        ensure_grad(*xn);
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (self.value[i] > 0.0) xn->grad[i] += 0.5 / self.value[i] * self.grad[i];
    });
}

Tensor frobenius_norm_sq(const Tensor& m) {
    double s = 0.0;
    for (double v : m.data()) s += v * v;
    auto mn = m.node();
    return make_op({1}, {s}, {m}, [mn](Tensor::Node& self) {
        if (!mn->needs_grad) return;
        ensure_grad(*mn);
        for (std::size_t i = 0; i < mn->value.size(); ++i)
            mn->grad[i] += 2.0 * mn->value[i] * self.grad[0];
    });
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                             Reduction reduction) {
    if (logits.shape().size() != 2)
        throw ShapeError("softmax_cross_entropy expects B×C logits, got " +
                         shape_str(logits.shape()));
    const std::size_t batch = logits.rows(), classes = logits.cols();
    if (labels.size() != batch)
        throw ContractError("label count " + std::to_string(labels.size()) +
                            " does not match batch " + std::to_string(batch));
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= classes)
            throw ValidationError("label " + std::to_string(y) + " out of range [0, " +
                                  std::to_string(classes) + ")");
    // log-sum-exp; keep softmax probabilities for the backward pass
    std::vector<double> probs(batch * classes);
    double total = 0.0;
    for (std::size_t i = 0; i < batch; ++i) {
        const double* row = logits.data().data() + i * classes;
        double mx = row[0];
        for (std::size_t j = 1; j < classes; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < classes; ++j) z += std::exp(row[j] - mx);
        const double lse = mx + std::log(z);
        total += lse - row[labels[i]];
        for (std::size_t j = 0; j < classes; ++j)
            probs[i * classes + j] = std::exp(row[j] - lse);
    }
    const double norm = reduction == Reduction::Mean ? 1.0 / static_cast<double>(batch) : 1.0;
    auto ln = logits.node();
    return make_op({1}, {total * norm}, {logits},
                   [ln, labels, probs = std::move(probs), batch, classes,
                    norm](Tensor::Node& self) {
        if (!ln->needs_grad) return;
        ensure_grad(*ln);
        const double g = self.grad[0] * norm;
        for (std::size_t i = 0; i < batch; ++i)
            for (std::size_t j = 0; j < classes; ++j) {
                double p = probs[i * classes + j];
                if (static_cast<std::size_t>(labels[i]) == j) p -= 1.0;
                ln->grad[i * classes + j] += g * p;
            }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (x.shape().size() != 2 || gamma.size() != x.cols() || beta.size() != x.cols())
        throw ShapeError("layer_norm shape mismatch: x " + shape_str(x.shape()) +
                         ", gamma " + shape_str(gamma.shape()));
    const std::size_t rows = x.rows(), d = x.cols();
    std::vector<double> out(x.size()), xhat(x.size()), inv_sigma(rows);
    for (std::size_t i = 0; i < rows; ++i) {
        const double* xr = x.data().data() + i * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += xr[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[i] = is;
        for (std::size_t j = 0; j < d; ++j) {
            xhat[i * d + j] = (xr[j] - mu) * is;
            out[i * d + j] = gamma.data()[j] * xhat[i * d + j] + beta.data()[j];
        }
    }
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    return make_op(x.shape(), std::move(out), {x, gamma, beta},
                   [xn, gn, bn, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma),
                    rows, d](Tensor::Node& self) {
        if (gn->needs_grad) {
            ensure_grad(*gn);
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < d; ++j)
                    gn->grad[j] += self.grad[i * d + j] * xhat[i * d + j];
        }
        if (bn->needs_grad) {
            ensure_grad(*bn);
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < d; ++j) bn->grad[j] += self.grad[i * d + j];
        }
        if (xn->needs_grad) {
            ensure_grad(*xn);
            for (std::size_t i = 0; i < rows; ++i) {
                double m1 = 0.0, m2 = 0.0;  // means of dy·g and dy·g·x̂
                for (std::size_t j = 0; j < d; ++j) {
                    const double dyg = self.grad[i * d + j] * gn->value[j];
                    m1 += dyg;
                    m2 += dyg * xhat[i * d + j];
                }
                m1 /= static_cast<double>(d);
                m2 /= static_cast<double>(d);
                for (std::size_t j = 0; j < d; ++j) {
                    const double dyg = self.grad[i * d + j] * gn->value[j];
                    xn->grad[i * d + j] +=
                        inv_sigma[i] * (dyg - m1 - xhat[i * d + j] * m2);
                }
            }
        }
    });
}

Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                           std::size_t batch, std::size_t seq_len, std::size_t num_heads) {
    const std::size_t d = q.cols();
    if (q.shape() != k.shape() || q.shape() != v.shape() ||
        q.rows() != batch * seq_len || d % num_heads != 0)
        throw ShapeError("multihead_attention shape mismatch: q " + shape_str(q.shape()));
    const std::size_t hd = d / num_heads;
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<double> out(q.size(), 0.0);
    // softmax rows of QKᵀ/√hd per (batch, head), kept for backward
    std::vector<double> attn(batch * num_heads * seq_len * seq_len);
    for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t row0 = b * seq_len;
        for (std::size_t h = 0; h < num_heads; ++h) {
            const std::size_t c0 = h * hd;
            double* P = attn.data() + (b * num_heads + h) * seq_len * seq_len;
            for (std::size_t i = 0; i < seq_len; ++i) {
                const double* qi = q.data().data() + (row0 + i) * d + c0;
                double mx = -1e300;
                for (std::size_t j = 0; j < seq_len; ++j) {
                    const double* kj = k.data().data() + (row0 + j) * d + c0;
                    double s = 0.0;
                    for (std::size_t c = 0; c < hd; ++c) s += qi[c] * kj[c];
                    s *= inv_sqrt_hd;
                    P[i * seq_len + j] = s;
                    mx = std::max(mx, s);
                }
                double z = 0.0;
                for (std::size_t j = 0; j < seq_len; ++j) {
                    P[i * seq_len + j] = std::exp(P[i * seq_len + j] - mx);
                    z += P[i * seq_len + j];
                }
                for (std::size_t j = 0; j < seq_len; ++j) P[i * seq_len + j] /= z;
                double* oi = out.data() + (row0 + i) * d + c0;
                for (std::size_t j = 0; j < seq_len; ++j) {
                    const double p = P[i * seq_len + j];
                    const double* vj = v.data().data() + (row0 + j) * d + c0;
                    for (std::size_t c = 0; c < hd; ++c) oi[c] += p * vj[c];
                }
            }
        }
    }
    auto qn = q.node();
    auto kn = k.node();
    auto vn = v.node();
    return make_op(q.shape(), std::move(out), {q, k, v},
                   [qn, kn, vn, attn = std::move(attn), batch, seq_len, num_heads, d, hd,
                    inv_sqrt_hd](Tensor::Node& self) {
        if (!(qn->needs_grad || kn->needs_grad || vn->needs_grad)) return;
        ensure_grad(*qn);
        ensure_grad(*kn);
        ensure_grad(*vn);
        std::vector<double> dS(seq_len * seq_len);
        for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t row0 = b * seq_len;
            for (std::size_t h = 0; h < num_heads; ++h) {
                const std::size_t c0 = h * hd;
                const double* P = attn.data() + (b * num_heads + h) * seq_len * seq_len;
                for (std::size_t i = 0; i < seq_len; ++i) {
                    const double* doi = self.grad.data() + (row0 + i) * d + c0;
                    // dP then dS = P∘(dP − Σ_j dP∘P)
                    double dot = 0.0;
                    for (std::size_t j = 0; j < seq_len; ++j) {
                        const double* vj = vn->value.data() + (row0 + j) * d + c0;
                        double dp = 0.0;
                        for (std::size_t c = 0; c < hd; ++c) dp += doi[c] * vj[c];
                        dS[i * seq_len + j] = dp;
                        dot += dp * P[i * seq_len + j];
                    }
                    for (std::size_t j = 0; j < seq_len; ++j) {
                        dS[i * seq_len + j] =
                            P[i * seq_len + j] * (dS[i * seq_len + j] - dot);
                        // dV
                        double* dvj = vn->grad.data() + (row0 + j) * d + c0;
                        const double p = P[i * seq_len + j];
                        for (std::size_t c = 0; c < hd; ++c) dvj[c] += p * doi[c];
                    }
                }
                for (std::size_t i = 0; i < seq_len; ++i) {
                    double* dqi = qn->grad.data() + (row0 + i) * d + c0;
                    for (std::size_t j = 0; j < seq_len; ++j) {
                        const double ds = dS[i * seq_len + j] * inv_sqrt_hd;
                        const double* kj = kn->value.data() + (row0 + j) * d + c0;
                        const double* qi = qn->value.data() + (row0 + i) * d + c0;
                        double* dkj = kn->grad.data() + (row0 + j) * d + c0;
                        for (std::size_t c = 0; c < hd; ++c) {
                            dqi[c] += ds * kj[c];
                            dkj[c] += ds * qi[c];
                        }
                    }
                }
            }
        }
    });
}

Tensor mean_pool(const Tensor& x, std::size_t batch, std::size_t seq_len) {
    if (x.shape().size() != 2 || x.rows() != batch * seq_len)
        throw ShapeError("mean_pool expects (B·T)×d input, got " + shape_str(x.shape()));
    const std::size_t d = x.cols();
    std::vector<double> out(batch * d, 0.0);
    const double inv_t = 1.0 / static_cast<double>(seq_len);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < seq_len; ++t) {
            const double* xr = x.data().data() + (b * seq_len + t) * d;
            double* o = out.data() + b * d;
            for (std::size_t j = 0; j < d; ++j) o[j] += xr[j] * inv_t;
        }
    auto xn = x.node();
    return make_op({batch, d}, std::move(out), {x},
                   [xn, batch, seq_len, d, inv_t](Tensor::Node& self) {
        if (!xn->needs_grad) return;
        ensure_grad(*xn);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t t = 0; t < seq_len; ++t) {
                double* g = xn->grad.data() + (b * seq_len + t) * d;
                const double* go = self.grad.data() + b * d;
                for (std::size_t j = 0; j < d; ++j) g[j] += go[j] * inv_t;
            }
    });
}

GradMap backward(const Tensor& loss, const std::vector<Tensor>& params) {
    if (!loss.defined() || !loss.is_scalar())
        throw ContractError("backward requires a scalar loss");
    ++g_grad_epoch;
    // iterative post-order topo sort
    std::vector<Tensor::Node*> order;
    std::unordered_set<Tensor::Node*> visited;
    std::vector<std::pair<Tensor::Node*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Tensor::Node* p = node->parents[idx++].get();
            if (p->needs_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    ensure_grad(*loss.node());
    loss.node()->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Tensor::Node* n = *it;
        ensure_grad(*n);
        if (n->backprop) n->backprop(*n);
    }
    GradMap out;
    for (const Tensor& p : params) {
        auto* n = p.node().get();
        if (n->grad_epoch == g_grad_epoch && visited.count(n))
            out.put(p, n->grad);
        else
            out.put(p, std::vector<double>(p.size(), 0.0));
    }
    return out;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor& x, double eps) {
    if (eps <= 0.0 || eps > 1e-2) throw ContractError("grad_check eps must lie in (0, 1e-2]");
    x.set_requires_grad(true);
    Tensor loss = f(x);
    GradMap g = backward(loss, {x});
    const std::vector<double> analytic = g.of(x);
    double max_err = 0.0;
    auto& data = x.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
        const double orig = data[i];
        data[i] = orig + eps;
        const double fp = f(x).item();
        data[i] = orig - eps;
        const double fm = f(x).item();
        data[i] = orig;
        const double numeric = (fp - fm) / (2.0 * eps);
        const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
        max_err = std::max(max_err, std::abs(analytic[i] - numeric) / denom);
    }
    return max_err;
}

}  // namespace ks
