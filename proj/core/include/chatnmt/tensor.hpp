#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "chatnmt/rng.hpp"

namespace chatnmt {

namespace detail {

/// One node of the define-by-run computation graph. Rebuilt on every
/// forward pass; backward() walks it in reverse topological order.
struct Node {
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad;  // lazily allocated, same length as data
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> backward_fn;  // accumulates this->grad into parents

    size_t numel() const { return data.size(); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
};

}  // namespace detail

/// Dense n-dimensional array of doubles with optional participation in the
/// gradient tape. Cheap to copy (shared handle). Values are written once by
/// the producing op; parameters are the only tensors mutated afterwards,
/// between training steps, through mutable_data().
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
    static Tensor from_data(std::vector<double> data, std::vector<int> shape,
                            bool requires_grad = false);
    static Tensor scalar(double value);
    /// Gaussian init, N(0, stddev^2).
    static Tensor randn(std::vector<int> shape, Rng& rng, double stddev = 1.0,
                        bool requires_grad = false);
    static Tensor uniform(std::vector<int> shape, double lo, double hi, Rng& rng,
                          bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    size_t numel() const { return node_->data.size(); }

    std::span<const double> data() const { return node_->data; }
    std::span<double> mutable_data() { return node_->data; }
    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const double> grad() const { return node_->grad; }
    std::span<double> mutable_grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() {
        if (!node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
    }

    /// Value of a single-element tensor.
    double item() const;

    detail::Node* node() const { return node_.get(); }
    const std::shared_ptr<detail::Node>& handle() const { return node_; }

    static Tensor wrap(std::shared_ptr<detail::Node> n) {
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

private:
    std::shared_ptr<detail::Node> node_;
};

std::string shape_string(const std::vector<int>& shape);

// ---------------------------------------------------------------------------
// Elementwise / broadcast arithmetic. Shapes must be equal, or b's shape a
// trailing suffix of a's (bias-style broadcast; gradients sum over the lead).
// ---------------------------------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_const(const Tensor& a, double c);

// ---------------------------------------------------------------------------
// Matrix product over the last two axes. `a` has rank >= 2; `b` has rank 2
// (shared across a's leading batch axes) or the same rank as `a` with equal
// leading axes. Transpose flags read the stored operand as its transpose.
// ---------------------------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a = false,
              bool transpose_b = false);

Tensor concat_last_dim(const std::vector<Tensor>& parts);
Tensor slice_last_dim(const Tensor& x, int start, int len);
Tensor reshape(const Tensor& x, std::vector<int> new_shape);
Tensor permute(const Tensor& x, const std::vector<int>& perm);
/// (B, K) -> (B, reps, K); the same row repeated. Gradient sums the copies.
Tensor tile_dim1(const Tensor& x, int reps);

Tensor softmax_last_dim(const Tensor& x);
/// Exact masked softmax: entries where mask == 0 get probability exactly 0,
/// normalization runs over the unmasked entries only. mask shape == x shape.
Tensor masked_softmax_last_dim(const Tensor& x, const Tensor& mask);
Tensor log_softmax_last_dim(const Tensor& x);

Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);

/// x: (..., S, d), mask: (..., S) of 0/1 -> (..., d). Mean over rows whose
/// mask is nonzero; the divisor is the unmasked count, not S.
Tensor mean_masked(const Tensor& x, const Tensor& mask);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-6);

/// Inverted dropout. Identity when !training or p == 0.
Tensor dropout(const Tensor& x, double p, bool training, Rng& rng);

/// table: (V, d); indices laid out in index_shape -> index_shape + [d].
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& indices,
                        const std::vector<int>& index_shape);

/// x: (..., V), indices: one id per leading position -> (...).
Tensor gather_last_dim(const Tensor& x, const std::vector<int>& indices);

Tensor sum_last_dim(const Tensor& x);
Tensor sum_all(const Tensor& x);

/// Reverse-mode sweep from a scalar loss. Gradients accumulate; callers
/// zero parameter grads between steps.
void backward(const Tensor& loss);

}  // namespace chatnmt
