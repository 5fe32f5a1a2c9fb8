#include "chatnmt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>
#include <utility>

#include "chatnmt/error.hpp"

namespace chatnmt {

namespace {

using detail::Node;

size_t shape_numel(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    return n;
}

std::shared_ptr<Node> new_node(std::vector<int> shape) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    for (int d : n->shape) {
        if (d <= 0) throw ShapeError("tensor extent must be positive, got shape " + shape_string(n->shape));
    }
    n->data.assign(shape_numel(n->shape), 0.0);
    return n;
}

/// Output node of an op: requires grad iff any parent does.
Tensor make_result(std::vector<int> shape, std::initializer_list<Tensor> parents) {
    auto n = new_node(std::move(shape));
    for (const Tensor& p : parents) {
        if (p.requires_grad()) n->requires_grad = true;
        n->parents.push_back(p.handle());
    }
    return Tensor::wrap(std::move(n));
}

Tensor make_result(std::vector<int> shape, const std::vector<Tensor>& parents) {
    auto n = new_node(std::move(shape));
    for (const Tensor& p : parents) {
        if (p.requires_grad()) n->requires_grad = true;
        n->parents.push_back(p.handle());
    }
    return Tensor::wrap(std::move(n));
}

void require_same_rank_prefix(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " do not match");
}

/// True when b's shape is a strict trailing suffix of a's.
bool is_suffix(const std::vector<int>& a, const std::vector<int>& b) {
    if (b.size() >= a.size()) return false;
    return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

// C[M,N] (+)= op(A) * op(B); A stored (ta ? K x M : M x K), B stored (tb ? N x K : K x N).
void mm_kernel(const double* A, bool ta, const double* B, bool tb, double* C, int M, int N,
               int K, bool accumulate) {
    if (!accumulate) std::fill(C, C + static_cast<size_t>(M) * N, 0.0);
    if (!ta && !tb) {
        for (int i = 0; i < M; ++i) {
            const double* a = A + static_cast<size_t>(i) * K;
            double* c = C + static_cast<size_t>(i) * N;
            for (int k = 0; k < K; ++k) {
                const double av = a[k];
                const double* b = B + static_cast<size_t>(k) * N;
                for (int j = 0; j < N; ++j) c[j] += av * b[j];
            }
        }
    } else if (!ta && tb) {
        for (int i = 0; i < M; ++i) {
            const double* a = A + static_cast<size_t>(i) * K;
            double* c = C + static_cast<size_t>(i) * N;
            for (int j = 0; j < N; ++j) {
                const double* b = B + static_cast<size_t>(j) * K;
                double acc = 0.0;
                for (int k = 0; k < K; ++k) acc += a[k] * b[k];
                c[j] += acc;
            }
        }
    } else if (ta && !tb) {
        for (int k = 0; k < K; ++k) {
            const double* a = A + static_cast<size_t>(k) * M;
            const double* b = B + static_cast<size_t>(k) * N;
            for (int i = 0; i < M; ++i) {
                const double av = a[i];
                double* c = C + static_cast<size_t>(i) * N;
                for (int j = 0; j < N; ++j) c[j] += av * b[j];
            }
        }
    } else {
        for (int i = 0; i < M; ++i) {
            double* c = C + static_cast<size_t>(i) * N;
            for (int j = 0; j < N; ++j) {
                const double* b = B + static_cast<size_t>(j) * K;
                double acc = 0.0;
                for (int k = 0; k < K; ++k) acc += A[static_cast<size_t>(k) * M + i] * b[k];
                c[j] += acc;
            }
        }
    }
}

size_t last_dim(const Tensor& t) { return static_cast<size_t>(t.dim(t.rank() - 1)); }

}  // namespace

std::string shape_string(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    auto n = new_node(std::move(shape));
    n->requires_grad = requires_grad;
    return wrap(std::move(n));
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
    auto n = new_node(std::move(shape));
    std::fill(n->data.begin(), n->data.end(), value);
    n->requires_grad = requires_grad;
    return wrap(std::move(n));
}

Tensor Tensor::from_data(std::vector<double> data, std::vector<int> shape, bool requires_grad) {
    if (data.size() != shape_numel(shape))
        throw ShapeError("from_data: " + std::to_string(data.size()) +
                         " values do not fill shape " + shape_string(shape));
    auto n = new_node(std::move(shape));
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return wrap(std::move(n));
}

Tensor Tensor::scalar(double value) { return from_data({value}, {1}); }

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, double stddev, bool requires_grad) {
    auto n = new_node(std::move(shape));
    for (double& v : n->data) v = rng.normal() * stddev;
    n->requires_grad = requires_grad;
    return wrap(std::move(n));
}

Tensor Tensor::uniform(std::vector<int> shape, double lo, double hi, Rng& rng,
                       bool requires_grad) {
    auto n = new_node(std::move(shape));
    for (double& v : n->data) v = rng.uniform(lo, hi);
    n->requires_grad = requires_grad;
    return wrap(std::move(n));
}

double Tensor::item() const {
    if (numel() != 1)
        throw ContractError("item(): tensor of shape " + shape_string(shape()) + " is not scalar");
    return node_->data[0];
}

// ---------------------------------------------------------------------------
// Elementwise with suffix broadcast
// ---------------------------------------------------------------------------

namespace {

enum class EwOp { Add, Sub, Mul, Div };

Tensor elementwise(const Tensor& a, const Tensor& b, EwOp op, const char* name) {
    const bool same = a.shape() == b.shape();
    if (!same && !is_suffix(a.shape(), b.shape()))
        throw ShapeError(std::string(name) + ": shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " are not broadcastable");
    Tensor out = make_result(a.shape(), {a, b});
    const size_t bn = b.numel();
    auto* on = out.node();
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (size_t i = 0; i < a.numel(); ++i) {
        const double x = ad[i], y = bd[i % bn];
        switch (op) {
            case EwOp::Add: on->data[i] = x + y; break;
            case EwOp::Sub: on->data[i] = x - y; break;
            case EwOp::Mul: on->data[i] = x * y; break;
            case EwOp::Div: on->data[i] = x / y; break;
        }
    }
    if (out.requires_grad()) {
        Node* o = out.node();
        Node* an = a.node();
        Node* bnn = b.node();
        o->backward_fn = [o, an, bnn, bn, op]() {
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < o->data.size(); ++i) {
                    double g = o->grad[i];
                    if (op == EwOp::Mul) g *= bnn->data[i % bn];
                    else if (op == EwOp::Div) g /= bnn->data[i % bn];
                    an->grad[i] += g;
                }
            }
            if (bnn->requires_grad) {
                bnn->ensure_grad();
                for (size_t i = 0; i < o->data.size(); ++i) {
                    double g = o->grad[i];
                    const size_t j = i % bn;
                    switch (op) {
                        case EwOp::Add: bnn->grad[j] += g; break;
                        case EwOp::Sub: bnn->grad[j] -= g; break;
                        case EwOp::Mul: bnn->grad[j] += g * an->data[i]; break;
                        case EwOp::Div: {
                            const double d = bnn->data[j];
                            bnn->grad[j] -= g * an->data[i] / (d * d);
                            break;
                        }
                    }
                }
            }
        };
    }
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwOp::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwOp::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwOp::Mul, "mul"); }
Tensor div(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwOp::Div, "div"); }

Tensor scale(const Tensor& a, double c) {
    Tensor out = make_result(a.shape(), {a});
    const auto& ad = a.data();
    auto* on = out.node();
    for (size_t i = 0; i < a.numel(); ++i) on->data[i] = ad[i] * c;
    if (out.requires_grad()) {
        Node* o = out.node();
        Node* an = a.node();
        o->backward_fn = [o, an, c]() {
            an->ensure_grad();
            for (size_t i = 0; i < o->data.size(); ++i) an->grad[i] += o->grad[i] * c;
        };
    }
    return out;
}

Tensor add_const(const Tensor& a, double c) {
    Tensor out = make_result(a.shape(), {a});
    const auto& ad = a.data();
    auto* on = out.node();
    for (size_t i = 0; i < a.numel(); ++i) on->data[i] = ad[i] + c;
    if (out.requires_grad()) {
        Node* o = out.node();
        Node* an = a.node();
        o->backward_fn = [o, an]() {
            an->ensure_grad();
            for (size_t i = 0; i < o->data.size(); ++i) an->grad[i] += o->grad[i];
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a, bool transpose_b) {
    if (a.rank() < 2 || b.rank() < 2)
        throw ShapeError("matmul: operands must have rank >= 2, got " +
                         shape_string(a.shape()) + " and " + shape_string(b.shape()));
    const bool batched_b = b.rank() > 2;
    if (batched_b && b.rank() != a.rank())
        throw ShapeError("matmul: batched operands must share rank, got " +
                         shape_string(a.shape()) + " and " + shape_string(b.shape()));

    const int ar = a.dim(a.rank() - 2), ac = a.dim(a.rank() - 1);
    const int br = b.dim(b.rank() - 2), bc = b.dim(b.rank() - 1);
    const int M = transpose_a ? ac : ar;
    const int Ka = transpose_a ? ar : ac;
    const int Kb = transpose_b ? bc : br;
    const int N = transpose_b ? br : bc;
    if (Ka != Kb)
        throw ShapeError("matmul: inner extents disagree between " + shape_string(a.shape()) +
                         (transpose_a ? "^T" : "") + " and " + shape_string(b.shape()) +
                         (transpose_b ? "^T" : ""));

    std::vector<int> lead(a.shape().begin(), a.shape().end() - 2);
    if (batched_b) {
        std::vector<int> blead(b.shape().begin(), b.shape().end() - 2);
        if (blead != lead)
            throw ShapeError("matmul: leading axes disagree between " + shape_string(a.shape()) +
                             " and " + shape_string(b.shape()));
    }
    std::vector<int> out_shape = lead;
    out_shape.push_back(M);
    out_shape.push_back(N);

    Tensor out = make_result(std::move(out_shape), {a, b});
    const size_t batches = shape_numel(lead);
    const size_t a_step = static_cast<size_t>(ar) * ac;
    const size_t b_step = batched_b ? static_cast<size_t>(br) * bc : 0;
    const size_t c_step = static_cast<size_t>(M) * N;

    const double* ad = a.data().data();
    const double* bd = b.data().data();
    double* cd = out.mutable_data().data();
    for (size_t t = 0; t < batches; ++t)
        mm_kernel(ad + t * a_step, transpose_a, bd + t * b_step, transpose_b, cd + t * c_step, M,
                  N, Ka, false);

    if (out.requires_grad()) {
        Node* o = out.node();
        Node* an = a.node();
        Node* bnn = b.node();
        const int K = Ka;
        o->backward_fn = [o, an, bnn, transpose_a, transpose_b, batches, a_step, b_step, c_step,
                          M, N, K]() {
            const double* g = o->grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                double* ga = an->grad.data();
                for (size_t t = 0; t < batches; ++t) {
                    const double* bt = bnn->data.data() + t * b_step;
                    if (!transpose_a) {
                        // dA = dC * op(B)^T
                        mm_kernel(g + t * c_step, false, bt, !transpose_b, ga + t * a_step, M, K,
                                  N, true);
                    } else {
                        // stored A is A^T: dA_stored = op(B) * dC^T
                        mm_kernel(bt, transpose_b, g + t * c_step, true, ga + t * a_step, K, M, N,
                                  true);
                    }
                }
            }
            if (bnn->requires_grad) {
                bnn->ensure_grad();
                double* gb = bnn->grad.data();
                for (size_t t = 0; t < batches; ++t) {
                    const double* at = an->data.data() + t * a_step;
                    if (!transpose_b) {
                        // dB = op(A)^T * dC
                        mm_kernel(at, !transpose_a, g + t * c_step, false, gb + t * b_step, K, N,
                                  M, true);
                    } else {
                        // stored B is B^T: dB_stored = dC^T * op(A)
                        mm_kernel(g + t * c_step, true, at, transpose_a, gb + t * b_step, N, K, M,
                                  true);
                    }
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

Tensor concat_last_dim(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_last_dim: no inputs");
    std::vector<int> lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
    int total = 0;
    for (const Tensor& p : parts) {
        std::vector<int> plead(p.shape().begin(), p.shape().end() - 1);
        if (plead != lead)
            throw ShapeError("concat_last_dim: leading axes disagree between " +
                             shape_string(parts[0].shape()) + " and " + shape_string(p.shape()));
        total += p.dim(p.rank() - 1);
    }
    std::vector<int> out_shape = lead;
    out_shape.push_back(total);
    Tensor out = make_result(std::move(out_shape), parts);

    const size_t rows = shape_numel(lead);
    auto* on = out.node();
    size_t offset = 0;
    for (const Tensor& p : parts) {
        const size_t w = last_dim(p);
        const auto& pd = p.data();
        for (size_t r = 0; r < rows; ++r)
            std::copy_n(pd.data() + r * w, w, on->data.data() + r * total + offset);
        offset += w;
    }
    if (out.requires_grad()) {
        Node* o = out.node();
        std::vector<Node*> pn;
        std::vector<size_t> widths;
        for (const Tensor& p : parts) {
            pn.push_back(p.node());
            widths.push_back(last_dim(p));
        }
        const size_t tw = static_cast<size_t>(total);
        o->backward_fn = [o, pn, widths, rows, tw]() {
            size_t off = 0;
            for (size_t k = 0; k < pn.size(); ++k) {
                if (pn[k]->requires_grad) {
                    pn[k]->ensure_grad();
                    for (size_t r = 0; r < rows; ++r)
                        for (size_t j = 0; j < widths[k]; ++j)
                            pn[k]->grad[r * widths[k] + j] += o->grad[r * tw + off + j];
                }
                off += widths[k];
            }
        };
    }
    return out;
}

Tensor slice_last_dim(const Tensor& x, int start, int len) {
    const int w = x.dim(x.rank() - 1);
    if (start < 0 || len <= 0 || start + len > w)
        throw ShapeError("slice_last_dim: [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") out of range for width " +
                         std::to_string(w));
    std::vector<int> out_shape = x.shape();
    out_shape.back() = len;
    Tensor out = make_result(std::move(out_shape), {x});
    const size_t rows = x.numel() / static_cast<size_t>(w);
    auto* on = out.node();
    const auto& xd = x.data();
    for (size_t r = 0; r < rows; ++r)
        std::copy_n(xd.data() + r * w + start, len, on->data.data() + r * len);
    if (out.requires_grad()) {
        Node* o = out.node();
        Node* xn = x.node();
        o->backward_fn = [o, xn, rows, w, start, len]() {
            xn->ensure_grad();
            for (size_t r = 0; r < rows; ++r)
                for (int j = 0; j < len; ++j)
                    xn->grad[r * w + start + j] += o->grad[r * len + j];
        };
    }
    return out;
}

Tensor reshape(const Tensor& x, std::vector<int> new_shape) {
    if (shape_numel(new_shape) != x.numel())
        throw ShapeError("reshape: " + shape_string(x.shape()) + " does not hold " +
                         shape_string(new_shape));
    Tensor out = make_result(std::move(new_shape), {x});
    out.node()->data = std::vector<double>(x.data().begin(), x.data().end());
    if (out.requires_grad()) {
        Node* o = out.node();
        Node* xn = x.node();
        o->backward_fn = [o, xn]() {
            xn->ensure_grad();
            for (size_t i = 0; i < o->data.size(); ++i) xn->grad[i] += o->grad[i];
        };
    }
    return out;
}

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
    const int r = x.rank();
    if (static_cast<int>(perm.size()) != r)
        throw ShapeError("permute: order has " + std::to_string(perm.size()) + " axes, tensor " +
                         shape_string(x.shape()));
    std::vector<bool> seen(static_cast<size_t>(r), false);
    for (int p : perm) {
        if (p < 0 || p >= r || seen[static_cast<size_t>(p)])
            throw ShapeError("permute: invalid axis order");
        seen[static_cast<size_t>(p)] = true;
    }
    std::vector<int> out_shape(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) out_shape[static_cast<size_t>(i)] = x.dim(perm[static_cast<size_t>(i)]);

    // Strides of the input, and for each output axis the matching input stride.
    std::vector<size_t> in_stride(static_cast<size_t>(r), 1);
    for (int i = r - 2; i >= 0; --i)
        in_stride[static_cast<size_t>(i)] = in_stride[static_cast<size_t>(i + 1)] *
                                            static_cast<size_t>(x.dim(i + 1));
    std::vector<size_t> map_stride(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) map_stride[static_cast<size_t>(i)] = in_stride[static_cast<size_t>(perm[static_cast<size_t>(i)])];

    Tensor out = make_result(out_shape, {x});
    auto* on = out.node();
    const auto& xd = x.data();
    std::vector<int> idx(static_cast<size_t>(r), 0);
    const size_t n = x.numel();
    std::vector<size_t> src_of(n);
    size_t src = 0;
    for (size_t o = 0; o < n; ++o) {
        on->data[o] = xd[src];
        src_of[o] = src;
        // advance multi-index over the output shape
        for (int ax = r - 1; ax >= 0; --ax) {
            idx[static_cast<size_t>(ax)]++;
            src += map_stride[static_cast<size_t>(ax)];
            if (idx[static_cast<size_t>(ax)] < out_shape[static_cast<size_t>(ax)]) break;
            src -= map_stride[static_cast<size_t>(ax)] * static_cast<size_t>(out_shape[static_cast<size_t>(ax)]);
            idx[static_cast<size_t>(ax)] = 0;
        }
    }
    if (out.requires_grad()) {
        Node* o = out.node();
        Node* xn = x.node();
        o->backward_fn = [o, xn, src_of = std::move(src_of)]() {
            xn->ensure_grad();
            for (size_t i = 0; i < o->data.size(); ++i) xn->grad[src_of[i]] += o->grad[i];
        };
    }
    return out;
}

Tensor tile_dim1(const Tensor& x, int reps) {
    if (x.rank() != 2) throw ShapeError("tile_dim1: expected rank-2 input, got " + shape_string(x.shape()));
    if (reps <= 0) throw ShapeError("tile_dim1: reps must be positive");
    const int B = x.dim(0), K = x.dim(1);
    Tensor out = make_result({B, reps, K}, {x});
    auto* on = out.node();
    const auto& xd = x.data();
    for (int b = 0; b < B; ++b)
        for (int t = 0; t < reps; ++t)
            std::copy_n(xd.data() + static_cast<size_t>(b) * K, K,
                        on->data.data() + (static_cast<size_t>(b) * reps + t) * K);
    if (out.requires_grad()) {
        Node* o = out.node();
        Node* xn = x.node();
        o->backward_fn = [o, xn, B, reps, K]() {
            xn->ensure_grad();
            for (int b = 0; b < B; ++b)
                for (int t = 0; t < reps; ++t)
                    for (int k = 0; k < K; ++k)
                        xn->grad[static_cast<size_t>(b) * K + k] +=
                            o->grad[(static_cast<size_t>(b) * reps + t) * K + k];
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

namespace {

void softmax_row(const double* x, double* y, size_t w) {
    double mx = x[0];
    for (size_t i = 1; i < w; ++i) mx = std::max(mx, x[i]);
    double z = 0.0;
    for (size_t i = 0; i < w; ++i) {
        y[i] = std::exp(x[i] - mx);
        z += y[i];
    }
    for (size_t i = 0; i < w; ++i) y[i] /= z;
}

}  // namespace

Tensor softmax_last_dim(const Tensor& x) {
    const size_t w = last_dim(x);
    if (w == 0) throw DomainError("softmax_last_dim: empty axis");
    Tensor out = make_result(x.shape(), {x});
    const size_t rows = x.numel() / w;
    auto* on = out.node();
    const auto& xd = x.data();
    for (size_t r = 0; r < rows; ++r) softmax_row(xd.data() + r * w, on->data.data() + r * w, w);
    if (out.requires_grad()) {
        Node* o = out.node();
        Node* xn = x.node();
        o->backward_fn = [o, xn, rows, w]() {
            xn->ensure_grad();
            for (size_t r = 0; r < rows; ++r) {
                const double* p = o->data.data() + r * w;
                const double* g = o->grad.data() + r * w;
                double dot = 0.0;
                for (size_t i = 0; i < w; ++i) dot += g[i] * p[i];
                for (size_t i = 0; i < w; ++i) xn->grad[r * w + i] += p[i] * (g[i] - dot);
            }
        };
    }
    return out;
}

Tensor masked_softmax_last_dim(const Tensor& x, const Tensor& mask) {
    require_same_rank_prefix(x, mask, "masked_softmax_last_dim");
    const size_t w = last_dim(x);
    if (w == 0) throw DomainError("masked_softmax_last_dim: empty axis");
    Tensor out = make_result(x.shape(), {x});
    const size_t rows = x.numel() / w;
    auto* on = out.node();
    const auto& xd = x.data();
    const auto& md = mask.data();
    for (size_t r = 0; r < rows; ++r) {
        const double* xr = xd.data() + r * w;
        const double* mr = md.data() + r * w;
        double* yr = on->data.data() + r * w;
        double mx = -std::numeric_limits<double>::infinity();
        for (size_t i = 0; i < w; ++i)
            if (mr[i] != 0.0) mx = std::max(mx, xr[i]);
        if (mx == -std::numeric_limits<double>::infinity())
            throw DomainError("masked_softmax_last_dim: row " + std::to_string(r) +
                              " has no unmasked entries");
        double z = 0.0;
        for (size_t i = 0; i < w; ++i) {
            yr[i] = (mr[i] != 0.0) ? std::exp(xr[i] - mx) : 0.0;
            z += yr[i];
        }
        for (size_t i = 0; i < w; ++i) yr[i] /= z;
    }
    if (out.requires_grad()) {
        Node* o = out.node();
        Node* xn = x.node();
        o->backward_fn = [o, xn, rows, w]() {
            xn->ensure_grad();
            for (size_t r = 0; r < rows; ++r) {
                const double* p = o->data.data() + r * w;
                const double* g = o->grad.data() + r * w;
                double dot = 0.0;
                for (size_t i = 0; i < w; ++i) dot += g[i] * p[i];
                // entries masked to exactly 0 contribute p[i] == 0, hence no gradient
                for (size_t i = 0; i < w; ++i) xn->grad[r * w + i] += p[i] * (g[i] - dot);
            }
        };
    }
    return out;
}

Tensor log_softmax_last_dim(const Tensor& x) {
    const size_t w = last_dim(x);
    if (w == 0) throw DomainError("log_softmax_last_dim: empty axis");
    Tensor out = make_result(x.shape(), {x});
    const size_t rows = x.numel() / w;
    auto* on = out.node();
    const auto& xd = x.data();
    for (size_t r = 0; r < rows; ++r) {
        const double* xr = xd.data() + r * w;
        double* yr = on->data.data() + r * w;
        double mx = xr[0];
        for (size_t i = 1; i < w; ++i) mx = std::max(mx, xr[i]);
        double z = 0.0;
        for (size_t i = 0; i < w; ++i) z += std::exp(xr[i] - mx);
        const double lz = mx + std::log(z);
        for (size_t i = 0; i < w; ++i) yr[i] = xr[i] - lz;
    }
    if (out.requires_grad()) {
        Node* o = out.node();
        Node* xn = x.node();
        o->backward_fn = [o, xn, rows, w]() {
            xn->ensure_grad();
            for (size_t r = 0; r < rows; ++r) {
                const double* y = o->data.data() + r * w;
                const double* g = o->grad.data() + r * w;
                double gsum = 0.0;
                for (size_t i = 0; i < w; ++i) gsum += g[i];
                for (size_t i = 0; i < w; ++i)
                    xn->grad[r * w + i] += g[i] - std::exp(y[i]) * gsum;
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities
// ---------------------------------------------------------------------------

namespace {

template <typename Fwd, typename Bwd>
Tensor pointwise(const Tensor& x, Fwd fwd, Bwd bwd) {
    Tensor out = make_result(x.shape(), {x});
    auto* on = out.node();
    const auto& xd = x.data();
    for (size_t i = 0; i < x.numel(); ++i) on->data[i] = fwd(xd[i]);
    if (out.requires_grad()) {
        Node* o = out.node();
        Node* xn = x.node();
        o->backward_fn = [o, xn, bwd]() {
            xn->ensure_grad();
            for (size_t i = 0; i < o->data.size(); ++i)
                xn->grad[i] += o->grad[i] * bwd(xn->data[i], o->data[i]);
        };
    }
    return out;
}

}  // namespace

Tensor tanh(const Tensor& x) {
    return pointwise(
        x, [](double v) { return std::tanh(v); },
        [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& x) {
    return pointwise(
        x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor softplus(const Tensor& x) {
    return pointwise(
        x,
        [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
        [](double v, double) { return 1.0 / (1.0 + std::exp(-v)); });
}

Tensor log(const Tensor& x) {
    return pointwise(
        x, [](double v) { return std::log(v); },
        [](double v, double) { return 1.0 / v; });
}

Tensor exp(const Tensor& x) {
    return pointwise(
        x, [](double v) { return std::exp(v); },
        [](double, double y) { return y; });
}

// ---------------------------------------------------------------------------
// Pooling, normalization, dropout, lookup
// ---------------------------------------------------------------------------

Tensor mean_masked(const Tensor& x, const Tensor& mask) {
    if (x.rank() < 2)
        throw ShapeError("mean_masked: input must have rank >= 2, got " + shape_string(x.shape()));
    std::vector<int> xlead(x.shape().begin(), x.shape().end() - 1);
    if (mask.shape() != xlead)
        throw ShapeError("mean_masked: mask " + shape_string(mask.shape()) +
                         " does not match rows of " + shape_string(x.shape()));
    const int S = x.dim(x.rank() - 2);
    const size_t d = last_dim(x);
    std::vector<int> out_shape(x.shape().begin(), x.shape().end() - 2);
    out_shape.push_back(static_cast<int>(d));
    const size_t groups = shape_numel({x.shape().begin(), x.shape().end() - 2});

    Tensor out = make_result(std::move(out_shape), {x, mask});
    auto* on = out.node();
    const auto& xd = x.data();
    const auto& md = mask.data();
    std::vector<double> counts(groups, 0.0);
    for (size_t g = 0; g < groups; ++g) {
        double cnt = 0.0;
        for (int s = 0; s < S; ++s) cnt += (md[g * S + s] != 0.0) ? 1.0 : 0.0;
        if (cnt == 0.0)
            throw ContractError("mean_masked: mask selects no positions in group " +
                                std::to_string(g));
        counts[g] = cnt;
        for (int s = 0; s < S; ++s) {
            if (md[g * S + s] == 0.0) continue;
            const double* row = xd.data() + (g * S + static_cast<size_t>(s)) * d;
            double* acc = on->data.data() + g * d;
            for (size_t j = 0; j < d; ++j) acc[j] += row[j];
        }
        double* acc = on->data.data() + g * d;
        for (size_t j = 0; j < d; ++j) acc[j] /= cnt;
    }
    if (out.requires_grad()) {
        Node* o = out.node();
        Node* xn = x.node();
        Node* mn = mask.node();
        o->backward_fn = [o, xn, mn, groups, S, d, counts = std::move(counts)]() {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            for (size_t g = 0; g < groups; ++g) {
                const double inv = 1.0 / counts[g];
                for (int s = 0; s < S; ++s) {
                    if (mn->data[g * S + static_cast<size_t>(s)] == 0.0) continue;
                    double* gx = xn->grad.data() + (g * S + static_cast<size_t>(s)) * d;
                    const double* gy = o->grad.data() + g * d;
                    for (size_t j = 0; j < d; ++j) gx[j] += gy[j] * inv;
                }
            }
        };
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const size_t d = last_dim(x);
    if (gain.shape() != std::vector<int>{static_cast<int>(d)} ||
        bias.shape() != std::vector<int>{static_cast<int>(d)})
        throw ShapeError("layer_norm: gain/bias " + shape_string(gain.shape()) + "/" +
                         shape_string(bias.shape()) + " do not match feature width " +
                         std::to_string(d));
    Tensor out = make_result(x.shape(), {x, gain, bias});
    const size_t rows = x.numel() / d;
    auto* on = out.node();
    const auto& xd = x.data();
    const auto& gd = gain.data();
    const auto& bd = bias.data();
    std::vector<double> xhat(x.numel());
    std::vector<double> inv_std(rows);
    for (size_t r = 0; r < rows; ++r) {
        const double* xr = xd.data() + r * d;
        double mean = 0.0;
        for (size_t j = 0; j < d; ++j) mean += xr[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (size_t j = 0; j < d; ++j) {
            const double c = xr[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        for (size_t j = 0; j < d; ++j) {
            const double h = (xr[j] - mean) * is;
            xhat[r * d + j] = h;
            on->data[r * d + j] = gd[j] * h + bd[j];
        }
    }
    if (out.requires_grad()) {
        Node* o = out.node();
        Node* xn = x.node();
        Node* gn = gain.node();
        Node* bn = bias.node();
        o->backward_fn = [o, xn, gn, bn, rows, d, xhat = std::move(xhat),
                          inv_std = std::move(inv_std)]() {
            if (gn->requires_grad) gn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            if (xn->requires_grad) xn->ensure_grad();
            for (size_t r = 0; r < rows; ++r) {
                const double* gy = o->grad.data() + r * d;
                const double* h = xhat.data() + r * d;
                if (gn->requires_grad || bn->requires_grad) {
                    for (size_t j = 0; j < d; ++j) {
                        if (gn->requires_grad) gn->grad[j] += gy[j] * h[j];
                        if (bn->requires_grad) bn->grad[j] += gy[j];
                    }
                }
                if (xn->requires_grad) {
                    double m1 = 0.0, m2 = 0.0;
                    for (size_t j = 0; j < d; ++j) {
                        const double t = gy[j] * gn->data[j];
                        m1 += t;
                        m2 += t * h[j];
                    }
                    m1 /= static_cast<double>(d);
                    m2 /= static_cast<double>(d);
                    double* gx = xn->grad.data() + r * d;
                    for (size_t j = 0; j < d; ++j) {
                        const double t = gy[j] * gn->data[j];
                        gx[j] += inv_std[r] * (t - m1 - h[j] * m2);
                    }
                }
            }
        };
    }
    return out;
}

Tensor dropout(const Tensor& x, double p, bool training, Rng& rng) {
    if (p < 0.0 || p >= 1.0)
        throw ContractError("dropout: rate " + std::to_string(p) + " outside [0, 1)");
    if (!training || p == 0.0) return x;
    Tensor out = make_result(x.shape(), {x});
    auto* on = out.node();
    const auto& xd = x.data();
    const double keep = 1.0 - p;
    std::vector<double> mask(x.numel());
    for (size_t i = 0; i < x.numel(); ++i) {
        mask[i] = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
        on->data[i] = xd[i] * mask[i];
    }
    if (out.requires_grad()) {
        Node* o = out.node();
        Node* xn = x.node();
        o->backward_fn = [o, xn, mask = std::move(mask)]() {
            xn->ensure_grad();
            for (size_t i = 0; i < o->data.size(); ++i) xn->grad[i] += o->grad[i] * mask[i];
        };
    }
    return out;
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& indices,
                        const std::vector<int>& index_shape) {
    if (table.rank() != 2)
        throw ShapeError("embedding_lookup: table must be rank 2, got " +
                         shape_string(table.shape()));
    if (indices.size() != shape_numel(index_shape))
        throw ShapeError("embedding_lookup: " + std::to_string(indices.size()) +
                         " indices do not fill shape " + shape_string(index_shape));
    const int V = table.dim(0);
    const size_t d = last_dim(table);
    for (int id : indices)
        if (id < 0 || id >= V)
            throw ValidationError("embedding_lookup: index " + std::to_string(id) +
                                  " outside table of " + std::to_string(V) + " rows");
    std::vector<int> out_shape = index_shape;
    out_shape.push_back(static_cast<int>(d));
    Tensor out = make_result(std::move(out_shape), {table});
    auto* on = out.node();
    const auto& td = table.data();
    for (size_t i = 0; i < indices.size(); ++i)
        std::copy_n(td.data() + static_cast<size_t>(indices[i]) * d, d, on->data.data() + i * d);
    if (out.requires_grad()) {
        Node* o = out.node();
        Node* tn = table.node();
        o->backward_fn = [o, tn, indices, d]() {
            tn->ensure_grad();
            for (size_t i = 0; i < indices.size(); ++i) {
                double* dst = tn->grad.data() + static_cast<size_t>(indices[i]) * d;
                const double* src = o->grad.data() + i * d;
                for (size_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        };
    }
    return out;
}

Tensor gather_last_dim(const Tensor& x, const std::vector<int>& indices) {
    const size_t w = last_dim(x);
    const size_t rows = x.numel() / w;
    if (indices.size() != rows)
        throw ShapeError("gather_last_dim: " + std::to_string(indices.size()) +
                         " indices for " + std::to_string(rows) + " rows");
    for (int id : indices)
        if (id < 0 || static_cast<size_t>(id) >= w)
            throw ValidationError("gather_last_dim: index " + std::to_string(id) +
                                  " outside width " + std::to_string(w));
    std::vector<int> out_shape(x.shape().begin(), x.shape().end() - 1);
    if (out_shape.empty()) out_shape.push_back(1);
    Tensor out = make_result(std::move(out_shape), {x});
    auto* on = out.node();
    const auto& xd = x.data();
    for (size_t r = 0; r < rows; ++r) on->data[r] = xd[r * w + static_cast<size_t>(indices[r])];
    if (out.requires_grad()) {
        Node* o = out.node();
        Node* xn = x.node();
        o->backward_fn = [o, xn, indices, w]() {
            xn->ensure_grad();
            for (size_t r = 0; r < indices.size(); ++r)
                xn->grad[r * w + static_cast<size_t>(indices[r])] += o->grad[r];
        };
    }
    return out;
}

Tensor sum_last_dim(const Tensor& x) {
    const size_t w = last_dim(x);
    const size_t rows = x.numel() / w;
    std::vector<int> out_shape(x.shape().begin(), x.shape().end() - 1);
    if (out_shape.empty()) out_shape.push_back(1);
    Tensor out = make_result(std::move(out_shape), {x});
    auto* on = out.node();
    const auto& xd = x.data();
    for (size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (size_t j = 0; j < w; ++j) acc += xd[r * w + j];
        on->data[r] = acc;
    }
    if (out.requires_grad()) {
        Node* o = out.node();
        Node* xn = x.node();
        o->backward_fn = [o, xn, rows, w]() {
            xn->ensure_grad();
            for (size_t r = 0; r < rows; ++r)
                for (size_t j = 0; j < w; ++j) xn->grad[r * w + j] += o->grad[r];
        };
    }
    return out;
}

Tensor sum_all(const Tensor& x) {
    Tensor out = make_result({1}, {x});
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    out.node()->data[0] = acc;
    if (out.requires_grad()) {
        Node* o = out.node();
        Node* xn = x.node();
        o->backward_fn = [o, xn]() {
            xn->ensure_grad();
            const double g = o->grad[0];
            for (size_t i = 0; i < xn->data.size(); ++i) xn->grad[i] += g;
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Backward sweep
// ---------------------------------------------------------------------------

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw ContractError("backward: loss must be a scalar tensor");
    if (!loss.requires_grad()) return;

    // Iterative post-order DFS over the recorded graph, pruned to the
    // subgraph that requires gradients.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(loss.node(), 0);
    visited.insert(loss.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        bool descended = false;
        while (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
                descended = true;
                break;
            }
        }
        if (descended) continue;
        order.push_back(node);
        stack.pop_back();
    }

    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn();
    }
}

}  // namespace chatnmt
