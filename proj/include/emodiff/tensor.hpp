#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "emodiff/errors.hpp"
#include "emodiff/rng.hpp"

namespace emodiff {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorNode;

// Dense double-precision array with reverse-mode gradient support.
// Row-major layout, rank as given by `shape`. A Tensor is a cheap handle to
// a shared node; readers must treat constructed tensors as immutable.
// mutable_data() exists for leaf updates (optimizers, re-seeding) only.
class Tensor {
 public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);
    Tensor(Shape shape, double fill, bool requires_grad = false);

    static Tensor scalar(double v);
    static Tensor zeros(Shape shape);
    static Tensor randn(Shape shape, RandomStream& rng, double stddev = 1.0);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t numel() const;
    std::size_t dim(std::size_t i) const { return shape().at(i); }

    const std::vector<double>& data() const;
    std::vector<double>& mutable_data();

    bool requires_grad() const;
    // Gradient accumulated by backward(); empty until first use.
    const std::vector<double>& grad() const;
    void zero_grad();

    double value() const;                           // scalar tensors only
    double at(std::size_t i) const;                 // flat index
    double at(std::size_t r, std::size_t c) const;  // rank-2 convenience

    std::shared_ptr<TensorNode> node() const { return node_; }
    explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

 private:
    std::shared_ptr<TensorNode> node_;
};

struct TensorNode {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // lazily sized to data.size()
    std::vector<std::shared_ptr<TensorNode>> parents;
    // Propagates this node's grad into its parents' grad buffers.
    std::function<void(TensorNode&)> backward_fn;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

// While a guard is alive on this thread, ops compute values only: outputs
// carry no graph edges and never require grad. Used for inference/sampling.
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
 private:
    bool prev_;
};

bool grad_enabled();

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div_elem(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
Tensor square(const Tensor& a);
Tensor sqrt_elem(const Tensor& a);
Tensor exp_elem(const Tensor& a);
// log with a 1e-12 floor on its argument (stability decision; the floor
// also zeroes the gradient below the floor).
Tensor log_floored(const Tensor& a);
Tensor tanh_elem(const Tensor& a);
Tensor relu(const Tensor& a);

// Scales x by a scalar tensor (e.g. a learnable residual weight).
Tensor scale_by(const Tensor& x, const Tensor& s);

// ---- structure ----
Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a);  // rank-2
Tensor row_broadcast_add(const Tensor& m, const Tensor& row);
Tensor row_broadcast_sub(const Tensor& m, const Tensor& row);
Tensor repeat_row(const Tensor& row, std::size_t n);
Tensor select_row(const Tensor& m, std::size_t index);
Tensor stack_scalars(const std::vector<Tensor>& xs);
Tensor concat_rows(const std::vector<Tensor>& rows);

// ---- reductions / linear algebra ----
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor dot(const Tensor& a, const Tensor& b);
Tensor matmul(const Tensor& a, const Tensor& b);  // rank-2 x rank-2
Tensor logsumexp(const Tensor& v);                // rank-1 -> scalar

// Numerically stable softmax (max subtraction) along `axis`.
// Slices along the axis are non-negative and sum to 1 within 1e-12.
Tensor softmax(const Tensor& a, int axis);

// out[i] = sum_j softmax_j(Q[i].K[j]/sqrt(d)) V[j]; single-head, sqrt(d)
// scaled. With one key the value row is returned bit-exactly.
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v);

// Value snapshot; cuts the graph so no gradient crosses this boundary.
Tensor stop_gradient(const Tensor& a);

// cosine(a, b) over rank-1 tensors. With floor_norms the norms are floored
// at 1e-12 (training use); otherwise a zero-norm input is a NumericError.
Tensor cosine_similarity(const Tensor& a, const Tensor& b, bool floor_norms = false);

// ---- autodiff driver ----
// Reverse-mode sweep from a scalar loss; accumulates into the grad of every
// reachable node that requires grad (leaves keep theirs until zero_grad).
void backward(const Tensor& loss);

// Central-difference check of d f / d x at the given eps. Returns the max
// over coordinates of |analytic - fd| / max(|analytic|, |fd|, 1e-8).
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps = 1e-5);

}  // namespace emodiff
