#include "emodiff/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace emodiff {

namespace {

thread_local bool g_grad_enabled = true;

constexpr double kLogFloor = 1e-12;
constexpr double kNormFloor = 1e-12;

void check_finite(const std::vector<double>& data, const char* op) {
    for (double v : data) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string(op) + ": non-finite value produced");
        }
    }
}

void require_finite_input(const Tensor& t, const char* op) {
    for (double v : t.data()) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string(op) + ": non-finite input");
        }
    }
}

std::shared_ptr<TensorNode> make_node(Shape shape, std::vector<double> data) {
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    return node;
}

// Builds a result node, wiring graph edges only when gradients are enabled
// and some parent requires them.
Tensor make_result(Shape shape, std::vector<double> data, const char* op,
                   std::vector<Tensor> parents,
                   std::function<void(TensorNode&)> backward_fn) {
    check_finite(data, op);
    auto node = make_node(std::move(shape), std::move(data));
    if (g_grad_enabled) {
        bool needs = false;
        for (const auto& p : parents) {
            if (p.defined() && p.requires_grad()) {
                needs = true;
                break;
            }
        }
        if (needs) {
            node->requires_grad = true;
            node->parents.reserve(parents.size());
            for (const auto& p : parents) node->parents.push_back(p.node());
            node->backward_fn = std::move(backward_fn);
        }
    }
    return Tensor(std::move(node));
}

void same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ArgumentError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
    }
}

void accumulate(TensorNode& node, const std::vector<double>& g) {
    node.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) node.grad[i] += g[i];
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
    for (std::size_t d : shape) {
        if (d == 0) throw ArgumentError("Tensor: zero dimension in shape " + shape_str(shape));
    }
    if (shape_numel(shape) != data.size()) {
        throw ArgumentError("Tensor: shape " + shape_str(shape) + " does not match data length " +
                            std::to_string(data.size()));
    }
    check_finite(data, "Tensor");
    node_ = make_node(std::move(shape), std::move(data));
    node_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, double fill, bool requires_grad)
    : Tensor(shape, std::vector<double>(shape_numel(shape), fill), requires_grad) {}

Tensor Tensor::scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

Tensor Tensor::zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }

Tensor Tensor::randn(Shape shape, RandomStream& rng, double stddev) {
    std::vector<double> data(shape_numel(shape));
    for (double& v : data) v = stddev * rng.normal();
    return Tensor(std::move(shape), std::move(data));
}

const Shape& Tensor::shape() const {
    if (!node_) throw ArgumentError("Tensor: use of undefined tensor");
    return node_->shape;
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

const std::vector<double>& Tensor::data() const {
    if (!node_) throw ArgumentError("Tensor: use of undefined tensor");
    return node_->data;
}

std::vector<double>& Tensor::mutable_data() {
    if (!node_) throw ArgumentError("Tensor: use of undefined tensor");
    return node_->data;
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

const std::vector<double>& Tensor::grad() const {
    if (!node_) throw ArgumentError("Tensor: use of undefined tensor");
    node_->ensure_grad();
    return node_->grad;
}

void Tensor::zero_grad() {
    if (node_) node_->grad.assign(node_->data.size(), 0.0);
}

double Tensor::value() const {
    if (numel() != 1) throw ArgumentError("Tensor::value: tensor is not scalar, shape " + shape_str(shape()));
    return data()[0];
}

double Tensor::at(std::size_t i) const { return data().at(i); }

double Tensor::at(std::size_t r, std::size_t c) const {
    if (rank() != 2) throw ArgumentError("Tensor::at(r,c): tensor is not rank-2");
    return data().at(r * shape()[1] + c);
}

// ---------------------------------------------------------------- elementwise

namespace {

Tensor binary_elem(const Tensor& a, const Tensor& b, const char* op,
                   const std::function<double(double, double)>& fwd,
                   const std::function<void(TensorNode&, TensorNode&, TensorNode&)>& bwd) {
    same_shape(a, b, op);
    std::vector<double> out(a.numel());
    const auto& da = a.data();
    const auto& db = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(da[i], db[i]);
    auto an = a.node();
    auto bn = b.node();
    return make_result(a.shape(), std::move(out), op, {a, b},
                       [an, bn, bwd](TensorNode& self) { bwd(self, *an, *bn); });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_elem(
        a, b, "add", [](double x, double y) { return x + y; },
        [](TensorNode& self, TensorNode& an, TensorNode& bn) {
            if (an.requires_grad) accumulate(an, self.grad);
            if (bn.requires_grad) accumulate(bn, self.grad);
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_elem(
        a, b, "sub", [](double x, double y) { return x - y; },
        [](TensorNode& self, TensorNode& an, TensorNode& bn) {
            if (an.requires_grad) accumulate(an, self.grad);
            if (bn.requires_grad) {
                bn.ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) bn.grad[i] -= self.grad[i];
            }
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_elem(
        a, b, "mul", [](double x, double y) { return x * y; },
        [](TensorNode& self, TensorNode& an, TensorNode& bn) {
            if (an.requires_grad) {
                an.ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) an.grad[i] += self.grad[i] * bn.data[i];
            }
            if (bn.requires_grad) {
                bn.ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) bn.grad[i] += self.grad[i] * an.data[i];
            }
        });
}

Tensor div_elem(const Tensor& a, const Tensor& b) {
    for (double v : b.data()) {
        if (v == 0.0) throw NumericError("div_elem: division by zero");
    }
    return binary_elem(
        a, b, "div_elem", [](double x, double y) { return x / y; },
        [](TensorNode& self, TensorNode& an, TensorNode& bn) {
            if (an.requires_grad) {
                an.ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) an.grad[i] += self.grad[i] / bn.data[i];
            }
            if (bn.requires_grad) {
                bn.ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                    bn.grad[i] -= self.grad[i] * an.data[i] / (bn.data[i] * bn.data[i]);
                }
            }
        });
}

namespace {

Tensor unary_elem(const Tensor& a, const char* op, const std::function<double(double)>& fwd,
                  const std::function<double(double, double)>& dfdx /* (x, fx) -> deriv */) {
    std::vector<double> out(a.numel());
    const auto& da = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(da[i]);
    auto an = a.node();
    return make_result(a.shape(), std::move(out), op, {a}, [an, dfdx](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            an->grad[i] += self.grad[i] * dfdx(an->data[i], self.data[i]);
        }
    });
}

}  // namespace

Tensor neg(const Tensor& a) {
    return unary_elem(a, "neg", [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor add_scalar(const Tensor& a, double c) {
    return unary_elem(a, "add_scalar", [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double c) {
    return unary_elem(a, "mul_scalar", [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Tensor square(const Tensor& a) {
    return unary_elem(a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor sqrt_elem(const Tensor& a) {
    for (double v : a.data()) {
        if (v < 0.0) throw NumericError("sqrt_elem: negative input");
    }
    // derivative floored near zero (same spirit as the 1e-12 log floor)
    return unary_elem(a, "sqrt_elem", [](double x) { return std::sqrt(x); },
                      [](double, double fx) { return 0.5 / std::max(fx, kNormFloor); });
}

Tensor exp_elem(const Tensor& a) {
    return unary_elem(a, "exp_elem", [](double x) { return std::exp(x); },
                      [](double, double fx) { return fx; });
}

Tensor log_floored(const Tensor& a) {
    return unary_elem(a, "log_floored", [](double x) { return std::log(std::max(x, kLogFloor)); },
                      [](double x, double) { return x > kLogFloor ? 1.0 / x : 0.0; });
}

Tensor tanh_elem(const Tensor& a) {
    return unary_elem(a, "tanh_elem", [](double x) { return std::tanh(x); },
                      [](double, double fx) { return 1.0 - fx * fx; });
}

Tensor relu(const Tensor& a) {
    return unary_elem(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
                      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor scale_by(const Tensor& x, const Tensor& s) {
    if (s.numel() != 1) throw ArgumentError("scale_by: scale must be scalar");
    const double c = s.data()[0];
    std::vector<double> out(x.numel());
    const auto& dx = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * dx[i];
    auto xn = x.node();
    auto sn = s.node();
    return make_result(x.shape(), std::move(out), "scale_by", {x, s}, [xn, sn, c](TensorNode& self) {
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i] * c;
        }
        if (sn->requires_grad) {
            sn->ensure_grad();
            double g = 0.0;
            for (std::size_t i = 0; i < self.grad.size(); ++i) g += self.grad[i] * xn->data[i];
            sn->grad[0] += g;
        }
    });
}

// ----------------------------------------------------------------- structure

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw ArgumentError("reshape: element count mismatch " + shape_str(a.shape()) + " -> " +
                            shape_str(shape));
    }
    auto an = a.node();
    return make_result(std::move(shape), a.data(), "reshape", {a}, [an](TensorNode& self) {
        if (!an->requires_grad) return;
        accumulate(*an, self.grad);
    });
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ArgumentError("transpose: rank-2 tensor required");
    const std::size_t r = a.dim(0), c = a.dim(1);
    std::vector<double> out(r * c);
    const auto& da = a.data();
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = da[i * c + j];
    }
    auto an = a.node();
    return make_result({c, r}, std::move(out), "transpose", {a}, [an, r, c](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) an->grad[i * c + j] += self.grad[j * r + i];
        }
    });
}

namespace {

// rows in a rank-2 tensor, or 1 for rank-1 treated as a single row
std::pair<std::size_t, std::size_t> as_matrix(const Tensor& t, const char* op) {
    if (t.rank() == 1) return {1, t.dim(0)};
    if (t.rank() == 2) return {t.dim(0), t.dim(1)};
    throw ArgumentError(std::string(op) + ": rank-1 or rank-2 tensor required, got " + shape_str(t.shape()));
}

}  // namespace

Tensor row_broadcast_add(const Tensor& m, const Tensor& row) {
    auto [r, c] = as_matrix(m, "row_broadcast_add");
    if (row.numel() != c) throw ArgumentError("row_broadcast_add: row length mismatch");
    std::vector<double> out(m.numel());
    const auto& dm = m.data();
    const auto& dr = row.data();
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = dm[i * c + j] + dr[j];
    }
    auto mn = m.node();
    auto rn = row.node();
    return make_result(m.shape(), std::move(out), "row_broadcast_add", {m, row},
                       [mn, rn, r, c](TensorNode& self) {
                           if (mn->requires_grad) accumulate(*mn, self.grad);
                           if (rn->requires_grad) {
                               rn->ensure_grad();
                               for (std::size_t i = 0; i < r; ++i) {
                                   for (std::size_t j = 0; j < c; ++j) rn->grad[j] += self.grad[i * c + j];
                               }
                           }
                       });
}

Tensor row_broadcast_sub(const Tensor& m, const Tensor& row) {
    auto [r, c] = as_matrix(m, "row_broadcast_sub");
    if (row.numel() != c) throw ArgumentError("row_broadcast_sub: row length mismatch");
    std::vector<double> out(m.numel());
    const auto& dm = m.data();
    const auto& dr = row.data();
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = dm[i * c + j] - dr[j];
    }
    auto mn = m.node();
    auto rn = row.node();
    return make_result(m.shape(), std::move(out), "row_broadcast_sub", {m, row},
                       [mn, rn, r, c](TensorNode& self) {
                           if (mn->requires_grad) accumulate(*mn, self.grad);
                           if (rn->requires_grad) {
                               rn->ensure_grad();
                               for (std::size_t i = 0; i < r; ++i) {
                                   for (std::size_t j = 0; j < c; ++j) rn->grad[j] -= self.grad[i * c + j];
                               }
                           }
                       });
}

Tensor repeat_row(const Tensor& row, std::size_t n) {
    if (n == 0) throw ArgumentError("repeat_row: n must be positive");
    const std::size_t c = row.numel();
    std::vector<double> out(n * c);
    const auto& dr = row.data();
    for (std::size_t i = 0; i < n; ++i) {
        std::copy(dr.begin(), dr.end(), out.begin() + static_cast<std::ptrdiff_t>(i * c));
    }
    auto rn = row.node();
    return make_result({n, c}, std::move(out), "repeat_row", {row}, [rn, n, c](TensorNode& self) {
        if (!rn->requires_grad) return;
        rn->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < c; ++j) rn->grad[j] += self.grad[i * c + j];
        }
    });
}

Tensor select_row(const Tensor& m, std::size_t index) {
    if (m.rank() != 2) throw ArgumentError("select_row: rank-2 tensor required");
    const std::size_t r = m.dim(0), c = m.dim(1);
    if (index >= r) throw ArgumentError("select_row: row index out of range");
    std::vector<double> out(m.data().begin() + static_cast<std::ptrdiff_t>(index * c),
                            m.data().begin() + static_cast<std::ptrdiff_t>((index + 1) * c));
    auto mn = m.node();
    return make_result({c}, std::move(out), "select_row", {m}, [mn, index, c](TensorNode& self) {
        if (!mn->requires_grad) return;
        mn->ensure_grad();
        for (std::size_t j = 0; j < c; ++j) mn->grad[index * c + j] += self.grad[j];
    });
}

Tensor stack_scalars(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw ArgumentError("stack_scalars: empty input");
    std::vector<double> out(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (xs[i].numel() != 1) throw ArgumentError("stack_scalars: all inputs must be scalar");
        out[i] = xs[i].data()[0];
    }
    std::vector<std::shared_ptr<TensorNode>> nodes;
    nodes.reserve(xs.size());
    for (const auto& x : xs) nodes.push_back(x.node());
    return make_result({xs.size()}, std::move(out), "stack_scalars", xs, [nodes](TensorNode& self) {
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            if (!nodes[i]->requires_grad) continue;
            nodes[i]->ensure_grad();
            nodes[i]->grad[0] += self.grad[i];
        }
    });
}

Tensor concat_rows(const std::vector<Tensor>& rows) {
    if (rows.empty()) throw ArgumentError("concat_rows: empty input");
    const std::size_t c = rows[0].numel();
    std::vector<double> out;
    out.reserve(rows.size() * c);
    for (const auto& r : rows) {
        if (r.numel() != c) throw ArgumentError("concat_rows: row length mismatch");
        out.insert(out.end(), r.data().begin(), r.data().end());
    }
    std::vector<std::shared_ptr<TensorNode>> nodes;
    nodes.reserve(rows.size());
    for (const auto& r : rows) nodes.push_back(r.node());
    return make_result({rows.size(), c}, std::move(out), "concat_rows", rows, [nodes, c](TensorNode& self) {
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            if (!nodes[i]->requires_grad) continue;
            nodes[i]->ensure_grad();
            for (std::size_t j = 0; j < c; ++j) nodes[i]->grad[j] += self.grad[i * c + j];
        }
    });
}

// --------------------------------------------------------------- reductions

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    auto an = a.node();
    return make_result({1}, {s}, "sum", {a}, [an](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (double& g : an->grad) g += self.grad[0];
    });
}

Tensor mean(const Tensor& a) {
    const double inv = 1.0 / static_cast<double>(a.numel());
    double s = 0.0;
    for (double v : a.data()) s += v;
    auto an = a.node();
    return make_result({1}, {s * inv}, "mean", {a}, [an, inv](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (double& g : an->grad) g += self.grad[0] * inv;
    });
}

Tensor dot(const Tensor& a, const Tensor& b) {
    same_shape(a, b, "dot");
    double s = 0.0;
    const auto& da = a.data();
    const auto& db = b.data();
    for (std::size_t i = 0; i < da.size(); ++i) s += da[i] * db[i];
    auto an = a.node();
    auto bn = b.node();
    return make_result({1}, {s}, "dot", {a, b}, [an, bn](TensorNode& self) {
        const double g = self.grad[0];
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g * bn->data[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] += g * an->data[i];
        }
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw ArgumentError("matmul: rank-2 tensors required, got " + shape_str(a.shape()) + " and " +
                            shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2) {
        throw ArgumentError("matmul: inner dimension mismatch " + shape_str(a.shape()) + " x " +
                            shape_str(b.shape()));
    }
    std::vector<double> out(m * n, 0.0);
    const auto& da = a.data();
    const auto& db = b.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = da[i * k + p];
            if (av == 0.0) continue;
            const double* brow = &db[p * n];
            double* orow = &out[i * n];
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    auto an = a.node();
    auto bn = b.node();
    return make_result({m, n}, std::move(out), "matmul", {a, b}, [an, bn, m, k, n](TensorNode& self) {
        // dA = dC B^T ; dB = A^T dC
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    double g = 0.0;
                    const double* gro = &self.grad[i * n];
                    const double* bro = &bn->data[p * n];
                    for (std::size_t j = 0; j < n; ++j) g += gro[j] * bro[j];
                    an->grad[i * k + p] += g;
                }
            }
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t p = 0; p < k; ++p) {
                for (std::size_t i = 0; i < m; ++i) {
                    const double av = an->data[i * k + p];
                    if (av == 0.0) continue;
                    const double* gro = &self.grad[i * n];
                    double* bgo = &bn->grad[p * n];
                    for (std::size_t j = 0; j < n; ++j) bgo[j] += av * gro[j];
                }
            }
        }
    });
}

Tensor logsumexp(const Tensor& v) {
    if (v.rank() != 1) throw ArgumentError("logsumexp: rank-1 tensor required");
    const auto& d = v.data();
    const double mx = *std::max_element(d.begin(), d.end());
    double s = 0.0;
    for (double x : d) s += std::exp(x - mx);
    const double lse = mx + std::log(s);
    auto vn = v.node();
    return make_result({1}, {lse}, "logsumexp", {v}, [vn, lse](TensorNode& self) {
        if (!vn->requires_grad) return;
        vn->ensure_grad();
        const double g = self.grad[0];
        for (std::size_t i = 0; i < vn->grad.size(); ++i) {
            vn->grad[i] += g * std::exp(vn->data[i] - lse);
        }
    });
}

Tensor softmax(const Tensor& a, int axis) {
    require_finite_input(a, "softmax");
    const int r = static_cast<int>(a.rank());
    if (axis < 0 || axis >= r) {
        throw ArgumentError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                            shape_str(a.shape()));
    }
    const auto& shape = a.shape();
    const std::size_t ax = static_cast<std::size_t>(axis);
    const std::size_t len = shape[ax];
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < ax; ++i) outer *= shape[i];
    for (std::size_t i = ax + 1; i < shape.size(); ++i) inner *= shape[i];

    std::vector<double> out(a.numel());
    const auto& d = a.data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double mx = d[base];
            for (std::size_t t = 1; t < len; ++t) mx = std::max(mx, d[base + t * inner]);
            double s = 0.0;
            for (std::size_t t = 0; t < len; ++t) {
                const double e = std::exp(d[base + t * inner] - mx);
                out[base + t * inner] = e;
                s += e;
            }
            const double inv = 1.0 / s;
            for (std::size_t t = 0; t < len; ++t) out[base + t * inner] *= inv;
        }
    }
    auto an = a.node();
    return make_result(a.shape(), std::move(out), "softmax", {a},
                       [an, outer, inner, len](TensorNode& self) {
                           if (!an->requires_grad) return;
                           an->ensure_grad();
                           // dx_i = y_i (g_i - sum_j g_j y_j) per slice
                           for (std::size_t o = 0; o < outer; ++o) {
                               for (std::size_t in = 0; in < inner; ++in) {
                                   const std::size_t base = o * len * inner + in;
                                   double dotgy = 0.0;
                                   for (std::size_t t = 0; t < len; ++t) {
                                       const std::size_t idx = base + t * inner;
                                       dotgy += self.grad[idx] * self.data[idx];
                                   }
                                   for (std::size_t t = 0; t < len; ++t) {
                                       const std::size_t idx = base + t * inner;
                                       an->grad[idx] += self.data[idx] * (self.grad[idx] - dotgy);
                                   }
                               }
                           }
                       });
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
        throw ArgumentError("scaled_dot_attention: rank-2 tensors required");
    }
    if (q.dim(1) != k.dim(1)) {
        throw ArgumentError("scaled_dot_attention: query/key dim mismatch " + shape_str(q.shape()) +
                            " vs " + shape_str(k.shape()));
    }
    if (k.dim(0) != v.dim(0)) {
        throw ArgumentError("scaled_dot_attention: key/value count mismatch " + shape_str(k.shape()) +
                            " vs " + shape_str(v.shape()));
    }
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
    Tensor logits = mul_scalar(matmul(q, transpose(k)), inv_sqrt_d);
    Tensor weights = softmax(logits, 1);
    return matmul(weights, v);
}

Tensor stop_gradient(const Tensor& a) {
    // value snapshot; no parents registered, so no gradient crosses
    return Tensor(make_node(a.shape(), a.data()));
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b, bool floor_norms) {
    if (a.rank() != 1 || b.rank() != 1) throw ArgumentError("cosine_similarity: rank-1 tensors required");
    same_shape(a, b, "cosine_similarity");
    if (!floor_norms) {
        auto norm2 = [](const Tensor& t) {
            double s = 0.0;
            for (double x : t.data()) s += x * x;
            return s;
        };
        if (norm2(a) == 0.0 || norm2(b) == 0.0) {
            throw NumericError("cosine_similarity: zero-norm vector");
        }
    }
    Tensor na = sqrt_elem(add_scalar(dot(a, a), floor_norms ? kNormFloor * kNormFloor : 0.0));
    Tensor nb = sqrt_elem(add_scalar(dot(b, b), floor_norms ? kNormFloor * kNormFloor : 0.0));
    return div_elem(dot(a, b), mul(na, nb));
}

// ------------------------------------------------------------------ backward

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ArgumentError("backward: loss must be a defined scalar tensor");
    }
    auto root = loss.node();
    if (!root->requires_grad) return;  // nothing reachable requires grad

    // iterative post-order topological sort over grad-requiring nodes
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorNode* parent = node->parents[idx].get();
            ++idx;
            if (parent->requires_grad && !visited.count(parent)) {
                visited.insert(parent);
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* node = *it;
        if (node->backward_fn) {
            node->ensure_grad();
            node->backward_fn(*node);
        }
    }
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
    if (!(eps > 0.0) || eps > 1e-2) throw ArgumentError("grad_check: eps must be in (0, 1e-2]");

    Tensor probe(x.shape(), x.data(), true);
    Tensor loss = f(probe);
    if (loss.numel() != 1) throw ArgumentError("grad_check: f must be scalar-valued");
    backward(loss);
    const std::vector<double> analytic = probe.grad();

    std::vector<double> base = x.data();
    double max_rel = 0.0;
    for (std::size_t i = 0; i < base.size(); ++i) {
        const double orig = base[i];
        base[i] = orig + eps;
        const double fp = f(Tensor(x.shape(), base)).value();
        base[i] = orig - eps;
        const double fm = f(Tensor(x.shape(), base)).value();
        base[i] = orig;
        const double fd = (fp - fm) / (2.0 * eps);
        const double denom = std::max({std::abs(analytic[i]), std::abs(fd), 1e-8});
        max_rel = std::max(max_rel, std::abs(analytic[i] - fd) / denom);
    }
    return max_rel;
}

}  // namespace emodiff
