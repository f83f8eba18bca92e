#include "emodiff/parameter.hpp"

#include <cmath>

namespace emodiff {

namespace {

bool is_ascii(const std::string& s) {
    for (unsigned char c : s) {
        if (c > 127) return false;
    }
    return true;
}

}  // namespace

Parameter::Parameter(std::string param_name, Tensor initial) : name(std::move(param_name)) {
    if (name.empty() || !is_ascii(name)) {
        throw ArgumentError("Parameter: name must be non-empty ASCII");
    }
    value = Tensor(initial.shape(), initial.data(), /*requires_grad=*/true);
}

Parameter& ParameterSet::add(const std::string& name, Tensor initial) {
    if (index_.count(name)) throw ArgumentError("ParameterSet: duplicate parameter name '" + name + "'");
    params_.push_back(std::make_unique<Parameter>(name, std::move(initial)));
    index_[name] = params_.size() - 1;
    return *params_.back();
}

Parameter& ParameterSet::get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ArgumentError("ParameterSet: unknown parameter '" + name + "'");
    return *params_[it->second];
}

const Parameter& ParameterSet::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ArgumentError("ParameterSet: unknown parameter '" + name + "'");
    return *params_[it->second];
}

bool ParameterSet::contains(const std::string& name) const { return index_.count(name) > 0; }

std::vector<Parameter*> ParameterSet::all() {
    std::vector<Parameter*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(p.get());
    return out;
}

std::vector<const Parameter*> ParameterSet::all() const {
    std::vector<const Parameter*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(p.get());
    return out;
}

void ParameterSet::zero_grad() {
    for (auto& p : params_) p->value.zero_grad();
}

void ParameterSet::load_values(const ParameterSet& other) {
    for (auto& p : params_) {
        const Parameter& src = other.get(p->name);
        if (src.value.shape() != p->value.shape()) {
            throw DataError("ParameterSet: shape mismatch loading '" + p->name + "'");
        }
        p->value.mutable_data() = src.value.data();
    }
}

AdamOptimizer::AdamOptimizer(std::vector<Parameter*> params, double lr, double beta1, double beta2,
                             double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
        m_[i].assign(params_[i]->value.numel(), 0.0);
        v_[i].assign(params_[i]->value.numel(), 0.0);
    }
}

void AdamOptimizer::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& value = params_[i]->value;
        const auto& grad = value.grad();
        auto& data = value.mutable_data();
        for (std::size_t j = 0; j < data.size(); ++j) {
            const double g = grad[j];
            m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g;
            v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g * g;
            const double mhat = m_[i][j] / bc1;
            const double vhat = v_[i][j] / bc2;
            data[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

void AdamOptimizer::zero_grad() {
    for (auto* p : params_) p->value.zero_grad();
}

void AdamOptimizer::reset_moments(const Parameter& param, std::size_t row_begin, std::size_t row_len) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
        if (params_[i] != &param) continue;
        for (std::size_t j = row_begin; j < row_begin + row_len && j < m_[i].size(); ++j) {
            m_[i][j] = 0.0;
            v_[i][j] = 0.0;
        }
        return;
    }
}

}  // namespace emodiff
