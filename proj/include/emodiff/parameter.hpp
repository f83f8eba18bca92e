#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "emodiff/tensor.hpp"

namespace emodiff {

// Named learnable tensor. Names are unique within one ParameterSet.
struct Parameter {
    std::string name;
    Tensor value;

    Parameter() = default;
    Parameter(std::string param_name, Tensor initial);
};

// Ordered collection of parameters owned by a model. Registration order is
// the serialization order, which keeps checkpoints reproducible.
class ParameterSet {
 public:
    Parameter& add(const std::string& name, Tensor initial);
    Parameter& get(const std::string& name);
    const Parameter& get(const std::string& name) const;
    bool contains(const std::string& name) const;

    std::vector<Parameter*> all();
    std::vector<const Parameter*> all() const;
    std::size_t size() const { return params_.size(); }

    void zero_grad();
    // Copies values from another set (by name); shapes must match.
    void load_values(const ParameterSet& other);

 private:
    std::vector<std::unique_ptr<Parameter>> params_;
    std::map<std::string, std::size_t> index_;
};

// Adam with bias correction; moments keyed by parameter identity.
class AdamOptimizer {
 public:
    explicit AdamOptimizer(std::vector<Parameter*> params, double lr, double beta1 = 0.9,
                           double beta2 = 0.999, double eps = 1e-8);

    void step();
    void zero_grad();
    // Drops the moment history of one parameter's row (used when a bank
    // code is re-seeded mid-training).
    void reset_moments(const Parameter& param, std::size_t row_begin, std::size_t row_len);

    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }

 private:
    std::vector<Parameter*> params_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    double lr_, beta1_, beta2_, eps_;
    std::size_t t_ = 0;
};

}  // namespace emodiff
