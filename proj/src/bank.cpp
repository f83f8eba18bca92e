#include "emodiff/bank.hpp"

#include <cmath>

#include "emodiff/errors.hpp"
#include "emodiff/rng.hpp"

namespace emodiff {

namespace {

Tensor identity_matrix(std::size_t n) {
    std::vector<double> data(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) data[i * n + i] = 1.0;
    return Tensor({n, n}, std::move(data));
}

}  // namespace

EmotionBank::EmotionBank(std::size_t num_codes, std::size_t dim, std::uint64_t init_seed)
    : num_codes_(num_codes), dim_(dim) {
    if (num_codes_ == 0 || dim_ == 0) throw ArgumentError("EmotionBank: K and d_s must be positive");
    RandomStream rng(init_seed);
    RandomStream init = rng.fork("bank/init");
    params_.add("bank.codes", Tensor::randn({num_codes_, dim_}, init, 0.1));
    params_.add("bank.wq", identity_matrix(dim_));
    params_.add("bank.wk", identity_matrix(dim_));
    params_.add("bank.wv", identity_matrix(dim_));
}

std::pair<std::size_t, Tensor> EmotionBank::retrieve(const Tensor& s) const {
    if (s.numel() != dim_) throw ArgumentError("retrieve: s must have length d_s");
    const auto& c = codes().data();
    const auto& sv = s.data();
    std::size_t best = 0;
    double best_dist = 0.0;
    for (std::size_t k = 0; k < num_codes_; ++k) {
        double dist = 0.0;
        for (std::size_t j = 0; j < dim_; ++j) {
            const double diff = sv[j] - c[k * dim_ + j];
            dist += diff * diff;
        }
        if (k == 0 || dist < best_dist) {  // strict < keeps the lowest index on ties
            best = k;
            best_dist = dist;
        }
    }
    Tensor snapshot = stop_gradient(select_row(codes(), best));
    return {best, snapshot};
}

ConditionEmbedding EmotionBank::attend_train(const Tensor& s) const {
    auto [k, s_star] = retrieve(s);
    Tensor q = matmul(reshape(s, {static_cast<std::size_t>(1), dim_}), params_.get("bank.wq").value);
    Tensor key_row = reshape(s_star, {static_cast<std::size_t>(1), dim_});
    Tensor keys = matmul(key_row, params_.get("bank.wk").value);
    Tensor values = matmul(key_row, params_.get("bank.wv").value);
    ConditionEmbedding out;
    out.e_s = scaled_dot_attention(q, keys, values);
    out.source_mode = ConditionSource::kTrainRetrieved;
    out.retrieved_index = k;
    return out;
}

ConditionEmbedding EmotionBank::attend_infer(const Tensor& s) const {
    if (s.numel() != dim_) throw ArgumentError("attend_infer: s must have length d_s");
    Tensor q = matmul(reshape(s, {static_cast<std::size_t>(1), dim_}), params_.get("bank.wq").value);
    Tensor keys = matmul(codes(), params_.get("bank.wk").value);
    Tensor values = matmul(codes(), params_.get("bank.wv").value);
    ConditionEmbedding out;
    out.e_s = scaled_dot_attention(q, keys, values);
    out.source_mode = ConditionSource::kInferFullBank;
    return out;
}

Tensor EmotionBank::vq_loss(const Tensor& s, double beta) const {
    if (!(beta > 0.0)) throw ArgumentError("vq_loss: beta must be positive");
    if (s.rank() != 1 || s.numel() != dim_) throw ArgumentError("vq_loss: s must have length d_s");
    const std::size_t k = retrieve(s).first;
    Tensor code_row = select_row(codes(), k);  // gradient flows to the codebook here
    Tensor codebook_term = sum(square(sub(stop_gradient(s), code_row)));
    Tensor commit_term = sum(square(sub(s, stop_gradient(code_row))));
    return add(codebook_term, mul_scalar(commit_term, beta));
}

void EmotionBank::reseed_code(std::size_t index, const std::vector<double>& value) {
    if (index >= num_codes_) throw ArgumentError("reseed_code: index out of range");
    if (value.size() != dim_) throw ArgumentError("reseed_code: value length mismatch");
    auto& data = params_.get("bank.codes").value.mutable_data();
    for (std::size_t j = 0; j < dim_; ++j) data[index * dim_ + j] = value[j];
}

}  // namespace emodiff
