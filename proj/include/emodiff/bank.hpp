#pragma once

#include <cstdint>
#include <cstddef>

#include "emodiff/parameter.hpp"
#include "emodiff/tensor.hpp"

namespace emodiff {

enum class ConditionSource { kTrainRetrieved, kInferFullBank, kNull };

// Bank-attention output injected into the denoiser (a single d_s token).
struct ConditionEmbedding {
    Tensor e_s;  // 1 x d_s
    ConditionSource source_mode = ConditionSource::kNull;
    std::size_t retrieved_index = 0;  // meaningful for kTrainRetrieved
};

// Learnable emotion bank: K prototype codes plus bias-free Q/K/V
// projections (a zero input projects to zero). Projections start at the
// identity so the untrained inference path scores codes by plain inner
// products with s.
class EmotionBank {
 public:
    EmotionBank(std::size_t num_codes, std::size_t dim, std::uint64_t init_seed);

    std::size_t num_codes() const { return num_codes_; }
    std::size_t dim() const { return dim_; }
    ParameterSet& params() { return params_; }
    const ParameterSet& params() const { return params_; }
    const Tensor& codes() const { return params_.get("bank.codes").value; }

    // Nearest code under squared euclidean distance; ties break to the
    // lowest index. The returned snapshot carries no gradient toward the
    // codebook through this path.
    std::pair<std::size_t, Tensor> retrieve(const Tensor& s) const;

    // Training-time attention over the single retrieved code. With one key
    // the attention weight is 1, so E_s equals W_V(s*) bit-exactly.
    ConditionEmbedding attend_train(const Tensor& s) const;

    // Inference-time attention over the whole bank (retrieval skipped).
    ConditionEmbedding attend_infer(const Tensor& s) const;

    // ||sg[s] - C_k||^2 + beta ||s - sg[C_k]||^2 with true stop-gradient
    // semantics: the codebook only feels the first term, s only the second.
    Tensor vq_loss(const Tensor& s, double beta) const;

    // Directly overwrites one code row (dead-code re-seeding).
    void reseed_code(std::size_t index, const std::vector<double>& value);

 private:
    std::size_t num_codes_;
    std::size_t dim_;
    ParameterSet params_;
};

}  // namespace emodiff
