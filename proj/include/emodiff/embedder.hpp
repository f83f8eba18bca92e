#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "emodiff/parameter.hpp"
#include "emodiff/synthdata.hpp"
#include "emodiff/tensor.hpp"

namespace emodiff {

struct EmbedderConfig {
    std::size_t raw_dim = 24;       // d_raw of the corpus features
    std::size_t embed_dim = 32;     // d_s
    std::size_t audio_layers = 2;   // transformer-style layers on audio
    std::size_t fusion_layers = 2;  // cross-attention fusion layers
    double tau = 0.1;               // InfoNCE temperature
    double lambda_fuse_init = 0.5;  // residual fusion scale at init
    bool deterministic_mu = false;  // ablation: use mu instead of sampling

    // training
    std::size_t steps = 500;
    std::size_t batch_size = 8;
    std::size_t negatives_per_anchor = 6;
    double lr = 3e-3;
    double p_drop_audio = 0.2;
    double p_drop_visual = 0.2;

    void validate() const;
};

// Gaussian emotion representation of one clip (attention-aggregated moments
// plus a reparameterized sample).
struct EmotionPrior {
    Tensor mu;      // d_s
    Tensor sigma2;  // d_s, element-wise >= 0
    Tensor sample;  // d_s; equals mu wherever sigma2 is zero
};

// Disentangled emotion embedder: per-modality encoders, cross-modal fusion
// (audio queries attend to visual keys/values with a learnable residual
// scale per layer) and attention-weighted Gaussian aggregation.
class EmbedderModel {
 public:
    explicit EmbedderModel(const EmbedderConfig& config, std::uint64_t init_seed);

    const EmbedderConfig& config() const { return config_; }
    ParameterSet& params() { return params_; }
    const ParameterSet& params() const { return params_; }

    // (s_alpha, s_beta): audio and visual feature sequences, both N x d_s.
    // A dropped modality yields an all-zero sequence.
    std::pair<Tensor, Tensor> encode(const ClipRecord& clip) const;

    // Layered cross-modal fusion: s_a <- s_a + lambda * CA(Wq s_a, Wk s_b, Wv s_b).
    Tensor fuse(const Tensor& s_alpha, const Tensor& s_beta) const;

    EmotionPrior aggregate(const Tensor& s_hat_alpha, RandomStream& rng) const;

    // encode -> fuse -> aggregate in one call.
    EmotionPrior embed(const ClipRecord& clip, RandomStream& rng) const;

 private:
    EmbedderConfig config_;
    ParameterSet params_;
};

// InfoNCE with cosine similarity (strict contract: zero-norm inputs are a
// numeric error, tau must be positive, at least one negative).
Tensor info_nce(const Tensor& anchor, const Tensor& positive, const std::vector<Tensor>& negatives,
                double tau);
// Training-loop variant with norm floors instead of the strict error.
Tensor info_nce_guarded(const Tensor& anchor, const Tensor& positive,
                        const std::vector<Tensor>& negatives, double tau);

struct TrainCurve {
    std::vector<double> losses;
    double initial_loss = 0.0;  // mean of the first up-to-20 steps
    double final_loss = 0.0;    // mean of the last up-to-20 steps
};

// SGD-family (Adam) optimization of mean InfoNCE over contrastive pair
// batches with modality dropout. Deterministic given (corpus, config, seed).
TrainCurve train_embedder(const std::vector<ClipRecord>& corpus, EmbedderModel& model,
                          std::uint64_t seed);

}  // namespace emodiff
