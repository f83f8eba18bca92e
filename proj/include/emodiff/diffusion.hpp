#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "emodiff/bank.hpp"
#include "emodiff/embedder.hpp"
#include "emodiff/parameter.hpp"
#include "emodiff/synthdata.hpp"
#include "emodiff/tensor.hpp"

namespace emodiff {

// Discrete variance-preserving schedule, a_t^2 + b_t^2 = 1 for t in [0, T].
// a_t = cos(theta_max * t/T)^power with theta_max chosen so a_T = a_end.
struct NoiseSchedule {
    std::size_t T = 50;
    std::size_t sampler_steps = 25;
    std::vector<double> a;  // indexed 0..T, a[0] = 1
    std::vector<double> b;  // b[0] = 0

    static NoiseSchedule make(std::size_t T, std::size_t sampler_steps, double power = 2.0,
                              double a_end = 0.02);
    void validate() const;
    std::vector<std::size_t> sampler_grid() const;  // descending, sampler_steps entries
};

struct NoisyLatent {
    Tensor z_t;  // F x C x H x W
    std::size_t t = 1;
    Tensor eps;  // same shape as z_t
};

NoisyLatent add_noise(const Tensor& z0, std::size_t t, const NoiseSchedule& schedule, RandomStream& rng);

// Conditioning bundle for one denoiser call. A set drop flag means the
// corresponding slot already holds the learned null embedding.
struct ConditionSet {
    Tensor identity_embed;  // d_s
    Tensor audio_seq;       // N x d_s
    ConditionEmbedding emotion;
    ConditionDropFlags drop_flags;
};

struct DiffusionConfig {
    std::size_t embed_dim = 32;  // d_s, must match the embedder
    std::size_t model_dim = 32;  // denoiser width
    std::size_t bank_codes = 8;  // K
    std::size_t pool_dim = 16;   // discriminator pooled width
    std::size_t disc_hidden = 24;
    std::size_t num_emotions = 4;

    std::size_t T = 50;
    std::size_t sampler_steps = 25;
    double schedule_power = 2.0;
    double schedule_a_end = 0.02;

    double lambda_cls = 0.1;
    double beta_commit = 0.25;
    double guidance_scale = 1.0;  // 1 = classifier-free guidance off

    std::size_t steps = 2000;
    std::size_t batch_size = 8;
    double lr = 2e-3;
    std::size_t dead_code_steps = 200;
    // "uncovered": park dead codes on the recent prior the bank covers
    // worst; "random": any recent prior.
    std::string dead_code_policy = "uncovered";

    void validate() const;
};

struct DenoiserOutput {
    Tensor eps_hat;  // F x C x H x W
    Tensor features; // F x d_model, feeds the discriminator
};

struct LossBreakdown {
    Tensor total;
    double denoising = 0.0;
    double cls = 0.0;
    double vq = 0.0;
};

// Toy conditional denoiser plus emotion bank, latent-space emotion
// discriminator and learned null condition embeddings.
class DiffusionModel {
 public:
    DiffusionModel(const DiffusionConfig& config, const CorpusConfig& corpus_config,
                   std::uint64_t init_seed);

    const DiffusionConfig& config() const { return config_; }
    const NoiseSchedule& schedule() const { return schedule_; }
    EmotionBank& bank() { return bank_; }
    const EmotionBank& bank() const { return bank_; }
    ParameterSet& params() { return params_; }
    const ParameterSet& params() const { return params_; }

    // All trainable parameters (denoiser + bank + discriminator + nulls).
    std::vector<Parameter*> trainable();

    // Raw audio (N x d_raw) -> conditioning sequence (N x d_s).
    Tensor project_audio(const Tensor& raw_audio) const;

    // Builds the conditioning bundle for a training clip. `s` is the
    // emotion prior sample from the frozen embedder; dropped slots are
    // replaced by the learned null embeddings.
    ConditionSet build_conditions(const ClipRecord& clip, const Tensor& s,
                                  const ConditionDropFlags& flags) const;
    // All conditions nulled (the fully unconditional mode).
    ConditionSet null_conditions(std::size_t frames) const;

    DenoiserOutput predict_noise(const Tensor& z_t, const ConditionSet& conditions,
                                 std::size_t t) const;

    // z_s = z_a + CA(Q(z_a), K(E_s), V(E_s)); a single emotion token makes
    // this an exact additive broadcast of V(E_s).
    Tensor inject_emotion(const Tensor& z_a, const Tensor& e_s) const;

    // p_t = softmax(mlp(adaptive_mean_pool(f_t))), a 1 x N_e row.
    Tensor discriminate(const Tensor& features) const;

    // Deterministic DDIM-style reverse pass over sampler_steps evenly
    // spaced timesteps; returns every intermediate latent (last = z0_hat).
    std::vector<Tensor> sample(const ConditionSet& conditions, RandomStream& rng) const;

    // Emotion probabilities the frozen scorer assigns to a latent: features
    // at t=1 under all-null conditions (no label leakage through the
    // conditioning path).
    Tensor score_latent(const Tensor& z) const;

    // Class-mean emotion priors used as prompt features at sampling time.
    const Tensor& emotion_prompts() const { return prompts_; }
    void set_emotion_prompts(Tensor prompts) { prompts_ = std::move(prompts); }

    std::size_t latent_frames() const { return latent_shape_[0]; }
    const Shape& latent_shape() const { return latent_shape_; }
    std::size_t audio_frames() const { return audio_frames_; }

    void save(const std::string& path) const;
    void load(const std::string& path);

 private:
    DiffusionConfig config_;
    Shape latent_shape_;        // F, C, H, W
    std::size_t flat_dim_ = 0;  // C*H*W
    std::size_t audio_frames_ = 0;
    std::size_t raw_dim_ = 0;
    NoiseSchedule schedule_;
    ParameterSet params_;
    EmotionBank bank_;
    Tensor prompts_;      // N_e x d_s
    Tensor pool_matrix_;  // d_model x d_pool adaptive mean-pool weights
};

// Mean over sampled timesteps of the emotion cross-entropy, log floored.
Tensor cls_loss(const std::vector<Tensor>& p_list, const std::vector<double>& y_one_hot);

// Compositional objective over one batch: L_denoising + lambda L_cls + L_vq.
// Condition dropout is applied inside; a dropped emotion zeroes that
// sample's L_cls and L_vq contributions. `s_samples[i]` is the emotion
// prior sample for `batch[i]`.
LossBreakdown total_loss(DiffusionModel& model, const std::vector<const ClipRecord*>& batch,
                         const std::vector<Tensor>& s_samples, RandomStream& noise_rng,
                         RandomStream& drop_rng, std::vector<std::size_t>* retrieved_codes = nullptr);

struct DiffusionCurve {
    std::vector<double> total;
    std::vector<double> denoising;
    std::vector<double> cls;
    std::vector<double> vq;
};

// Joint optimization of denoiser, bank, discriminator and null embeddings
// against the frozen embedder. Also fills the model's emotion prompts with
// per-class mean priors and re-seeds bank codes that stay unused for
// config.dead_code_steps steps.
DiffusionCurve train_diffusion(const std::vector<ClipRecord>& corpus, const EmbedderModel& embedder,
                               DiffusionModel& model, std::uint64_t seed);

}  // namespace emodiff
