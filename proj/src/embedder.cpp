#include "emodiff/embedder.hpp"

#include <cmath>

#include "emodiff/errors.hpp"

namespace emodiff {

namespace {

Tensor glorot(RandomStream& rng, std::size_t rows, std::size_t cols) {
    return Tensor::randn({rows, cols}, rng, 1.0 / std::sqrt(static_cast<double>(rows)));
}

}  // namespace

void EmbedderConfig::validate() const {
    if (raw_dim == 0 || embed_dim == 0) throw ConfigError("embedder config: dims must be positive");
    if (audio_layers == 0 || fusion_layers == 0) {
        throw ConfigError("embedder config: layer counts must be positive");
    }
    if (!(tau > 0.0)) throw ConfigError("embedder config: tau must be positive");
    if (batch_size == 0 || negatives_per_anchor == 0) {
        throw ConfigError("embedder config: batch sizes must be positive");
    }
    if (p_drop_audio < 0.0 || p_drop_audio >= 1.0 || p_drop_visual < 0.0 || p_drop_visual >= 1.0) {
        throw ConfigError("embedder config: dropout probabilities must lie in [0, 1)");
    }
}

EmbedderModel::EmbedderModel(const EmbedderConfig& config, std::uint64_t init_seed) : config_(config) {
    config_.validate();
    RandomStream rng(init_seed);
    RandomStream init = rng.fork("embedder/init");
    const std::size_t dr = config_.raw_dim;
    const std::size_t ds = config_.embed_dim;
    const std::size_t dff = 2 * ds;

    params_.add("visual_proj.weight", glorot(init, dr, ds));
    params_.add("visual_proj.bias", Tensor::zeros({ds}));

    params_.add("audio.in_proj.weight", glorot(init, dr, ds));
    params_.add("audio.in_proj.bias", Tensor::zeros({ds}));
    for (std::size_t l = 0; l < config_.audio_layers; ++l) {
        const std::string p = "audio.layer" + std::to_string(l) + ".";
        params_.add(p + "wq", glorot(init, ds, ds));
        params_.add(p + "wk", glorot(init, ds, ds));
        params_.add(p + "wv", glorot(init, ds, ds));
        params_.add(p + "wo", glorot(init, ds, ds));
        params_.add(p + "ff1.weight", glorot(init, ds, dff));
        params_.add(p + "ff1.bias", Tensor::zeros({dff}));
        params_.add(p + "ff2.weight", glorot(init, dff, ds));
        params_.add(p + "ff2.bias", Tensor::zeros({ds}));
    }
    for (std::size_t l = 0; l < config_.fusion_layers; ++l) {
        const std::string p = "fusion.layer" + std::to_string(l) + ".";
        params_.add(p + "wq", glorot(init, ds, ds));
        params_.add(p + "wk", glorot(init, ds, ds));
        params_.add(p + "wv", glorot(init, ds, ds));
        params_.add(p + "lambda", Tensor({1}, config_.lambda_fuse_init));
    }
    params_.add("aggregate.ws", Tensor::randn({static_cast<std::size_t>(1), ds}, init,
                                              1.0 / std::sqrt(static_cast<double>(ds))));
}

std::pair<Tensor, Tensor> EmbedderModel::encode(const ClipRecord& clip) const {
    const std::size_t n = clip.visual.frame_count();
    if (n != clip.audio.frame_count()) {
        throw DataError("encode: visual and audio frame counts differ");
    }
    const std::size_t ds = config_.embed_dim;

    Tensor s_beta;
    if (clip.visual.dropped) {
        s_beta = Tensor::zeros({n, ds});
    } else {
        s_beta = row_broadcast_add(matmul(clip.visual.frames, params_.get("visual_proj.weight").value),
                                   params_.get("visual_proj.bias").value);
    }

    Tensor s_alpha;
    if (clip.audio.dropped) {
        s_alpha = Tensor::zeros({n, ds});
    } else {
        Tensor h = row_broadcast_add(matmul(clip.audio.frames, params_.get("audio.in_proj.weight").value),
                                     params_.get("audio.in_proj.bias").value);
        for (std::size_t l = 0; l < config_.audio_layers; ++l) {
            const std::string p = "audio.layer" + std::to_string(l) + ".";
            Tensor attn = scaled_dot_attention(matmul(h, params_.get(p + "wq").value),
                                               matmul(h, params_.get(p + "wk").value),
                                               matmul(h, params_.get(p + "wv").value));
            h = add(h, matmul(attn, params_.get(p + "wo").value));
            Tensor ff = matmul(
                tanh_elem(row_broadcast_add(matmul(h, params_.get(p + "ff1.weight").value),
                                            params_.get(p + "ff1.bias").value)),
                params_.get(p + "ff2.weight").value);
            h = add(h, row_broadcast_add(ff, params_.get(p + "ff2.bias").value));
        }
        s_alpha = h;
    }
    return {s_alpha, s_beta};
}

Tensor EmbedderModel::fuse(const Tensor& s_alpha, const Tensor& s_beta) const {
    if (s_alpha.rank() != 2 || s_beta.rank() != 2 || s_alpha.shape() != s_beta.shape()) {
        throw ArgumentError("fuse: both inputs must be N x d_s with matching shapes");
    }
    Tensor h = s_alpha;
    for (std::size_t l = 0; l < config_.fusion_layers; ++l) {
        const std::string p = "fusion.layer" + std::to_string(l) + ".";
        Tensor ca = scaled_dot_attention(matmul(h, params_.get(p + "wq").value),
                                         matmul(s_beta, params_.get(p + "wk").value),
                                         matmul(s_beta, params_.get(p + "wv").value));
        h = add(h, scale_by(ca, params_.get(p + "lambda").value));
    }
    return h;
}

EmotionPrior EmbedderModel::aggregate(const Tensor& s_hat_alpha, RandomStream& rng) const {
    if (s_hat_alpha.rank() != 2 || s_hat_alpha.dim(0) == 0) {
        throw DataError("aggregate: need at least one frame");
    }
    const std::size_t ds = s_hat_alpha.dim(1);
    // w = softmax over frames of (W_s . s^T); mu and sigma2 are the
    // attention-weighted first and second central moments
    Tensor logits = matmul(params_.get("aggregate.ws").value, transpose(s_hat_alpha));  // 1 x N
    Tensor w = softmax(logits, 1);
    Tensor mu_row = matmul(w, s_hat_alpha);  // 1 x d_s
    Tensor dev = row_broadcast_sub(s_hat_alpha, reshape(mu_row, {ds}));
    Tensor sigma2_row = matmul(w, square(dev));  // 1 x d_s

    EmotionPrior prior;
    prior.mu = reshape(mu_row, {ds});
    prior.sigma2 = reshape(sigma2_row, {ds});
    if (config_.deterministic_mu) {
        prior.sample = prior.mu;
    } else {
        Tensor eps = Tensor::randn({ds}, rng);
        prior.sample = add(prior.mu, mul(sqrt_elem(prior.sigma2), eps));
    }
    return prior;
}

EmotionPrior EmbedderModel::embed(const ClipRecord& clip, RandomStream& rng) const {
    auto [s_alpha, s_beta] = encode(clip);
    return aggregate(fuse(s_alpha, s_beta), rng);
}

namespace {

Tensor info_nce_impl(const Tensor& anchor, const Tensor& positive, const std::vector<Tensor>& negatives,
                     double tau, bool floor_norms) {
    if (!(tau > 0.0)) throw ArgumentError("info_nce: tau must be positive");
    if (negatives.empty()) throw ArgumentError("info_nce: at least one negative required");
    std::vector<Tensor> logits;
    logits.reserve(negatives.size() + 1);
    logits.push_back(mul_scalar(cosine_similarity(anchor, positive, floor_norms), 1.0 / tau));
    for (const Tensor& n : negatives) {
        logits.push_back(mul_scalar(cosine_similarity(anchor, n, floor_norms), 1.0 / tau));
    }
    Tensor stacked = stack_scalars(logits);
    // -log( w(p) / (w(p) + sum w(n)) ) = logsumexp(all) - logit(p)
    return sub(logsumexp(stacked), logits[0]);
}

}  // namespace

Tensor info_nce(const Tensor& anchor, const Tensor& positive, const std::vector<Tensor>& negatives,
                double tau) {
    return info_nce_impl(anchor, positive, negatives, tau, /*floor_norms=*/false);
}

Tensor info_nce_guarded(const Tensor& anchor, const Tensor& positive,
                        const std::vector<Tensor>& negatives, double tau) {
    return info_nce_impl(anchor, positive, negatives, tau, /*floor_norms=*/true);
}

TrainCurve train_embedder(const std::vector<ClipRecord>& corpus, EmbedderModel& model,
                          std::uint64_t seed) {
    const EmbedderConfig& cfg = model.config();
    RandomStream base(seed);
    RandomStream pair_rng = base.fork("embedder/pairs");
    RandomStream drop_rng = base.fork("embedder/dropout");
    RandomStream eps_rng = base.fork("embedder/reparam");

    AdamOptimizer opt(model.params().all(), cfg.lr);
    TrainCurve curve;
    curve.losses.reserve(cfg.steps);

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        PairBatch batch = sample_pairs(corpus, cfg.batch_size, cfg.negatives_per_anchor, pair_rng);
        modality_dropout(batch, cfg.p_drop_audio, cfg.p_drop_visual, drop_rng);

        Tensor loss;
        try {
            std::vector<Tensor> per_anchor;
            per_anchor.reserve(batch.anchors.size());
            for (std::size_t b = 0; b < batch.anchors.size(); ++b) {
                Tensor a = model.embed(batch.anchors[b], eps_rng).sample;
                Tensor p = model.embed(batch.positives[b], eps_rng).sample;
                std::vector<Tensor> negs;
                negs.reserve(batch.negatives[b].size());
                for (const ClipRecord& nc : batch.negatives[b]) {
                    negs.push_back(model.embed(nc, eps_rng).sample);
                }
                per_anchor.push_back(info_nce_guarded(a, p, negs, cfg.tau));
            }
            loss = mean(stack_scalars(per_anchor));
        } catch (const NumericError& e) {
            throw TrainingError(std::string("train_embedder: ") + e.what(), step);
        }
        const double value = loss.value();
        if (!std::isfinite(value)) throw TrainingError("train_embedder: loss diverged", step);
        curve.losses.push_back(value);

        opt.zero_grad();
        backward(loss);
        opt.step();
    }

    const std::size_t k = std::min<std::size_t>(20, curve.losses.size());
    if (k > 0) {
        double head = 0.0, tail = 0.0;
        for (std::size_t i = 0; i < k; ++i) {
            head += curve.losses[i];
            tail += curve.losses[curve.losses.size() - 1 - i];
        }
        curve.initial_loss = head / static_cast<double>(k);
        curve.final_loss = tail / static_cast<double>(k);
    }
    return curve;
}

}  // namespace emodiff
