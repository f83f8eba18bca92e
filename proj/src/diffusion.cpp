#include "emodiff/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>

#include "emodiff/errors.hpp"
#include "emodiff/serialize.hpp"

namespace emodiff {

namespace {

constexpr std::size_t kRecentPriorBuffer = 128;

Tensor glorot(RandomStream& rng, std::size_t rows, std::size_t cols) {
    return Tensor::randn({rows, cols}, rng, 1.0 / std::sqrt(static_cast<double>(rows)));
}

Tensor sinusoidal_embedding(std::size_t t, std::size_t dim) {
    std::vector<double> feat(dim, 0.0);
    const std::size_t half = dim / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double omega = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
        feat[2 * i] = std::sin(static_cast<double>(t) * omega);
        feat[2 * i + 1] = std::cos(static_cast<double>(t) * omega);
    }
    if (dim % 2 == 1) feat[dim - 1] = std::sin(static_cast<double>(t));
    return Tensor({static_cast<std::size_t>(1), dim}, std::move(feat));
}

// PyTorch-style adaptive mean pooling expressed as a fixed linear map.
Tensor adaptive_pool_matrix(std::size_t in_dim, std::size_t out_dim) {
    std::vector<double> w(in_dim * out_dim, 0.0);
    for (std::size_t p = 0; p < out_dim; ++p) {
        const std::size_t begin = (p * in_dim) / out_dim;
        const std::size_t end = ((p + 1) * in_dim + out_dim - 1) / out_dim;
        const double inv = 1.0 / static_cast<double>(end - begin);
        for (std::size_t j = begin; j < end; ++j) w[j * out_dim + p] = inv;
    }
    return Tensor({in_dim, out_dim}, std::move(w));
}

Tensor mean_rows(const Tensor& m) {
    const std::size_t rows = m.dim(0);
    Tensor u({static_cast<std::size_t>(1), rows}, 1.0 / static_cast<double>(rows));
    return matmul(u, m);
}

}  // namespace

NoiseSchedule NoiseSchedule::make(std::size_t T, std::size_t sampler_steps, double power, double a_end) {
    if (T == 0) throw ConfigError("schedule: T must be positive");
    if (sampler_steps == 0 || sampler_steps > T) {
        throw ConfigError("schedule: sampler_steps must lie in [1, T]");
    }
    if (!(power > 0.0) || !(a_end > 0.0) || a_end > 0.05) {
        throw ConfigError("schedule: need power > 0 and a_end in (0, 0.05]");
    }
    NoiseSchedule s;
    s.T = T;
    s.sampler_steps = sampler_steps;
    s.a.resize(T + 1);
    s.b.resize(T + 1);
    const double theta_max = std::acos(std::pow(a_end, 1.0 / power));
    for (std::size_t t = 0; t <= T; ++t) {
        const double frac = static_cast<double>(t) / static_cast<double>(T);
        const double a = std::pow(std::cos(theta_max * frac), power);
        s.a[t] = a;
        s.b[t] = std::sqrt(std::max(0.0, 1.0 - a * a));
    }
    s.validate();
    return s;
}

void NoiseSchedule::validate() const {
    if (a.size() != T + 1 || b.size() != T + 1) throw ConfigError("schedule: wrong array length");
    if (sampler_steps == 0 || sampler_steps > T) throw ConfigError("schedule: bad sampler_steps");
    if (b[0] > 0.02) throw ConfigError("schedule: b_0 must be <= 0.02");
    if (a[T] > 0.05) throw ConfigError("schedule: a_T must be <= 0.05");
    for (std::size_t t = 0; t <= T; ++t) {
        if (std::abs(a[t] * a[t] + b[t] * b[t] - 1.0) > 1e-12) {
            throw ConfigError("schedule: a^2 + b^2 must equal 1");
        }
        if (t > 0 && (a[t] > a[t - 1] || b[t] < b[t - 1])) {
            throw ConfigError("schedule: a must be non-increasing and b non-decreasing");
        }
    }
}

std::vector<std::size_t> NoiseSchedule::sampler_grid() const {
    std::vector<std::size_t> grid(sampler_steps);
    for (std::size_t k = 0; k < sampler_steps; ++k) {
        const double pos = static_cast<double>(T) * static_cast<double>(sampler_steps - k) /
                           static_cast<double>(sampler_steps);
        grid[k] = static_cast<std::size_t>(std::llround(pos));
    }
    return grid;
}

NoisyLatent add_noise(const Tensor& z0, std::size_t t, const NoiseSchedule& schedule, RandomStream& rng) {
    if (t < 1 || t > schedule.T) {
        throw ArgumentError("add_noise: t must lie in [1, T], got " + std::to_string(t));
    }
    NoisyLatent out;
    out.t = t;
    out.eps = Tensor::randn(z0.shape(), rng);
    out.z_t = add(mul_scalar(z0, schedule.a[t]), mul_scalar(out.eps, schedule.b[t]));
    return out;
}

void DiffusionConfig::validate() const {
    if (embed_dim == 0 || model_dim == 0 || bank_codes == 0 || pool_dim == 0 || disc_hidden == 0) {
        throw ConfigError("diffusion config: dims must be positive");
    }
    if (num_emotions == 0) throw ConfigError("diffusion config: num_emotions must be positive");
    if (pool_dim > model_dim) throw ConfigError("diffusion config: pool_dim must not exceed model_dim");
    if (lambda_cls < 0.0) throw ConfigError("diffusion config: lambda_cls must be >= 0");
    if (!(beta_commit > 0.0)) throw ConfigError("diffusion config: beta_commit must be positive");
    if (batch_size == 0) throw ConfigError("diffusion config: batch_size must be positive");
    if (!(guidance_scale > 0.0)) throw ConfigError("diffusion config: guidance_scale must be positive");
    if (dead_code_policy != "uncovered" && dead_code_policy != "random") {
        throw ConfigError("diffusion config: dead_code_policy must be 'uncovered' or 'random'");
    }
}

DiffusionModel::DiffusionModel(const DiffusionConfig& config, const CorpusConfig& corpus_config,
                               std::uint64_t init_seed)
    : config_(config),
      schedule_(NoiseSchedule::make(config.T, config.sampler_steps, config.schedule_power,
                                    config.schedule_a_end)),
      bank_(config.bank_codes, config.embed_dim, init_seed) {
    config_.validate();
    corpus_config.validate();
    latent_shape_ = {corpus_config.latent_frames, corpus_config.latent_channels,
                     corpus_config.latent_height, corpus_config.latent_width};
    flat_dim_ = static_cast<std::size_t>(corpus_config.latent_channels) * corpus_config.latent_height *
                corpus_config.latent_width;
    audio_frames_ = corpus_config.frames;
    raw_dim_ = corpus_config.feature_dim;

    RandomStream rng(init_seed);
    RandomStream init = rng.fork("diffusion/init");
    const std::size_t dm = config_.model_dim;
    const std::size_t ds = config_.embed_dim;
    const std::size_t dff = 2 * dm;

    params_.add("den.in_proj.weight", glorot(init, flat_dim_, dm));
    params_.add("den.in_proj.bias", Tensor::zeros({dm}));
    params_.add("den.t_proj", glorot(init, dm, dm));
    params_.add("den.id_proj", glorot(init, ds, dm));
    params_.add("den.audio_in.weight", glorot(init, raw_dim_, ds));
    params_.add("den.audio.wq", glorot(init, dm, dm));
    params_.add("den.audio.wk", glorot(init, ds, dm));
    params_.add("den.audio.wv", glorot(init, ds, dm));
    params_.add("den.inject.wq", glorot(init, dm, dm));
    params_.add("den.inject.wk", glorot(init, ds, dm));
    params_.add("den.inject.wv", glorot(init, ds, dm));  // bias-free by contract
    params_.add("den.self.wq", glorot(init, dm, dm));
    params_.add("den.self.wk", glorot(init, dm, dm));
    params_.add("den.self.wv", glorot(init, dm, dm));
    params_.add("den.self.wo", glorot(init, dm, dm));
    params_.add("den.ff1.weight", glorot(init, dm, dff));
    params_.add("den.ff1.bias", Tensor::zeros({dff}));
    params_.add("den.ff2.weight", glorot(init, dff, dm));
    params_.add("den.ff2.bias", Tensor::zeros({dm}));
    params_.add("den.head.weight", glorot(init, dm, flat_dim_));
    params_.add("den.head.bias", Tensor::zeros({flat_dim_}));
    params_.add("den.id_embed", Tensor::randn({corpus_config.identities, ds}, init, 0.3));

    params_.add("null.audio", Tensor::zeros({static_cast<std::size_t>(1), ds}));
    params_.add("null.identity", Tensor::zeros({ds}));
    params_.add("null.emotion", Tensor::zeros({static_cast<std::size_t>(1), ds}));

    params_.add("disc.w1", glorot(init, config_.pool_dim, config_.disc_hidden));
    params_.add("disc.b1", Tensor::zeros({config_.disc_hidden}));
    params_.add("disc.w2", glorot(init, config_.disc_hidden, config_.num_emotions));
    params_.add("disc.b2", Tensor::zeros({config_.num_emotions}));

    prompts_ = Tensor::zeros({config_.num_emotions, ds});
    pool_matrix_ = adaptive_pool_matrix(dm, config_.pool_dim);
}

std::vector<Parameter*> DiffusionModel::trainable() {
    std::vector<Parameter*> all = params_.all();
    for (Parameter* p : bank_.params().all()) all.push_back(p);
    return all;
}

Tensor DiffusionModel::project_audio(const Tensor& raw_audio) const {
    if (raw_audio.rank() != 2 || raw_audio.dim(1) != raw_dim_) {
        throw ArgumentError("project_audio: expected N x d_raw input");
    }
    return matmul(raw_audio, params_.get("den.audio_in.weight").value);
}

ConditionSet DiffusionModel::build_conditions(const ClipRecord& clip, const Tensor& s,
                                              const ConditionDropFlags& flags) const {
    ConditionSet cond;
    cond.drop_flags = flags;
    const std::size_t n = clip.audio.frame_count();
    cond.audio_seq = flags.audio ? repeat_row(params_.get("null.audio").value, n)
                                 : project_audio(clip.audio.frames);
    cond.identity_embed = flags.image ? params_.get("null.identity").value
                                      : select_row(params_.get("den.id_embed").value, clip.identity);
    if (flags.emotion) {
        cond.emotion.e_s = params_.get("null.emotion").value;
        cond.emotion.source_mode = ConditionSource::kNull;
    } else {
        cond.emotion = bank_.attend_train(s);
    }
    return cond;
}

ConditionSet DiffusionModel::null_conditions(std::size_t frames) const {
    ConditionSet cond;
    cond.drop_flags = {true, true, true};
    cond.audio_seq = repeat_row(params_.get("null.audio").value, frames);
    cond.identity_embed = params_.get("null.identity").value;
    cond.emotion.e_s = params_.get("null.emotion").value;
    cond.emotion.source_mode = ConditionSource::kNull;
    return cond;
}

Tensor DiffusionModel::inject_emotion(const Tensor& z_a, const Tensor& e_s) const {
    if (e_s.rank() != 2 || e_s.dim(0) != 1 || e_s.dim(1) != config_.embed_dim) {
        throw ArgumentError("inject_emotion: E_s must be 1 x d_s");
    }
    Tensor ca = scaled_dot_attention(matmul(z_a, params_.get("den.inject.wq").value),
                                     matmul(e_s, params_.get("den.inject.wk").value),
                                     matmul(e_s, params_.get("den.inject.wv").value));
    return add(z_a, ca);
}

DenoiserOutput DiffusionModel::predict_noise(const Tensor& z_t, const ConditionSet& conditions,
                                             std::size_t t) const {
    if (z_t.shape() != latent_shape_) {
        throw ArgumentError("predict_noise: latent shape mismatch, got " + shape_str(z_t.shape()));
    }
    if (t > schedule_.T) throw ArgumentError("predict_noise: t out of schedule range");
    if (conditions.audio_seq.rank() != 2 || conditions.audio_seq.dim(1) != config_.embed_dim) {
        throw ArgumentError("predict_noise: audio_seq must be N x d_s");
    }
    const std::size_t frames = latent_shape_[0];
    const std::size_t dm = config_.model_dim;

    Tensor h = row_broadcast_add(matmul(reshape(z_t, {frames, flat_dim_}),
                                        params_.get("den.in_proj.weight").value),
                                 params_.get("den.in_proj.bias").value);
    Tensor tfeat = matmul(sinusoidal_embedding(t, dm), params_.get("den.t_proj").value);
    h = row_broadcast_add(h, reshape(tfeat, {dm}));
    Tensor idrow = matmul(reshape(conditions.identity_embed, {static_cast<std::size_t>(1),
                                                              config_.embed_dim}),
                          params_.get("den.id_proj").value);
    h = row_broadcast_add(h, reshape(idrow, {dm}));

    Tensor audio_attn = scaled_dot_attention(matmul(h, params_.get("den.audio.wq").value),
                                             matmul(conditions.audio_seq, params_.get("den.audio.wk").value),
                                             matmul(conditions.audio_seq, params_.get("den.audio.wv").value));
    h = add(h, audio_attn);

    Tensor e_s = conditions.emotion.e_s;
    if (e_s.rank() == 1) e_s = reshape(e_s, {static_cast<std::size_t>(1), config_.embed_dim});
    h = inject_emotion(h, e_s);

    Tensor self_attn = scaled_dot_attention(matmul(h, params_.get("den.self.wq").value),
                                            matmul(h, params_.get("den.self.wk").value),
                                            matmul(h, params_.get("den.self.wv").value));
    h = add(h, matmul(self_attn, params_.get("den.self.wo").value));

    Tensor ff = matmul(tanh_elem(row_broadcast_add(matmul(h, params_.get("den.ff1.weight").value),
                                                   params_.get("den.ff1.bias").value)),
                       params_.get("den.ff2.weight").value);
    h = add(h, row_broadcast_add(ff, params_.get("den.ff2.bias").value));

    DenoiserOutput out;
    out.features = h;
    out.eps_hat = reshape(row_broadcast_add(matmul(h, params_.get("den.head.weight").value),
                                            params_.get("den.head.bias").value),
                          latent_shape_);
    return out;
}

Tensor DiffusionModel::discriminate(const Tensor& features) const {
    if (features.rank() != 2 || features.dim(1) != config_.model_dim) {
        throw ArgumentError("discriminate: features must be F x d_model");
    }
    for (double v : features.data()) {
        if (!std::isfinite(v)) throw NumericError("discriminate: non-finite features");
    }
    Tensor pooled = matmul(mean_rows(features), pool_matrix_);  // 1 x d_pool
    Tensor hidden = tanh_elem(row_broadcast_add(matmul(pooled, params_.get("disc.w1").value),
                                                params_.get("disc.b1").value));
    Tensor logits = row_broadcast_add(matmul(hidden, params_.get("disc.w2").value),
                                      params_.get("disc.b2").value);
    return softmax(logits, 1);
}

std::vector<Tensor> DiffusionModel::sample(const ConditionSet& conditions, RandomStream& rng) const {
    NoGradGuard no_grad;
    const auto grid = schedule_.sampler_grid();
    Tensor z = Tensor::randn(latent_shape_, rng);
    std::vector<Tensor> trajectory;
    trajectory.reserve(grid.size());
    for (std::size_t k = 0; k < grid.size(); ++k) {
        const std::size_t t = grid[k];
        const std::size_t t_next = (k + 1 < grid.size()) ? grid[k + 1] : 0;
        Tensor eps_hat = predict_noise(z, conditions, t).eps_hat;
        if (config_.guidance_scale != 1.0) {
            Tensor eps_null = predict_noise(z, null_conditions(conditions.audio_seq.dim(0)), t).eps_hat;
            eps_hat = add(eps_null, mul_scalar(sub(eps_hat, eps_null), config_.guidance_scale));
        }
        // DDIM (eta = 0): z0_hat = (z - b_t eps_hat) / a_t, then re-noise
        Tensor z0_hat = mul_scalar(sub(z, mul_scalar(eps_hat, schedule_.b[t])), 1.0 / schedule_.a[t]);
        z = add(mul_scalar(z0_hat, schedule_.a[t_next]), mul_scalar(eps_hat, schedule_.b[t_next]));
        trajectory.push_back(z);
    }
    return trajectory;
}

Tensor DiffusionModel::score_latent(const Tensor& z) const {
    NoGradGuard no_grad;
    DenoiserOutput out = predict_noise(z, null_conditions(audio_frames_), 1);
    return reshape(discriminate(out.features), {config_.num_emotions});
}

Tensor cls_loss(const std::vector<Tensor>& p_list, const std::vector<double>& y_one_hot) {
    if (p_list.empty()) throw ArgumentError("cls_loss: empty probability list");
    std::size_t ones = 0;
    for (double v : y_one_hot) {
        if (v != 0.0 && v != 1.0) throw ArgumentError("cls_loss: y must be one-hot");
        if (v == 1.0) ++ones;
    }
    if (ones != 1) throw ArgumentError("cls_loss: y must contain exactly one 1");
    Tensor y({y_one_hot.size()}, y_one_hot);

    std::vector<Tensor> terms;
    terms.reserve(p_list.size());
    for (const Tensor& p : p_list) {
        if (p.numel() != y_one_hot.size()) throw ArgumentError("cls_loss: class count mismatch");
        double sum_p = 0.0;
        for (double v : p.data()) {
            if (v < 0.0) throw ArgumentError("cls_loss: probabilities must be non-negative");
            sum_p += v;
        }
        if (std::abs(sum_p - 1.0) > 1e-6) throw ArgumentError("cls_loss: probabilities must sum to 1");
        terms.push_back(neg(dot(log_floored(reshape(p, {y_one_hot.size()})), y)));
    }
    return mean(stack_scalars(terms));
}

LossBreakdown total_loss(DiffusionModel& model, const std::vector<const ClipRecord*>& batch,
                         const std::vector<Tensor>& s_samples, RandomStream& noise_rng,
                         RandomStream& drop_rng, std::vector<std::size_t>* retrieved_codes) {
    if (batch.empty() || batch.size() != s_samples.size()) {
        throw ArgumentError("total_loss: batch and prior samples must align");
    }
    const NoiseSchedule& schedule = model.schedule();
    const double inv_batch = 1.0 / static_cast<double>(batch.size());

    std::vector<Tensor> den_terms;
    std::vector<Tensor> cls_terms;
    std::vector<Tensor> vq_terms;
    den_terms.reserve(batch.size());

    for (std::size_t i = 0; i < batch.size(); ++i) {
        const ClipRecord& clip = *batch[i];
        const ConditionDropFlags flags = condition_dropout(drop_rng);
        ConditionSet cond = model.build_conditions(clip, s_samples[i], flags);

        const std::size_t t = noise_rng.integer(1, schedule.T);
        NoisyLatent noisy = add_noise(clip.latent_video, t, schedule, noise_rng);
        DenoiserOutput out = model.predict_noise(noisy.z_t, cond, t);
        den_terms.push_back(mean(square(sub(out.eps_hat, noisy.eps))));

        if (!flags.emotion) {
            Tensor p = model.discriminate(out.features);
            std::vector<double> y(model.config().num_emotions, 0.0);
            y[clip.emotion] = 1.0;
            cls_terms.push_back(cls_loss({p}, y));
            vq_terms.push_back(model.bank().vq_loss(s_samples[i], model.config().beta_commit));
            if (retrieved_codes) retrieved_codes->push_back(cond.emotion.retrieved_index);
        }
    }

    Tensor l_den = mean(stack_scalars(den_terms));
    Tensor l_cls = cls_terms.empty() ? Tensor::scalar(0.0)
                                     : mul_scalar(sum(stack_scalars(cls_terms)), inv_batch);
    Tensor l_vq = vq_terms.empty() ? Tensor::scalar(0.0)
                                   : mul_scalar(sum(stack_scalars(vq_terms)), inv_batch);

    LossBreakdown breakdown;
    breakdown.denoising = l_den.value();
    breakdown.cls = l_cls.value();
    breakdown.vq = l_vq.value();
    breakdown.total = add(add(l_den, mul_scalar(l_cls, model.config().lambda_cls)), l_vq);
    return breakdown;
}

DiffusionCurve train_diffusion(const std::vector<ClipRecord>& corpus, const EmbedderModel& embedder,
                               DiffusionModel& model, std::uint64_t seed) {
    if (corpus.empty()) throw DataError("train_diffusion: empty corpus");
    if (embedder.config().embed_dim != model.config().embed_dim) {
        throw ConfigError("train_diffusion: embedder and diffusion d_s differ");
    }
    const DiffusionConfig& cfg = model.config();
    RandomStream base(seed);
    RandomStream prior_rng = base.fork("diffusion/priors");
    RandomStream batch_rng = base.fork("diffusion/batches");
    RandomStream eps_rng = base.fork("diffusion/reparam");
    RandomStream noise_rng = base.fork("diffusion/noise");
    RandomStream drop_rng = base.fork("diffusion/drop");

    // frozen embedder: precompute per-clip prior moments once
    const std::size_t ds = cfg.embed_dim;
    std::vector<std::vector<double>> mu(corpus.size());
    std::vector<std::vector<double>> sigma(corpus.size());
    {
        NoGradGuard no_grad;
        for (std::size_t i = 0; i < corpus.size(); ++i) {
            EmotionPrior prior = embedder.embed(corpus[i], prior_rng);
            mu[i] = prior.mu.data();
            sigma[i].resize(ds);
            for (std::size_t j = 0; j < ds; ++j) sigma[i][j] = std::sqrt(prior.sigma2.data()[j]);
        }
    }

    // class-mean prompt features (the fixed per-emotion inference prompts)
    {
        std::vector<double> prompts(cfg.num_emotions * ds, 0.0);
        std::vector<double> counts(cfg.num_emotions, 0.0);
        for (std::size_t i = 0; i < corpus.size(); ++i) {
            const std::uint32_t e = corpus[i].emotion;
            counts[e] += 1.0;
            for (std::size_t j = 0; j < ds; ++j) prompts[e * ds + j] += mu[i][j];
        }
        for (std::size_t e = 0; e < cfg.num_emotions; ++e) {
            if (counts[e] > 0.0) {
                for (std::size_t j = 0; j < ds; ++j) prompts[e * ds + j] /= counts[e];
            }
        }
        model.set_emotion_prompts(Tensor({cfg.num_emotions, ds}, std::move(prompts)));
    }

    AdamOptimizer opt(model.trainable(), cfg.lr);
    DiffusionCurve curve;
    curve.total.reserve(cfg.steps);

    std::vector<std::size_t> last_used(cfg.bank_codes, 0);
    std::deque<std::vector<double>> recent_priors;

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        std::vector<const ClipRecord*> batch(cfg.batch_size);
        std::vector<Tensor> s_samples;
        s_samples.reserve(cfg.batch_size);
        for (std::size_t b = 0; b < cfg.batch_size; ++b) {
            const std::size_t idx = batch_rng.integer(0, corpus.size() - 1);
            batch[b] = &corpus[idx];
            std::vector<double> s(ds);
            for (std::size_t j = 0; j < ds; ++j) s[j] = mu[idx][j] + sigma[idx][j] * eps_rng.normal();
            recent_priors.push_back(s);
            if (recent_priors.size() > kRecentPriorBuffer) recent_priors.pop_front();
            s_samples.push_back(Tensor({ds}, std::move(s)));
        }

        std::vector<std::size_t> retrieved;
        LossBreakdown loss;
        try {
            loss = total_loss(model, batch, s_samples, noise_rng, drop_rng, &retrieved);
        } catch (const NumericError& e) {
            throw TrainingError(std::string("train_diffusion: ") + e.what(), step);
        }
        const double total_value = loss.total.value();
        if (!std::isfinite(total_value)) throw TrainingError("train_diffusion: loss diverged", step);
        curve.total.push_back(total_value);
        curve.denoising.push_back(loss.denoising);
        curve.cls.push_back(loss.cls);
        curve.vq.push_back(loss.vq);

        opt.zero_grad();
        backward(loss.total);
        opt.step();

        for (std::size_t k : retrieved) last_used[k] = step + 1;

        // re-seed codes that went unused for dead_code_steps. The
        // "uncovered" policy parks them on the recent prior the bank
        // covers worst, so an unserved cluster gets claimed without
        // splitting a served one; "random" picks any recent prior.
        if (step + 1 >= cfg.dead_code_steps) {
            for (std::size_t k = 0; k < cfg.bank_codes; ++k) {
                if ((step + 1) - last_used[k] < cfg.dead_code_steps) continue;
                if (recent_priors.empty()) break;
                std::size_t pick = 0;
                if (cfg.dead_code_policy == "random") {
                    pick = batch_rng.integer(0, recent_priors.size() - 1);
                } else {
                    const auto& codes = model.bank().codes().data();
                    double worst_dist = -1.0;
                    for (std::size_t r = 0; r < recent_priors.size(); ++r) {
                        double nearest = -1.0;
                        for (std::size_t c = 0; c < cfg.bank_codes; ++c) {
                            double dist = 0.0;
                            for (std::size_t j = 0; j < ds; ++j) {
                                const double diff = recent_priors[r][j] - codes[c * ds + j];
                                dist += diff * diff;
                            }
                            if (nearest < 0.0 || dist < nearest) nearest = dist;
                        }
                        if (nearest > worst_dist) {
                            worst_dist = nearest;
                            pick = r;
                        }
                    }
                }
                model.bank().reseed_code(k, recent_priors[pick]);
                opt.reset_moments(model.bank().params().get("bank.codes"), k * ds, ds);
                last_used[k] = step + 1;
            }
        }
    }
    return curve;
}

// -------------------------------------------------------------- checkpointing

namespace {

std::vector<const Parameter*> by_prefix(const ParameterSet& set, const std::string& prefix) {
    std::vector<const Parameter*> out;
    for (const Parameter* p : set.all()) {
        if (p->name.rfind(prefix, 0) == 0) out.push_back(p);
    }
    return out;
}

}  // namespace

void DiffusionModel::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("DiffusionModel::save: cannot open " + path);
    write_magic(os, "DCDF");
    write_u32(os, kCheckpointVersion);
    write_u32(os, 6);  // section count

    write_magic(os, "DNZR");
    write_param_block(os, by_prefix(params_, "den."));
    write_magic(os, "DCBK");
    write_param_block(os, bank_.params().all());
    write_magic(os, "DDSC");
    write_param_block(os, by_prefix(params_, "disc."));
    write_magic(os, "DNUL");
    write_param_block(os, by_prefix(params_, "null."));

    write_magic(os, "DSCH");
    write_u32(os, 3);
    Tensor a({schedule_.a.size()}, schedule_.a);
    Tensor b({schedule_.b.size()}, schedule_.b);
    Tensor meta({static_cast<std::size_t>(2)},
                {static_cast<double>(schedule_.T), static_cast<double>(schedule_.sampler_steps)});
    write_tensor(os, a);
    write_tensor(os, b);
    write_tensor(os, meta);

    write_magic(os, "DPRM");
    write_u32(os, 1);
    write_tensor(os, prompts_);
}

void DiffusionModel::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("DiffusionModel::load: cannot open " + path);
    expect_magic(is, "DCDF", path);
    const std::uint32_t version = read_u32(is);
    if (version != kCheckpointVersion) {
        throw DataError("DiffusionModel::load: unsupported version " + std::to_string(version));
    }
    const std::uint32_t sections = read_u32(is);
    if (sections != 6) throw DataError("DiffusionModel::load: unexpected section count");

    expect_magic(is, "DNZR", path);
    read_param_block(is, params_);
    expect_magic(is, "DCBK", path);
    read_param_block(is, bank_.params());
    expect_magic(is, "DDSC", path);
    read_param_block(is, params_);
    expect_magic(is, "DNUL", path);
    read_param_block(is, params_);

    expect_magic(is, "DSCH", path);
    if (read_u32(is) != 3) throw DataError("DiffusionModel::load: bad schedule section");
    Tensor a = read_tensor(is);
    Tensor b = read_tensor(is);
    Tensor meta = read_tensor(is);
    if (meta.numel() != 2) throw DataError("DiffusionModel::load: bad schedule meta");
    NoiseSchedule sched;
    sched.T = static_cast<std::size_t>(meta.at(0));
    sched.sampler_steps = static_cast<std::size_t>(meta.at(1));
    if (a.numel() != sched.T + 1 || b.numel() != sched.T + 1) {
        throw DataError("DiffusionModel::load: schedule length mismatch");
    }
    sched.a = a.data();
    sched.b = b.data();
    // f32 storage perturbs a^2+b^2 at the last bit; renormalize b
    for (std::size_t t = 0; t <= sched.T; ++t) {
        sched.b[t] = std::sqrt(std::max(0.0, 1.0 - sched.a[t] * sched.a[t]));
    }
    sched.validate();
    schedule_ = std::move(sched);

    expect_magic(is, "DPRM", path);
    if (read_u32(is) != 1) throw DataError("DiffusionModel::load: bad prompt section");
    Tensor prompts = read_tensor(is);
    if (prompts.shape() != Shape{config_.num_emotions, config_.embed_dim}) {
        throw DataError("DiffusionModel::load: prompt shape mismatch");
    }
    prompts_ = std::move(prompts);
}

}  // namespace emodiff
