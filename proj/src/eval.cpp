#include "emodiff/eval.hpp"

#include <algorithm>
#include <cmath>

#include "emodiff/errors.hpp"

namespace emodiff {

namespace {

constexpr double kIntraFloor = 1e-8;

double euclidean(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return std::sqrt(s);
}

struct ClassStats {
    std::map<std::uint32_t, std::vector<double>> centroids;
    std::map<std::uint32_t, double> intra;  // mean distance to own centroid

    explicit ClassStats(const std::vector<LabeledVector>& embeddings) {
        if (embeddings.empty()) throw DataError("clustering_strength: no embeddings");
        const std::size_t dim = embeddings[0].values.size();
        std::map<std::uint32_t, std::size_t> counts;
        for (const auto& e : embeddings) {
            if (e.values.size() != dim) throw DataError("clustering_strength: dimension mismatch");
            auto& c = centroids[e.label];
            if (c.empty()) c.assign(dim, 0.0);
            for (std::size_t i = 0; i < dim; ++i) c[i] += e.values[i];
            ++counts[e.label];
        }
        if (centroids.size() < 2) throw DataError("clustering_strength: need at least 2 classes");
        for (auto& [label, c] : centroids) {
            if (counts[label] < 2) {
                throw DataError("clustering_strength: class " + std::to_string(label) +
                                " has fewer than 2 points");
            }
            for (double& v : c) v /= static_cast<double>(counts[label]);
        }
        for (const auto& e : embeddings) {
            intra[e.label] += euclidean(e.values, centroids[e.label]);
        }
        for (auto& [label, v] : intra) v /= static_cast<double>(counts[label]);
    }
};

}  // namespace

double clustering_strength(const std::vector<LabeledVector>& embeddings) {
    ClassStats stats(embeddings);
    double d_intra = 0.0;
    for (const auto& [label, v] : stats.intra) d_intra += v;
    d_intra = std::max(d_intra / static_cast<double>(stats.intra.size()), kIntraFloor);

    double d_inter = 0.0;
    std::size_t pairs = 0;
    for (auto it = stats.centroids.begin(); it != stats.centroids.end(); ++it) {
        for (auto jt = std::next(it); jt != stats.centroids.end(); ++jt) {
            d_inter += euclidean(it->second, jt->second);
            ++pairs;
        }
    }
    d_inter /= static_cast<double>(pairs);
    return d_inter / d_intra;
}

std::map<std::uint32_t, double> clustering_strength_per_class(
    const std::vector<LabeledVector>& embeddings) {
    ClassStats stats(embeddings);
    std::map<std::uint32_t, double> out;
    for (const auto& [label, centroid] : stats.centroids) {
        double inter = 0.0;
        std::size_t others = 0;
        for (const auto& [olabel, ocentroid] : stats.centroids) {
            if (olabel == label) continue;
            inter += euclidean(centroid, ocentroid);
            ++others;
        }
        inter /= static_cast<double>(others);
        out[label] = inter / std::max(stats.intra.at(label), kIntraFloor);
    }
    return out;
}

std::vector<LabeledVector> corpus_embeddings(const std::vector<ClipRecord>& corpus,
                                             const EmbedderModel& embedder, ModalityVariant variant) {
    NoGradGuard no_grad;
    RandomStream unused(0);  // prior mean only; the sample is discarded
    std::vector<LabeledVector> out;
    out.reserve(corpus.size());
    for (const ClipRecord& clip : corpus) {
        ClipRecord view = clip;
        if (variant == ModalityVariant::kVisualOnly) view.audio.drop();
        if (variant == ModalityVariant::kAudioOnly) view.visual.drop();
        EmotionPrior prior = embedder.embed(view, unused);
        out.push_back({prior.mu.data(), clip.emotion});
    }
    return out;
}

AblationReport modality_ablation(const std::vector<ClipRecord>& corpus, const EmbedderModel& embedder) {
    AblationReport report;
    const std::pair<std::string, ModalityVariant> variants[] = {
        {"both", ModalityVariant::kBoth},
        {"visual_only", ModalityVariant::kVisualOnly},
        {"audio_only", ModalityVariant::kAudioOnly},
    };
    for (const auto& [name, variant] : variants) {
        auto embeddings = corpus_embeddings(corpus, embedder, variant);
        report.per_emotion[name] = clustering_strength_per_class(embeddings);
        report.global[name] = clustering_strength(embeddings);
    }
    report.ordering_holds = true;
    for (const auto& [emotion, both_value] : report.per_emotion.at("both")) {
        const double visual = report.per_emotion.at("visual_only").at(emotion);
        const double audio = report.per_emotion.at("audio_only").at(emotion);
        if (!(both_value > visual && visual > audio)) report.ordering_holds = false;
    }
    return report;
}

std::vector<Tensor> interpolate(const EmotionPrior& s1, const EmotionPrior& s2, std::size_t steps) {
    if (steps < 2) throw ArgumentError("interpolate: steps must be >= 2");
    if (s1.sample.shape() != s2.sample.shape()) throw ArgumentError("interpolate: dimension mismatch");
    std::vector<Tensor> out;
    out.reserve(steps);
    const auto& a = s1.sample.data();
    const auto& b = s2.sample.data();
    for (std::size_t i = 0; i < steps; ++i) {
        if (i == 0) {
            out.push_back(Tensor(s1.sample.shape(), a));
            continue;
        }
        if (i == steps - 1) {
            out.push_back(Tensor(s2.sample.shape(), b));
            continue;
        }
        const double alpha = static_cast<double>(i) / static_cast<double>(steps - 1);
        std::vector<double> v(a.size());
        for (std::size_t j = 0; j < v.size(); ++j) v[j] = (1.0 - alpha) * a[j] + alpha * b[j];
        out.push_back(Tensor(s1.sample.shape(), std::move(v)));
    }
    return out;
}

namespace {

// Cyclic Jacobi eigensolver for small symmetric matrices; deterministic.
void jacobi_eigen(std::vector<double>& m, std::size_t n, std::vector<double>& eigvals,
                  std::vector<double>& eigvecs) {
    eigvecs.assign(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) eigvecs[i * n + i] = 1.0;
    for (int sweep = 0; sweep < 64; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) off += m[p * n + q] * m[p * n + q];
        }
        if (off < 1e-24) break;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = m[p * n + q];
                if (std::abs(apq) < 1e-300) continue;
                const double app = m[p * n + p];
                const double aqq = m[q * n + q];
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t i = 0; i < n; ++i) {
                    const double aip = m[i * n + p];
                    const double aiq = m[i * n + q];
                    m[i * n + p] = c * aip - s * aiq;
                    m[i * n + q] = s * aip + c * aiq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double api = m[p * n + i];
                    const double aqi = m[q * n + i];
                    m[p * n + i] = c * api - s * aqi;
                    m[q * n + i] = s * api + c * aqi;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double vip = eigvecs[i * n + p];
                    const double viq = eigvecs[i * n + q];
                    eigvecs[i * n + p] = c * vip - s * viq;
                    eigvecs[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }
    eigvals.resize(n);
    for (std::size_t i = 0; i < n; ++i) eigvals[i] = m[i * n + i];
}

}  // namespace

Projection2D project_2d(const std::vector<std::vector<double>>& embeddings) {
    if (embeddings.size() < 3) throw DataError("project_2d: need at least 3 embeddings");
    const std::size_t n = embeddings.size();
    const std::size_t d = embeddings[0].size();
    for (const auto& e : embeddings) {
        if (e.size() != d) throw DataError("project_2d: dimension mismatch");
    }

    std::vector<double> mean_vec(d, 0.0);
    for (const auto& e : embeddings) {
        for (std::size_t j = 0; j < d; ++j) mean_vec[j] += e[j];
    }
    for (double& v : mean_vec) v /= static_cast<double>(n);

    std::vector<double> cov(d * d, 0.0);
    for (const auto& e : embeddings) {
        for (std::size_t i = 0; i < d; ++i) {
            const double ci = e[i] - mean_vec[i];
            for (std::size_t j = i; j < d; ++j) cov[i * d + j] += ci * (e[j] - mean_vec[j]);
        }
    }
    double total_var = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = i; j < d; ++j) {
            cov[i * d + j] /= static_cast<double>(n - 1);
            cov[j * d + i] = cov[i * d + j];
        }
        total_var += cov[i * d + i];
    }

    Projection2D out;
    out.coords.assign(n, {0.0, 0.0});
    if (total_var < 1e-18) {
        out.degenerate = true;
        return out;
    }

    std::vector<double> work = cov;
    std::vector<double> eigvals, eigvecs;
    jacobi_eigen(work, d, eigvals, eigvecs);

    // top-2 components by eigenvalue, sign fixed on the largest loading
    std::vector<std::size_t> order(d);
    for (std::size_t i = 0; i < d; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return eigvals[a] > eigvals[b]; });

    std::vector<std::array<double, 2>> components(d, {0.0, 0.0});
    double explained = 0.0;
    for (int comp = 0; comp < 2; ++comp) {
        const std::size_t col = order[static_cast<std::size_t>(comp)];
        explained += std::max(eigvals[col], 0.0);
        std::size_t arg = 0;
        double best = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double v = std::abs(eigvecs[i * d + col]);
            if (v > best) {
                best = v;
                arg = i;
            }
        }
        const double sign = eigvecs[arg * d + col] >= 0.0 ? 1.0 : -1.0;
        for (std::size_t i = 0; i < d; ++i) components[i][comp] = sign * eigvecs[i * d + col];
    }
    out.variance_explained = explained / total_var;

    for (std::size_t k = 0; k < n; ++k) {
        double x = 0.0, y = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = embeddings[k][j] - mean_vec[j];
            x += c * components[j][0];
            y += c * components[j][1];
        }
        out.coords[k] = {x, y};
    }
    return out;
}

double emo_accuracy(const std::vector<std::pair<Tensor, std::uint32_t>>& samples,
                    const DiffusionModel& scorer) {
    if (samples.empty()) throw DataError("emo_accuracy: no samples");
    std::size_t correct = 0;
    for (const auto& [latent, target] : samples) {
        const Tensor probs = scorer.score_latent(latent);
        const auto& p = probs.data();
        const std::size_t argmax =
            static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
        if (argmax == target) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(samples.size());
}

std::vector<double> discriminator_accuracy_by_quartile(const std::vector<ClipRecord>& corpus,
                                                       const DiffusionModel& model,
                                                       std::size_t samples_per_quartile,
                                                       std::uint64_t seed) {
    if (corpus.empty()) throw DataError("discriminator_accuracy_by_quartile: empty corpus");
    if (samples_per_quartile == 0) {
        throw ArgumentError("discriminator_accuracy_by_quartile: need at least one sample");
    }
    NoGradGuard no_grad;
    RandomStream rng(seed);
    RandomStream noise_rng = rng.fork("eval/disc-noise");
    const NoiseSchedule& schedule = model.schedule();
    const std::size_t T = schedule.T;

    std::vector<double> accuracy(4, 0.0);
    for (std::size_t quartile = 0; quartile < 4; ++quartile) {
        const std::size_t t_lo = quartile * T / 4 + 1;
        const std::size_t t_hi = (quartile + 1) * T / 4;
        std::size_t correct = 0;
        for (std::size_t i = 0; i < samples_per_quartile; ++i) {
            const ClipRecord& clip = corpus[i % corpus.size()];
            const std::size_t t = noise_rng.integer(t_lo, t_hi);
            NoisyLatent noisy = add_noise(clip.latent_video, t, schedule, noise_rng);
            DenoiserOutput out = model.predict_noise(noisy.z_t, model.null_conditions(model.audio_frames()),
                                                     t);
            const Tensor probs = model.discriminate(out.features);
            const auto& p = probs.data();
            const std::size_t argmax =
                static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
            if (argmax == clip.emotion) ++correct;
        }
        accuracy[quartile] = static_cast<double>(correct) / static_cast<double>(samples_per_quartile);
    }
    return accuracy;
}

}  // namespace emodiff
