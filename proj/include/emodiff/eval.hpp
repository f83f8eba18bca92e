#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "emodiff/diffusion.hpp"
#include "emodiff/embedder.hpp"
#include "emodiff/synthdata.hpp"

namespace emodiff {

struct LabeledVector {
    std::vector<double> values;
    std::uint32_t label = 0;
};

// d_cls = d_inter / d_intra. d_intra: mean over classes of the mean
// euclidean distance from points to their class centroid (floored at 1e-8);
// d_inter: mean pairwise distance between class centroids.
double clustering_strength(const std::vector<LabeledVector>& embeddings);

// Per-class decomposition of the same statistic: for class c, d_intra is
// the in-class spread, d_inter the mean distance from its centroid to the
// other centroids.
std::map<std::uint32_t, double> clustering_strength_per_class(const std::vector<LabeledVector>& embeddings);

// Deterministic per-clip embeddings (the prior mean). Variants zero one
// modality before encoding.
enum class ModalityVariant { kBoth, kVisualOnly, kAudioOnly };
std::vector<LabeledVector> corpus_embeddings(const std::vector<ClipRecord>& corpus,
                                             const EmbedderModel& embedder, ModalityVariant variant);

struct AblationReport {
    // variant -> emotion label -> d_cls
    std::map<std::string, std::map<std::uint32_t, double>> per_emotion;
    std::map<std::string, double> global;
    bool ordering_holds = false;  // both > visual-only > audio-only for every emotion
};

AblationReport modality_ablation(const std::vector<ClipRecord>& corpus, const EmbedderModel& embedder);

// Evenly spaced linear interpolation between two prior samples; endpoints
// are bit-exact copies of the inputs.
std::vector<Tensor> interpolate(const EmotionPrior& s1, const EmotionPrior& s2, std::size_t steps);

struct Projection2D {
    std::vector<std::array<double, 2>> coords;
    double variance_explained = 0.0;  // fraction of total variance
    bool degenerate = false;          // all-zero output with warning flag
};

// Top-2 principal-component projection, deterministic and sign-fixed (the
// largest-magnitude loading of each component is positive).
Projection2D project_2d(const std::vector<std::vector<double>>& embeddings);

// Fraction of latents whose scored argmax class equals the target.
double emo_accuracy(const std::vector<std::pair<Tensor, std::uint32_t>>& samples,
                    const DiffusionModel& scorer);

// Discriminator accuracy on noisy training latents bucketed into 4 noise
// quartiles over t in [1, T]; conditions are all-null so nothing but the
// latent can leak the label.
std::vector<double> discriminator_accuracy_by_quartile(const std::vector<ClipRecord>& corpus,
                                                       const DiffusionModel& model,
                                                       std::size_t samples_per_quartile,
                                                       std::uint64_t seed);

}  // namespace emodiff
