#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "emodiff/rng.hpp"
#include "emodiff/tensor.hpp"

namespace emodiff {

enum class Modality { kAudio, kVisual };

// Per-frame feature matrix for one modality of one clip. A dropped sequence
// is all-zero by contract.
struct FeatureSequence {
    Tensor frames;  // N x d
    Modality modality = Modality::kVisual;
    bool dropped = false;

    std::size_t frame_count() const { return frames.dim(0); }
    void drop();  // zeroes frames and sets the flag
};

struct ClipRecord {
    std::uint32_t clip_id = 0;
    std::uint32_t identity = 0;
    std::uint32_t emotion = 0;
    std::uint32_t intensity = 0;  // {0,1,2}
    FeatureSequence visual;
    FeatureSequence audio;
    Tensor latent_video;  // F x C x H x W, entries in [-3, 3]
};

// Emotion class names are fixed; index order is the label encoding.
extern const char* const kEmotionNames[4];

struct CorpusConfig {
    std::uint32_t identities = 6;
    std::uint32_t emotions = 4;
    std::uint32_t intensities = 3;
    std::uint32_t clips_per_cell = 4;
    std::uint32_t frames = 16;
    std::uint32_t feature_dim = 24;
    double visual_snr = 1.25;
    double audio_snr = 0.5;  // must stay below visual_snr
    std::uint32_t latent_frames = 4;
    std::uint32_t latent_channels = 2;
    std::uint32_t latent_height = 4;
    std::uint32_t latent_width = 4;
    bool overlap_segments = false;  // two overlapping segments per clip slot

    std::size_t latent_numel() const {
        return static_cast<std::size_t>(latent_frames) * latent_channels * latent_height * latent_width;
    }
    void validate() const;
};

// Deterministic synthetic corpus. Visual frames carry identity + scaled
// emotion direction + temporal drift + noise; audio frames carry only the
// (differently embedded) emotion direction at a lower SNR, so audio is the
// strictly weaker emotion channel. The latent video is a deterministic
// rendering of (identity, emotion, intensity, audio).
std::vector<ClipRecord> generate_corpus(const CorpusConfig& config, std::uint64_t seed);

// Contrastive batch; anchors and positives share identity AND emotion,
// negatives differ in identity OR emotion.
struct PairBatch {
    std::vector<ClipRecord> anchors;
    std::vector<ClipRecord> positives;
    std::vector<std::vector<ClipRecord>> negatives;
};

PairBatch sample_pairs(const std::vector<ClipRecord>& corpus, std::size_t batch_size,
                       std::size_t negatives_per_anchor, RandomStream& rng);

// Zeroes audio or visual per clip with the given probabilities; never both
// for the same clip (visual wins when both are drawn).
void modality_dropout(PairBatch& batch, double p_audio, double p_visual, RandomStream& rng);
void modality_dropout(ClipRecord& clip, double p_audio, double p_visual, RandomStream& rng);

// Condition-level dropout for diffusion training: four disjoint events of
// 5% each (drop audio / drop image / drop emotion / drop all).
struct ConditionDropFlags {
    bool audio = false;
    bool image = false;
    bool emotion = false;
};

ConditionDropFlags condition_dropout(RandomStream& rng);

// ---- corpus on disk ----
// Directory of binary clip files (magic "DCLP") plus index.jsonl mapping
// clip_id -> labels -> filename.
void export_corpus(const std::vector<ClipRecord>& corpus, const std::string& dir);
std::vector<ClipRecord> import_corpus(const std::string& dir);

// Stable content hash over labels and tensor payloads (determinism checks).
std::uint64_t corpus_hash(const std::vector<ClipRecord>& corpus);

}  // namespace emodiff
