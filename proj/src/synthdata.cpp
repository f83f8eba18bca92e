#include "emodiff/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "emodiff/errors.hpp"
#include "emodiff/serialize.hpp"

namespace emodiff {

namespace fs = std::filesystem;

const char* const kEmotionNames[4] = {"neutral", "happy", "surprised", "angry"};

namespace {

constexpr double kIdentityScale = 0.8;
constexpr double kEmotionScale = 1.0;
constexpr double kDriftScale = 0.25;
constexpr double kLatentIdScale = 0.6;
constexpr double kLatentEmotionScale = 1.1;
constexpr double kLatentAudioScale = 0.25;
constexpr double kLatentSquash = 2.5;  // keeps entries inside [-3, 3]
constexpr std::uint32_t kCorpusVersion = 1;

double intensity_factor(std::uint32_t level) { return 0.6 + 0.4 * static_cast<double>(level); }

std::vector<double> draw_vec(RandomStream& rng, std::size_t n, double scale) {
    std::vector<double> v(n);
    for (double& x : v) x = scale * rng.normal();
    return v;
}

}  // namespace

void FeatureSequence::drop() {
    // fresh zero tensor: clip copies share buffers, so never mutate in place
    frames = Tensor::zeros(frames.shape());
    dropped = true;
}

void CorpusConfig::validate() const {
    if (identities == 0 || emotions == 0 || intensities == 0 || clips_per_cell == 0 || frames == 0 ||
        feature_dim == 0 || latent_frames == 0 || latent_channels == 0 || latent_height == 0 ||
        latent_width == 0) {
        throw ConfigError("corpus config: all counts must be positive");
    }
    if (emotions != 4) {
        throw ConfigError("corpus config: emotion label set is fixed to 4 classes");
    }
    if (intensities > 3) throw ConfigError("corpus config: at most 3 intensity levels");
    if (!(audio_snr > 0.0) || !(visual_snr > 0.0) || !(audio_snr < visual_snr)) {
        throw ConfigError("corpus config: need 0 < audio_snr < visual_snr");
    }
}

std::vector<ClipRecord> generate_corpus(const CorpusConfig& config, std::uint64_t seed) {
    config.validate();
    RandomStream base(seed);
    RandomStream id_rng = base.fork("corpus/identity-bases");
    RandomStream emo_v_rng = base.fork("corpus/emotion-dirs-visual");
    RandomStream emo_a_rng = base.fork("corpus/emotion-dirs-audio");
    RandomStream lat_rng = base.fork("corpus/latent-patterns");
    RandomStream clip_rng = base.fork("corpus/clips");

    const std::size_t d = config.feature_dim;
    const std::size_t latent_n = config.latent_numel();

    std::vector<std::vector<double>> identity_base(config.identities);
    for (auto& v : identity_base) v = draw_vec(id_rng, d, kIdentityScale);
    std::vector<std::vector<double>> emo_visual(config.emotions);
    for (auto& v : emo_visual) v = draw_vec(emo_v_rng, d, kEmotionScale);
    std::vector<std::vector<double>> emo_audio(config.emotions);
    for (auto& v : emo_audio) v = draw_vec(emo_a_rng, d, kEmotionScale);

    std::vector<std::vector<double>> latent_id(config.identities);
    for (auto& v : latent_id) v = draw_vec(lat_rng, latent_n, kLatentIdScale);
    std::vector<std::vector<double>> latent_emo(config.emotions);
    for (auto& v : latent_emo) v = draw_vec(lat_rng, latent_n, kLatentEmotionScale);
    const std::vector<double> latent_audio_pattern = draw_vec(lat_rng, latent_n, kLatentAudioScale);

    const double sigma_visual = kEmotionScale / config.visual_snr;
    const double sigma_audio = kEmotionScale / config.audio_snr;

    // with overlapping segments each clip slot yields two records sharing a
    // generating sequence (the HDTF-style same-video positive)
    const std::size_t segments = config.overlap_segments ? 2 : 1;
    const std::size_t gen_frames = config.overlap_segments ? config.frames + config.frames / 2
                                                           : config.frames;

    std::vector<ClipRecord> corpus;
    corpus.reserve(static_cast<std::size_t>(config.identities) * config.emotions * config.intensities *
                   config.clips_per_cell * segments);

    std::uint32_t clip_id = 0;
    for (std::uint32_t id = 0; id < config.identities; ++id) {
        for (std::uint32_t emo = 0; emo < config.emotions; ++emo) {
            for (std::uint32_t level = 0; level < config.intensities; ++level) {
                for (std::uint32_t c = 0; c < config.clips_per_cell; ++c) {
                    const double m = intensity_factor(level);
                    const std::vector<double> drift = draw_vec(clip_rng, d, kDriftScale);

                    std::vector<double> visual(gen_frames * d);
                    std::vector<double> audio(gen_frames * d);
                    for (std::size_t f = 0; f < gen_frames; ++f) {
                        const double ramp =
                            gen_frames > 1
                                ? static_cast<double>(f) / static_cast<double>(gen_frames - 1) - 0.5
                                : 0.0;
                        for (std::size_t j = 0; j < d; ++j) {
                            visual[f * d + j] = identity_base[id][j] + m * emo_visual[emo][j] +
                                                ramp * drift[j] + sigma_visual * clip_rng.normal();
                            audio[f * d + j] = m * emo_audio[emo][j] + sigma_audio * clip_rng.normal();
                        }
                    }

                    for (std::size_t seg = 0; seg < segments; ++seg) {
                        const std::size_t off = seg * (config.frames / 2) * d;
                        std::vector<double> vis_seg(visual.begin() + static_cast<std::ptrdiff_t>(off),
                                                    visual.begin() +
                                                        static_cast<std::ptrdiff_t>(off + config.frames * d));
                        std::vector<double> aud_seg(audio.begin() + static_cast<std::ptrdiff_t>(off),
                                                    audio.begin() +
                                                        static_cast<std::ptrdiff_t>(off + config.frames * d));

                        // latent rendering: identity pattern + intensity-scaled
                        // emotion pattern + per-frame audio energy coupling,
                        // squashed to stay within [-3, 3]
                        std::vector<double> latent(latent_n);
                        const std::size_t block =
                            std::max<std::size_t>(1, config.frames / config.latent_frames);
                        const std::size_t per_frame =
                            static_cast<std::size_t>(config.latent_channels) * config.latent_height *
                            config.latent_width;
                        for (std::uint32_t lf = 0; lf < config.latent_frames; ++lf) {
                            double acc = 0.0;
                            std::size_t cnt = 0;
                            for (std::size_t f = lf * block;
                                 f < std::min<std::size_t>((lf + 1) * block, config.frames); ++f) {
                                for (std::size_t j = 0; j < d; ++j) {
                                    acc += aud_seg[f * d + j];
                                    ++cnt;
                                }
                            }
                            const double audio_level = cnt ? acc / static_cast<double>(cnt) : 0.0;
                            for (std::size_t p = 0; p < per_frame; ++p) {
                                const std::size_t idx = lf * per_frame + p;
                                const double raw = latent_id[id][idx] + m * latent_emo[emo][idx] +
                                                   audio_level * latent_audio_pattern[idx];
                                latent[idx] = kLatentSquash * std::tanh(raw / kLatentSquash);
                            }
                        }

                        ClipRecord clip;
                        clip.clip_id = clip_id++;
                        clip.identity = id;
                        clip.emotion = emo;
                        clip.intensity = level;
                        const Shape seq_shape{static_cast<std::size_t>(config.frames), d};
                        clip.visual = {Tensor(seq_shape, std::move(vis_seg)), Modality::kVisual, false};
                        clip.audio = {Tensor(seq_shape, std::move(aud_seg)), Modality::kAudio, false};
                        clip.latent_video = Tensor(
                            Shape{config.latent_frames, config.latent_channels, config.latent_height,
                                  config.latent_width},
                            std::move(latent));
                        corpus.push_back(std::move(clip));
                    }
                }
            }
        }
    }
    return corpus;
}

namespace {

struct CellIndex {
    std::map<std::pair<std::uint32_t, std::uint32_t>, std::vector<std::size_t>> cells;
    explicit CellIndex(const std::vector<ClipRecord>& corpus) {
        for (std::size_t i = 0; i < corpus.size(); ++i) {
            cells[{corpus[i].identity, corpus[i].emotion}].push_back(i);
        }
        for (const auto& [key, members] : cells) {
            if (members.size() < 2) {
                throw DataError("sample_pairs: cell (identity " + std::to_string(key.first) +
                                ", emotion " + std::to_string(key.second) + ") has fewer than 2 clips");
            }
        }
    }
};

}  // namespace

PairBatch sample_pairs(const std::vector<ClipRecord>& corpus, std::size_t batch_size,
                       std::size_t negatives_per_anchor, RandomStream& rng) {
    if (corpus.empty()) throw DataError("sample_pairs: empty corpus");
    if (batch_size == 0 || negatives_per_anchor == 0) {
        throw ArgumentError("sample_pairs: batch_size and negatives_per_anchor must be positive");
    }
    CellIndex index(corpus);

    PairBatch batch;
    batch.anchors.reserve(batch_size);
    batch.positives.reserve(batch_size);
    batch.negatives.reserve(batch_size);
    for (std::size_t b = 0; b < batch_size; ++b) {
        const std::size_t anchor_idx = rng.integer(0, corpus.size() - 1);
        const ClipRecord& anchor = corpus[anchor_idx];
        const auto& cell = index.cells.at({anchor.identity, anchor.emotion});

        // positive: uniform over cell mates excluding the anchor itself
        std::size_t pos_idx = anchor_idx;
        {
            const std::size_t pick = rng.integer(0, cell.size() - 2);
            std::size_t seen = 0;
            for (std::size_t idx : cell) {
                if (idx == anchor_idx) continue;
                if (seen++ == pick) {
                    pos_idx = idx;
                    break;
                }
            }
        }

        std::vector<ClipRecord> negs;
        negs.reserve(negatives_per_anchor);
        const std::size_t invalid = cell.size();  // same identity AND emotion
        const std::size_t valid_count = corpus.size() - invalid;
        if (valid_count == 0) throw DataError("sample_pairs: no valid negatives exist");
        for (std::size_t n = 0; n < negatives_per_anchor; ++n) {
            std::size_t pick = rng.integer(0, valid_count - 1);
            // walk the corpus skipping the anchor's cell
            std::size_t neg_idx = corpus.size();
            for (std::size_t idx = 0; idx < corpus.size(); ++idx) {
                const ClipRecord& cand = corpus[idx];
                if (cand.identity == anchor.identity && cand.emotion == anchor.emotion) continue;
                if (pick-- == 0) {
                    neg_idx = idx;
                    break;
                }
            }
            negs.push_back(corpus[neg_idx]);
        }

        batch.anchors.push_back(anchor);
        batch.positives.push_back(corpus[pos_idx]);
        batch.negatives.push_back(std::move(negs));
    }
    return batch;
}

void modality_dropout(ClipRecord& clip, double p_audio, double p_visual, RandomStream& rng) {
    const bool drop_audio = rng.bernoulli(p_audio);
    bool drop_visual = rng.bernoulli(p_visual);
    if (drop_audio && drop_visual) drop_visual = false;  // never both
    if (drop_audio) clip.audio.drop();
    if (drop_visual) clip.visual.drop();
}

void modality_dropout(PairBatch& batch, double p_audio, double p_visual, RandomStream& rng) {
    if (p_audio < 0.0 || p_audio >= 1.0 || p_visual < 0.0 || p_visual >= 1.0) {
        throw ArgumentError("modality_dropout: probabilities must lie in [0, 1)");
    }
    for (auto& clip : batch.anchors) modality_dropout(clip, p_audio, p_visual, rng);
    for (auto& clip : batch.positives) modality_dropout(clip, p_audio, p_visual, rng);
    for (auto& negs : batch.negatives) {
        for (auto& clip : negs) modality_dropout(clip, p_audio, p_visual, rng);
    }
}

ConditionDropFlags condition_dropout(RandomStream& rng) {
    // four disjoint 5% events carved out of one uniform draw
    const double u = rng.uniform();
    ConditionDropFlags flags;
    if (u < 0.05) {
        flags.audio = true;
    } else if (u < 0.10) {
        flags.image = true;
    } else if (u < 0.15) {
        flags.emotion = true;
    } else if (u < 0.20) {
        flags.audio = flags.image = flags.emotion = true;
    }
    return flags;
}

// ------------------------------------------------------------------- disk IO

namespace {

std::string clip_filename(std::uint32_t clip_id) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "clip_%06u.dclp", clip_id);
    return buf;
}

}  // namespace

void export_corpus(const std::vector<ClipRecord>& corpus, const std::string& dir) {
    fs::create_directories(dir);
    std::ofstream index(fs::path(dir) / "index.jsonl", std::ios::binary);
    if (!index) throw IoError("export_corpus: cannot write index in " + dir);
    for (const ClipRecord& clip : corpus) {
        const std::string fname = clip_filename(clip.clip_id);
        std::ofstream os(fs::path(dir) / fname, std::ios::binary);
        if (!os) throw IoError("export_corpus: cannot write " + fname);
        write_magic(os, "DCLP");
        write_u32(os, kCorpusVersion);
        write_u32(os, clip.identity);
        write_u32(os, clip.emotion);
        write_u32(os, clip.intensity);
        write_tensor(os, clip.visual.frames);
        write_tensor(os, clip.audio.frames);
        write_tensor(os, clip.latent_video);

        index << "{\"clip_id\":" << clip.clip_id << ",\"identity\":" << clip.identity
              << ",\"emotion\":" << clip.emotion << ",\"intensity\":" << clip.intensity
              << ",\"file\":\"" << fname << "\"}\n";
    }
}

std::vector<ClipRecord> import_corpus(const std::string& dir) {
    std::ifstream index(fs::path(dir) / "index.jsonl");
    if (!index) throw DataError("import_corpus: missing index.jsonl in " + dir);
    std::vector<ClipRecord> corpus;
    std::string line;
    while (std::getline(index, line)) {
        if (line.empty()) continue;
        nlohmann::json entry = nlohmann::json::parse(line, nullptr, false);
        if (entry.is_discarded()) throw DataError("import_corpus: malformed index line");

        ClipRecord clip;
        clip.clip_id = entry.at("clip_id").get<std::uint32_t>();
        const std::string fname = entry.at("file").get<std::string>();
        std::ifstream is(fs::path(dir) / fname, std::ios::binary);
        if (!is) throw DataError("import_corpus: missing clip file " + fname);
        expect_magic(is, "DCLP", fname);
        const std::uint32_t version = read_u32(is);
        if (version != kCorpusVersion) throw DataError("import_corpus: unsupported version in " + fname);
        clip.identity = read_u32(is);
        clip.emotion = read_u32(is);
        clip.intensity = read_u32(is);
        clip.visual = {read_tensor(is), Modality::kVisual, false};
        clip.audio = {read_tensor(is), Modality::kAudio, false};
        clip.latent_video = read_tensor(is);
        if (clip.visual.frame_count() != clip.audio.frame_count()) {
            throw DataError("import_corpus: modality frame counts differ in " + fname);
        }
        corpus.push_back(std::move(clip));
    }
    if (corpus.empty()) throw DataError("import_corpus: no clips found in " + dir);
    return corpus;
}

std::uint64_t corpus_hash(const std::vector<ClipRecord>& corpus) {
    std::ostringstream os(std::ios::binary);
    for (const ClipRecord& clip : corpus) {
        write_u32(os, clip.clip_id);
        write_u32(os, clip.identity);
        write_u32(os, clip.emotion);
        write_u32(os, clip.intensity);
        write_tensor(os, clip.visual.frames);
        write_tensor(os, clip.audio.frames);
        write_tensor(os, clip.latent_video);
    }
    const std::string bytes = os.str();
    return fnv1a64(std::string_view(bytes.data(), bytes.size()));
}

}  // namespace emodiff
