#include <doctest.h>

#include <filesystem>
#include <set>

#include "emodiff/synthdata.hpp"
#include "oracles.hpp"

using namespace emodiff;

namespace {

CorpusConfig small_config() {
    CorpusConfig cfg;
    cfg.identities = 3;
    cfg.emotions = 4;
    cfg.intensities = 2;
    cfg.clips_per_cell = 2;
    cfg.frames = 6;
    cfg.feature_dim = 10;
    return cfg;
}

}  // namespace

TEST_CASE("corpus generation is deterministic and sized by the config") {
    CorpusConfig cfg;  // defaults: 6 identities x 4 emotions x 3 intensities x 4 clips
    auto a = generate_corpus(cfg, 42);
    auto b = generate_corpus(cfg, 42);
    CHECK(a.size() == 288);
    CHECK(corpus_hash(a) == corpus_hash(b));
    auto c = generate_corpus(cfg, 43);
    CHECK_FALSE(corpus_hash(a) == corpus_hash(c));
}

TEST_CASE("clip records satisfy their invariants") {
    auto corpus = generate_corpus(small_config(), 7);
    for (const auto& clip : corpus) {
        CHECK(clip.visual.frame_count() == clip.audio.frame_count());
        CHECK(clip.identity < 3);
        CHECK(clip.emotion < 4);
        CHECK(clip.intensity < 2);
        for (double v : clip.latent_video.data()) {
            CHECK(v >= -3.0);
            CHECK(v <= 3.0);
        }
    }
}

TEST_CASE("corpus config validation") {
    CorpusConfig cfg = small_config();
    cfg.clips_per_cell = 0;
    CHECK_THROWS_AS(generate_corpus(cfg, 1), ConfigError);
    cfg = small_config();
    cfg.audio_snr = cfg.visual_snr;  // must be strictly below
    CHECK_THROWS_AS(generate_corpus(cfg, 1), ConfigError);
}

TEST_CASE("linear probe: visual carries more emotion signal than audio") {
    CorpusConfig cfg;  // default scales
    auto corpus = generate_corpus(cfg, 42);

    std::vector<std::vector<double>> visual_rows, audio_rows;
    std::vector<std::size_t> labels;
    for (const auto& clip : corpus) {
        const std::size_t n = clip.visual.frame_count();
        const std::size_t d = clip.visual.frames.dim(1);
        for (std::size_t f = 0; f < n; ++f) {
            std::vector<double> vrow(d), arow(d);
            for (std::size_t j = 0; j < d; ++j) {
                vrow[j] = clip.visual.frames.at(f, j);
                arow[j] = clip.audio.frames.at(f, j);
            }
            visual_rows.push_back(std::move(vrow));
            audio_rows.push_back(std::move(arow));
            labels.push_back(clip.emotion);
        }
    }
    const double visual_acc = oracles::ridge_probe_accuracy(visual_rows, labels, 4);
    const double audio_acc = oracles::ridge_probe_accuracy(audio_rows, labels, 4);
    CHECK(visual_acc >= 0.95);
    CHECK(audio_acc > 0.3);                  // above chance (0.25)
    CHECK(visual_acc - audio_acc >= 0.05);   // strictly weaker audio channel
}

TEST_CASE("pair sampling: forced cell and label constraints") {
    CorpusConfig cfg = small_config();
    cfg.identities = 2;
    cfg.intensities = 1;
    cfg.clips_per_cell = 2;  // exactly two clips per cell
    auto corpus = generate_corpus(cfg, 5);

    RandomStream rng(1);
    PairBatch batch = sample_pairs(corpus, 1, 1, rng);
    CHECK(batch.anchors[0].identity == batch.positives[0].identity);
    CHECK(batch.anchors[0].emotion == batch.positives[0].emotion);
    CHECK_FALSE(batch.anchors[0].clip_id == batch.positives[0].clip_id);
}

TEST_CASE("pair sampling: negatives never share identity AND emotion (1000 draws)") {
    auto corpus = generate_corpus(small_config(), 9);
    RandomStream rng(2);
    for (int rep = 0; rep < 1000 / 4; ++rep) {
        PairBatch batch = sample_pairs(corpus, 4, 3, rng);
        for (std::size_t b = 0; b < batch.anchors.size(); ++b) {
            const auto& anchor = batch.anchors[b];
            CHECK(anchor.identity == batch.positives[b].identity);
            CHECK(anchor.emotion == batch.positives[b].emotion);
            CHECK_FALSE(anchor.clip_id == batch.positives[b].clip_id);
            for (const auto& neg : batch.negatives[b]) {
                const bool same_cell = neg.identity == anchor.identity && neg.emotion == anchor.emotion;
                CHECK_FALSE(same_cell);
            }
        }
    }
}

TEST_CASE("pair sampling is deterministic and validates cells") {
    auto corpus = generate_corpus(small_config(), 9);
    RandomStream r1(3), r2(3);
    for (int i = 0; i < 5; ++i) {
        PairBatch a = sample_pairs(corpus, 3, 2, r1);
        PairBatch b = sample_pairs(corpus, 3, 2, r2);
        for (std::size_t k = 0; k < a.anchors.size(); ++k) {
            CHECK(a.anchors[k].clip_id == b.anchors[k].clip_id);
            CHECK(a.positives[k].clip_id == b.positives[k].clip_id);
            for (std::size_t n = 0; n < a.negatives[k].size(); ++n) {
                CHECK(a.negatives[k][n].clip_id == b.negatives[k][n].clip_id);
            }
        }
    }

    // a cell with a single clip is a data error
    auto broken = corpus;
    const auto id0 = broken[0].identity;
    const auto emo0 = broken[0].emotion;
    std::vector<ClipRecord> pruned;
    bool kept_one = false;
    for (auto& clip : broken) {
        if (clip.identity == id0 && clip.emotion == emo0) {
            if (kept_one) continue;
            kept_one = true;
        }
        pruned.push_back(clip);
    }
    RandomStream rng(4);
    CHECK_THROWS_AS(sample_pairs(pruned, 2, 2, rng), DataError);
}

TEST_CASE("modality dropout: rates, exclusivity and the zero contract") {
    auto corpus = generate_corpus(small_config(), 11);
    RandomStream rng(5);

    // p = 0 leaves the batch untouched
    PairBatch batch = sample_pairs(corpus, 4, 2, rng);
    const auto before = corpus_hash(batch.anchors);
    modality_dropout(batch, 0.0, 0.0, rng);
    CHECK(corpus_hash(batch.anchors) == before);

    // both probabilities extreme: audio and visual never dropped together
    std::size_t audio_drops = 0;
    for (int i = 0; i < 10000; ++i) {
        ClipRecord clip = corpus[i % corpus.size()];
        modality_dropout(clip, 0.99, 0.99, rng);
        const bool both_dropped = clip.audio.dropped && clip.visual.dropped;
        CHECK_FALSE(both_dropped);
        if (clip.audio.dropped) {
            ++audio_drops;
            for (double v : clip.audio.frames.data()) CHECK(v == 0.0);
        }
    }
    CHECK(audio_drops > 9800);

    // Monte Carlo bound at p_audio = 0.5 (3 sigma ~ 0.015 over 10k)
    std::size_t drops = 0;
    for (int i = 0; i < 10000; ++i) {
        ClipRecord clip = corpus[i % corpus.size()];
        modality_dropout(clip, 0.5, 0.0, rng);
        if (clip.audio.dropped) ++drops;
    }
    const double rate = drops / 10000.0;
    CHECK(rate >= 0.47);
    CHECK(rate <= 0.53);

    CHECK_THROWS_AS(modality_dropout(batch, 1.0, 0.0, rng), ArgumentError);
}

TEST_CASE("condition dropout: disjoint 5% events") {
    RandomStream rng(6);
    std::size_t audio = 0, image = 0, emotion = 0, all = 0;
    const int draws = 100000;
    for (int i = 0; i < draws; ++i) {
        ConditionDropFlags flags = condition_dropout(rng);
        const bool all_set = flags.audio && flags.image && flags.emotion;
        if (all_set) {
            ++all;
        } else {
            CHECK((flags.audio + flags.image + flags.emotion) <= 1);  // events are disjoint
            if (flags.audio) ++audio;
            if (flags.image) ++image;
            if (flags.emotion) ++emotion;
        }
    }
    for (std::size_t count : {audio, image, emotion, all}) {
        const double rate = static_cast<double>(count) / draws;
        CHECK(rate >= 0.045);
        CHECK(rate <= 0.055);
    }
}

TEST_CASE("corpus export/import round trip") {
    namespace fs = std::filesystem;
    auto corpus = generate_corpus(small_config(), 13);
    const fs::path dir = fs::temp_directory_path() / "emodiff_corpus_test";
    fs::remove_all(dir);
    export_corpus(corpus, dir.string());
    auto loaded = import_corpus(dir.string());
    REQUIRE(loaded.size() == corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        CHECK(loaded[i].clip_id == corpus[i].clip_id);
        CHECK(loaded[i].identity == corpus[i].identity);
        CHECK(loaded[i].emotion == corpus[i].emotion);
        CHECK(loaded[i].intensity == corpus[i].intensity);
        // payload is stored in f32
        for (std::size_t j = 0; j < corpus[i].latent_video.numel(); ++j) {
            CHECK(loaded[i].latent_video.data()[j] ==
                  doctest::Approx(corpus[i].latent_video.data()[j]).epsilon(1e-6));
        }
    }
    CHECK(corpus_hash(loaded) == corpus_hash(corpus));  // hash is f32-based
    fs::remove_all(dir);

    CHECK_THROWS_AS(import_corpus((dir / "missing").string()), DataError);
}

TEST_CASE("overlapping segments double the corpus and share labels") {
    CorpusConfig cfg = small_config();
    cfg.overlap_segments = true;
    auto corpus = generate_corpus(cfg, 17);
    CHECK(corpus.size() == 2u * 3 * 4 * 2 * 2);
    CHECK(corpus[0].identity == corpus[1].identity);
    CHECK(corpus[0].emotion == corpus[1].emotion);
}
