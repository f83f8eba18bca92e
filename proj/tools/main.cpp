// Command-line front end: corpus generation, the two training stages and
// the evaluation/report commands. All outputs are JSON or CSV files under
// --out and are byte-reproducible from (config, seed).

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "emodiff/config.hpp"
#include "emodiff/diffusion.hpp"
#include "emodiff/embedder.hpp"
#include "emodiff/errors.hpp"
#include "emodiff/eval.hpp"
#include "emodiff/serialize.hpp"
#include "emodiff/synthdata.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using namespace emodiff;

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

json metric_json(const std::string& name, const AppConfig& config, std::uint64_t seed) {
    json j;
    j["metric"] = name;
    j["seed"] = seed;
    j["config_hash"] = config.hash_hex();
    j["values"] = json::object();
    return j;
}

void write_json_file(const fs::path& path, const json& j) {
    fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path.string());
    os << j.dump(2) << "\n";
}

std::ofstream open_csv(const fs::path& path, const std::string& header) {
    fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path.string());
    os << header << "\n";
    return os;
}

// Re-derives the corpus dimensions a model needs from imported data.
CorpusConfig corpus_config_from(const std::vector<ClipRecord>& corpus) {
    CorpusConfig cfg;
    const ClipRecord& first = corpus.front();
    cfg.frames = static_cast<std::uint32_t>(first.visual.frame_count());
    cfg.feature_dim = static_cast<std::uint32_t>(first.visual.frames.dim(1));
    const Shape& ls = first.latent_video.shape();
    cfg.latent_frames = static_cast<std::uint32_t>(ls[0]);
    cfg.latent_channels = static_cast<std::uint32_t>(ls[1]);
    cfg.latent_height = static_cast<std::uint32_t>(ls[2]);
    cfg.latent_width = static_cast<std::uint32_t>(ls[3]);
    std::uint32_t max_id = 0, max_intensity = 0;
    for (const ClipRecord& clip : corpus) {
        max_id = std::max(max_id, clip.identity);
        max_intensity = std::max(max_intensity, clip.intensity);
    }
    cfg.identities = max_id + 1;
    cfg.intensities = max_intensity + 1;
    return cfg;
}

std::vector<ClipRecord> load_corpus_checked(const std::string& dir, const AppConfig& config) {
    std::vector<ClipRecord> corpus = import_corpus(dir);
    if (corpus.front().visual.frames.dim(1) != config.corpus.feature_dim) {
        throw DataError("corpus feature dim " + std::to_string(corpus.front().visual.frames.dim(1)) +
                        " does not match config corpus.feature_dim");
    }
    return corpus;
}

EmbedderModel load_embedder(const std::string& path, const AppConfig& config) {
    EmbedderModel model(config.embedder, /*init_seed=*/0);
    load_dceb(path, model.params());
    return model;
}

DiffusionModel load_diffusion(const std::string& path, const AppConfig& config,
                              const std::vector<ClipRecord>& corpus) {
    DiffusionModel model(config.diffusion, corpus_config_from(corpus), /*init_seed=*/0);
    model.load(path);
    return model;
}

ConditionEmbedding bank_condition(const DiffusionModel& model, const Tensor& s,
                                  const std::string& bank_mode) {
    return bank_mode == "retrieve" ? model.bank().attend_train(s) : model.bank().attend_infer(s);
}

int parse_emotion(const std::string& name) {
    for (int e = 0; e < 4; ++e) {
        if (name == kEmotionNames[e]) return e;
    }
    try {
        const int e = std::stoi(name);
        if (e >= 0 && e < 4) return e;
    } catch (const std::exception&) {
    }
    throw ArgumentError("unknown emotion '" + name + "'");
}

// ------------------------------------------------------------- subcommands

void run_gen_data(const AppConfig& config, std::uint64_t seed, const fs::path& out) {
    auto corpus = generate_corpus(config.corpus, seed);
    export_corpus(corpus, out.string());
    json j = metric_json("gen-data", config, seed);
    j["values"]["clips"] = corpus.size();
    char hash[20];
    std::snprintf(hash, sizeof(hash), "%016llx", static_cast<unsigned long long>(corpus_hash(corpus)));
    j["values"]["corpus_hash"] = hash;
    write_json_file(out / "gen_data.json", j);
}

void run_train_embedder(const AppConfig& config, std::uint64_t seed, const fs::path& out,
                        const std::string& data_dir) {
    auto corpus = load_corpus_checked(data_dir, config);
    EmbedderModel model(config.embedder, seed);
    TrainCurve curve = train_embedder(corpus, model, seed);
    save_dceb((out / "embedder.dceb").string(), model.params());

    auto csv = open_csv(out / "embedder_loss.csv", "step,loss");
    for (std::size_t i = 0; i < curve.losses.size(); ++i) csv << i << "," << fmt(curve.losses[i]) << "\n";

    json j = metric_json("train-embedder", config, seed);
    j["values"]["steps"] = curve.losses.size();
    j["values"]["initial_loss"] = curve.initial_loss;
    j["values"]["final_loss"] = curve.final_loss;
    write_json_file(out / "train_embedder.json", j);
}

void run_train_diffusion(const AppConfig& config, std::uint64_t seed, const fs::path& out,
                         const std::string& data_dir, const std::string& embedder_path) {
    auto corpus = load_corpus_checked(data_dir, config);
    EmbedderModel embedder = load_embedder(embedder_path, config);
    DiffusionModel model(config.diffusion, corpus_config_from(corpus), seed);
    DiffusionCurve curve = train_diffusion(corpus, embedder, model, seed);
    model.save((out / "diffusion.dcdf").string());

    auto csv = open_csv(out / "diffusion_loss.csv", "step,total,denoising,cls,vq");
    for (std::size_t i = 0; i < curve.total.size(); ++i) {
        csv << i << "," << fmt(curve.total[i]) << "," << fmt(curve.denoising[i]) << ","
            << fmt(curve.cls[i]) << "," << fmt(curve.vq[i]) << "\n";
    }

    auto tail_mean = [](const std::vector<double>& v) {
        const std::size_t k = std::min<std::size_t>(50, v.size());
        double s = 0.0;
        for (std::size_t i = v.size() - k; i < v.size(); ++i) s += v[i];
        return k ? s / static_cast<double>(k) : 0.0;
    };
    json j = metric_json("train-diffusion", config, seed);
    j["values"]["steps"] = curve.total.size();
    j["values"]["final_total"] = tail_mean(curve.total);
    j["values"]["final_denoising"] = tail_mean(curve.denoising);
    j["values"]["final_cls"] = tail_mean(curve.cls);
    j["values"]["final_vq"] = tail_mean(curve.vq);
    write_json_file(out / "train_diffusion.json", j);
}

void run_eval_cluster(const AppConfig& config, std::uint64_t seed, const fs::path& out,
                      const std::string& data_dir, const std::string& embedder_path) {
    auto corpus = load_corpus_checked(data_dir, config);
    EmbedderModel embedder = load_embedder(embedder_path, config);
    auto embeddings = corpus_embeddings(corpus, embedder, ModalityVariant::kBoth);

    json j = metric_json("eval-cluster", config, seed);
    j["values"]["d_cls"] = clustering_strength(embeddings);
    json per;
    for (const auto& [emotion, value] : clustering_strength_per_class(embeddings)) {
        per[kEmotionNames[emotion]] = value;
    }
    j["values"]["per_emotion"] = per;
    write_json_file(out / "cluster.json", j);

    const std::size_t ds = embeddings.front().values.size();
    std::string header = "clip_id,identity,emotion,intensity";
    for (std::size_t k = 0; k < ds; ++k) header += ",dim_" + std::to_string(k);
    auto csv = open_csv(out / "embeddings.csv", header);
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        csv << corpus[i].clip_id << "," << corpus[i].identity << "," << corpus[i].emotion << ","
            << corpus[i].intensity;
        for (double v : embeddings[i].values) csv << "," << fmt(v);
        csv << "\n";
    }
}

void run_eval_ablation(const AppConfig& config, std::uint64_t seed, const fs::path& out,
                       const std::string& data_dir, const std::string& embedder_path) {
    auto corpus = load_corpus_checked(data_dir, config);
    EmbedderModel embedder = load_embedder(embedder_path, config);
    AblationReport report = modality_ablation(corpus, embedder);

    json j = metric_json("eval-ablation", config, seed);
    for (const auto& [variant, per_class] : report.per_emotion) {
        json block;
        block["d_cls"] = report.global.at(variant);
        json per;
        for (const auto& [emotion, value] : per_class) per[kEmotionNames[emotion]] = value;
        block["per_emotion"] = per;
        j["values"][variant] = block;
    }
    j["values"]["ordering_holds"] = report.ordering_holds;
    write_json_file(out / "ablation.json", j);
}

void run_project(const AppConfig& config, std::uint64_t seed, const fs::path& out,
                 const std::string& data_dir, const std::string& embedder_path) {
    auto corpus = load_corpus_checked(data_dir, config);
    EmbedderModel embedder = load_embedder(embedder_path, config);
    auto labeled = corpus_embeddings(corpus, embedder, ModalityVariant::kBoth);
    std::vector<std::vector<double>> vectors;
    vectors.reserve(labeled.size());
    for (auto& e : labeled) vectors.push_back(e.values);
    Projection2D projection = project_2d(vectors);

    auto csv = open_csv(out / "projection.csv", "clip_id,identity,emotion,intensity,x,y");
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        csv << corpus[i].clip_id << "," << corpus[i].identity << "," << corpus[i].emotion << ","
            << corpus[i].intensity << "," << fmt(projection.coords[i][0]) << ","
            << fmt(projection.coords[i][1]) << "\n";
    }
    json j = metric_json("project", config, seed);
    j["values"]["variance_explained"] = projection.variance_explained;
    j["values"]["degenerate"] = projection.degenerate;
    write_json_file(out / "projection.json", j);
}

void run_interp(const AppConfig& config, std::uint64_t seed, const fs::path& out,
                const std::string& data_dir, const std::string& embedder_path,
                const std::string& diffusion_path, std::uint32_t clip_a, std::uint32_t clip_b,
                std::size_t steps) {
    auto corpus = load_corpus_checked(data_dir, config);
    EmbedderModel embedder = load_embedder(embedder_path, config);
    DiffusionModel model = load_diffusion(diffusion_path, config, corpus);
    if (clip_a >= corpus.size() || clip_b >= corpus.size()) {
        throw DataError("interp: clip index out of range");
    }

    NoGradGuard no_grad;
    RandomStream base(seed);
    RandomStream prior_rng = base.fork("interp/priors");
    EmotionPrior pa = embedder.embed(corpus[clip_a], prior_rng);
    EmotionPrior pb = embedder.embed(corpus[clip_b], prior_rng);
    std::vector<Tensor> points = interpolate(pa, pb, steps);

    auto csv = open_csv(out / "interp.csv", "alpha,p_neutral,p_happy,p_surprised,p_angry,argmax");
    const ClipRecord& ref = corpus[clip_a];
    for (std::size_t i = 0; i < points.size(); ++i) {
        ConditionSet cond;
        cond.audio_seq = model.project_audio(ref.audio.frames);
        cond.identity_embed = select_row(model.params().get("den.id_embed").value, ref.identity);
        cond.emotion = bank_condition(model, points[i], config.bank_mode);
        RandomStream noise = base.fork("interp/noise");  // same start noise per interpolant
        Tensor final_latent = model.sample(cond, noise).back();
        Tensor probs = model.score_latent(final_latent);
        const auto& p = probs.data();
        const std::size_t argmax =
            static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
        const double alpha = static_cast<double>(i) / static_cast<double>(points.size() - 1);
        csv << fmt(alpha);
        for (double v : p) csv << "," << fmt(v);
        csv << "," << argmax << "\n";
    }

    json j = metric_json("interp", config, seed);
    j["values"]["clip_a"] = clip_a;
    j["values"]["clip_b"] = clip_b;
    j["values"]["emotion_a"] = kEmotionNames[corpus[clip_a].emotion];
    j["values"]["emotion_b"] = kEmotionNames[corpus[clip_b].emotion];
    j["values"]["steps"] = steps;
    write_json_file(out / "interp.json", j);
}

void run_sample(const AppConfig& config, std::uint64_t seed, const fs::path& out,
                const std::string& data_dir, const std::string& diffusion_path,
                const std::string& emotion_arg, std::size_t count, bool swap) {
    auto corpus = load_corpus_checked(data_dir, config);
    DiffusionModel model = load_diffusion(diffusion_path, config, corpus);
    if (count == 0) throw ArgumentError("sample: count must be positive");

    std::vector<int> targets;
    if (emotion_arg == "all") {
        targets = {0, 1, 2, 3};
    } else {
        targets = {parse_emotion(emotion_arg)};
    }

    NoGradGuard no_grad;
    RandomStream base(seed);
    std::vector<std::pair<Tensor, std::uint32_t>> scored;
    std::vector<double> per_class_correct(4, 0.0), per_class_total(4, 0.0);

    auto csv = open_csv(out / "samples.csv", "sample_id,target,predicted,p_target,correct");
    std::size_t sample_id = 0;
    for (int target : targets) {
        Tensor prompt = select_row(model.emotion_prompts(), static_cast<std::size_t>(target));
        for (std::size_t k = 0; k < count; ++k, ++sample_id) {
            const ClipRecord& ref = corpus[sample_id % corpus.size()];
            ConditionSet cond;
            cond.audio_seq = model.project_audio(ref.audio.frames);
            cond.identity_embed = select_row(model.params().get("den.id_embed").value, ref.identity);
            cond.emotion = bank_condition(model, prompt, config.bank_mode);
            RandomStream noise = base.fork("sample/" + std::to_string(sample_id));
            Tensor final_latent = model.sample(cond, noise).back();
            scored.emplace_back(final_latent, static_cast<std::uint32_t>(target));

            Tensor probs = model.score_latent(final_latent);
            const auto& p = probs.data();
            const std::size_t argmax =
                static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
            const bool correct = argmax == static_cast<std::size_t>(target);
            per_class_total[static_cast<std::size_t>(target)] += 1.0;
            if (correct) per_class_correct[static_cast<std::size_t>(target)] += 1.0;
            csv << sample_id << "," << kEmotionNames[target] << "," << kEmotionNames[argmax] << ","
                << fmt(p[static_cast<std::size_t>(target)]) << "," << (correct ? 1 : 0) << "\n";
        }
    }

    json j = metric_json("sample", config, seed);
    j["values"]["count"] = scored.size();
    j["values"]["accuracy"] = emo_accuracy(scored, model);
    json per;
    for (int e : targets) {
        const auto idx = static_cast<std::size_t>(e);
        per[kEmotionNames[e]] =
            per_class_total[idx] > 0.0 ? per_class_correct[idx] / per_class_total[idx] : 0.0;
    }
    j["values"]["per_emotion"] = per;

    if (swap) {
        std::size_t changed = 0;
        const std::size_t pairs = std::max<std::size_t>(1, scored.size() / 2);
        for (std::size_t pair = 0; pair < pairs; ++pair) {
            const ClipRecord& ref = corpus[pair % corpus.size()];
            const int e1 = static_cast<int>(pair % 4);
            const int e2 = (e1 + 1 + static_cast<int>(pair % 3)) % 4;
            std::size_t preds[2];
            const int pair_targets[2] = {e1, e2};
            for (int side = 0; side < 2; ++side) {
                ConditionSet cond;
                cond.audio_seq = model.project_audio(ref.audio.frames);
                cond.identity_embed = select_row(model.params().get("den.id_embed").value, ref.identity);
                Tensor prompt =
                    select_row(model.emotion_prompts(), static_cast<std::size_t>(pair_targets[side]));
                cond.emotion = bank_condition(model, prompt, config.bank_mode);
                // identical start noise on both sides of the swap
                RandomStream noise = base.fork("swap/" + std::to_string(pair));
                Tensor final_latent = model.sample(cond, noise).back();
                const Tensor probs = model.score_latent(final_latent);
                const auto& p = probs.data();
                preds[side] =
                    static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
            }
            if (preds[0] != preds[1]) ++changed;
        }
        j["values"]["swap_pairs"] = pairs;
        j["values"]["swap_change_rate"] = static_cast<double>(changed) / static_cast<double>(pairs);
    }
    write_json_file(out / "sample.json", j);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Emotion-conditioned toy latent diffusion: synthetic corpus, disentangled "
                 "emotion embedder, emotion-bank conditioning and evaluation tools"};
    app.require_subcommand(1);
    app.footer("Config keys (key=value file, '#' comments, unknown keys are errors):\n" +
               emodiff::AppConfig::describe_keys() +
               "\nCSV column orders:\n"
               "  embedder_loss.csv   step,loss\n"
               "  diffusion_loss.csv  step,total,denoising,cls,vq\n"
               "  embeddings.csv      clip_id,identity,emotion,intensity,dim_0..dim_{d_s-1}\n"
               "  projection.csv      clip_id,identity,emotion,intensity,x,y\n"
               "  interp.csv          alpha,p_neutral,p_happy,p_surprised,p_angry,argmax\n"
               "  samples.csv         sample_id,target,predicted,p_target,correct\n"
               "\nExit codes: 0 success, 1 usage error, 2 data error, 3 training divergence.");

    std::string config_path;
    std::uint64_t seed = 0;
    std::string out_dir = "out";
    app.add_option("--config", config_path, "key=value config file");
    app.add_option("--seed", seed, "random seed (default 0)");
    app.add_option("--out", out_dir, "output directory (default ./out)");

    std::string data_dir, embedder_path, diffusion_path, emotion = "all";
    std::uint32_t clip_a = 0, clip_b = 0;
    std::size_t steps = 9, count = 16;
    bool swap = false;

    CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic corpus into --out");
    CLI::App* te = app.add_subcommand("train-embedder", "train the disentangled emotion embedder");
    te->add_option("--data", data_dir, "corpus directory")->required();
    CLI::App* td = app.add_subcommand("train-diffusion", "train the conditional denoiser + bank");
    td->add_option("--data", data_dir, "corpus directory")->required();
    td->add_option("--embedder", embedder_path, "embedder checkpoint (.dceb)")->required();
    CLI::App* ec = app.add_subcommand("eval-cluster", "clustering strength of emotion priors");
    ec->add_option("--data", data_dir, "corpus directory")->required();
    ec->add_option("--embedder", embedder_path, "embedder checkpoint (.dceb)")->required();
    CLI::App* ea = app.add_subcommand("eval-ablation", "per-modality clustering comparison");
    ea->add_option("--data", data_dir, "corpus directory")->required();
    ea->add_option("--embedder", embedder_path, "embedder checkpoint (.dceb)")->required();
    CLI::App* in = app.add_subcommand("interp", "interpolate two priors through the sampler");
    in->add_option("--data", data_dir, "corpus directory")->required();
    in->add_option("--embedder", embedder_path, "embedder checkpoint (.dceb)")->required();
    in->add_option("--diffusion", diffusion_path, "diffusion checkpoint (.dcdf)")->required();
    in->add_option("--clip-a", clip_a, "first clip index")->required();
    in->add_option("--clip-b", clip_b, "second clip index")->required();
    in->add_option("--steps", steps, "interpolation points (default 9)");
    CLI::App* sa = app.add_subcommand("sample", "sample latents with target emotions and score them");
    sa->add_option("--data", data_dir, "corpus directory")->required();
    sa->add_option("--diffusion", diffusion_path, "diffusion checkpoint (.dcdf)")->required();
    sa->add_option("--emotion", emotion, "target emotion name, index or 'all'");
    sa->add_option("--count", count, "samples per emotion (default 16)");
    sa->add_flag("--swap", swap, "also run the emotion-swap pairing test");
    CLI::App* pr = app.add_subcommand("project", "2D principal-component projection of priors");
    pr->add_option("--data", data_dir, "corpus directory")->required();
    pr->add_option("--embedder", embedder_path, "embedder checkpoint (.dceb)")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        emodiff::AppConfig config;
        if (!config_path.empty()) {
            config = emodiff::AppConfig::from_file(config_path);
        } else {
            config.validate();
        }
        const fs::path out(out_dir);

        if (gen->parsed()) run_gen_data(config, seed, out);
        if (te->parsed()) run_train_embedder(config, seed, out, data_dir);
        if (td->parsed()) run_train_diffusion(config, seed, out, data_dir, embedder_path);
        if (ec->parsed()) run_eval_cluster(config, seed, out, data_dir, embedder_path);
        if (ea->parsed()) run_eval_ablation(config, seed, out, data_dir, embedder_path);
        if (in->parsed()) run_interp(config, seed, out, data_dir, embedder_path, diffusion_path, clip_a,
                                     clip_b, steps);
        if (sa->parsed()) run_sample(config, seed, out, data_dir, diffusion_path, emotion, count, swap);
        if (pr->parsed()) run_project(config, seed, out, data_dir, embedder_path);
        return 0;
    } catch (const emodiff::TrainingError& e) {
        std::cerr << "training error: " << e.what() << "\n";
        return 3;
    } catch (const emodiff::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const emodiff::ArgumentError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const emodiff::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const emodiff::IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
