#include "emodiff/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "emodiff/errors.hpp"
#include "emodiff/rng.hpp"

namespace emodiff {

namespace {

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r\n");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r\n");
    return s.substr(begin, end - begin + 1);
}

std::uint64_t parse_uint(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        if (!value.empty() && value[0] == '-') throw std::invalid_argument("negative");
        const std::uint64_t v = std::stoull(value, &pos);
        if (pos != value.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' expects an unsigned integer, got '" + value + "'");
    }
}

double parse_double(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' expects a number, got '" + value + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError("config: key '" + key + "' expects true/false, got '" + value + "'");
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

#define UINT_KEY(field)                                                                       \
    {                                                                                         \
        [](AppConfig& c, const std::string& k, const std::string& v) {                        \
            c.field = static_cast<decltype(c.field)>(parse_uint(k, v));                       \
        },                                                                                    \
        [](const AppConfig& c) { return std::to_string(c.field); }                            \
    }
#define DOUBLE_KEY(field)                                                                     \
    {                                                                                         \
        [](AppConfig& c, const std::string& k, const std::string& v) {                        \
            c.field = parse_double(k, v);                                                     \
        },                                                                                    \
        [](const AppConfig& c) { return fmt_double(c.field); }                                \
    }
#define BOOL_KEY(field)                                                                       \
    {                                                                                         \
        [](AppConfig& c, const std::string& k, const std::string& v) {                        \
            c.field = parse_bool(k, v);                                                       \
        },                                                                                    \
        [](const AppConfig& c) { return c.field ? std::string("true") : std::string("false"); } \
    }
#define STRING_KEY(field)                                                                     \
    {                                                                                         \
        [](AppConfig& c, const std::string&, const std::string& v) { c.field = v; },          \
        [](const AppConfig& c) { return c.field; }                                            \
    }

struct KeyPair {
    std::function<void(AppConfig&, const std::string&, const std::string&)> set;
    std::function<std::string(const AppConfig&)> get;
};

const std::map<std::string, std::pair<const char*, KeyPair>>& key_table() {
    static const std::map<std::string, std::pair<const char*, KeyPair>> table = {
        {"corpus.identities", {"number of synthetic identities", UINT_KEY(corpus.identities)}},
        {"corpus.emotions", {"number of emotion classes (fixed at 4)", UINT_KEY(corpus.emotions)}},
        {"corpus.intensities", {"intensity levels per emotion (1..3)", UINT_KEY(corpus.intensities)}},
        {"corpus.clips_per_cell", {"clips per (identity, emotion, intensity) cell", UINT_KEY(corpus.clips_per_cell)}},
        {"corpus.frames", {"frames per clip", UINT_KEY(corpus.frames)}},
        {"corpus.feature_dim", {"raw feature dimension d_raw", UINT_KEY(corpus.feature_dim)}},
        {"corpus.visual_snr", {"visual emotion signal-to-noise ratio", DOUBLE_KEY(corpus.visual_snr)}},
        {"corpus.audio_snr", {"audio emotion signal-to-noise ratio (< visual)", DOUBLE_KEY(corpus.audio_snr)}},
        {"corpus.latent_frames", {"latent video frames F", UINT_KEY(corpus.latent_frames)}},
        {"corpus.latent_channels", {"latent channels C", UINT_KEY(corpus.latent_channels)}},
        {"corpus.latent_height", {"latent height H", UINT_KEY(corpus.latent_height)}},
        {"corpus.latent_width", {"latent width W", UINT_KEY(corpus.latent_width)}},
        {"corpus.overlap_segments", {"emit two overlapping segments per clip slot", BOOL_KEY(corpus.overlap_segments)}},
        {"embedder.dim", {"emotion embedding dimension d_s", UINT_KEY(embedder.embed_dim)}},
        {"embedder.audio_layers", {"transformer layers on the audio path", UINT_KEY(embedder.audio_layers)}},
        {"embedder.fusion_layers", {"cross-modal fusion layers", UINT_KEY(embedder.fusion_layers)}},
        {"embedder.tau", {"InfoNCE temperature", DOUBLE_KEY(embedder.tau)}},
        {"embedder.lambda_fuse_init", {"initial fusion residual scale", DOUBLE_KEY(embedder.lambda_fuse_init)}},
        {"embedder.deterministic_mu", {"use mu instead of sampling (ablation)", BOOL_KEY(embedder.deterministic_mu)}},
        {"embedder.steps", {"embedder training steps", UINT_KEY(embedder.steps)}},
        {"embedder.batch", {"anchors per training step", UINT_KEY(embedder.batch_size)}},
        {"embedder.negatives", {"negatives per anchor", UINT_KEY(embedder.negatives_per_anchor)}},
        {"embedder.lr", {"embedder Adam learning rate", DOUBLE_KEY(embedder.lr)}},
        {"embedder.p_drop_audio", {"modality dropout probability (audio)", DOUBLE_KEY(embedder.p_drop_audio)}},
        {"embedder.p_drop_visual", {"modality dropout probability (visual)", DOUBLE_KEY(embedder.p_drop_visual)}},
        {"diffusion.model_dim", {"denoiser width d_model", UINT_KEY(diffusion.model_dim)}},
        {"diffusion.bank_codes", {"emotion bank size K", UINT_KEY(diffusion.bank_codes)}},
        {"diffusion.pool_dim", {"discriminator pooled width", UINT_KEY(diffusion.pool_dim)}},
        {"diffusion.disc_hidden", {"discriminator hidden width", UINT_KEY(diffusion.disc_hidden)}},
        {"diffusion.T", {"training discretization steps", UINT_KEY(diffusion.T)}},
        {"diffusion.sampler_steps", {"reverse-pass steps", UINT_KEY(diffusion.sampler_steps)}},
        {"diffusion.schedule_power", {"schedule cosine power", DOUBLE_KEY(diffusion.schedule_power)}},
        {"diffusion.schedule_a_end", {"signal coefficient at t=T", DOUBLE_KEY(diffusion.schedule_a_end)}},
        {"diffusion.lambda_cls", {"emotion discrimination loss weight", DOUBLE_KEY(diffusion.lambda_cls)}},
        {"diffusion.beta_commit", {"VQ commitment weight beta", DOUBLE_KEY(diffusion.beta_commit)}},
        {"diffusion.guidance_scale", {"classifier-free guidance scale (1 = off)", DOUBLE_KEY(diffusion.guidance_scale)}},
        {"diffusion.steps", {"diffusion training steps", UINT_KEY(diffusion.steps)}},
        {"diffusion.batch", {"clips per training step", UINT_KEY(diffusion.batch_size)}},
        {"diffusion.lr", {"diffusion Adam learning rate", DOUBLE_KEY(diffusion.lr)}},
        {"diffusion.dead_code_steps", {"re-seed bank codes unused this long", UINT_KEY(diffusion.dead_code_steps)}},
        {"diffusion.dead_code_policy", {"dead code re-seed target: uncovered | random", STRING_KEY(diffusion.dead_code_policy)}},
        {"sample.bank_mode", {"sampling-time bank attention: full | retrieve", STRING_KEY(bank_mode)}},
    };
    return table;
}

#undef UINT_KEY
#undef DOUBLE_KEY
#undef BOOL_KEY
#undef STRING_KEY

}  // namespace

void AppConfig::set(const std::string& key, const std::string& value) {
    const auto& table = key_table();
    auto it = table.find(key);
    if (it == table.end()) throw ConfigError("config: unknown key '" + key + "'");
    it->second.second.set(*this, key, value);
}

std::string AppConfig::canonical() const {
    std::ostringstream os;
    for (const auto& [key, entry] : key_table()) {
        os << key << "=" << entry.second.get(*this) << "\n";
    }
    return os.str();
}

std::string AppConfig::hash_hex() const {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(canonical())));
    return buf;
}

void AppConfig::validate() const {
    corpus.validate();
    embedder.validate();
    diffusion.validate();
    if (bank_mode != "full" && bank_mode != "retrieve") {
        throw ConfigError("config: sample.bank_mode must be 'full' or 'retrieve'");
    }
    if (embedder.raw_dim != corpus.feature_dim) {
        throw ConfigError("config: embedder raw dim out of sync with corpus.feature_dim");
    }
    if (diffusion.num_emotions != corpus.emotions) {
        throw ConfigError("config: diffusion num_emotions out of sync with corpus.emotions");
    }
}

AppConfig AppConfig::from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open '" + path + "'");
    AppConfig config;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::string stripped = trim(line);
        if (stripped.empty() || stripped[0] == '#') continue;
        const auto eq = stripped.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config: line " + std::to_string(lineno) + " is not key=value");
        }
        config.set(trim(stripped.substr(0, eq)), trim(stripped.substr(eq + 1)));
    }
    config.embedder.raw_dim = config.corpus.feature_dim;
    config.diffusion.num_emotions = config.corpus.emotions;
    config.validate();
    return config;
}

std::string AppConfig::describe_keys() {
    AppConfig defaults;
    std::ostringstream os;
    for (const auto& [key, entry] : key_table()) {
        os << key << " (default " << entry.second.get(defaults) << "): " << entry.first << "\n";
    }
    return os.str();
}

}  // namespace emodiff
