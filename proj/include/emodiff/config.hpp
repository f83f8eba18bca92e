#pragma once

#include <cstdint>
#include <string>

#include "emodiff/diffusion.hpp"
#include "emodiff/embedder.hpp"
#include "emodiff/synthdata.hpp"

namespace emodiff {

// Full run configuration. Backed by a key=value text file ('#' comments);
// unknown keys are errors. Defaults are the documented baseline.
struct AppConfig {
    CorpusConfig corpus;
    EmbedderConfig embedder;
    DiffusionConfig diffusion;
    std::string bank_mode = "full";  // sampling-time bank attention: full | retrieve

    // Applies one key=value assignment; throws ConfigError on unknown keys
    // or malformed values.
    void set(const std::string& key, const std::string& value);

    // Canonical sorted key=value rendering (also the hash input).
    std::string canonical() const;
    std::string hash_hex() const;

    void validate() const;

    static AppConfig from_file(const std::string& path);
    // One "key<TAB>default<TAB>doc" line per known key.
    static std::string describe_keys();
};

}  // namespace emodiff
