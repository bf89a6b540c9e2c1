#pragma once

#include <string>

#include "utka/codec.hpp"
#include "utka/common.hpp"
#include "utka/lm.hpp"
#include "utka/pipeline.hpp"
#include "utka/simulate.hpp"

namespace utka::config {

// One file describes a whole run: model shapes, training driver constants,
// data source, and seeds. Every field has a default; the JSON schema is
// strict, so a misspelled key fails loudly instead of silently reverting to
// the default.
struct RunConfig {
    codec::CodecConfig codec;
    std::string lm_preset = "toy";  // toy | S | base | L
    int lm_max_seq = 4096;
    pipeline::DriverConfig driver;
    std::string manifest;  // pool manifest path; empty selects synthetic pools
    simulate::PoolSpec synthetic;
    uint64_t pools_seed = 1;
    uint64_t codec_init_seed = 1;
    uint64_t lm_init_seed = 2;
    std::string out_dir = ".";

    // preset materialized against the codec's codebook and feature widths
    lm::LMConfig lm_config() const;
    void validate() const;
};

// Strict parse: unknown keys anywhere in the tree raise ConfigError with the
// offending path. Absent keys keep their defaults.
RunConfig from_json(const std::string& text);

// Canonical full serialization; from_json(to_json(c)) round-trips exactly.
std::string to_json(const RunConfig& cfg);

RunConfig load_file(const std::string& path);

}  // namespace utka::config
