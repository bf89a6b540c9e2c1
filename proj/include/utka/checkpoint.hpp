#pragma once

#include <optional>
#include <string>
#include <vector>

#include "utka/codec.hpp"
#include "utka/common.hpp"
#include "utka/lm.hpp"
#include "utka/pipeline.hpp"
#include "utka/seqgrammar.hpp"

namespace utka::checkpoint {

// ---- token files ----
// Little-endian container: magic "UTKA", version u16, stream count u16,
// then per stream: kind u8, rate f64, steps u32, and four layer-major runs
// of u16 indices. Indices are bounded by the largest codebook plus the
// special ids; semantic validity against a particular codec is checked at
// decode time.
constexpr uint16_t kTokenVersion = 1;
constexpr int kMaxTokenIndex = 1024 + seqgrammar::Vocabulary::kSpecialCount - 1;

void write_tokens(const std::string& path, const std::vector<seqgrammar::TokenGrid>& streams);
std::vector<seqgrammar::TokenGrid> read_tokens(const std::string& path);

// ---- checkpoints ----
// Magic "UTKC", version u16, section count u16, then named sections, each
// length-prefixed and carrying a 64-bit content checksum that must verify on
// load. Partial checkpoints are legal: codec-only, lm-only, or any other
// subset. Section names: "config" (run configuration echo), "codec" (dense
// parameters), "codebooks" (quantizer stacks with their ema state), "lm",
// "optimizer" (both phases' moments and step counters). "codec" and
// "codebooks" travel together; one without the other is rejected.
constexpr uint16_t kCheckpointVersion = 1;

struct Checkpoint {
    std::string config_echo;  // empty when the section is absent
    std::optional<codec::CodecParams> codec;
    std::optional<lm::LMParams> lm;
    std::optional<pipeline::DriverState> driver;
};

void save(const std::string& path, const Checkpoint& ck);
Checkpoint load(const std::string& path);

}  // namespace utka::checkpoint
