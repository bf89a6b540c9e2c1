#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "utka/common.hpp"

namespace utka::seqgrammar {

enum class Mode { SR, TSE, rTSE, VC, LASS };

std::string mode_name(Mode m);
Mode mode_from_name(const std::string& s);

enum class GridKind { acoustic, semantic, interleaved, delayed };

// steps x 4 token grid; every stream carries exactly 4 quantizer layers.
struct TokenGrid {
    static constexpr int kLayers = 4;

    int steps = 0;
    double rate = 0.0;  // rows per second
    GridKind kind = GridKind::acoustic;
    std::vector<int32_t> cells;  // steps * 4, row-major

    TokenGrid() = default;
    TokenGrid(int steps_, double rate_, GridKind kind_)
        : steps(steps_), rate(rate_), kind(kind_),
          cells(static_cast<size_t>(steps_) * kLayers, 0) {}

    int32_t& at(int t, int layer) { return cells[static_cast<size_t>(t) * kLayers + layer]; }
    int32_t at(int t, int layer) const {
        return cells[static_cast<size_t>(t) * kLayers + layer];
    }
};

// Id layout shared by the token heads and the conditioning prefix. Codec
// indices occupy [0, codebook_size); specials follow. Only PAD and END can
// be emitted by a head, so head_vocab = codebook_size + 2; the task and
// start ids index the learned special-embedding table.
struct Vocabulary {
    int codebook_size = 0;
    int pad = 0, end = 0;
    int t_sr = 0, t_tse = 0, t_rtse = 0, t_vc = 0, t_lass = 0;
    int i_start = 0, r_start = 0, c_start = 0, s_sep = 0;

    static Vocabulary make(int codebook_size);

    int head_vocab() const { return codebook_size + 2; }
    int task(Mode m) const;
    // row in the special-embedding table for a given special id
    int special_row(int id) const;
    static constexpr int kSpecialCount = 11;
};

struct CondElement {
    enum class Kind { special, block };
    enum class Source { none, input, reference, caption };
    Kind kind = Kind::special;
    int id = -1;          // special id, when kind == special
    Source source = Source::none;
    int length = 0;       // embedding rows, when kind == block

    bool operator==(const CondElement&) const = default;
};

struct ConditioningSequence {
    Mode mode = Mode::SR;
    std::vector<CondElement> elements;

    int total_length() const;

    bool operator==(const ConditioningSequence&) const = default;
};

struct BlockLengths {
    std::optional<int> input;
    std::optional<int> reference;
    std::optional<int> caption;
};

TokenGrid interleave(const TokenGrid& acoustic, const TokenGrid& semantic);
std::pair<TokenGrid, TokenGrid> deinterleave(const TokenGrid& grid);

TokenGrid apply_delay(const TokenGrid& grid, int pad_id);

struct RemoveDelayResult {
    TokenGrid grid;
    bool degenerate = false;  // all-PAD interior collapsed to an empty grid
};
RemoveDelayResult remove_delay(const TokenGrid& grid, int pad_id);

ConditioningSequence build_conditioning(Mode mode, const BlockLengths& lengths,
                                        const Vocabulary& vocab);

// Teacher-forcing supervision for a delayed grid: per-layer label streams
// are the delayed columns with END appended on every layer; PAD cells are
// masked out of the loss.
struct TargetLayout {
    std::vector<std::array<int32_t, 4>> labels;
    std::vector<std::array<uint8_t, 4>> mask;  // 1 = scored
};
TargetLayout target_sequence(const TokenGrid& delayed, const Vocabulary& vocab);

}  // namespace utka::seqgrammar
