#include "utka/seqgrammar.hpp"

namespace utka::seqgrammar {

std::string mode_name(Mode m) {
    switch (m) {
        case Mode::SR: return "sr";
        case Mode::TSE: return "tse";
        case Mode::rTSE: return "rtse";
        case Mode::VC: return "vc";
        case Mode::LASS: return "lass";
    }
    throw InputError("unknown mode value");
}

Mode mode_from_name(const std::string& s) {
    if (s == "sr") return Mode::SR;
    if (s == "tse") return Mode::TSE;
    if (s == "rtse") return Mode::rTSE;
    if (s == "vc") return Mode::VC;
    if (s == "lass") return Mode::LASS;
    throw ConfigError("unknown mode name: " + s + " (expected sr|tse|rtse|vc|lass)");
}

Vocabulary Vocabulary::make(int codebook_size) {
    if (codebook_size <= 0) throw ConfigError("vocabulary needs a positive codebook size");
    Vocabulary v;
    v.codebook_size = codebook_size;
    int next = codebook_size;
    v.pad = next++;
    v.end = next++;
    v.t_sr = next++;
    v.t_tse = next++;
    v.t_rtse = next++;
    v.t_vc = next++;
    v.t_lass = next++;
    v.i_start = next++;
    v.r_start = next++;
    v.c_start = next++;
    v.s_sep = next++;
    return v;
}

int Vocabulary::task(Mode m) const {
    switch (m) {
        case Mode::SR: return t_sr;
        case Mode::TSE: return t_tse;
        case Mode::rTSE: return t_rtse;
        case Mode::VC: return t_vc;
        case Mode::LASS: return t_lass;
    }
    throw InputError("unknown mode value");
}

int Vocabulary::special_row(int id) const {
    int row = id - codebook_size;
    if (row < 0 || row >= kSpecialCount)
        throw InputError("id is not a special token");
    return row;
}

static void require_kind(const TokenGrid& g, GridKind k, const char* what) {
    if (g.kind != k) throw InputError(std::string("grid passed to ") + what +
                                      " has the wrong kind");
}

TokenGrid interleave(const TokenGrid& acoustic, const TokenGrid& semantic) {
    require_kind(acoustic, GridKind::acoustic, "interleave (first arg)");
    require_kind(semantic, GridKind::semantic, "interleave (second arg)");
    if (acoustic.steps != semantic.steps)
        throw LengthError("acoustic/semantic step counts differ");
    TokenGrid out(acoustic.steps * 2, acoustic.rate * 2.0, GridKind::interleaved);
    for (int t = 0; t < acoustic.steps; ++t)
        for (int l = 0; l < TokenGrid::kLayers; ++l) {
            out.at(2 * t, l) = acoustic.at(t, l);
            out.at(2 * t + 1, l) = semantic.at(t, l);
        }
    return out;
}

std::pair<TokenGrid, TokenGrid> deinterleave(const TokenGrid& grid) {
    require_kind(grid, GridKind::interleaved, "deinterleave");
    if (grid.steps % 2 != 0) throw LengthError("interleaved grid has odd row count");
    int T = grid.steps / 2;
    TokenGrid a(T, grid.rate / 2.0, GridKind::acoustic);
    TokenGrid s(T, grid.rate / 2.0, GridKind::semantic);
    for (int t = 0; t < T; ++t)
        for (int l = 0; l < TokenGrid::kLayers; ++l) {
            a.at(t, l) = grid.at(2 * t, l);
            s.at(t, l) = grid.at(2 * t + 1, l);
        }
    return {a, s};
}

TokenGrid apply_delay(const TokenGrid& grid, int pad_id) {
    if (grid.kind == GridKind::delayed) throw InputError("grid is already delayed");
    require_kind(grid, GridKind::interleaved, "apply_delay");
    int T = grid.steps;
    TokenGrid out(T + 3, grid.rate, GridKind::delayed);
    for (int t = 0; t < T + 3; ++t)
        for (int l = 0; l < TokenGrid::kLayers; ++l) {
            int src = t - l;
            out.at(t, l) = (src >= 0 && src < T) ? grid.at(src, l) : pad_id;
        }
    return out;
}

RemoveDelayResult remove_delay(const TokenGrid& grid, int pad_id) {
    require_kind(grid, GridKind::delayed, "remove_delay");
    if (grid.steps < 4) throw LengthError("delayed grid must have at least 4 rows");
    int T = grid.steps - 3;

    bool all_pad = true;
    for (int t = 0; t < T && all_pad; ++t)
        for (int l = 0; l < TokenGrid::kLayers; ++l)
            if (grid.at(t + l, l) != pad_id) {
                all_pad = false;
                break;
            }
    if (all_pad) {
        RemoveDelayResult r;
        r.grid = TokenGrid(0, grid.rate, GridKind::interleaved);
        r.degenerate = true;
        return r;
    }

    RemoveDelayResult r;
    r.grid = TokenGrid(T, grid.rate, GridKind::interleaved);
    for (int t = 0; t < T; ++t)
        for (int l = 0; l < TokenGrid::kLayers; ++l) {
            int32_t v = grid.at(t + l, l);
            if (v == pad_id)
                throw InputError("malformed delayed grid: PAD in interior cell");
            r.grid.at(t, l) = v;
        }
    return r;
}

int ConditioningSequence::total_length() const {
    int n = 0;
    for (const auto& e : elements) n += e.kind == CondElement::Kind::special ? 1 : e.length;
    return n;
}

static CondElement special(int id) {
    CondElement e;
    e.kind = CondElement::Kind::special;
    e.id = id;
    return e;
}

static CondElement block(CondElement::Source src, int len) {
    CondElement e;
    e.kind = CondElement::Kind::block;
    e.source = src;
    e.length = len;
    return e;
}

static int need(const std::optional<int>& len, const char* what) {
    if (!len.has_value())
        throw TemplateError(std::string("mode requires a ") + what + " block");
    if (*len <= 0)
        throw TemplateError(std::string(what) + " block is empty");
    return *len;
}

ConditioningSequence build_conditioning(Mode mode, const BlockLengths& lengths,
                                        const Vocabulary& v) {
    ConditioningSequence cs;
    cs.mode = mode;
    int in_len = need(lengths.input, "input");
    switch (mode) {
        case Mode::SR:
            cs.elements = {special(v.t_sr), special(v.i_start),
                           block(CondElement::Source::input, in_len), special(v.s_sep)};
            break;
        case Mode::TSE:
        case Mode::rTSE:
        case Mode::VC: {
            int ref_len = need(lengths.reference, "reference");
            int task = mode == Mode::TSE ? v.t_tse : (mode == Mode::rTSE ? v.t_rtse : v.t_vc);
            cs.elements = {special(task),
                           special(v.r_start),
                           block(CondElement::Source::reference, ref_len),
                           special(v.i_start),
                           block(CondElement::Source::input, in_len),
                           special(v.s_sep)};
            break;
        }
        case Mode::LASS: {
            int cap_len = need(lengths.caption, "caption");
            cs.elements = {special(v.t_lass),
                           special(v.c_start),
                           block(CondElement::Source::caption, cap_len),
                           special(v.i_start),
                           block(CondElement::Source::input, in_len),
                           special(v.s_sep)};
            break;
        }
    }
    return cs;
}

TargetLayout target_sequence(const TokenGrid& delayed, const Vocabulary& vocab) {
    require_kind(delayed, GridKind::delayed, "target_sequence");
    int rows = delayed.steps;
    TargetLayout out;
    out.labels.resize(rows + 1);
    out.mask.resize(rows + 1);
    for (int t = 0; t < rows; ++t)
        for (int l = 0; l < TokenGrid::kLayers; ++l) {
            int32_t v = delayed.at(t, l);
            out.labels[t][l] = v;
            out.mask[t][l] = v == vocab.pad ? 0 : 1;
        }
    for (int l = 0; l < TokenGrid::kLayers; ++l) {
        out.labels[rows][l] = static_cast<int32_t>(vocab.end);
        out.mask[rows][l] = 1;
    }
    return out;
}

}  // namespace utka::seqgrammar
