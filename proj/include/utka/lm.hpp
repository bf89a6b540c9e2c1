#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "utka/common.hpp"
#include "utka/mat.hpp"
#include "utka/optim.hpp"
#include "utka/seqgrammar.hpp"

namespace utka::lm {

// One step of the delayed token grid: four quantizer-layer ids.
using TokenRow = std::array<int32_t, 4>;

struct LMConfig {
    int depth = 2;
    int embed = 64;
    int heads = 4;
    int head_vocab = 66;  // codebook entries + PAD + END
    int ssl_dim = 32;     // audio-adapter input width
    int max_seq = 4096;

    int head_dim() const { return embed / heads; }
    // gated FFN width, 8/3 of the embedding rounded up to a multiple of 8
    int ffn_dim() const { return ((8 * embed + 2) / 3 + 7) / 8 * 8; }

    void validate() const;
    // named sizes: toy 2/64/4, S 8/768/8, base 16/1024/16, L 44/1024/32
    static LMConfig preset(const std::string& name, int codebook_size, int ssl_dim);
};

// Caption stand-in: whitespace tokens hash into a fixed seeded table.
constexpr int kTextDim = 64;
constexpr int kTextRows = 4096;
const Mat& text_table();
std::vector<int> text_token_rows(const std::string& caption);

struct BlockParams {
    Mat wq, wk, wv, wo;  // embed x embed, bias-free
    Mat w1, w3;          // ffn x embed
    Mat w2;              // embed x ffn
    Vec g1, g2;          // pre-norm gains
};

struct LMParams {
    LMConfig cfg;
    std::array<Mat, 4> tok;  // per-quantizer-layer token tables, head_vocab x embed
    Mat special;             // special-id table, kSpecialCount x embed
    Mat audio_adapter;       // embed x ssl_dim
    Mat text_adapter;        // embed x kTextDim
    std::vector<BlockParams> blocks;
    Vec gf;                  // final norm gain
    std::array<Mat, 4> head; // per-layer output heads, head_vocab x embed

    static LMParams make(const LMConfig& cfg, Rng& rng);
};

struct LMGrads {
    std::array<Mat, 4> tok;
    Mat special;
    Mat audio_adapter;
    Mat text_adapter;
    std::vector<BlockParams> blocks;
    Vec gf;
    std::array<Mat, 4> head;

    static LMGrads make(const LMParams& p);
    void zero();
};

using optim::ParamView;
std::vector<ParamView> param_views(LMParams& p);
std::vector<ParamView> grad_views(LMGrads& g);

// Conditioning prefix as a recipe rather than materialized rows: the raw
// per-row inputs are kept so rows can be rebuilt under the current adapter
// and special-table weights after every optimizer step.
struct Prefix {
    struct Src {
        enum class Kind { special, audio, text };
        Kind kind = Kind::special;
        int idx = 0;  // special-table row, or row into audio_in / text_in
    };
    std::vector<Src> src;
    Mat audio_in;  // stacked pseudo-SSL rows for all audio blocks
    Mat text_in;   // fixed text-table rows for all caption tokens
    seqgrammar::ConditioningSequence cond;

    int length() const { return static_cast<int>(src.size()); }
};

// Assembles the task template over already-extracted pseudo-SSL features.
Prefix encode_conditions(const LMParams& p, seqgrammar::Mode mode,
                         const Mat& input_feats,
                         const Mat* reference_feats = nullptr,
                         const std::string* caption = nullptr);

// Materialized prefix embeddings under the current parameters, P x embed.
Mat prefix_rows(const LMParams& p, const Prefix& prefix);

// Summed token-table embedding for one delayed step.
Vec embed_step(const LMParams& p, const TokenRow& ids);

// Logits for the position right after the prefix plus one per history row:
// steps = history length + 1, each step a row per quantizer layer.
struct StepLogits {
    std::array<Mat, 4> layer;  // steps x head_vocab
    int steps = 0;
};

struct BlockTrace {
    Mat x_in, n1, q, k, v, ctx, x_mid, n2, u, w3x, h;
    Vec inv1, inv2;
    std::vector<Mat> attn;  // one S x S matrix per attention head
};

struct ForwardTrace {
    Mat x0;
    std::vector<BlockTrace> blocks;
    Mat x_last;  // input to the final norm
    Mat nf;
    Vec invf;
    int prefix_len = 0;
    int steps = 0;
};

StepLogits forward(const LMParams& p, const Prefix& prefix,
                   const std::vector<TokenRow>& history,
                   ForwardTrace* trace = nullptr);

struct LMLoss {
    double nll = 0.0;  // mean over scored cells
    long scored = 0;
};

LMLoss nll_loss(const StepLogits& logits, const seqgrammar::TargetLayout& target);

// Accumulates the gradient of scale * (summed scored NLL) into g. Trace and
// logits must come from a forward over the same prefix/history under p.
void backward(const LMParams& p, const Prefix& prefix,
              const std::vector<TokenRow>& history, const ForwardTrace& trace,
              const StepLogits& logits, const seqgrammar::TargetLayout& target,
              double scale, LMGrads& g);

struct TrainExample {
    Prefix prefix;
    std::vector<TokenRow> history;  // delayed grid rows
    seqgrammar::TargetLayout target;
};

struct TrainReport {
    double nll = 0.0;  // scored-cell mean over the whole batch
    long scored = 0;
    double lr = 0.0;
};

TrainReport train_step(LMParams& p, LMGrads& g, optim::AdamW& opt,
                       const optim::ScheduleConfig& sched,
                       const std::vector<const TrainExample*>& batch);

struct SamplingSpec {
    double temperature = 0.0;  // 0 picks the argmax
    int top_k = 0;             // 0 keeps the full distribution
    uint64_t seed = 1;
};

struct GenerateResult {
    seqgrammar::TokenGrid grid;  // interleaved coordinates, delay removed
    int content_rows = 0;
    bool truncated = false;   // max_steps hit before layer 0 emitted END
    bool degenerate = false;  // END arrived too early to hold any content
    bool end_step = false;    // all four heads agreed on END at the stop step
};

// Autoregressive decoding in delayed coordinates. Vacated cells are forced
// to PAD and content cells never sample PAD or END, so the delay pattern is
// valid by construction. With expected_rows the content length is fixed by
// the caller and the END signal is only verified afterwards; this is the
// reliable path, since the flush rows before the shared END row are masked
// out of training. With an open length, layer 0 may sample END and the roll
// stops there. max_steps caps the content rows.
GenerateResult generate(const LMParams& p, const Prefix& prefix, int max_steps,
                        const SamplingSpec& spec,
                        std::optional<int> expected_rows = std::nullopt,
                        double grid_rate = 50.0);

}  // namespace utka::lm
