#include "utka/lm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>

#include "utka/kernels.hpp"

namespace utka::lm {

namespace sg = seqgrammar;

namespace {

constexpr double kNormEps = 1e-6;
constexpr double kRopeBase = 10000.0;

void fill_normal(Mat& m, Rng& rng, double scale) {
    for (auto& v : m.a) v = scale * rng.normal();
}

double row_max(const double* x, int n) {
    double m = x[0];
    for (int i = 1; i < n; ++i) m = std::max(m, x[i]);
    return m;
}

// y = g ⊙ x / rms(x), returns 1/rms for the backward pass
double rmsnorm_row(const double* x, const double* gain, double* y, int n) {
    double ss = 0.0;
    for (int i = 0; i < n; ++i) ss += x[i] * x[i];
    double inv = 1.0 / std::sqrt(ss / n + kNormEps);
    for (int i = 0; i < n; ++i) y[i] = gain[i] * x[i] * inv;
    return inv;
}

void rmsnorm_mat(const Mat& x, const Vec& gain, Mat& y, Vec& inv) {
    y = Mat(x.rows, x.cols);
    inv.resize(x.rows);
    for (int r = 0; r < x.rows; ++r)
        inv[r] = rmsnorm_row(x.row(r), gain.data(), y.row(r), x.cols);
}

void rmsnorm_bwd(const Mat& x, const Vec& inv, const Vec& gain, const Mat& dy,
                 Mat& dx, Vec& dgain) {
    int n = x.cols;
    dx = Mat(x.rows, n);
    for (int r = 0; r < x.rows; ++r) {
        const double* xr = x.row(r);
        const double* dyr = dy.row(r);
        double* dxr = dx.row(r);
        double iv = inv[r];
        double dot_gx = 0.0;
        for (int j = 0; j < n; ++j) dot_gx += dyr[j] * gain[j] * xr[j];
        double c = dot_gx * iv * iv * iv / n;
        for (int j = 0; j < n; ++j) {
            dgain[j] += dyr[j] * xr[j] * iv;
            dxr[j] = dyr[j] * gain[j] * iv - xr[j] * c;
        }
    }
}

// Rotates each head's (2i, 2i+1) pairs by pos / base^(2i/head_dim); rows map
// to consecutive absolute positions starting at pos0. sign -1 undoes it.
void rope_rows(Mat& m, int heads, int head_dim, int pos0, double sign) {
    for (int r = 0; r < m.rows; ++r) {
        double pos = pos0 + r;
        for (int h = 0; h < heads; ++h) {
            double* v = m.row(r) + h * head_dim;
            for (int i = 0; i + 1 < head_dim; i += 2) {
                double theta = pos * std::pow(kRopeBase, -static_cast<double>(i) / head_dim);
                double c = std::cos(theta);
                double s = std::sin(theta) * sign;
                double x0 = v[i], x1 = v[i + 1];
                v[i] = x0 * c - x1 * s;
                v[i + 1] = x0 * s + x1 * c;
            }
        }
    }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

void LMConfig::validate() const {
    if (depth < 1) throw ConfigError("lm depth must be positive");
    if (embed < 1 || heads < 1) throw ConfigError("lm embed and heads must be positive");
    if (embed % heads != 0) throw ConfigError("lm embed must divide evenly across heads");
    if (head_dim() % 2 != 0) throw ConfigError("per-head width must be even for the rotary encoding");
    if (head_vocab < 3) throw ConfigError("head vocab needs a code plus PAD and END");
    if (ssl_dim < 1) throw ConfigError("ssl feature width must be positive");
    if (max_seq < 8) throw ConfigError("max sequence length too small");
}

LMConfig LMConfig::preset(const std::string& name, int codebook_size, int ssl_dim) {
    LMConfig c;
    if (name == "toy") {
        c.depth = 2;
        c.embed = 64;
        c.heads = 4;
    } else if (name == "S") {
        c.depth = 8;
        c.embed = 768;
        c.heads = 8;
    } else if (name == "base") {
        c.depth = 16;
        c.embed = 1024;
        c.heads = 16;
    } else if (name == "L") {
        c.depth = 44;
        c.embed = 1024;
        c.heads = 32;
    } else {
        throw ConfigError("unknown lm preset: " + name);
    }
    if (codebook_size < 1) throw ConfigError("codebook size must be positive");
    c.head_vocab = codebook_size + 2;
    c.ssl_dim = ssl_dim;
    c.validate();
    return c;
}

const Mat& text_table() {
    static const Mat table = [] {
        Rng rng(0x7e87ab1e5eedULL);
        Mat t(kTextRows, kTextDim);
        double scale = 1.0 / std::sqrt(static_cast<double>(kTextDim));
        for (auto& v : t.a) v = scale * rng.normal();
        return t;
    }();
    return table;
}

std::vector<int> text_token_rows(const std::string& caption) {
    std::vector<int> rows;
    size_t i = 0;
    while (i < caption.size()) {
        while (i < caption.size() && std::isspace(static_cast<unsigned char>(caption[i]))) ++i;
        size_t j = i;
        while (j < caption.size() && !std::isspace(static_cast<unsigned char>(caption[j]))) ++j;
        if (j > i)
            rows.push_back(static_cast<int>(fnv1a64(caption.substr(i, j - i)) % kTextRows));
        i = j;
    }
    return rows;
}

LMParams LMParams::make(const LMConfig& cfg, Rng& rng) {
    cfg.validate();
    LMParams p;
    p.cfg = cfg;
    int e = cfg.embed, f = cfg.ffn_dim();
    double we = 1.0 / std::sqrt(static_cast<double>(e));
    double wf = 1.0 / std::sqrt(static_cast<double>(f));
    // residual branches shrink with depth so stacked blocks stay near unit gain
    double res = 1.0 / std::sqrt(2.0 * cfg.depth);
    for (int l = 0; l < 4; ++l) {
        p.tok[l] = Mat(cfg.head_vocab, e);
        fill_normal(p.tok[l], rng, 0.02);
    }
    p.special = Mat(sg::Vocabulary::kSpecialCount, e);
    fill_normal(p.special, rng, 0.02);
    p.audio_adapter = Mat(e, cfg.ssl_dim);
    fill_normal(p.audio_adapter, rng, 0.02);
    p.text_adapter = Mat(e, kTextDim);
    fill_normal(p.text_adapter, rng, 0.02);
    p.blocks.resize(cfg.depth);
    for (auto& b : p.blocks) {
        b.wq = Mat(e, e);
        b.wk = Mat(e, e);
        b.wv = Mat(e, e);
        b.wo = Mat(e, e);
        fill_normal(b.wq, rng, we);
        fill_normal(b.wk, rng, we);
        fill_normal(b.wv, rng, we);
        fill_normal(b.wo, rng, we * res);
        b.w1 = Mat(f, e);
        b.w3 = Mat(f, e);
        b.w2 = Mat(e, f);
        fill_normal(b.w1, rng, we);
        fill_normal(b.w3, rng, we);
        fill_normal(b.w2, rng, wf * res);
        b.g1.assign(e, 1.0);
        b.g2.assign(e, 1.0);
    }
    p.gf.assign(e, 1.0);
    for (int l = 0; l < 4; ++l) {
        p.head[l] = Mat(cfg.head_vocab, e);
        fill_normal(p.head[l], rng, 0.02);
    }
    return p;
}

LMGrads LMGrads::make(const LMParams& p) {
    LMGrads g;
    int e = p.cfg.embed, f = p.cfg.ffn_dim();
    for (int l = 0; l < 4; ++l) g.tok[l] = Mat(p.cfg.head_vocab, e);
    g.special = Mat(sg::Vocabulary::kSpecialCount, e);
    g.audio_adapter = Mat(e, p.cfg.ssl_dim);
    g.text_adapter = Mat(e, kTextDim);
    g.blocks.resize(p.blocks.size());
    for (auto& b : g.blocks) {
        b.wq = Mat(e, e);
        b.wk = Mat(e, e);
        b.wv = Mat(e, e);
        b.wo = Mat(e, e);
        b.w1 = Mat(f, e);
        b.w3 = Mat(f, e);
        b.w2 = Mat(e, f);
        b.g1.assign(e, 0.0);
        b.g2.assign(e, 0.0);
    }
    g.gf.assign(e, 0.0);
    for (int l = 0; l < 4; ++l) g.head[l] = Mat(p.cfg.head_vocab, e);
    return g;
}

void LMGrads::zero() {
    for (auto& t : tok) t.zero();
    special.zero();
    audio_adapter.zero();
    text_adapter.zero();
    for (auto& b : blocks) {
        b.wq.zero();
        b.wk.zero();
        b.wv.zero();
        b.wo.zero();
        b.w1.zero();
        b.w3.zero();
        b.w2.zero();
        std::fill(b.g1.begin(), b.g1.end(), 0.0);
        std::fill(b.g2.begin(), b.g2.end(), 0.0);
    }
    std::fill(gf.begin(), gf.end(), 0.0);
    for (auto& h : head) h.zero();
}

namespace {

void add_view(std::vector<ParamView>& v, const std::string& name, Mat& m) {
    v.push_back({name, m.data(), m.size()});
}
void add_view(std::vector<ParamView>& v, const std::string& name, Vec& x) {
    v.push_back({name, x.data(), x.size()});
}

template <class T>
std::vector<ParamView> views_of(T& p) {
    std::vector<ParamView> v;
    for (int l = 0; l < 4; ++l) add_view(v, "tok" + std::to_string(l), p.tok[l]);
    add_view(v, "special", p.special);
    add_view(v, "adapter.audio", p.audio_adapter);
    add_view(v, "adapter.text", p.text_adapter);
    for (size_t i = 0; i < p.blocks.size(); ++i) {
        std::string b = "blocks[" + std::to_string(i) + "].";
        add_view(v, b + "wq", p.blocks[i].wq);
        add_view(v, b + "wk", p.blocks[i].wk);
        add_view(v, b + "wv", p.blocks[i].wv);
        add_view(v, b + "wo", p.blocks[i].wo);
        add_view(v, b + "w1", p.blocks[i].w1);
        add_view(v, b + "w3", p.blocks[i].w3);
        add_view(v, b + "w2", p.blocks[i].w2);
        add_view(v, b + "g1", p.blocks[i].g1);
        add_view(v, b + "g2", p.blocks[i].g2);
    }
    add_view(v, "norm.final", p.gf);
    for (int l = 0; l < 4; ++l) add_view(v, "head" + std::to_string(l), p.head[l]);
    return v;
}

}  // namespace

std::vector<ParamView> param_views(LMParams& p) { return views_of(p); }
std::vector<ParamView> grad_views(LMGrads& g) { return views_of(g); }

Prefix encode_conditions(const LMParams& p, sg::Mode mode, const Mat& input_feats,
                         const Mat* reference_feats, const std::string* caption) {
    const LMConfig& cfg = p.cfg;
    if (input_feats.rows < 1) throw InputError("conditioning input needs at least one feature row");
    if (input_feats.cols != cfg.ssl_dim)
        throw DimensionError("input feature width does not match the audio adapter");
    if (reference_feats) {
        if (reference_feats->rows < 1)
            throw InputError("conditioning reference needs at least one feature row");
        if (reference_feats->cols != cfg.ssl_dim)
            throw DimensionError("reference feature width does not match the audio adapter");
    }

    if (caption && mode != sg::Mode::LASS)
        throw TemplateError("caption is not part of this task template");
    if (reference_feats && (mode == sg::Mode::SR || mode == sg::Mode::LASS))
        throw TemplateError("reference audio is not part of this task template");

    std::vector<int> trows;
    if (caption) {
        trows = text_token_rows(*caption);
        if (trows.empty()) throw TemplateError("caption has no tokens");
    }

    sg::BlockLengths lens;
    lens.input = input_feats.rows;
    if (reference_feats) lens.reference = reference_feats->rows;
    if (caption) lens.caption = static_cast<int>(trows.size());

    auto vocab = sg::Vocabulary::make(cfg.head_vocab - 2);
    Prefix pre;
    pre.cond = sg::build_conditioning(mode, lens, vocab);

    int n_audio = input_feats.rows + (reference_feats ? reference_feats->rows : 0);
    pre.audio_in = Mat(n_audio, cfg.ssl_dim);
    pre.text_in = Mat(static_cast<int>(trows.size()), kTextDim);

    const Mat& ttab = text_table();
    int arow = 0, trow = 0;
    for (const auto& el : pre.cond.elements) {
        if (el.kind == sg::CondElement::Kind::special) {
            pre.src.push_back({Prefix::Src::Kind::special, vocab.special_row(el.id)});
            continue;
        }
        if (el.source == sg::CondElement::Source::caption) {
            for (int tr : trows) {
                std::memcpy(pre.text_in.row(trow), ttab.row(tr), kTextDim * sizeof(double));
                pre.src.push_back({Prefix::Src::Kind::text, trow});
                ++trow;
            }
            continue;
        }
        const Mat& feats =
            el.source == sg::CondElement::Source::input ? input_feats : *reference_feats;
        for (int r = 0; r < feats.rows; ++r) {
            std::memcpy(pre.audio_in.row(arow), feats.row(r), cfg.ssl_dim * sizeof(double));
            pre.src.push_back({Prefix::Src::Kind::audio, arow});
            ++arow;
        }
    }
    return pre;
}

Mat prefix_rows(const LMParams& p, const Prefix& pre) {
    int P = pre.length(), e = p.cfg.embed;
    if (P < 1) throw InputError("conditioning prefix is empty");
    Mat adapted_audio, adapted_text;
    if (pre.audio_in.rows > 0) {
        if (pre.audio_in.cols != p.cfg.ssl_dim)
            throw DimensionError("prefix audio width does not match the adapter");
        adapted_audio = Mat(pre.audio_in.rows, e);
        kernels::matmul_nt(pre.audio_in, p.audio_adapter, adapted_audio);
    }
    if (pre.text_in.rows > 0) {
        adapted_text = Mat(pre.text_in.rows, e);
        kernels::matmul_nt(pre.text_in, p.text_adapter, adapted_text);
    }
    Mat rows(P, e);
    for (int i = 0; i < P; ++i) {
        const auto& s = pre.src[i];
        const double* src = nullptr;
        switch (s.kind) {
            case Prefix::Src::Kind::special:
                src = p.special.row(s.idx);
                break;
            case Prefix::Src::Kind::audio:
                src = adapted_audio.row(s.idx);
                break;
            case Prefix::Src::Kind::text:
                src = adapted_text.row(s.idx);
                break;
        }
        std::memcpy(rows.row(i), src, e * sizeof(double));
    }
    return rows;
}

Vec embed_step(const LMParams& p, const TokenRow& ids) {
    Vec x(p.cfg.embed, 0.0);
    for (int l = 0; l < sg::TokenGrid::kLayers; ++l) {
        if (ids[l] < 0 || ids[l] >= p.cfg.head_vocab)
            throw InputError("token id outside head vocabulary");
        kernels::axpy(1.0, p.tok[l].row(ids[l]), x.data(), p.cfg.embed);
    }
    return x;
}

StepLogits forward(const LMParams& p, const Prefix& pre,
                   const std::vector<TokenRow>& history, ForwardTrace* trace) {
    const LMConfig& cfg = p.cfg;
    int P = pre.length();
    int H = static_cast<int>(history.size());
    int S = P + H;
    if (P < 1) throw InputError("conditioning prefix is empty");
    if (S > cfg.max_seq) throw LengthError("sequence exceeds the model context");
    int e = cfg.embed, nh = cfg.heads, dh = cfg.head_dim();
    double scl = 1.0 / std::sqrt(static_cast<double>(dh));

    ForwardTrace local;
    ForwardTrace& tr = trace ? *trace : local;
    tr.prefix_len = P;
    tr.steps = H + 1;
    tr.blocks.clear();
    tr.blocks.resize(cfg.depth);

    Mat x = prefix_rows(p, pre);
    x.a.resize(static_cast<size_t>(S) * e, 0.0);
    x.rows = S;
    for (int t = 0; t < H; ++t) {
        Vec emb = embed_step(p, history[t]);
        std::memcpy(x.row(P + t), emb.data(), e * sizeof(double));
    }
    tr.x0 = x;

    for (int bi = 0; bi < cfg.depth; ++bi) {
        const BlockParams& b = p.blocks[bi];
        BlockTrace& bt = tr.blocks[bi];
        bt.x_in = x;
        rmsnorm_mat(x, b.g1, bt.n1, bt.inv1);

        bt.q = Mat(S, e);
        bt.k = Mat(S, e);
        bt.v = Mat(S, e);
        kernels::matmul_nt(bt.n1, b.wq, bt.q);
        kernels::matmul_nt(bt.n1, b.wk, bt.k);
        kernels::matmul_nt(bt.n1, b.wv, bt.v);
        rope_rows(bt.q, nh, dh, 0, 1.0);
        rope_rows(bt.k, nh, dh, 0, 1.0);

        bt.attn.assign(nh, Mat());
        bt.ctx = Mat(S, e);
        for (int h = 0; h < nh; ++h) {
            int off = h * dh;
            Mat& A = bt.attn[h];
            A = Mat(S, S);
            for (int i = 0; i < S; ++i) {
                double* arow = A.row(i);
                const double* qi = bt.q.row(i) + off;
                double mx = -1e300;
                for (int j = 0; j <= i; ++j) {
                    arow[j] = scl * kernels::dot(qi, bt.k.row(j) + off, dh);
                    mx = std::max(mx, arow[j]);
                }
                double z = 0.0;
                for (int j = 0; j <= i; ++j) {
                    arow[j] = std::exp(arow[j] - mx);
                    z += arow[j];
                }
                double* ci = bt.ctx.row(i) + off;
                for (int j = 0; j <= i; ++j) {
                    arow[j] /= z;
                    kernels::axpy(arow[j], bt.v.row(j) + off, ci, dh);
                }
            }
        }

        Mat ao(S, e);
        kernels::matmul_nt(bt.ctx, b.wo, ao);
        for (size_t i = 0; i < x.a.size(); ++i) x.a[i] += ao.a[i];
        bt.x_mid = x;

        rmsnorm_mat(x, b.g2, bt.n2, bt.inv2);
        int f = cfg.ffn_dim();
        bt.u = Mat(S, f);
        bt.w3x = Mat(S, f);
        kernels::matmul_nt(bt.n2, b.w1, bt.u);
        kernels::matmul_nt(bt.n2, b.w3, bt.w3x);
        bt.h = Mat(S, f);
        for (size_t i = 0; i < bt.h.a.size(); ++i) {
            double u = bt.u.a[i];
            bt.h.a[i] = u * sigmoid(u) * bt.w3x.a[i];
        }
        Mat fo(S, e);
        kernels::matmul_nt(bt.h, b.w2, fo);
        for (size_t i = 0; i < x.a.size(); ++i) x.a[i] += fo.a[i];
    }

    tr.x_last = x;
    rmsnorm_mat(x, p.gf, tr.nf, tr.invf);

    int steps = H + 1;
    Mat nf_steps(steps, e);
    for (int s = 0; s < steps; ++s)
        std::memcpy(nf_steps.row(s), tr.nf.row(P - 1 + s), e * sizeof(double));

    StepLogits out;
    out.steps = steps;
    for (int l = 0; l < 4; ++l) {
        out.layer[l] = Mat(steps, cfg.head_vocab);
        kernels::matmul_nt(nf_steps, p.head[l], out.layer[l]);
    }
    return out;
}

LMLoss nll_loss(const StepLogits& logits, const sg::TargetLayout& target) {
    if (static_cast<int>(target.labels.size()) != logits.steps ||
        target.mask.size() != target.labels.size())
        throw DimensionError("target length does not match logit steps");
    int V = logits.layer[0].cols;
    double total = 0.0;
    long scored = 0;
    for (int l = 0; l < 4; ++l) {
        const Mat& lg = logits.layer[l];
        for (int s = 0; s < logits.steps; ++s) {
            if (!target.mask[s][l]) continue;
            int label = target.labels[s][l];
            if (label < 0 || label >= V) throw InputError("target label outside head vocabulary");
            const double* row = lg.row(s);
            double mx = row_max(row, V);
            double z = 0.0;
            for (int j = 0; j < V; ++j) z += std::exp(row[j] - mx);
            total += mx + std::log(z) - row[label];
            ++scored;
        }
    }
    if (scored == 0) throw InputError("target scores no cells");
    return {total / scored, scored};
}

void backward(const LMParams& p, const Prefix& pre, const std::vector<TokenRow>& history,
              const ForwardTrace& tr, const StepLogits& logits,
              const sg::TargetLayout& target, double scale, LMGrads& g) {
    const LMConfig& cfg = p.cfg;
    int steps = tr.steps, P = tr.prefix_len;
    int S = tr.nf.rows;
    int e = cfg.embed, nh = cfg.heads, dh = cfg.head_dim(), f = cfg.ffn_dim();
    int V = cfg.head_vocab;
    double scl = 1.0 / std::sqrt(static_cast<double>(dh));
    if (static_cast<int>(target.labels.size()) != steps)
        throw DimensionError("target length does not match logit steps");
    if (static_cast<int>(history.size()) != S - P)
        throw DimensionError("history length does not match the trace");

    Mat nf_steps(steps, e);
    for (int s = 0; s < steps; ++s)
        std::memcpy(nf_steps.row(s), tr.nf.row(P - 1 + s), e * sizeof(double));

    // heads: softmax cross-entropy gradient per scored cell
    Mat dsteps(steps, e);
    for (int l = 0; l < 4; ++l) {
        Mat dlog(steps, V);
        for (int s = 0; s < steps; ++s) {
            if (!target.mask[s][l]) continue;
            const double* row = logits.layer[l].row(s);
            double* drow = dlog.row(s);
            double mx = row_max(row, V);
            double z = 0.0;
            for (int j = 0; j < V; ++j) z += std::exp(row[j] - mx);
            for (int j = 0; j < V; ++j) drow[j] = scale * std::exp(row[j] - mx) / z;
            drow[target.labels[s][l]] -= scale;
        }
        kernels::matmul_tn(dlog, nf_steps, g.head[l], true);
        kernels::matmul_nn(dlog, p.head[l], dsteps, l > 0);
    }

    Mat dnf(S, e);
    for (int s = 0; s < steps; ++s)
        std::memcpy(dnf.row(P - 1 + s), dsteps.row(s), e * sizeof(double));

    Mat dx;
    rmsnorm_bwd(tr.x_last, tr.invf, p.gf, dnf, dx, g.gf);

    for (int bi = cfg.depth - 1; bi >= 0; --bi) {
        const BlockParams& b = p.blocks[bi];
        const BlockTrace& bt = tr.blocks[bi];
        BlockParams& gb = g.blocks[bi];

        // ffn residual: x_out = x_mid + (silu(n2 W1ᵀ) ⊙ n2 W3ᵀ) W2ᵀ
        kernels::matmul_tn(dx, bt.h, gb.w2, true);
        Mat dgate(S, f);
        kernels::matmul_nn(dx, b.w2, dgate);
        Mat du(S, f), dw3x(S, f);
        for (size_t i = 0; i < dgate.a.size(); ++i) {
            double u = bt.u.a[i];
            double sg_u = sigmoid(u);
            double su = u * sg_u;
            du.a[i] = dgate.a[i] * bt.w3x.a[i] * (sg_u + su * (1.0 - sg_u));
            dw3x.a[i] = dgate.a[i] * su;
        }
        Mat dn2(S, e);
        kernels::matmul_nn(du, b.w1, dn2);
        kernels::matmul_nn(dw3x, b.w3, dn2, true);
        kernels::matmul_tn(du, bt.n2, gb.w1, true);
        kernels::matmul_tn(dw3x, bt.n2, gb.w3, true);
        Mat dmid_norm;
        rmsnorm_bwd(bt.x_mid, bt.inv2, b.g2, dn2, dmid_norm, gb.g2);
        Mat dmid = dx;
        for (size_t i = 0; i < dmid.a.size(); ++i) dmid.a[i] += dmid_norm.a[i];

        // attention residual: x_mid = x_in + concat-head(softmax(qkᵀ)v) Woᵀ
        kernels::matmul_tn(dmid, bt.ctx, gb.wo, true);
        Mat dctx(S, e);
        kernels::matmul_nn(dmid, b.wo, dctx);

        Mat dq(S, e), dk(S, e), dv(S, e);
        for (int h = 0; h < nh; ++h) {
            int off = h * dh;
            const Mat& A = bt.attn[h];
            for (int i = 0; i < S; ++i) {
                const double* arow = A.row(i);
                const double* dci = dctx.row(i) + off;
                // dA and the softmax jacobian, row i
                double dot_da = 0.0;
                Vec da(i + 1);
                for (int j = 0; j <= i; ++j) {
                    da[j] = kernels::dot(dci, bt.v.row(j) + off, dh);
                    kernels::axpy(arow[j], dci, dv.row(j) + off, dh);
                    dot_da += da[j] * arow[j];
                }
                const double* qi = bt.q.row(i) + off;
                double* dqi = dq.row(i) + off;
                for (int j = 0; j <= i; ++j) {
                    double ds = arow[j] * (da[j] - dot_da) * scl;
                    kernels::axpy(ds, bt.k.row(j) + off, dqi, dh);
                    kernels::axpy(ds, qi, dk.row(j) + off, dh);
                }
            }
        }
        rope_rows(dq, nh, dh, 0, -1.0);
        rope_rows(dk, nh, dh, 0, -1.0);

        kernels::matmul_tn(dq, bt.n1, gb.wq, true);
        kernels::matmul_tn(dk, bt.n1, gb.wk, true);
        kernels::matmul_tn(dv, bt.n1, gb.wv, true);
        Mat dn1(S, e);
        kernels::matmul_nn(dq, b.wq, dn1);
        kernels::matmul_nn(dk, b.wk, dn1, true);
        kernels::matmul_nn(dv, b.wv, dn1, true);
        Mat din_norm;
        rmsnorm_bwd(bt.x_in, bt.inv1, b.g1, dn1, din_norm, gb.g1);
        dx = dmid;
        for (size_t i = 0; i < dx.a.size(); ++i) dx.a[i] += din_norm.a[i];
    }

    // embeddings: history rows scatter into the token tables, prefix rows
    // route to the special table or through the adapters
    for (int t = 0; t < S - P; ++t)
        for (int l = 0; l < sg::TokenGrid::kLayers; ++l)
            kernels::axpy(1.0, dx.row(P + t), g.tok[l].row(history[t][l]), e);

    Mat da_emb(pre.audio_in.rows, e), dt_emb(pre.text_in.rows, e);
    for (int i = 0; i < P; ++i) {
        const auto& s = pre.src[i];
        switch (s.kind) {
            case Prefix::Src::Kind::special:
                kernels::axpy(1.0, dx.row(i), g.special.row(s.idx), e);
                break;
            case Prefix::Src::Kind::audio:
                kernels::axpy(1.0, dx.row(i), da_emb.row(s.idx), e);
                break;
            case Prefix::Src::Kind::text:
                kernels::axpy(1.0, dx.row(i), dt_emb.row(s.idx), e);
                break;
        }
    }
    if (pre.audio_in.rows > 0)
        kernels::matmul_tn(da_emb, pre.audio_in, g.audio_adapter, true);
    if (pre.text_in.rows > 0)
        kernels::matmul_tn(dt_emb, pre.text_in, g.text_adapter, true);

    auto gv = grad_views(g);
    for (const auto& view : gv)
        for (size_t i = 0; i < view.size; ++i)
            if (!std::isfinite(view.data[i]))
                throw TrainingFault("non-finite gradient in " + view.name);
}

TrainReport train_step(LMParams& p, LMGrads& g, optim::AdamW& opt,
                       const optim::ScheduleConfig& sched,
                       const std::vector<const TrainExample*>& batch) {
    if (batch.empty()) throw InputError("empty training batch");
    g.zero();

    std::vector<ForwardTrace> traces(batch.size());
    std::vector<StepLogits> logits(batch.size());
    double nll_sum = 0.0;
    long scored = 0;
    for (size_t i = 0; i < batch.size(); ++i) {
        const TrainExample& ex = *batch[i];
        logits[i] = forward(p, ex.prefix, ex.history, &traces[i]);
        LMLoss loss = nll_loss(logits[i], ex.target);
        nll_sum += loss.nll * loss.scored;
        scored += loss.scored;
    }
    double scale = 1.0 / static_cast<double>(scored);
    for (size_t i = 0; i < batch.size(); ++i) {
        const TrainExample& ex = *batch[i];
        backward(p, ex.prefix, ex.history, traces[i], logits[i], ex.target, scale, g);
    }

    auto pv = param_views(p);
    auto gv = grad_views(g);
    size_t total = 0;
    for (const auto& v : pv) total += v.size;
    if (opt.m.empty()) opt.init(total);
    if (opt.m.size() != total) throw DimensionError("optimizer state does not match the model");

    opt.begin_step();
    double lr = sched.lr_at(static_cast<int>(opt.step));
    size_t off = 0;
    for (size_t i = 0; i < pv.size(); ++i) {
        opt.update_span(lr, pv[i].data, gv[i].data, pv[i].size, off);
        off += pv[i].size;
    }
    return {nll_sum / scored, scored, lr};
}

namespace {

int argmax_row(const double* row, int n) {
    int best = 0;
    for (int j = 1; j < n; ++j)
        if (row[j] > row[best]) best = j;
    return best;
}

// Grammar-constrained draw: PAD never competes (it is forced where the delay
// pattern requires it) and END joins the candidates only where it may
// legally terminate the grid.
int sample_id(const double* row, int V, int pad, int end, bool allow_end,
              const SamplingSpec& spec, Rng& rng) {
    std::vector<std::pair<double, int>> cand;
    cand.reserve(V);
    for (int j = 0; j < V; ++j) {
        if (j == pad) continue;
        if (j == end && !allow_end) continue;
        cand.push_back({row[j], j});
    }
    if (spec.temperature == 0.0) {
        int best = 0;
        for (size_t j = 1; j < cand.size(); ++j)
            if (cand[j].first > cand[best].first) best = static_cast<int>(j);
        return cand[best].second;
    }
    std::sort(cand.begin(), cand.end(),
              [](const auto& a, const auto& b) { return a.first > b.first; });
    size_t keep = cand.size();
    if (spec.top_k > 0) keep = std::min(keep, static_cast<size_t>(spec.top_k));
    double mx = cand[0].first;
    double z = 0.0;
    Vec w(keep);
    for (size_t j = 0; j < keep; ++j) {
        w[j] = std::exp((cand[j].first - mx) / spec.temperature);
        z += w[j];
    }
    double u = rng.uniform() * z;
    double acc = 0.0;
    for (size_t j = 0; j < keep; ++j) {
        acc += w[j];
        if (u < acc) return cand[j].second;
    }
    return cand[keep - 1].second;
}

}  // namespace

GenerateResult generate(const LMParams& p, const Prefix& pre, int max_steps,
                        const SamplingSpec& spec, std::optional<int> expected_rows,
                        double grid_rate) {
    const LMConfig& cfg = p.cfg;
    if (max_steps < 1) throw InputError("max_steps must be positive");
    if (spec.temperature < 0.0) throw ConfigError("temperature cannot be negative");
    if (spec.top_k < 0) throw ConfigError("top_k cannot be negative");
    if (expected_rows && *expected_rows < 1)
        throw InputError("expected content length must be positive");

    auto vocab = sg::Vocabulary::make(cfg.head_vocab - 2);
    Rng rng(spec.seed);
    std::vector<TokenRow> hist;
    GenerateResult res;

    // delayed row t under content length T: cell (t, l) holds content for
    // l <= t < T + l and PAD elsewhere. allow_end opens layer 0 to the stop
    // token when the length is not fixed.
    auto next_row = [&](const std::vector<TokenRow>& ctx, int T, bool allow_end) {
        StepLogits lg = forward(p, pre, ctx, nullptr);
        int step = lg.steps - 1;
        int t = static_cast<int>(ctx.size());
        TokenRow row;
        for (int l = 0; l < sg::TokenGrid::kLayers; ++l)
            row[l] = (t < l || t >= T + l)
                         ? vocab.pad
                         : sample_id(lg.layer[l].row(step), cfg.head_vocab, vocab.pad,
                                     vocab.end, allow_end && l == 0, spec, rng);
        return row;
    };
    auto all_end = [&](const std::vector<TokenRow>& ctx) {
        StepLogits lg = forward(p, pre, ctx, nullptr);
        int step = lg.steps - 1;
        for (int l = 0; l < sg::TokenGrid::kLayers; ++l)
            if (argmax_row(lg.layer[l].row(step), cfg.head_vocab) != vocab.end) return false;
        return true;
    };

    int stop_rows = -1;
    bool saw_end = false;

    if (expected_rows) {
        // length fixed by the caller: roll the delay pattern out, then verify
        // that every head signals END
        int T = *expected_rows;
        int needed = T + 3;
        for (int s = 0; s < std::min(needed, max_steps); ++s)
            hist.push_back(next_row(hist, T, false));
        if (static_cast<int>(hist.size()) == needed && max_steps > needed) {
            res.end_step = all_end(hist);
            saw_end = true;
            stop_rows = needed;
        }
    } else {
        // open length: layer 0 decides between content and END each step; its
        // first END closes the grid (the trained END position trails the last
        // flush row, so layers 1-3 are already complete when it fires)
        for (int s = 0; s < max_steps; ++s) {
            TokenRow row = next_row(hist, max_steps + 1, true);
            if (row[0] == vocab.end) {
                res.end_step = all_end(hist);
                saw_end = true;
                stop_rows = s;
                break;
            }
            hist.push_back(row);
        }
    }

    if (!saw_end) {
        res.truncated = true;
        stop_rows = static_cast<int>(hist.size());
    }

    int T = stop_rows - 3;
    if (T <= 0) {
        res.degenerate = true;
        res.grid = sg::TokenGrid(0, grid_rate, sg::GridKind::interleaved);
        return res;
    }

    sg::TokenGrid delayed(T + 3, grid_rate, sg::GridKind::delayed);
    for (int t = 0; t < T + 3; ++t)
        for (int l = 0; l < sg::TokenGrid::kLayers; ++l) {
            int32_t v = t < static_cast<int>(hist.size()) ? hist[t][l] : vocab.pad;
            if (t < l || t >= T + l) v = vocab.pad;
            delayed.at(t, l) = v;
        }
    auto rd = sg::remove_delay(delayed, vocab.pad);
    res.grid = rd.grid;
    res.degenerate = res.degenerate || rd.degenerate;
    res.content_rows = rd.grid.steps;
    return res;
}

}  // namespace utka::lm
