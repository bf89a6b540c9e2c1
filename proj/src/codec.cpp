#include "utka/codec.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>

#include "utka/kernels.hpp"

namespace utka::codec {

namespace {

// pseudo-SSL extraction grid; independent of the reconstruction FFT setup
constexpr int kSslWin = 1024;
constexpr int kSslMels = 80;
constexpr uint64_t kSslProjSeed = 0x55511aabbccull;

double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    double e = std::exp(z);
    return e / (1.0 + e);
}

void silu_inplace(Mat& m) {
    for (auto& v : m.a) v = v * sigmoid(v);
}

// derivative of silu from the pre-activation
void silu_backprop(const Mat& z, Mat& dy) {
    for (size_t i = 0; i < z.a.size(); ++i) {
        double s = sigmoid(z.a[i]);
        dy.a[i] *= s * (1.0 + z.a[i] * (1.0 - s));
    }
}

Mat dense_fwd(const Dense& d, const Mat& x) {
    Mat y(x.rows, d.w.rows);
    kernels::matmul_nt(x, d.w, y);
    for (int r = 0; r < y.rows; ++r) {
        double* row = y.row(r);
        for (int c = 0; c < y.cols; ++c) row[c] += d.b[c];
    }
    return y;
}

// accumulates parameter grads; writes input grad when dx != nullptr
void dense_bwd(const Dense& d, const Mat& x, const Mat& dy, Dense& g, Mat* dx) {
    kernels::matmul_tn(dy, x, g.w, true);
    for (int r = 0; r < dy.rows; ++r) {
        const double* row = dy.row(r);
        for (int c = 0; c < dy.cols; ++c) g.b[c] += row[c];
    }
    if (dx) {
        *dx = Mat(x.rows, x.cols);
        kernels::matmul_nn(dy, d.w, *dx);
    }
}

void init_dense(Dense& d, Rng& rng, double scale) {
    double s = scale / std::sqrt(static_cast<double>(d.w.cols));
    for (auto& v : d.w.a) v = rng.normal() * s;
    std::fill(d.b.begin(), d.b.end(), 0.0);
}

// fixed random projection plus a bias row; the bias is what silence maps to
struct SslProj {
    Mat p;
    Vec bias;
};
const SslProj& ssl_projection(int ssl_dim) {
    static std::mutex mu;
    static std::map<int, SslProj> cache;
    std::lock_guard<std::mutex> lock(mu);
    auto it = cache.find(ssl_dim);
    if (it != cache.end()) return it->second;
    Rng rng(kSslProjSeed);
    SslProj sp;
    sp.p = Mat(kSslMels, ssl_dim);
    for (auto& v : sp.p.a) v = rng.normal() / std::sqrt(static_cast<double>(kSslMels));
    sp.bias.resize(ssl_dim);
    for (auto& v : sp.bias) v = rng.normal() * 0.3;
    return cache.emplace(ssl_dim, std::move(sp)).first->second;
}

const dsp::MelFilterbank& ssl_mel_bank(int sample_rate) {
    static std::mutex mu;
    static std::map<int, dsp::MelFilterbank> cache;
    std::lock_guard<std::mutex> lock(mu);
    auto it = cache.find(sample_rate);
    if (it != cache.end()) return it->second;
    return cache.emplace(sample_rate, dsp::MelFilterbank::make(sample_rate, kSslWin, kSslMels))
        .first->second;
}

Mat stack_frames(const std::vector<double>& padded, int T, int ds) {
    Mat frames(T, ds);
    for (int t = 0; t < T; ++t)
        std::copy(padded.begin() + static_cast<size_t>(t) * ds,
                  padded.begin() + static_cast<size_t>(t + 1) * ds, frames.row(t));
    return frames;
}

std::vector<std::vector<int>> grid_indices(const seqgrammar::TokenGrid& g) {
    std::vector<std::vector<int>> idx(g.steps, std::vector<int>(seqgrammar::TokenGrid::kLayers));
    for (int t = 0; t < g.steps; ++t)
        for (int l = 0; l < seqgrammar::TokenGrid::kLayers; ++l) idx[t][l] = g.at(t, l);
    return idx;
}

seqgrammar::TokenGrid indices_to_grid(const std::vector<std::vector<int>>& idx, double rate,
                                      seqgrammar::GridKind kind) {
    seqgrammar::TokenGrid g(static_cast<int>(idx.size()), rate, kind);
    for (int t = 0; t < g.steps; ++t)
        for (int l = 0; l < seqgrammar::TokenGrid::kLayers; ++l)
            g.at(t, l) = static_cast<int32_t>(idx[t][l]);
    return g;
}

int head_frame_count(int n_samples, int fft, int hop) {
    if (n_samples <= fft) return 1;
    return static_cast<int>((n_samples - fft + hop - 1) / hop) + 1;
}

struct HeadMap {
    int t;
    double sub;
};
HeadMap head_map(int m, int hop, int ds, int T) {
    int pos = m * hop;
    return {std::min(pos / ds, T - 1), static_cast<double>(pos % ds) / ds};
}

}  // namespace

void CodecConfig::validate() const {
    if (sample_rate <= 0) throw ConfigError("sample rate must be positive");
    if (downsample_ratio <= 0 || downsample_ratio % 2 != 0)
        throw ConfigError("downsample ratio must be positive and even");
    if (sample_rate % downsample_ratio != 0)
        throw ConfigError("downsample ratio must divide the sample rate");
    if (hidden_dim < 1 || ssl_dim < 1 || quant_dim < 1 || codebook_size < 2)
        throw ConfigError("codec dims must be positive, codebooks need two entries");
    if (fft_size < 2 || (fft_size & (fft_size - 1)) != 0)
        throw ConfigError("fft size must be a power of two");
    if (fft_hop <= 0 || fft_hop > fft_size) throw ConfigError("bad fft hop");
    if (lambda_commit < 0 || lambda_mel < 0 || lambda_aux < 0 || lambda_adv < 0 ||
        lambda_fm < 0)
        throw ConfigError("loss weights must be nonnegative");
    if (downsample_ratio / 2 > kSslWin)
        throw ConfigError("downsample ratio too large for the ssl extractor");
}

int CodecConfig::frame_count(int n_samples) const {
    return static_cast<int>((static_cast<int64_t>(n_samples) + downsample_ratio - 1) /
                            downsample_ratio);
}

CodecParams CodecParams::make(const CodecConfig& cfg, Rng& rng) {
    cfg.validate();
    CodecParams p;
    p.cfg = cfg;
    int h = cfg.hidden_dim, q = cfg.quant_dim, ds = cfg.downsample_ratio;
    int bins = cfg.fft_size / 2 + 1;
    p.ac1 = Dense(h, ds);
    p.ac2 = Dense(h, h);
    p.ac3 = Dense(q, h);
    p.se1 = Dense(h, cfg.ssl_dim);
    p.se2 = Dense(q, h);
    p.dec1 = Dense(h, 2 * q);
    p.dec2 = Dense(h, h);
    p.head1 = Dense(h, h + 2);
    p.head2 = Dense(2 * bins, h);
    p.sd1 = Dense(h, q);
    p.sd2 = Dense(cfg.ssl_dim, h);
    for (Dense* d : {&p.ac1, &p.ac2, &p.ac3, &p.se1, &p.se2, &p.dec1, &p.dec2, &p.head1,
                     &p.sd1, &p.sd2})
        init_dense(*d, rng, 1.4);
    // near-silent start: tiny spectral head keeps the first reconstructions
    // close to zero without flattening its own gradient
    init_dense(p.head2, rng, 0.02);
    p.acoustic_vq = quantize::RvqStack::make_codec(cfg.codebook_size, q, rng);
    p.semantic_vq = quantize::RvqStack::make_codec(cfg.codebook_size, q, rng);
    return p;
}

CodecGrads CodecGrads::make(const CodecParams& p) {
    CodecGrads g;
    auto shape = [](const Dense& d) { return Dense(d.w.rows, d.w.cols); };
    g.ac1 = shape(p.ac1);
    g.ac2 = shape(p.ac2);
    g.ac3 = shape(p.ac3);
    g.se1 = shape(p.se1);
    g.se2 = shape(p.se2);
    g.dec1 = shape(p.dec1);
    g.dec2 = shape(p.dec2);
    g.head1 = shape(p.head1);
    g.head2 = shape(p.head2);
    g.sd1 = shape(p.sd1);
    g.sd2 = shape(p.sd2);
    return g;
}

void CodecGrads::zero() {
    for (Dense* d : {&ac1, &ac2, &ac3, &se1, &se2, &dec1, &dec2, &head1, &head2, &sd1, &sd2}) {
        std::fill(d->w.a.begin(), d->w.a.end(), 0.0);
        std::fill(d->b.begin(), d->b.end(), 0.0);
    }
}

namespace {
template <typename Struct>
std::vector<ParamView> dense_views(Struct& s) {
    std::vector<ParamView> v;
    auto add = [&](const char* name, Dense& d) {
        v.push_back({std::string(name) + ".w", d.w.a.data(), d.w.a.size()});
        v.push_back({std::string(name) + ".b", d.b.data(), d.b.size()});
    };
    add("ac1", s.ac1);
    add("ac2", s.ac2);
    add("ac3", s.ac3);
    add("se1", s.se1);
    add("se2", s.se2);
    add("dec1", s.dec1);
    add("dec2", s.dec2);
    add("head1", s.head1);
    add("head2", s.head2);
    add("sd1", s.sd1);
    add("sd2", s.sd2);
    return v;
}
}  // namespace

std::vector<ParamView> param_views(CodecParams& p) { return dense_views(p); }
std::vector<ParamView> grad_views(CodecGrads& g) { return dense_views(g); }

Mat pseudo_ssl(const AudioBuffer& audio, const CodecConfig& cfg) {
    if (audio.samples.empty()) throw LengthError("empty audio");
    int ds = cfg.downsample_ratio;
    int T = cfg.frame_count(audio.length());
    int hop = ds / 2;

    AudioBuffer padded;
    padded.sample_rate = audio.sample_rate;
    padded.samples = audio.samples;
    padded.samples.resize(static_cast<size_t>(T) * ds + (kSslWin - hop), 0.0);

    dsp::Spectrogram spec = dsp::stft(padded, kSslWin, hop);
    Mat mel = dsp::mel_project(spec, ssl_mel_bank(cfg.sample_rate));
    // log energy above the floor, so silence sits at exactly zero
    for (auto& v : mel.a) v = std::log(v + 1e-5) - std::log(1e-5);

    // adjacent-pair average halves the rate down to one row per token frame
    Mat avg(T, kSslMels);
    for (int t = 0; t < T; ++t)
        for (int c = 0; c < kSslMels; ++c)
            avg.at(t, c) = 0.5 * (mel.at(2 * t, c) + mel.at(2 * t + 1, c));

    const SslProj& sp = ssl_projection(cfg.ssl_dim);
    Mat out(T, cfg.ssl_dim);
    kernels::matmul_nn(avg, sp.p, out);
    for (int t = 0; t < T; ++t)
        for (int c = 0; c < cfg.ssl_dim; ++c) out.at(t, c) += sp.bias[c];
    return out;
}

Mat acoustic_features(const CodecParams& p, const AudioBuffer& audio) {
    if (audio.samples.empty()) throw LengthError("empty audio");
    int ds = p.cfg.downsample_ratio;
    int T = p.cfg.frame_count(audio.length());
    std::vector<double> padded = audio.samples;
    padded.resize(static_cast<size_t>(T) * ds, 0.0);
    Mat x = stack_frames(padded, T, ds);
    Mat z1 = dense_fwd(p.ac1, x);
    silu_inplace(z1);
    Mat z2 = dense_fwd(p.ac2, z1);
    silu_inplace(z2);
    return dense_fwd(p.ac3, z2);
}

Mat semantic_features(const CodecParams& p, const AudioBuffer& audio) {
    Mat ssl = pseudo_ssl(audio, p.cfg);
    Mat z1 = dense_fwd(p.se1, ssl);
    silu_inplace(z1);
    return dense_fwd(p.se2, z1);
}

DualTokens encode(const CodecParams& p, const AudioBuffer& audio) {
    Mat af = acoustic_features(p, audio);
    auto aq = quantize::rvq_encode(p.acoustic_vq, af);

    Mat sf = semantic_features(p, audio);
    auto sq = quantize::rvq_encode(p.semantic_vq, sf);

    double rate = static_cast<double>(p.cfg.sample_rate) / p.cfg.downsample_ratio;
    DualTokens out;
    out.acoustic = indices_to_grid(aq.indices, rate, seqgrammar::GridKind::acoustic);
    out.semantic = indices_to_grid(sq.indices, rate, seqgrammar::GridKind::semantic);
    return out;
}

namespace {

// trunk + spectral head forward; keeps intermediates for the backward pass
struct DecodeTrace {
    Mat cat, d1z, d1, d2z, hidden;
    Mat min, h1z, h1, o;
    dsp::Spectrogram spec;
    int T = 0, M = 0, L = 0;
};

DecodeTrace decode_forward(const CodecParams& p, const Mat& aq, const Mat& sq) {
    const CodecConfig& cfg = p.cfg;
    int T = aq.rows;
    DecodeTrace tr;
    tr.T = T;
    tr.L = T * cfg.downsample_ratio;
    tr.M = head_frame_count(tr.L, cfg.fft_size, cfg.fft_hop);

    tr.cat = Mat(T, 2 * cfg.quant_dim);
    for (int t = 0; t < T; ++t) {
        std::copy(aq.row(t), aq.row(t) + cfg.quant_dim, tr.cat.row(t));
        std::copy(sq.row(t), sq.row(t) + cfg.quant_dim, tr.cat.row(t) + cfg.quant_dim);
    }
    tr.d1z = dense_fwd(p.dec1, tr.cat);
    tr.d1 = tr.d1z;
    silu_inplace(tr.d1);
    tr.d2z = dense_fwd(p.dec2, tr.d1);
    tr.hidden = tr.d2z;
    silu_inplace(tr.hidden);

    int h = cfg.hidden_dim;
    tr.min = Mat(tr.M, h + 2);
    for (int m = 0; m < tr.M; ++m) {
        HeadMap hm = head_map(m, cfg.fft_hop, cfg.downsample_ratio, T);
        std::copy(tr.hidden.row(hm.t), tr.hidden.row(hm.t) + h, tr.min.row(m));
        tr.min.at(m, h) = std::sin(2.0 * M_PI * hm.sub);
        tr.min.at(m, h + 1) = std::cos(2.0 * M_PI * hm.sub);
    }
    tr.h1z = dense_fwd(p.head1, tr.min);
    tr.h1 = tr.h1z;
    silu_inplace(tr.h1);
    tr.o = dense_fwd(p.head2, tr.h1);

    int bins = cfg.fft_size / 2 + 1;
    tr.spec.window_len = cfg.fft_size;
    tr.spec.hop = cfg.fft_hop;
    tr.spec.frames = tr.M;
    tr.spec.bins = bins;
    tr.spec.data.assign(static_cast<size_t>(tr.M) * bins, dsp::cplx(0.0, 0.0));
    for (int m = 0; m < tr.M; ++m)
        for (int k = 0; k < bins; ++k) {
            double mag = std::exp(tr.o.at(m, k));
            double ph = tr.o.at(m, bins + k);
            tr.spec.at(m, k) = dsp::cplx(mag * std::cos(ph), mag * std::sin(ph));
        }
    return tr;
}

}  // namespace

AudioBuffer decode(const CodecParams& p, const DualTokens& tokens) {
    if (tokens.acoustic.steps != tokens.semantic.steps)
        throw DimensionError("acoustic and semantic grids disagree on frame count");
    if (tokens.acoustic.steps < 1) throw LengthError("empty token grid");
    Mat aq = quantize::rvq_decode(p.acoustic_vq, grid_indices(tokens.acoustic));
    Mat sq = quantize::rvq_decode(p.semantic_vq, grid_indices(tokens.semantic));
    DecodeTrace tr = decode_forward(p, aq, sq);
    AudioBuffer y = dsp::istft(tr.spec, p.cfg.sample_rate);
    y.samples.resize(tr.L);
    return y;
}

Mat semantic_reconstruct(const CodecParams& p, const seqgrammar::TokenGrid& semantic) {
    if (semantic.steps < 1) throw LengthError("empty token grid");
    Mat sq = quantize::rvq_decode(p.semantic_vq, grid_indices(semantic));
    Mat z = dense_fwd(p.sd1, sq);
    silu_inplace(z);
    return dense_fwd(p.sd2, z);
}

FrozenQuant freeze_quantization(const CodecParams& p, const AudioBuffer& audio) {
    Mat af = acoustic_features(p, audio);
    auto aq = quantize::rvq_encode(p.acoustic_vq, af);
    Mat ssl = pseudo_ssl(audio, p.cfg);
    Mat s1 = dense_fwd(p.se1, ssl);
    silu_inplace(s1);
    Mat sf = dense_fwd(p.se2, s1);
    auto sq = quantize::rvq_encode(p.semantic_vq, sf);

    FrozenQuant fz;
    fz.a_q = aq.quantized;
    fz.s_q = sq.quantized;
    fz.a_offset = Mat(af.rows, af.cols);
    fz.s_offset = Mat(sf.rows, sf.cols);
    for (size_t i = 0; i < af.a.size(); ++i) fz.a_offset.a[i] = aq.quantized.a[i] - af.a[i];
    for (size_t i = 0; i < sf.a.size(); ++i) fz.s_offset.a[i] = sq.quantized.a[i] - sf.a[i];
    return fz;
}

CodecStep generator_step(const CodecParams& p, const AudioBuffer& audio, CodecGrads* grads,
                         const FrozenQuant* frozen) {
    const CodecConfig& cfg = p.cfg;
    if (audio.samples.empty()) throw LengthError("empty audio");
    for (double v : audio.samples)
        if (!std::isfinite(v)) throw InputError("non-finite audio sample");

    int ds = cfg.downsample_ratio;
    int T = cfg.frame_count(audio.length());
    AudioBuffer padded;
    padded.sample_rate = cfg.sample_rate;
    padded.samples = audio.samples;
    padded.samples.resize(static_cast<size_t>(T) * ds, 0.0);

    // acoustic encoder
    Mat x = stack_frames(padded.samples, T, ds);
    Mat a1z = dense_fwd(p.ac1, x);
    Mat a1 = a1z;
    silu_inplace(a1);
    Mat a2z = dense_fwd(p.ac2, a1);
    Mat a2 = a2z;
    silu_inplace(a2);
    Mat af = dense_fwd(p.ac3, a2);

    // semantic encoder on the SSL stand-in
    Mat ssl = pseudo_ssl(audio, cfg);
    Mat s1z = dense_fwd(p.se1, ssl);
    Mat s1 = s1z;
    silu_inplace(s1);
    Mat sf = dense_fwd(p.se2, s1);

    quantize::QuantResult aq, sq;
    if (frozen) {
        if (!frozen->a_offset.same_shape(af) || !frozen->s_offset.same_shape(sf))
            throw DimensionError("freeze point does not match this clip");
        aq.quantized = af;
        sq.quantized = sf;
        for (size_t i = 0; i < af.a.size(); ++i) aq.quantized.a[i] += frozen->a_offset.a[i];
        for (size_t i = 0; i < sf.a.size(); ++i) sq.quantized.a[i] += frozen->s_offset.a[i];
    } else {
        aq = quantize::rvq_encode(p.acoustic_vq, af, true);
        sq = quantize::rvq_encode(p.semantic_vq, sf, true);
    }
    const Mat& a_detached = frozen ? frozen->a_q : aq.quantized;
    const Mat& s_detached = frozen ? frozen->s_q : sq.quantized;

    DecodeTrace tr = decode_forward(p, aq.quantized, sq.quantized);
    AudioBuffer synth = dsp::istft(tr.spec, cfg.sample_rate);
    int synth_len = static_cast<int>(synth.samples.size());
    AudioBuffer recon;
    recon.sample_rate = cfg.sample_rate;
    recon.samples.assign(synth.samples.begin(), synth.samples.begin() + tr.L);

    dsp::MelLossGrad melg = dsp::mel_loss_grad(padded, recon);

    // semantic decoder on the quantized stream
    Mat r1z = dense_fwd(p.sd1, sq.quantized);
    Mat r1 = r1z;
    silu_inplace(r1);
    Mat srec = dense_fwd(p.sd2, r1);
    double aux = 0.0;
    for (size_t i = 0; i < srec.a.size(); ++i) {
        double d = srec.a[i] - ssl.a[i];
        aux += d * d;
    }
    aux /= static_cast<double>(srec.a.size());

    double commit = quantize::commitment_loss(af, a_detached) +
                    quantize::commitment_loss(sf, s_detached);

    LossReport rep;
    rep.commit = commit;
    rep.mel = melg.value;
    rep.aux = aux;
    rep.total = cfg.lambda_commit * commit + cfg.lambda_mel * melg.value +
                cfg.lambda_aux * aux;
    if (!std::isfinite(rep.total) || !std::isfinite(commit) || !std::isfinite(melg.value) ||
        !std::isfinite(aux))
        throw TrainingFault("non-finite generator loss");

    if (grads) {
        int h = cfg.hidden_dim, q = cfg.quant_dim, bins = cfg.fft_size / 2 + 1;

        // spectral path: mel loss -> waveform -> spectrogram -> head outputs
        std::vector<double> dy(synth_len, 0.0);
        for (int i = 0; i < tr.L; ++i) dy[i] = cfg.lambda_mel * melg.grad[i];
        dsp::Spectrogram dspec =
            dsp::istft_grad_spec(dy, cfg.fft_size, cfg.fft_hop, tr.M);

        Mat dO(tr.M, 2 * bins);
        for (int m = 0; m < tr.M; ++m)
            for (int k = 0; k < bins; ++k) {
                dsp::cplx g = dspec.at(m, k);
                dsp::cplx s = tr.spec.at(m, k);
                dO.at(m, k) = g.real() * s.real() + g.imag() * s.imag();
                dO.at(m, bins + k) = -g.real() * s.imag() + g.imag() * s.real();
            }

        Mat dh1;
        dense_bwd(p.head2, tr.h1, dO, grads->head2, &dh1);
        silu_backprop(tr.h1z, dh1);
        Mat dmin;
        dense_bwd(p.head1, tr.min, dh1, grads->head1, &dmin);

        Mat dhidden(tr.T, h);
        for (int m = 0; m < tr.M; ++m) {
            HeadMap hm = head_map(m, cfg.fft_hop, ds, tr.T);
            kernels::axpy(1.0, dmin.row(m), dhidden.row(hm.t), h);
        }

        silu_backprop(tr.d2z, dhidden);
        Mat dd1;
        dense_bwd(p.dec2, tr.d1, dhidden, grads->dec2, &dd1);
        silu_backprop(tr.d1z, dd1);
        Mat dcat;
        dense_bwd(p.dec1, tr.cat, dd1, grads->dec1, &dcat);

        // straight-through: quantized-stream grads land on encoder features
        Mat daf(T, q), dsf(T, q);
        for (int t = 0; t < T; ++t) {
            std::copy(dcat.row(t), dcat.row(t) + q, daf.row(t));
            std::copy(dcat.row(t) + q, dcat.row(t) + 2 * q, dsf.row(t));
        }

        // auxiliary feature-reconstruction path
        Mat dsrec(srec.rows, srec.cols);
        double ascale = cfg.lambda_aux * 2.0 / static_cast<double>(srec.a.size());
        for (size_t i = 0; i < srec.a.size(); ++i)
            dsrec.a[i] = ascale * (srec.a[i] - ssl.a[i]);
        Mat dr1;
        dense_bwd(p.sd2, r1, dsrec, grads->sd2, &dr1);
        silu_backprop(r1z, dr1);
        Mat dsq_aux;
        dense_bwd(p.sd1, sq.quantized, dr1, grads->sd1, &dsq_aux);
        for (size_t i = 0; i < dsf.a.size(); ++i) dsf.a[i] += dsq_aux.a[i];

        // commitment pulls features toward their codes
        Mat cga = quantize::commitment_grad(af, a_detached);
        Mat cgs = quantize::commitment_grad(sf, s_detached);
        for (size_t i = 0; i < daf.a.size(); ++i) daf.a[i] += cfg.lambda_commit * cga.a[i];
        for (size_t i = 0; i < dsf.a.size(); ++i) dsf.a[i] += cfg.lambda_commit * cgs.a[i];

        // acoustic encoder backward
        Mat da2;
        dense_bwd(p.ac3, a2, daf, grads->ac3, &da2);
        silu_backprop(a2z, da2);
        Mat da1;
        dense_bwd(p.ac2, a1, da2, grads->ac2, &da1);
        silu_backprop(a1z, da1);
        dense_bwd(p.ac1, x, da1, grads->ac1, nullptr);

        // semantic encoder backward
        Mat ds1;
        dense_bwd(p.se2, s1, dsf, grads->se2, &ds1);
        silu_backprop(s1z, ds1);
        dense_bwd(p.se1, ssl, ds1, grads->se1, nullptr);
    }

    CodecStep step;
    step.loss = rep;
    step.acoustic_q = std::move(aq);
    step.semantic_q = std::move(sq);
    return step;
}

LossReport generator_loss(const CodecParams& p, const AudioBuffer& audio) {
    return generator_step(p, audio, nullptr).loss;
}

}  // namespace utka::codec
