#pragma once

#include <string>
#include <vector>

#include "utka/common.hpp"
#include "utka/dsp.hpp"
#include "utka/mat.hpp"
#include "utka/optim.hpp"
#include "utka/quantize.hpp"
#include "utka/seqgrammar.hpp"

namespace utka::codec {

using dsp::AudioBuffer;

struct CodecConfig {
    int sample_rate = 16000;
    int downsample_ratio = 640;  // samples per token frame, 25 Hz at 16 kHz
    int hidden_dim = 64;
    int ssl_dim = 32;
    int quant_dim = 64;
    int codebook_size = 64;
    int fft_size = 1024;
    int fft_hop = 256;
    double lambda_commit = 0.25;
    double lambda_mel = 1.0;
    double lambda_aux = 1.0;
    // adversarial and feature-matching weights exist but stay at zero;
    // no discriminator ships with this codebase
    double lambda_adv = 0.0;
    double lambda_fm = 0.0;

    void validate() const;
    int frame_count(int n_samples) const;  // ceil(n / downsample_ratio)
};

// One dense layer, y = x * w^T + b, with w stored out x in.
struct Dense {
    Mat w;
    Vec b;

    Dense() = default;
    Dense(int out, int in) : w(out, in), b(out, 0.0) {}
};

struct CodecParams {
    CodecConfig cfg;

    // acoustic branch: stacked frames (T x 640) -> hidden -> hidden -> quant
    Dense ac1, ac2, ac3;
    // semantic branch: pseudo-SSL rows -> hidden -> quant
    Dense se1, se2;
    quantize::RvqStack acoustic_vq, semantic_vq;
    // decoder trunk over concatenated streams: 2*quant -> hidden -> hidden
    Dense dec1, dec2;
    // spectral head: (hidden + 2 phase features) -> hidden -> 2*(fft/2+1)
    Dense head1, head2;
    // semantic decoder: quant -> hidden -> ssl
    Dense sd1, sd2;

    static CodecParams make(const CodecConfig& cfg, Rng& rng);
};

// Gradient buffers, same shapes as the trainable dense layers. Codebooks
// learn by EMA, not by gradient, so they have no slot here.
struct CodecGrads {
    Dense ac1, ac2, ac3, se1, se2, dec1, dec2, head1, head2, sd1, sd2;

    static CodecGrads make(const CodecParams& p);
    void zero();
};

using optim::ParamView;
std::vector<ParamView> param_views(CodecParams& p);
std::vector<ParamView> grad_views(CodecGrads& g);

struct DualTokens {
    seqgrammar::TokenGrid acoustic;
    seqgrammar::TokenGrid semantic;
};

// Deterministic SSL stand-in: 80-bin log-mel at a 320-sample hop,
// adjacent-pair averaged down to 25 Hz, then a fixed seeded projection.
Mat pseudo_ssl(const AudioBuffer& audio, const CodecConfig& cfg);

DualTokens encode(const CodecParams& p, const AudioBuffer& audio);

AudioBuffer decode(const CodecParams& p, const DualTokens& tokens);

// Dequantized semantic tokens mapped back to pseudo-SSL space, T x ssl_dim.
Mat semantic_reconstruct(const CodecParams& p, const seqgrammar::TokenGrid& semantic);

struct LossReport {
    double total = 0.0;
    double commit = 0.0;
    double mel = 0.0;
    double aux = 0.0;
};

// Composite generator objective on one clip. When grads is non-null the
// backward pass accumulates into it. Quant results (with per-layer inputs)
// are exposed for EMA codebook updates during training.
struct CodecStep {
    LossReport loss;
    quantize::QuantResult acoustic_q, semantic_q;
};

// Straight-through surrogate pinned at one parameter point: quantized values
// follow the encoder features through a frozen offset instead of being
// re-assigned. The raw objective is piecewise-constant in encoder parameters
// (assignments jump at Voronoi boundaries), so finite-difference validation
// runs against this surrogate, whose derivative is what the backward pass
// actually computes. Training never uses it.
struct FrozenQuant {
    Mat a_offset, s_offset;  // quantized minus features at the freeze point
    Mat a_q, s_q;            // quantized values at the freeze point
};
FrozenQuant freeze_quantization(const CodecParams& p, const AudioBuffer& audio);

CodecStep generator_step(const CodecParams& p, const AudioBuffer& audio,
                         CodecGrads* grads, const FrozenQuant* frozen = nullptr);

LossReport generator_loss(const CodecParams& p, const AudioBuffer& audio);

// Branch forwards up to the quantizer, T x quant_dim. Exposed so tests can
// replay the encode path against the quantizer oracle and so trainers can
// seed codebooks from raw features.
Mat acoustic_features(const CodecParams& p, const AudioBuffer& audio);
Mat semantic_features(const CodecParams& p, const AudioBuffer& audio);

}  // namespace utka::codec
