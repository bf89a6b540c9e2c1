#pragma once

#include <optional>
#include <string>
#include <vector>

#include "utka/common.hpp"
#include "utka/dsp.hpp"
#include "utka/seqgrammar.hpp"

namespace utka::simulate {

using dsp::AudioBuffer;
using seqgrammar::Mode;

// Distortion chain parameterization. Defaults mirror the documented
// simulation table; per-mode profiles override single fields.
struct DistortionConfig {
    double p_noise = 0.5;
    double snr_lo = -15.0, snr_hi = 20.0;
    double p_reverb = 0.4;
    double p_clip = 0.3;
    double min_q_lo = 0.0, min_q_hi = 0.1;
    double max_q_lo = 0.9, max_q_hi = 1.0;
    double p_bandlimit = 0.3;
    std::vector<double> cutoffs{2000.0, 4000.0};
    double p_packet = 0.3;
    double loss_lo = 0.05, loss_hi = 0.25;
    double packet_frame_ms = 20.0;
    double p_interferer = 0.2;
    double sir_lo = 15.0, sir_hi = 25.0;

    void validate(int sample_rate) const;
};

struct ModeProfile {
    Mode mode = Mode::SR;
    DistortionConfig cfg;

    static ModeProfile for_mode(Mode m, const DistortionConfig& base = {});
};

struct AppliedDistortion {
    std::string id;
    std::vector<double> params;  // drawn values and pool indices
};

struct SimPair {
    AudioBuffer input;
    AudioBuffer target;
    std::vector<AppliedDistortion> applied;
    uint64_t seed = 0;

    // mode-dependent extras
    bool has_reference = false;
    AudioBuffer reference;
    bool has_caption = false;
    std::string caption;
};

struct SpeechClip {
    int speaker = 0;
    AudioBuffer audio;
};

struct CaptionedClip {
    std::string caption;
    AudioBuffer audio;
};

struct Pools {
    std::vector<AudioBuffer> noise;
    std::vector<AudioBuffer> rir;
    std::vector<SpeechClip> speech;
    std::vector<CaptionedClip> captioned;
};

AudioBuffer mix_at_ratio(const AudioBuffer& target, const AudioBuffer& interferer,
                         double ratio_db);

AudioBuffer clip_by_quantile(const AudioBuffer& audio, double min_q, double max_q);

AudioBuffer bandlimit(const AudioBuffer& audio, double cutoff_hz,
                      const std::vector<double>& allowed_cutoffs);

AudioBuffer packet_loss(const AudioBuffer& audio, double loss_rate, double frame_ms,
                        Rng& rng);

AudioBuffer reverberate(const AudioBuffer& audio, const AudioBuffer& rir);

SimPair apply_chain(const AudioBuffer& target, const Pools& pools,
                    const ModeProfile& profile, uint64_t seed);

SimPair make_mode_pair(Mode mode, const Pools& pools, uint64_t seed,
                       const DistortionConfig& base = {});

// Deterministic dataset-free pools: colored noise, exponential-decay RIRs,
// harmonic "speakers", captioned tone/noise clips.
struct PoolSpec {
    int n_noise = 4;
    int n_rir = 4;
    int n_speakers = 4;
    int clips_per_speaker = 3;
    int n_captioned = 4;
    int clip_len = 16000;
    int rir_max_len = 4000;
    int sample_rate = 16000;
};
Pools make_synthetic_pools(const PoolSpec& spec, uint64_t seed);

// One synthetic harmonic clip; shared by pools and tests.
AudioBuffer make_tone_clip(double f0, int n_partials, int length, int sample_rate,
                           double amp = 0.4, double phase = 0.0);

// Line-delimited JSON manifest: {"id":..., "role": clean|noise|rir|interferer|captioned,
// "path":..., "caption"?}. Paths are relative to the manifest directory.
Pools load_manifest(const std::string& manifest_path);

}  // namespace utka::simulate
