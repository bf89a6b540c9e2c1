#pragma once

#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "utka/codec.hpp"
#include "utka/common.hpp"
#include "utka/dsp.hpp"
#include "utka/lm.hpp"
#include "utka/optim.hpp"
#include "utka/seqgrammar.hpp"
#include "utka/simulate.hpp"

namespace utka::pipeline {

using dsp::AudioBuffer;
using seqgrammar::Mode;

struct TaskRequest {
    Mode mode = Mode::SR;
    AudioBuffer input;
    std::optional<AudioBuffer> reference;
    std::optional<std::string> caption;
    lm::SamplingSpec sampling;  // temperature and top_k; the seed below wins
    uint64_t seed = 1;
};

struct StageTiming {
    std::string stage;
    double seconds = 0.0;
};

// Separation runs carry exactly two tracks, every other mode exactly one.
// grids and conditions line up with tracks; conditions expose the template
// actually used, so callers can audit the task id and block lengths.
struct TaskResult {
    std::vector<AudioBuffer> tracks;
    std::vector<seqgrammar::TokenGrid> grids;  // interleaved coordinates
    std::vector<seqgrammar::ConditioningSequence> conditions;
    std::vector<StageTiming> timings;
    bool truncated = false;
};

// Condition, generate, detokenize. Generation is length-conditioned: every
// mode preserves duration, so the content length is fixed at twice the input
// frame count and the END signal is verified afterwards. Output holds exactly
// frame_count * 640 samples. Thread-safe for concurrent requests; parameters
// are only read.
TaskResult run_task(const codec::CodecParams& cp, const lm::LMParams& lp,
                    const TaskRequest& request);

// Two-pass two-speaker separation: the dominant speaker is pulled out by a
// plain regeneration pass over the mixture, the other one by the reversed
// extraction mode with pass-1 output as the reference. Both returned tracks
// are cropped to the mixture's exact length; pass 2 conditions on the raw
// uncropped pass-1 track. Pass-1 truncation aborts pass 2 and returns the
// partial single-track result.
TaskResult run_ss(const codec::CodecParams& cp, const lm::LMParams& lp,
                  const AudioBuffer& mixture, const lm::SamplingSpec& sampling = {},
                  uint64_t seed = 1);

// Crop or zero-pad to exactly n samples.
AudioBuffer fit_length(const AudioBuffer& audio, int n_samples);

// Two-phase training: the codec phase fits the reconstruction objective on
// the clean pool clips, then the token-LM phase fits simulated (input,
// target) pairs against the frozen codec's token grids. Every per-step
// random choice (mode draw, pair simulation, dead-entry reseeding) derives
// statelessly from (seed, step), so a run resumed from saved state continues
// bit-identically.
struct DriverConfig {
    int codec_steps = 0;
    int lm_steps = 0;
    int codec_batch = 8;
    int lm_batch = 4;
    int clip_samples = 80000;  // training clip length, 5 s at 16 kHz
    optim::ScheduleConfig codec_sched;
    optim::ScheduleConfig lm_sched;
    std::vector<Mode> mode_set;  // empty selects all five modes
    simulate::DistortionConfig distortion;
    uint64_t seed = 1;
    double ema_gamma = 0.99;
    double reseed_threshold = 1e-3;
    int checkpoint_every = 0;  // 0 checkpoints only at phase ends

    void validate() const;
};

// Mutable training state outside the model parameters; serialized alongside
// them so interrupted runs resume exactly.
struct DriverState {
    optim::AdamW codec_opt, lm_opt;
    int codec_step = 0;  // completed steps per phase
    int lm_step = 0;
};

struct LossRecord {
    std::string phase;  // "codec" or "lm"
    int step = 0;       // 1-based within the phase
    double loss = 0.0;  // codec: composite total; lm: scored-cell mean NLL
    double lr = 0.0;
    std::optional<Mode> mode;  // lm phase only
};

// The mode the lm phase trains at a given step: one uniform draw over the
// configured mode set per batch. Exposed so the draw distribution is
// testable without running the optimizer.
Mode driver_mode_at(const DriverConfig& cfg, int lm_step);

using CheckpointHook = std::function<void(const std::string& phase, int step)>;

struct DriverResult {
    std::vector<LossRecord> log;
    int codec_steps_run = 0;
    int lm_steps_run = 0;
};

DriverResult train_driver(codec::CodecParams& cp, lm::LMParams& lp, DriverState& st,
                          const simulate::Pools& corpus, const DriverConfig& cfg,
                          const CheckpointHook& on_checkpoint = {});

struct MetricRow {
    double stft_loss = 0.0;
    double mel_loss = 0.0;
    double snr_db = 0.0;
};

struct MetricTable {
    std::vector<MetricRow> rows;  // one per (reference, estimate) pair
    MetricRow mean;               // arithmetic mean over rows
};

MetricTable evaluate(const std::vector<std::pair<AudioBuffer, AudioBuffer>>& pairs);

// Line-delimited JSON records plus a summary line / step-indexed records.
std::string render_metrics(const MetricTable& table);
std::string render_loss_records(const std::vector<LossRecord>& log);

}  // namespace utka::pipeline
