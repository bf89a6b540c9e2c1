#include "utka/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "json.hpp"

namespace utka::pipeline {

namespace sg = seqgrammar;

namespace {

// stream tags for stateless per-step seed derivation
constexpr uint64_t kTagKmeans = 0x11;
constexpr uint64_t kTagReseed = 0x22;
constexpr uint64_t kTagMode = 0x33;
constexpr uint64_t kTagPair = 0x44;

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void check_audio(const AudioBuffer& a, int sample_rate, const char* what) {
    if (a.samples.empty()) throw InputError(std::string("empty ") + what + " audio");
    if (a.sample_rate != sample_rate)
        throw InputError(std::string(what) + " audio sample rate " +
                         std::to_string(a.sample_rate) + " does not match the codec's " +
                         std::to_string(sample_rate));
}

void check_compat(const codec::CodecParams& cp, const lm::LMParams& lp) {
    if (lp.cfg.head_vocab != cp.cfg.codebook_size + 2)
        throw DimensionError("lm head vocabulary does not cover the codec codebook");
    if (lp.cfg.ssl_dim != cp.cfg.ssl_dim)
        throw DimensionError("lm audio adapter width does not match the feature width");
}

std::vector<Mode> effective_modes(const DriverConfig& cfg) {
    if (!cfg.mode_set.empty()) return cfg.mode_set;
    return {Mode::SR, Mode::TSE, Mode::rTSE, Mode::VC, Mode::LASS};
}

AudioBuffer crop_to(const AudioBuffer& a, int n) {
    if (a.length() <= n) return a;
    AudioBuffer out;
    out.sample_rate = a.sample_rate;
    out.samples.assign(a.samples.begin(), a.samples.begin() + n);
    return out;
}

std::vector<lm::TokenRow> grid_rows(const sg::TokenGrid& delayed) {
    std::vector<lm::TokenRow> rows(delayed.steps);
    for (int t = 0; t < delayed.steps; ++t)
        for (int l = 0; l < sg::TokenGrid::kLayers; ++l) rows[t][l] = delayed.at(t, l);
    return rows;
}

}  // namespace

AudioBuffer fit_length(const AudioBuffer& audio, int n_samples) {
    if (n_samples < 1) throw InputError("clip length must be positive");
    AudioBuffer out = audio;
    out.samples.resize(static_cast<size_t>(n_samples), 0.0);
    return out;
}

TaskResult run_task(const codec::CodecParams& cp, const lm::LMParams& lp,
                    const TaskRequest& request) {
    check_compat(cp, lp);
    check_audio(request.input, cp.cfg.sample_rate, "input");
    if (request.reference) check_audio(*request.reference, cp.cfg.sample_rate, "reference");

    TaskResult res;
    auto t0 = std::chrono::steady_clock::now();

    Mat in_feats = codec::pseudo_ssl(request.input, cp.cfg);
    Mat ref_feats;
    if (request.reference) ref_feats = codec::pseudo_ssl(*request.reference, cp.cfg);
    lm::Prefix prefix = lm::encode_conditions(
        lp, request.mode, in_feats, request.reference ? &ref_feats : nullptr,
        request.caption ? &*request.caption : nullptr);
    res.timings.push_back({"condition", seconds_since(t0)});

    // every mode preserves duration: the interleaved grid runs at twice the
    // frame rate, so the content length is pinned to 2 frames per frame
    int frames = cp.cfg.frame_count(request.input.length());
    int expected = 2 * frames;
    lm::SamplingSpec spec = request.sampling;
    spec.seed = request.seed;

    t0 = std::chrono::steady_clock::now();
    lm::GenerateResult gen = lm::generate(lp, prefix, expected + 4, spec, expected);
    res.timings.push_back({"generate", seconds_since(t0)});

    res.truncated = gen.truncated || gen.degenerate;
    res.conditions.push_back(prefix.cond);

    t0 = std::chrono::steady_clock::now();
    if (gen.grid.steps >= 2) {
        auto [acoustic, semantic] = sg::deinterleave(gen.grid);
        res.tracks.push_back(codec::decode(cp, {acoustic, semantic}));
    } else {
        // unreachable under length-conditioned decoding; keeps the
        // truncation contract total
        res.tracks.push_back(AudioBuffer{{}, cp.cfg.sample_rate});
    }
    res.grids.push_back(std::move(gen.grid));
    res.timings.push_back({"decode", seconds_since(t0)});
    return res;
}

TaskResult run_ss(const codec::CodecParams& cp, const lm::LMParams& lp,
                  const AudioBuffer& mixture, const lm::SamplingSpec& sampling,
                  uint64_t seed) {
    check_compat(cp, lp);
    check_audio(mixture, cp.cfg.sample_rate, "mixture");
    int mix_len = mixture.length();

    TaskRequest pass1;
    pass1.mode = Mode::SR;
    pass1.input = mixture;
    pass1.sampling = sampling;
    pass1.seed = seed;
    TaskResult r1 = run_task(cp, lp, pass1);

    TaskResult res;
    for (const auto& t : r1.timings) res.timings.push_back({"pass1." + t.stage, t.seconds});
    if (r1.truncated) {
        res.tracks.push_back(crop_to(r1.tracks[0], mix_len));
        res.grids = std::move(r1.grids);
        res.conditions = std::move(r1.conditions);
        res.truncated = true;
        return res;
    }

    TaskRequest pass2;
    pass2.mode = Mode::rTSE;
    pass2.input = mixture;
    pass2.reference = r1.tracks[0];  // raw frame-aligned track, not cropped
    pass2.sampling = sampling;
    pass2.seed = mix_seed(seed, 2);
    TaskResult r2 = run_task(cp, lp, pass2);
    for (const auto& t : r2.timings) res.timings.push_back({"pass2." + t.stage, t.seconds});

    res.tracks.push_back(crop_to(r1.tracks[0], mix_len));
    res.tracks.push_back(crop_to(r2.tracks[0], mix_len));
    res.grids = {std::move(r1.grids[0]), std::move(r2.grids[0])};
    res.conditions = {std::move(r1.conditions[0]), std::move(r2.conditions[0])};
    res.truncated = r2.truncated;
    return res;
}

void DriverConfig::validate() const {
    if (codec_steps < 0 || lm_steps < 0) throw ConfigError("step counts cannot be negative");
    if (codec_batch < 1 || lm_batch < 1) throw ConfigError("batch sizes must be positive");
    if (clip_samples < 1) throw ConfigError("training clip length must be positive");
    if (ema_gamma <= 0.0 || ema_gamma >= 1.0)
        throw ConfigError("codebook ema factor must lie in (0, 1)");
    if (reseed_threshold <= 0.0) throw ConfigError("reseed threshold must be positive");
    if (checkpoint_every < 0) throw ConfigError("checkpoint interval cannot be negative");
    if (codec_steps > 0) codec_sched.validate();
    if (lm_steps > 0) lm_sched.validate();
    for (size_t i = 0; i < mode_set.size(); ++i)
        for (size_t j = i + 1; j < mode_set.size(); ++j)
            if (mode_set[i] == mode_set[j])
                throw ConfigError("duplicate mode in mode set: " +
                                  sg::mode_name(mode_set[i]));
}

Mode driver_mode_at(const DriverConfig& cfg, int lm_step) {
    auto modes = effective_modes(cfg);
    Rng rng(mix_seed(mix_seed(cfg.seed, kTagMode), static_cast<uint64_t>(lm_step)));
    return modes[rng.index(static_cast<int64_t>(modes.size()))];
}

DriverResult train_driver(codec::CodecParams& cp, lm::LMParams& lp, DriverState& st,
                          const simulate::Pools& corpus, const DriverConfig& cfg,
                          const CheckpointHook& on_checkpoint) {
    cfg.validate();
    cfg.distortion.validate(cp.cfg.sample_rate);
    check_compat(cp, lp);
    if (st.codec_step > cfg.codec_steps || st.lm_step > cfg.lm_steps)
        throw ConfigError("saved state is ahead of the configured step counts");

    DriverResult res;
    auto emit = [&](const std::string& phase, int step, int phase_total) {
        if (!on_checkpoint) return;
        bool periodic = cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0;
        if (periodic || step == phase_total) on_checkpoint(phase, step);
    };

    // ---- phase 1: codec on the clean pool clips ----
    if (st.codec_step < cfg.codec_steps) {
        std::vector<AudioBuffer> clips;
        for (const auto& s : corpus.speech) clips.push_back(fit_length(s.audio, cfg.clip_samples));
        for (const auto& c : corpus.captioned)
            clips.push_back(fit_length(c.audio, cfg.clip_samples));
        if (clips.empty()) throw InputError("corpus has no clips to train the codec on");

        if (st.codec_step == 0) {
            // seed both codebooks from the whole corpus before the first step
            int rows = 0;
            std::vector<Mat> afs, sfs;
            for (const auto& clip : clips) {
                afs.push_back(codec::acoustic_features(cp, clip));
                sfs.push_back(codec::semantic_features(cp, clip));
                rows += afs.back().rows;
            }
            Mat af(rows, cp.cfg.quant_dim), sf(rows, cp.cfg.quant_dim);
            int r = 0;
            for (size_t i = 0; i < afs.size(); ++i) {
                std::copy(afs[i].a.begin(), afs[i].a.end(), af.row(r));
                std::copy(sfs[i].a.begin(), sfs[i].a.end(), sf.row(r));
                r += afs[i].rows;
            }
            Rng krng(mix_seed(cfg.seed, kTagKmeans));
            quantize::kmeanspp_init(cp.acoustic_vq, af, krng);
            quantize::kmeanspp_init(cp.semantic_vq, sf, krng);
        }

        auto pv = codec::param_views(cp);
        size_t total = 0;
        for (const auto& v : pv) total += v.size;
        if (st.codec_opt.m.empty()) st.codec_opt.init(total);

        codec::CodecGrads grads = codec::CodecGrads::make(cp);
        for (int step = st.codec_step + 1; step <= cfg.codec_steps; ++step) {
            grads.zero();
            Rng step_rng(mix_seed(mix_seed(cfg.seed, kTagReseed), static_cast<uint64_t>(step)));
            double loss_sum = 0.0;
            for (int b = 0; b < cfg.codec_batch; ++b) {
                const AudioBuffer& clip =
                    clips[(static_cast<size_t>(step - 1) * cfg.codec_batch + b) % clips.size()];
                codec::CodecStep cs = codec::generator_step(cp, clip, &grads);
                if (!std::isfinite(cs.loss.total))
                    throw TrainingFault("non-finite codec loss at step " +
                                        std::to_string(step));
                quantize::codebook_update(cp.acoustic_vq, cs.acoustic_q, cfg.ema_gamma,
                                          cfg.reseed_threshold, step_rng);
                quantize::codebook_update(cp.semantic_vq, cs.semantic_q, cfg.ema_gamma,
                                          cfg.reseed_threshold, step_rng);
                loss_sum += cs.loss.total;
            }
            auto gv = codec::grad_views(grads);
            for (auto& v : gv)
                for (size_t i = 0; i < v.size; ++i) v.data[i] /= cfg.codec_batch;
            double lr = cfg.codec_sched.lr_at(step);
            st.codec_opt.begin_step();
            size_t off = 0;
            for (size_t i = 0; i < pv.size(); ++i) {
                st.codec_opt.update_span(lr, pv[i].data, gv[i].data, pv[i].size, off);
                off += pv[i].size;
            }
            st.codec_step = step;
            ++res.codec_steps_run;
            res.log.push_back({"codec", step, loss_sum / cfg.codec_batch, lr, std::nullopt});
            emit("codec", step, cfg.codec_steps);
        }
    }

    // ---- phase 2: token lm against the now-frozen codec ----
    if (st.lm_step < cfg.lm_steps) {
        if (corpus.speech.empty()) throw InputError("corpus has no speech clips");
        auto modes = effective_modes(cfg);
        for (Mode m : modes)
            if (m == Mode::LASS && corpus.captioned.empty())
                throw InputError("mode set includes captioned extraction but the corpus "
                                 "has no captioned clips");

        // the longest sequence a training pair can produce must fit
        int frames = cp.cfg.frame_count(cfg.clip_samples);
        if (4 + 2 * frames + (2 * frames + 3) > lp.cfg.max_seq)
            throw LengthError("training clip length exceeds the lm context window");

        const auto vocab = sg::Vocabulary::make(cp.cfg.codebook_size);
        const codec::CodecParams& frozen = cp;  // read-only from here on
        lm::LMGrads g = lm::LMGrads::make(lp);

        for (int step = st.lm_step + 1; step <= cfg.lm_steps; ++step) {
            Mode m = driver_mode_at(cfg, step);
            std::vector<lm::TrainExample> batch;
            batch.reserve(cfg.lm_batch);
            for (int b = 0; b < cfg.lm_batch; ++b) {
                uint64_t pair_seed =
                    mix_seed(mix_seed(cfg.seed, kTagPair),
                             static_cast<uint64_t>(step) * cfg.lm_batch + b);
                simulate::SimPair pair =
                    simulate::make_mode_pair(m, corpus, pair_seed, cfg.distortion);
                AudioBuffer input = fit_length(pair.input, cfg.clip_samples);
                AudioBuffer target = fit_length(pair.target, cfg.clip_samples);

                codec::DualTokens toks = codec::encode(frozen, target);
                sg::TokenGrid inter = sg::interleave(toks.acoustic, toks.semantic);
                sg::TokenGrid delayed = sg::apply_delay(inter, vocab.pad);

                Mat in_feats = codec::pseudo_ssl(input, frozen.cfg);
                Mat ref_feats;
                if (pair.has_reference) {
                    AudioBuffer ref = fit_length(pair.reference, cfg.clip_samples);
                    ref_feats = codec::pseudo_ssl(ref, frozen.cfg);
                }
                lm::TrainExample ex;
                ex.prefix = lm::encode_conditions(
                    lp, m, in_feats, pair.has_reference ? &ref_feats : nullptr,
                    pair.has_caption ? &pair.caption : nullptr);
                ex.history = grid_rows(delayed);
                ex.target = sg::target_sequence(delayed, vocab);
                batch.push_back(std::move(ex));
            }
            std::vector<const lm::TrainExample*> ptrs;
            ptrs.reserve(batch.size());
            for (const auto& ex : batch) ptrs.push_back(&ex);

            lm::TrainReport rep;
            try {
                rep = lm::train_step(lp, g, st.lm_opt, cfg.lm_sched, ptrs);
            } catch (const TrainingFault& e) {
                throw TrainingFault(std::string(e.what()) + " (lm step " +
                                    std::to_string(step) + ")");
            }
            if (!std::isfinite(rep.nll))
                throw TrainingFault("non-finite lm loss at step " + std::to_string(step));
            st.lm_step = step;
            ++res.lm_steps_run;
            res.log.push_back({"lm", step, rep.nll, rep.lr, m});
            emit("lm", step, cfg.lm_steps);
        }
    }
    return res;
}

MetricTable evaluate(const std::vector<std::pair<AudioBuffer, AudioBuffer>>& pairs) {
    if (pairs.empty()) throw InputError("no evaluation pairs");
    MetricTable table;
    table.rows.reserve(pairs.size());
    for (const auto& [ref, est] : pairs) {
        MetricRow row;
        row.stft_loss = dsp::stft_loss(ref, est);
        row.mel_loss = dsp::mel_loss(ref, est);
        row.snr_db = dsp::snr_db(ref, est);
        table.mean.stft_loss += row.stft_loss;
        table.mean.mel_loss += row.mel_loss;
        table.mean.snr_db += row.snr_db;
        table.rows.push_back(row);
    }
    double n = static_cast<double>(table.rows.size());
    table.mean.stft_loss /= n;
    table.mean.mel_loss /= n;
    table.mean.snr_db /= n;
    return table;
}

std::string render_metrics(const MetricTable& table) {
    std::ostringstream os;
    for (size_t i = 0; i < table.rows.size(); ++i) {
        nlohmann::json rec;
        rec["pair"] = i;
        rec["stft_loss"] = table.rows[i].stft_loss;
        rec["mel_loss"] = table.rows[i].mel_loss;
        rec["snr_db"] = table.rows[i].snr_db;
        os << rec.dump() << "\n";
    }
    nlohmann::json mean;
    mean["summary"] = "mean";
    mean["pairs"] = table.rows.size();
    mean["stft_loss"] = table.mean.stft_loss;
    mean["mel_loss"] = table.mean.mel_loss;
    mean["snr_db"] = table.mean.snr_db;
    os << mean.dump() << "\n";
    return os.str();
}

std::string render_loss_records(const std::vector<LossRecord>& log) {
    std::ostringstream os;
    for (const auto& r : log) {
        nlohmann::json rec;
        rec["phase"] = r.phase;
        rec["step"] = r.step;
        rec["loss"] = r.loss;
        rec["lr"] = r.lr;
        if (r.mode) rec["mode"] = sg::mode_name(*r.mode);
        os << rec.dump() << "\n";
    }
    return os.str();
}

}  // namespace utka::pipeline
