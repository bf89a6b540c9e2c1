#include "utka/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "utka/kernels.hpp"
#include "utka/wav.hpp"

namespace utka::simulate {

namespace {

constexpr double kPi = 3.1415926535897932384626433832795;

double mean_power(const std::vector<double>& x) {
    if (x.empty()) return 0.0;
    double s = 0.0;
    for (double v : x) s += v * v;
    return s / static_cast<double>(x.size());
}

double peak_abs(const std::vector<double>& x) {
    double m = 0.0;
    for (double v : x) m = std::max(m, std::fabs(v));
    return m;
}

std::vector<double> loop_to_length(const std::vector<double>& x, size_t n) {
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = x[i % x.size()];
    return out;
}

struct MixParts {
    AudioBuffer mix;
    AudioBuffer component;  // the scaled, looped interferer actually added
    double gain = 0.0;
};

MixParts mix_parts(const AudioBuffer& target, const AudioBuffer& interferer,
                   double ratio_db) {
    if (target.samples.empty() || interferer.samples.empty())
        throw DegenerateError("cannot mix with an empty buffer");
    auto looped = loop_to_length(interferer.samples, target.samples.size());
    double pt = mean_power(target.samples);
    double pi = mean_power(looped);
    if (pt <= 0.0) throw DegenerateError("silent target in mix");
    if (pi <= 0.0) throw DegenerateError("silent interferer in mix");
    double gain = std::sqrt(pt / pi) * std::pow(10.0, -ratio_db / 20.0);

    MixParts out;
    out.gain = gain;
    out.component.sample_rate = target.sample_rate;
    out.component.samples.resize(looped.size());
    out.mix.sample_rate = target.sample_rate;
    out.mix.samples.resize(looped.size());
    for (size_t i = 0; i < looped.size(); ++i) {
        out.component.samples[i] = gain * looped[i];
        out.mix.samples[i] = target.samples[i] + out.component.samples[i];
    }
    return out;
}

// type-7 empirical quantile (linear interpolation between order statistics)
double quantile_sorted(const std::vector<double>& sorted, double q) {
    size_t n = sorted.size();
    if (n == 1) return sorted[0];
    double pos = q * static_cast<double>(n - 1);
    size_t lo = static_cast<size_t>(pos);
    if (lo >= n - 1) return sorted[n - 1];
    double t = pos - static_cast<double>(lo);
    return sorted[lo] * (1.0 - t) + sorted[lo + 1] * t;
}

std::vector<double> lowpass_taps(double cutoff_hz, int sample_rate) {
    constexpr int kTaps = 255;
    constexpr int kCenter = kTaps / 2;
    // design slightly above the nominal cutoff so the passband stays flat
    double fc = 1.075 * cutoff_hz / sample_rate;
    std::vector<double> h(kTaps);
    double sum = 0.0;
    for (int k = 0; k < kTaps; ++k) {
        int m = k - kCenter;
        double v = m == 0 ? 2.0 * fc : std::sin(2.0 * kPi * fc * m) / (kPi * m);
        double w = 0.54 - 0.46 * std::cos(2.0 * kPi * k / (kTaps - 1));
        h[k] = v * w;
        sum += h[k];
    }
    for (auto& v : h) v /= sum;  // unity DC gain
    return h;
}

}  // namespace

void DistortionConfig::validate(int sample_rate) const {
    auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!prob(p_noise) || !prob(p_reverb) || !prob(p_clip) || !prob(p_bandlimit) ||
        !prob(p_packet) || !prob(p_interferer))
        throw ConfigError("distortion probabilities must lie in [0, 1]");
    if (snr_lo > snr_hi || min_q_lo > min_q_hi || max_q_lo > max_q_hi ||
        loss_lo > loss_hi || sir_lo > sir_hi)
        throw ConfigError("distortion range lower bound exceeds upper bound");
    if (cutoffs.empty()) throw ConfigError("bandlimit cutoff set is empty");
    for (double c : cutoffs)
        if (c <= 0.0 || c >= sample_rate / 2.0)
            throw ConfigError("bandlimit cutoff must lie below Nyquist");
    if (packet_frame_ms <= 0.0) throw ConfigError("packet frame length must be positive");
}

ModeProfile ModeProfile::for_mode(Mode m, const DistortionConfig& base) {
    ModeProfile p;
    p.mode = m;
    p.cfg = base;
    if (m == Mode::TSE || m == Mode::rTSE) {
        p.cfg.p_interferer = 1.0;
        p.cfg.sir_lo = -5.0;
        p.cfg.sir_hi = 5.0;
    }
    return p;
}

AudioBuffer mix_at_ratio(const AudioBuffer& target, const AudioBuffer& interferer,
                         double ratio_db) {
    return mix_parts(target, interferer, ratio_db).mix;
}

AudioBuffer clip_by_quantile(const AudioBuffer& audio, double min_q, double max_q) {
    if (!(min_q >= 0.0 && min_q < max_q && max_q <= 1.0))
        throw InputError("clip quantiles must satisfy 0 <= min < max <= 1");
    if (audio.samples.empty()) return audio;
    std::vector<double> sorted = audio.samples;
    std::sort(sorted.begin(), sorted.end());
    double lo = quantile_sorted(sorted, min_q);
    double hi = quantile_sorted(sorted, max_q);
    AudioBuffer out = audio;
    for (auto& v : out.samples) v = std::clamp(v, lo, hi);
    return out;
}

AudioBuffer bandlimit(const AudioBuffer& audio, double cutoff_hz,
                      const std::vector<double>& allowed_cutoffs) {
    bool ok = false;
    for (double c : allowed_cutoffs)
        if (std::fabs(c - cutoff_hz) < 1e-9) ok = true;
    if (!ok) throw ConfigError("bandlimit cutoff is not in the configured set");
    if (cutoff_hz >= audio.sample_rate / 2.0)
        throw ConfigError("bandlimit cutoff must lie below Nyquist");

    auto h = lowpass_taps(cutoff_hz, audio.sample_rate);
    int taps = static_cast<int>(h.size());
    int center = taps / 2;
    std::vector<double> hrev(h.rbegin(), h.rend());

    int n = audio.length();
    std::vector<double> padded(static_cast<size_t>(n) + taps - 1, 0.0);
    std::copy(audio.samples.begin(), audio.samples.end(), padded.begin() + center);
    AudioBuffer out;
    out.sample_rate = audio.sample_rate;
    out.samples.resize(n);
    for (int i = 0; i < n; ++i)
        out.samples[i] = kernels::dot(hrev.data(), padded.data() + i, taps);
    return out;
}

AudioBuffer packet_loss(const AudioBuffer& audio, double loss_rate, double frame_ms,
                        Rng& rng) {
    if (loss_rate < 0.0 || loss_rate > 1.0)
        throw InputError("packet loss rate must lie in [0, 1]");
    if (frame_ms <= 0.0) throw InputError("packet frame length must be positive");
    int frame = std::max(1, static_cast<int>(std::lround(frame_ms * audio.sample_rate / 1000.0)));
    AudioBuffer out = audio;
    int n = audio.length();
    for (int start = 0; start < n; start += frame) {
        bool drop = rng.bernoulli(loss_rate);
        if (drop) {
            int end = std::min(n, start + frame);
            std::fill(out.samples.begin() + start, out.samples.begin() + end, 0.0);
        }
    }
    return out;
}

AudioBuffer reverberate(const AudioBuffer& audio, const AudioBuffer& rir) {
    if (rir.samples.empty()) throw LengthError("empty rir");
    if (rir.length() >= audio.length())
        throw LengthError("rir must be shorter than the audio");
    int n = audio.length(), m = rir.length();
    int full = n + m - 1;
    int size = 1;
    while (size < full) size <<= 1;

    std::vector<dsp::cplx> fa(size), fb(size);
    for (int i = 0; i < n; ++i) fa[i] = dsp::cplx(audio.samples[i], 0.0);
    for (int i = 0; i < m; ++i) fb[i] = dsp::cplx(rir.samples[i], 0.0);
    dsp::fft_inplace(fa.data(), size, false);
    dsp::fft_inplace(fb.data(), size, false);
    for (int i = 0; i < size; ++i) fa[i] *= fb[i];
    dsp::fft_inplace(fa.data(), size, true);

    AudioBuffer out;
    out.sample_rate = audio.sample_rate;
    out.samples.resize(n);
    for (int i = 0; i < n; ++i) out.samples[i] = fa[i].real();

    double pin = peak_abs(audio.samples);
    double pout = peak_abs(out.samples);
    if (pout > 0.0) {
        double s = pin / pout;
        for (auto& v : out.samples) v *= s;
    }
    return out;
}

namespace {

struct ChainResult {
    SimPair pair;
    AudioBuffer interferer_component;
    int interferer_pool_index = -1;
};

ChainResult apply_chain_ex(const AudioBuffer& target, const Pools& pools,
                           const ModeProfile& profile, uint64_t seed,
                           int exclude_speaker) {
    const DistortionConfig& cfg = profile.cfg;
    cfg.validate(target.sample_rate);
    Rng rng(seed);
    ChainResult res;
    res.pair.target = target;
    res.pair.seed = seed;
    AudioBuffer work = target;

    if (rng.bernoulli(cfg.p_noise)) {
        if (pools.noise.empty()) throw ConfigError("noise pool is empty");
        int idx = static_cast<int>(rng.index(static_cast<int64_t>(pools.noise.size())));
        double snr = rng.range(cfg.snr_lo, cfg.snr_hi);
        work = mix_at_ratio(work, pools.noise[idx], snr);
        res.pair.applied.push_back({"noise", {static_cast<double>(idx), snr}});
    }
    if (rng.bernoulli(cfg.p_reverb)) {
        if (pools.rir.empty()) throw ConfigError("rir pool is empty");
        int idx = static_cast<int>(rng.index(static_cast<int64_t>(pools.rir.size())));
        work = reverberate(work, pools.rir[idx]);
        res.pair.applied.push_back({"reverb", {static_cast<double>(idx)}});
    }
    if (rng.bernoulli(cfg.p_clip)) {
        double lo = rng.range(cfg.min_q_lo, cfg.min_q_hi);
        double hi = rng.range(cfg.max_q_lo, cfg.max_q_hi);
        work = clip_by_quantile(work, lo, hi);
        res.pair.applied.push_back({"clip", {lo, hi}});
    }
    if (rng.bernoulli(cfg.p_bandlimit)) {
        int idx = static_cast<int>(rng.index(static_cast<int64_t>(cfg.cutoffs.size())));
        work = bandlimit(work, cfg.cutoffs[idx], cfg.cutoffs);
        res.pair.applied.push_back({"bandlimit", {cfg.cutoffs[idx]}});
    }
    if (rng.bernoulli(cfg.p_packet)) {
        double rate = rng.range(cfg.loss_lo, cfg.loss_hi);
        work = packet_loss(work, rate, cfg.packet_frame_ms, rng);
        res.pair.applied.push_back({"packet", {rate}});
    }
    if (rng.bernoulli(cfg.p_interferer)) {
        std::vector<int> candidates;
        for (size_t i = 0; i < pools.speech.size(); ++i)
            if (exclude_speaker < 0 || pools.speech[i].speaker != exclude_speaker)
                candidates.push_back(static_cast<int>(i));
        if (candidates.empty()) throw ConfigError("interferer pool is empty");
        int pick = candidates[rng.index(static_cast<int64_t>(candidates.size()))];
        double sir = rng.range(cfg.sir_lo, cfg.sir_hi);
        MixParts mp = mix_parts(work, pools.speech[pick].audio, sir);
        work = mp.mix;
        res.interferer_component = mp.component;
        res.interferer_pool_index = pick;
        res.pair.applied.push_back(
            {"interferer", {static_cast<double>(pick), sir, mp.gain}});
    }

    res.pair.input = std::move(work);
    return res;
}

// speakers owning at least two clips, with their clip indices
std::vector<std::pair<int, std::vector<int>>> multi_clip_speakers(const Pools& pools) {
    std::vector<std::pair<int, std::vector<int>>> out;
    for (size_t i = 0; i < pools.speech.size(); ++i) {
        int spk = pools.speech[i].speaker;
        auto it = std::find_if(out.begin(), out.end(),
                               [spk](const auto& p) { return p.first == spk; });
        if (it == out.end())
            out.push_back({spk, {static_cast<int>(i)}});
        else
            it->second.push_back(static_cast<int>(i));
    }
    std::erase_if(out, [](const auto& p) { return p.second.size() < 2; });
    return out;
}

}  // namespace

SimPair apply_chain(const AudioBuffer& target, const Pools& pools,
                    const ModeProfile& profile, uint64_t seed) {
    return apply_chain_ex(target, pools, profile, seed, -1).pair;
}

SimPair make_mode_pair(Mode mode, const Pools& pools, uint64_t seed,
                       const DistortionConfig& base) {
    Rng rng(seed);
    ModeProfile profile = ModeProfile::for_mode(mode, base);

    switch (mode) {
        case Mode::SR: {
            if (pools.speech.empty()) throw ConfigError("speech pool is empty");
            int pick = static_cast<int>(rng.index(static_cast<int64_t>(pools.speech.size())));
            SimPair pair = apply_chain(pools.speech[pick].audio, pools, profile, rng.raw());
            pair.seed = seed;
            return pair;
        }
        case Mode::TSE:
        case Mode::rTSE: {
            auto speakers = multi_clip_speakers(pools);
            if (speakers.empty())
                throw ConfigError("target-extraction modes need a speaker with two clips");
            auto& [spk, clips] = speakers[rng.index(static_cast<int64_t>(speakers.size()))];
            int ti = static_cast<int>(rng.index(static_cast<int64_t>(clips.size())));
            int ri = static_cast<int>(rng.index(static_cast<int64_t>(clips.size() - 1)));
            if (ri >= ti) ++ri;
            const AudioBuffer& t = pools.speech[clips[ti]].audio;
            ChainResult cr = apply_chain_ex(t, pools, profile, rng.raw(), spk);
            SimPair pair = std::move(cr.pair);
            pair.seed = seed;
            pair.has_reference = true;
            pair.reference = pools.speech[clips[ri]].audio;
            if (mode == Mode::rTSE) {
                // the supervision flips: recover the other speaker's part
                pair.target = cr.interferer_component;
            }
            return pair;
        }
        case Mode::VC: {
            auto speakers = multi_clip_speakers(pools);
            if (speakers.empty())
                throw ConfigError("voice-conversion mode needs a speaker with two clips");
            auto& [spk, clips] = speakers[rng.index(static_cast<int64_t>(speakers.size()))];
            (void)spk;
            int ti = static_cast<int>(rng.index(static_cast<int64_t>(clips.size())));
            int ri = static_cast<int>(rng.index(static_cast<int64_t>(clips.size() - 1)));
            if (ri >= ti) ++ri;
            const AudioBuffer& t = pools.speech[clips[ti]].audio;
            static const double kRatios[4] = {0.85, 0.9, 1.1, 1.15};
            double ratio = kRatios[rng.index(4)];
            SimPair pair;
            pair.seed = seed;
            pair.target = t;
            pair.input.sample_rate = t.sample_rate;
            pair.input.samples = dsp::resample_linear(t.samples, ratio);
            pair.input.samples.resize(t.samples.size(), 0.0);  // trim or zero-pad
            pair.has_reference = true;
            pair.reference = pools.speech[clips[ri]].audio;
            pair.applied.push_back({"pitch", {ratio}});
            return pair;
        }
        case Mode::LASS: {
            if (pools.captioned.size() < 2)
                throw ConfigError("caption mode needs at least two captioned clips");
            int ti = static_cast<int>(rng.index(static_cast<int64_t>(pools.captioned.size())));
            int oi = static_cast<int>(rng.index(static_cast<int64_t>(pools.captioned.size() - 1)));
            if (oi >= ti) ++oi;
            const auto& tgt = pools.captioned[ti];
            if (tgt.caption.empty())
                throw TemplateError("captioned clip has no caption text");
            double sir = rng.range(-5.0, 20.0);
            SimPair pair;
            pair.seed = seed;
            pair.target = tgt.audio;
            pair.input = mix_at_ratio(tgt.audio, pools.captioned[oi].audio, sir);
            pair.has_caption = true;
            pair.caption = tgt.caption;
            pair.applied.push_back({"lass_mix", {static_cast<double>(oi), sir}});
            return pair;
        }
    }
    throw InputError("unknown mode value");
}

AudioBuffer make_tone_clip(double f0, int n_partials, int length, int sample_rate,
                           double amp, double phase) {
    AudioBuffer a;
    a.sample_rate = sample_rate;
    a.samples.resize(length);
    for (int i = 0; i < length; ++i) {
        double v = 0.0;
        for (int k = 1; k <= n_partials; ++k) {
            double f = f0 * k;
            if (f >= sample_rate / 2.0) break;
            v += std::pow(0.55, k - 1) * std::sin(2.0 * kPi * f * i / sample_rate + phase * k);
        }
        a.samples[i] = v;
    }
    double p = peak_abs(a.samples);
    if (p > 0.0)
        for (auto& v : a.samples) v *= amp / p;
    return a;
}

Pools make_synthetic_pools(const PoolSpec& spec, uint64_t seed) {
    if (spec.clip_len <= 0 || spec.sample_rate <= 0)
        throw ConfigError("pool spec needs positive clip length and sample rate");
    Rng rng(seed);
    Pools pools;

    for (int i = 0; i < spec.n_noise; ++i) {
        AudioBuffer a;
        a.sample_rate = spec.sample_rate;
        a.samples.resize(spec.clip_len);
        double pole = rng.range(0.3, 0.95);
        double y = 0.0;
        for (int t = 0; t < spec.clip_len; ++t) {
            y = pole * y + (1.0 - pole) * rng.normal();
            a.samples[t] = y;
        }
        double p = std::sqrt(mean_power(a.samples));
        for (auto& v : a.samples) v *= 0.1 / p;
        pools.noise.push_back(std::move(a));
    }

    for (int i = 0; i < spec.n_rir; ++i) {
        double rt60 = rng.range(0.2, 0.8);
        int len = std::min(spec.rir_max_len,
                           static_cast<int>(std::lround(rt60 * spec.sample_rate)));
        len = std::min(len, spec.clip_len - 1);
        AudioBuffer h;
        h.sample_rate = spec.sample_rate;
        h.samples.resize(std::max(8, len));
        h.samples[0] = 1.0;
        double tau = rt60 * spec.sample_rate;
        for (size_t t = 1; t < h.samples.size(); ++t)
            h.samples[t] = std::exp(-6.9077 * static_cast<double>(t) / tau) * 0.3 * rng.normal();
        double p = peak_abs(h.samples);
        for (auto& v : h.samples) v /= p;
        pools.rir.push_back(std::move(h));
    }

    for (int s = 0; s < spec.n_speakers; ++s) {
        double f0 = 100.0 + 23.0 * s;
        for (int u = 0; u < spec.clips_per_speaker; ++u) {
            double vib_rate = rng.range(3.0, 5.0);
            double vib_depth = rng.range(0.004, 0.01);
            double env_rate = rng.range(0.8, 1.6);
            double ph = rng.range(0.0, 2.0 * kPi);
            AudioBuffer a;
            a.sample_rate = spec.sample_rate;
            a.samples.resize(spec.clip_len);
            double rho = 0.5 + 0.05 * (s % 7);
            for (int t = 0; t < spec.clip_len; ++t) {
                double ts = static_cast<double>(t) / spec.sample_rate;
                double f = f0 * (1.0 + vib_depth * std::sin(2.0 * kPi * vib_rate * ts));
                double env = 0.4 + 0.6 * std::fabs(std::sin(kPi * env_rate * ts + ph));
                double v = 0.0;
                for (int k = 1; k <= 3; ++k) {
                    if (f * k >= spec.sample_rate / 2.0) break;
                    v += std::pow(rho, k - 1) * std::sin(2.0 * kPi * f * k * ts + ph * k);
                }
                a.samples[t] = env * v;
            }
            double p = peak_abs(a.samples);
            for (auto& v : a.samples) v *= 0.5 / p;
            pools.speech.push_back({s, std::move(a)});
        }
    }

    for (int i = 0; i < spec.n_captioned; ++i) {
        CaptionedClip c;
        if (i % 2 == 0) {
            double f = 300.0 + 150.0 * i;
            c.audio = make_tone_clip(f, 2, spec.clip_len, spec.sample_rate, 0.4,
                                     rng.range(0.0, kPi));
            c.caption = "steady tone near " + std::to_string(static_cast<int>(f)) + " hz";
        } else {
            AudioBuffer w;
            w.sample_rate = spec.sample_rate;
            w.samples.resize(spec.clip_len);
            for (auto& v : w.samples) v = rng.normal();
            double fc = (i % 4 == 1) ? 2000.0 : 4000.0;
            c.audio = bandlimit(w, fc, {fc});
            double p = peak_abs(c.audio.samples);
            for (auto& v : c.audio.samples) v *= 0.4 / p;
            c.caption = "noise band under " + std::to_string(static_cast<int>(fc)) + " hz";
        }
        pools.captioned.push_back(std::move(c));
    }

    return pools;
}

Pools load_manifest(const std::string& manifest_path) {
    std::ifstream f(manifest_path);
    if (!f) throw IoError("cannot open manifest: " + manifest_path);
    std::filesystem::path base = std::filesystem::path(manifest_path).parent_path();

    Pools pools;
    std::vector<std::string> speaker_names;
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw IoError("manifest line " + std::to_string(line_no) + ": " + e.what());
        }
        if (!rec.contains("id") || !rec.contains("role") || !rec.contains("path"))
            throw IoError("manifest line " + std::to_string(line_no) +
                          ": needs id, role, path");
        std::string id = rec["id"].get<std::string>();
        std::string role = rec["role"].get<std::string>();
        std::string path = (base / rec["path"].get<std::string>()).string();
        AudioBuffer audio = wav::read(path);

        if (role == "noise") {
            pools.noise.push_back(std::move(audio));
        } else if (role == "rir") {
            pools.rir.push_back(std::move(audio));
        } else if (role == "clean" || role == "interferer") {
            std::string spk = id.substr(0, id.find('_'));
            auto it = std::find(speaker_names.begin(), speaker_names.end(), spk);
            int num;
            if (it == speaker_names.end()) {
                num = static_cast<int>(speaker_names.size());
                speaker_names.push_back(spk);
            } else {
                num = static_cast<int>(it - speaker_names.begin());
            }
            pools.speech.push_back({num, std::move(audio)});
        } else if (role == "captioned") {
            if (!rec.contains("caption") || rec["caption"].get<std::string>().empty())
                throw ConfigError("manifest line " + std::to_string(line_no) +
                                  ": captioned clip without caption");
            pools.captioned.push_back({rec["caption"].get<std::string>(), std::move(audio)});
        } else {
            throw ConfigError("manifest line " + std::to_string(line_no) +
                              ": unknown role " + role);
        }
    }
    return pools;
}

}  // namespace utka::simulate
