// End-to-end acceptance gate. Each case checks one numbered release
// criterion against an independent oracle and prints a single
// "CRITERION <n> PASS|FAIL" line, so the suite output doubles as the
// sign-off sheet. Criteria with a stated runtime budget measure it here.

#include "doctest.h"

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "utka/checkpoint.hpp"
#include "utka/cli.hpp"
#include "utka/codec.hpp"
#include "utka/dsp.hpp"
#include "utka/lm.hpp"
#include "utka/optim.hpp"
#include "utka/pipeline.hpp"
#include "utka/quantize.hpp"
#include "utka/seqgrammar.hpp"
#include "utka/simulate.hpp"
#include "utka/wav.hpp"

using namespace utka;
using dsp::AudioBuffer;
namespace sg = utka::seqgrammar;
namespace fs = std::filesystem;

namespace {

struct Stopwatch {
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    double s() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
};

// Collects the verdict for one criterion and prints it exactly once, even
// when an assertion aborts the case mid-way (the destructor sees the
// in-flight exception).
struct Criterion {
    int num;
    bool ok = true;

    explicit Criterion(int n) : num(n) {}
    ~Criterion() {
        bool pass = ok && std::uncaught_exceptions() == 0;
        std::printf("CRITERION %d %s\n", num, pass ? "PASS" : "FAIL");
        std::fflush(stdout);
    }

    bool expect(bool cond, const std::string& what) {
        if (!cond) ok = false;
        CHECK_MESSAGE(cond, what);
        return cond;
    }

    void runtime(double seconds, double budget) {
        char buf[128];
        std::snprintf(buf, sizeof(buf), "runtime %.2f s within the %.0f s budget", seconds,
                      budget);
        expect(seconds < budget, buf);
    }
};

codec::CodecConfig tiny_codec_config() {
    codec::CodecConfig cfg;
    cfg.hidden_dim = 16;
    cfg.ssl_dim = 8;
    cfg.quant_dim = 8;
    cfg.codebook_size = 8;
    return cfg;
}

AudioBuffer random_audio(Rng& rng, int n) {
    AudioBuffer a;
    a.sample_rate = 16000;
    a.samples.resize(n);
    for (auto& v : a.samples) v = rng.range(-0.5, 0.5);
    return a;
}

Mat random_frames(Rng& rng, int t, int d) {
    Mat m(t, d);
    for (auto& v : m.a) v = rng.normal();
    return m;
}

// independent greedy-residual reference, plain loops only
std::vector<std::vector<int>> greedy_oracle(const quantize::RvqStack& s, const Mat& frames) {
    std::vector<std::vector<int>> out(frames.rows, std::vector<int>(s.n_layers()));
    for (int t = 0; t < frames.rows; ++t) {
        Vec r(frames.row(t), frames.row(t) + frames.cols);
        for (int l = 0; l < s.n_layers(); ++l) {
            const auto& cb = s.layers[l];
            int best = 0;
            double bd = std::numeric_limits<double>::infinity();
            for (int e = 0; e < cb.size(); ++e) {
                double d2 = 0.0;
                for (int d = 0; d < cb.dim(); ++d) {
                    double df = r[d] - cb.entries.at(e, d);
                    d2 += df * df;
                }
                if (d2 < bd) {
                    bd = d2;
                    best = e;
                }
            }
            out[t][l] = best;
            for (int d = 0; d < cb.dim(); ++d) r[d] -= cb.entries.at(best, d);
        }
    }
    return out;
}

double power(const std::vector<double>& x) {
    double s = 0.0;
    for (double v : x) s += v * v;
    return s / static_cast<double>(x.size());
}

Mat random_feats(int rows, int cols, uint64_t seed) {
    Rng rng(seed);
    Mat m(rows, cols);
    for (auto& v : m.a) v = rng.normal();
    return m;
}

int argmax(const double* row, int n) {
    int best = 0;
    for (int j = 1; j < n; ++j)
        if (row[j] > row[best]) best = j;
    return best;
}

double masked_accuracy(const lm::LMParams& p, const std::vector<lm::TrainExample>& exs) {
    long ok = 0, n = 0;
    for (const auto& ex : exs) {
        lm::StepLogits lg = lm::forward(p, ex.prefix, ex.history, nullptr);
        for (int s = 0; s < lg.steps; ++s)
            for (int l = 0; l < 4; ++l) {
                if (!ex.target.mask[s][l]) continue;
                ok += argmax(lg.layer[l].row(s), lg.layer[l].cols) == ex.target.labels[s][l];
                ++n;
            }
    }
    return n ? static_cast<double>(ok) / static_cast<double>(n) : 0.0;
}

bool same_samples(const dsp::AudioBuffer& a, const dsp::AudioBuffer& b) {
    return a.samples.size() == b.samples.size() &&
           std::memcmp(a.samples.data(), b.samples.data(),
                       a.samples.size() * sizeof(double)) == 0;
}

struct TmpDir {
    fs::path path;

    TmpDir() {
        static int counter = 0;
        path = fs::temp_directory_path() /
               ("utka_accept_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::create_directories(path);
    }
    ~TmpDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE_MESSAGE(in.good(), "readable file ", path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void spit(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    REQUIRE(out.good());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("criterion 1: token rate laws") {
    Criterion c(1);
    Stopwatch sw;

    codec::CodecConfig cfg = tiny_codec_config();
    c.expect(cfg.downsample_ratio == 640, "codec downsamples by 640 samples per frame");
    c.expect(16000 / cfg.downsample_ratio == 25 && 16000 % cfg.downsample_ratio == 0,
             "640x downsampling of 16 kHz audio is exactly 25 frames per second");

    Rng rng(0xacc1);
    codec::CodecParams p = codec::CodecParams::make(cfg, rng);

    int bad = -1;
    for (int trial = 0; trial < 100 && bad < 0; ++trial) {
        int len = 1 + static_cast<int>(rng.index(20000));
        AudioBuffer a = random_audio(rng, len);
        codec::DualTokens t = codec::encode(p, a);
        int want = (len + 639) / 640;  // independent ceil
        sg::TokenGrid g = sg::interleave(t.acoustic, t.semantic);
        bool fine = t.acoustic.steps == want && t.acoustic.rate == 25.0 &&
                    t.semantic.steps == want && t.semantic.rate == 25.0 &&
                    g.steps == 2 * want && g.rate == 50.0;
        if (!fine) bad = len;
    }
    c.expect(bad < 0, "acoustic grids run at 25 rows/s and interleaved grids at 50 rows/s "
                      "for 100 random clip lengths (first bad length " +
                          std::to_string(bad) + ")");
    c.runtime(sw.s(), 1.0);
}

TEST_CASE("criterion 2: delay and interleave algebra") {
    Criterion c(2);
    Stopwatch sw;

    auto v = sg::Vocabulary::make(64);

    // single-row worked example: layer l shifts by l rows
    sg::TokenGrid one(1, 50.0, sg::GridKind::interleaved);
    one.at(0, 0) = 10;
    one.at(0, 1) = 11;
    one.at(0, 2) = 12;
    one.at(0, 3) = 13;
    sg::TokenGrid d1 = sg::apply_delay(one, v.pad);
    int32_t P = static_cast<int32_t>(v.pad);
    std::vector<std::vector<int32_t>> want{
        {10, P, P, P}, {P, 11, P, P}, {P, P, 12, P}, {P, P, P, 13}};
    bool layout = d1.steps == 4 && d1.kind == sg::GridKind::delayed;
    for (int t = 0; t < 4 && layout; ++t)
        for (int l = 0; l < 4; ++l)
            if (d1.at(t, l) != want[t][l]) layout = false;
    c.expect(layout, "single-row delay example matches the shift-by-layer layout");

    Rng rng(0xacc2);
    int bad = -1;
    for (int trial = 0; trial < 10000 && bad < 0; ++trial) {
        int T = 1 + static_cast<int>(rng.index(30));
        sg::TokenGrid a(T, 25.0, sg::GridKind::acoustic);
        sg::TokenGrid s(T, 25.0, sg::GridKind::semantic);
        for (auto& cell : a.cells) cell = static_cast<int32_t>(rng.index(64));
        for (auto& cell : s.cells) cell = static_cast<int32_t>(rng.index(64));

        sg::TokenGrid g = sg::interleave(a, s);
        auto [a2, s2] = sg::deinterleave(g);
        sg::TokenGrid delayed = sg::apply_delay(g, v.pad);
        auto back = sg::remove_delay(delayed, v.pad);

        bool fine = a2.cells == a.cells && s2.cells == s.cells && !back.degenerate &&
                    back.grid.cells == g.cells && back.grid.steps == g.steps &&
                    back.grid.kind == sg::GridKind::interleaved &&
                    delayed.steps == g.steps + 3;
        if (!fine) bad = trial;
    }
    c.expect(bad < 0, "interleave/deinterleave and apply_delay/remove_delay invert exactly "
                      "on 10000 fuzzed grids (first bad trial " +
                          std::to_string(bad) + ")");
    c.runtime(sw.s(), 5.0);
}

TEST_CASE("criterion 3: residual quantizer against brute force") {
    Criterion c(3);
    Stopwatch sw;

    Rng rng(0xacc3);
    auto toy = quantize::RvqStack::make(4, 64, 64, rng);
    Mat frames = random_frames(rng, 1000, 64);
    auto got = quantize::rvq_encode(toy, frames);
    c.expect(got.indices == greedy_oracle(toy, frames),
             "1000 random frames match brute-force greedy-residual search on a 4x64x64 stack");

    int bad_layers = 0, bad_size = 0;
    for (int layers = 1; layers <= 3 && !bad_layers; ++layers)
        for (int size = 2; size <= 8; ++size) {
            auto s = quantize::RvqStack::make(layers, size, 4, rng);
            Mat f = random_frames(rng, 200, 4);
            if (quantize::rvq_encode(s, f).indices != greedy_oracle(s, f)) {
                bad_layers = layers;
                bad_size = size;
                break;
            }
        }
    c.expect(bad_layers == 0, "every stack shape up to 8 entries and 3 layers matches the "
                              "oracle (first bad " +
                                  std::to_string(bad_layers) + " layers x " +
                                  std::to_string(bad_size) + " entries)");
    c.runtime(sw.s(), 30.0);
}

TEST_CASE("criterion 4: conditioning grammar") {
    Criterion c(4);

    auto v = sg::Vocabulary::make(1024);
    sg::BlockLengths len;
    len.input = 125;
    len.reference = 90;
    len.caption = 7;

    auto sr = sg::build_conditioning(sg::Mode::SR, len, v);
    c.expect(sr.elements.size() == 4 && sr.elements[0].id == v.t_sr &&
                 sr.elements[1].id == v.i_start &&
                 sr.elements[2].kind == sg::CondElement::Kind::block &&
                 sr.elements[2].source == sg::CondElement::Source::input &&
                 sr.elements[2].length == 125 && sr.elements[3].id == v.s_sep,
             "regeneration template is task, input marker, input block, separator");

    auto tse = sg::build_conditioning(sg::Mode::TSE, len, v);
    c.expect(tse.elements.size() == 6 && tse.elements[0].id == v.t_tse &&
                 tse.elements[1].id == v.r_start &&
                 tse.elements[2].source == sg::CondElement::Source::reference &&
                 tse.elements[2].length == 90 && tse.elements[3].id == v.i_start &&
                 tse.elements[4].source == sg::CondElement::Source::input &&
                 tse.elements[4].length == 125 && tse.elements[5].id == v.s_sep,
             "extraction template is task, reference marker, reference block, input marker, "
             "input block, separator");

    auto rtse = sg::build_conditioning(sg::Mode::rTSE, len, v);
    bool rtse_tail = rtse.elements.size() == tse.elements.size();
    for (size_t i = 1; i < tse.elements.size() && rtse_tail; ++i)
        rtse_tail = rtse.elements[i] == tse.elements[i];
    c.expect(rtse.elements[0].id == v.t_rtse && rtse_tail,
             "reversed extraction differs from extraction only in the task id");

    auto vc = sg::build_conditioning(sg::Mode::VC, len, v);
    bool vc_tail = vc.elements.size() == tse.elements.size();
    for (size_t i = 1; i < tse.elements.size() && vc_tail; ++i)
        vc_tail = vc.elements[i] == tse.elements[i];
    c.expect(vc.elements[0].id == v.t_vc && vc_tail,
             "conversion uses the extraction layout under its own task id");

    auto lass = sg::build_conditioning(sg::Mode::LASS, len, v);
    c.expect(lass.elements.size() == 6 && lass.elements[0].id == v.t_lass &&
                 lass.elements[1].id == v.c_start &&
                 lass.elements[2].source == sg::CondElement::Source::caption &&
                 lass.elements[2].length == 7 && lass.elements[3].id == v.i_start &&
                 lass.elements[4].source == sg::CondElement::Source::input &&
                 lass.elements[4].length == 125 && lass.elements[5].id == v.s_sep,
             "captioned template is task, caption marker, caption block, input marker, "
             "input block, separator");

    auto throws_template = [&](sg::Mode m, const sg::BlockLengths& l) {
        try {
            sg::build_conditioning(m, l, v);
        } catch (const TemplateError&) {
            return true;
        } catch (...) {
        }
        return false;
    };
    sg::BlockLengths only_input;
    only_input.input = 50;
    sg::BlockLengths nothing;
    c.expect(throws_template(sg::Mode::TSE, only_input),
             "extraction without a reference raises the template error");
    c.expect(throws_template(sg::Mode::rTSE, only_input),
             "reversed extraction without a reference raises the template error");
    c.expect(throws_template(sg::Mode::VC, only_input),
             "conversion without a reference raises the template error");
    c.expect(throws_template(sg::Mode::LASS, only_input),
             "captioned extraction without a caption raises the template error");
    c.expect(throws_template(sg::Mode::SR, nothing),
             "regeneration without an input raises the template error");
}

TEST_CASE("criterion 5: spectral analysis and losses") {
    Criterion c(5);

    // configuration in force: 1024-point window, 256 hop, 100 mel bands
    Rng rng(0xacc5);
    AudioBuffer a = random_audio(rng, 16384);
    auto s = dsp::stft(a);
    c.expect(s.bins == 513, "default analysis uses a 1024-point window");
    auto y = dsp::istft(s);
    c.expect(y.length() == (s.frames - 1) * 256 + 1024, "default analysis hops by 256");
    auto fb = dsp::MelFilterbank::make(16000, 1024);
    c.expect(fb.n_mels == 100 && fb.weights.rows == 100 && fb.bins == 513,
             "default filterbank carries 100 mel bands over 513 bins");

    int n = std::min(a.length(), y.length());
    AudioBuffer ref, est;
    ref.samples.assign(a.samples.begin() + 1024, a.samples.begin() + (n - 1024));
    est.samples.assign(y.samples.begin() + 1024, y.samples.begin() + (n - 1024));
    double snr = dsp::snr_db(ref, est);
    c.expect(snr > 60.0,
             "overlap-add round trip reaches " + std::to_string(snr) + " dB interior SNR");

    c.expect(dsp::stft_loss(a, a) == 0.0, "spectral loss vanishes on identical inputs");
    c.expect(dsp::mel_loss(a, a) == 0.0, "mel loss vanishes on identical inputs");

    AudioBuffer zero;
    zero.samples.assign(a.samples.size(), 0.0);
    AudioBuffer a2 = a;
    for (auto& vv : a2.samples) vv *= 2.0;
    double l1 = dsp::mel_loss(a, zero), l2 = dsp::mel_loss(a2, zero);
    c.expect(std::fabs(l2 - 2.0 * l1) <= 1e-9 * std::max(1.0, l2),
             "mel loss is linear under magnitude doubling to 1e-9 relative");
    double s1 = dsp::stft_loss(a, zero), s2 = dsp::stft_loss(a2, zero);
    c.expect(std::fabs(s2 - 2.0 * s1) <= 1e-9 * std::max(1.0, s2),
             "spectral loss is linear under magnitude doubling to 1e-9 relative");
}

TEST_CASE("criterion 6: simulation statistics") {
    Criterion c(6);
    Stopwatch sw;

    // occurrence frequencies against configured probabilities
    simulate::PoolSpec spec;
    spec.clip_len = 3200;
    simulate::Pools pools = simulate::make_synthetic_pools(spec, 100);
    auto profile = simulate::ModeProfile::for_mode(sg::Mode::SR);
    const int kTrials = 10000;
    std::map<std::string, int> hits;
    for (int t = 0; t < kTrials; ++t) {
        AudioBuffer target = pools.speech[t % pools.speech.size()].audio;
        simulate::SimPair p = simulate::apply_chain(target, pools, profile, 5000 + t);
        for (const auto& d : p.applied) ++hits[d.id];
    }
    auto freq_ok = [&](const std::string& id, double want) {
        double got = hits[id] / static_cast<double>(kTrials);
        char buf[96];
        std::snprintf(buf, sizeof(buf), "%s frequency %.4f within 0.02 of %.2f", id.c_str(),
                      got, want);
        return c.expect(std::fabs(got - want) < 0.02, buf);
    };
    freq_ok("noise", 0.5);
    freq_ok("reverb", 0.4);
    freq_ok("clip", 0.3);
    freq_ok("bandlimit", 0.3);
    freq_ok("packet", 0.3);
    freq_ok("interferer", 0.2);

    // mix ratio accuracy
    Rng rng(0xacc6);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        int nt = 64 + static_cast<int>(rng.index(2000));
        int ni = 32 + static_cast<int>(rng.index(3000));
        AudioBuffer t = random_audio(rng, nt);
        AudioBuffer i = random_audio(rng, ni);
        double ratio = rng.range(-15.0, 25.0);
        AudioBuffer mix = simulate::mix_at_ratio(t, i, ratio);
        std::vector<double> comp(t.samples.size());
        for (size_t k = 0; k < comp.size(); ++k) comp[k] = mix.samples[k] - t.samples[k];
        double achieved = 10.0 * std::log10(power(t.samples) / power(comp));
        worst = std::max(worst, std::fabs(achieved - ratio));
    }
    c.expect(worst < 0.01, "mix_at_ratio hits the requested dB within 0.01 over 1000 draws "
                           "(worst " +
                               std::to_string(worst) + ")");

    // per-mode ratio ranges
    simulate::PoolSpec pair_spec;
    pair_spec.clip_len = 4800;
    simulate::Pools pair_pools = simulate::make_synthetic_pools(pair_spec, 200);
    double tse_lo = 1e9, tse_hi = -1e9;
    bool tse_shape = true;
    for (uint64_t seed = 0; seed < 200; ++seed) {
        simulate::SimPair p = simulate::make_mode_pair(sg::Mode::TSE, pair_pools, seed);
        if (p.applied.empty() || p.applied.back().id != "interferer") {
            tse_shape = false;
            break;
        }
        double sir = p.applied.back().params[1];
        tse_lo = std::min(tse_lo, sir);
        tse_hi = std::max(tse_hi, sir);
    }
    c.expect(tse_shape && tse_lo >= -5.0 && tse_hi <= 5.0,
             "extraction rival ratios stay inside [-5, 5] dB over 200 draws");

    double lass_lo = 1e9, lass_hi = -1e9;
    bool lass_shape = true;
    for (uint64_t seed = 0; seed < 200; ++seed) {
        simulate::SimPair p = simulate::make_mode_pair(sg::Mode::LASS, pair_pools, seed);
        if (p.applied.size() != 1 || p.applied[0].id != "lass_mix") {
            lass_shape = false;
            break;
        }
        double sir = p.applied[0].params[1];
        lass_lo = std::min(lass_lo, sir);
        lass_hi = std::max(lass_hi, sir);
    }
    c.expect(lass_shape && lass_lo >= -5.0 && lass_hi <= 20.0,
             "captioned mixture ratios stay inside [-5, 20] dB over 200 draws");

    c.runtime(sw.s(), 120.0);
}

TEST_CASE("criterion 7: gradients against central differences") {
    Criterion c(7);
    Stopwatch sw;

    // codec composite loss; quantization frozen at the base point so the
    // finite differences probe the same straight-through surrogate
    {
        codec::CodecConfig cfg = tiny_codec_config();
        Rng rng(57);
        codec::CodecParams p = codec::CodecParams::make(cfg, rng);
        Rng arng(0xacc7);
        AudioBuffer a = random_audio(arng, 1920);
        for (auto& v : a.samples) v *= 0.6;

        codec::FrozenQuant fz = codec::freeze_quantization(p, a);
        codec::CodecGrads grads = codec::CodecGrads::make(p);
        codec::generator_step(p, a, &grads, &fz);

        auto pv = codec::param_views(p);
        auto gv = codec::grad_views(grads);
        double gmax = 0.0;
        for (const auto& v : gv)
            for (size_t i = 0; i < v.size; ++i) gmax = std::max(gmax, std::fabs(v.data[i]));
        c.expect(gmax > 0.0, "codec backward produces nonzero gradients");

        Rng pick(5);
        int tested = 0;
        double worst = 0.0;
        const double eps = 1e-5;
        for (size_t vi = 0; vi < pv.size(); ++vi) {
            int found = 0;
            for (int attempt = 0; attempt < 80 && found < 2; ++attempt) {
                size_t j = pick.index(static_cast<int64_t>(pv[vi].size));
                double analytic = gv[vi].data[j];
                if (std::fabs(analytic) < 1e-6 * gmax) continue;
                double saved = pv[vi].data[j];
                pv[vi].data[j] = saved + eps;
                double up = codec::generator_step(p, a, nullptr, &fz).loss.total;
                pv[vi].data[j] = saved - eps;
                double dn = codec::generator_step(p, a, nullptr, &fz).loss.total;
                pv[vi].data[j] = saved;
                double fd = (up - dn) / (2.0 * eps);
                worst = std::max(worst, std::fabs(fd - analytic) / std::fabs(analytic));
                ++found;
                ++tested;
            }
        }
        c.expect(tested >= 20, "codec check covered " + std::to_string(tested) +
                                   " sampled parameters (needs 20)");
        c.expect(worst < 1e-4, "codec worst relative error " + std::to_string(worst) +
                                   " under 1e-4");
    }

    // token-lm negative log likelihood on a captioned prefix
    {
        lm::LMConfig cfg = lm::LMConfig::preset("toy", 64, 32);
        Rng rng(0x71);
        lm::LMParams p = lm::LMParams::make(cfg, rng);

        Mat feats = random_feats(2, cfg.ssl_dim, 7);
        std::string caption = "low hum behind chimes";
        lm::Prefix pre = lm::encode_conditions(p, sg::Mode::LASS, feats, nullptr, &caption);
        Rng hr(41);
        std::vector<lm::TokenRow> hist(6);
        for (auto& r : hist)
            for (int l = 0; l < 4; ++l) r[l] = static_cast<int32_t>(hr.index(64));
        Rng tr_rng(43);
        sg::TargetLayout target;
        target.labels.resize(7);
        target.mask.resize(7);
        for (int s = 0; s < 7; ++s)
            for (int l = 0; l < 4; ++l) {
                target.labels[s][l] = static_cast<int32_t>(tr_rng.index(64));
                target.mask[s][l] = 1;
            }
        target.mask[1][0] = 0;  // keep a masked hole in play

        lm::ForwardTrace tr;
        lm::StepLogits lg = lm::forward(p, pre, hist, &tr);
        lm::LMLoss base = lm::nll_loss(lg, target);
        lm::LMGrads g = lm::LMGrads::make(p);
        lm::backward(p, pre, hist, tr, lg, target, 1.0 / base.scored, g);

        auto pv = lm::param_views(p);
        auto gv = lm::grad_views(g);
        double gmax = 0.0;
        for (const auto& v : gv)
            for (size_t i = 0; i < v.size; ++i) gmax = std::max(gmax, std::fabs(v.data[i]));
        c.expect(gmax > 0.0, "token-lm backward produces nonzero gradients");

        auto loss_at = [&]() {
            return lm::nll_loss(lm::forward(p, pre, hist, nullptr), target).nll;
        };
        Rng pick(0x81);
        int tested = 0;
        double worst = 0.0;
        for (int attempt = 0; attempt < 600 && tested < 20; ++attempt) {
            int vi = static_cast<int>(pick.index(static_cast<int64_t>(pv.size())));
            size_t idx = static_cast<size_t>(pick.index(static_cast<int64_t>(pv[vi].size)));
            double an = gv[vi].data[idx];
            if (std::fabs(an) < 1e-6 * gmax) continue;
            double saved = pv[vi].data[idx];
            double eps = 1e-5 * std::max(1.0, std::fabs(saved));
            pv[vi].data[idx] = saved + eps;
            double lp = loss_at();
            pv[vi].data[idx] = saved - eps;
            double lmn = loss_at();
            pv[vi].data[idx] = saved;
            double fd = (lp - lmn) / (2.0 * eps);
            worst = std::max(worst, std::fabs(fd - an) / std::max(std::fabs(an), 1e-10));
            ++tested;
        }
        c.expect(tested >= 20, "token-lm check covered " + std::to_string(tested) +
                                   " sampled parameters (needs 20)");
        c.expect(worst < 1e-4, "token-lm worst relative error " + std::to_string(worst) +
                                   " under 1e-4");
    }

    c.runtime(sw.s(), 120.0);
}

TEST_CASE("criterion 8: overfit memorization") {
    Criterion c(8);
    Stopwatch sw;

    // token-lm memorizes 16 synthetic regeneration sequences
    {
        lm::LMConfig cfg = lm::LMConfig::preset("toy", 64, 32);
        c.expect(cfg.depth == 2 && cfg.embed == 64 && cfg.heads == 4,
                 "toy transformer is 2 blocks, width 64, 4 heads");
        Rng rng(0xb1);
        lm::LMParams p = lm::LMParams::make(cfg, rng);
        auto vocab = sg::Vocabulary::make(64);

        const int kSeqs = 16, kContent = 6;
        std::vector<lm::TrainExample> exs(kSeqs);
        std::vector<sg::TokenGrid> originals(kSeqs);
        Rng data(0xc1);
        for (int i = 0; i < kSeqs; ++i) {
            sg::TokenGrid grid(kContent, 50.0, sg::GridKind::interleaved);
            for (auto& cell : grid.cells) cell = static_cast<int32_t>(data.index(64));
            originals[i] = grid;
            sg::TokenGrid delayed = sg::apply_delay(grid, vocab.pad);
            exs[i].history.resize(delayed.steps);
            for (int t = 0; t < delayed.steps; ++t)
                for (int l = 0; l < 4; ++l) exs[i].history[t][l] = delayed.at(t, l);
            exs[i].target = sg::target_sequence(delayed, vocab);
            exs[i].prefix =
                lm::encode_conditions(p, sg::Mode::SR, random_feats(3, cfg.ssl_dim, 1000 + i));
        }
        std::vector<const lm::TrainExample*> batch;
        for (const auto& ex : exs) batch.push_back(&ex);

        lm::LMGrads g = lm::LMGrads::make(p);
        optim::AdamW opt;
        optim::ScheduleConfig sched;
        sched.peak_lr = 2e-3;
        sched.warmup_steps = 50;
        sched.epoch_steps = 100000;
        sched.decay = 1.0;

        double acc = 0.0;
        int steps = 0;
        for (steps = 1; steps <= 2000; ++steps) {
            lm::train_step(p, g, opt, sched, batch);
            if (steps % 25 == 0) {
                acc = masked_accuracy(p, exs);
                if (acc >= 0.999) break;
            }
        }
        c.expect(acc > 0.99, "token accuracy " + std::to_string(acc) + " above 0.99 after " +
                                 std::to_string(steps) + " of at most 2000 steps");

        int exact = 0;
        for (int i = 0; i < kSeqs; ++i) {
            auto fixed = lm::generate(p, exs[i].prefix, 16, {}, kContent);
            exact += !fixed.truncated && fixed.grid.steps == kContent &&
                     fixed.grid.cells == originals[i].cells && fixed.end_step;
        }
        c.expect(exact == kSeqs, "greedy generation reproduces " + std::to_string(exact) +
                                     " of 16 training grids exactly");
    }

    // codec halves its spectral reconstruction loss on a 32-clip corpus
    {
        codec::CodecConfig cfg;  // library defaults are already desk scale
        Rng rng(2024);
        codec::CodecParams p = codec::CodecParams::make(cfg, rng);

        std::vector<AudioBuffer> corpus;
        for (int j = 0; j < 32; ++j)
            corpus.push_back(
                simulate::make_tone_clip(100.0 + 12.5 * j, 1, 8000, 16000, 0.4, 0.2 * j));

        // seed both codebooks from the whole corpus before the first step
        {
            std::vector<Mat> afs, sfs;
            int rows = 0;
            for (const auto& clip : corpus) {
                afs.push_back(codec::acoustic_features(p, clip));
                sfs.push_back(codec::semantic_features(p, clip));
                rows += afs.back().rows;
            }
            Mat af(rows, cfg.quant_dim), sf(rows, cfg.quant_dim);
            int r = 0;
            for (size_t i = 0; i < afs.size(); ++i) {
                std::copy(afs[i].a.begin(), afs[i].a.end(), af.row(r));
                std::copy(sfs[i].a.begin(), sfs[i].a.end(), sf.row(r));
                r += afs[i].rows;
            }
            quantize::kmeanspp_init(p.acoustic_vq, af, rng);
            quantize::kmeanspp_init(p.semantic_vq, sf, rng);
        }

        auto corpus_mel = [&](const codec::CodecParams& cp) {
            double s = 0.0;
            for (const auto& clip : corpus) s += codec::generator_loss(cp, clip).mel;
            return s / static_cast<double>(corpus.size());
        };
        double mel0 = corpus_mel(p);
        c.expect(mel0 > 0.0, "untrained corpus loss is positive");

        auto pv = codec::param_views(p);
        size_t total = 0;
        for (const auto& v : pv) total += v.size;
        optim::AdamW opt;
        opt.init(total);
        optim::ScheduleConfig sched;
        sched.kind = optim::ScheduleConfig::Kind::cosine;
        sched.peak_lr = 5e-3;
        sched.total_steps = 4000;

        const int kBatch = 8;
        codec::CodecGrads grads = codec::CodecGrads::make(p);
        for (int step = 1; step <= 2000; ++step) {
            grads.zero();
            for (int b = 0; b < kBatch; ++b) {
                const AudioBuffer& clip =
                    corpus[(static_cast<size_t>(step - 1) * kBatch + b) % corpus.size()];
                codec::CodecStep st = codec::generator_step(p, clip, &grads);
                quantize::codebook_update(p.acoustic_vq, st.acoustic_q, 0.99, 1e-3, rng);
                quantize::codebook_update(p.semantic_vq, st.semantic_q, 0.99, 1e-3, rng);
            }
            auto gv = codec::grad_views(grads);
            for (auto& v : gv)
                for (size_t i = 0; i < v.size; ++i) v.data[i] /= kBatch;
            double lr = sched.lr_at(step);
            opt.begin_step();
            size_t off = 0;
            for (size_t i = 0; i < pv.size(); ++i) {
                opt.update_span(lr, pv[i].data, gv[i].data, pv[i].size, off);
                off += pv[i].size;
            }
        }

        double mel1 = corpus_mel(p);
        c.expect(mel1 <= 0.5 * mel0, "2000 steps cut the mel loss from " +
                                         std::to_string(mel0) + " to " + std::to_string(mel1) +
                                         " (at or below half)");
    }

    c.runtime(sw.s(), 600.0);
}

TEST_CASE("criterion 9: two-pass separation procedure") {
    Criterion c(9);

    const int kLen = 3840;  // six frames exactly, so tracks need no cropping

    AudioBuffer A = simulate::make_tone_clip(200.0, 3, kLen, 16000, 0.4, 0.0);
    AudioBuffer B = simulate::make_tone_clip(410.0, 2, kLen, 16000, 0.4, 0.5);
    Rng nr(7);
    AudioBuffer noise;
    noise.sample_rate = 16000;
    noise.samples.resize(kLen);
    for (auto& v : noise.samples) v = 0.3 * nr.normal();

    simulate::Pools pools;
    pools.speech.push_back({0, A});
    pools.speech.push_back({1, B});
    pools.noise.push_back(noise);

    AudioBuffer mixture = simulate::mix_at_ratio(A, B, 6.0);

    // the codec memorizes both sources
    codec::CodecConfig ccfg;
    Rng crng(2024);
    Rng lrng(0xb2);
    codec::CodecParams cp = codec::CodecParams::make(ccfg, crng);
    lm::LMParams lp = lm::LMParams::make(
        lm::LMConfig::preset("toy", ccfg.codebook_size, ccfg.ssl_dim), lrng);

    pipeline::DriverConfig dcfg;
    dcfg.codec_steps = 800;
    dcfg.codec_batch = 4;
    dcfg.clip_samples = kLen;
    dcfg.codec_sched.kind = optim::ScheduleConfig::Kind::cosine;
    dcfg.codec_sched.peak_lr = 5e-3;
    dcfg.codec_sched.total_steps = 1600;
    dcfg.seed = 5;
    pipeline::DriverState st;
    pipeline::train_driver(cp, lp, st, pools, dcfg);

    AudioBuffer a_hat = codec::decode(cp, codec::encode(cp, A));
    double rec_a = dsp::mel_loss(a_hat, A);
    // fixture gate: without a codec that reconstructs its sources more
    // faithfully than the rival source does, the ordering oracle cannot bind
    REQUIRE_MESSAGE(rec_a < dsp::mel_loss(B, A), "codec reconstruction ", rec_a);

    // the token-lm memorizes regeneration of A plus reversed extraction of B
    auto vocab = sg::Vocabulary::make(cp.cfg.codebook_size);
    auto make_ex = [&](sg::Mode mode, const AudioBuffer& input, const AudioBuffer* ref,
                       const AudioBuffer& target) {
        lm::TrainExample ex;
        codec::DualTokens tt = codec::encode(cp, target);
        sg::TokenGrid delayed = sg::apply_delay(sg::interleave(tt.acoustic, tt.semantic),
                                                vocab.pad);
        ex.history.resize(delayed.steps);
        for (int t = 0; t < delayed.steps; ++t)
            for (int l = 0; l < 4; ++l) ex.history[t][l] = delayed.at(t, l);
        ex.target = sg::target_sequence(delayed, vocab);
        Mat in_feats = codec::pseudo_ssl(input, cp.cfg);
        Mat ref_feats;
        if (ref) ref_feats = codec::pseudo_ssl(*ref, cp.cfg);
        ex.prefix = lm::encode_conditions(lp, mode, in_feats, ref ? &ref_feats : nullptr,
                                          nullptr);
        return ex;
    };
    std::vector<lm::TrainExample> exs;
    exs.push_back(make_ex(sg::Mode::SR, mixture, nullptr, A));
    exs.push_back(make_ex(sg::Mode::rTSE, mixture, &a_hat, B));
    std::vector<const lm::TrainExample*> batch;
    for (const auto& e : exs) batch.push_back(&e);

    lm::LMGrads g = lm::LMGrads::make(lp);
    optim::AdamW opt;
    optim::ScheduleConfig sched;
    sched.peak_lr = 2e-3;
    sched.warmup_steps = 50;
    sched.epoch_steps = 1000;
    sched.decay = 1.0;
    double acc = 0.0;
    for (int step = 1; step <= 2000; ++step) {
        lm::train_step(lp, g, opt, sched, batch);
        if (step % 25 == 0 && (acc = masked_accuracy(lp, exs)) >= 0.999) break;
    }
    REQUIRE_MESSAGE(acc >= 0.999, "fixture gate: the pair corpus must be memorized");

    pipeline::TaskResult ss = pipeline::run_ss(cp, lp, mixture);
    c.expect(ss.tracks.size() == 2, "separation emits exactly two tracks");
    REQUIRE(ss.tracks.size() == 2);
    c.expect(ss.tracks[0].samples.size() == mixture.samples.size() &&
                 ss.tracks[1].samples.size() == mixture.samples.size(),
             "both tracks carry the mixture length");

    // pass-2 conditioning uses the reversed-extraction task id with a
    // reference block
    REQUIRE(ss.conditions.size() == 2);
    c.expect(ss.conditions[0].elements[0].id == vocab.t_sr,
             "pass 1 conditions with the regeneration task id");
    c.expect(ss.conditions[1].elements[0].id == vocab.t_rtse,
             "pass 2 conditions with the reversed-extraction task id");
    bool has_ref = false;
    for (const auto& el : ss.conditions[1].elements)
        if (el.kind == sg::CondElement::Kind::block &&
            el.source == sg::CondElement::Source::reference)
            has_ref = true;
    c.expect(has_ref, "pass 2 template carries a reference block");

    // and that reference is the pass-1 output: a direct reversed-extraction
    // run conditioned on track 0 reproduces track 1 sample for sample
    pipeline::TaskRequest rt;
    rt.mode = sg::Mode::rTSE;
    rt.input = mixture;
    rt.reference = ss.tracks[0];
    rt.seed = mix_seed(1, 2);
    pipeline::TaskResult direct = pipeline::run_task(cp, lp, rt);
    c.expect(same_samples(direct.tracks[0], ss.tracks[1]),
             "pass 2 equals a direct reversed-extraction run on the pass-1 track");

    // on the memorized corpus the tracks assign to sources in energy order
    double t0A = dsp::mel_loss(ss.tracks[0], A), t0B = dsp::mel_loss(ss.tracks[0], B);
    double t1A = dsp::mel_loss(ss.tracks[1], A), t1B = dsp::mel_loss(ss.tracks[1], B);
    c.expect(t0A < t0B, "track 0 sits closer to the dominant source");
    c.expect(t1B < t1A, "track 1 sits closer to the quieter source");
    c.expect(t0A < t1A, "the dominant source belongs to track 0, not track 1");
}

TEST_CASE("criterion 10: byte-exact reproducibility") {
    Criterion c(10);
    TmpDir dir;
    auto run = [](const std::vector<std::string>& args) { return cli::run(args); };

    // duplicate simulation runs produce identical trees
    std::string simA = dir.file("simA"), simB = dir.file("simB");
    REQUIRE(run({"simulate", "--mode", "tse", "--count", "2", "--seed", "11", "--out",
                 simA}) == 0);
    REQUIRE(run({"simulate", "--mode", "tse", "--count", "2", "--seed", "11", "--out",
                 simB}) == 0);
    bool sim_same = true;
    int sim_files = 0;
    for (const auto& ent : fs::directory_iterator(simA)) {
        ++sim_files;
        std::string name = ent.path().filename().string();
        if (slurp(ent.path().string()) != slurp((fs::path(simB) / name).string()))
            sim_same = false;
    }
    c.expect(sim_same && sim_files > 0,
             "duplicate simulation runs are byte-identical across " +
                 std::to_string(sim_files) + " files");

    // duplicate tokenize and greedy generate runs
    checkpoint::Checkpoint ck;
    {
        codec::CodecConfig ccfg;
        ccfg.hidden_dim = 32;
        ccfg.ssl_dim = 16;
        ccfg.quant_dim = 16;
        ccfg.codebook_size = 32;
        Rng crng(2024);
        Rng lrng(0xb2);
        ck.codec = codec::CodecParams::make(ccfg, crng);
        ck.lm = lm::LMParams::make(
            lm::LMConfig::preset("toy", ccfg.codebook_size, ccfg.ssl_dim), lrng);
    }
    std::string ckpt = dir.file("toy.ckpt");
    checkpoint::save(ckpt, ck);

    std::string wav_in = dir.file("in.wav");
    wav::write(wav_in, simulate::make_tone_clip(220.0, 3, 16000, 16000));

    std::string tokA = dir.file("a.tok"), tokB = dir.file("b.tok");
    REQUIRE(run({"tokenize", "--ckpt", ckpt, "--in", wav_in, "--out", tokA}) == 0);
    REQUIRE(run({"tokenize", "--ckpt", ckpt, "--in", wav_in, "--out", tokB}) == 0);
    c.expect(slurp(tokA) == slurp(tokB), "duplicate tokenize runs are byte-identical");

    std::string genA = dir.file("genA.wav"), genB = dir.file("genB.wav");
    REQUIRE(run({"generate", "--ckpt", ckpt, "--mode", "sr", "--in", wav_in, "--out",
                 genA}) == 0);
    REQUIRE(run({"generate", "--ckpt", ckpt, "--mode", "sr", "--in", wav_in, "--out",
                 genB}) == 0);
    c.expect(slurp(genA) == slurp(genB), "duplicate greedy generate runs are byte-identical");

    // a 100-step run resumes bit-exactly from mid-phase snapshots
    std::string cfg_path = dir.file("run.json");
    spit(cfg_path, R"({
  "codec": {"hidden_dim": 32, "ssl_dim": 16, "quant_dim": 16, "codebook_size": 32},
  "driver": {
    "codec_steps": 60, "lm_steps": 40,
    "codec_batch": 2, "lm_batch": 2, "clip_samples": 2560,
    "checkpoint_every": 30, "seed": 5,
    "codec_sched": {"kind": "cosine", "peak_lr": 5e-3, "total_steps": 200},
    "lm_sched": {"kind": "warmup_decay", "peak_lr": 1e-3, "warmup_steps": 20,
                 "epoch_steps": 1000, "decay": 1.0}
  },
  "simulation": {
    "synthetic": {"n_noise": 2, "n_rir": 2, "n_speakers": 2, "clips_per_speaker": 2,
                  "n_captioned": 2, "clip_len": 2560, "rir_max_len": 1200},
    "seed": 31
  }
})");
    std::string one = dir.file("one.ckpt");
    REQUIRE(run({"lm-train", "--config", cfg_path, "--out", one}) == 0);
    REQUIRE(fs::exists(one + ".codec30"));
    REQUIRE(fs::exists(one + ".lm30"));

    std::string from_codec = dir.file("from_codec.ckpt");
    REQUIRE(run({"lm-train", "--config", cfg_path, "--resume", one + ".codec30", "--out",
                 from_codec}) == 0);
    c.expect(slurp(from_codec) == slurp(one),
             "resume from the mid-codec snapshot reproduces the 100-step run byte for byte");

    std::string from_lm = dir.file("from_lm.ckpt");
    REQUIRE(run({"lm-train", "--config", cfg_path, "--resume", one + ".lm30", "--out",
                 from_lm}) == 0);
    c.expect(slurp(from_lm) == slurp(one),
             "resume from the mid-lm snapshot reproduces the 100-step run byte for byte");
}
