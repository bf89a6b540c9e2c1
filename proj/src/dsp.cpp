#include "utka/dsp.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "utka/common.hpp"
#include "utka/kernels.hpp"

namespace utka::dsp {

namespace {

constexpr double kPi = 3.1415926535897932384626433832795;

bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

struct FftPlan {
    std::vector<int> rev;
    std::vector<cplx> w;  // e^{-2*pi*i*k/n}, k in [0, n/2)
};

const FftPlan& plan_for(int n) {
    static std::map<int, FftPlan> cache;
    auto it = cache.find(n);
    if (it != cache.end()) return it->second;
    FftPlan p;
    p.rev.resize(n);
    int lg = 0;
    while ((1 << lg) < n) ++lg;
    for (int i = 0; i < n; ++i) {
        int r = 0;
        for (int b = 0; b < lg; ++b)
            if (i & (1 << b)) r |= 1 << (lg - 1 - b);
        p.rev[i] = r;
    }
    p.w.resize(n / 2);
    for (int k = 0; k < n / 2; ++k)
        p.w[k] = std::polar(1.0, -2.0 * kPi * k / n);
    return cache.emplace(n, std::move(p)).first->second;
}

}  // namespace

void fft_inplace(cplx* a, int n, bool inverse) {
    if (!is_pow2(n)) throw ConfigError("fft size must be a power of two");
    if (n == 1) return;
    const FftPlan& p = plan_for(n);
    for (int i = 0; i < n; ++i) {
        int r = p.rev[i];
        if (i < r) std::swap(a[i], a[r]);
    }
    for (int len = 2; len <= n; len <<= 1) {
        int half = len >> 1;
        int step = n / len;
        for (int i = 0; i < n; i += len) {
            for (int j = 0; j < half; ++j) {
                cplx w = p.w[static_cast<size_t>(j) * step];
                if (inverse) w = std::conj(w);
                cplx u = a[i + j];
                cplx v = a[i + j + half] * w;
                a[i + j] = u + v;
                a[i + j + half] = u - v;
            }
        }
    }
    if (inverse) {
        double s = 1.0 / n;
        for (int i = 0; i < n; ++i) a[i] *= s;
    }
}

std::vector<double> hann_periodic(int n) {
    std::vector<double> w(n);
    for (int i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * kPi * i / n);
    return w;
}

int stft_frame_count(int length, int window_len, int hop) {
    if (length < window_len) throw LengthError("signal shorter than one analysis window");
    return 1 + (length - window_len) / hop;
}

static void check_stft_params(int window_len, int hop) {
    if (!is_pow2(window_len))
        throw ConfigError("analysis window length must be a power of two");
    if (hop <= 0 || window_len < hop)
        throw ConfigError("hop must be positive and no larger than the window");
}

Spectrogram stft(const AudioBuffer& audio, int window_len, int hop) {
    check_stft_params(window_len, hop);
    int frames = stft_frame_count(audio.length(), window_len, hop);
    Spectrogram spec(window_len, hop, frames);
    auto win = hann_periodic(window_len);
    std::vector<cplx> buf(window_len);
    for (int f = 0; f < frames; ++f) {
        const double* x = audio.samples.data() + static_cast<size_t>(f) * hop;
        for (int i = 0; i < window_len; ++i) buf[i] = cplx(win[i] * x[i], 0.0);
        fft_inplace(buf.data(), window_len, false);
        for (int k = 0; k < spec.bins; ++k) spec.at(f, k) = buf[k];
    }
    return spec;
}

// Shared by istft and its adjoint: squared-window overlap profile.
static std::vector<double> ola_weight(const std::vector<double>& win, int hop, int frames,
                                      int synth_len) {
    std::vector<double> wsum(synth_len, 0.0);
    int n = static_cast<int>(win.size());
    for (int f = 0; f < frames; ++f)
        for (int i = 0; i < n; ++i) wsum[static_cast<size_t>(f) * hop + i] += win[i] * win[i];
    return wsum;
}

static void check_cola(const std::vector<double>& wsum, int window_len) {
    int lo = window_len / 2;
    int hi = static_cast<int>(wsum.size()) - window_len / 2;
    for (int i = lo; i < hi; ++i)
        if (wsum[i] < 1e-6)
            throw ConfigError("window/hop pair leaves overlap-add gaps");
}

AudioBuffer istft(const Spectrogram& spec, int sample_rate) {
    check_stft_params(spec.window_len, spec.hop);
    if (spec.frames <= 0) throw LengthError("empty spectrogram");
    int n = spec.window_len;
    int synth_len = (spec.frames - 1) * spec.hop + n;
    auto win = hann_periodic(n);
    auto wsum = ola_weight(win, spec.hop, spec.frames, synth_len);
    check_cola(wsum, n);

    std::vector<double> acc(synth_len, 0.0);
    std::vector<cplx> buf(n);
    for (int f = 0; f < spec.frames; ++f) {
        for (int k = 0; k <= n / 2; ++k) buf[k] = spec.at(f, k);
        for (int k = n / 2 + 1; k < n; ++k) buf[k] = std::conj(spec.at(f, n - k));
        fft_inplace(buf.data(), n, true);
        double* out = acc.data() + static_cast<size_t>(f) * spec.hop;
        for (int i = 0; i < n; ++i) out[i] += win[i] * buf[i].real();
    }
    AudioBuffer y;
    y.sample_rate = sample_rate;
    y.samples.resize(synth_len);
    for (int i = 0; i < synth_len; ++i)
        y.samples[i] = wsum[i] > 1e-12 ? acc[i] / wsum[i] : 0.0;
    return y;
}

double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

MelFilterbank MelFilterbank::make(int sample_rate, int n_fft, int n_mels, double f_min,
                                  double f_max, bool area_normalize) {
    if (f_max < 0.0) f_max = sample_rate / 2.0;
    if (n_mels <= 0 || f_min < 0.0 || f_max <= f_min || f_max > sample_rate / 2.0 + 1e-9)
        throw ConfigError("bad mel filterbank parameters");
    MelFilterbank fb;
    fb.n_mels = n_mels;
    fb.bins = n_fft / 2 + 1;
    fb.f_min = f_min;
    fb.f_max = f_max;
    fb.weights = Mat(n_mels, fb.bins);

    double m_lo = hz_to_mel(f_min), m_hi = hz_to_mel(f_max);
    std::vector<double> edges(n_mels + 2);
    for (int i = 0; i < n_mels + 2; ++i)
        edges[i] = mel_to_hz(m_lo + (m_hi - m_lo) * i / (n_mels + 1));

    for (int m = 0; m < n_mels; ++m) {
        double left = edges[m], center = edges[m + 1], right = edges[m + 2];
        double norm = area_normalize ? 2.0 / (right - left) : 1.0;
        bool any = false;
        for (int k = 0; k < fb.bins; ++k) {
            double f = static_cast<double>(k) * sample_rate / n_fft;
            double w = 0.0;
            if (f > left && f < center)
                w = (f - left) / (center - left);
            else if (f >= center && f < right)
                w = (right - f) / (right - center);
            if (w > 0.0) {
                fb.weights.at(m, k) = w * norm;
                any = true;
            }
        }
        if (!any)
            throw ConfigError("mel filter " + std::to_string(m) +
                              " covers no FFT bin; reduce n_mels or raise n_fft");
    }
    return fb;
}

Mat magnitude(const Spectrogram& spec) {
    Mat m(spec.frames, spec.bins);
    for (int f = 0; f < spec.frames; ++f)
        for (int k = 0; k < spec.bins; ++k) m.at(f, k) = std::abs(spec.at(f, k));
    return m;
}

Mat mel_project(const Spectrogram& spec, const MelFilterbank& fb) {
    if (fb.bins != spec.bins) throw DimensionError("filterbank built for different FFT size");
    Mat mag = magnitude(spec);
    Mat out(spec.frames, fb.n_mels);
    kernels::matmul_nt(mag, fb.weights, out);
    return out;
}

static void check_pair(const AudioBuffer& a, const AudioBuffer& b) {
    if (a.length() != b.length()) throw LengthError("buffers differ in length");
    if (a.sample_rate != b.sample_rate) throw InputError("buffers differ in sample rate");
}

double stft_loss(const AudioBuffer& a, const AudioBuffer& b) {
    check_pair(a, b);
    Mat ma = magnitude(stft(a)), mb = magnitude(stft(b));
    double s = 0.0;
    for (size_t i = 0; i < ma.size(); ++i) s += std::fabs(ma.a[i] - mb.a[i]);
    return s / static_cast<double>(ma.size());
}

static const MelFilterbank& loss_mel_bank(int sample_rate) {
    static std::map<int, MelFilterbank> cache;
    auto it = cache.find(sample_rate);
    if (it == cache.end())
        it = cache.emplace(sample_rate, MelFilterbank::make(sample_rate, 1024, 100)).first;
    return it->second;
}

double mel_loss(const AudioBuffer& a, const AudioBuffer& b) {
    check_pair(a, b);
    const auto& fb = loss_mel_bank(a.sample_rate);
    Mat ma = mel_project(stft(a), fb), mb = mel_project(stft(b), fb);
    double s = 0.0;
    for (size_t i = 0; i < ma.size(); ++i) s += std::fabs(ma.a[i] - mb.a[i]);
    return s / static_cast<double>(ma.size());
}

double snr_db(const AudioBuffer& ref, const AudioBuffer& est) {
    check_pair(ref, est);
    double num = 0.0, den = 0.0;
    for (int i = 0; i < ref.length(); ++i) {
        num += ref.samples[i] * ref.samples[i];
        double d = ref.samples[i] - est.samples[i];
        den += d * d;
    }
    if (den == 0.0) return 300.0;
    if (num == 0.0) return -300.0;
    double v = 10.0 * std::log10(num / den);
    return std::clamp(v, -300.0, 300.0);
}

std::vector<double> stft_grad_signal(const Spectrogram& grad_spec, int length) {
    int n = grad_spec.window_len;
    check_stft_params(n, grad_spec.hop);
    if (stft_frame_count(length, n, grad_spec.hop) != grad_spec.frames)
        throw DimensionError("gradient frame count does not match signal length");
    auto win = hann_periodic(n);
    std::vector<double> gx(length, 0.0);
    std::vector<cplx> buf(n);
    for (int f = 0; f < grad_spec.frames; ++f) {
        std::fill(buf.begin(), buf.end(), cplx(0.0, 0.0));
        for (int k = 0; k <= n / 2; ++k) buf[k] = grad_spec.at(f, k);
        fft_inplace(buf.data(), n, true);
        double* g = gx.data() + static_cast<size_t>(f) * grad_spec.hop;
        for (int i = 0; i < n; ++i) g[i] += win[i] * buf[i].real() * n;
    }
    return gx;
}

Spectrogram istft_grad_spec(const std::vector<double>& grad_y, int window_len, int hop,
                            int frames) {
    check_stft_params(window_len, hop);
    int n = window_len;
    int synth_len = (frames - 1) * hop + n;
    if (static_cast<int>(grad_y.size()) != synth_len)
        throw DimensionError("gradient length does not match synthesis length");
    auto win = hann_periodic(n);
    auto wsum = ola_weight(win, hop, frames, synth_len);

    std::vector<double> gn(synth_len);
    for (int i = 0; i < synth_len; ++i)
        gn[i] = wsum[i] > 1e-12 ? grad_y[i] / wsum[i] : 0.0;

    Spectrogram g(window_len, hop, frames);
    std::vector<cplx> buf(n);
    for (int f = 0; f < frames; ++f) {
        const double* u = gn.data() + static_cast<size_t>(f) * hop;
        for (int i = 0; i < n; ++i) buf[i] = cplx(win[i] * u[i], 0.0);
        fft_inplace(buf.data(), n, false);
        for (int k = 0; k <= n / 2; ++k) {
            if (k == 0 || k == n / 2)
                g.at(f, k) = cplx(buf[k].real() / n, 0.0);
            else
                g.at(f, k) = cplx(2.0 * buf[k].real() / n, 2.0 * buf[k].imag() / n);
        }
    }
    return g;
}

MelLossGrad mel_loss_grad(const AudioBuffer& ref, const AudioBuffer& est) {
    check_pair(ref, est);
    const auto& fb = loss_mel_bank(ref.sample_rate);
    Spectrogram se = stft(est);
    Mat me = mel_project(se, fb);
    Mat mr = mel_project(stft(ref), fb);

    MelLossGrad out;
    double count = static_cast<double>(me.size());
    Mat dmel(me.rows, me.cols);
    for (size_t i = 0; i < me.size(); ++i) {
        double d = mr.a[i] - me.a[i];
        out.value += std::fabs(d);
        if (d > 0.0)
            dmel.a[i] = -1.0 / count;
        else if (d < 0.0)
            dmel.a[i] = 1.0 / count;
    }
    out.value /= count;

    Mat dmag(se.frames, se.bins);
    kernels::matmul_nn(dmel, fb.weights, dmag);

    Spectrogram ds(se.window_len, se.hop, se.frames);
    for (int f = 0; f < se.frames; ++f)
        for (int k = 0; k < se.bins; ++k) {
            double m = std::abs(se.at(f, k));
            if (m > 1e-300) ds.at(f, k) = dmag.at(f, k) / m * se.at(f, k);
        }
    out.grad = stft_grad_signal(ds, est.length());
    return out;
}

std::vector<double> resample_linear(const std::vector<double>& x, double ratio) {
    if (ratio <= 0.0) throw InputError("resample ratio must be positive");
    if (x.empty()) return {};
    int n = static_cast<int>(x.size());
    int out_len = static_cast<int>(std::floor((n - 1) / ratio)) + 1;
    std::vector<double> y(out_len);
    for (int i = 0; i < out_len; ++i) {
        double p = i * ratio;
        int j = static_cast<int>(p);
        if (j >= n - 1) {
            y[i] = x[n - 1];
        } else {
            double t = p - j;
            y[i] = x[j] * (1.0 - t) + x[j + 1] * t;
        }
    }
    return y;
}

}  // namespace utka::dsp
