#pragma once

#include <complex>
#include <vector>

#include "utka/mat.hpp"

namespace utka::dsp {

using cplx = std::complex<double>;

struct AudioBuffer {
    std::vector<double> samples;
    int sample_rate = 16000;

    int length() const { return static_cast<int>(samples.size()); }
};

// Frame-major complex spectrogram, bins = window_len/2 + 1 (one-sided).
struct Spectrogram {
    int window_len = 0;
    int hop = 0;
    int frames = 0;
    int bins = 0;
    std::vector<cplx> data;

    Spectrogram() = default;
    Spectrogram(int win, int h, int f)
        : window_len(win), hop(h), frames(f), bins(win / 2 + 1),
          data(static_cast<size_t>(f) * (win / 2 + 1)) {}

    cplx& at(int frame, int bin) { return data[static_cast<size_t>(frame) * bins + bin]; }
    cplx at(int frame, int bin) const { return data[static_cast<size_t>(frame) * bins + bin]; }
};

// In-place iterative radix-2 FFT; n must be a power of two.
void fft_inplace(cplx* a, int n, bool inverse);

std::vector<double> hann_periodic(int n);

int stft_frame_count(int length, int window_len, int hop);

Spectrogram stft(const AudioBuffer& audio, int window_len = 1024, int hop = 256);

// Window-square-normalized overlap-add synthesis. Output length is
// (frames-1)*hop + window_len. Samples the analysis window never touches
// come back as zero.
AudioBuffer istft(const Spectrogram& spec, int sample_rate = 16000);

struct MelFilterbank {
    int n_mels = 0;
    int bins = 0;
    double f_min = 0.0, f_max = 0.0;
    Mat weights;  // n_mels x bins

    static MelFilterbank make(int sample_rate, int n_fft, int n_mels = 100,
                              double f_min = 0.0, double f_max = -1.0,
                              bool area_normalize = true);
};

double hz_to_mel(double f);
double mel_to_hz(double m);

// frames x bins magnitudes
Mat magnitude(const Spectrogram& spec);

// frames x n_mels
Mat mel_project(const Spectrogram& spec, const MelFilterbank& fb);

// Mean absolute difference of STFT magnitudes (1024/256).
double stft_loss(const AudioBuffer& a, const AudioBuffer& b);

// Mean absolute difference of 100-channel mel projections (1024/256).
double mel_loss(const AudioBuffer& a, const AudioBuffer& b);

// 10*log10(sum ref^2 / sum (ref-est)^2), clamped to [-300, 300].
double snr_db(const AudioBuffer& ref, const AudioBuffer& est);

// Adjoint of the linear map x -> stft(x): given dL/dspec, produce dL/dx.
std::vector<double> stft_grad_signal(const Spectrogram& grad_spec, int length);

// Adjoint of the linear map spec -> istft(spec): given dL/dy over the full
// synthesis length, produce dL/dspec.
Spectrogram istft_grad_spec(const std::vector<double>& grad_y, int window_len, int hop,
                            int frames);

// mel_loss(ref, est) plus dL/d(est samples).
struct MelLossGrad {
    double value = 0.0;
    std::vector<double> grad;
};
MelLossGrad mel_loss_grad(const AudioBuffer& ref, const AudioBuffer& est);

std::vector<double> resample_linear(const std::vector<double>& x, double ratio);

}  // namespace utka::dsp
