#include "utka/quantize.hpp"

#include <cmath>

#include "utka/kernels.hpp"

namespace utka::quantize {

RvqStack RvqStack::make(int n_layers, int size, int dim, Rng& rng) {
    if (n_layers <= 0 || size <= 0 || dim <= 0)
        throw ConfigError("rvq stack needs positive layer count, size and dim");
    RvqStack s;
    s.layers.reserve(n_layers);
    for (int l = 0; l < n_layers; ++l) {
        Codebook cb(size, dim);
        for (auto& v : cb.entries.a) v = 0.05 * rng.normal();
        for (int e = 0; e < size; ++e) {
            cb.usage_ema[e] = 1.0;
            for (int d = 0; d < dim; ++d) cb.entry_ema.at(e, d) = cb.entries.at(e, d);
        }
        s.layers.push_back(std::move(cb));
    }
    return s;
}

int nearest_entry(const Codebook& cb, const double* v) {
    int dim = cb.dim();
    for (int d = 0; d < dim; ++d)
        if (!std::isfinite(v[d])) throw InputError("non-finite vector in nearest-entry search");
    int best = 0;
    double best_d = kernels::l2sq(cb.entries.row(0), v, dim);
    for (int e = 1; e < cb.size(); ++e) {
        double d = kernels::l2sq(cb.entries.row(e), v, dim);
        if (d < best_d) {
            best_d = d;
            best = e;
        }
    }
    return best;
}

QuantResult rvq_encode(const RvqStack& stack, const Mat& frames, bool keep_inputs) {
    if (frames.rows == 0) throw LengthError("empty frame sequence");
    if (frames.cols != stack.dim())
        throw DimensionError("frame dim does not match codebook dim");
    int T = frames.rows, dim = frames.cols, L = stack.n_layers();

    QuantResult qr;
    qr.indices.assign(T, std::vector<int>(L, 0));
    qr.quantized = Mat(T, dim);
    qr.residual_energy.assign(L, 0.0);
    Mat residual = frames;

    for (int l = 0; l < L; ++l) {
        if (keep_inputs) qr.layer_inputs.push_back(residual);
        const Codebook& cb = stack.layers[l];
        double energy = 0.0;
        for (int t = 0; t < T; ++t) {
            double* r = residual.row(t);
            int e = nearest_entry(cb, r);
            qr.indices[t][l] = e;
            const double* entry = cb.entries.row(e);
            double* q = qr.quantized.row(t);
            for (int d = 0; d < dim; ++d) {
                q[d] += entry[d];
                r[d] -= entry[d];
            }
            energy += kernels::dot(r, r, dim);
        }
        qr.residual_energy[l] = energy / T;
    }
    return qr;
}

Mat rvq_decode(const RvqStack& stack, const std::vector<std::vector<int>>& indices) {
    int T = static_cast<int>(indices.size());
    int dim = stack.dim(), L = stack.n_layers();
    Mat out(T, dim);
    for (int t = 0; t < T; ++t) {
        if (static_cast<int>(indices[t].size()) != L)
            throw DimensionError("index row does not have one entry per layer");
        double* q = out.row(t);
        for (int l = 0; l < L; ++l) {
            int e = indices[t][l];
            if (e < 0 || e >= stack.layers[l].size())
                throw InputError("codebook index out of range");
            kernels::axpy(1.0, stack.layers[l].entries.row(e), q, dim);
        }
    }
    return out;
}

double commitment_loss(const Mat& frames, const Mat& quantized) {
    if (!frames.same_shape(quantized)) throw DimensionError("commitment shapes differ");
    double n = static_cast<double>(frames.size());
    if (n == 0.0) return 0.0;
    return kernels::l2sq(frames.data(), quantized.data(), frames.size()) / n;
}

Mat commitment_grad(const Mat& frames, const Mat& quantized) {
    if (!frames.same_shape(quantized)) throw DimensionError("commitment shapes differ");
    Mat g(frames.rows, frames.cols);
    double n = static_cast<double>(frames.size());
    for (size_t i = 0; i < frames.size(); ++i)
        g.a[i] = 2.0 * (frames.a[i] - quantized.a[i]) / n;
    return g;
}

EmaUpdateStats codebook_update(RvqStack& stack, const QuantResult& qr, double gamma,
                               double reseed_threshold, Rng& rng) {
    EmaUpdateStats stats;
    int T = static_cast<int>(qr.indices.size());
    if (T == 0) return stats;
    if (static_cast<int>(qr.layer_inputs.size()) != stack.n_layers())
        throw InputError("codebook_update needs layer inputs kept by rvq_encode");

    for (int l = 0; l < stack.n_layers(); ++l) {
        Codebook& cb = stack.layers[l];
        const Mat& inputs = qr.layer_inputs[l];
        int dim = cb.dim();

        std::vector<double> count(cb.size(), 0.0);
        Mat vecsum(cb.size(), dim);
        for (int t = 0; t < T; ++t) {
            int e = qr.indices[t][l];
            count[e] += 1.0;
            kernels::axpy(1.0, inputs.row(t), vecsum.row(e), dim);
        }

        for (int e = 0; e < cb.size(); ++e) {
            cb.usage_ema[e] = gamma * cb.usage_ema[e] + (1.0 - gamma) * count[e];
            for (int d = 0; d < dim; ++d)
                cb.entry_ema.at(e, d) =
                    gamma * cb.entry_ema.at(e, d) + (1.0 - gamma) * vecsum.at(e, d);
            if (cb.usage_ema[e] < reseed_threshold) {
                int pick = static_cast<int>(rng.index(T));
                for (int d = 0; d < dim; ++d) {
                    cb.entries.at(e, d) = inputs.at(pick, d);
                    cb.entry_ema.at(e, d) = inputs.at(pick, d);
                }
                cb.usage_ema[e] = 1.0;
                ++stats.reseeded;
            } else if (count[e] > 0.0) {
                for (int d = 0; d < dim; ++d)
                    cb.entries.at(e, d) = cb.entry_ema.at(e, d) / cb.usage_ema[e];
            }
        }
    }
    return stats;
}

void kmeanspp_init(RvqStack& stack, const Mat& frames, Rng& rng) {
    if (frames.rows == 0) throw LengthError("empty seeding batch");
    if (frames.cols != stack.dim())
        throw DimensionError("frame dim does not match codebook dim");
    int T = frames.rows, dim = frames.cols;
    Mat residual = frames;

    for (auto& cb : stack.layers) {
        int K = cb.size();
        std::vector<int> chosen;
        chosen.push_back(static_cast<int>(rng.index(T)));
        Vec dist(T);
        for (int t = 0; t < T; ++t)
            dist[t] = kernels::l2sq(residual.row(t), residual.row(chosen[0]), dim);
        while (static_cast<int>(chosen.size()) < K) {
            double total = 0.0;
            for (double d : dist) total += d;
            int pick;
            if (total <= 1e-18) {
                pick = static_cast<int>(rng.index(T));
            } else {
                double r = rng.uniform() * total, acc = 0.0;
                pick = T - 1;
                for (int t = 0; t < T; ++t) {
                    acc += dist[t];
                    if (r < acc) {
                        pick = t;
                        break;
                    }
                }
            }
            chosen.push_back(pick);
            for (int t = 0; t < T; ++t)
                dist[t] = std::min(dist[t],
                                   kernels::l2sq(residual.row(t), residual.row(pick), dim));
        }
        for (int e = 0; e < K; ++e) {
            const double* src = residual.row(chosen[e]);
            for (int d = 0; d < dim; ++d) {
                // jitter keeps duplicate picks from collapsing entries
                double v = src[d] + 1e-4 * rng.normal();
                cb.entries.at(e, d) = v;
                cb.entry_ema.at(e, d) = v;
            }
            cb.usage_ema[e] = 1.0;
        }
        // advance residuals through the freshly seeded layer
        for (int t = 0; t < T; ++t) {
            double* r = residual.row(t);
            int e = nearest_entry(cb, r);
            kernels::axpy(-1.0, cb.entries.row(e), r, dim);
        }
    }
}

}  // namespace utka::quantize
