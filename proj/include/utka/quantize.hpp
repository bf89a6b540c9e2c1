#pragma once

#include <vector>

#include "utka/common.hpp"
#include "utka/mat.hpp"

namespace utka::quantize {

// One VQ codebook plus the EMA statistics that drive its updates.
struct Codebook {
    Mat entries;        // size x dim
    Vec usage_ema;      // per-entry assignment mass
    Mat entry_ema;      // per-entry running sum of assigned vectors

    Codebook() = default;
    Codebook(int size, int dim)
        : entries(size, dim), usage_ema(size, 0.0), entry_ema(size, dim) {}

    int size() const { return entries.rows; }
    int dim() const { return entries.cols; }
};

// Residual stack. Codec streams always carry 4 layers; smaller stacks are
// allowed so exhaustive oracle tests stay cheap.
struct RvqStack {
    std::vector<Codebook> layers;

    static constexpr int kCodecLayers = 4;

    static RvqStack make(int n_layers, int size, int dim, Rng& rng);
    static RvqStack make_codec(int size, int dim, Rng& rng) {
        return make(kCodecLayers, size, dim, rng);
    }

    int n_layers() const { return static_cast<int>(layers.size()); }
    int dim() const { return layers.empty() ? 0 : layers[0].dim(); }
};

struct QuantResult {
    // frames x n_layers codebook indices
    std::vector<std::vector<int>> indices;
    // frames x dim, sum of selected entries over all layers
    Mat quantized;
    // mean squared residual norm after each layer
    Vec residual_energy;
    // residual fed into each layer (frames x dim per layer); kept for
    // EMA updates and re-seeding
    std::vector<Mat> layer_inputs;
};

int nearest_entry(const Codebook& cb, const double* v);

QuantResult rvq_encode(const RvqStack& stack, const Mat& frames, bool keep_inputs = false);

Mat rvq_decode(const RvqStack& stack, const std::vector<std::vector<int>>& indices);

// Mean squared difference between encoder outputs and their quantized
// counterparts (the encoder-side commitment term).
double commitment_loss(const Mat& frames, const Mat& quantized);

// d(commitment)/d(frames), straight-through: quantized treated constant.
Mat commitment_grad(const Mat& frames, const Mat& quantized);

struct EmaUpdateStats {
    int reseeded = 0;
};

// EMA codebook update from one batch of assignments, then dead-entry
// re-seeding. layer_inputs must have been kept by rvq_encode.
EmaUpdateStats codebook_update(RvqStack& stack, const QuantResult& qr, double gamma,
                               double reseed_threshold, Rng& rng);

// k-means++ style seeding of every layer from the first training batch,
// layer by layer on the running residuals.
void kmeanspp_init(RvqStack& stack, const Mat& frames, Rng& rng);

}  // namespace utka::quantize
