#include "doctest.h"

#include <cmath>
#include <limits>

#include "utka/common.hpp"
#include "utka/kernels.hpp"
#include "utka/quantize.hpp"

using namespace utka;
using namespace utka::quantize;

namespace {

Mat random_frames(Rng& rng, int t, int d, double scale = 1.0) {
    Mat m(t, d);
    for (auto& v : m.a) v = scale * rng.normal();
    return m;
}

// independent greedy-residual reference, plain loops only
std::vector<std::vector<int>> greedy_oracle(const RvqStack& s, const Mat& frames) {
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

}  // namespace

TEST_CASE("nearest entry: exact member, oracle, tie-break") {
    Rng rng(31);
    auto s = RvqStack::make(1, 64, 8, rng);
    auto& cb = s.layers[0];

    // exact member
    Vec v(cb.entries.row(7), cb.entries.row(7) + 8);
    CHECK(nearest_entry(cb, v.data()) == 7);

    // brute-force agreement on random vectors
    for (int trial = 0; trial < 200; ++trial) {
        Vec x(8);
        for (auto& e : x) e = rng.normal();
        int got = nearest_entry(cb, x.data());
        int best = 0;
        double bd = std::numeric_limits<double>::infinity();
        for (int e = 0; e < cb.size(); ++e) {
            double d2 = 0.0;
            for (int d = 0; d < 8; ++d) {
                double df = x[d] - cb.entries.at(e, d);
                d2 += df * df;
            }
            if (d2 < bd) {
                bd = d2;
                best = e;
            }
        }
        CHECK(got == best);
    }

    // equidistant entries resolve to the lower index
    Codebook tie(3, 2);
    tie.entries.at(0, 0) = 5.0;
    tie.entries.at(1, 0) = -1.0;  // distance 1 from x
    tie.entries.at(2, 0) = 1.0;   // distance 1 from x
    Vec x{0.0, 0.0};
    CHECK(nearest_entry(tie, x.data()) == 1);

    Vec bad{std::numeric_limits<double>::quiet_NaN(), 0.0};
    CHECK_THROWS_AS(nearest_entry(tie, bad.data()), InputError);
}

TEST_CASE("rvq encode matches greedy oracle exhaustively at small scale") {
    Rng rng(32);
    for (int layers = 1; layers <= 3; ++layers) {
        for (int entries : {2, 5, 8}) {
            auto s = RvqStack::make(layers, entries, 4, rng);
            // spread entries out so the search is meaningful
            for (auto& cb : s.layers)
                for (auto& v : cb.entries.a) v = rng.normal();
            Mat frames = random_frames(rng, 40, 4);
            auto qr = rvq_encode(s, frames);
            auto ref = greedy_oracle(s, frames);
            CHECK(qr.indices == ref);

            // reconstruction identity
            Mat dec = rvq_decode(s, qr.indices);
            for (size_t i = 0; i < dec.size(); ++i)
                CHECK(dec.a[i] == doctest::Approx(qr.quantized.a[i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("rvq of 100 random frames matches oracle at codec-like shape") {
    Rng rng(33);
    auto s = RvqStack::make_codec(64, 16, rng);
    for (auto& cb : s.layers)
        for (auto& v : cb.entries.a) v = rng.normal();
    Mat frames = random_frames(rng, 100, 16);
    auto qr = rvq_encode(s, frames);
    CHECK(qr.indices == greedy_oracle(s, frames));
    CHECK(static_cast<int>(qr.indices.size()) == 100);
    CHECK(static_cast<int>(qr.indices[0].size()) == 4);
    for (auto& row : qr.indices)
        for (int e : row) {
            CHECK(e >= 0);
            CHECK(e < 64);
        }
}

TEST_CASE("energy contraction with zero entry present") {
    Rng rng(34);
    auto s = RvqStack::make_codec(16, 6, rng);
    for (auto& cb : s.layers) {
        for (auto& v : cb.entries.a) v = 2.0 * rng.normal();
        for (int d = 0; d < 6; ++d) cb.entries.at(0, d) = 0.0;  // zero vector member
    }
    Mat frames = random_frames(rng, 50, 6, 3.0);

    // track per-frame residual norms layer by layer
    Mat residual = frames;
    for (int l = 0; l < 4; ++l) {
        for (int t = 0; t < 50; ++t) {
            double before = kernels::dot(residual.row(t), residual.row(t), 6);
            int e = nearest_entry(s.layers[l], residual.row(t));
            for (int d = 0; d < 6; ++d) residual.at(t, d) -= s.layers[l].entries.at(e, d);
            double after = kernels::dot(residual.row(t), residual.row(t), 6);
            CHECK(after <= before + 1e-12);
        }
    }

    // and the aggregate statistic agrees
    auto qr = rvq_encode(s, frames);
    double prev = 0.0;
    for (int t = 0; t < 50; ++t) prev += kernels::dot(frames.row(t), frames.row(t), 6);
    prev /= 50.0;
    for (int l = 0; l < 4; ++l) {
        CHECK(qr.residual_energy[l] <= prev + 1e-12);
        prev = qr.residual_energy[l];
    }
}

TEST_CASE("frame representable by layer 0 gives zero residual with zero entries after") {
    Rng rng(35);
    auto s = RvqStack::make(3, 4, 3, rng);
    for (auto& cb : s.layers) {
        for (auto& v : cb.entries.a) v = rng.normal();
        for (int d = 0; d < 3; ++d) cb.entries.at(2, d) = 0.0;  // index 2 is the zero entry
    }
    Mat frames(1, 3);
    for (int d = 0; d < 3; ++d) frames.at(0, d) = s.layers[0].entries.at(1, d);
    auto qr = rvq_encode(s, frames);
    CHECK(qr.indices[0][0] == 1);
    CHECK(qr.indices[0][1] == 2);
    CHECK(qr.indices[0][2] == 2);
    CHECK(qr.residual_energy[2] == doctest::Approx(0.0).scale(1.0).epsilon(1e-18));
}

TEST_CASE("decode: hand-built two-layer sum and error paths") {
    Rng rng(36);
    auto s = RvqStack::make(2, 4, 2, rng);
    s.layers[0].entries.at(1, 0) = 1.5;
    s.layers[0].entries.at(1, 1) = -2.0;
    s.layers[1].entries.at(3, 0) = 0.25;
    s.layers[1].entries.at(3, 1) = 4.0;
    Mat dec = rvq_decode(s, {{1, 3}});
    CHECK(dec.at(0, 0) == doctest::Approx(1.75));
    CHECK(dec.at(0, 1) == doctest::Approx(2.0));

    CHECK_THROWS_AS(rvq_decode(s, {{1, 9}}), InputError);
    CHECK_THROWS_AS(rvq_decode(s, {{1}}), DimensionError);

    // all-zero entries decode to zero frames
    auto z = RvqStack::make(2, 4, 2, rng);
    for (auto& cb : z.layers) cb.entries.zero();
    Mat zd = rvq_decode(z, {{0, 1}, {2, 3}});
    for (double v : zd.a) CHECK(v == 0.0);
}

TEST_CASE("idempotence on block-orthogonal lattice") {
    // layer l only occupies coordinate pair (2l, 2l+1); greedy re-encoding
    // of any lattice point must return the same point
    Rng rng(37);
    auto s = RvqStack::make_codec(5, 8, rng);
    for (int l = 0; l < 4; ++l) {
        auto& cb = s.layers[l];
        cb.entries.zero();
        for (int e = 1; e < 5; ++e) {
            cb.entries.at(e, 2 * l) = static_cast<double>(e);
            cb.entries.at(e, 2 * l + 1) = -0.5 * e;
        }
    }
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<std::vector<int>> idx{{static_cast<int>(rng.index(5)),
                                           static_cast<int>(rng.index(5)),
                                           static_cast<int>(rng.index(5)),
                                           static_cast<int>(rng.index(5))}};
        Mat point = rvq_decode(s, idx);
        auto qr = rvq_encode(s, point);
        for (size_t i = 0; i < point.size(); ++i)
            CHECK(qr.quantized.a[i] == doctest::Approx(point.a[i]).epsilon(1e-12));
        CHECK(qr.residual_energy[3] == doctest::Approx(0.0).scale(1.0).epsilon(1e-18));
    }
}

TEST_CASE("commitment loss and straight-through gradient") {
    Rng rng(38);
    Mat f = random_frames(rng, 6, 5);
    CHECK(commitment_loss(f, f) == 0.0);

    Mat q = f;
    q.at(2, 3) += 1.0;
    CHECK(commitment_loss(f, q) == doctest::Approx(1.0 / 30.0));

    Mat q2 = random_frames(rng, 6, 5);
    Mat g = commitment_grad(f, q2);
    double eps = 1e-6;
    for (int idx : {0, 7, 29}) {
        Mat fp = f, fm = f;
        fp.a[idx] += eps;
        fm.a[idx] -= eps;
        double fd = (commitment_loss(fp, q2) - commitment_loss(fm, q2)) / (2.0 * eps);
        CHECK(g.a[idx] == doctest::Approx(fd).epsilon(1e-6));
        CHECK(g.a[idx] == doctest::Approx(2.0 * (f.a[idx] - q2.a[idx]) / 30.0));
    }
}

TEST_CASE("ema codebook update") {
    Rng rng(39);
    auto s = RvqStack::make(1, 4, 3, rng);
    for (auto& v : s.layers[0].entries.a) v = rng.normal();
    s.layers[0].entry_ema = s.layers[0].entries;  // keep EMA state consistent
    auto before = s.layers[0].entries;

    // empty batch leaves everything untouched
    QuantResult empty;
    codebook_update(s, empty, 0.99, 1e-3, rng);
    for (size_t i = 0; i < before.size(); ++i)
        CHECK(s.layers[0].entries.a[i] == before.a[i]);

    // a single repeated vector drags its entry toward it by (1-gamma) steps
    Vec target{3.0, -1.0, 2.0};
    Mat batch(8, 3);
    for (int t = 0; t < 8; ++t)
        for (int d = 0; d < 3; ++d) batch.at(t, d) = target[d];
    auto qr = rvq_encode(s, batch, true);
    int e = qr.indices[0][0];
    Vec entry_before(s.layers[0].entries.row(e), s.layers[0].entries.row(e) + 3);
    codebook_update(s, qr, 0.99, 1e-3, rng);
    // closed form: usage 0.99*1 + 0.01*8, sum_ema 0.99*entry + 0.01*8*target
    for (int d = 0; d < 3; ++d) {
        double expect = (0.99 * entry_before[d] + 0.01 * 8.0 * target[d]) / (0.99 + 0.08);
        CHECK(s.layers[0].entries.at(e, d) == doctest::Approx(expect).epsilon(1e-12));
    }
    // repeated updates converge to the vector itself
    for (int step = 0; step < 600; ++step) {
        auto q2 = rvq_encode(s, batch, true);
        codebook_update(s, q2, 0.99, 1e-3, rng);
    }
    int efinal = rvq_encode(s, batch).indices[0][0];
    for (int d = 0; d < 3; ++d)
        CHECK(s.layers[0].entries.at(efinal, d) == doctest::Approx(target[d]).epsilon(1e-3));
}

TEST_CASE("dead entry reseeds after usage decays below threshold") {
    Rng rng(40);
    auto s = RvqStack::make(1, 4, 2, rng);
    auto& cb = s.layers[0];
    // entries far apart; entry 3 never assigned
    for (int e = 0; e < 4; ++e) {
        cb.entries.at(e, 0) = 10.0 * e;
        cb.entries.at(e, 1) = 0.0;
        cb.entry_ema.at(e, 0) = 10.0 * e;
        cb.entry_ema.at(e, 1) = 0.0;
    }
    cb.usage_ema[3] = 2.5e-3;  // close to the threshold already

    Mat batch(4, 2);
    for (int t = 0; t < 4; ++t) batch.at(t, 0) = 0.5;  // everything maps to entry 0

    int fired_at = -1;
    for (int step = 0; step < 120; ++step) {
        auto qr = rvq_encode(s, batch, true);
        auto stats = codebook_update(s, qr, 0.99, 1e-3, rng);
        if (stats.reseeded > 0) {
            fired_at = step;
            break;
        }
    }
    // 2.5e-3 * 0.99^k < 1e-3 at k = 92
    CHECK(fired_at == 91);
    CHECK(cb.usage_ema[3] == 1.0);
    CHECK(cb.entries.at(3, 0) == doctest::Approx(0.5));  // reseeded from the batch
}

TEST_CASE("kmeans++ seeding covers clustered data") {
    Rng rng(41);
    // four tight clusters, four entries: after seeding, every cluster is
    // represented and the layer-0 residual energy is small
    Mat frames(80, 2);
    for (int t = 0; t < 80; ++t) {
        int c = t % 4;
        frames.at(t, 0) = 10.0 * c + 0.01 * rng.normal();
        frames.at(t, 1) = -5.0 * c + 0.01 * rng.normal();
    }
    auto s = RvqStack::make(2, 4, 2, rng);
    kmeanspp_init(s, frames, rng);
    auto qr = rvq_encode(s, frames);
    CHECK(qr.residual_energy[0] < 0.01);
    std::vector<bool> used(4, false);
    for (auto& row : qr.indices) used[row[0]] = true;
    for (bool u : used) CHECK(u);

    CHECK_THROWS_AS(rvq_encode(s, Mat(0, 2)), LengthError);
    CHECK_THROWS_AS(rvq_encode(s, Mat(3, 7)), DimensionError);
}
