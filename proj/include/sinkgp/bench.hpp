#ifndef SINKGP_BENCH_HPP
#define SINKGP_BENCH_HPP

#include "sinkgp/common.hpp"
#include "sinkgp/embedding.hpp"
#include "sinkgp/kernels.hpp"
#include "sinkgp/measure.hpp"
#include "sinkgp/rng.hpp"
#include "sinkgp/sinkhorn.hpp"
#include "sinkgp/threading.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <string>
#include <vector>

namespace sinkgp {

/// One benchmark workload: n_clouds weight vectors over one shared
/// m-point support.
struct BenchSpec {
    Index n_clouds = 0;
    Index cloud_size = 0;
};

struct BenchRow {
    Index n_clouds = 0;
    Index cloud_size = 0;
    std::string method;  // sinkhorn_q6 | sinkhorn_q12 | mmd
    double seconds = 0.0;
};

/// Shared coordinates: an equally spaced grid over [0,1]^2 when m is a
/// perfect square, otherwise m uniform draws.
inline Matrix benchmark_coordinates(Index m, Rng& rng) {
    const Index side = static_cast<Index>(std::llround(std::sqrt(static_cast<double>(m))));
    Matrix pts(m, 2);
    if (side * side == m) {
        for (Index r = 0; r < side; ++r)
            for (Index c = 0; c < side; ++c) {
                pts(r * side + c, 0) = (static_cast<double>(c) + 0.5) / static_cast<double>(side);
                pts(r * side + c, 1) = (static_cast<double>(r) + 0.5) / static_cast<double>(side);
            }
    } else {
        for (Index i = 0; i < m; ++i) {
            pts(i, 0) = rng.uniform();
            pts(i, 1) = rng.uniform();
        }
    }
    return pts;
}

inline std::vector<Vector> benchmark_weights(Index n, Index m, Rng& rng) {
    std::vector<Vector> ws;
    ws.reserve(static_cast<std::size_t>(n));
    for (Index c = 0; c < n; ++c) {
        Vector w(m);
        for (Index i = 0; i < m; ++i) w(i) = rng.uniform(0.5, 1.5);
        w /= w.sum();
        ws.push_back(std::move(w));
    }
    return ws;
}

inline DiscreteMeasure benchmark_reference(Index q, Rng& rng) {
    Matrix pts(q, 2);
    for (Index j = 0; j < q; ++j) {
        pts(j, 0) = rng.uniform();
        pts(j, 1) = rng.uniform();
    }
    return DiscreteMeasure(pts, Vector::Constant(q, 1.0 / static_cast<double>(q)));
}

/// Centered embeddings (q x n) for clouds that share one support.
///
/// Uses scaling-form sweeps with a per-sweep absorption into the
/// potentials over an epsilon ladder; exp(-C/eps) is precomputed once per
/// stage and shared by every cloud. Mathematically these are the same
/// updates as the log-domain solver; the form is valid whenever the Gibbs
/// kernel stays inside double range, which a range guard checks, falling
/// back to the log-domain solver per cloud otherwise.
inline Matrix embed_shared_support(const Matrix& coords, const std::vector<Vector>& weights,
                                   const DiscreteMeasure& ref, const SinkhornConfig& cfg,
                                   int threads) {
    cfg.validate();
    const Index m = coords.rows();
    const Index q = ref.size();
    const Index n = static_cast<Index>(weights.size());
    const Matrix C = cost_matrix(coords, ref.points()).values;
    const Vector& w = ref.weights();

    std::vector<double> ladder;
    for (double e = cfg.epsilon * 64.0; e > cfg.epsilon; e /= 4.0)
        if (e <= 1.0) ladder.push_back(e);
    ladder.push_back(cfg.epsilon);

    // Range guard: the smallest Gibbs entry and the scaling factors must
    // stay normal. Potentials are bounded by the cost range, so exponents
    // stay within +-2 Cmax / eps.
    const double cmax = C.maxCoeff();
    const bool scaling_safe = 2.0 * cmax / cfg.epsilon < 600.0;

    Matrix out(q, n);
    if (!scaling_safe) {
        parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t c) {
            std::optional<DualPotentials> warm;
            for (double e : ladder) {
                SinkhornConfig stage = cfg;
                stage.epsilon = e;
                stage.tol = (e == cfg.epsilon) ? cfg.tol : std::max(cfg.tol, 1e-3);
                warm = solve_with_cost(C, weights[c], w, stage, warm);
            }
            out.col(static_cast<Index>(c)) = warm->g;
        });
        return out;
    }

    std::vector<Vector> fs(static_cast<std::size_t>(n), Vector::Zero(m));
    std::vector<Vector> gs(static_cast<std::size_t>(n), Vector::Zero(q));
    Matrix gibbs(m, q);
    for (double e : ladder) {
        gibbs = (-C / e).array().exp().matrix();
        const double stage_tol = (e == cfg.epsilon) ? cfg.tol : std::max(cfg.tol, 1e-3);
        parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t c) {
            const Vector& p = weights[c];
            Vector f(m), f_new(m), g(q), t(m), s(q), u(m), v(q);
            g = gs[c];
            // f = F(g)
            v = (w.array() * (g / e).array().exp()).matrix();
            t.noalias() = gibbs * v;
            f = (-e) * t.array().log();
            for (int iter = 0; iter < cfg.max_iter; ++iter) {
                // g = G(f)
                u = (p.array() * (f / e).array().exp()).matrix();
                s.noalias() = gibbs.transpose() * u;
                g = (-e) * s.array().log();
                // residual via the next f
                v = (w.array() * (g / e).array().exp()).matrix();
                t.noalias() = gibbs * v;
                f_new = (-e) * t.array().log();
                const double r = (((f - f_new) / e).array().exp() - 1.0).abs().maxCoeff();
                if (!std::isfinite(r)) {
                    // left the safe range; redo this cloud in the log domain
                    SinkhornConfig stage = cfg;
                    stage.epsilon = e;
                    stage.tol = stage_tol;
                    const auto pot = solve_with_cost(C, p, w, stage);
                    f = pot.f;
                    g = pot.g;
                    break;
                }
                if (r <= stage_tol) break;
                f.swap(f_new);
            }
            fs[c] = f;
            gs[c] = g;
        });
    }
    for (Index c = 0; c < n; ++c) {
        const Vector& g = gs[static_cast<std::size_t>(c)];
        out.col(c) = g.array() - w.dot(g);
    }
    return out;
}

/// Kernel matrix over shared-support embeddings (upper triangle mirrored).
inline Matrix sinkhorn_gram_from_embeddings(const Matrix& emb, const Vector& ref_w,
                                            const KernelSpec& spec, int threads) {
    const Index n = emb.cols();
    Matrix K(n, n);
    parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t a) {
        const Index ia = static_cast<Index>(a);
        K(ia, ia) = spec.variance;
        for (Index b = ia + 1; b < n; ++b) {
            const double s = (ref_w.array() * (emb.col(ia) - emb.col(b)).array().square()).sum();
            K(ia, b) = kernel_value(spec, std::sqrt(s));
        }
    });
    for (Index a = 0; a < n; ++a)
        for (Index b = a + 1; b < n; ++b) K(b, a) = K(a, b);
    return K;
}

/// MMD kernel matrix over shared-support clouds. The point-kernel matrix
/// exp(-D^2 / (2 sigma^2)) depends only on the shared coordinates and is
/// precomputed once; each unordered pair then pays its own bilinear form,
/// the per-pair cost the baseline method has on general clouds.
inline Matrix mmd_gram_shared(const Matrix& coords, const std::vector<Vector>& weights,
                              double rbf_sigma, double hat_sigma, int threads) {
    const Index m = coords.rows();
    const Index n = static_cast<Index>(weights.size());
    Matrix E(m, m);
    const double inv = 1.0 / (2.0 * rbf_sigma * rbf_sigma);
    for (Index i = 0; i < m; ++i) {
        E(i, i) = 1.0;
        for (Index j = i + 1; j < m; ++j) {
            const double k = std::exp(-(coords.row(i) - coords.row(j)).squaredNorm() * inv);
            E(i, j) = k;
            E(j, i) = k;
        }
    }
    Vector self(n);
    parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t c) {
        self(static_cast<Index>(c)) = weights[c].dot(E * weights[c]);
    });
    Matrix K(n, n);
    parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t a) {
        const Index ia = static_cast<Index>(a);
        K(ia, ia) = hat_sigma;
        for (Index b = ia + 1; b < n; ++b) {
            const double cross = weights[a].dot(E * weights[static_cast<std::size_t>(b)]);
            const double mmd2 = std::max(0.0, self(ia) + self(b) - 2.0 * cross);
            K(ia, b) = hat_sigma * std::exp(-mmd2);
        }
    });
    for (Index a = 0; a < n; ++a)
        for (Index b = a + 1; b < n; ++b) K(b, a) = K(a, b);
    return K;
}

/// Times full Gram construction per method: one discarded warmup, then
/// the median of `reps` wall-clock runs. Row order per size: sinkhorn q=6,
/// sinkhorn q=12, mmd.
inline std::vector<BenchRow> run_benchmark(const std::vector<BenchSpec>& sizes,
                                           const SinkhornConfig& cfg, std::uint64_t seed,
                                           int threads, int reps = 5) {
    if (reps < 1) throw ValidationError("benchmark: reps must be >= 1");
    using Clock = std::chrono::steady_clock;
    std::vector<BenchRow> rows;
    const KernelSpec spec{KernelFamily::sqexp, 1.0, 1.0};

    for (const auto& size : sizes) {
        if (size.n_clouds < 2 || size.cloud_size < 1)
            throw ValidationError("benchmark: need n_clouds >= 2 and cloud_size >= 1");
        Rng rng(seed);
        const Matrix coords = benchmark_coordinates(size.cloud_size, rng);
        const auto weights = benchmark_weights(size.n_clouds, size.cloud_size, rng);
        const auto ref6 = benchmark_reference(6, rng);
        const auto ref12 = benchmark_reference(12, rng);

        auto time_median = [&](auto&& fn) {
            fn();  // warmup, discarded
            std::vector<double> times;
            for (int r = 0; r < reps; ++r) {
                const auto t0 = Clock::now();
                fn();
                times.push_back(std::chrono::duration<double>(Clock::now() - t0).count());
            }
            std::sort(times.begin(), times.end());
            return times[static_cast<std::size_t>(reps) / 2];
        };

        volatile double sink = 0.0;  // keep results alive
        for (const auto* ref : {&ref6, &ref12}) {
            const double sec = time_median([&] {
                const Matrix emb = embed_shared_support(coords, weights, *ref, cfg, threads);
                const Matrix K = sinkhorn_gram_from_embeddings(emb, ref->weights(), spec, threads);
                sink = K(0, 0);
            });
            rows.push_back({size.n_clouds, size.cloud_size,
                            ref->size() == 6 ? "sinkhorn_q6" : "sinkhorn_q12", sec});
        }
        const double sec = time_median([&] {
            const Matrix K = mmd_gram_shared(coords, weights, 1.0, 1.0, threads);
            sink = K(0, 0);
        });
        rows.push_back({size.n_clouds, size.cloud_size, "mmd", sec});
        (void)sink;
    }
    return rows;
}

inline void save_benchmark_csv(const std::vector<BenchRow>& rows, std::ostream& out) {
    out << "n_clouds,cloud_size,method,seconds\n";
    char buf[40];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%.6f", r.seconds);
        out << r.n_clouds << "," << r.cloud_size << "," << r.method << "," << buf << "\n";
    }
}

}  // namespace sinkgp

#endif  // SINKGP_BENCH_HPP
