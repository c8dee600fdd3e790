#ifndef SINKGP_OPTIMIZE_HPP
#define SINKGP_OPTIMIZE_HPP

#include "sinkgp/common.hpp"
#include "sinkgp/embedding.hpp"
#include "sinkgp/gp.hpp"
#include "sinkgp/kernels.hpp"
#include "sinkgp/measure.hpp"
#include "sinkgp/sinkhorn.hpp"

#include <algorithm>
#include <cassert>
#include <chrono>
#include <cmath>
#include <deque>
#include <functional>
#include <iostream>
#include <optional>
#include <utility>
#include <vector>

namespace sinkgp {

struct OptimizeConfig {
    int memory = 10;       // L-BFGS history pairs
    int max_iters = 100;
    double grad_tol = 1e-5;  // L-inf gradient stop
    double wolfe_c1 = 1e-4;
    double wolfe_c2 = 0.9;

    void validate() const {
        if (memory < 1) throw ValidationError("optimize: memory must be >= 1");
        if (max_iters < 0) throw ValidationError("optimize: max_iters must be >= 0");
        if (!(grad_tol > 0.0)) throw ValidationError("optimize: grad_tol must be > 0");
        if (!(0.0 < wolfe_c1 && wolfe_c1 < wolfe_c2 && wolfe_c2 < 1.0))
            throw ValidationError("optimize: need 0 < c1 < c2 < 1");
    }
};

enum class LbfgsStatus { converged, max_iters, line_search_failed };

struct LbfgsTraceRow {
    int iter = 0;
    double value = 0.0;
    double step = 0.0;
    double grad_norm = 0.0;  // L-inf
};

struct LbfgsResult {
    Vector x;
    double value = 0.0;
    Vector grad;
    int iterations = 0;
    LbfgsStatus status = LbfgsStatus::converged;
    std::vector<LbfgsTraceRow> trace;
};

using Objective = std::function<std::pair<double, Vector>(const Vector&)>;

/// Central finite differences of a scalar function; the testing oracle
/// for every analytic gradient in this project.
inline Vector finite_diff_grad(const std::function<double(const Vector&)>& f, const Vector& x, double h) {
    Vector g(x.size());
    for (Index i = 0; i < x.size(); ++i) {
        Vector hi = x, lo = x;
        hi(i) += h;
        lo(i) -= h;
        g(i) = (f(hi) - f(lo)) / (2.0 * h);
    }
    return g;
}

namespace detail {

struct LinePoint {
    double alpha = 0.0;
    double value = 0.0;
    double deriv = 0.0;  // directional derivative along p
    Vector grad;
};

// Minimizer of the cubic through (a, fa, da) and (b, fb, db); falls back
// to bisection when the cubic is degenerate.
inline double cubic_interpolate(double a, double fa, double da, double b, double fb, double db) {
    const double d1 = da + db - 3.0 * (fa - fb) / (a - b);
    const double disc = d1 * d1 - da * db;
    if (disc >= 0.0) {
        const double d2 = (b >= a ? 1.0 : -1.0) * std::sqrt(disc);
        const double denom = db - da + 2.0 * d2;
        if (denom != 0.0) {
            const double cand = b - (b - a) * (db + d2 - d1) / denom;
            if (std::isfinite(cand)) return cand;
        }
    }
    return 0.5 * (a + b);
}

struct LineSearchResult {
    LinePoint point;
    bool ok = false;
};

// Strong-Wolfe line search: bracketing phase then zoom with cubic
// interpolation and a bisection safeguard. On zoom exhaustion the best
// point seen with any decrease is returned flagged.
inline LineSearchResult wolfe_zoom_search(const Objective& obj, const Vector& x, const Vector& p,
                                          double f0, const Vector& g0, double c1, double c2) {
    const double d0 = g0.dot(p);
    if (!(d0 < 0.0)) throw NumericError("line search: non-descent direction");

    auto eval = [&](double alpha) {
        auto [value, grad] = obj(x + alpha * p);
        if (std::isnan(value)) throw NumericError("line search: objective is NaN");
        LinePoint pt;
        pt.alpha = alpha;
        pt.value = value;
        pt.deriv = grad.dot(p);
        pt.grad = std::move(grad);
        return pt;
    };

    LinePoint best;  // best sufficient-decrease point seen, for the flagged exit
    best.alpha = 0.0;
    best.value = f0;
    bool have_best = false;

    auto zoom = [&](LinePoint lo, LinePoint hi) -> LineSearchResult {
        for (int j = 0; j < 25; ++j) {
            double a = cubic_interpolate(lo.alpha, lo.value, lo.deriv, hi.alpha, hi.value, hi.deriv);
            const double lo_a = std::min(lo.alpha, hi.alpha), hi_a = std::max(lo.alpha, hi.alpha);
            const double width = hi_a - lo_a;
            if (!(a > lo_a + 0.1 * width && a < hi_a - 0.1 * width)) a = 0.5 * (lo_a + hi_a);
            LinePoint pt = eval(a);
            if (pt.value <= f0 + c1 * a * d0 && (!have_best || pt.value < best.value)) {
                best = pt;
                have_best = true;
            }
            if (pt.value > f0 + c1 * a * d0 || pt.value >= lo.value) {
                hi = pt;
            } else {
                if (std::abs(pt.deriv) <= -c2 * d0) return {pt, true};
                if (pt.deriv * (hi.alpha - lo.alpha) >= 0.0) hi = lo;
                lo = pt;
            }
        }
        return {have_best ? best : lo, false};
    };

    LinePoint prev;
    prev.alpha = 0.0;
    prev.value = f0;
    prev.deriv = d0;
    double alpha = 1.0;
    const double alpha_max = 1e6;
    for (int i = 0; i < 40; ++i) {
        LinePoint pt = eval(alpha);
        if (pt.value <= f0 + c1 * alpha * d0 && (!have_best || pt.value < best.value)) {
            best = pt;
            have_best = true;
        }
        if (pt.value > f0 + c1 * alpha * d0 || (i > 0 && pt.value >= prev.value))
            return zoom(prev, pt);
        if (std::abs(pt.deriv) <= -c2 * d0) return {pt, true};
        if (pt.deriv >= 0.0) return zoom(pt, prev);
        prev = pt;
        alpha = std::min(2.0 * alpha, alpha_max);
        if (alpha >= alpha_max) break;
    }
    return {have_best ? best : prev, false};
}

}  // namespace detail

/// Two-loop-recursion L-BFGS with strong-Wolfe zoom line search.
/// Deterministic given the objective and start; `on_accept(iter, x, f,
/// step, grad_inf)` fires after every accepted iterate.
inline LbfgsResult lbfgs_minimize(
    const Objective& obj, const Vector& x0, const OptimizeConfig& cfg,
    const std::function<void(int, const Vector&, double, double, double)>& on_accept = nullptr) {
    cfg.validate();
    LbfgsResult res;
    res.x = x0;
    auto [f, g] = obj(x0);
    if (std::isnan(f)) throw NumericError("lbfgs: objective is NaN at the start");
    res.value = f;
    res.grad = g;
    double ginf = g.lpNorm<Eigen::Infinity>();
    res.trace.push_back({0, f, 0.0, ginf});
    if (ginf <= cfg.grad_tol) {
        res.status = LbfgsStatus::converged;
        return res;
    }

    std::deque<Vector> s_hist, y_hist;
    std::deque<double> rho_hist;
    Vector q, p;
    res.status = LbfgsStatus::max_iters;
    for (int iter = 1; iter <= cfg.max_iters; ++iter) {
        // Two-loop recursion for the quasi-Newton direction.
        q = res.grad;
        const int m = static_cast<int>(s_hist.size());
        std::vector<double> a_coef(static_cast<std::size_t>(m));
        for (int i = m - 1; i >= 0; --i) {
            a_coef[static_cast<std::size_t>(i)] =
                rho_hist[static_cast<std::size_t>(i)] * s_hist[static_cast<std::size_t>(i)].dot(q);
            q -= a_coef[static_cast<std::size_t>(i)] * y_hist[static_cast<std::size_t>(i)];
        }
        if (m > 0) {
            const Vector& s_last = s_hist.back();
            const Vector& y_last = y_hist.back();
            q *= s_last.dot(y_last) / y_last.squaredNorm();
        }
        for (int i = 0; i < m; ++i) {
            const double b = rho_hist[static_cast<std::size_t>(i)] * y_hist[static_cast<std::size_t>(i)].dot(q);
            q += (a_coef[static_cast<std::size_t>(i)] - b) * s_hist[static_cast<std::size_t>(i)];
        }
        p = -q;
        if (!(p.dot(res.grad) < 0.0)) p = -res.grad;  // lost curvature, reset to steepest descent

        const auto ls = detail::wolfe_zoom_search(obj, res.x, p, res.value, res.grad,
                                                  cfg.wolfe_c1, cfg.wolfe_c2);
        if (!ls.ok && !(ls.point.value < res.value)) {
            res.status = LbfgsStatus::line_search_failed;
            break;
        }
        // Strong Wolfe holds at every accepted step (checked in debug builds).
        assert(!ls.ok || ls.point.value <= res.value + cfg.wolfe_c1 * ls.point.alpha * p.dot(res.grad) + 1e-12);
        assert(!ls.ok || std::abs(ls.point.grad.dot(p)) <= -cfg.wolfe_c2 * p.dot(res.grad) + 1e-12);
        const Vector s = ls.point.alpha * p;
        const Vector ynew = ls.point.grad - res.grad;
        res.x += s;
        res.value = ls.point.value;
        res.grad = ls.point.grad;
        res.iterations = iter;
        ginf = res.grad.lpNorm<Eigen::Infinity>();
        res.trace.push_back({iter, res.value, ls.point.alpha, ginf});
        if (on_accept) on_accept(iter, res.x, res.value, ls.point.alpha, ginf);

        const double sy = s.dot(ynew);
        if (sy > 1e-12 * s.norm() * ynew.norm()) {
            s_hist.push_back(s);
            y_hist.push_back(ynew);
            rho_hist.push_back(1.0 / sy);
            if (static_cast<int>(s_hist.size()) > cfg.memory) {
                s_hist.pop_front();
                y_hist.pop_front();
                rho_hist.pop_front();
            }
        }
        if (!ls.ok) {
            res.status = LbfgsStatus::line_search_failed;
            break;
        }
        if (ginf <= cfg.grad_tol) {
            res.status = LbfgsStatus::converged;
            break;
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// Hyperparameter state and the training objective.
// ---------------------------------------------------------------------------

/// Everything the training loop moves: the raw reference parameters and
/// the log-transformed kernel scalars. The kernel family and the tanh
/// bound are fixed metadata. Log-space keeps positivity unconstrained.
struct HyperState {
    ReferenceParams ref;
    double log_variance = 0.0;
    double log_lengthscale = 0.0;
    std::optional<double> log_noise;  // regression only
    KernelFamily family = KernelFamily::sqexp;

    Index flat_size() const {
        return ref.atoms() * ref.dim() + ref.atoms() + 2 + (log_noise ? 1 : 0);
    }

    KernelSpec spec() const {
        return {family, std::exp(log_variance), std::exp(log_lengthscale)};
    }
    double noise() const { return log_noise ? std::exp(*log_noise) : 0.0; }

    /// Layout: x_raw row-major, w_raw, log_variance, log_lengthscale[, log_noise].
    Vector to_flat() const {
        const Index q = ref.atoms(), d = ref.dim();
        Vector x(flat_size());
        for (Index j = 0; j < q; ++j)
            for (Index k = 0; k < d; ++k) x(j * d + k) = ref.x_raw(j, k);
        x.segment(q * d, q) = ref.w_raw;
        x(q * d + q) = log_variance;
        x(q * d + q + 1) = log_lengthscale;
        if (log_noise) x(q * d + q + 2) = *log_noise;
        return x;
    }

    HyperState with_flat(const Vector& x) const {
        if (x.size() != flat_size()) throw ValidationError("hyperstate: flat vector size mismatch");
        HyperState out = *this;
        const Index q = ref.atoms(), d = ref.dim();
        for (Index j = 0; j < q; ++j)
            for (Index k = 0; k < d; ++k) out.ref.x_raw(j, k) = x(j * d + k);
        out.ref.w_raw = x.segment(q * d, q);
        out.log_variance = x(q * d + q);
        out.log_lengthscale = x(q * d + q + 1);
        if (log_noise) out.log_noise = x(q * d + q + 2);
        return out;
    }
};

struct NllResult {
    double value = 0.0;
    Vector grad;
    bool all_converged = true;
};

/// Negative log marginal likelihood of the dataset under the current
/// hyperparameters, with its full gradient.
///
/// The gradient composes three pieces: the analytic likelihood derivative
/// against Gram entries, the kernel-family derivatives against distance
/// and (log l, log sigma), and reverse accumulation through the executed
/// Sinkhorn sweeps for the reference parameters. Deterministic given the
/// cache contents; with `CacheMode::read_only` the cache seeds warm
/// starts without being mutated, so repeated evaluations are identical.
inline NllResult nll_objective(const LabeledDataset& ds, const HyperState& state,
                               const SinkhornConfig& cfg, PotentialCache* cache = nullptr,
                               CacheMode mode = CacheMode::read_only, int threads = 1) {
    ds.validate();
    // A line search may probe states whose log-parameters under- or
    // overflow; those evaluate to +infinity so the step shrinks instead
    // of aborting the run.
    const auto out_of_domain = [&] {
        NllResult r;
        r.value = std::numeric_limits<double>::infinity();
        r.grad = Vector::Zero(state.flat_size());
        return r;
    };
    if (!state.ref.x_raw.allFinite() || !state.ref.w_raw.allFinite() ||
        !std::isfinite(state.log_variance) || !std::isfinite(state.log_lengthscale) ||
        (state.log_noise && !std::isfinite(*state.log_noise)))
        return out_of_domain();
    const KernelSpec spec = state.spec();
    if (!(spec.variance > 0.0) || !std::isfinite(spec.variance) || !(spec.lengthscale > 0.0) ||
        !std::isfinite(spec.lengthscale) || !std::isfinite(state.noise()))
        return out_of_domain();
    state.ref.validate();
    const DiscreteMeasure ref = realize_reference(state.ref);
    if (ref.size() != state.ref.atoms())
        throw NumericError("nll: reference weight underflow collapsed an atom");
    const Index n = static_cast<Index>(ds.size());
    const Index q = ref.size(), d = ref.dim();
    const Vector& w = ref.weights();
    const Vector logw = w.array().log().matrix();

    // Forward: embed every measure, keeping the executed sweep sequence.
    std::vector<Matrix> costs(static_cast<std::size_t>(n));
    std::vector<UnrollTape> tapes(static_cast<std::size_t>(n));
    std::vector<Vector> emb(static_cast<std::size_t>(n));
    std::vector<char> conv(static_cast<std::size_t>(n), 1);
    parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t i) {
        const DiscreteMeasure& P = ds.measures[i];
        costs[i] = cost_matrix(P.points(), ref.points()).values;
        std::optional<DualPotentials> warm;
        if (cache && mode != CacheMode::off) {
            const auto hit = cache->lookup(P.content_hash());
            if (hit && hit->f.size() == P.size() && hit->g.size() == q) warm = *hit;
        }
        DualPotentials pot = solve_with_cost(costs[i], P.weights(), w, cfg, warm, &tapes[i]);
        if (cache && mode == CacheMode::read_write) cache->store(P.content_hash(), pot);
        emb[i] = pot.g;
        conv[i] = pot.converged ? 1 : 0;
    });

    NllResult out;
    for (char c : conv)
        if (!c) out.all_converged = false;

    // Pairwise weighted distances and the Gram matrix.
    Matrix sq = Matrix::Zero(n, n);
    Matrix K(n, n);
    for (Index a = 0; a < n; ++a) {
        K(a, a) = spec.variance;
        for (Index b = a + 1; b < n; ++b) {
            const double s =
                (w.array() * (emb[static_cast<std::size_t>(a)] - emb[static_cast<std::size_t>(b)]).array().square())
                    .sum();
            sq(a, b) = s;
            sq(b, a) = s;
            const double kv = kernel_value(spec, std::sqrt(s));
            K(a, b) = kv;
            K(b, a) = kv;
        }
    }

    // Likelihood value and d(nll)/dK in the free-entry convention. A
    // failed factorization at an extreme trial point also reads as +inf.
    Matrix A;
    double dnll_dlognoise = 0.0;
    try {
        if (ds.is_classification()) {
            const LaplaceGramGradient lg = laplace_gram_gradient(K, *ds.labels);
            out.value = -lg.lml;
            A = -lg.dK;
        } else {
            const RegressionGramGradient rg =
                regression_gram_gradient(K, *ds.targets, state.noise(), spec.variance);
            out.value = -rg.lml;
            A = -rg.dK;
            dnll_dlognoise = -rg.dnoise * state.noise();
        }
    } catch (const NumericError&) {
        return out_of_domain();
    }

    // Kernel scalar gradients.
    double dlogl = 0.0, dlogsigma = 0.0;
    for (Index a = 0; a < n; ++a)
        for (Index b = 0; b < n; ++b) {
            dlogl += A(a, b) * K(a, b);
            if (a != b) dlogsigma += A(a, b) * kernel_dlogsigma(spec, std::sqrt(sq(a, b)));
        }

    // Distance chain: seeds against embeddings and the reference weights.
    auto kernel_ddistsq = [&](double dist) {
        if (spec.family == KernelFamily::sqexp)
            return -kernel_value(spec, dist) / (2.0 * spec.lengthscale * spec.lengthscale);
        return dist > 0.0 ? kernel_ddist(spec, dist) / (2.0 * dist) : 0.0;
    };
    std::vector<Vector> seeds(static_cast<std::size_t>(n), Vector::Zero(q));
    Vector w_dist_bar = Vector::Zero(q);
    for (Index a = 0; a < n; ++a)
        for (Index b = a + 1; b < n; ++b) {
            const double coeff = (A(a, b) + A(b, a)) * kernel_ddistsq(std::sqrt(sq(a, b)));
            if (coeff == 0.0) continue;
            const Vector diff = emb[static_cast<std::size_t>(a)] - emb[static_cast<std::size_t>(b)];
            seeds[static_cast<std::size_t>(a)] += 2.0 * coeff * (w.array() * diff.array()).matrix();
            seeds[static_cast<std::size_t>(b)] -= 2.0 * coeff * (w.array() * diff.array()).matrix();
            w_dist_bar += coeff * diff.array().square().matrix();
        }

    // Reverse sweeps per measure, then one chain into the raw parameters.
    std::vector<RefGradient> per_measure(static_cast<std::size_t>(n));
    parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t i) {
        const Vector logp = ds.measures[i].weights().array().log().matrix();
        const SolveAdjoints adj = backprop_solve(costs[i], logp, logw, w, cfg.epsilon,
                                                 tapes[i], seeds[i]);
        per_measure[i] =
            chain_to_raw_params(adj, Vector::Zero(q), ds.measures[i].points(), ref, state.ref);
    });
    Matrix x_raw_grad = Matrix::Zero(q, d);
    Vector w_raw_grad = Vector::Zero(q);
    for (Index i = 0; i < n; ++i) {
        x_raw_grad += per_measure[static_cast<std::size_t>(i)].x_raw;
        w_raw_grad += per_measure[static_cast<std::size_t>(i)].w_raw;
    }
    // Distance-weighting contribution enters through the softmax only.
    w_raw_grad += (w.array() * (w_dist_bar.array() - w.dot(w_dist_bar))).matrix();

    out.grad.resize(state.flat_size());
    for (Index j = 0; j < q; ++j)
        for (Index k = 0; k < d; ++k) out.grad(j * d + k) = x_raw_grad(j, k);
    out.grad.segment(q * d, q) = w_raw_grad;
    out.grad(q * d + q) = dlogl;
    out.grad(q * d + q + 1) = dlogsigma;
    if (state.log_noise) out.grad(q * d + q + 2) = dnll_dlognoise;
    return out;
}

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

struct TrainTraceRow {
    int iter = 0;
    double nll = 0.0;
    double grad_norm = 0.0;
    double step = 0.0;
    double wallclock_ms = 0.0;
};

struct TrainResult {
    GPModel model;
    HyperState state;
    std::vector<TrainTraceRow> trace;
    LbfgsStatus status = LbfgsStatus::converged;
    double final_nll = 0.0;
};

/// Seeds the warm-start cache by solving each measure through a
/// decreasing-epsilon ladder down to the target regularization. Warm
/// starts change sweep counts only, never fixed points.
inline void warm_cache_ladder(const LabeledDataset& ds, const DiscreteMeasure& ref,
                              const SinkhornConfig& cfg, PotentialCache& cache, int threads) {
    std::vector<double> ladder;
    for (double e = cfg.epsilon * 64.0; e > cfg.epsilon; e /= 4.0)
        if (e <= 1.0) ladder.push_back(e);
    ladder.push_back(cfg.epsilon);
    parallel_for(ds.size(), threads, [&](std::size_t i) {
        const DiscreteMeasure& P = ds.measures[i];
        std::optional<DualPotentials> warm;
        for (double e : ladder) {
            SinkhornConfig stage = cfg;
            stage.epsilon = e;
            stage.tol = (e == cfg.epsilon) ? cfg.tol : std::max(cfg.tol, 1e-3);
            warm = solve(P, ref, stage, warm);
        }
        cache.store(P.content_hash(), *warm);
    });
}

/// Joint maximum-likelihood training of the reference measure and kernel
/// scalars; one L-BFGS run over nll_objective.
///
/// Cache policy: every objective evaluation (including line-search trial
/// points) warm-starts from the snapshot taken at the previous accepted
/// iterate and never mutates it, so the objective is a pure function of
/// the parameters between accepts. The snapshot is refreshed once per
/// accepted iterate.
inline TrainResult train(const LabeledDataset& ds, const HyperState& init,
                         const OptimizeConfig& opt_cfg, const SinkhornConfig& sink_cfg,
                         int threads = 1) {
    ds.validate();
    opt_cfg.validate();
    sink_cfg.validate();

    PotentialCache cache;
    warm_cache_ladder(ds, realize_reference(init.ref), sink_cfg, cache, threads);

    bool warned_nonconverged = false;
    auto objective = [&](const Vector& x) -> std::pair<double, Vector> {
        const HyperState state = init.with_flat(x);
        NllResult res = nll_objective(ds, state, sink_cfg, &cache, CacheMode::read_only, threads);
        if (!res.all_converged && !warned_nonconverged) {
            std::cerr << "warning: some Sinkhorn solves hit max_iter during training; "
                         "objective still evaluated\n";
            warned_nonconverged = true;
        }
        return {res.value, res.grad};
    };

    using Clock = std::chrono::steady_clock;
    auto t_last = Clock::now();
    std::vector<TrainTraceRow> trace;

    auto on_accept = [&](int iter, const Vector& x, double value, double step, double ginf) {
        // Commit warm starts at the accepted iterate.
        const HyperState state = init.with_flat(x);
        const DiscreteMeasure ref = realize_reference(state.ref);
        parallel_for(ds.size(), threads, [&](std::size_t i) {
            embed(ds.measures[i], ref, sink_cfg, &cache, CacheMode::read_write);
        });
        const auto now = Clock::now();
        const double ms = std::chrono::duration<double, std::milli>(now - t_last).count();
        t_last = now;
        trace.push_back({iter, value, ginf, step, ms});
    };

    const LbfgsResult res = lbfgs_minimize(objective, init.to_flat(), opt_cfg, on_accept);

    TrainResult out;
    out.state = init.with_flat(res.x);
    out.status = res.status;
    out.final_nll = res.value;
    {
        const auto now = Clock::now();
        const double ms = std::chrono::duration<double, std::milli>(now - t_last).count();
        TrainTraceRow head{0, res.trace.front().value, res.trace.front().grad_norm, 0.0, ms};
        trace.insert(trace.begin(), head);
    }
    out.trace = std::move(trace);

    // Refit the final model at the optimum.
    const DiscreteMeasure ref = realize_reference(out.state.ref);
    std::vector<Embedding> es(ds.size());
    parallel_for(ds.size(), threads, [&](std::size_t i) {
        es[i] = embed(ds.measures[i], ref, sink_cfg, &cache, CacheMode::read_write);
    });
    if (ds.is_classification())
        out.model = fit_classification(es, ref, *ds.labels, out.state.spec());
    else
        out.model = fit_regression(es, ref, *ds.targets, out.state.spec(), out.state.noise());
    return out;
}

/// Default initialization when the caller provides none: raw points
/// uniform in [-1,1], flat raw weights, scale spanning the data range,
/// variance from the targets and lengthscale from the median pairwise
/// embedding distance at the initial reference.
inline HyperState initialize_hyperstate(const LabeledDataset& ds, Index q, std::uint64_t seed,
                                        KernelFamily family, const SinkhornConfig& cfg,
                                        bool with_noise = true, int threads = 1,
                                        const std::optional<ReferenceParams>& given_ref = std::nullopt) {
    ds.validate();
    if (q < 1) throw ValidationError("init: need at least one reference atom");
    const Index d = ds.dim;
    Rng rng(seed);
    HyperState state;
    state.family = family;
    if (given_ref) {
        given_ref->validate();
        if (given_ref->dim() != d) throw ValidationError("init: reference dimension mismatch");
        state.ref = *given_ref;
    } else {
        state.ref.x_raw.resize(q, d);
        for (Index j = 0; j < q; ++j)
            for (Index k = 0; k < d; ++k) state.ref.x_raw(j, k) = rng.uniform(-1.0, 1.0);
        state.ref.w_raw = Vector::Zero(q);
        double span = 0.0;
        for (const auto& m : ds.measures) span = std::max(span, m.points().cwiseAbs().maxCoeff());
        state.ref.scale = span > 0.0 ? span : 1.0;
    }

    std::vector<Embedding> es = embed_dataset(ds, state.ref, cfg, nullptr, CacheMode::off, threads);
    const DiscreteMeasure ref = realize_reference(state.ref);
    std::vector<double> dists;
    for (std::size_t a = 0; a < es.size(); ++a)
        for (std::size_t b = a + 1; b < es.size(); ++b)
            dists.push_back(embedding_distance(es[a], es[b], ref));
    double median = 1.0;
    if (!dists.empty()) {
        std::nth_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(dists.size() / 2),
                         dists.end());
        median = dists[dists.size() / 2];
    }
    state.log_lengthscale = std::log(std::max(median, 1e-3));

    double var_y = 1.0;
    if (ds.targets) {
        const double mean = ds.targets->mean();
        var_y = (ds.targets->array() - mean).square().sum() / static_cast<double>(ds.targets->size());
        if (var_y <= 0.0) var_y = 1.0;
    }
    state.log_variance = std::log(var_y);
    if (with_noise && !ds.is_classification()) state.log_noise = std::log(1e-6 * var_y);
    return state;
}

}  // namespace sinkgp

#endif  // SINKGP_OPTIMIZE_HPP
