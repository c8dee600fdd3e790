#ifndef SINKGP_SINKHORN_HPP
#define SINKGP_SINKHORN_HPP

#include "sinkgp/common.hpp"
#include "sinkgp/measure.hpp"

#include <cmath>
#include <optional>
#include <vector>

namespace sinkgp {

/// Solver parameters for entropic optimal transport.
struct SinkhornConfig {
    double epsilon = 1e-2;   // entropic regularization
    int max_iter = 1000;     // sweep budget (one sweep = one g and one f refresh)
    double tol = 1e-6;       // L-inf violation of the optimality conditions
    int unroll_cap = 200;    // sweeps retained for reverse-mode differentiation

    void validate() const {
        if (!(epsilon > 0.0)) throw ValidationError("sinkhorn: epsilon must be > 0");
        if (max_iter < 1) throw ValidationError("sinkhorn: max_iter must be >= 1");
        if (!(tol > 0.0)) throw ValidationError("sinkhorn: tol must be > 0");
        if (unroll_cap < 1) throw ValidationError("sinkhorn: unroll_cap must be >= 1");
    }
};

/// Half squared Euclidean cost between two supports.
struct CostMatrix {
    Matrix values;  // n x q, entry = 0.5 * |x_i - y_j|^2
};

inline CostMatrix cost_matrix(const Matrix& X, const Matrix& Y) {
    if (X.cols() != Y.cols())
        throw ValidationError("cost_matrix: dimension mismatch (" + std::to_string(X.cols()) +
                              " vs " + std::to_string(Y.cols()) + ")");
    CostMatrix c;
    c.values.resize(X.rows(), Y.rows());
    // Differences are formed directly; the (|x|^2 + |y|^2 - 2<x,y>) expansion
    // can go negative under cancellation, this cannot.
    for (Index j = 0; j < Y.rows(); ++j)
        for (Index i = 0; i < X.rows(); ++i)
            c.values(i, j) = 0.5 * (X.row(i) - Y.row(j)).squaredNorm();
    return c;
}

/// Dual pair of a converged (or budget-exhausted) solve.
///
/// g is centered against the reference weights and f is shifted by the
/// opposite constant, so f_i + g_j and hence the plan are unchanged.
struct DualPotentials {
    Vector f;          // over supp(P)
    Vector g;          // over supp(U), centered
    double epsilon = 0.0;
    int iterations = 0;
    double residual = 0.0;  // L-inf marginal violation of the returned pair
    bool converged = false;
};

struct TransportPlan {
    Matrix values;  // n x q, nonnegative
};

/// Record of the executed update sequence, for reverse accumulation.
/// gs[0] is the g initialization (treated as constant by the backward
/// pass); afterwards gs[k] = G(fs[k-1]) and fs[k] = F(gs[k]).
struct UnrollTape {
    std::vector<Vector> fs;
    std::vector<Vector> gs;
    bool truncated = false;  // front of the sequence dropped by unroll_cap
};

namespace detail {

// f_i = -eps * logsumexp_j( logw_j + (g_j - C_ij)/eps )
inline void sinkhorn_f_update(const Matrix& C, const Vector& logw, const Vector& g,
                              double eps, Matrix& scratch, Vector& f) {
    scratch = (-C / eps);
    scratch.rowwise() += (logw + g / eps).transpose();
    Vector rowmax = scratch.rowwise().maxCoeff();
    f = -eps * (rowmax.array() +
                ((scratch.colwise() - rowmax).array().exp().rowwise().sum()).log())
                   .matrix();
}

// g_j = -eps * logsumexp_i( logp_i + (f_i - C_ij)/eps )
inline void sinkhorn_g_update(const Matrix& C, const Vector& logp, const Vector& f,
                              double eps, Matrix& scratch, Vector& g) {
    scratch = (-C / eps);
    scratch.colwise() += (logp + f / eps);
    Eigen::RowVectorXd colmax = scratch.colwise().maxCoeff();
    g = -eps * (colmax.array() +
                ((scratch.rowwise() - colmax).array().exp().colwise().sum()).log())
                   .matrix()
                   .transpose();
}

}  // namespace detail

/// Log-domain Sinkhorn on a precomputed cost matrix.
///
/// Alternates the two log-sum-exp updates until the L-inf violation of the
/// optimality conditions drops below tol. The returned pair satisfies the
/// U-side condition exactly by construction; the reported residual is the
/// P-side violation. Non-convergence is flagged, not thrown: training
/// loops must tolerate early iterates far from the fixed point.
inline DualPotentials solve_with_cost(const Matrix& C, const Vector& p, const Vector& w,
                                      const SinkhornConfig& cfg,
                                      const std::optional<DualPotentials>& warm = std::nullopt,
                                      UnrollTape* tape = nullptr) {
    cfg.validate();
    const Index n = C.rows(), q = C.cols();
    if (p.size() != n || w.size() != q)
        throw ValidationError("sinkhorn: weight lengths do not match cost matrix");
    if (warm && (warm->f.size() != n || warm->g.size() != q))
        throw ValidationError("sinkhorn: warm potentials have mismatched support sizes");

    const double eps = cfg.epsilon;
    const Vector logp = p.array().log().matrix();
    const Vector logw = w.array().log().matrix();

    Matrix scratch(n, q);
    Vector g = warm ? warm->g : Vector::Zero(q);
    Vector f(n), f_new(n);
    detail::sinkhorn_f_update(C, logw, g, eps, scratch, f);
    if (tape) {
        tape->fs.clear();
        tape->gs.clear();
        tape->truncated = false;
        tape->gs.push_back(g);
        tape->fs.push_back(f);
    }

    double residual = std::numeric_limits<double>::infinity();
    int iter = 0;
    bool converged = false;
    for (;;) {
        detail::sinkhorn_g_update(C, logp, f, eps, scratch, g);
        detail::sinkhorn_f_update(C, logw, g, eps, scratch, f_new);
        ++iter;
        if (!f_new.allFinite() || !g.allFinite())
            throw NumericError("sinkhorn: non-finite potential during log-domain updates");
        // For the pair (f, g) the U-side condition is exact and the P-side
        // violation is |exp((f - F(g))/eps) - 1| with F(g) = f_new.
        residual = (((f - f_new) / eps).array().exp() - 1.0).abs().maxCoeff();
        if (tape) {
            tape->gs.push_back(g);
            if (static_cast<int>(tape->gs.size()) > cfg.unroll_cap + 1) {
                // Keep the trailing window: drop the oldest (g, f) pair.
                // Pairing fs[i] = F(gs[i]), gs[i+1] = G(fs[i]) is preserved.
                tape->gs.erase(tape->gs.begin());
                tape->fs.erase(tape->fs.begin());
                tape->truncated = true;
            }
        }
        if (residual <= cfg.tol) {
            converged = true;
            break;
        }
        if (iter >= cfg.max_iter) break;
        if (tape) tape->fs.push_back(f_new);
        f.swap(f_new);
    }

    DualPotentials pot;
    pot.epsilon = eps;
    pot.iterations = iter;
    pot.residual = residual;
    pot.converged = converged;
    // Center g under the reference weights, compensate f.
    const double center = w.dot(g);
    pot.g = g.array() - center;
    pot.f = f.array() + center;
    return pot;
}

inline DualPotentials solve(const DiscreteMeasure& P, const DiscreteMeasure& U,
                            const SinkhornConfig& cfg,
                            const std::optional<DualPotentials>& warm = std::nullopt,
                            UnrollTape* tape = nullptr) {
    const CostMatrix C = cost_matrix(P.points(), U.points());
    return solve_with_cost(C.values, P.weights(), U.weights(), cfg, warm, tape);
}

/// L-inf violations of the two optimality conditions for a given pair.
inline std::pair<double, double> marginal_residual(const DiscreteMeasure& P, const DiscreteMeasure& U,
                                                   const DualPotentials& pot) {
    if (pot.f.size() != P.size() || pot.g.size() != U.size())
        throw ValidationError("marginal_residual: potential shapes do not match measures");
    const Matrix C = cost_matrix(P.points(), U.points()).values;
    const double eps = pot.epsilon;
    Matrix S = (-C / eps);
    S.colwise() += pot.f / eps;
    S.rowwise() += (pot.g / eps).transpose();
    const Matrix E = S.array().exp().matrix();
    const double rP = ((E * U.weights()).array() - 1.0).abs().maxCoeff();
    const double rU = ((E.transpose() * P.weights()).array() - 1.0).abs().maxCoeff();
    return {rP, rU};
}

/// Primal plan recovered from converged potentials.
inline TransportPlan plan(const DiscreteMeasure& P, const DiscreteMeasure& U,
                          const DualPotentials& pot) {
    if (!pot.converged)
        throw ValidationError("plan: potentials did not converge; refuse to exponentiate");
    if (pot.f.size() != P.size() || pot.g.size() != U.size())
        throw ValidationError("plan: potential shapes do not match measures");
    const Matrix C = cost_matrix(P.points(), U.points()).values;
    const double eps = pot.epsilon;
    Matrix S = (-C / eps);
    S.colwise() += pot.f / eps;
    S.rowwise() += (pot.g / eps).transpose();
    TransportPlan out;
    out.values = (S.array().exp() * (P.weights() * U.weights().transpose()).array()).matrix();
    return out;
}

/// Dual objective value; equals the regularized transport cost at
/// convergence, where the exponential correction term vanishes.
inline double divergence_value(const DiscreteMeasure& P, const DiscreteMeasure& U,
                               const DualPotentials& pot) {
    if (pot.f.size() != P.size() || pot.g.size() != U.size())
        throw ValidationError("divergence_value: potential shapes do not match measures");
    const Matrix C = cost_matrix(P.points(), U.points()).values;
    const double eps = pot.epsilon;
    Matrix S = (-C / eps);
    S.colwise() += pot.f / eps;
    S.rowwise() += (pot.g / eps).transpose();
    const double gibbs_mass = (P.weights().transpose() * S.array().exp().matrix() * U.weights()).value();
    return P.weights().dot(pot.f) + U.weights().dot(pot.g) - eps * (gibbs_mass - 1.0);
}

/// Canonical out-of-support extension of the reference-side potential:
///   g(y) = -eps * log sum_i p_i exp((f_i - 0.5 |x_i - y|^2) / eps).
/// On the reference support this reproduces the solver's centered g.
inline Vector extend_potential(const DiscreteMeasure& P, const Vector& f,
                               const Matrix& query, double epsilon) {
    if (f.size() != P.size())
        throw ValidationError("extend_potential: f length does not match measure");
    if (query.cols() != P.dim())
        throw ValidationError("extend_potential: query dimension mismatch");
    const Vector base = (P.weights().array().log() + f.array() / epsilon).matrix();
    Vector out(query.rows());
    Vector a(P.size());
    for (Index r = 0; r < query.rows(); ++r) {
        for (Index i = 0; i < P.size(); ++i)
            a(i) = base(i) - 0.5 * (P.points().row(i) - query.row(r)).squaredNorm() / epsilon;
        const double m = a.maxCoeff();
        out(r) = -epsilon * (m + std::log((a.array() - m).exp().sum()));
    }
    return out;
}

}  // namespace sinkgp

#endif  // SINKGP_SINKHORN_HPP
