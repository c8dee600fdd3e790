#ifndef SINKGP_EMBEDDING_HPP
#define SINKGP_EMBEDDING_HPP

#include "sinkgp/common.hpp"
#include "sinkgp/measure.hpp"
#include "sinkgp/sinkhorn.hpp"
#include "sinkgp/threading.hpp"

#include <cmath>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace sinkgp {

/// Unconstrained parameterization of the trainable reference measure:
/// points = scale * tanh(x_raw) keeps the support bounded, weights =
/// softmax(w_raw) keeps them a probability vector.
struct ReferenceParams {
    Matrix x_raw;  // q x d
    Vector w_raw;  // q
    double scale = 1.0;

    Index atoms() const { return x_raw.rows(); }
    Index dim() const { return x_raw.cols(); }

    void validate() const {
        if (x_raw.rows() < 1 || x_raw.cols() < 1)
            throw ValidationError("reference: need at least one atom and one dimension");
        if (w_raw.size() != x_raw.rows())
            throw ValidationError("reference: w_raw length must equal atom count");
        if (!(scale > 0.0)) throw ValidationError("reference: scale must be > 0");
        if (!x_raw.allFinite() || !w_raw.allFinite())
            throw ValidationError("reference: non-finite parameter");
    }
};

inline Vector softmax(const Vector& v) {
    const double m = v.maxCoeff();
    Vector e = (v.array() - m).exp();
    return e / e.sum();
}

inline DiscreteMeasure realize_reference(const ReferenceParams& rp) {
    rp.validate();
    return DiscreteMeasure(rp.scale * rp.x_raw.array().tanh().matrix(), softmax(rp.w_raw));
}

/// Token identifying one realized reference at one regularization; two
/// embeddings are comparable only when their tokens match.
inline std::string ref_version_token(const DiscreteMeasure& ref, double epsilon) {
    std::uint64_t h = hash_matrix(ref.points());
    h = hash_vector(ref.weights(), h);
    h = fnv1a(&epsilon, sizeof(epsilon), h);
    return hash_token(h);
}

/// Centered reference-side potential of one measure: the coordinates used
/// by every kernel.
struct Embedding {
    Vector values;            // q, centered under the reference weights
    std::string ref_version;
    bool converged = false;
};

/// Warm-start store keyed by measure content. Entries only ever seed the
/// next solve; they change iteration counts, never fixed points, so a
/// stale read is harmless.
class PotentialCache {
public:
    std::optional<DualPotentials> lookup(std::uint64_t key) const {
        std::lock_guard<std::mutex> lock(mutex_);
        const auto it = map_.find(key);
        if (it == map_.end()) return std::nullopt;
        return it->second;
    }

    void store(std::uint64_t key, const DualPotentials& pot) {
        std::lock_guard<std::mutex> lock(mutex_);
        map_[key] = pot;
    }

    std::size_t size() const {
        std::lock_guard<std::mutex> lock(mutex_);
        return map_.size();
    }

    PotentialCache() = default;
    PotentialCache(const PotentialCache& other) {
        std::lock_guard<std::mutex> lock(other.mutex_);
        map_ = other.map_;
    }
    PotentialCache& operator=(const PotentialCache& other) {
        if (this == &other) return *this;
        auto copy = [&] {
            std::lock_guard<std::mutex> lock(other.mutex_);
            return other.map_;
        }();
        std::lock_guard<std::mutex> lock(mutex_);
        map_ = std::move(copy);
        return *this;
    }

private:
    mutable std::mutex mutex_;
    std::unordered_map<std::uint64_t, DualPotentials> map_;
};

/// Cache policy for one embedding pass.
enum class CacheMode {
    off,         // cold solves, cache untouched
    read_write,  // warm start from cache and store the result
    read_only    // warm start only; keeps an objective history-free
};

inline Embedding embed(const DiscreteMeasure& P, const DiscreteMeasure& ref,
                       const SinkhornConfig& cfg, PotentialCache* cache = nullptr,
                       CacheMode mode = CacheMode::read_write, UnrollTape* tape = nullptr) {
    if (P.dim() != ref.dim())
        throw ValidationError("embed: measure/reference dimension mismatch");
    std::optional<DualPotentials> warm;
    std::uint64_t key = 0;
    if (cache && mode != CacheMode::off) {
        key = P.content_hash();
        const auto hit = cache->lookup(key);
        if (hit && hit->f.size() == P.size() && hit->g.size() == ref.size()) warm = *hit;
    }
    const DualPotentials pot = solve(P, ref, cfg, warm, tape);
    if (cache && mode == CacheMode::read_write) cache->store(key, pot);
    Embedding e;
    e.values = pot.g;
    e.ref_version = ref_version_token(ref, cfg.epsilon);
    e.converged = pot.converged;
    return e;
}

/// Weighted L2 distance between two embeddings of the same reference;
/// equals the standard deviation of the potential difference under it.
inline double embedding_distance(const Embedding& a, const Embedding& b,
                                 const DiscreteMeasure& ref) {
    if (a.ref_version != b.ref_version)
        throw ValidationError("embedding_distance: embeddings come from different references");
    if (a.values.size() != b.values.size() || a.values.size() != ref.size())
        throw ValidationError("embedding_distance: length mismatch");
    return std::sqrt((ref.weights().array() * (a.values - b.values).array().square()).sum());
}

/// Embeds every measure of a dataset, order preserved. Measures are
/// independent, so the pass may run on several threads with identical
/// results; warm starts are per measure and never cross items.
inline std::vector<Embedding> embed_dataset(const LabeledDataset& ds, const ReferenceParams& rp,
                                            const SinkhornConfig& cfg,
                                            PotentialCache* cache = nullptr,
                                            CacheMode mode = CacheMode::read_write,
                                            int threads = 1) {
    const DiscreteMeasure ref = realize_reference(rp);
    std::vector<Embedding> out(ds.size());
    std::vector<std::string> failures(ds.size());
    parallel_for(ds.size(), threads, [&](std::size_t i) {
        try {
            out[i] = embed(ds.measures[i], ref, cfg, cache, mode);
        } catch (const std::exception& ex) {
            failures[i] = ex.what();
        }
    });
    std::string combined;
    for (std::size_t i = 0; i < failures.size(); ++i)
        if (!failures[i].empty())
            combined += "  [" + std::to_string(i) + "] " + failures[i] + "\n";
    if (!combined.empty())
        throw ValidationError("embed_dataset: failures at indices\n" + combined);
    return out;
}

// ---------------------------------------------------------------------------
// Reverse accumulation through the executed solve.
// ---------------------------------------------------------------------------

/// Adjoints of one solve with respect to its inputs, for a scalar whose
/// gradient against the centered g-vector is `seed`.
struct SolveAdjoints {
    Matrix cost_bar;     // n x q
    Vector logw_bar;     // q, through the f-updates
    Vector w_center_bar; // q, through the final centering step
};

/// Walks the tape backwards. The softmax matrices of each update are
/// recomputed from the stored potentials; their exponents are normalized
/// log-probabilities, so the recomputation cannot overflow.
inline SolveAdjoints backprop_solve(const Matrix& C, const Vector& logp, const Vector& logw,
                                    const Vector& ref_weights, double eps,
                                    const UnrollTape& tape, const Vector& seed) {
    const Index n = C.rows(), q = C.cols();
    if (tape.gs.size() != tape.fs.size() + 1)
        throw ValidationError("backprop_solve: malformed tape");
    SolveAdjoints adj;
    adj.cost_bar = Matrix::Zero(n, q);
    adj.logw_bar = Vector::Zero(q);
    adj.w_center_bar = Vector::Zero(q);

    // Centering: g_cent = g_K - (w . g_K) 1.
    const Vector& g_final = tape.gs.back();
    const double seed_sum = seed.sum();
    Vector gbar = seed - seed_sum * ref_weights;
    adj.w_center_bar = -seed_sum * g_final;

    Matrix expo(n, q);
    Vector fbar(n);
    for (std::ptrdiff_t i = static_cast<std::ptrdiff_t>(tape.fs.size()) - 1; i >= 0; --i) {
        const Vector& f_prev = tape.fs[static_cast<std::size_t>(i)];
        const Vector& g_cur = tape.gs[static_cast<std::size_t>(i) + 1];
        const Vector& g_prev = tape.gs[static_cast<std::size_t>(i)];

        // g_cur,j = -eps LSE_i(logp_i + (f_prev,i - C_ij)/eps); column softmax.
        expo = (-C / eps);
        expo.colwise() += (logp + f_prev / eps);
        expo.rowwise() += (g_cur / eps).transpose();
        expo = expo.array().exp().matrix();  // sigma_ij, columns sum to 1
        fbar.noalias() = -(expo * gbar);
        adj.cost_bar.noalias() += expo * gbar.asDiagonal();

        // f_prev,i = -eps LSE_j(logw_j + (g_prev,j - C_ij)/eps); row softmax.
        expo = (-C / eps);
        expo.rowwise() += (logw + g_prev / eps).transpose();
        expo.colwise() += f_prev / eps;
        expo = expo.array().exp().matrix();  // tau_ij, rows sum to 1
        gbar.noalias() = -(expo.transpose() * fbar);
        adj.cost_bar.noalias() += fbar.asDiagonal() * expo;
        adj.logw_bar.noalias() += -eps * (expo.transpose() * fbar);
    }
    // gbar at the window head lands on the (constant) initialization.
    return adj;
}

/// Gradient blocks with the shapes of the raw reference parameters.
struct RefGradient {
    Matrix x_raw;  // q x d
    Vector w_raw;  // q
};

/// Chains solve adjoints to the unconstrained parameters: cost entries to
/// reference points (through scale * tanh), weight adjoints through the
/// softmax. `w_extra_bar` carries any additional gradient against the
/// realized weights (centering, weighted distances).
inline RefGradient chain_to_raw_params(const SolveAdjoints& adj, const Vector& w_extra_bar,
                                       const Matrix& P_points, const DiscreteMeasure& ref,
                                       const ReferenceParams& rp) {
    const Index q = rp.atoms(), d = rp.dim();
    RefGradient grad;
    grad.x_raw = Matrix::Zero(q, d);
    grad.w_raw = Vector::Zero(q);

    // cost C_ij = 0.5 |x_i - y_j|^2  =>  dC_ij/dy_j = y_j - x_i.
    Matrix ybar = Matrix::Zero(q, d);
    for (Index j = 0; j < q; ++j) {
        const double colsum = adj.cost_bar.col(j).sum();
        ybar.row(j) = colsum * ref.points().row(j) - adj.cost_bar.col(j).transpose() * P_points;
    }
    // y = scale * tanh(x_raw).
    grad.x_raw = (ybar.array() * rp.scale * (1.0 - rp.x_raw.array().tanh().square())).matrix();

    // Total gradient against realized weights, then softmax backward.
    const Vector& w = ref.weights();
    Vector wbar = adj.w_center_bar + w_extra_bar +
                  (adj.logw_bar.array() / w.array()).matrix();
    grad.w_raw = (w.array() * (wbar.array() - w.dot(wbar))).matrix();
    return grad;
}

enum class JacobianMode { unrolled, finite_diff };

/// Jacobian of the centered embedding with respect to the raw reference
/// parameters, columns ordered as x_raw row-major then w_raw.
///
/// The unrolled mode differentiates the exact executed update sequence
/// (one backward sweep per output component) and requires the forward
/// solve to converge within unroll_cap sweeps. The finite-difference mode
/// is the independent oracle: central differences with step 1e-5.
inline Matrix embedding_jacobian(const DiscreteMeasure& P, const ReferenceParams& rp,
                                 const SinkhornConfig& cfg, JacobianMode mode) {
    rp.validate();
    const Index q = rp.atoms(), d = rp.dim();
    const Index cols = q * d + q;

    if (mode == JacobianMode::finite_diff) {
        const double h = 1e-5;
        Matrix jac(q, cols);
        auto embed_at = [&](const ReferenceParams& r) {
            return embed(P, realize_reference(r), cfg, nullptr, CacheMode::off).values;
        };
        for (Index c = 0; c < cols; ++c) {
            ReferenceParams lo = rp, hi = rp;
            if (c < q * d) {
                hi.x_raw(c / d, c % d) += h;
                lo.x_raw(c / d, c % d) -= h;
            } else {
                hi.w_raw(c - q * d) += h;
                lo.w_raw(c - q * d) -= h;
            }
            jac.col(c) = (embed_at(hi) - embed_at(lo)) / (2.0 * h);
        }
        return jac;
    }

    const DiscreteMeasure ref = realize_reference(rp);
    const Matrix C = cost_matrix(P.points(), ref.points()).values;
    UnrollTape tape;
    const DualPotentials pot = solve_with_cost(C, P.weights(), ref.weights(), cfg, std::nullopt, &tape);
    if (!pot.converged)
        throw NonConvergenceError("embedding_jacobian: forward solve did not converge within max_iter");
    if (tape.truncated || pot.iterations > cfg.unroll_cap)
        throw NonConvergenceError(
            "embedding_jacobian: forward solve needed " + std::to_string(pot.iterations) +
            " sweeps, beyond unroll_cap=" + std::to_string(cfg.unroll_cap) +
            "; raise the cap or use finite_diff");
    const Vector logp = P.weights().array().log().matrix();
    const Vector logw = ref.weights().array().log().matrix();

    Matrix jac(q, cols);
    for (Index r = 0; r < q; ++r) {
        Vector seed = Vector::Zero(q);
        seed(r) = 1.0;
        const SolveAdjoints adj = backprop_solve(C, logp, logw, ref.weights(), cfg.epsilon, tape, seed);
        const RefGradient grad = chain_to_raw_params(adj, Vector::Zero(q), P.points(), ref, rp);
        for (Index j = 0; j < q; ++j)
            for (Index k = 0; k < d; ++k) jac(r, j * d + k) = grad.x_raw(j, k);
        jac.row(r).tail(q) = grad.w_raw.transpose();
    }
    return jac;
}

}  // namespace sinkgp

#endif  // SINKGP_EMBEDDING_HPP
