#ifndef SINKGP_KERNELS_HPP
#define SINKGP_KERNELS_HPP

#include "sinkgp/common.hpp"
#include "sinkgp/embedding.hpp"
#include "sinkgp/measure.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <string>
#include <vector>

namespace sinkgp {

/// Radial families applied to the embedding distance. All are positive
/// definite on Hilbert spaces, so the resulting Gram matrices are PSD.
///
/// sqexp is the default; exp_norm applies the exponential to the
/// unsquared distance divided by 2*sigma^2, kept for parity with the
/// power-exponential form used in the original experiments.
enum class KernelFamily { sqexp, exp_norm, matern32, matern52 };

inline std::string to_string(KernelFamily f) {
    switch (f) {
        case KernelFamily::sqexp: return "sqexp";
        case KernelFamily::exp_norm: return "exp_norm";
        case KernelFamily::matern32: return "matern32";
        case KernelFamily::matern52: return "matern52";
    }
    return "?";
}

inline KernelFamily kernel_family_from_string(const std::string& s) {
    if (s == "sqexp") return KernelFamily::sqexp;
    if (s == "exp_norm") return KernelFamily::exp_norm;
    if (s == "matern32") return KernelFamily::matern32;
    if (s == "matern52") return KernelFamily::matern52;
    throw ValidationError("unknown kernel family '" + s + "'");
}

/// theta = (variance l, lengthscale sigma). The variance is the value at
/// distance zero, i.e. the prefactor.
struct KernelSpec {
    KernelFamily family = KernelFamily::sqexp;
    double variance = 1.0;
    double lengthscale = 1.0;

    void validate() const {
        if (!(variance > 0.0)) throw ValidationError("kernel: variance must be > 0");
        if (!(lengthscale > 0.0)) throw ValidationError("kernel: lengthscale must be > 0");
    }
};

inline double kernel_value(const KernelSpec& spec, double distance) {
    spec.validate();
    if (distance < 0.0) throw ValidationError("kernel: negative distance");
    const double l = spec.variance, s = spec.lengthscale;
    switch (spec.family) {
        case KernelFamily::sqexp:
            return l * std::exp(-distance * distance / (2.0 * s * s));
        case KernelFamily::exp_norm:
            return l * std::exp(-distance / (2.0 * s * s));
        case KernelFamily::matern32: {
            const double r = std::sqrt(3.0) * distance / s;
            return l * (1.0 + r) * std::exp(-r);
        }
        case KernelFamily::matern52: {
            const double r = std::sqrt(5.0) * distance / s;
            return l * (1.0 + r + r * r / 3.0) * std::exp(-r);
        }
    }
    throw ValidationError("kernel: bad family");
}

/// dK/d(distance); zero at distance 0 for the families smooth there,
/// and taken as zero at the nonsmooth origin of exp_norm/matern
/// (identical embeddings contribute no distance gradient).
inline double kernel_ddist(const KernelSpec& spec, double distance) {
    const double l = spec.variance, s = spec.lengthscale;
    switch (spec.family) {
        case KernelFamily::sqexp:
            return -distance / (s * s) * l * std::exp(-distance * distance / (2.0 * s * s));
        case KernelFamily::exp_norm:
            if (distance == 0.0) return 0.0;
            return -l / (2.0 * s * s) * std::exp(-distance / (2.0 * s * s));
        case KernelFamily::matern32: {
            if (distance == 0.0) return 0.0;
            const double r = std::sqrt(3.0) * distance / s;
            return -l * r * std::exp(-r) * std::sqrt(3.0) / s;
        }
        case KernelFamily::matern52: {
            if (distance == 0.0) return 0.0;
            const double r = std::sqrt(5.0) * distance / s;
            return -l * r * (1.0 + r) / 3.0 * std::exp(-r) * std::sqrt(5.0) / s;
        }
    }
    throw ValidationError("kernel: bad family");
}

/// dK/d(log sigma).
inline double kernel_dlogsigma(const KernelSpec& spec, double distance) {
    const double l = spec.variance, s = spec.lengthscale;
    switch (spec.family) {
        case KernelFamily::sqexp: {
            const double z = distance * distance / (s * s);
            return l * std::exp(-z / 2.0) * z;
        }
        case KernelFamily::exp_norm: {
            const double z = distance / (s * s);
            return l * std::exp(-z / 2.0) * z;
        }
        case KernelFamily::matern32: {
            const double r = std::sqrt(3.0) * distance / s;
            return l * std::exp(-r) * r * r;
        }
        case KernelFamily::matern52: {
            const double r = std::sqrt(5.0) * distance / s;
            return l * std::exp(-r) * r * r * (1.0 + r) / 3.0;
        }
    }
    throw ValidationError("kernel: bad family");
}

struct GramMatrix {
    Matrix values;
    KernelSpec spec;
    std::string ref_version;
};

/// Pairwise weighted squared distances between embeddings (upper triangle
/// mirrored), shared by the Gram builder and the likelihood gradients.
inline Matrix embedding_sqdist_matrix(const std::vector<Embedding>& es, const DiscreteMeasure& ref) {
    const Index n = static_cast<Index>(es.size());
    Matrix s = Matrix::Zero(n, n);
    for (Index a = 0; a < n; ++a) {
        if (es[static_cast<std::size_t>(a)].ref_version != es[0].ref_version)
            throw ValidationError("gram: embeddings come from mixed references");
        if (es[static_cast<std::size_t>(a)].values.size() != ref.size())
            throw ValidationError("gram: embedding length does not match reference");
    }
    for (Index a = 0; a < n; ++a)
        for (Index b = a + 1; b < n; ++b) {
            const double v = (ref.weights().array() *
                              (es[static_cast<std::size_t>(a)].values - es[static_cast<std::size_t>(b)].values)
                                  .array()
                                  .square())
                                 .sum();
            s(a, b) = v;
            s(b, a) = v;
        }
    return s;
}

/// Kernel matrix over one embedding set. Each unordered pair is evaluated
/// once and mirrored, so symmetry is bitwise; the diagonal is exactly the
/// variance.
inline GramMatrix gram(const std::vector<Embedding>& es, const DiscreteMeasure& ref,
                       const KernelSpec& spec) {
    spec.validate();
    const Index n = static_cast<Index>(es.size());
    GramMatrix out;
    out.spec = spec;
    out.ref_version = es.empty() ? ref_version_token(ref, 0.0) : es[0].ref_version;
    out.values.resize(n, n);
    const Matrix s = embedding_sqdist_matrix(es, ref);
    for (Index a = 0; a < n; ++a) {
        out.values(a, a) = spec.variance;
        for (Index b = a + 1; b < n; ++b) {
            const double k = kernel_value(spec, std::sqrt(s(a, b)));
            out.values(a, b) = k;
            out.values(b, a) = k;
        }
    }
    return out;
}

struct PsdReport {
    double min_eig = 0.0;
    bool ok = false;
};

/// Smallest eigenvalue check; ok when min_eig >= -tol * trace.
inline PsdReport check_psd(const Matrix& G, double tol) {
    if (G.rows() != G.cols()) throw ValidationError("check_psd: matrix not square");
    if (G.rows() > 0) {
        const double asym = (G - G.transpose()).cwiseAbs().maxCoeff();
        if (asym > 1e-10)
            throw ValidationError("check_psd: asymmetry " + std::to_string(asym) + " beyond 1e-10");
    }
    Eigen::SelfAdjointEigenSolver<Matrix> eig(G, Eigen::EigenvaluesOnly);
    PsdReport rep;
    rep.min_eig = eig.eigenvalues().minCoeff();
    rep.ok = rep.min_eig >= -tol * G.trace();
    return rep;
}

inline PsdReport check_psd(const GramMatrix& G, double tol) { return check_psd(G.values, tol); }

// ---------------------------------------------------------------------------
// MMD baseline.
// ---------------------------------------------------------------------------

/// Squared maximum mean discrepancy under the squared-exponential point
/// kernel exp(-|x-y|^2 / (2 sigma^2)); biased V-statistic including the
/// diagonal terms, clamped at zero against roundoff.
inline double mmd_sq(const DiscreteMeasure& P, const DiscreteMeasure& Q, double rbf_sigma) {
    if (P.dim() != Q.dim()) throw ValidationError("mmd: dimension mismatch");
    if (!(rbf_sigma > 0.0)) throw ValidationError("mmd: rbf_sigma must be > 0");
    const double inv = 1.0 / (2.0 * rbf_sigma * rbf_sigma);
    auto term = [inv](const DiscreteMeasure& A, const DiscreteMeasure& B) {
        double acc = 0.0;
        for (Index i = 0; i < A.size(); ++i) {
            double row = 0.0;
            for (Index j = 0; j < B.size(); ++j)
                row += B.weights()(j) *
                       std::exp(-(A.points().row(i) - B.points().row(j)).squaredNorm() * inv);
            acc += A.weights()(i) * row;
        }
        return acc;
    };
    const double v = term(P, P) + term(Q, Q) - 2.0 * term(P, Q);
    return v < 0.0 ? 0.0 : v;
}

inline double mmd_kernel(const DiscreteMeasure& P, const DiscreteMeasure& Q, double rbf_sigma,
                         double hat_sigma) {
    if (!(hat_sigma > 0.0)) throw ValidationError("mmd: hat_sigma must be > 0");
    return hat_sigma * std::exp(-mmd_sq(P, Q, rbf_sigma));
}

// ---------------------------------------------------------------------------
// Empirical-kernel consistency probe.
// ---------------------------------------------------------------------------

struct ConsistencyRow {
    Index subsample_size = 0;
    double mean_abs_error = 0.0;
};

/// For each subsample size k, draws P_k and Q_k over the seeds and records
/// the mean |K(P_k, Q_k) - K(P, Q)| against the full-measure kernel.
inline std::vector<ConsistencyRow> consistency_curve(const DiscreteMeasure& P, const DiscreteMeasure& Q,
                                                     const ReferenceParams& rp, const SinkhornConfig& cfg,
                                                     const KernelSpec& spec, const std::vector<Index>& sizes,
                                                     const std::vector<std::uint64_t>& seeds) {
    for (std::size_t i = 1; i < sizes.size(); ++i)
        if (sizes[i] <= sizes[i - 1]) throw ValidationError("consistency_curve: sizes must increase");
    const DiscreteMeasure ref = realize_reference(rp);
    const Embedding eP = embed(P, ref, cfg, nullptr, CacheMode::off);
    const Embedding eQ = embed(Q, ref, cfg, nullptr, CacheMode::off);
    const double k_full = kernel_value(spec, embedding_distance(eP, eQ, ref));

    std::vector<ConsistencyRow> rows;
    for (Index k : sizes) {
        double acc = 0.0;
        for (std::uint64_t seed : seeds) {
            const DiscreteMeasure Pk = subsample(P, k, seed);
            const DiscreteMeasure Qk = subsample(Q, k, seed ^ 0x9e3779b97f4a7c15ULL);
            const Embedding ePk = embed(Pk, ref, cfg, nullptr, CacheMode::off);
            const Embedding eQk = embed(Qk, ref, cfg, nullptr, CacheMode::off);
            acc += std::abs(kernel_value(spec, embedding_distance(ePk, eQk, ref)) - k_full);
        }
        rows.push_back({k, acc / static_cast<double>(seeds.size())});
    }
    return rows;
}

}  // namespace sinkgp

#endif  // SINKGP_KERNELS_HPP
