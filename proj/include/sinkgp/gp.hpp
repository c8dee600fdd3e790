#ifndef SINKGP_GP_HPP
#define SINKGP_GP_HPP

#include "sinkgp/common.hpp"
#include "sinkgp/embedding.hpp"
#include "sinkgp/kernels.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/LU>

#include <cmath>
#include <iostream>
#include <optional>
#include <vector>

namespace sinkgp {

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

/// Lower Cholesky factor of A, escalating through the jitter ladder
/// {0, 1e-10, 1e-8, 1e-6} * scale on failure.
inline Matrix cholesky_with_jitter(const Matrix& A, double scale, double* jitter_used = nullptr) {
    static const double ladder[] = {0.0, 1e-10, 1e-8, 1e-6};
    for (double mult : ladder) {
        Matrix M = A;
        M.diagonal().array() += mult * scale;
        Eigen::LLT<Matrix> llt(M);
        if (llt.info() == Eigen::Success) {
            if (jitter_used) *jitter_used = mult * scale;
            return llt.matrixL();
        }
    }
    throw NumericError("cholesky failed after jitter ladder {0,1e-10,1e-8,1e-6} x " +
                       std::to_string(scale));
}

inline double logistic(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// log(1 + e^v) without overflow
inline double log1pexp(double v) {
    return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
}

// ---------------------------------------------------------------------------
// Regression likelihood.
// ---------------------------------------------------------------------------

struct RegressionLikelihood {
    double lml = 0.0;
    Vector alpha;     // (K + noise I)^-1 y
    Matrix L;         // chol factor of K + noise I (+ jitter)
    Matrix Kn_inv;    // (K + noise I + jitter)^-1, for gradients
    double jitter = 0.0;
};

inline RegressionLikelihood regression_likelihood(const Matrix& K, const Vector& y, double noise,
                                                  double variance_scale) {
    if (K.rows() != y.size()) throw ValidationError("lml: Gram/target size mismatch");
    if (noise < 0.0) throw ValidationError("lml: negative noise");
    RegressionLikelihood out;
    Matrix M = K;
    M.diagonal().array() += noise;
    out.L = cholesky_with_jitter(M, variance_scale, &out.jitter);
    out.alpha = out.L.transpose().triangularView<Eigen::Upper>().solve(
        out.L.triangularView<Eigen::Lower>().solve(y));
    const Index n = y.size();
    out.lml = -0.5 * y.dot(out.alpha) - out.L.diagonal().array().log().sum() -
              0.5 * static_cast<double>(n) * kLog2Pi;
    Matrix eye = Matrix::Identity(n, n);
    out.Kn_inv = out.L.transpose().triangularView<Eigen::Upper>().solve(
        out.L.triangularView<Eigen::Lower>().solve(eye));
    return out;
}

/// Log density of y under the zero-mean Gaussian with covariance
/// G + noise I, via Cholesky.
inline double log_marginal_likelihood(const GramMatrix& G, const Vector& y, double noise) {
    return regression_likelihood(G.values, y, noise, G.spec.variance).lml;
}

// ---------------------------------------------------------------------------
// Laplace approximation for the Bernoulli-logistic likelihood.
// ---------------------------------------------------------------------------

struct LaplaceFit {
    Vector latent;      // MAP latent vector v
    Vector alpha;       // K^-1 v, maintained without forming the inverse
    Vector sqrt_w;      // sqrt of the negative log-likelihood curvature at v
    Vector grad_lik;    // y - sigma(v)
    Matrix LB;          // chol factor of B = I + sqrtW K sqrtW at v
    double lml = 0.0;   // Laplace-approximate log marginal likelihood
    int newton_iters = 0;
};

inline double bernoulli_loglik(const std::vector<int>& y, const Vector& v) {
    double acc = 0.0;
    for (Index i = 0; i < v.size(); ++i)
        acc += static_cast<double>(y[static_cast<std::size_t>(i)]) * v(i) - log1pexp(v(i));
    return acc;
}

/// Newton iterations for the latent posterior mode, parameterized through
/// a = K^-1 v so K is never inverted. Each step must not decrease the
/// penalized objective; a failing step is halved before being accepted.
inline LaplaceFit laplace_fit(const Matrix& K, const std::vector<int>& y) {
    const Index n = K.rows();
    if (static_cast<Index>(y.size()) != n) throw ValidationError("laplace: Gram/label size mismatch");
    for (int label : y)
        if (label != 0 && label != 1) throw ValidationError("laplace: labels must be 0 or 1");

    LaplaceFit fit;
    Vector v = Vector::Zero(n);
    Vector a = Vector::Zero(n);
    double psi = bernoulli_loglik(y, v);  // - 0.5 a.v with a = 0

    int iter = 0;
    double step_inf = std::numeric_limits<double>::infinity();
    Matrix B(n, n);
    for (; iter < 100 && step_inf > 1e-8; ++iter) {
        Vector pi(n), w(n), sw(n);
        for (Index i = 0; i < n; ++i) {
            pi(i) = logistic(v(i));
            w(i) = pi(i) * (1.0 - pi(i));
            sw(i) = std::sqrt(w(i));
        }
        B = sw.asDiagonal() * K * sw.asDiagonal();
        B.diagonal().array() += 1.0;
        Eigen::LLT<Matrix> llt(B);
        if (llt.info() != Eigen::Success) throw NumericError("laplace: chol of B failed");
        Matrix LB = llt.matrixL();

        Vector grad(n);
        for (Index i = 0; i < n; ++i) grad(i) = static_cast<double>(y[static_cast<std::size_t>(i)]) - pi(i);
        const Vector b = w.asDiagonal() * v + grad;
        const Vector t2 = sw.asDiagonal() * (K * b);
        const Vector t3 = LB.transpose().triangularView<Eigen::Upper>().solve(
            LB.triangularView<Eigen::Lower>().solve(t2));
        const Vector a_new = b - sw.asDiagonal() * t3;
        const Vector da = a_new - a;

        double t = 1.0;
        bool accepted = false;
        for (int halved = 0; halved < 60; ++halved) {
            const Vector a_try = a + t * da;
            const Vector v_try = K * a_try;
            const double psi_try = bernoulli_loglik(y, v_try) - 0.5 * a_try.dot(v_try);
            if (psi_try >= psi - 1e-12 * std::abs(psi)) {
                step_inf = (v_try - v).lpNorm<Eigen::Infinity>();
                a = a_try;
                v = v_try;
                psi = psi_try;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if (!accepted) throw NumericError("laplace: Newton step failed to increase the objective");
    }

    // Refresh the curvature quantities at the accepted mode.
    fit.latent = v;
    fit.alpha = a;
    fit.newton_iters = iter;
    fit.sqrt_w.resize(n);
    fit.grad_lik.resize(n);
    for (Index i = 0; i < n; ++i) {
        const double pi = logistic(v(i));
        fit.sqrt_w(i) = std::sqrt(pi * (1.0 - pi));
        fit.grad_lik(i) = static_cast<double>(y[static_cast<std::size_t>(i)]) - pi;
    }
    B = fit.sqrt_w.asDiagonal() * K * fit.sqrt_w.asDiagonal();
    B.diagonal().array() += 1.0;
    Eigen::LLT<Matrix> llt(B);
    if (llt.info() != Eigen::Success) throw NumericError("laplace: chol of B failed at mode");
    fit.LB = llt.matrixL();
    fit.lml = bernoulli_loglik(y, v) - 0.5 * a.dot(v) - fit.LB.diagonal().array().log().sum();
    return fit;
}

// ---------------------------------------------------------------------------
// Trained model.
// ---------------------------------------------------------------------------

enum class GPKind { regression, classification };

struct GPModel {
    GPKind kind = GPKind::regression;
    std::vector<Embedding> embeddings;
    std::optional<DiscreteMeasure> ref;  // realized reference; weights drive distances
    KernelSpec spec;
    double noise = 0.0;
    Vector targets;           // regression
    std::vector<int> labels;  // classification
    Matrix chol;              // L of K+noise I (regression) or of B (classification)
    Vector alpha;             // (K+noise I)^-1 y  or  K^-1 latent_map
    Vector latent_map;        // classification MAP latents
    Vector sqrt_w;            // classification curvature^(1/2)
    Vector grad_lik;          // classification y - sigma(latent)
    double log_marginal = 0.0;
    double jitter = 0.0;
};

/// Regression prediction carries (mean, variance); classification carries
/// the class-1 probability plus the latent Gaussian it was averaged over.
struct PredictionResult {
    double mean = 0.0;
    double variance = 0.0;
    double probability = 0.0;
};

inline GPModel fit_regression(const std::vector<Embedding>& es, const DiscreteMeasure& ref,
                              const Vector& y, const KernelSpec& spec, double noise) {
    if (static_cast<Index>(es.size()) != y.size())
        throw ValidationError("fit_regression: embeddings/target size mismatch");
    if (!y.allFinite()) throw ValidationError("fit_regression: non-finite target");
    const GramMatrix G = gram(es, ref, spec);
    RegressionLikelihood lik = regression_likelihood(G.values, y, noise, spec.variance);
    GPModel model;
    model.kind = GPKind::regression;
    model.embeddings = es;
    model.ref = ref;
    model.spec = spec;
    model.noise = noise;
    model.targets = y;
    model.chol = std::move(lik.L);
    model.alpha = std::move(lik.alpha);
    model.log_marginal = lik.lml;
    model.jitter = lik.jitter;
    return model;
}

inline std::vector<PredictionResult> predict_regression(const GPModel& model,
                                                        const std::vector<Embedding>& queries) {
    if (model.kind != GPKind::regression) throw ValidationError("predict_regression: wrong model kind");
    if (!model.ref) throw ValidationError("predict_regression: model has no reference measure");
    std::vector<PredictionResult> out(queries.size());
    const Index n = static_cast<Index>(model.embeddings.size());
    Vector k(n);
    for (std::size_t qi = 0; qi < queries.size(); ++qi) {
        for (Index i = 0; i < n; ++i)
            k(i) = kernel_value(model.spec,
                                embedding_distance(queries[qi], model.embeddings[static_cast<std::size_t>(i)],
                                                   *model.ref));
        const Vector v = model.chol.triangularView<Eigen::Lower>().solve(k);
        PredictionResult& r = out[qi];
        r.mean = k.dot(model.alpha);
        r.variance = std::max(0.0, model.spec.variance - v.squaredNorm());
    }
    return out;
}

/// Fits the logistic-likelihood model on a prebuilt Gram matrix.
inline GPModel laplace_fit_classification(const GramMatrix& G, const std::vector<int>& labels) {
    bool has0 = false, has1 = false;
    for (int y : labels) (y == 0 ? has0 : has1) = true;
    if (!has0 || !has1)
        std::cerr << "warning: classification labels are single-class; the fit is degenerate\n";
    LaplaceFit fit = laplace_fit(G.values, labels);
    GPModel model;
    model.kind = GPKind::classification;
    model.spec = G.spec;
    model.labels = labels;
    model.chol = std::move(fit.LB);
    model.alpha = std::move(fit.alpha);
    model.latent_map = std::move(fit.latent);
    model.sqrt_w = std::move(fit.sqrt_w);
    model.grad_lik = std::move(fit.grad_lik);
    model.log_marginal = fit.lml;
    return model;
}

inline GPModel fit_classification(const std::vector<Embedding>& es, const DiscreteMeasure& ref,
                                  const std::vector<int>& labels, const KernelSpec& spec) {
    if (es.size() != labels.size())
        throw ValidationError("fit_classification: embeddings/label size mismatch");
    GPModel model = laplace_fit_classification(gram(es, ref, spec), labels);
    model.embeddings = es;
    model.ref = ref;
    return model;
}

/// 32-point Gauss-Hermite rule, from the Jacobi matrix of the Hermite
/// recurrence.
inline const std::pair<Vector, Vector>& gauss_hermite_32() {
    static const std::pair<Vector, Vector> rule = [] {
        const int n = 32;
        Matrix J = Matrix::Zero(n, n);
        for (int i = 1; i < n; ++i) {
            const double b = std::sqrt(static_cast<double>(i) / 2.0);
            J(i, i - 1) = b;
            J(i - 1, i) = b;
        }
        Eigen::SelfAdjointEigenSolver<Matrix> es(J);
        Vector nodes = es.eigenvalues();
        Vector weights(n);
        const double sqrt_pi = std::sqrt(3.14159265358979323846264338327950288);
        for (int i = 0; i < n; ++i) {
            const double v0 = es.eigenvectors()(0, i);
            weights(i) = sqrt_pi * v0 * v0;
        }
        return std::make_pair(nodes, weights);
    }();
    return rule;
}

/// Averages the logistic over a scalar Gaussian N(mean, var).
inline double logistic_gaussian_integral(double mean, double var) {
    const auto& [nodes, weights] = gauss_hermite_32();
    const double s = std::sqrt(2.0 * std::max(0.0, var));
    double acc = 0.0;
    for (Index i = 0; i < nodes.size(); ++i)
        acc += weights(i) * logistic(mean + s * nodes(i));
    return acc / std::sqrt(3.14159265358979323846264338327950288);
}

inline std::vector<PredictionResult> predict_classification(const GPModel& model,
                                                            const std::vector<Embedding>& queries) {
    if (model.kind != GPKind::classification)
        throw ValidationError("predict_classification: wrong model kind");
    if (!model.ref) throw ValidationError("predict_classification: model has no reference measure");
    std::vector<PredictionResult> out(queries.size());
    const Index n = static_cast<Index>(model.embeddings.size());
    Vector k(n);
    for (std::size_t qi = 0; qi < queries.size(); ++qi) {
        for (Index i = 0; i < n; ++i)
            k(i) = kernel_value(model.spec,
                                embedding_distance(queries[qi], model.embeddings[static_cast<std::size_t>(i)],
                                                   *model.ref));
        const double mean = k.dot(model.grad_lik);
        const Vector v = model.chol.triangularView<Eigen::Lower>().solve(
            (model.sqrt_w.array() * k.array()).matrix());
        const double var = std::max(0.0, model.spec.variance - v.squaredNorm());
        PredictionResult& r = out[qi];
        r.mean = mean;
        r.variance = var;
        r.probability = logistic_gaussian_integral(mean, var);
    }
    return out;
}

/// Explained variance score: 1 - Var(y - yhat) / Var(y).
inline double evs(const Vector& y_true, const Vector& y_pred) {
    if (y_true.size() != y_pred.size() || y_true.size() == 0)
        throw ValidationError("evs: length mismatch or empty input");
    auto variance = [](const Vector& v) {
        const double m = v.mean();
        return (v.array() - m).square().sum() / static_cast<double>(v.size());
    };
    const double var_true = variance(y_true);
    if (var_true <= 0.0) throw ValidationError("evs: zero target variance");
    return 1.0 - variance(y_true - y_pred) / var_true;
}

// ---------------------------------------------------------------------------
// Likelihood gradients against Gram entries, for the training loop.
// ---------------------------------------------------------------------------

/// d lml / d K_ab in the free-entry convention (symmetric here).
struct RegressionGramGradient {
    double lml = 0.0;
    Matrix dK;          // 0.5 (alpha alpha^T - Kn^-1)
    double dnoise = 0.0;
};

inline RegressionGramGradient regression_gram_gradient(const Matrix& K, const Vector& y, double noise,
                                                       double variance_scale) {
    RegressionLikelihood lik = regression_likelihood(K, y, noise, variance_scale);
    RegressionGramGradient out;
    out.lml = lik.lml;
    out.dK = 0.5 * (lik.alpha * lik.alpha.transpose() - lik.Kn_inv);
    out.dnoise = out.dK.trace();
    return out;
}

/// d (Laplace lml) / d K_ab in the free-entry convention; includes both
/// the explicit term and the implicit dependence through the MAP latents.
struct LaplaceGramGradient {
    double lml = 0.0;
    Matrix dK;  // not symmetric; symmetrize when chaining to distances
};

inline LaplaceGramGradient laplace_gram_gradient(const Matrix& K, const std::vector<int>& y) {
    const LaplaceFit fit = laplace_fit(K, y);
    const Index n = K.rows();

    // (W^-1 + K)^-1 = sW B^-1 sW, stable for vanishing curvature.
    Matrix Binv = fit.LB.transpose().triangularView<Eigen::Upper>().solve(
        fit.LB.triangularView<Eigen::Lower>().solve(Matrix::Identity(n, n)));
    const Matrix R = fit.sqrt_w.asDiagonal() * Binv * fit.sqrt_w.asDiagonal();
    Matrix dK_explicit = 0.5 * (fit.alpha * fit.alpha.transpose() - R);

    // Posterior covariance at the mode, for the implicit term.
    const Matrix post = K - K * R * K;
    Vector s2(n);
    for (Index i = 0; i < n; ++i) {
        const double pi = logistic(fit.latent(i));
        const double wprime = pi * (1.0 - pi) * (1.0 - 2.0 * pi);  // dW/dv
        s2(i) = -0.5 * post(i, i) * wprime;
    }
    // dv/dK_ab = (I + KW)^-1 e_a u_b with u = y - sigma(v).
    Matrix IWK = Matrix::Identity(n, n);
    IWK += (fit.sqrt_w.array().square().matrix()).asDiagonal() * K;
    const Vector t = IWK.partialPivLu().solve(s2);

    LaplaceGramGradient out;
    out.lml = fit.lml;
    out.dK = dK_explicit + t * fit.grad_lik.transpose();
    return out;
}

}  // namespace sinkgp

#endif  // SINKGP_GP_HPP
