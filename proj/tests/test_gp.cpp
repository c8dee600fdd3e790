#include <catch2/catch_amalgamated.hpp>

#include "sinkgp/gp.hpp"
#include "sinkgp/rng.hpp"

#include <cmath>

using namespace sinkgp;

namespace {

DiscreteMeasure uniform_ref(Index q) {
    Matrix pts = Matrix::Zero(q, 1);
    for (Index j = 0; j < q; ++j) pts(j, 0) = static_cast<double>(j);
    return DiscreteMeasure(pts, Vector::Constant(q, 1.0 / static_cast<double>(q)));
}

std::vector<Embedding> random_embeddings(Rng& rng, Index n, Index q, const std::string& token) {
    std::vector<Embedding> es;
    for (Index i = 0; i < n; ++i) {
        Embedding e;
        e.values.resize(q);
        for (Index j = 0; j < q; ++j) e.values(j) = rng.normal();
        e.ref_version = token;
        e.converged = true;
        es.push_back(std::move(e));
    }
    return es;
}

GramMatrix wrap(const Matrix& K, const KernelSpec& spec) {
    GramMatrix G;
    G.values = K;
    G.spec = spec;
    G.ref_version = "test";
    return G;
}

}  // namespace

TEST_CASE("log marginal likelihood closed forms", "[gp]") {
    KernelSpec spec{KernelFamily::sqexp, 1.0, 1.0};
    SECTION("standard normal at zero") {
        const auto G = wrap(Matrix::Identity(1, 1), spec);
        Vector y(1);
        y << 0.0;
        REQUIRE(log_marginal_likelihood(G, y, 0.0) == Catch::Approx(-0.9189385332046727));
    }
    SECTION("standard normal at one") {
        const auto G = wrap(Matrix::Identity(1, 1), spec);
        Vector y(1);
        y << 1.0;
        REQUIRE(log_marginal_likelihood(G, y, 0.0) == Catch::Approx(-0.5 - 0.9189385332046727));
    }
    SECTION("diagonal covariance separates") {
        const auto G = wrap(Matrix::Identity(2, 2), spec);
        Vector y(2);
        y << 0.3, -1.2;
        const double expect = -0.5 * (0.09 + 1.44) - 2.0 * 0.9189385332046727;
        REQUIRE(log_marginal_likelihood(G, y, 0.0) == Catch::Approx(expect));
    }
}

TEST_CASE("regression fit and prediction", "[gp]") {
    Rng rng(211);
    const auto ref = uniform_ref(4);
    const std::string token = ref_version_token(ref, 0.01);
    KernelSpec spec{KernelFamily::sqexp, 1.0, 1.0};

    SECTION("zero targets give zero alpha") {
        const auto es = random_embeddings(rng, 5, 4, token);
        const auto model = fit_regression(es, ref, Vector::Zero(5), spec, 1e-8);
        REQUIRE(model.alpha.cwiseAbs().maxCoeff() <= 1e-14);
    }
    SECTION("scalar case solves exactly") {
        const auto es = random_embeddings(rng, 1, 4, token);
        Vector y(1);
        y << 2.0;
        const double noise = 0.25;
        const auto model = fit_regression(es, ref, y, spec, noise);
        REQUIRE(model.alpha(0) == Catch::Approx(2.0 / (1.0 + 0.25)));
    }
    SECTION("alpha solves the linear system to 1e-8") {
        const auto es = random_embeddings(rng, 12, 4, token);
        Vector y(12);
        for (Index i = 0; i < 12; ++i) y(i) = rng.normal();
        const double noise = 1e-4;
        const auto model = fit_regression(es, ref, y, spec, noise);
        const auto G = gram(es, ref, spec);
        Matrix Kn = G.values;
        Kn.diagonal().array() += noise + model.jitter;
        REQUIRE(((Kn * model.alpha) - y).cwiseAbs().maxCoeff() <= 1e-8);
    }
    SECTION("noiseless posterior interpolates the targets") {
        const auto es = random_embeddings(rng, 20, 4, token);
        Vector y(20);
        for (Index i = 0; i < 20; ++i) y(i) = rng.normal();
        const auto model = fit_regression(es, ref, y, spec, 0.0);
        const auto preds = predict_regression(model, es);
        for (Index i = 0; i < 20; ++i) {
            REQUIRE(preds[static_cast<std::size_t>(i)].mean == Catch::Approx(y(i)).margin(1e-6));
            REQUIRE(preds[static_cast<std::size_t>(i)].variance <= 1e-8 * spec.variance);
        }
    }
    SECTION("far queries revert to the prior") {
        const auto es = random_embeddings(rng, 6, 4, token);
        Vector y(6);
        for (Index i = 0; i < 6; ++i) y(i) = rng.normal();
        const auto model = fit_regression(es, ref, y, spec, 1e-6);
        Embedding far;
        far.values = Vector::Constant(4, 1e6);
        far.ref_version = token;
        far.converged = true;
        const auto preds = predict_regression(model, {far});
        REQUIRE(preds[0].mean == Catch::Approx(0.0).margin(1e-9));
        REQUIRE(preds[0].variance == Catch::Approx(spec.variance).margin(1e-9));
    }
    SECTION("two-point system by hand") {
        // K = [[1, .5], [.5, 1]], y = (1, 0): querying point 1 returns y1
        Matrix pts(2, 1);
        pts << 0.0, 1.0;
        const DiscreteMeasure r2(pts, Vector::Constant(2, 0.5));
        const std::string tk = ref_version_token(r2, 0.01);
        std::vector<Embedding> es(2);
        es[0].values = Vector::Zero(2);
        es[1].values = Vector::Zero(2);
        es[0].values << 1.0, -1.0;  // weighted distance
        es[1].values << -1.0, 1.0;
        es[0].ref_version = tk;
        es[1].ref_version = tk;
        // pick sigma so that K12 = 0.5: d^2 = 4 under w=(.5,.5) => exp(-4/(2 s^2)) = .5
        const double sigma = std::sqrt(2.0 / std::log(2.0));
        KernelSpec s2{KernelFamily::sqexp, 1.0, sigma};
        Vector y(2);
        y << 1.0, 0.0;
        const auto model = fit_regression(es, r2, y, s2, 0.0);
        const auto preds = predict_regression(model, {es[0]});
        REQUIRE(preds[0].mean == Catch::Approx(1.0).margin(1e-8));
    }
    SECTION("variance stays within [0, prior]") {
        const auto es = random_embeddings(rng, 10, 4, token);
        Vector y(10);
        for (Index i = 0; i < 10; ++i) y(i) = rng.normal();
        const auto model = fit_regression(es, ref, y, spec, 1e-6);
        const auto queries = random_embeddings(rng, 30, 4, token);
        for (const auto& p : predict_regression(model, queries)) {
            REQUIRE(p.variance >= 0.0);
            REQUIRE(p.variance <= spec.variance + 1e-12);
        }
    }
}

TEST_CASE("regression lml gradient matches finite differences", "[gp]") {
    Rng rng(223);
    const auto ref = uniform_ref(3);
    const std::string token = ref_version_token(ref, 0.01);
    const auto es = random_embeddings(rng, 8, 3, token);
    Vector y(8);
    for (Index i = 0; i < 8; ++i) y(i) = rng.normal();

    // gradient wrt (log l, log sigma, log noise) through the trace identity
    auto lml_at = [&](double logl, double logsigma, double lognoise) {
        KernelSpec spec{KernelFamily::sqexp, std::exp(logl), std::exp(logsigma)};
        const auto G = gram(es, ref, spec);
        return log_marginal_likelihood(G, y, std::exp(lognoise));
    };
    const double logl = 0.2, logsigma = -0.1, lognoise = std::log(1e-3);
    KernelSpec spec{KernelFamily::sqexp, std::exp(logl), std::exp(logsigma)};
    const auto G = gram(es, ref, spec);
    const auto gr = regression_gram_gradient(G.values, y, std::exp(lognoise), spec.variance);

    // analytic: dlml/dlog l = sum dK .* K ; dlog sigma via family derivative
    double an_logl = 0.0, an_logsigma = 0.0;
    const Matrix sq = embedding_sqdist_matrix(es, ref);
    for (Index a = 0; a < 8; ++a)
        for (Index b = 0; b < 8; ++b) {
            an_logl += gr.dK(a, b) * G.values(a, b);
            if (a != b) an_logsigma += gr.dK(a, b) * kernel_dlogsigma(spec, std::sqrt(sq(a, b)));
        }
    const double an_lognoise = gr.dnoise * std::exp(lognoise);

    const double h = 1e-5;
    const double fd_logl = (lml_at(logl + h, logsigma, lognoise) - lml_at(logl - h, logsigma, lognoise)) / (2 * h);
    const double fd_logsigma =
        (lml_at(logl, logsigma + h, lognoise) - lml_at(logl, logsigma - h, lognoise)) / (2 * h);
    const double fd_lognoise =
        (lml_at(logl, logsigma, lognoise + h) - lml_at(logl, logsigma, lognoise - h)) / (2 * h);
    REQUIRE(an_logl == Catch::Approx(fd_logl).epsilon(1e-5));
    REQUIRE(an_logsigma == Catch::Approx(fd_logsigma).epsilon(1e-5));
    REQUIRE(an_lognoise == Catch::Approx(fd_lognoise).epsilon(1e-5));
}

TEST_CASE("laplace fit", "[gp]") {
    KernelSpec spec{KernelFamily::sqexp, 1.0, 1.0};
    SECTION("single point matches the scalar bisection oracle") {
        const auto G = wrap(Matrix::Identity(1, 1), spec);
        const auto model = laplace_fit_classification(G, {1});
        // stationarity: 1 - sigma(v) = v; bisect on (0, 1)
        double lo = 0.0, hi = 1.0;
        for (int it = 0; it < 200; ++it) {
            const double mid = 0.5 * (lo + hi);
            ((1.0 - logistic(mid) - mid) > 0.0 ? lo : hi) = mid;
        }
        REQUIRE(model.latent_map(0) == Catch::Approx(0.5 * (lo + hi)).margin(1e-7));
    }
    SECTION("equal labels under scaled identity give equal latents") {
        const auto G = wrap((2.0 * Matrix::Identity(3, 3)).eval(), spec);
        const auto model = laplace_fit_classification(G, {1, 1, 1});
        REQUIRE(model.latent_map(0) == Catch::Approx(model.latent_map(1)));
        REQUIRE(model.latent_map(1) == Catch::Approx(model.latent_map(2)));
    }
    SECTION("flipping labels negates the latents") {
        Rng rng(227);
        Matrix A(4, 4);
        for (Index i = 0; i < 4; ++i)
            for (Index j = 0; j < 4; ++j) A(i, j) = rng.normal();
        Matrix K = A * A.transpose() + 4.0 * Matrix::Identity(4, 4);
        const auto pos = laplace_fit_classification(wrap(K, spec), {1, 0, 1, 0});
        const auto neg = laplace_fit_classification(wrap(K, spec), {0, 1, 0, 1});
        REQUIRE((pos.latent_map + neg.latent_map).cwiseAbs().maxCoeff() <= 1e-7);
    }
}

TEST_CASE("laplace lml gradient matches finite differences", "[gp]") {
    Rng rng(229);
    const auto ref = uniform_ref(3);
    const std::string token = ref_version_token(ref, 0.01);
    const auto es = random_embeddings(rng, 7, 3, token);
    const std::vector<int> labels = {1, 0, 1, 1, 0, 0, 1};

    const double logl = 0.3, logsigma = 0.1;
    KernelSpec spec{KernelFamily::sqexp, std::exp(logl), std::exp(logsigma)};
    const auto G = gram(es, ref, spec);
    const auto lg = laplace_gram_gradient(G.values, labels);

    double an_logl = 0.0, an_logsigma = 0.0;
    const Matrix sq = embedding_sqdist_matrix(es, ref);
    for (Index a = 0; a < 7; ++a)
        for (Index b = 0; b < 7; ++b) {
            an_logl += lg.dK(a, b) * G.values(a, b);
            if (a != b) an_logsigma += lg.dK(a, b) * kernel_dlogsigma(spec, std::sqrt(sq(a, b)));
        }

    auto lml_at = [&](double ll, double ls) {
        KernelSpec s{KernelFamily::sqexp, std::exp(ll), std::exp(ls)};
        return laplace_fit(gram(es, ref, s).values, labels).lml;
    };
    const double h = 1e-5;
    const double fd_logl = (lml_at(logl + h, logsigma) - lml_at(logl - h, logsigma)) / (2 * h);
    const double fd_logsigma = (lml_at(logl, logsigma + h) - lml_at(logl, logsigma - h)) / (2 * h);
    REQUIRE(an_logl == Catch::Approx(fd_logl).epsilon(1e-5).margin(1e-9));
    REQUIRE(an_logsigma == Catch::Approx(fd_logsigma).epsilon(1e-5).margin(1e-9));
}

TEST_CASE("classification prediction", "[gp]") {
    Rng rng(233);
    const auto ref = uniform_ref(3);
    const std::string token = ref_version_token(ref, 0.01);
    KernelSpec spec{KernelFamily::sqexp, 1.0, 1.0};

    SECTION("an uninformative query gives probability one half") {
        // balanced labels under near-identity Gram keep latents tiny; a far
        // query has k = 0, so the latent is a centered Gaussian
        const auto es = random_embeddings(rng, 4, 3, token);
        const auto model = fit_classification(es, ref, {1, 0, 1, 0}, spec);
        Embedding far;
        far.values = Vector::Constant(3, 1e6);
        far.ref_version = token;
        far.converged = true;
        const auto preds = predict_classification(model, {far});
        REQUIRE(preds[0].probability == Catch::Approx(0.5).margin(1e-9));
    }
    SECTION("tiny variance collapses to the logistic of the mean") {
        const double mean = 1.3;
        REQUIRE(logistic_gaussian_integral(mean, 0.0) == Catch::Approx(logistic(mean)).margin(1e-12));
    }
    SECTION("flipped training labels mirror the probability") {
        const auto es = random_embeddings(rng, 6, 3, token);
        const std::vector<int> labels = {1, 0, 0, 1, 1, 0};
        std::vector<int> flipped;
        for (int y : labels) flipped.push_back(1 - y);
        const auto pos = fit_classification(es, ref, labels, spec);
        const auto neg = fit_classification(es, ref, flipped, spec);
        const auto queries = random_embeddings(rng, 5, 3, token);
        const auto pp = predict_classification(pos, queries);
        const auto pn = predict_classification(neg, queries);
        for (std::size_t i = 0; i < queries.size(); ++i)
            REQUIRE(pp[i].probability + pn[i].probability == Catch::Approx(1.0).margin(1e-8));
    }
    SECTION("probabilities live in [0, 1]") {
        const auto es = random_embeddings(rng, 8, 3, token);
        const auto model = fit_classification(es, ref, {1, 1, 0, 0, 1, 0, 1, 0}, spec);
        const auto queries = random_embeddings(rng, 20, 3, token);
        for (const auto& p : predict_classification(model, queries)) {
            REQUIRE(p.probability >= 0.0);
            REQUIRE(p.probability <= 1.0);
        }
    }
}

TEST_CASE("evs", "[gp]") {
    Vector y(4);
    y << 1.0, -1.0, 2.0, -2.0;
    REQUIRE(evs(y, y) == Catch::Approx(1.0));
    REQUIRE(evs(y, Vector::Constant(4, y.mean())) == Catch::Approx(0.0));
    REQUIRE(evs(y, (-y).eval()) == Catch::Approx(-3.0));
    REQUIRE_THROWS_AS(evs(Vector::Ones(3), Vector::Ones(3)), ValidationError);
    REQUIRE_THROWS_AS(evs(Vector::Zero(3), Vector::Zero(2)), ValidationError);
}

TEST_CASE("jitter ladder reports failure", "[gp]") {
    Matrix bad(2, 2);
    bad << 1.0, 2.0, 2.0, 1.0;  // indefinite beyond any tiny jitter
    REQUIRE_THROWS_AS(cholesky_with_jitter(bad, 1.0), NumericError);
    double used = -1.0;
    Matrix boundary(2, 2);
    boundary << 1.0, 1.0, 1.0, 1.0;  // PSD rank-1; needs a jitter step
    const Matrix L = cholesky_with_jitter(boundary, 1.0, &used);
    REQUIRE(used >= 0.0);
    REQUIRE(((L * L.transpose()) - boundary).cwiseAbs().maxCoeff() <= 1e-5);
}
