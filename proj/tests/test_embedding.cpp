#include <catch2/catch_amalgamated.hpp>

#include "sinkgp/embedding.hpp"
#include "sinkgp/measure.hpp"
#include "sinkgp/rng.hpp"

#include <cmath>

using namespace sinkgp;

namespace {

DiscreteMeasure random_measure(Rng& rng, Index n, Index d, double box = 1.0) {
    Matrix pts(n, d);
    Vector w(n);
    for (Index i = 0; i < n; ++i) {
        w(i) = rng.uniform(0.1, 1.0);
        for (Index j = 0; j < d; ++j) pts(i, j) = rng.uniform(0.0, box);
    }
    return DiscreteMeasure(std::move(pts), std::move(w));
}

ReferenceParams random_params(Rng& rng, Index q, Index d, double scale = 1.0) {
    ReferenceParams rp;
    rp.x_raw.resize(q, d);
    rp.w_raw.resize(q);
    for (Index j = 0; j < q; ++j) {
        rp.w_raw(j) = rng.uniform(-0.5, 0.5);
        for (Index k = 0; k < d; ++k) rp.x_raw(j, k) = rng.uniform(-1.0, 1.0);
    }
    rp.scale = scale;
    return rp;
}

double sup_rel_error(const Matrix& a, const Matrix& b) {
    const double scale = std::max(b.cwiseAbs().maxCoeff(), 1e-12);
    return (a - b).cwiseAbs().maxCoeff() / scale;
}

}  // namespace

TEST_CASE("realize_reference applies tanh and softmax", "[embedding]") {
    ReferenceParams rp;
    rp.x_raw = Matrix::Zero(3, 2);
    rp.w_raw = Vector::Zero(3);
    rp.scale = 2.0;
    const auto ref = realize_reference(rp);
    REQUIRE(ref.points().cwiseAbs().maxCoeff() == 0.0);
    for (Index j = 0; j < 3; ++j) REQUIRE(ref.weights()(j) == Catch::Approx(1.0 / 3.0));

    rp.x_raw(0, 0) = 10.0;
    rp.scale = 0.5;
    const auto sat = realize_reference(rp);
    REQUIRE(sat.points()(0, 0) == Catch::Approx(0.5).epsilon(1e-6));
    REQUIRE(sat.points().cwiseAbs().maxCoeff() <= 0.5);
}

TEST_CASE("embed basics", "[embedding]") {
    Rng rng(41);
    SinkhornConfig cfg;
    cfg.epsilon = 0.1;
    cfg.max_iter = 20000;

    SECTION("embedding a symmetric reference against itself is zero") {
        // Self-transport gives a constant g only when every atom sees the
        // same support geometry; a uniform regular polygon does.
        Matrix poly(6, 2);
        for (int j = 0; j < 6; ++j) {
            const double ang = 2.0 * 3.14159265358979323846 * j / 6;
            poly(j, 0) = 0.5 * std::cos(ang);
            poly(j, 1) = 0.5 * std::sin(ang);
        }
        const DiscreteMeasure ref(poly, Vector::Constant(6, 1.0 / 6));
        const auto e = embed(ref, ref, cfg);
        REQUIRE(e.converged);
        REQUIRE(e.values.cwiseAbs().maxCoeff() <= 1e-8);
    }
    SECTION("generic self-transport has equal potentials up to the centering shift") {
        const auto ref = random_measure(rng, 5, 2);
        SinkhornConfig tight = cfg;
        tight.tol = 1e-12;
        const auto pot = solve(ref, ref, tight);
        REQUIRE(pot.converged);
        const Vector diff = pot.f - pot.g;
        REQUIRE(diff.maxCoeff() - diff.minCoeff() <= 1e-9);
    }
    SECTION("identical measures give identical embeddings") {
        const auto P = random_measure(rng, 8, 2);
        const auto ref = random_measure(rng, 5, 2);
        const auto a = embed(P, ref, cfg, nullptr, CacheMode::off);
        const auto b = embed(P, ref, cfg, nullptr, CacheMode::off);
        REQUIRE(a.values == b.values);
        REQUIRE(a.ref_version == b.ref_version);
    }
    SECTION("translating P moves the embedding") {
        const auto P = random_measure(rng, 8, 2);
        const auto ref = random_measure(rng, 5, 2);
        const DiscreteMeasure Pshift(P.points().array() + 1.0, P.weights());
        const auto a = embed(P, ref, cfg);
        const auto b = embed(Pshift, ref, cfg);
        REQUIRE(embedding_distance(a, b, ref) > 1e-3);
    }
    SECTION("every embedding is centered") {
        for (int t = 0; t < 5; ++t) {
            const auto P = random_measure(rng, 6, 2);
            const auto ref = random_measure(rng, 4, 2);
            const auto e = embed(P, ref, cfg);
            REQUIRE(std::abs(ref.weights().dot(e.values)) <= 1e-10);
        }
    }
}

TEST_CASE("embedding_distance", "[embedding]") {
    Rng rng(43);
    const auto ref = random_measure(rng, 2, 1);
    SinkhornConfig cfg;
    const std::string token = ref_version_token(ref, cfg.epsilon);

    Embedding a{Vector(2), token, true};
    Embedding b{Vector(2), token, true};

    SECTION("coincident embeddings have distance zero") {
        a.values << 0.3, -0.7;
        b.values = a.values;
        REQUIRE(embedding_distance(a, b, ref) == 0.0);
    }
    SECTION("hand-computed weighted distance") {
        Matrix pts(2, 1);
        pts << 0.0, 1.0;
        const DiscreteMeasure uref(pts, Vector::Constant(2, 0.5));
        const std::string utoken = ref_version_token(uref, cfg.epsilon);
        Embedding u{Vector(2), utoken, true}, v{Vector(2), utoken, true};
        u.values << 1.0, -1.0;
        v.values << 0.0, 0.0;
        REQUIRE(embedding_distance(u, v, uref) == Catch::Approx(1.0));
    }
    SECTION("triangle inequality on random triples") {
        for (int t = 0; t < 20; ++t) {
            Embedding x{Vector(2), token, true}, y{Vector(2), token, true}, z{Vector(2), token, true};
            for (Index i = 0; i < 2; ++i) {
                x.values(i) = rng.normal();
                y.values(i) = rng.normal();
                z.values(i) = rng.normal();
            }
            const double xy = embedding_distance(x, y, ref);
            const double yz = embedding_distance(y, z, ref);
            const double xz = embedding_distance(x, z, ref);
            REQUIRE(xz <= xy + yz + 1e-12);
        }
    }
    SECTION("mismatched reference versions are rejected") {
        b.ref_version = "deadbeefdeadbeef";
        a.values << 0.0, 0.0;
        b.values << 0.0, 0.0;
        REQUIRE_THROWS_AS(embedding_distance(a, b, ref), ValidationError);
    }
}

TEST_CASE("embed_dataset", "[embedding]") {
    Rng rng(47);
    SinkhornConfig cfg;
    cfg.epsilon = 0.1;

    SECTION("empty dataset gives an empty list") {
        LabeledDataset ds;
        ds.dim = 2;
        ds.targets = Vector(0);
        const auto rp = random_params(rng, 3, 2);
        REQUIRE(embed_dataset(ds, rp, cfg).empty());
    }
    SECTION("a dataset measure equal to a symmetric realized reference embeds to zero") {
        ReferenceParams rp;
        rp.scale = 1.0;
        rp.x_raw.resize(4, 2);
        // atanh of a centered square: realized points form a symmetric orbit
        const double a = std::atanh(0.4);
        rp.x_raw << a, a, -a, a, -a, -a, a, -a;
        rp.w_raw = Vector::Zero(4);
        const auto ref = realize_reference(rp);
        LabeledDataset ds;
        ds.dim = 2;
        ds.measures.push_back(ref);
        ds.targets = Vector::Zero(1);
        const auto es = embed_dataset(ds, rp, cfg);
        REQUIRE(es.size() == 1);
        REQUIRE(es[0].values.cwiseAbs().maxCoeff() <= 1e-8);
    }
    SECTION("permuting the dataset permutes the embeddings") {
        const auto rp = random_params(rng, 3, 2);
        LabeledDataset ds;
        ds.dim = 2;
        for (int i = 0; i < 4; ++i) ds.measures.push_back(random_measure(rng, 6, 2));
        ds.targets = Vector::Zero(4);
        const auto es = embed_dataset(ds, rp, cfg);
        LabeledDataset rev;
        rev.dim = 2;
        for (int i = 3; i >= 0; --i) rev.measures.push_back(ds.measures[static_cast<std::size_t>(i)]);
        rev.targets = Vector::Zero(4);
        const auto esr = embed_dataset(rev, rp, cfg);
        for (int i = 0; i < 4; ++i)
            REQUIRE(es[static_cast<std::size_t>(i)].values ==
                    esr[static_cast<std::size_t>(3 - i)].values);
    }
    SECTION("threaded embedding matches serial") {
        const auto rp = random_params(rng, 3, 2);
        LabeledDataset ds;
        ds.dim = 2;
        for (int i = 0; i < 6; ++i) ds.measures.push_back(random_measure(rng, 5, 2));
        ds.targets = Vector::Zero(6);
        const auto serial = embed_dataset(ds, rp, cfg, nullptr, CacheMode::off, 1);
        const auto threaded = embed_dataset(ds, rp, cfg, nullptr, CacheMode::off, 4);
        for (std::size_t i = 0; i < 6; ++i) REQUIRE(serial[i].values == threaded[i].values);
    }
}

TEST_CASE("cache transparency", "[embedding]") {
    Rng rng(53);
    const auto rp = random_params(rng, 4, 2);
    const auto ref = realize_reference(rp);
    SinkhornConfig cfg;
    cfg.epsilon = 0.05;
    cfg.max_iter = 20000;
    PotentialCache cache;
    const auto P = random_measure(rng, 10, 2);
    const auto cold = embed(P, ref, cfg, nullptr, CacheMode::off);
    const auto first = embed(P, ref, cfg, &cache, CacheMode::read_write);
    const auto warmed = embed(P, ref, cfg, &cache, CacheMode::read_write);
    REQUIRE(cache.size() == 1);
    REQUIRE((cold.values - warmed.values).cwiseAbs().maxCoeff() <= 10 * cfg.tol);
    REQUIRE((first.values - warmed.values).cwiseAbs().maxCoeff() <= 10 * cfg.tol);
}

TEST_CASE("unrolled jacobian matches finite differences", "[embedding]") {
    Rng rng(59);
    for (int trial = 0; trial < 3; ++trial) {
        const auto P = random_measure(rng, 3, 2);
        const auto rp = random_params(rng, 2, 2);
        SinkhornConfig cfg;
        cfg.epsilon = 0.1;
        cfg.tol = 1e-12;
        cfg.max_iter = 50000;
        cfg.unroll_cap = 100000;
        const Matrix ju = embedding_jacobian(P, rp, cfg, JacobianMode::unrolled);
        const Matrix jf = embedding_jacobian(P, rp, cfg, JacobianMode::finite_diff);
        REQUIRE(sup_rel_error(ju, jf) <= 1e-4);
    }
}

TEST_CASE("jacobian of a single-atom reference vanishes by centering", "[embedding]") {
    Rng rng(61);
    const auto P = random_measure(rng, 5, 2);
    const auto rp = random_params(rng, 1, 2);
    SinkhornConfig cfg;
    cfg.epsilon = 0.2;
    const Matrix ju = embedding_jacobian(P, rp, cfg, JacobianMode::unrolled);
    REQUIRE(ju.cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("jacobian respects the reflection symmetry", "[embedding]") {
    // Reflecting both the cloud and the reference through the origin keeps
    // the embedding and flips the sign of the support-point derivatives.
    Rng rng(67);
    Matrix pts(3, 1);
    pts << -0.8, 0.1, 0.6;
    const DiscreteMeasure P(pts, Vector::Constant(3, 1.0 / 3.0));
    ReferenceParams rp = random_params(rng, 2, 1);
    SinkhornConfig cfg;
    cfg.epsilon = 0.1;
    cfg.tol = 1e-12;
    cfg.max_iter = 50000;
    cfg.unroll_cap = 100000;

    const Matrix j = embedding_jacobian(P, rp, cfg, JacobianMode::unrolled);

    const DiscreteMeasure Pneg(-pts, P.weights());
    ReferenceParams rpneg = rp;
    rpneg.x_raw = -rp.x_raw;
    const Matrix jneg = embedding_jacobian(Pneg, rpneg, cfg, JacobianMode::unrolled);

    const Index q = 2, d = 1;
    REQUIRE((j.leftCols(q * d) + jneg.leftCols(q * d)).cwiseAbs().maxCoeff() <= 1e-9);
    REQUIRE((j.rightCols(q) - jneg.rightCols(q)).cwiseAbs().maxCoeff() <= 1e-9);
}

TEST_CASE("jacobian errors when the unroll cap is exceeded", "[embedding]") {
    Rng rng(71);
    const auto P = random_measure(rng, 12, 2);
    const auto rp = random_params(rng, 4, 2);
    SinkhornConfig cfg;
    cfg.epsilon = 0.01;
    cfg.tol = 1e-10;
    cfg.max_iter = 50000;
    cfg.unroll_cap = 2;
    REQUIRE_THROWS_AS(embedding_jacobian(P, rp, cfg, JacobianMode::unrolled), NonConvergenceError);
}

TEST_CASE("translation invariance of embedding distances", "[embedding]") {
    Rng rng(73);
    SinkhornConfig cfg;
    cfg.epsilon = 0.05;
    cfg.tol = 1e-9;
    cfg.max_iter = 50000;
    for (int trial = 0; trial < 5; ++trial) {
        const auto P = random_measure(rng, 8, 2);
        const auto Q = random_measure(rng, 6, 2);
        const auto ref = random_measure(rng, 5, 2);
        Eigen::RowVector2d shift(rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0));
        const DiscreteMeasure ref_shift(ref.points().rowwise() + shift, ref.weights());

        const double base = embedding_distance(embed(P, ref, cfg), embed(Q, ref, cfg), ref);
        const double moved =
            embedding_distance(embed(P, ref_shift, cfg), embed(Q, ref_shift, cfg), ref_shift);
        REQUIRE(std::abs(base - moved) <= 100 * cfg.tol);
    }
}

TEST_CASE("rotation invariance with a regular-polygon reference", "[embedding]") {
    // A uniform k-gon reference is exactly invariant under rotation by
    // 2 pi / k, so rotating both inputs leaves the kernel distance alone.
    Rng rng(79);
    const int k = 6;
    Matrix ref_pts(k, 2);
    for (int j = 0; j < k; ++j) {
        const double ang = 2.0 * 3.14159265358979323846 * j / k;
        ref_pts(j, 0) = 0.7 * std::cos(ang);
        ref_pts(j, 1) = 0.7 * std::sin(ang);
    }
    const DiscreteMeasure ref(ref_pts, Vector::Constant(k, 1.0 / k));
    SinkhornConfig cfg;
    cfg.epsilon = 0.05;
    cfg.tol = 1e-9;
    cfg.max_iter = 50000;

    const double theta = 2.0 * 3.14159265358979323846 / k;
    Matrix R(2, 2);
    R << std::cos(theta), -std::sin(theta), std::sin(theta), std::cos(theta);

    for (int trial = 0; trial < 3; ++trial) {
        const auto P = random_measure(rng, 7, 2);
        const auto Q = random_measure(rng, 9, 2);
        const DiscreteMeasure Pr(P.points() * R.transpose(), P.weights());
        const DiscreteMeasure Qr(Q.points() * R.transpose(), Q.weights());
        const double base = embedding_distance(embed(P, ref, cfg), embed(Q, ref, cfg), ref);
        const double rot = embedding_distance(embed(Pr, ref, cfg), embed(Qr, ref, cfg), ref);
        REQUIRE(std::abs(base - rot) <= 100 * cfg.tol);
    }
}

TEST_CASE("dilation identity", "[embedding]") {
    // Var over the dilated reference at eps=1 equals delta^4 times the Var
    // over the original reference of the shrunk inputs at eps=1/delta^2.
    Rng rng(83);
    SinkhornConfig base_cfg;
    base_cfg.tol = 1e-12;
    base_cfg.max_iter = 100000;
    for (double delta : {0.5, 2.0}) {
        for (int trial = 0; trial < 3; ++trial) {
            const auto P = random_measure(rng, 6, 2);
            const auto Q = random_measure(rng, 5, 2);
            const auto ref = random_measure(rng, 4, 2);

            const DiscreteMeasure ref_d(delta * ref.points(), ref.weights());
            SinkhornConfig lhs_cfg = base_cfg;
            lhs_cfg.epsilon = 1.0;
            const double lhs = std::pow(
                embedding_distance(embed(P, ref_d, lhs_cfg), embed(Q, ref_d, lhs_cfg), ref_d), 2);

            const DiscreteMeasure Ps(P.points() / delta, P.weights());
            const DiscreteMeasure Qs(Q.points() / delta, Q.weights());
            SinkhornConfig rhs_cfg = base_cfg;
            rhs_cfg.epsilon = 1.0 / (delta * delta);
            const double rhs =
                std::pow(delta, 4) *
                std::pow(embedding_distance(embed(Ps, ref, rhs_cfg), embed(Qs, ref, rhs_cfg), ref), 2);

            REQUIRE(std::abs(lhs - rhs) / std::max(std::abs(rhs), 1e-12) <= 1e-5);
        }
    }
}
