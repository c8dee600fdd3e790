// Command-line surface: toygen, embed, fit, predict, gram, benchmark.
//
// Exit codes: 0 success, 2 validation/parse failure, 3 numeric failure,
// 4 non-convergence under --strict. Errors are reported as one JSON
// object on stderr.

#include <CLI11.hpp>

#include "sinkgp/bench.hpp"
#include "sinkgp/embedding.hpp"
#include "sinkgp/gp.hpp"
#include "sinkgp/io.hpp"
#include "sinkgp/kernels.hpp"
#include "sinkgp/measure.hpp"
#include "sinkgp/optimize.hpp"
#include "sinkgp/sinkhorn.hpp"
#include "sinkgp/threading.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

namespace {

using namespace sinkgp;
namespace fs = std::filesystem;

struct GlobalOpts {
    double eps = 1e-2;
    double tol = 1e-6;
    int max_iter = 1000;
    std::uint64_t seed = 0;
    int threads = 0;
    std::string kernel = "sqexp";
    double noise = -1.0;  // negative: pick 1e-6 * Var(y)
    bool strict = false;

    SinkhornConfig sinkhorn() const {
        SinkhornConfig cfg;
        cfg.epsilon = eps;
        cfg.tol = tol;
        cfg.max_iter = max_iter;
        return cfg;
    }
    int worker_threads() const { return threads > 0 ? threads : hardware_threads(); }
};

KernelFamily family_for_fit(const std::string& kernel) {
    if (kernel == "sinkhorn") return KernelFamily::sqexp;
    if (kernel == "mmd")
        throw ValidationError("fit: the mmd kernel has no trainable embedding; use gram --kernel mmd");
    return kernel_family_from_string(kernel);
}

void error_json(const std::string& type, const std::string& message) {
    json j;
    j["error"] = {{"type", type}, {"message", message}};
    std::cerr << j.dump() << "\n";
}

int cmd_toygen(const GlobalOpts& g, Index count, Index cloud_size, const std::string& out_dir) {
    fs::create_directories(out_dir);
    const LabeledDataset ds = sample_toy_dataset(count, cloud_size, g.seed);
    std::vector<std::string> paths;
    char name[64];
    for (std::size_t i = 0; i < ds.size(); ++i) {
        std::snprintf(name, sizeof(name), "measure_%04zu.csv", i);
        save_measure(ds.measures[i], (fs::path(out_dir) / name).string());
        paths.emplace_back(name);
    }
    save_manifest(paths, ds.targets, ds.labels, ds.dim, (fs::path(out_dir) / "manifest.json").string());
    std::cout << "wrote " << ds.size() << " measures + manifest.json to " << out_dir << "\n";
    return 0;
}

int cmd_embed(const GlobalOpts& g, const std::string& manifest_path, const std::string& ref_path,
              const std::string& out_path) {
    const LoadedManifest mf = load_manifest(manifest_path);
    const ReferenceParams rp = load_reference(ref_path);
    if (rp.atoms() < 2)
        std::cerr << "warning: reference has fewer than 2 atoms; centering makes every embedding zero\n";
    const DiscreteMeasure ref = realize_reference(rp);
    const SinkhornConfig cfg = g.sinkhorn();
    std::vector<Embedding> es(mf.measures.size());
    parallel_for(mf.measures.size(), g.worker_threads(), [&](std::size_t i) {
        es[i] = embed(mf.measures[i], ref, cfg, nullptr, CacheMode::off);
    });
    save_embeddings_csv(mf.ids, es, out_path);
    std::size_t failed = 0;
    for (const auto& e : es)
        if (!e.converged) ++failed;
    if (failed > 0) {
        std::cerr << "warning: " << failed << " embeddings did not converge within max_iter\n";
        if (g.strict)
            throw NonConvergenceError(std::to_string(failed) + " embeddings not converged (--strict)");
    }
    std::cout << "wrote " << es.size() << " embeddings to " << out_path << "\n";
    return 0;
}

int cmd_fit(const GlobalOpts& g, const std::string& manifest_path, Index q, int iters,
            bool normalize, double scale, const std::string& ref_path, const std::string& out_path,
            const std::string& trace_path) {
    const LoadedManifest mf = load_manifest(manifest_path);
    LabeledDataset ds = mf.to_dataset();
    std::optional<AffineMap> norm_map;
    if (normalize) {
        auto norm = normalize_dataset(ds);
        ds = std::move(norm.dataset);
        norm_map = norm.map;
    }
    const SinkhornConfig cfg = g.sinkhorn();
    if (q < 2) std::cerr << "warning: q < 2 gives a degenerate all-zero embedding\n";

    std::optional<ReferenceParams> given;
    if (!ref_path.empty()) given = load_reference(ref_path);
    HyperState init = initialize_hyperstate(ds, q, g.seed, family_for_fit(g.kernel), cfg,
                                            !ds.is_classification(), g.worker_threads(), given);
    if (scale > 0.0 && !given) init.ref.scale = scale;
    if (g.noise >= 0.0 && !ds.is_classification())
        init.log_noise = std::log(std::max(g.noise, 1e-300));

    OptimizeConfig opt;
    opt.max_iters = iters;
    opt.grad_tol = 1e-7;
    const TrainResult res = train(ds, init, opt, cfg, g.worker_threads());

    StoredModel sm;
    sm.state = res.state;
    sm.sinkhorn = cfg;
    sm.normalization = norm_map;
    sm.model = res.model;
    save_model(sm, out_path);
    if (!trace_path.empty()) save_trace_jsonl(res.trace, trace_path);

    const KernelSpec spec = res.state.spec();
    std::cout << "final nll " << res.final_nll << " after " << (res.trace.size() - 1)
              << " iterations\n"
              << "kernel " << to_string(spec.family) << " variance " << spec.variance
              << " lengthscale " << spec.lengthscale << " noise " << res.state.noise() << "\n"
              << "model written to " << out_path << "\n";
    return 0;
}

int cmd_predict(const GlobalOpts& g, const std::string& model_path, const std::string& manifest_path,
                const std::string& out_path) {
    const StoredModel sm = load_model(model_path);
    const LoadedManifest mf = load_manifest(manifest_path);

    std::vector<DiscreteMeasure> queries = mf.measures;
    if (sm.normalization)
        for (auto& m : queries) m = sm.normalization->apply(m);

    const DiscreteMeasure& ref = *sm.model.ref;
    std::vector<Embedding> es(queries.size());
    parallel_for(queries.size(), g.worker_threads(), [&](std::size_t i) {
        es[i] = embed(queries[i], ref, sm.sinkhorn, nullptr, CacheMode::off);
    });

    std::ofstream out(out_path);
    if (!out) throw ValidationError("predict: cannot write " + out_path);
    if (sm.model.kind == GPKind::regression) {
        const auto preds = predict_regression(sm.model, es);
        out << "id,mean,variance\n";
        char buf[96];
        Vector yhat(static_cast<Index>(preds.size()));
        for (std::size_t i = 0; i < preds.size(); ++i) {
            std::snprintf(buf, sizeof(buf), "%s,%.17g,%.17g", mf.ids[i].c_str(), preds[i].mean,
                          preds[i].variance);
            out << buf << "\n";
            yhat(static_cast<Index>(i)) = preds[i].mean;
        }
        if (mf.targets && preds.size() > 0)
            std::cout << "evs " << evs(*mf.targets, yhat) << "\n";
    } else {
        const auto preds = predict_classification(sm.model, es);
        out << "id,probability\n";
        char buf[96];
        int correct = 0;
        for (std::size_t i = 0; i < preds.size(); ++i) {
            std::snprintf(buf, sizeof(buf), "%s,%.17g", mf.ids[i].c_str(), preds[i].probability);
            out << buf << "\n";
            if (mf.labels && ((preds[i].probability >= 0.5 ? 1 : 0) == (*mf.labels)[i])) ++correct;
        }
        if (mf.labels && !preds.empty())
            std::cout << "accuracy " << static_cast<double>(correct) / static_cast<double>(preds.size())
                      << "\n";
    }
    std::cout << "wrote " << queries.size() << " predictions to " << out_path << "\n";
    return 0;
}

int cmd_gram(const GlobalOpts& g, const std::string& manifest_path, const std::string& ref_path,
             double variance, double lengthscale, double mmd_sigma, double mmd_hat,
             const std::string& out_path) {
    const LoadedManifest mf = load_manifest(manifest_path);
    const Index n = static_cast<Index>(mf.measures.size());
    GramSidecar sc;
    sc.n = n;
    Matrix K;

    if (g.kernel == "mmd") {
        sc.kernel = "mmd";
        sc.rbf_sigma = mmd_sigma;
        sc.hat_sigma = mmd_hat;
        K.resize(n, n);
        const int threads = g.worker_threads();
        parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t a) {
            const Index ia = static_cast<Index>(a);
            K(ia, ia) = mmd_hat;
            for (Index b = ia + 1; b < n; ++b)
                K(ia, b) = mmd_kernel(mf.measures[a], mf.measures[static_cast<std::size_t>(b)],
                                      mmd_sigma, mmd_hat);
        });
        for (Index a = 0; a < n; ++a)
            for (Index b = a + 1; b < n; ++b) K(b, a) = K(a, b);
    } else {
        if (ref_path.empty()) throw ValidationError("gram: --ref is required for the sinkhorn kernel");
        const ReferenceParams rp = load_reference(ref_path);
        const DiscreteMeasure ref = realize_reference(rp);
        const SinkhornConfig cfg = g.sinkhorn();
        const KernelFamily family =
            g.kernel == "sinkhorn" ? KernelFamily::sqexp : kernel_family_from_string(g.kernel);
        const KernelSpec spec{family, variance, lengthscale};
        std::vector<Embedding> es(mf.measures.size());
        parallel_for(mf.measures.size(), g.worker_threads(), [&](std::size_t i) {
            es[i] = embed(mf.measures[i], ref, cfg, nullptr, CacheMode::off);
        });
        const GramMatrix G = gram(es, ref, spec);
        K = G.values;
        sc.kernel = "sinkhorn";
        sc.spec = spec;
        sc.ref_version = G.ref_version;
        sc.epsilon = cfg.epsilon;
    }
    save_gram_csv(K, out_path);
    save_gram_sidecar(sc, out_path + ".json");
    std::cout << "wrote " << n << "x" << n << " gram to " << out_path << " (+ sidecar)\n";
    return 0;
}

int cmd_benchmark(const GlobalOpts& g, const std::string& sizes_arg, int reps,
                  const std::string& out_path) {
    std::vector<BenchSpec> sizes;
    std::string cur;
    auto flush = [&] {
        if (cur.empty()) return;
        const auto x = cur.find('x');
        if (x == std::string::npos) throw ValidationError("benchmark: sizes must look like 400x400");
        sizes.push_back({std::stol(cur.substr(0, x)), std::stol(cur.substr(x + 1))});
        cur.clear();
    };
    for (char c : sizes_arg) {
        if (c == ',') flush();
        else cur.push_back(c);
    }
    flush();
    if (sizes.empty()) throw ValidationError("benchmark: no sizes given");

    const auto rows = run_benchmark(sizes, g.sinkhorn(), g.seed, g.worker_threads(), reps);
    std::ofstream out(out_path);
    if (!out) throw ValidationError("benchmark: cannot write " + out_path);
    save_benchmark_csv(rows, out);
    save_benchmark_csv(rows, std::cout);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Gaussian processes on distributions via Sinkhorn potential embeddings"};
    app.require_subcommand(1);

    GlobalOpts g;
    app.add_option("--eps", g.eps, "entropic regularization")->capture_default_str();
    app.add_option("--tol", g.tol, "Sinkhorn convergence tolerance")->capture_default_str();
    app.add_option("--max-iter", g.max_iter, "Sinkhorn sweep budget")->capture_default_str();
    app.add_option("--seed", g.seed, "random seed")->capture_default_str();
    app.add_option("--threads", g.threads, "worker threads (0 = hardware)")->capture_default_str();
    app.add_option("--kernel", g.kernel,
                   "kernel: sqexp|exp_norm|matern32|matern52, or sinkhorn|mmd for gram")
        ->capture_default_str();
    app.add_option("--noise", g.noise, "observation noise variance (negative = auto)")
        ->capture_default_str();
    app.add_flag("--strict", g.strict, "exit 4 when any solve fails to converge");

    auto* toygen = app.add_subcommand("toygen", "generate the synthetic regression dataset");
    Index count = 100, cloud_size = 30;
    std::string out_dir;
    toygen->add_option("--count", count, "number of clouds")->capture_default_str();
    toygen->add_option("--cloud-size", cloud_size, "points per cloud")->capture_default_str();
    toygen->add_option("--out-dir", out_dir, "output directory")->required();

    auto* embed_cmd = app.add_subcommand("embed", "embed a dataset against a reference");
    std::string manifest_path, ref_path, out_path = "embeddings.csv";
    embed_cmd->add_option("--manifest", manifest_path, "dataset manifest")->required();
    embed_cmd->add_option("--ref", ref_path, "reference parameters JSON")->required();
    embed_cmd->add_option("--out", out_path, "output CSV")->capture_default_str();

    auto* fit = app.add_subcommand("fit", "train reference and kernel parameters");
    std::string fit_manifest, fit_out = "model.json", fit_trace = "trace.jsonl", fit_ref;
    Index q = 6;
    int iters = 30;
    bool normalize = true;
    double scale = 0.0;
    fit->add_option("--manifest", fit_manifest, "dataset manifest")->required();
    fit->add_option("--q", q, "reference atoms")->capture_default_str();
    fit->add_option("--iters", iters, "training iterations")->capture_default_str();
    fit->add_flag("--normalize,!--no-normalize", normalize, "standardize the pooled dataset")
        ->capture_default_str();
    fit->add_option("--scale", scale, "tanh bound for reference points (0 = from data)")
        ->capture_default_str();
    fit->add_option("--ref", fit_ref, "initial reference parameters JSON (overrides --q)");
    fit->add_option("--out", fit_out, "model output path")->capture_default_str();
    fit->add_option("--trace", fit_trace, "trace JSONL path (empty to skip)")->capture_default_str();

    auto* predict = app.add_subcommand("predict", "predict a manifest under a trained model");
    std::string pred_model, pred_manifest, pred_out = "predictions.csv";
    predict->add_option("--model", pred_model, "model JSON")->required();
    predict->add_option("--manifest", pred_manifest, "dataset manifest")->required();
    predict->add_option("--out", pred_out, "predictions CSV")->capture_default_str();

    auto* gram_cmd = app.add_subcommand("gram", "export a kernel matrix for external consumers");
    std::string gram_manifest, gram_ref, gram_out = "gram.csv";
    double variance = 1.0, lengthscale = 1.0, mmd_sigma = 1.0, mmd_hat = 1.0;
    gram_cmd->add_option("--manifest", gram_manifest, "dataset manifest")->required();
    gram_cmd->add_option("--ref", gram_ref, "reference parameters JSON (sinkhorn kernel)");
    gram_cmd->add_option("--variance", variance, "kernel variance")->capture_default_str();
    gram_cmd->add_option("--lengthscale", lengthscale, "kernel lengthscale")->capture_default_str();
    gram_cmd->add_option("--mmd-sigma", mmd_sigma, "mmd point-kernel width")->capture_default_str();
    gram_cmd->add_option("--mmd-hat", mmd_hat, "mmd kernel prefactor")->capture_default_str();
    gram_cmd->add_option("--out", gram_out, "gram CSV path")->capture_default_str();

    auto* bench = app.add_subcommand("benchmark", "time gram construction per method");
    std::string sizes_arg;
    int reps = 5;
    std::string bench_out = "benchmark.csv";
    bench->add_option("--sizes", sizes_arg, "comma list of nxm, e.g. 50x100,400x400")->required();
    bench->add_option("--reps", reps, "timed repetitions (median reported)")->capture_default_str();
    bench->add_option("--out", bench_out, "timing CSV path")->capture_default_str();

    for (auto* sub : {toygen, embed_cmd, fit, predict, gram_cmd, bench}) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        error_json("validation", e.what());
        return 2;
    }

    try {
        if (toygen->parsed()) return cmd_toygen(g, count, cloud_size, out_dir);
        if (embed_cmd->parsed()) return cmd_embed(g, manifest_path, ref_path, out_path);
        if (fit->parsed())
            return cmd_fit(g, fit_manifest, q, iters, normalize, scale, fit_ref, fit_out, fit_trace);
        if (predict->parsed()) return cmd_predict(g, pred_model, pred_manifest, pred_out);
        if (gram_cmd->parsed())
            return cmd_gram(g, gram_manifest, gram_ref, variance, lengthscale, mmd_sigma, mmd_hat,
                            gram_out);
        if (bench->parsed()) return cmd_benchmark(g, sizes_arg, reps, bench_out);
    } catch (const ParseError& ex) {
        error_json("parse", ex.what());
        return 2;
    } catch (const ValidationError& ex) {
        error_json("validation", ex.what());
        return 2;
    } catch (const NonConvergenceError& ex) {
        error_json("nonconvergence", ex.what());
        return 4;
    } catch (const NumericError& ex) {
        error_json("numeric", ex.what());
        return 3;
    } catch (const std::exception& ex) {
        error_json("internal", ex.what());
        return 3;
    }
    return 0;
}
