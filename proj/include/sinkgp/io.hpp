#ifndef SINKGP_IO_HPP
#define SINKGP_IO_HPP

#include "sinkgp/common.hpp"
#include "sinkgp/embedding.hpp"
#include "sinkgp/gp.hpp"
#include "sinkgp/kernels.hpp"
#include "sinkgp/measure.hpp"
#include "sinkgp/optimize.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace sinkgp {

using json = nlohmann::json;

// Every JSON artifact carries a "version"; readers reject anything else.
inline void check_version(const json& j, const std::string& what) {
    if (!j.contains("version") || !j["version"].is_number_integer() ||
        j["version"].get<int>() != kFormatVersion)
        throw ValidationError(what + ": missing or unsupported format version (expected " +
                              std::to_string(kFormatVersion) + ")");
}

inline json load_json(const std::string& path, const std::string& what) {
    std::ifstream in(path);
    if (!in) throw ValidationError(what + ": cannot open " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& ex) {
        throw ParseError(what + ": " + ex.what() + " in " + path, 0);
    }
    return j;
}

inline void save_json(const json& j, const std::string& path, const std::string& what) {
    std::ofstream out(path);
    if (!out) throw ValidationError(what + ": cannot write " + path);
    out << j.dump(2) << "\n";
}

namespace detail {

inline json matrix_to_json(const Matrix& m) {
    json rows = json::array();
    for (Index i = 0; i < m.rows(); ++i) {
        json row = json::array();
        for (Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline Matrix matrix_from_json(const json& j, const std::string& what) {
    if (!j.is_array() || j.empty()) throw ValidationError(what + ": expected a nonempty 2-d array");
    const Index rows = static_cast<Index>(j.size());
    const Index cols = static_cast<Index>(j[0].size());
    Matrix m(rows, cols);
    for (Index i = 0; i < rows; ++i) {
        if (static_cast<Index>(j[static_cast<std::size_t>(i)].size()) != cols)
            throw ValidationError(what + ": ragged rows");
        for (Index c = 0; c < cols; ++c)
            m(i, c) = j[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)].get<double>();
    }
    return m;
}

inline json vector_to_json(const Vector& v) {
    json a = json::array();
    for (Index i = 0; i < v.size(); ++i) a.push_back(v(i));
    return a;
}

inline Vector vector_from_json(const json& j, const std::string& what) {
    if (!j.is_array()) throw ValidationError(what + ": expected an array");
    Vector v(static_cast<Index>(j.size()));
    for (Index i = 0; i < v.size(); ++i) v(i) = j[static_cast<std::size_t>(i)].get<double>();
    return v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dataset manifests.
// ---------------------------------------------------------------------------

struct LoadedManifest {
    std::vector<std::string> ids;  // item paths as written in the manifest
    std::vector<DiscreteMeasure> measures;
    std::optional<Vector> targets;
    std::optional<std::vector<int>> labels;
    Index dim = 0;

    LabeledDataset to_dataset() const {
        LabeledDataset ds;
        ds.measures = measures;
        ds.targets = targets;
        ds.labels = labels;
        ds.dim = dim;
        ds.validate();
        return ds;
    }
};

/// Reads a manifest and every measure it lists; relative item paths are
/// resolved against the manifest's directory. Items must be uniformly
/// labeled: all targets, all labels, or all bare (prediction input).
inline LoadedManifest load_manifest(const std::string& path) {
    const json j = load_json(path, "manifest");
    check_version(j, "manifest");
    if (!j.contains("dim") || !j.contains("items"))
        throw ValidationError("manifest: need dim and items");
    LoadedManifest out;
    out.dim = j["dim"].get<Index>();
    const auto base = std::filesystem::path(path).parent_path();
    std::vector<double> targets;
    std::vector<int> labels;
    for (const auto& item : j["items"]) {
        if (!item.contains("path")) throw ValidationError("manifest: item without path");
        const std::string rel = item["path"].get<std::string>();
        const auto full = std::filesystem::path(rel).is_absolute() ? rel : (base / rel).string();
        out.ids.push_back(rel);
        out.measures.push_back(load_measure(full));
        if (out.measures.back().dim() != out.dim)
            throw ValidationError("manifest: measure " + rel + " has dimension " +
                                  std::to_string(out.measures.back().dim()) + ", expected " +
                                  std::to_string(out.dim));
        if (item.contains("target")) targets.push_back(item["target"].get<double>());
        if (item.contains("label")) {
            const int y = item["label"].get<int>();
            if (y != 0 && y != 1) throw ValidationError("manifest: label must be 0 or 1");
            labels.push_back(y);
        }
    }
    if (!targets.empty() && !labels.empty())
        throw ValidationError("manifest: mixed targets and labels");
    if (!targets.empty()) {
        if (targets.size() != out.measures.size())
            throw ValidationError("manifest: some items have a target, some do not");
        out.targets = Eigen::Map<Vector>(targets.data(), static_cast<Index>(targets.size()));
    }
    if (!labels.empty()) {
        if (labels.size() != out.measures.size())
            throw ValidationError("manifest: some items have a label, some do not");
        out.labels = labels;
    }
    return out;
}

inline void save_manifest(const std::vector<std::string>& paths,
                          const std::optional<Vector>& targets,
                          const std::optional<std::vector<int>>& labels, Index dim,
                          const std::string& out_path) {
    json items = json::array();
    for (std::size_t i = 0; i < paths.size(); ++i) {
        json item;
        item["path"] = paths[i];
        if (targets) item["target"] = (*targets)(static_cast<Index>(i));
        if (labels) item["label"] = (*labels)[i];
        items.push_back(std::move(item));
    }
    json j;
    j["version"] = kFormatVersion;
    j["dim"] = dim;
    j["items"] = std::move(items);
    save_json(j, out_path, "manifest");
}

// ---------------------------------------------------------------------------
// Reference parameters.
// ---------------------------------------------------------------------------

inline void save_reference(const ReferenceParams& rp, const std::string& path) {
    rp.validate();
    json j;
    j["version"] = kFormatVersion;
    j["scale"] = rp.scale;
    j["x_raw"] = detail::matrix_to_json(rp.x_raw);
    j["w_raw"] = detail::vector_to_json(rp.w_raw);
    save_json(j, path, "reference");
}

inline ReferenceParams load_reference(const std::string& path) {
    const json j = load_json(path, "reference");
    check_version(j, "reference");
    ReferenceParams rp;
    rp.scale = j.at("scale").get<double>();
    rp.x_raw = detail::matrix_from_json(j.at("x_raw"), "reference x_raw");
    rp.w_raw = detail::vector_from_json(j.at("w_raw"), "reference w_raw");
    rp.validate();
    return rp;
}

// ---------------------------------------------------------------------------
// Embeddings CSV: id,g_1..g_q,converged.
// ---------------------------------------------------------------------------

inline void save_embeddings_csv(const std::vector<std::string>& ids,
                                const std::vector<Embedding>& es, const std::string& path) {
    if (ids.size() != es.size()) throw ValidationError("embeddings csv: id/value mismatch");
    std::ofstream out(path);
    if (!out) throw ValidationError("embeddings csv: cannot write " + path);
    const Index q = es.empty() ? 0 : es[0].values.size();
    out << "id";
    for (Index j = 0; j < q; ++j) out << ",g_" << (j + 1);
    out << ",converged\n";
    char buf[40];
    for (std::size_t i = 0; i < es.size(); ++i) {
        out << ids[i];
        for (Index j = 0; j < q; ++j) {
            std::snprintf(buf, sizeof(buf), "%.17g", es[i].values(j));
            out << "," << buf;
        }
        out << "," << (es[i].converged ? 1 : 0) << "\n";
    }
}

// ---------------------------------------------------------------------------
// Gram export: dense headerless CSV plus a JSON sidecar.
// ---------------------------------------------------------------------------

inline void save_gram_csv(const Matrix& G, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ValidationError("gram csv: cannot write " + path);
    char buf[40];
    for (Index i = 0; i < G.rows(); ++i) {
        for (Index j = 0; j < G.cols(); ++j) {
            std::snprintf(buf, sizeof(buf), "%.17g", G(i, j));
            out << (j ? "," : "") << buf;
        }
        out << "\n";
    }
}

inline Matrix load_gram_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("gram csv: cannot open " + path);
    std::vector<std::vector<double>> rows;
    std::string line;
    long rowno = 0;
    while (std::getline(in, line)) {
        ++rowno;
        if (line.empty()) continue;
        std::vector<double> row;
        for (const auto& f : detail::split_csv_line(line)) row.push_back(detail::parse_double(f, rowno));
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw ValidationError("gram csv: empty file");
    Matrix G(static_cast<Index>(rows.size()), static_cast<Index>(rows[0].size()));
    for (Index i = 0; i < G.rows(); ++i) {
        if (static_cast<Index>(rows[static_cast<std::size_t>(i)].size()) != G.cols())
            throw ValidationError("gram csv: ragged rows");
        for (Index j = 0; j < G.cols(); ++j) G(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    }
    return G;
}

/// Full parameterization of an exported Gram matrix.
struct GramSidecar {
    std::string kernel;  // "sinkhorn" or "mmd"
    Index n = 0;
    // sinkhorn route
    std::optional<KernelSpec> spec;
    std::optional<std::string> ref_version;
    std::optional<double> epsilon;
    // mmd route
    std::optional<double> rbf_sigma;
    std::optional<double> hat_sigma;
};

inline void save_gram_sidecar(const GramSidecar& sc, const std::string& path) {
    json j;
    j["version"] = kFormatVersion;
    j["kernel"] = sc.kernel;
    j["n"] = sc.n;
    if (sc.spec) {
        j["spec"] = {{"family", to_string(sc.spec->family)},
                     {"variance", sc.spec->variance},
                     {"lengthscale", sc.spec->lengthscale}};
    }
    if (sc.ref_version) j["ref_version"] = *sc.ref_version;
    if (sc.epsilon) j["epsilon"] = *sc.epsilon;
    if (sc.rbf_sigma) j["rbf_sigma"] = *sc.rbf_sigma;
    if (sc.hat_sigma) j["hat_sigma"] = *sc.hat_sigma;
    save_json(j, path, "gram sidecar");
}

// ---------------------------------------------------------------------------
// Trained models. Factorizations are recomputed on load so the file stays
// portable across BLAS/compiler differences.
// ---------------------------------------------------------------------------

struct StoredModel {
    HyperState state;
    SinkhornConfig sinkhorn;
    std::optional<AffineMap> normalization;
    GPModel model;
};

inline void save_model(const StoredModel& sm, const std::string& path) {
    json j;
    j["version"] = kFormatVersion;
    j["kind"] = sm.model.kind == GPKind::regression ? "regression" : "classification";
    j["spec"] = {{"family", to_string(sm.model.spec.family)},
                 {"variance", sm.model.spec.variance},
                 {"lengthscale", sm.model.spec.lengthscale}};
    j["noise"] = sm.model.noise;
    j["ref"] = {{"scale", sm.state.ref.scale},
                {"x_raw", detail::matrix_to_json(sm.state.ref.x_raw)},
                {"w_raw", detail::vector_to_json(sm.state.ref.w_raw)}};
    j["sinkhorn"] = {{"epsilon", sm.sinkhorn.epsilon},
                     {"tol", sm.sinkhorn.tol},
                     {"max_iter", sm.sinkhorn.max_iter},
                     {"unroll_cap", sm.sinkhorn.unroll_cap}};
    if (sm.normalization) {
        j["normalization"] = {{"shift", detail::vector_to_json(sm.normalization->shift)},
                              {"scale", detail::vector_to_json(sm.normalization->scale)}};
    } else {
        j["normalization"] = nullptr;
    }
    json embs = json::array();
    json conv = json::array();
    for (const auto& e : sm.model.embeddings) {
        embs.push_back(detail::vector_to_json(e.values));
        conv.push_back(e.converged);
    }
    j["embeddings"] = std::move(embs);
    j["converged"] = std::move(conv);
    j["ref_version"] = sm.model.embeddings.empty() ? "" : sm.model.embeddings[0].ref_version;
    if (sm.model.kind == GPKind::regression)
        j["targets"] = detail::vector_to_json(sm.model.targets);
    else {
        j["labels"] = sm.model.labels;
        j["latent_map"] = detail::vector_to_json(sm.model.latent_map);
    }
    save_json(j, path, "model");
}

inline StoredModel load_model(const std::string& path) {
    const json j = load_json(path, "model");
    check_version(j, "model");
    StoredModel sm;
    const std::string kind = j.at("kind").get<std::string>();
    sm.state.family = kernel_family_from_string(j.at("spec").at("family").get<std::string>());
    KernelSpec spec{sm.state.family, j.at("spec").at("variance").get<double>(),
                    j.at("spec").at("lengthscale").get<double>()};
    spec.validate();
    sm.state.log_variance = std::log(spec.variance);
    sm.state.log_lengthscale = std::log(spec.lengthscale);
    const double noise = j.at("noise").get<double>();
    if (kind == "regression") sm.state.log_noise = std::log(std::max(noise, 1e-300));
    sm.state.ref.scale = j.at("ref").at("scale").get<double>();
    sm.state.ref.x_raw = detail::matrix_from_json(j.at("ref").at("x_raw"), "model ref");
    sm.state.ref.w_raw = detail::vector_from_json(j.at("ref").at("w_raw"), "model ref");
    sm.state.ref.validate();
    sm.sinkhorn.epsilon = j.at("sinkhorn").at("epsilon").get<double>();
    sm.sinkhorn.tol = j.at("sinkhorn").at("tol").get<double>();
    sm.sinkhorn.max_iter = j.at("sinkhorn").at("max_iter").get<int>();
    sm.sinkhorn.unroll_cap = j.at("sinkhorn").at("unroll_cap").get<int>();
    if (!j.at("normalization").is_null()) {
        AffineMap map;
        map.shift = detail::vector_from_json(j["normalization"]["shift"], "model normalization");
        map.scale = detail::vector_from_json(j["normalization"]["scale"], "model normalization");
        sm.normalization = map;
    }

    const DiscreteMeasure ref = realize_reference(sm.state.ref);
    const std::string token = ref_version_token(ref, sm.sinkhorn.epsilon);
    if (j.contains("ref_version") && !j["ref_version"].get<std::string>().empty() &&
        j["ref_version"].get<std::string>() != token)
        throw ValidationError("model: stored ref_version does not match the realized reference");

    std::vector<Embedding> es;
    const auto& conv = j.at("converged");
    std::size_t k = 0;
    for (const auto& row : j.at("embeddings")) {
        Embedding e;
        e.values = detail::vector_from_json(row, "model embedding");
        e.ref_version = token;
        e.converged = conv[k++].get<bool>();
        es.push_back(std::move(e));
    }

    if (kind == "regression") {
        const Vector y = detail::vector_from_json(j.at("targets"), "model targets");
        sm.model = fit_regression(es, ref, y, spec, noise);
    } else if (kind == "classification") {
        const std::vector<int> labels = j.at("labels").get<std::vector<int>>();
        sm.model = fit_classification(es, ref, labels, spec);
    } else {
        throw ValidationError("model: unknown kind '" + kind + "'");
    }
    sm.model.noise = noise;
    return sm;
}

// ---------------------------------------------------------------------------
// Training trace, one JSON record per outer iteration.
// ---------------------------------------------------------------------------

inline void save_trace_jsonl(const std::vector<TrainTraceRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ValidationError("trace: cannot write " + path);
    for (const auto& r : rows) {
        json j;
        j["iter"] = r.iter;
        j["nll"] = r.nll;
        j["grad_norm"] = r.grad_norm;
        j["step"] = r.step;
        j["wallclock_ms"] = r.wallclock_ms;
        out << j.dump() << "\n";
    }
}

}  // namespace sinkgp

#endif  // SINKGP_IO_HPP
