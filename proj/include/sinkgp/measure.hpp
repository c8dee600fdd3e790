#ifndef SINKGP_MEASURE_HPP
#define SINKGP_MEASURE_HPP

#include "sinkgp/common.hpp"
#include "sinkgp/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace sinkgp {

/// Weighted point cloud representing a discrete probability measure.
///
/// Construction normalizes the weights to sum to one and drops atoms of
/// zero weight; they carry no mass and only destabilize log-domain
/// transport. Values are immutable afterwards and safe to share.
class DiscreteMeasure {
public:
    /// points: n x d support, one atom per row; weights: n nonnegative
    /// entries, not all zero.
    DiscreteMeasure(Matrix points, Vector weights) {
        if (points.rows() != weights.size())
            throw ValidationError("measure: points/weights length mismatch");
        if (points.rows() < 1 || points.cols() < 1)
            throw ValidationError("measure: need at least one atom and one dimension");
        if (!points.allFinite())
            throw ValidationError("measure: non-finite coordinate");
        double total = 0.0;
        for (Index i = 0; i < weights.size(); ++i) {
            const double w = weights(i);
            if (!std::isfinite(w)) throw ValidationError("measure: non-finite weight");
            if (w < 0.0)
                throw ValidationError("measure: negative weight at atom " + std::to_string(i));
            total += w;
        }
        if (total <= 0.0) throw ValidationError("measure: all weights zero (empty measure)");

        Index kept = 0;
        for (Index i = 0; i < weights.size(); ++i)
            if (weights(i) > 0.0) ++kept;
        points_.resize(kept, points.cols());
        weights_.resize(kept);
        Index at = 0;
        for (Index i = 0; i < weights.size(); ++i) {
            if (weights(i) <= 0.0) continue;
            points_.row(at) = points.row(i);
            weights_(at) = weights(i) / total;
            ++at;
        }
    }

    Index size() const { return points_.rows(); }
    Index dim() const { return points_.cols(); }
    const Matrix& points() const { return points_; }
    const Vector& weights() const { return weights_; }

    /// Content token; equal tokens mean bitwise-equal supports and weights.
    std::uint64_t content_hash() const {
        return hash_vector(weights_, hash_matrix(points_));
    }

private:
    Matrix points_;
    Vector weights_;
};

/// Applies an affine map x -> (x - shift) / scale per coordinate.
struct AffineMap {
    Vector shift;
    Vector scale;

    Matrix apply(const Matrix& pts) const {
        Matrix out = pts;
        for (Index j = 0; j < out.cols(); ++j)
            out.col(j) = (out.col(j).array() - shift(j)) / scale(j);
        return out;
    }
    Matrix invert(const Matrix& pts) const {
        Matrix out = pts;
        for (Index j = 0; j < out.cols(); ++j)
            out.col(j) = out.col(j).array() * scale(j) + shift(j);
        return out;
    }
    DiscreteMeasure apply(const DiscreteMeasure& m) const {
        return DiscreteMeasure(apply(m.points()), m.weights());
    }
};

/// A collection of measures with exactly one of regression targets or
/// binary class labels.
struct LabeledDataset {
    std::vector<DiscreteMeasure> measures;
    std::optional<Vector> targets;
    std::optional<std::vector<int>> labels;
    Index dim = 0;

    void validate() const {
        if (targets.has_value() == labels.has_value())
            throw ValidationError("dataset: exactly one of targets/labels must be present");
        const std::size_t n = measures.size();
        if (targets && static_cast<std::size_t>(targets->size()) != n)
            throw ValidationError("dataset: targets length mismatch");
        if (labels && labels->size() != n)
            throw ValidationError("dataset: labels length mismatch");
        if (labels)
            for (int y : *labels)
                if (y != 0 && y != 1) throw ValidationError("dataset: labels must be 0 or 1");
        for (const auto& m : measures)
            if (m.dim() != dim) throw ValidationError("dataset: mixed ambient dimensions");
    }

    bool is_classification() const { return labels.has_value(); }
    std::size_t size() const { return measures.size(); }
};

// ---------------------------------------------------------------------------
// CSV ingestion.  Format: header "x1,...,xd,weight", decimal floats, UTF-8,
// LF line endings.  Coordinates are written with 17 significant digits so a
// save/load round trip is bit exact.
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    fields.push_back(cur);
    return fields;
}

inline double parse_double(const std::string& s, long row) {
    const char* begin = s.c_str();
    char* end = nullptr;
    const double v = std::strtod(begin, &end);
    if (end == begin || end != begin + s.size())
        throw ParseError("measure csv: malformed number '" + s + "'", row);
    return v;
}

}  // namespace detail

inline DiscreteMeasure load_measure(std::istream& in, const std::string& name = "<stream>") {
    std::string line;
    if (!std::getline(in, line)) throw ParseError("measure csv: empty file " + name, 1);
    const auto header = detail::split_csv_line(line);
    if (header.size() < 2 || header.back() != "weight")
        throw ParseError("measure csv: header must be x1,...,xd,weight in " + name, 1);
    const Index d = static_cast<Index>(header.size()) - 1;
    for (Index j = 0; j < d; ++j)
        if (header[static_cast<std::size_t>(j)] != "x" + std::to_string(j + 1))
            throw ParseError("measure csv: unexpected header column '" +
                                 header[static_cast<std::size_t>(j)] + "' in " + name,
                             1);

    std::vector<double> coords;
    std::vector<double> ws;
    long row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty()) continue;
        const auto fields = detail::split_csv_line(line);
        if (static_cast<Index>(fields.size()) != d + 1)
            throw ParseError("measure csv: expected " + std::to_string(d + 1) + " fields, got " +
                                 std::to_string(fields.size()) + " in " + name,
                             row);
        for (Index j = 0; j < d; ++j)
            coords.push_back(detail::parse_double(fields[static_cast<std::size_t>(j)], row));
        const double w = detail::parse_double(fields.back(), row);
        if (w < 0.0) throw ValidationError("measure csv: negative weight in " + name + " at row " + std::to_string(row));
        ws.push_back(w);
    }
    const Index n = static_cast<Index>(ws.size());
    if (n == 0) throw ParseError("measure csv: no data rows in " + name, row);
    Matrix pts(n, d);
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < d; ++j) pts(i, j) = coords[static_cast<std::size_t>(i * d + j)];
    Vector wv = Eigen::Map<Vector>(ws.data(), n);
    return DiscreteMeasure(std::move(pts), std::move(wv));
}

inline DiscreteMeasure load_measure(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("measure csv: cannot open " + path);
    return load_measure(in, path);
}

inline void save_measure(const DiscreteMeasure& m, std::ostream& out) {
    for (Index j = 0; j < m.dim(); ++j) out << "x" << (j + 1) << ",";
    out << "weight\n";
    char buf[40];
    for (Index i = 0; i < m.size(); ++i) {
        for (Index j = 0; j < m.dim(); ++j) {
            std::snprintf(buf, sizeof(buf), "%.17g", m.points()(i, j));
            out << buf << ",";
        }
        std::snprintf(buf, sizeof(buf), "%.17g", m.weights()(i));
        out << buf << "\n";
    }
}

inline void save_measure(const DiscreteMeasure& m, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ValidationError("measure csv: cannot write " + path);
    save_measure(m, out);
}

// ---------------------------------------------------------------------------
// Image and texture ingestion.
// ---------------------------------------------------------------------------

/// Turns a nonnegative intensity grid into a measure on [0,1]^2.
///
/// Pixel (row r, col c) of an H x W grid maps to ((c+0.5)/W, 1-(r+0.5)/H),
/// so the cloud renders in standard orientation; weights are the
/// normalized intensities. An optional center crop is applied first.
inline DiscreteMeasure image_to_cloud(const Matrix& intensities, std::optional<Index> crop = std::nullopt) {
    if (intensities.rows() < 1 || intensities.cols() < 1)
        throw ValidationError("image: empty grid");
    if ((intensities.array() < 0.0).any())
        throw ValidationError("image: negative intensity");
    Matrix img = intensities;
    if (crop) {
        const Index c = *crop;
        if (c < 1 || c > img.rows() || c > img.cols())
            throw ValidationError("image: crop size out of range");
        const Index r0 = (img.rows() - c) / 2;
        const Index c0 = (img.cols() - c) / 2;
        img = img.block(r0, c0, c, c).eval();
    }
    const Index h = img.rows(), w = img.cols();
    std::vector<double> xs, ys, ws;
    for (Index r = 0; r < h; ++r)
        for (Index c = 0; c < w; ++c)
            if (img(r, c) > 0.0) {
                xs.push_back((static_cast<double>(c) + 0.5) / static_cast<double>(w));
                ys.push_back(1.0 - (static_cast<double>(r) + 0.5) / static_cast<double>(h));
                ws.push_back(img(r, c));
            }
    if (ws.empty()) throw ValidationError("image: all intensities zero (empty measure)");
    const Index n = static_cast<Index>(ws.size());
    Matrix pts(n, 2);
    Vector wv(n);
    for (Index i = 0; i < n; ++i) {
        pts(i, 0) = xs[static_cast<std::size_t>(i)];
        pts(i, 1) = ys[static_cast<std::size_t>(i)];
        wv(i) = ws[static_cast<std::size_t>(i)];
    }
    return DiscreteMeasure(std::move(pts), std::move(wv));
}

/// Gray-level co-occurrence measure of an integer image with L levels.
///
/// Counts pairs (I[r,c], I[r+dr,c+dc]) over all valid positions and
/// normalizes to a probability measure on the {0,...,L-1}^2 grid scaled
/// into [0,1]^2 (coordinates divided by L-1 when L > 1).
inline DiscreteMeasure glcm(const Eigen::MatrixXi& gray, int levels, std::pair<int, int> offset) {
    const Index h = gray.rows(), w = gray.cols();
    const int dr = offset.first, dc = offset.second;
    if (levels < 1) throw ValidationError("glcm: need at least one level");
    if (dr == 0 && dc == 0) throw ValidationError("glcm: offset must be nonzero");
    if (std::abs(dr) >= h || std::abs(dc) >= w)
        throw ValidationError("glcm: offset larger than image");
    if ((gray.array() < 0).any() || (gray.array() >= levels).any())
        throw ValidationError("glcm: pixel level out of [0, L)");

    Matrix counts = Matrix::Zero(levels, levels);
    for (Index r = 0; r < h; ++r) {
        const Index r2 = r + dr;
        if (r2 < 0 || r2 >= h) continue;
        for (Index c = 0; c < w; ++c) {
            const Index c2 = c + dc;
            if (c2 < 0 || c2 >= w) continue;
            counts(gray(r, c), gray(r2, c2)) += 1.0;
        }
    }
    const double denom = levels > 1 ? static_cast<double>(levels - 1) : 1.0;
    std::vector<double> xs, ys, ws;
    for (int a = 0; a < levels; ++a)
        for (int b = 0; b < levels; ++b)
            if (counts(a, b) > 0.0) {
                xs.push_back(static_cast<double>(a) / denom);
                ys.push_back(static_cast<double>(b) / denom);
                ws.push_back(counts(a, b));
            }
    if (ws.empty()) throw ValidationError("glcm: no co-occurrences (empty measure)");
    const Index n = static_cast<Index>(ws.size());
    Matrix pts(n, 2);
    Vector wv(n);
    for (Index i = 0; i < n; ++i) {
        pts(i, 0) = xs[static_cast<std::size_t>(i)];
        pts(i, 1) = ys[static_cast<std::size_t>(i)];
        wv(i) = ws[static_cast<std::size_t>(i)];
    }
    return DiscreteMeasure(std::move(pts), std::move(wv));
}

/// Average of single-offset co-occurrence measures, one per offset.
inline DiscreteMeasure glcm_average(const Eigen::MatrixXi& gray, int levels,
                                    const std::vector<std::pair<int, int>>& offsets) {
    if (offsets.empty()) throw ValidationError("glcm: need at least one offset");
    std::map<std::pair<double, double>, double> mass;
    for (const auto& off : offsets) {
        const DiscreteMeasure g = glcm(gray, levels, off);
        for (Index i = 0; i < g.size(); ++i)
            mass[{g.points()(i, 0), g.points()(i, 1)}] += g.weights()(i);
    }
    const Index n = static_cast<Index>(mass.size());
    Matrix pts(n, 2);
    Vector wv(n);
    Index i = 0;
    for (const auto& [xy, w] : mass) {
        pts(i, 0) = xy.first;
        pts(i, 1) = xy.second;
        wv(i) = w;
        ++i;
    }
    return DiscreteMeasure(std::move(pts), std::move(wv));
}

// ---------------------------------------------------------------------------
// Sampling.
// ---------------------------------------------------------------------------

/// k i.i.d. draws from m (with replacement, by weight), returned with
/// uniform weight 1/k; repeated draws of an atom merge into one atom.
inline DiscreteMeasure subsample(const DiscreteMeasure& m, Index k, std::uint64_t seed) {
    if (k < 1) throw ValidationError("subsample: k must be >= 1");
    Rng rng(seed);
    Vector cdf(m.size());
    double acc = 0.0;
    for (Index i = 0; i < m.size(); ++i) {
        acc += m.weights()(i);
        cdf(i) = acc;
    }
    std::vector<Index> hits(static_cast<std::size_t>(m.size()), 0);
    for (Index draw = 0; draw < k; ++draw) {
        const double u = rng.uniform();
        Index lo = 0, hi = m.size() - 1;
        while (lo < hi) {
            const Index mid = (lo + hi) / 2;
            if (u < cdf(mid)) hi = mid; else lo = mid + 1;
        }
        hits[static_cast<std::size_t>(lo)] += 1;
    }
    Index distinct = 0;
    for (Index i = 0; i < m.size(); ++i)
        if (hits[static_cast<std::size_t>(i)] > 0) ++distinct;
    Matrix pts(distinct, m.dim());
    Vector wv(distinct);
    Index at = 0;
    for (Index i = 0; i < m.size(); ++i) {
        if (hits[static_cast<std::size_t>(i)] == 0) continue;
        pts.row(at) = m.points().row(i);
        wv(at) = static_cast<double>(hits[static_cast<std::size_t>(i)]) / static_cast<double>(k);
        ++at;
    }
    return DiscreteMeasure(std::move(pts), std::move(wv));
}

/// Response of the synthetic random field at a Gaussian with mean
/// (m1, m2) and standard deviation s.
inline double toy_field_value(double m1, double m2, double s) {
    return (m1 + 0.5 - (m2 + 0.5) * (m2 + 0.5)) / (1.0 + s);
}

/// Synthetic regression dataset: `count` isotropic 2-D Gaussians sampled
/// as clouds of `cloud_size` points with uniform weights.
///
/// Means are uniform on [-0.3, 0.3]^2, variances uniform on
/// [0.01^2, 0.02^2], and the response of a Gaussian with mean (m1, m2)
/// and standard deviation s is (m1 + 0.5 - (m2 + 0.5)^2) / (1 + s).
///
/// Draw order under the seed, fixed for reproducibility: all means
/// (x then y per measure), then all variances, then each measure's cloud
/// (x then y per point).
inline LabeledDataset sample_toy_dataset(Index count, Index cloud_size, std::uint64_t seed) {
    if (count < 1) throw ValidationError("toy dataset: count must be >= 1");
    if (cloud_size < 1) throw ValidationError("toy dataset: cloud_size must be >= 1");
    Rng rng(seed);
    Matrix means(count, 2);
    for (Index i = 0; i < count; ++i) {
        means(i, 0) = rng.uniform(-0.3, 0.3);
        means(i, 1) = rng.uniform(-0.3, 0.3);
    }
    Vector stddev(count);
    for (Index i = 0; i < count; ++i)
        stddev(i) = std::sqrt(rng.uniform(0.01 * 0.01, 0.02 * 0.02));

    LabeledDataset ds;
    ds.dim = 2;
    Vector targets(count);
    for (Index i = 0; i < count; ++i) {
        Matrix pts(cloud_size, 2);
        for (Index p = 0; p < cloud_size; ++p) {
            pts(p, 0) = rng.normal(means(i, 0), stddev(i));
            pts(p, 1) = rng.normal(means(i, 1), stddev(i));
        }
        ds.measures.emplace_back(std::move(pts), Vector::Constant(cloud_size, 1.0 / static_cast<double>(cloud_size)));
        targets(i) = toy_field_value(means(i, 0), means(i, 1), stddev(i));
    }
    ds.targets = targets;
    ds.validate();
    return ds;
}

// ---------------------------------------------------------------------------
// Dataset standardization.
// ---------------------------------------------------------------------------

struct NormalizedDataset {
    LabeledDataset dataset;
    AffineMap map;  // applied map; invert() restores original coordinates
};

/// Centers and rescales every cloud with one shared affine map so the
/// pooled point set (clouds equally weighted, atoms by their weights)
/// has zero mean and unit variance per coordinate.
inline NormalizedDataset normalize_dataset(const LabeledDataset& ds) {
    ds.validate();
    if (ds.measures.empty()) throw ValidationError("normalize: empty dataset");
    const Index d = ds.dim;
    const double per_cloud = 1.0 / static_cast<double>(ds.measures.size());
    Vector mean = Vector::Zero(d);
    for (const auto& m : ds.measures)
        mean += per_cloud * (m.points().transpose() * m.weights());
    Vector var = Vector::Zero(d);
    for (const auto& m : ds.measures)
        for (Index j = 0; j < d; ++j)
            var(j) += per_cloud * (m.weights().array() *
                                   (m.points().col(j).array() - mean(j)).square())
                                      .sum();
    for (Index j = 0; j < d; ++j)
        if (var(j) <= 0.0)
            throw ValidationError("normalize: zero pooled variance in coordinate " + std::to_string(j + 1));

    AffineMap map{mean, var.array().sqrt().matrix()};
    NormalizedDataset out;
    out.map = map;
    out.dataset.dim = d;
    out.dataset.targets = ds.targets;
    out.dataset.labels = ds.labels;
    for (const auto& m : ds.measures) out.dataset.measures.push_back(map.apply(m));
    return out;
}

}  // namespace sinkgp

#endif  // SINKGP_MEASURE_HPP
