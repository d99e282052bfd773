#pragma once

// Probabilistic Hough matching over a selected subset of pyramid levels.
//
// The selected levels are resized to the largest selected grid and stacked
// into a hyperimage. Every (source, target) position pair votes its cosine
// similarity into the bin of its spatial offset; the final similarity of a
// pair is its own similarity times the total vote of its offset bin.

#include <scalesel/error.hpp>
#include <scalesel/feature_pyramid.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace scalesel {

struct HoughConfig {
    std::uint32_t bins_x = 16;
    std::uint32_t bins_y = 16;
    bool normalize_per_level = true;
};

// Sorted, de-duplicated copy of a level selection.
inline std::vector<std::size_t> canonical_subset(std::span<const std::size_t> selected) {
    std::vector<std::size_t> s(selected.begin(), selected.end());
    std::sort(s.begin(), s.end());
    s.erase(std::unique(s.begin(), s.end()), s.end());
    return s;
}

inline FeatureMap build_hyperimage(const FeaturePyramid& pyr, std::span<const std::size_t> selected,
                                   bool normalize_per_level = true) {
    if (selected.empty()) {
        throw EmptySelectionError();
    }
    const auto levels = canonical_subset(selected);
    if (levels.size() != selected.size()) {
        throw ValidationError("selected level indices contain duplicates");
    }
    std::uint32_t out_h = 0, out_w = 0;
    std::size_t reference = levels.front();
    for (std::size_t i : levels) {
        if (i >= pyr.num_levels()) {
            throw ValidationError("selected level " + std::to_string(i) + " out of range (N=" +
                                  std::to_string(pyr.num_levels()) + ")");
        }
        const FeatureMap& m = pyr.levels[i];
        if (m.height > out_h) {
            out_h = m.height;
            reference = i;
        }
        out_w = std::max(out_w, m.width);
    }

    std::vector<FeatureMap> resized;
    resized.reserve(levels.size());
    const float stride = static_cast<float>(double{pyr.levels[reference].stride} * pyr.levels[reference].height / out_h);
    for (std::size_t i : levels) {
        FeatureMap m = upsample(pyr.levels[i], out_h, out_w);
        m.stride = stride;
        resized.push_back(std::move(m));
    }
    return concat_channels(resized, normalize_per_level);
}

// Clamped cosine similarity between every source and every target position.
struct Correlation {
    GridGeometry src;
    GridGeometry tgt;
    double range_x = 0.0;  // offsets span [-range_x, range_x]
    double range_y = 0.0;
    std::vector<double> values;  // src.positions() x tgt.positions(), row-major

    double at(std::size_t p, std::size_t q) const { return values[p * tgt.positions() + q]; }
};

namespace detail {

// Position-major unit descriptors (zero vectors stay zero).
inline std::vector<double> unit_descriptors(const FeatureMap& m) {
    const std::size_t plane = m.positions();
    std::vector<double> out(plane * m.channels);
    for (std::size_t pos = 0; pos < plane; ++pos) {
        double sq = 0.0;
        for (std::size_t c = 0; c < m.channels; ++c) {
            const double v = m.data[c * plane + pos];
            out[pos * m.channels + c] = v;
            sq += v * v;
        }
        const double inv = sq > 0.0 ? 1.0 / std::sqrt(sq) : 0.0;
        for (std::size_t c = 0; c < m.channels; ++c) out[pos * m.channels + c] *= inv;
    }
    return out;
}

}  // namespace detail

inline Correlation compute_correlation(const FeatureMap& src, const FeatureMap& tgt) {
    if (src.channels != tgt.channels) {
        throw ShapeError("compute_correlation: channel mismatch (" + std::to_string(src.channels) + " vs " +
                         std::to_string(tgt.channels) + ")");
    }
    Correlation corr;
    corr.src = src.geometry();
    corr.tgt = tgt.geometry();
    corr.range_x = std::max(corr.src.stride * corr.src.width, corr.tgt.stride * corr.tgt.width);
    corr.range_y = std::max(corr.src.stride * corr.src.height, corr.tgt.stride * corr.tgt.height);

    const auto a = detail::unit_descriptors(src);
    const auto b = detail::unit_descriptors(tgt);
    const std::size_t ps = corr.src.positions(), pt = corr.tgt.positions(), c = src.channels;
    corr.values.resize(ps * pt);
    for (std::size_t p = 0; p < ps; ++p) {
        const double* u = &a[p * c];
        for (std::size_t q = 0; q < pt; ++q) {
            const double* v = &b[q * c];
            double dot = 0.0;
            for (std::size_t k = 0; k < c; ++k) dot += u[k] * v[k];
            corr.values[p * pt + q] = std::clamp(dot, 0.0, 1.0);
        }
    }
    return corr;
}

// Discretized offset space covering [-range_x, range_x] x [-range_y, range_y].
struct OffsetBinGrid {
    std::uint32_t bins_x = 1;
    std::uint32_t bins_y = 1;
    double range_x = 0.0;
    double range_y = 0.0;
    std::vector<double> votes;  // bins_y x bins_x, row-major

    std::uint32_t bin_x(double dx) const { return quantize(dx, range_x, bins_x); }
    std::uint32_t bin_y(double dy) const { return quantize(dy, range_y, bins_y); }
    std::size_t bin_of(double dx, double dy) const { return std::size_t{bin_y(dy)} * bins_x + bin_x(dx); }

private:
    static std::uint32_t quantize(double d, double range, std::uint32_t bins) {
        const double t = std::floor((d + range) / (2.0 * range) * bins);
        if (!(t > 0.0)) return 0;
        return std::min(static_cast<std::uint32_t>(t), bins - 1);
    }
};

namespace detail {

inline OffsetBinGrid empty_bins(const Correlation& corr, std::uint32_t bins_x, std::uint32_t bins_y) {
    if (bins_x < 1 || bins_y < 1) {
        throw ValidationError("hough bin counts must be >= 1");
    }
    if (corr.values.size() != corr.src.positions() * corr.tgt.positions()) {
        throw ShapeError("correlation size does not match its grid geometry");
    }
    OffsetBinGrid grid;
    grid.bins_x = bins_x;
    grid.bins_y = bins_y;
    grid.range_x = corr.range_x;
    grid.range_y = corr.range_y;
    grid.votes.assign(std::size_t{bins_x} * bins_y, 0.0);
    return grid;
}

// Per-axis bin lookup tables: the x-bin of a pair depends only on the two
// columns, the y-bin only on the two rows.
struct BinTables {
    std::vector<std::uint32_t> x;  // src.width x tgt.width
    std::vector<std::uint32_t> y;  // src.height x tgt.height
};

inline BinTables bin_tables(const Correlation& corr, const OffsetBinGrid& grid) {
    BinTables t;
    t.x.resize(std::size_t{corr.src.width} * corr.tgt.width);
    t.y.resize(std::size_t{corr.src.height} * corr.tgt.height);
    for (std::size_t i = 0; i < corr.src.width; ++i) {
        for (std::size_t j = 0; j < corr.tgt.width; ++j) {
            t.x[i * corr.tgt.width + j] = grid.bin_x(corr.tgt.center_x(j) - corr.src.center_x(i));
        }
    }
    for (std::size_t i = 0; i < corr.src.height; ++i) {
        for (std::size_t j = 0; j < corr.tgt.height; ++j) {
            t.y[i * corr.tgt.height + j] = grid.bin_y(corr.tgt.center_y(j) - corr.src.center_y(i));
        }
    }
    return t;
}

}  // namespace detail

inline OffsetBinGrid hough_vote(const Correlation& corr, std::uint32_t bins_x = 16, std::uint32_t bins_y = 16) {
    OffsetBinGrid grid = detail::empty_bins(corr, bins_x, bins_y);
    const auto tables = detail::bin_tables(corr, grid);
    const std::size_t sw = corr.src.width, tw = corr.tgt.width, th = corr.tgt.height;
    for (std::size_t p = 0; p < corr.src.positions(); ++p) {
        const std::size_t px = p % sw, py = p / sw;
        const double* row = &corr.values[p * corr.tgt.positions()];
        for (std::size_t qy = 0; qy < th; ++qy) {
            const std::size_t by = tables.y[py * th + qy];
            for (std::size_t qx = 0; qx < tw; ++qx) {
                grid.votes[by * bins_x + tables.x[px * tw + qx]] += row[qy * tw + qx];
            }
        }
    }
    return grid;
}

struct MatchResult {
    GridGeometry src;
    GridGeometry tgt;
    std::vector<double> reweighted;          // src.positions() x tgt.positions()
    std::vector<std::uint32_t> best_target;  // per source position
};

inline MatchResult reweight(const Correlation& corr, const OffsetBinGrid& bins) {
    if (bins.range_x != corr.range_x || bins.range_y != corr.range_y ||
        bins.votes.size() != std::size_t{bins.bins_x} * bins.bins_y ||
        corr.values.size() != corr.src.positions() * corr.tgt.positions()) {
        throw ShapeError("reweight: bin grid was not built from this correlation's geometry");
    }
    const auto tables = detail::bin_tables(corr, bins);
    MatchResult m;
    m.src = corr.src;
    m.tgt = corr.tgt;
    const std::size_t ps = corr.src.positions(), pt = corr.tgt.positions();
    const std::size_t sw = corr.src.width, tw = corr.tgt.width, th = corr.tgt.height;
    m.reweighted.resize(ps * pt);
    m.best_target.resize(ps);
    for (std::size_t p = 0; p < ps; ++p) {
        const std::size_t px = p % sw, py = p / sw;
        double best = -1.0;
        std::uint32_t best_q = 0;
        for (std::size_t q = 0; q < pt; ++q) {
            const std::size_t qx = q % tw, qy = q / tw;
            const std::size_t bin = std::size_t{tables.y[py * th + qy]} * bins.bins_x + tables.x[px * tw + qx];
            const double v = corr.values[p * pt + q] * bins.votes[bin];
            m.reweighted[p * pt + q] = v;
            if (v > best) {
                best = v;
                best_q = static_cast<std::uint32_t>(q);
            }
        }
        m.best_target[p] = best_q;
    }
    return m;
}

inline MatchResult match_pyramids(const FeaturePyramid& src, const FeaturePyramid& tgt,
                                  std::span<const std::size_t> selected, const HoughConfig& cfg = {}) {
    const FeatureMap a = build_hyperimage(src, selected, cfg.normalize_per_level);
    const FeatureMap b = build_hyperimage(tgt, selected, cfg.normalize_per_level);
    const Correlation corr = compute_correlation(a, b);
    return reweight(corr, hough_vote(corr, cfg.bins_x, cfg.bins_y));
}

inline MatchResult match_pair(const ImagePair& pair, std::span<const std::size_t> selected,
                              const HoughConfig& cfg = {}) {
    return match_pyramids(pair.source, pair.target, selected, cfg);
}

// Each keypoint is carried by the <= 4 source cells whose centres surround it,
// weighted bilinearly by centre displacement; the prediction is the weighted
// mean of those cells' best-matching target centres.
inline KeypointSet transfer_keypoints(const MatchResult& match, const KeypointSet& kps) {
    KeypointSet out;
    out.bbox = {0.0, 0.0, match.tgt.stride * match.tgt.width, match.tgt.stride * match.tgt.height};
    const GridGeometry& g = match.src;
    const double s = g.stride;
    for (const Point2& k : kps.points) {
        const long ix0 = static_cast<long>(std::floor(k.x / s - 0.5));
        const long iy0 = static_cast<long>(std::floor(k.y / s - 0.5));
        double wsum = 0.0, px = 0.0, py = 0.0;
        for (long iy = iy0; iy <= iy0 + 1; ++iy) {
            if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
            for (long ix = ix0; ix <= ix0 + 1; ++ix) {
                if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
                const double w = std::max(0.0, 1.0 - std::abs(g.center_x(ix) - k.x) / s) *
                                 std::max(0.0, 1.0 - std::abs(g.center_y(iy) - k.y) / s);
                if (w <= 0.0) continue;
                const std::size_t q = match.best_target[static_cast<std::size_t>(iy) * g.width + ix];
                px += w * match.tgt.center_x_of(q);
                py += w * match.tgt.center_y_of(q);
                wsum += w;
            }
        }
        if (wsum > 0.0) {
            out.points.push_back({px / wsum, py / wsum});
        } else {
            const auto ix = std::clamp<long>(static_cast<long>(std::floor(k.x / s)), 0, g.width - 1);
            const auto iy = std::clamp<long>(static_cast<long>(std::floor(k.y / s)), 0, g.height - 1);
            const std::size_t q = match.best_target[static_cast<std::size_t>(iy) * g.width + ix];
            out.points.push_back({match.tgt.center_x_of(q), match.tgt.center_y_of(q)});
        }
    }
    return out;
}

struct DenseFlow {
    GridGeometry grid;
    std::vector<Point2> flow;  // per source cell, image pixels

    Point2 at(std::size_t ix, std::size_t iy) const { return flow[iy * grid.width + ix]; }
};

inline DenseFlow dense_flow(const MatchResult& match) {
    DenseFlow f;
    f.grid = match.src;
    f.flow.resize(match.src.positions());
    for (std::size_t p = 0; p < match.src.positions(); ++p) {
        const std::size_t q = match.best_target[p];
        f.flow[p] = {match.tgt.center_x_of(q) - match.src.center_x_of(p),
                     match.tgt.center_y_of(q) - match.src.center_y_of(p)};
    }
    return f;
}

// ---------------------------------------------------------------------------
// Export

inline nlohmann::json grid_to_json(const GridGeometry& g) {
    return {{"h", g.height}, {"w", g.width}, {"stride", g.stride}};
}

inline nlohmann::json match_to_json(const MatchResult& m) {
    return {{"best_target", m.best_target}, {"grid", grid_to_json(m.src)}, {"target_grid", grid_to_json(m.tgt)}};
}

inline std::string flow_to_csv(const DenseFlow& f) {
    std::ostringstream os;
    os.precision(17);
    os << "x,y,dx,dy\n";
    for (std::size_t p = 0; p < f.grid.positions(); ++p) {
        os << f.grid.center_x_of(p) << ',' << f.grid.center_y_of(p) << ',' << f.flow[p].x << ',' << f.flow[p].y
           << '\n';
    }
    return os.str();
}

}  // namespace scalesel
