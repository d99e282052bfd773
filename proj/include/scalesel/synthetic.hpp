#pragma once

// Synthetic feature pyramids with planted correspondences. Each keypoint gets
// a random descriptor per informative level that is written at the source cell
// containing the keypoint and at the target cell containing its warped
// position; everything else is noise.

#include <scalesel/error.hpp>
#include <scalesel/feature_pyramid.hpp>

#include <cmath>
#include <cstdint>
#include <random>
#include <set>
#include <vector>

namespace scalesel {

struct LevelShape {
    std::uint32_t channels = 1;
    std::uint32_t height = 1;
    std::uint32_t width = 1;
    float stride = 1.0f;
};

enum class WarpKind { identity, translation, similarity };

// Similarity warps act about the image centre: t = c + scale * R(rotation) * (p - c) + (dx, dy).
struct Warp {
    WarpKind kind = WarpKind::identity;
    double dx = 0.0;
    double dy = 0.0;
    double scale = 1.0;
    double rotation = 0.0;  // radians

    Point2 apply(Point2 p, Point2 center) const {
        switch (kind) {
        case WarpKind::identity:
            return p;
        case WarpKind::translation:
            return {p.x + dx, p.y + dy};
        case WarpKind::similarity: {
            const double c = std::cos(rotation), s = std::sin(rotation);
            const double ux = p.x - center.x, uy = p.y - center.y;
            return {center.x + scale * (c * ux - s * uy) + dx, center.y + scale * (s * ux + c * uy) + dy};
        }
        }
        return p;
    }

    Point2 invert(Point2 t, Point2 center) const {
        switch (kind) {
        case WarpKind::identity:
            return t;
        case WarpKind::translation:
            return {t.x - dx, t.y - dy};
        case WarpKind::similarity: {
            const double c = std::cos(rotation), s = std::sin(rotation);
            const double ux = (t.x - dx - center.x) / scale, uy = (t.y - dy - center.y) / scale;
            return {center.x + c * ux + s * uy, center.y - s * ux + c * uy};
        }
        }
        return t;
    }
};

struct SyntheticSpec {
    std::uint32_t image_height = 64;
    std::uint32_t image_width = 64;
    std::vector<LevelShape> levels;
    std::vector<std::size_t> informative_set;
    std::uint32_t signal_dims = 4;
    double noise_sigma = 0.0;
    std::uint32_t num_keypoints = 6;
    Warp warp;
    std::uint64_t seed = 0;
    std::uint32_t global_dims = 8;
    bool with_masks = true;
};

inline void validate_spec(const SyntheticSpec& spec) {
    if (spec.levels.size() < 2) {
        throw ValidationError("levels: need at least 2 levels");
    }
    if (spec.informative_set.empty()) {
        throw ValidationError("informative_set: must be non-empty");
    }
    std::set<std::size_t> seen;
    for (std::size_t i : spec.informative_set) {
        if (i >= spec.levels.size()) {
            throw ValidationError("informative_set: index " + std::to_string(i) + " out of range 0.." +
                                  std::to_string(spec.levels.size() - 1));
        }
        if (!seen.insert(i).second) {
            throw ValidationError("informative_set: duplicate index " + std::to_string(i));
        }
        if (spec.signal_dims > spec.levels[i].channels) {
            throw ValidationError("signal_dims: exceeds channel count of informative level " + std::to_string(i));
        }
    }
    if (spec.signal_dims < 1) {
        throw ValidationError("signal_dims: must be >= 1");
    }
    if (!(spec.noise_sigma >= 0.0) || !std::isfinite(spec.noise_sigma)) {
        throw ValidationError("noise_sigma: must be a finite non-negative number");
    }
    if (spec.num_keypoints < 4) {
        throw ValidationError("num_keypoints: must be >= 4");
    }
    if (spec.warp.kind == WarpKind::similarity && !(spec.warp.scale > 0.0)) {
        throw ValidationError("warp.scale: must be positive");
    }
    for (std::size_t i = 0; i < spec.levels.size(); ++i) {
        const LevelShape& l = spec.levels[i];
        if (l.channels < 1 || l.height < 1 || l.width < 1 || !(l.stride > 0.0f)) {
            throw ValidationError("levels[" + std::to_string(i) + "]: dimensions and stride must be positive");
        }
        if (std::abs(double{l.stride} * l.height - spec.image_height) > 0.5 ||
            std::abs(double{l.stride} * l.width - spec.image_width) > 0.5) {
            throw ValidationError("levels[" + std::to_string(i) + "]: stride*h and stride*w must match the image size");
        }
    }
}

namespace detail {

inline std::size_t cell_of(const LevelShape& l, Point2 p) {
    const auto ix = std::min<std::size_t>(static_cast<std::size_t>(std::floor(p.x / l.stride)), l.width - 1);
    const auto iy = std::min<std::size_t>(static_cast<std::size_t>(std::floor(p.y / l.stride)), l.height - 1);
    return iy * l.width + ix;
}

}  // namespace detail

inline ImagePair gen_synthetic_pair(const SyntheticSpec& spec) {
    validate_spec(spec);
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);

    const double W = spec.image_width, H = spec.image_height;
    const Point2 center{W / 2.0, H / 2.0};

    std::size_t coarse = spec.informative_set.front();
    std::size_t fine = spec.informative_set.front();
    for (std::size_t i : spec.informative_set) {
        if (spec.levels[i].stride > spec.levels[coarse].stride) coarse = i;
        if (spec.levels[i].stride < spec.levels[fine].stride) fine = i;
    }
    const LevelShape& cl = spec.levels[coarse];
    const LevelShape& fl = spec.levels[fine];
    const std::size_t capacity = std::size_t{cl.height} * cl.width;
    if (spec.num_keypoints > capacity) {
        throw CapacityError("num_keypoints " + std::to_string(spec.num_keypoints) +
                            " exceeds the coarsest informative grid capacity " + std::to_string(capacity));
    }

    // Keypoints sit at fine-level cell centres, one per coarse cell, visited in random order.
    std::vector<std::size_t> order(capacity);
    for (std::size_t i = 0; i < capacity; ++i) order[i] = i;
    for (std::size_t i = capacity; i > 1; --i) {
        std::uniform_int_distribution<std::size_t> pick(0, i - 1);
        std::swap(order[i - 1], order[pick(rng)]);
    }

    std::vector<std::set<std::size_t>> used_src(spec.levels.size()), used_tgt(spec.levels.size());
    KeypointSet src_kps, tgt_kps;
    src_kps.bbox = tgt_kps.bbox = BoundingBox{0.0, 0.0, W, H};
    for (std::size_t cell : order) {
        if (src_kps.size() == spec.num_keypoints) break;
        const double x0 = (cell % cl.width) * double{cl.stride}, y0 = (cell / cl.width) * double{cl.stride};
        std::vector<Point2> candidates;
        for (std::uint32_t fy = 0; fy < fl.height; ++fy) {
            for (std::uint32_t fx = 0; fx < fl.width; ++fx) {
                const Point2 c{(fx + 0.5) * fl.stride, (fy + 0.5) * fl.stride};
                if (c.x >= x0 && c.x < x0 + cl.stride && c.y >= y0 && c.y < y0 + cl.stride) {
                    candidates.push_back(c);
                }
            }
        }
        if (candidates.empty()) {
            candidates.push_back({x0 + cl.stride / 2.0, y0 + cl.stride / 2.0});
        }
        std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
        const Point2 k = candidates[pick(rng)];
        const Point2 t = spec.warp.apply(k, center);
        if (!(t.x >= 0.0 && t.x < W && t.y >= 0.0 && t.y < H)) continue;
        bool clash = false;
        for (std::size_t i : spec.informative_set) {
            clash = clash || used_src[i].contains(detail::cell_of(spec.levels[i], k)) ||
                    used_tgt[i].contains(detail::cell_of(spec.levels[i], t));
        }
        if (clash) continue;
        for (std::size_t i : spec.informative_set) {
            used_src[i].insert(detail::cell_of(spec.levels[i], k));
            used_tgt[i].insert(detail::cell_of(spec.levels[i], t));
        }
        src_kps.points.push_back(k);
        tgt_kps.points.push_back(t);
    }
    if (src_kps.size() < spec.num_keypoints) {
        throw CapacityError("could only place " + std::to_string(src_kps.size()) + " of " +
                            std::to_string(spec.num_keypoints) + " keypoints under the warp");
    }

    // descriptors[k][level] holds signal_dims values
    std::vector<std::vector<std::vector<double>>> descriptors(spec.num_keypoints,
                                                              std::vector<std::vector<double>>(spec.levels.size()));
    for (std::size_t k = 0; k < spec.num_keypoints; ++k) {
        for (std::size_t i : spec.informative_set) {
            auto& d = descriptors[k][i];
            d.resize(spec.signal_dims);
            for (auto& v : d) v = gauss(rng);
        }
    }

    std::vector<bool> informative(spec.levels.size(), false);
    for (std::size_t i : spec.informative_set) informative[i] = true;

    auto make_pyramid = [&](const std::vector<Point2>& points) {
        FeaturePyramid pyr;
        pyr.image_height = spec.image_height;
        pyr.image_width = spec.image_width;
        for (std::size_t i = 0; i < spec.levels.size(); ++i) {
            const LevelShape& l = spec.levels[i];
            FeatureMap m;
            m.layer_index = static_cast<std::uint32_t>(i);
            m.channels = l.channels;
            m.height = l.height;
            m.width = l.width;
            m.stride = l.stride;
            std::vector<double> values(std::size_t{l.channels} * l.height * l.width);
            const double sigma = informative[i] ? spec.noise_sigma : 1.0;
            for (auto& v : values) v = sigma * gauss(rng);
            if (informative[i]) {
                const std::size_t plane = m.positions();
                for (std::size_t k = 0; k < points.size(); ++k) {
                    const std::size_t pos = detail::cell_of(l, points[k]);
                    for (std::size_t c = 0; c < spec.signal_dims; ++c) {
                        values[c * plane + pos] += descriptors[k][i][c];
                    }
                }
            }
            m.data.assign(values.begin(), values.end());
            pyr.levels.push_back(std::move(m));
        }
        return pyr;
    };

    ImagePair pair;
    pair.source = make_pyramid(src_kps.points);
    pair.target = make_pyramid(tgt_kps.points);
    pair.source.global_descriptor.resize(spec.global_dims);
    pair.target.global_descriptor.resize(spec.global_dims);
    for (auto& v : pair.source.global_descriptor) v = static_cast<float>(gauss(rng));
    for (auto& v : pair.target.global_descriptor) v = static_cast<float>(gauss(rng));
    pair.src_keypoints = std::move(src_kps);
    pair.tgt_keypoints = std::move(tgt_kps);

    if (spec.with_masks) {
        // Source object = coarse informative cells holding a keypoint; target = its warp.
        BinaryMask src(spec.image_height, spec.image_width), tgt(spec.image_height, spec.image_width);
        std::set<std::size_t> cells;
        for (const Point2& p : pair.src_keypoints.points) cells.insert(detail::cell_of(cl, p));
        auto inside = [&](Point2 p) {
            if (!(p.x >= 0.0 && p.x < W && p.y >= 0.0 && p.y < H)) return false;
            return cells.contains(detail::cell_of(cl, p));
        };
        for (std::uint32_t y = 0; y < spec.image_height; ++y) {
            for (std::uint32_t x = 0; x < spec.image_width; ++x) {
                const Point2 p{x + 0.5, y + 0.5};
                src.at(y, x) = inside(p) ? 1 : 0;
                tgt.at(y, x) = inside(spec.warp.invert(p, center)) ? 1 : 0;
            }
        }
        pair.src_mask = std::move(src);
        pair.tgt_mask = std::move(tgt);
    }
    return pair;
}

}  // namespace scalesel
