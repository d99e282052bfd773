#pragma once

#include <scalesel/error.hpp>
#include <scalesel/feature_pyramid.hpp>
#include <scalesel/hough_matcher.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>

namespace scalesel {

struct PckResult {
    std::size_t correct = 0;
    std::size_t total = 0;
    double pck = 0.0;
    double threshold_px = 0.0;
    double alpha = 0.0;
};

// A keypoint is correct when its error is <= alpha * max(bbox height, bbox width).
inline PckResult pck(const KeypointSet& predicted, const KeypointSet& ground_truth, const BoundingBox& bbox,
                     double alpha) {
    if (predicted.size() != ground_truth.size()) {
        throw ValidationError("pck: predicted and ground-truth keypoint counts differ (" +
                              std::to_string(predicted.size()) + " vs " + std::to_string(ground_truth.size()) + ")");
    }
    if (predicted.points.empty()) {
        throw ValidationError("pck: empty keypoint set");
    }
    PckResult r;
    r.alpha = alpha;
    r.total = predicted.size();
    r.threshold_px = alpha * std::max(bbox.height(), bbox.width());
    for (std::size_t k = 0; k < r.total; ++k) {
        const double err = std::hypot(predicted.points[k].x - ground_truth.points[k].x,
                                      predicted.points[k].y - ground_truth.points[k].y);
        if (err <= r.threshold_px) ++r.correct;
    }
    r.pck = static_cast<double>(r.correct) / static_cast<double>(r.total);
    return r;
}

inline PckResult pck(const KeypointSet& predicted, const KeypointSet& ground_truth, double alpha) {
    return pck(predicted, ground_truth, ground_truth.bbox, alpha);
}

// Moves every masked source pixel by the flow of its containing feature cell;
// landing positions are rounded to the nearest pixel and clipped to the image.
inline BinaryMask warp_mask(const DenseFlow& flow, const BinaryMask& src_mask) {
    const GridGeometry& g = flow.grid;
    if (std::abs(g.stride * g.height - src_mask.height) > 0.5 || std::abs(g.stride * g.width - src_mask.width) > 0.5) {
        throw ShapeError("warp_mask: mask is " + std::to_string(src_mask.height) + "x" +
                         std::to_string(src_mask.width) + " but the flow grid covers " +
                         std::to_string(g.stride * g.height) + "x" + std::to_string(g.stride * g.width));
    }
    BinaryMask out(src_mask.height, src_mask.width);
    for (std::uint32_t y = 0; y < src_mask.height; ++y) {
        const auto iy = std::min<std::size_t>(static_cast<std::size_t>(y / g.stride), g.height - 1);
        for (std::uint32_t x = 0; x < src_mask.width; ++x) {
            if (!src_mask.at(y, x)) continue;
            const auto ix = std::min<std::size_t>(static_cast<std::size_t>(x / g.stride), g.width - 1);
            const Point2 d = flow.at(ix, iy);
            const long tx = std::lround(x + d.x);
            const long ty = std::lround(y + d.y);
            if (tx < 0 || ty < 0 || tx >= static_cast<long>(out.width) || ty >= static_cast<long>(out.height)) continue;
            out.at(static_cast<std::size_t>(ty), static_cast<std::size_t>(tx)) = 1;
        }
    }
    return out;
}

struct MaskMetrics {
    double lt_acc = 0.0;
    double iou = 0.0;
};

inline MaskMetrics mask_metrics(const BinaryMask& warped, const BinaryMask& target_gt) {
    if (warped.height != target_gt.height || warped.width != target_gt.width) {
        throw ShapeError("mask_metrics: mask dimensions differ");
    }
    std::size_t agree = 0, inter = 0, uni = 0;
    for (std::size_t i = 0; i < warped.pixels.size(); ++i) {
        const bool a = warped.pixels[i] != 0, b = target_gt.pixels[i] != 0;
        agree += a == b;
        inter += a && b;
        uni += a || b;
    }
    MaskMetrics m;
    m.lt_acc = warped.pixels.empty() ? 1.0 : static_cast<double>(agree) / static_cast<double>(warped.pixels.size());
    m.iou = uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
    return m;
}

}  // namespace scalesel
