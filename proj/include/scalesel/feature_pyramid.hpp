#pragma once

#include <scalesel/error.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace scalesel {

// Regular grid of feature cells laid over an image. Cell (ix, iy) covers a
// stride x stride receptive field centred at ((ix + 0.5) * stride, (iy + 0.5) * stride).
struct GridGeometry {
    std::uint32_t height = 0;
    std::uint32_t width = 0;
    double stride = 1.0;

    std::size_t positions() const { return std::size_t{height} * width; }
    double center_x(std::size_t ix) const { return (static_cast<double>(ix) + 0.5) * stride; }
    double center_y(std::size_t iy) const { return (static_cast<double>(iy) + 0.5) * stride; }
    double center_x_of(std::size_t pos) const { return center_x(pos % width); }
    double center_y_of(std::size_t pos) const { return center_y(pos / width); }

    bool operator==(const GridGeometry&) const = default;
};

// One level of a feature pyramid. Data is channel-major, row-major within a channel.
struct FeatureMap {
    std::uint32_t layer_index = 0;
    std::uint32_t channels = 0;
    std::uint32_t height = 0;
    std::uint32_t width = 0;
    float stride = 1.0f;
    std::vector<float> data;

    std::size_t positions() const { return std::size_t{height} * width; }
    std::size_t index(std::size_t c, std::size_t y, std::size_t x) const {
        return (c * height + y) * width + x;
    }
    float at(std::size_t c, std::size_t y, std::size_t x) const { return data[index(c, y, x)]; }
    float& at(std::size_t c, std::size_t y, std::size_t x) { return data[index(c, y, x)]; }
    GridGeometry geometry() const { return {height, width, static_cast<double>(stride)}; }

    bool operator==(const FeatureMap&) const = default;
};

struct FeaturePyramid {
    std::uint32_t image_height = 0;
    std::uint32_t image_width = 0;
    std::vector<FeatureMap> levels;
    std::vector<float> global_descriptor;

    std::size_t num_levels() const { return levels.size(); }

    bool operator==(const FeaturePyramid&) const = default;
};

struct Point2 {
    double x = 0.0;
    double y = 0.0;

    bool operator==(const Point2&) const = default;
};

struct BoundingBox {
    double x_min = 0.0;
    double y_min = 0.0;
    double x_max = 0.0;
    double y_max = 0.0;

    double width() const { return x_max - x_min; }
    double height() const { return y_max - y_min; }

    bool operator==(const BoundingBox&) const = default;
};

struct KeypointSet {
    std::vector<Point2> points;
    BoundingBox bbox;

    std::size_t size() const { return points.size(); }

    bool operator==(const KeypointSet&) const = default;
};

// Binary label image, row-major, one byte per pixel (0 or 1).
struct BinaryMask {
    std::uint32_t height = 0;
    std::uint32_t width = 0;
    std::vector<std::uint8_t> pixels;

    BinaryMask() = default;
    BinaryMask(std::uint32_t h, std::uint32_t w) : height(h), width(w), pixels(std::size_t{h} * w, 0) {}

    std::uint8_t at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
    std::uint8_t& at(std::size_t y, std::size_t x) { return pixels[y * width + x]; }
    std::size_t count() const {
        return static_cast<std::size_t>(std::count(pixels.begin(), pixels.end(), std::uint8_t{1}));
    }

    bool operator==(const BinaryMask&) const = default;
};

struct ImagePair {
    FeaturePyramid source;
    FeaturePyramid target;
    KeypointSet src_keypoints;
    KeypointSet tgt_keypoints;
    std::optional<BinaryMask> src_mask;
    std::optional<BinaryMask> tgt_mask;

    std::size_t num_levels() const { return source.num_levels(); }

    bool operator==(const ImagePair&) const = default;
};

// ---------------------------------------------------------------------------
// Validation

inline void validate_map(const FeatureMap& map) {
    if (map.channels < 1 || map.height < 1 || map.width < 1) {
        throw ValidationError("feature map " + std::to_string(map.layer_index) + " has an empty dimension");
    }
    if (!(map.stride > 0.0f) || !std::isfinite(map.stride)) {
        throw ValidationError("feature map " + std::to_string(map.layer_index) + " has non-positive stride");
    }
    if (map.data.size() != std::size_t{map.channels} * map.height * map.width) {
        throw ValidationError("feature map " + std::to_string(map.layer_index) + " data length " +
                              std::to_string(map.data.size()) + " != c*h*w");
    }
    for (float v : map.data) {
        if (!std::isfinite(v)) {
            throw ValidationError("feature map " + std::to_string(map.layer_index) + " contains a non-finite value");
        }
    }
}

inline void validate_pyramid(const FeaturePyramid& pyr) {
    if (pyr.levels.size() < 2) {
        throw ValidationError("feature pyramid needs at least 2 levels, got " + std::to_string(pyr.levels.size()));
    }
    for (std::size_t i = 0; i < pyr.levels.size(); ++i) {
        const FeatureMap& m = pyr.levels[i];
        validate_map(m);
        if (i > 0 && m.layer_index <= pyr.levels[i - 1].layer_index) {
            throw ValidationError("pyramid levels must be strictly ascending by layer_index");
        }
        if (m.layer_index != i) {
            throw ValidationError("pyramid layer_index values must be 0..N-1");
        }
        const double s = m.stride;
        if (std::abs(s * m.height - pyr.image_height) > 0.5 || std::abs(s * m.width - pyr.image_width) > 0.5) {
            throw ValidationError("level " + std::to_string(i) + ": stride*h / stride*w disagree with image size");
        }
    }
    for (float v : pyr.global_descriptor) {
        if (!std::isfinite(v)) {
            throw ValidationError("global descriptor contains a non-finite value");
        }
    }
}

inline void validate_keypoints(const KeypointSet& kps, std::uint32_t image_height, std::uint32_t image_width) {
    if (!(kps.bbox.width() > 0.0) || !(kps.bbox.height() > 0.0)) {
        throw ValidationError("keypoint bounding box must have positive width and height");
    }
    for (const Point2& p : kps.points) {
        if (!(p.x >= 0.0 && p.x <= image_width && p.y >= 0.0 && p.y <= image_height)) {
            throw ValidationError("keypoint (" + std::to_string(p.x) + ", " + std::to_string(p.y) +
                                  ") lies outside the image");
        }
    }
}

inline void validate_pair(const ImagePair& pair) {
    validate_pyramid(pair.source);
    validate_pyramid(pair.target);
    if (pair.source.num_levels() != pair.target.num_levels()) {
        throw ValidationError("source and target pyramids have different level counts");
    }
    for (std::size_t i = 0; i < pair.source.num_levels(); ++i) {
        const FeatureMap& a = pair.source.levels[i];
        const FeatureMap& b = pair.target.levels[i];
        if (a.channels != b.channels || a.stride != b.stride) {
            throw ValidationError("level " + std::to_string(i) + " differs in channels or stride between source and target");
        }
    }
    if (pair.source.global_descriptor.size() != pair.target.global_descriptor.size()) {
        throw ValidationError("source and target global descriptors differ in length");
    }
    if (pair.src_keypoints.size() != pair.tgt_keypoints.size()) {
        throw ValidationError("source and target keypoint sets differ in cardinality");
    }
    validate_keypoints(pair.src_keypoints, pair.source.image_height, pair.source.image_width);
    validate_keypoints(pair.tgt_keypoints, pair.target.image_height, pair.target.image_width);
}

// ---------------------------------------------------------------------------
// Resizing and concatenation

// Bilinear upsampling with corner-aligned sampling: output sample o maps to
// input coordinate o * (in - 1) / (out - 1).
inline FeatureMap upsample(const FeatureMap& map, std::uint32_t out_h, std::uint32_t out_w) {
    if (out_h < map.height || out_w < map.width) {
        throw UnsupportedError("upsample cannot shrink a feature map (" + std::to_string(map.height) + "x" +
                               std::to_string(map.width) + " -> " + std::to_string(out_h) + "x" +
                               std::to_string(out_w) + ")");
    }
    if (out_h == map.height && out_w == map.width) {
        return map;
    }

    auto axis = [](std::uint32_t in, std::uint32_t out, std::uint32_t o, std::uint32_t& i0, std::uint32_t& i1,
                   double& t) {
        const double src = out > 1 ? static_cast<double>(o) * (in - 1) / (out - 1) : 0.0;
        i0 = std::min(static_cast<std::uint32_t>(std::floor(src)), in - 1);
        i1 = std::min(i0 + 1, in - 1);
        t = src - i0;
    };

    FeatureMap out;
    out.layer_index = map.layer_index;
    out.channels = map.channels;
    out.height = out_h;
    out.width = out_w;
    out.stride = static_cast<float>(static_cast<double>(map.stride) * map.height / out_h);
    out.data.resize(std::size_t{map.channels} * out_h * out_w);

    for (std::uint32_t oy = 0; oy < out_h; ++oy) {
        std::uint32_t y0, y1;
        double ty;
        axis(map.height, out_h, oy, y0, y1, ty);
        for (std::uint32_t ox = 0; ox < out_w; ++ox) {
            std::uint32_t x0, x1;
            double tx;
            axis(map.width, out_w, ox, x0, x1, tx);
            for (std::uint32_t c = 0; c < map.channels; ++c) {
                const double top = (1.0 - tx) * map.at(c, y0, x0) + tx * map.at(c, y0, x1);
                const double bot = (1.0 - tx) * map.at(c, y1, x0) + tx * map.at(c, y1, x1);
                out.at(c, oy, ox) = static_cast<float>((1.0 - ty) * top + ty * bot);
            }
        }
    }
    return out;
}

// Stacks maps along the channel axis. With normalize_per_level, each input's
// per-position descriptor is scaled to unit L2 norm first (zero vectors stay zero).
inline FeatureMap concat_channels(std::span<const FeatureMap> maps, bool normalize_per_level = true) {
    if (maps.empty()) {
        throw EmptySelectionError("concat_channels needs at least one map");
    }
    const FeatureMap& ref = maps.front();
    std::uint32_t total_channels = 0;
    for (const FeatureMap& m : maps) {
        if (m.height != ref.height || m.width != ref.width ||
            std::abs(m.stride - ref.stride) > 1e-4f * ref.stride) {
            throw ShapeError("concat_channels: spatial dims differ (" + std::to_string(m.height) + "x" +
                             std::to_string(m.width) + " vs " + std::to_string(ref.height) + "x" +
                             std::to_string(ref.width) + ")");
        }
        total_channels += m.channels;
    }

    FeatureMap out;
    out.layer_index = ref.layer_index;
    out.channels = total_channels;
    out.height = ref.height;
    out.width = ref.width;
    out.stride = ref.stride;
    out.data.resize(std::size_t{total_channels} * ref.positions());

    const std::size_t plane = ref.positions();
    std::size_t channel_offset = 0;
    for (const FeatureMap& m : maps) {
        for (std::size_t pos = 0; pos < plane; ++pos) {
            double scale = 1.0;
            if (normalize_per_level) {
                double sq = 0.0;
                for (std::size_t c = 0; c < m.channels; ++c) {
                    const double v = m.data[c * plane + pos];
                    sq += v * v;
                }
                scale = sq > 0.0 ? 1.0 / std::sqrt(sq) : 0.0;
            }
            for (std::size_t c = 0; c < m.channels; ++c) {
                out.data[(channel_offset + c) * plane + pos] = static_cast<float>(m.data[c * plane + pos] * scale);
            }
        }
        channel_offset += m.channels;
    }
    return out;
}

}  // namespace scalesel
