#pragma once

// FPYR binary pyramids and the JSON keypoint/mask annotation documents.
//
// FPYR layout (little-endian):
//   "FPYR" | u32 version=1 | u32 image_height | u32 image_width | u32 N | u32 d_g
//   f32[d_g] global descriptor
//   N x ( u32 layer_index | u32 c | u32 h | u32 w | f32 stride | f32[c*h*w] data )

#include <scalesel/error.hpp>
#include <scalesel/feature_pyramid.hpp>

#include <nlohmann/json.hpp>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

namespace scalesel {

inline constexpr std::array<char, 4> kPyramidMagic{'F', 'P', 'Y', 'R'};
inline constexpr std::uint32_t kPyramidVersion = 1;

namespace detail {

class ByteWriter {
public:
    void bytes(const char* p, std::size_t n) { buf_.insert(buf_.end(), p, p + n); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) {
            buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
        }
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    const std::vector<char>& buffer() const { return buf_; }

private:
    std::vector<char> buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::span<const char> data) : data_(data) {}

    void need(std::size_t n, const char* what) const {
        if (data_.size() - pos_ < n) {
            throw TruncationError(std::string("truncated payload while reading ") + what + " (need " +
                                  std::to_string(n) + " bytes, " + std::to_string(data_.size() - pos_) + " left)");
        }
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        }
        pos_ += 4;
        return v;
    }
    float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
    std::span<const char> take(std::size_t n, const char* what) {
        need(n, what);
        auto s = data_.subspan(pos_, n);
        pos_ += n;
        return s;
    }
    std::size_t remaining() const { return data_.size() - pos_; }

private:
    std::span<const char> data_;
    std::size_t pos_ = 0;
};

inline std::vector<char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::span<const char> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw IoError("write failed: " + path.string());
    }
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    write_file(path, std::span<const char>(text.data(), text.size()));
}

}  // namespace detail

inline std::vector<char> encode_pyramid(const FeaturePyramid& pyr) {
    validate_pyramid(pyr);
    detail::ByteWriter w;
    w.bytes(kPyramidMagic.data(), kPyramidMagic.size());
    w.u32(kPyramidVersion);
    w.u32(pyr.image_height);
    w.u32(pyr.image_width);
    w.u32(static_cast<std::uint32_t>(pyr.levels.size()));
    w.u32(static_cast<std::uint32_t>(pyr.global_descriptor.size()));
    for (float v : pyr.global_descriptor) {
        w.f32(v);
    }
    for (const FeatureMap& m : pyr.levels) {
        w.u32(m.layer_index);
        w.u32(m.channels);
        w.u32(m.height);
        w.u32(m.width);
        w.f32(m.stride);
        for (float v : m.data) {
            w.f32(v);
        }
    }
    return w.buffer();
}

inline FeaturePyramid decode_pyramid(std::span<const char> bytes) {
    detail::ByteReader r(bytes);
    if (bytes.size() < 4 || !std::equal(kPyramidMagic.begin(), kPyramidMagic.end(), bytes.begin())) {
        throw FormatError("not an FPYR file (bad magic)");
    }
    r.take(4, "magic");
    const std::uint32_t version = r.u32("version");
    if (version != kPyramidVersion) {
        throw FormatError("unsupported FPYR version " + std::to_string(version));
    }
    FeaturePyramid pyr;
    pyr.image_height = r.u32("image_height");
    pyr.image_width = r.u32("image_width");
    const std::uint32_t n = r.u32("level count");
    const std::uint32_t dg = r.u32("global descriptor length");
    r.need(std::size_t{dg} * 4, "global descriptor");
    pyr.global_descriptor.resize(dg);
    for (auto& v : pyr.global_descriptor) {
        v = r.f32("global descriptor");
    }
    for (std::uint32_t i = 0; i < n; ++i) {
        FeatureMap m;
        m.layer_index = r.u32("layer_index");
        m.channels = r.u32("channels");
        m.height = r.u32("height");
        m.width = r.u32("width");
        m.stride = r.f32("stride");
        const std::size_t count = std::size_t{m.channels} * m.height * m.width;
        r.need(count * 4, "level data");
        m.data.resize(count);
        for (auto& v : m.data) {
            v = r.f32("level data");
        }
        pyr.levels.push_back(std::move(m));
    }
    if (r.remaining() != 0) {
        throw FormatError("FPYR payload has " + std::to_string(r.remaining()) + " trailing bytes");
    }
    validate_pyramid(pyr);
    return pyr;
}

inline FeaturePyramid load_pyramid(const std::filesystem::path& path) {
    const auto bytes = detail::read_file(path);
    return decode_pyramid(bytes);
}

inline void save_pyramid(const FeaturePyramid& pyr, const std::filesystem::path& path) {
    const auto bytes = encode_pyramid(pyr);
    detail::write_file(path, bytes);
}

// ---------------------------------------------------------------------------
// Annotations: {"points": [[x,y],...], "bbox": [x0,y0,x1,y1],
//               "mask": {"height": H, "width": W, "rows": [[start, len, start, len, ...], ...]}}

inline nlohmann::json mask_to_json(const BinaryMask& mask) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::uint32_t y = 0; y < mask.height; ++y) {
        nlohmann::json runs = nlohmann::json::array();
        std::uint32_t x = 0;
        while (x < mask.width) {
            if (mask.at(y, x) == 0) {
                ++x;
                continue;
            }
            const std::uint32_t start = x;
            while (x < mask.width && mask.at(y, x) != 0) {
                ++x;
            }
            runs.push_back(start);
            runs.push_back(x - start);
        }
        rows.push_back(std::move(runs));
    }
    return {{"height", mask.height}, {"width", mask.width}, {"rows", std::move(rows)}};
}

inline BinaryMask mask_from_json(const nlohmann::json& j) {
    try {
        BinaryMask mask(j.at("height").get<std::uint32_t>(), j.at("width").get<std::uint32_t>());
        const auto& rows = j.at("rows");
        if (rows.size() != mask.height) {
            throw ValidationError("mask has " + std::to_string(rows.size()) + " rows, expected " +
                                  std::to_string(mask.height));
        }
        for (std::uint32_t y = 0; y < mask.height; ++y) {
            const auto& runs = rows[y];
            if (runs.size() % 2 != 0) {
                throw ValidationError("mask row " + std::to_string(y) + " has an odd run list");
            }
            for (std::size_t k = 0; k < runs.size(); k += 2) {
                const auto start = runs[k].get<std::uint32_t>();
                const auto len = runs[k + 1].get<std::uint32_t>();
                if (std::uint64_t{start} + len > mask.width) {
                    throw ValidationError("mask row " + std::to_string(y) + " run exceeds width");
                }
                std::fill_n(mask.pixels.begin() + std::size_t{y} * mask.width + start, len, std::uint8_t{1});
            }
        }
        return mask;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed mask JSON: ") + e.what());
    }
}

struct Annotation {
    KeypointSet keypoints;
    std::optional<BinaryMask> mask;
};

inline nlohmann::json annotation_to_json(const KeypointSet& kps, const std::optional<BinaryMask>& mask) {
    nlohmann::json points = nlohmann::json::array();
    for (const Point2& p : kps.points) {
        points.push_back({p.x, p.y});
    }
    nlohmann::json j = {{"points", std::move(points)},
                        {"bbox", {kps.bbox.x_min, kps.bbox.y_min, kps.bbox.x_max, kps.bbox.y_max}}};
    if (mask) {
        j["mask"] = mask_to_json(*mask);
    }
    return j;
}

inline Annotation annotation_from_json(const nlohmann::json& j) {
    Annotation a;
    try {
        for (const auto& p : j.at("points")) {
            if (p.size() != 2) {
                throw ValidationError("keypoint entries must be [x, y]");
            }
            a.keypoints.points.push_back({p[0].get<double>(), p[1].get<double>()});
        }
        const auto& b = j.at("bbox");
        if (b.size() != 4) {
            throw ValidationError("bbox must be [x0, y0, x1, y1]");
        }
        a.keypoints.bbox = {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
        if (j.contains("mask") && !j.at("mask").is_null()) {
            a.mask = mask_from_json(j.at("mask"));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed annotation JSON: ") + e.what());
    }
    return a;
}

inline Annotation load_annotation(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    return annotation_from_json(j);
}

inline void save_annotation(const KeypointSet& kps, const std::optional<BinaryMask>& mask,
                            const std::filesystem::path& path) {
    detail::write_text(path, annotation_to_json(kps, mask).dump() + "\n");
}

// A pair on disk: <dir>/source.fpyr, target.fpyr, source.json, target.json.
inline void save_pair(const ImagePair& pair, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    save_pyramid(pair.source, dir / "source.fpyr");
    save_pyramid(pair.target, dir / "target.fpyr");
    save_annotation(pair.src_keypoints, pair.src_mask, dir / "source.json");
    save_annotation(pair.tgt_keypoints, pair.tgt_mask, dir / "target.json");
}

inline ImagePair load_pair(const std::filesystem::path& dir) {
    ImagePair pair;
    pair.source = load_pyramid(dir / "source.fpyr");
    pair.target = load_pyramid(dir / "target.fpyr");
    auto src = load_annotation(dir / "source.json");
    auto tgt = load_annotation(dir / "target.json");
    pair.src_keypoints = std::move(src.keypoints);
    pair.tgt_keypoints = std::move(tgt.keypoints);
    pair.src_mask = std::move(src.mask);
    pair.tgt_mask = std::move(tgt.mask);
    validate_pair(pair);
    return pair;
}

}  // namespace scalesel
