#pragma once

// Synthetic scenes (shapes on low-frequency backgrounds) and the image and
// annotation file formats shared by the rest of the project.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rap/binary_io.hpp"
#include "rap/box.hpp"
#include "rap/random.hpp"

namespace rap {

/// H x W x 3 image, channel-interleaved, values in [0,255].
struct Image {
    static constexpr std::size_t channels = 3;

    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> pixels;

    Image() = default;
    Image(std::size_t h, std::size_t w, double fill = 0.0)
        : height(h), width(w), pixels(h * w * channels, fill) {}

    double& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
    double at(std::size_t y, std::size_t x, std::size_t c) const {
        return pixels[(y * width + x) * channels + c];
    }

    bool same_shape(const Image& o) const { return height == o.height && width == o.width; }

    friend bool operator==(const Image&, const Image&) = default;
};

inline Image clip_to_range(Image img) {
    for (double& v : img.pixels) {
        v = std::clamp(v, 0.0, 255.0);
    }
    return img;
}

struct Scene {
    std::uint64_t id = 0;
    std::uint64_t seed = 0;
    Image image;
    GroundTruth truth;
};

struct GeometryConfig {
    std::size_t height = 64;
    std::size_t width = 64;
    std::size_t min_side = 12;
    std::size_t max_side = 40;
    std::size_t border_margin = 6;
    std::size_t min_shapes = 1;
    std::size_t max_shapes = 5;
    /// Placement retries per shape before settling for fewer shapes.
    std::size_t placement_attempts = 60;
    /// Upper bound on the IoU between any two shapes' nominal boxes.
    double max_overlap = 0.1;

    void validate() const {
        auto fail = [](const std::string& why) {
            throw std::invalid_argument("geometry config: " + why);
        };
        if (height == 0 || width == 0) fail("image dimensions must be positive");
        if (min_side == 0 || min_side > max_side) fail("need 0 < min_side <= max_side");
        if (max_side > height || max_side > width) fail("max_side does not fit inside the image");
        if (2 * border_margin >= height || 2 * border_margin >= width) fail("border margin leaves no room");
        if (min_shapes == 0 || min_shapes > max_shapes) fail("need 1 <= min_shapes <= max_shapes");
        if (max_overlap < 0.0 || max_overlap > 1.0) fail("max_overlap must lie in [0,1]");
    }
};

enum class ShapeKind { Rectangle, Ellipse, Triangle };

namespace detail {

inline double overlap_iou(const Box& a, const Box& b) {
    double iw = std::min(a.right(), b.right()) - std::max(a.left(), b.left());
    double ih = std::min(a.bottom(), b.bottom()) - std::max(a.top(), b.top());
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    double inter = iw * ih;
    return inter / (a.w * a.h + b.w * b.h - inter);
}

struct ShapeSpec {
    ShapeKind kind;
    double x0, y0, x1, y1;  // nominal extent
    double apex;            // triangle apex x
    std::array<double, 3> color;

    bool covers(double px, double py) const {
        switch (kind) {
            case ShapeKind::Rectangle:
                return px >= x0 && px < x1 && py >= y0 && py < y1;
            case ShapeKind::Ellipse: {
                double rx = 0.5 * (x1 - x0), ry = 0.5 * (y1 - y0);
                double dx = (px - 0.5 * (x0 + x1)) / rx, dy = (py - 0.5 * (y0 + y1)) / ry;
                return dx * dx + dy * dy <= 1.0;
            }
            case ShapeKind::Triangle: {
                // Base along y1 from x0 to x1, apex at (apex, y0).
                auto edge = [&](double ax, double ay, double bx, double by) {
                    return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
                };
                double e0 = edge(x0, y1, x1, y1);
                double e1 = edge(x1, y1, apex, y0);
                double e2 = edge(apex, y0, x0, y1);
                bool neg = e0 < 0 || e1 < 0 || e2 < 0;
                bool pos = e0 > 0 || e1 > 0 || e2 > 0;
                return !(neg && pos);
            }
        }
        return false;
    }
};

}  // namespace detail

/// Renders scene `scene_id` of the stream keyed by `seed`. Depends only on
/// (seed, scene_id, geometry).
inline Scene generate_scene(std::uint64_t seed, std::uint64_t scene_id, const GeometryConfig& geo) {
    geo.validate();
    KeyedRng rng{0x5343454eULL, seed, scene_id};
    Scene scene;
    scene.id = scene_id;
    scene.seed = seed;
    const std::size_t H = geo.height, W = geo.width;
    Image img(H, W);

    // Background: a coarse random lattice per channel, bilinearly upsampled.
    constexpr std::size_t lattice = 5;
    std::array<std::array<double, lattice * lattice>, 3> grid{};
    for (auto& ch : grid) {
        for (double& v : ch) v = rng.uniform(20.0, 120.0);
    }
    for (std::size_t y = 0; y < H; ++y) {
        double gy = (y + 0.5) / H * (lattice - 1);
        auto iy = std::min<std::size_t>(static_cast<std::size_t>(gy), lattice - 2);
        double fy = gy - iy;
        for (std::size_t x = 0; x < W; ++x) {
            double gx = (x + 0.5) / W * (lattice - 1);
            auto ix = std::min<std::size_t>(static_cast<std::size_t>(gx), lattice - 2);
            double fx = gx - ix;
            for (std::size_t c = 0; c < 3; ++c) {
                const auto& g = grid[c];
                double v = (1 - fy) * ((1 - fx) * g[iy * lattice + ix] + fx * g[iy * lattice + ix + 1]) +
                           fy * ((1 - fx) * g[(iy + 1) * lattice + ix] + fx * g[(iy + 1) * lattice + ix + 1]);
                img.at(y, x, c) = v;
            }
        }
    }

    auto wanted = static_cast<std::size_t>(rng.integer(geo.min_shapes, geo.max_shapes));
    std::vector<detail::ShapeSpec> shapes;
    std::vector<Box> nominal;
    for (std::size_t s = 0; s < wanted; ++s) {
        for (std::size_t attempt = 0; attempt < geo.placement_attempts; ++attempt) {
            auto kind = static_cast<ShapeKind>(rng.integer(0, 2));
            auto w = static_cast<double>(rng.integer(geo.min_side, geo.max_side));
            auto h = static_cast<double>(rng.integer(geo.min_side, geo.max_side));
            // Center at least border_margin from every edge and the shape inside the image.
            double mx = std::max<double>(geo.border_margin, std::ceil(w / 2));
            double my = std::max<double>(geo.border_margin, std::ceil(h / 2));
            double cx = static_cast<double>(rng.integer(static_cast<std::int64_t>(mx),
                                                        static_cast<std::int64_t>(W - mx)));
            double cy = static_cast<double>(rng.integer(static_cast<std::int64_t>(my),
                                                        static_cast<std::int64_t>(H - my)));
            double x0 = std::floor(cx - w / 2), y0 = std::floor(cy - h / 2);
            Box candidate = Box::from_corners(x0, y0, x0 + w, y0 + h);
            double apex = rng.uniform(x0, x0 + w);
            std::array<double, 3> color{};
            for (double& c : color) c = rng.uniform(0.0, 255.0);
            color[static_cast<std::size_t>(rng.integer(0, 2))] = rng.uniform(170.0, 255.0);

            bool clash = std::any_of(nominal.begin(), nominal.end(), [&](const Box& b) {
                return detail::overlap_iou(b, candidate) > geo.max_overlap;
            });
            if (clash) continue;
            shapes.push_back({kind, x0, y0, x0 + w, y0 + h, apex, color});
            nominal.push_back(candidate);
            break;
        }
    }
    if (shapes.size() < geo.min_shapes) {
        throw std::runtime_error("scene " + std::to_string(scene_id) + ": could not place " +
                                 std::to_string(geo.min_shapes) + " shapes");
    }

    // Later shapes paint over earlier ones; every box is the tight extent of
    // its shape's full coverage mask.
    for (const auto& sh : shapes) {
        std::size_t bx0 = W, by0 = H, bx1 = 0, by1 = 0;
        for (std::size_t y = 0; y < H; ++y) {
            for (std::size_t x = 0; x < W; ++x) {
                if (!sh.covers(x + 0.5, y + 0.5)) continue;
                for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = sh.color[c];
                bx0 = std::min(bx0, x);
                by0 = std::min(by0, y);
                bx1 = std::max(bx1, x + 1);
                by1 = std::max(by1, y + 1);
            }
        }
        if (bx1 <= bx0 || by1 <= by0) {
            throw std::runtime_error("scene " + std::to_string(scene_id) + ": degenerate shape");
        }
        scene.truth.boxes.push_back(Box::from_corners(static_cast<double>(bx0), static_cast<double>(by0),
                                                      static_cast<double>(bx1), static_cast<double>(by1)));
    }
    for (double& v : img.pixels) v = std::round(v);
    scene.image = std::move(img);
    return scene;
}

/// Scenes first_id .. first_id+count-1 of the stream keyed by `seed`.
inline std::vector<Scene> generate_dataset(std::uint64_t seed, std::size_t count, const GeometryConfig& geo,
                                           std::uint64_t first_id = 0) {
    if (count == 0) {
        throw std::invalid_argument("generate_dataset: count must be positive");
    }
    geo.validate();
    std::vector<Scene> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        out.push_back(generate_scene(seed, first_id + i, geo));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Image files

inline std::vector<std::uint8_t> encode_ppm(const Image& img) {
    for (double v : img.pixels) {
        if (!(v >= 0.0 && v <= 255.0)) {
            throw std::invalid_argument("write_ppm: pixel value out of [0,255]: " + std::to_string(v));
        }
    }
    std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.reserve(out.size() + img.pixels.size());
    for (double v : img.pixels) {
        out.push_back(static_cast<std::uint8_t>(std::lround(v)));
    }
    return out;
}

inline Image decode_ppm(const std::vector<std::uint8_t>& data) {
    std::size_t pos = 0;
    auto fail = [&](const std::string& why) -> void { throw io::FormatError("ppm: " + why, pos); };
    auto skip_space = [&] {
        while (pos < data.size()) {
            if (data[pos] == '#') {
                while (pos < data.size() && data[pos] != '\n') ++pos;
            } else if (std::isspace(data[pos])) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto number = [&]() -> std::size_t {
        skip_space();
        if (pos >= data.size() || !std::isdigit(data[pos])) fail("expected a decimal number");
        std::size_t v = 0;
        while (pos < data.size() && std::isdigit(data[pos])) {
            v = v * 10 + (data[pos] - '0');
            if (v > 1'000'000) fail("header value too large");
            ++pos;
        }
        return v;
    };
    if (data.size() < 2 || data[0] != 'P' || data[1] != '6') fail("missing P6 magic");
    pos = 2;
    std::size_t width = number();
    std::size_t height = number();
    std::size_t maxval = number();
    if (width == 0 || height == 0) fail("zero image dimension");
    if (maxval != 255) fail("unsupported maxval " + std::to_string(maxval));
    if (pos >= data.size() || !std::isspace(data[pos])) fail("missing whitespace after header");
    ++pos;
    std::size_t n = width * height * 3;
    if (data.size() - pos < n) {
        fail("truncated payload: need " + std::to_string(n) + " bytes, " + std::to_string(data.size() - pos) +
             " left");
    }
    Image img(height, width);
    for (std::size_t i = 0; i < n; ++i) img.pixels[i] = data[pos + i];
    return img;
}

namespace detail {

inline std::vector<std::uint8_t> encode_raw(std::string_view magic, std::size_t h, std::size_t w,
                                            const std::vector<double>& values) {
    io::Writer out;
    out.bytes(magic);
    out.u32(static_cast<std::uint32_t>(h));
    out.u32(static_cast<std::uint32_t>(w));
    out.u32(Image::channels);
    for (double v : values) out.f64(v);
    return out.data();
}

inline Image decode_raw(std::string_view magic, const std::vector<std::uint8_t>& data) {
    io::Reader in(data);
    in.expect(magic);
    std::size_t h = in.u32();
    std::size_t w = in.u32();
    std::size_t c = in.u32();
    if (h == 0 || w == 0) throw io::FormatError("raw image: zero dimension", in.offset());
    if (c != Image::channels) {
        throw io::FormatError("raw image: expected 3 channels, got " + std::to_string(c), in.offset());
    }
    in.need(h * w * c * 8, "pixel payload");
    Image img(h, w);
    for (double& v : img.pixels) v = in.f64();
    if (!in.at_end()) throw io::FormatError("raw image: trailing bytes", in.offset());
    return img;
}

}  // namespace detail

inline constexpr std::string_view kRawImageMagic = "RAPI";

inline void write_image(const std::filesystem::path& path, const Image& img) {
    if (path.extension() == ".rawimg") {
        for (double v : img.pixels) {
            if (!(v >= 0.0 && v <= 255.0)) {
                throw std::invalid_argument("write_image: pixel value out of [0,255]: " + std::to_string(v));
            }
        }
        io::write_file(path, detail::encode_raw(kRawImageMagic, img.height, img.width, img.pixels));
    } else {
        io::write_file(path, encode_ppm(img));
    }
}

/// Reads .rawimg (lossless) or binary PPM, chosen by extension.
inline Image read_image(const std::filesystem::path& path) {
    auto data = io::read_file(path);
    if (path.extension() == ".rawimg") {
        return detail::decode_raw(kRawImageMagic, data);
    }
    return decode_ppm(data);
}

// ---------------------------------------------------------------------------
// Annotations: {"<scene-id>": [{"x":..,"y":..,"w":..,"h":..}, ...], ...}

using Annotations = std::map<std::string, GroundTruth>;

inline nlohmann::json annotations_to_json(const Annotations& truths) {
    nlohmann::json root = nlohmann::json::object();
    for (const auto& [id, gt] : truths) {
        auto arr = nlohmann::json::array();
        for (const auto& b : gt.boxes) {
            arr.push_back({{"x", b.x}, {"y", b.y}, {"w", b.w}, {"h", b.h}});
        }
        root[id] = std::move(arr);
    }
    return root;
}

inline Annotations annotations_from_json(const nlohmann::json& root) {
    if (!root.is_object()) throw std::invalid_argument("annotations: top level must be an object");
    Annotations out;
    for (const auto& [id, arr] : root.items()) {
        if (!arr.is_array()) throw std::invalid_argument("annotations: scene " + id + " is not a list");
        GroundTruth gt;
        for (const auto& obj : arr) {
            Box b;
            for (auto [key, field] : {std::pair{"x", &b.x}, {"y", &b.y}, {"w", &b.w}, {"h", &b.h}}) {
                if (!obj.is_object() || !obj.contains(key) || !obj[key].is_number()) {
                    throw std::invalid_argument("annotations: scene " + id + " has a box without numeric \"" +
                                                key + "\"");
                }
                *field = obj[key].get<double>();
            }
            if (!(b.w > 0.0) || !(b.h > 0.0)) {
                throw std::invalid_argument("annotations: scene " + id + " has a box with non-positive size");
            }
            gt.boxes.push_back(b);
        }
        out.emplace(id, std::move(gt));
    }
    return out;
}

inline void write_annotations(const std::filesystem::path& path, const Annotations& truths) {
    auto text = annotations_to_json(truths).dump(1);
    io::write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

inline Annotations read_annotations(const std::filesystem::path& path) {
    auto bytes = io::read_file(path);
    nlohmann::json root;
    try {
        root = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::parse_error& e) {
        throw io::FormatError(std::string("annotations: ") + e.what(), e.byte);
    }
    return annotations_from_json(root);
}

inline std::string scene_key(std::uint64_t id) { return std::to_string(id); }

}  // namespace rap
