#pragma once

// Image files (8-bit PNG, PPM P6), stroke-set and path documents, run configs.

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "canvas.hpp"
#include "error.hpp"
#include "geometry.hpp"
#include "losses.hpp"
#include "optim.hpp"

namespace brushfit {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Images

inline std::uint8_t quantize(double v) {
    return static_cast<std::uint8_t>(std::floor(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5));
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write '" + path + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing '" + path + "'");
}

inline Canvas decode_png(const std::string& bytes) {
    png_image image;
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
        throw IoError(std::string("corrupt PNG: ") + image.message);
    image.format = PNG_FORMAT_RGBA;  // alpha is read and then dropped
    std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
        std::string msg = image.message;
        png_image_free(&image);
        throw IoError("corrupt PNG: " + msg);
    }
    Canvas c(static_cast<int>(image.height), static_cast<int>(image.width));
    for (std::size_t i = 0; i < c.pixel_count(); ++i)
        for (int k = 0; k < 3; ++k) c.values()[i * 3 + k] = buf[i * 4 + k] / 255.0;
    return c;
}

inline std::string encode_png(const Canvas& c) {
    if (c.pixel_count() == 0) throw IoError("cannot encode an empty image");
    std::vector<std::uint8_t> raw(c.size());
    for (std::size_t i = 0; i < c.size(); ++i) raw[i] = quantize(c.values()[i]);
    png_image image;
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(c.width());
    image.height = static_cast<png_uint_32>(c.height());
    image.format = PNG_FORMAT_RGB;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&image, nullptr, &size, 0, raw.data(), 0, nullptr))
        throw IoError(std::string("PNG encode failed: ") + image.message);
    std::string out(size, '\0');
    if (!png_image_write_to_memory(&image, out.data(), &size, 0, raw.data(), 0, nullptr))
        throw IoError(std::string("PNG encode failed: ") + image.message);
    out.resize(size);
    return out;
}

inline Canvas decode_ppm(const std::string& bytes) {
    std::size_t pos = 0;
    auto skip_space = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto read_int = [&]() -> long {
        skip_space();
        std::size_t start = pos;
        while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
        if (start == pos) throw IoError("corrupt PPM header");
        return std::stol(bytes.substr(start, pos - start));
    };
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw IoError("not a binary PPM (P6)");
    pos = 2;
    const long w = read_int(), h = read_int(), maxval = read_int();
    if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535) throw IoError("corrupt PPM header");
    if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) throw IoError("corrupt PPM header");
    ++pos;
    const std::size_t bps = maxval < 256 ? 1 : 2;
    const std::size_t need = static_cast<std::size_t>(w) * h * 3 * bps;
    if (bytes.size() - pos < need) throw IoError("truncated PPM raster");
    Canvas c(static_cast<int>(h), static_cast<int>(w));
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + pos);
    for (std::size_t i = 0; i < c.size(); ++i) {
        const unsigned v = bps == 1 ? p[i] : (static_cast<unsigned>(p[2 * i]) << 8 | p[2 * i + 1]);
        c.values()[i] = static_cast<double>(v) / static_cast<double>(maxval);
    }
    return c;
}

inline std::string encode_ppm(const Canvas& c) {
    std::string out = "P6\n" + std::to_string(c.width()) + " " + std::to_string(c.height()) + "\n255\n";
    for (double v : c.values()) out.push_back(static_cast<char>(quantize(v)));
    return out;
}

/// Decodes PNG or PPM by content signature.
inline Canvas decode_image(const std::string& bytes) {
    static const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    if (bytes.size() >= 8 && std::memcmp(bytes.data(), sig, 8) == 0) return decode_png(bytes);
    if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') return decode_ppm(bytes);
    throw IoError("unsupported image format (expected PNG or binary PPM)");
}

inline Canvas load_image(const std::string& path) {
    try {
        return decode_image(read_file(path));
    } catch (const IoError& e) {
        throw IoError(path + ": " + e.what());
    }
}

/// Writes PNG or PPM chosen by file extension.
inline void save_image(const Canvas& c, const std::string& path) {
    std::string ext = std::filesystem::path(path).extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
    if (ext == ".png") write_file(path, encode_png(c));
    else if (ext == ".ppm") write_file(path, encode_ppm(c));
    else throw IoError("unsupported output extension '" + ext + "' (use .png or .ppm)");
}

// ---------------------------------------------------------------------------
// Stroke-set documents

inline constexpr const char* kStrokesVersion = "brushfit.strokes/1";

inline json vec_json(const Vec2& v) { return json::array({v.y, v.x}); }

inline json strokes_to_json(const StrokeSet& set) {
    json doc;
    doc["version"] = kStrokesVersion;
    doc["canvas_h"] = set.canvas_h;
    doc["canvas_w"] = set.canvas_w;
    doc["strokes"] = json::array();
    for (const auto& s : set.strokes) {
        doc["strokes"].push_back({{"location", vec_json(s.location)},
                                  {"p0", vec_json(s.p0_off)},
                                  {"p1", vec_json(s.p1_off)},
                                  {"p2", vec_json(s.p2_off)},
                                  {"width", s.width},
                                  {"color", json::array({s.color.r, s.color.g, s.color.b})}});
    }
    return doc;
}

namespace detail {

inline void reject_unknown(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
    if (!obj.is_object()) throw ConfigError(where + ": expected an object");
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || it.key() == a;
        if (!ok) throw ConfigError(where + (where.empty() ? "" : ".") + it.key() + ": unknown key");
    }
}

inline std::string field(const std::string& where, const char* key) { return where.empty() ? key : where + "." + key; }

inline double get_number(const json& obj, const char* key, const std::string& where) {
    const auto& v = obj.at(key);
    if (!v.is_number()) throw ConfigError(field(where, key) + ": expected a number");
    return v.get<double>();
}

inline int get_int(const json& obj, const char* key, const std::string& where) {
    const auto& v = obj.at(key);
    if (!v.is_number_integer()) throw ConfigError(field(where, key) + ": expected an integer");
    return v.get<int>();
}

inline Vec2 get_vec2(const json& v, const std::string& where) {
    if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number())
        throw ConfigError(where + ": expected [y, x]");
    return {v[0].get<double>(), v[1].get<double>()};
}

inline Rgb get_rgb(const json& v, const std::string& where) {
    if (!v.is_array() || v.size() != 3) throw ConfigError(where + ": expected [r, g, b]");
    Rgb c;
    for (std::size_t i = 0; i < 3; ++i) {
        if (!v[i].is_number()) throw ConfigError(where + ": expected [r, g, b]");
        c[i] = v[i].get<double>();
    }
    return c;
}

inline std::vector<std::string> get_strings(const json& v, const std::string& where) {
    if (!v.is_array()) throw ConfigError(where + ": expected an array of strings");
    std::vector<std::string> out;
    for (const auto& e : v) {
        if (!e.is_string()) throw ConfigError(where + ": expected an array of strings");
        out.push_back(e.get<std::string>());
    }
    return out;
}

} // namespace detail

/// Parses a stroke-set document. Throws IoError on a version mismatch or
/// malformed content.
inline StrokeSet strokes_from_json(const json& doc) {
    try {
        detail::reject_unknown(doc, {"version", "canvas_h", "canvas_w", "strokes"}, "");
        if (!doc.contains("version") || doc["version"] != kStrokesVersion)
            throw IoError(std::string("stroke document version must be '") + kStrokesVersion + "'");
        StrokeSet set;
        set.canvas_h = detail::get_int(doc, "canvas_h", "");
        set.canvas_w = detail::get_int(doc, "canvas_w", "");
        if (set.canvas_h <= 0 || set.canvas_w <= 0) throw IoError("canvas dimensions must be positive");
        const auto& arr = doc.at("strokes");
        if (!arr.is_array()) throw IoError("strokes: expected an array");
        for (std::size_t i = 0; i < arr.size(); ++i) {
            const auto& e = arr[i];
            const std::string where = "strokes[" + std::to_string(i) + "]";
            detail::reject_unknown(e, {"location", "p0", "p1", "p2", "width", "color"}, where);
            Brushstroke s;
            s.location = detail::get_vec2(e.at("location"), where + ".location");
            s.p0_off = detail::get_vec2(e.at("p0"), where + ".p0");
            s.p1_off = detail::get_vec2(e.at("p1"), where + ".p1");
            s.p2_off = detail::get_vec2(e.at("p2"), where + ".p2");
            s.width = detail::get_number(e, "width", where);
            s.color = detail::get_rgb(e.at("color"), where + ".color");
            set.strokes.push_back(s);
        }
        return set;
    } catch (const ConfigError& e) {
        throw IoError(std::string("malformed stroke document: ") + e.what());
    } catch (const json::exception& e) {
        throw IoError(std::string("malformed stroke document: ") + e.what());
    }
}

inline void save_strokes(const StrokeSet& set, const std::string& path) { write_file(path, strokes_to_json(set).dump(2) + "\n"); }

inline StrokeSet load_strokes(const std::string& path) {
    json doc;
    try {
        doc = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw IoError(path + ": " + e.what());
    }
    return strokes_from_json(doc);
}

// ---------------------------------------------------------------------------
// Control-path documents: a list of polylines, each a list of [y, x] points.

inline std::vector<std::vector<Vec2>> polylines_from_json(const json& doc) {
    if (!doc.is_array()) throw ConfigError("paths: expected a list of polylines");
    std::vector<std::vector<Vec2>> out;
    for (std::size_t i = 0; i < doc.size(); ++i) {
        if (!doc[i].is_array()) throw ConfigError("paths[" + std::to_string(i) + "]: expected a list of [y, x] points");
        std::vector<Vec2> line;
        for (std::size_t j = 0; j < doc[i].size(); ++j)
            line.push_back(detail::get_vec2(doc[i][j], "paths[" + std::to_string(i) + "][" + std::to_string(j) + "]"));
        out.push_back(std::move(line));
    }
    return out;
}

inline std::vector<ControlPath> control_paths(const std::vector<std::vector<Vec2>>& lines, int window = 3) {
    std::vector<ControlPath> out;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        try {
            out.emplace_back(lines[i], window);
        } catch (const DomainError& e) {
            throw ConfigError("paths[" + std::to_string(i) + "]: " + e.what());
        }
    }
    return out;
}

inline std::vector<ControlPath> load_paths(const std::string& path, int window = 3) {
    json doc;
    try {
        doc = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return control_paths(polylines_from_json(doc), window);
}

inline json tangents_to_json(const std::vector<ControlPath>& paths) {
    json out = json::array();
    for (const auto& p : paths) {
        json line = json::array();
        for (std::size_t i = 0; i < p.tangents().size(); ++i)
            line.push_back({{"point", vec_json(p.points()[i])}, {"tangent", vec_json(p.tangents()[i])}});
        out.push_back(std::move(line));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Run configuration

enum class RunMode { Reconstruct, Stylize };

/// Stroke-stage loss defaults per mode: reconstruction fits pixels with MSE;
/// stylization uses content + style terms.
inline LossSpec default_stroke_loss(RunMode mode) {
    LossSpec s;
    if (mode == RunMode::Reconstruct) {
        s.mse = 1.0;
    } else {
        s.content = 1.0;
        s.style = 1.0;
        s.tv = 1e-4;
    }
    return s;
}

struct RunConfig {
    FitConfig fit;
    std::optional<std::string> content;
    std::optional<std::string> style;
    std::optional<std::string> paths;
};

namespace detail {

inline void parse_loss(const json& obj, LossSpec& spec, const std::string& where) {
    reject_unknown(obj, {"mse", "content", "content_layers", "style", "style_layers", "style_layer_weights", "tv", "projection", "L"},
                   where);
    if (obj.contains("mse")) spec.mse = get_number(obj, "mse", where);
    if (obj.contains("content")) spec.content = get_number(obj, "content", where);
    if (obj.contains("content_layers")) spec.content_layers = get_strings(obj["content_layers"], where + ".content_layers");
    if (obj.contains("style")) spec.style = get_number(obj, "style", where);
    if (obj.contains("style_layers")) spec.style_layers = get_strings(obj["style_layers"], where + ".style_layers");
    if (obj.contains("style_layer_weights")) {
        const auto& w = obj["style_layer_weights"];
        if (!w.is_array()) throw ConfigError(where + ".style_layer_weights: expected an array of numbers");
        spec.style_layer_weights.clear();
        for (const auto& v : w) {
            if (!v.is_number()) throw ConfigError(where + ".style_layer_weights: expected an array of numbers");
            spec.style_layer_weights.push_back(v.get<double>());
        }
    }
    if (obj.contains("tv")) spec.tv = get_number(obj, "tv", where);
    if (obj.contains("projection")) spec.projection = get_number(obj, "projection", where);
    if (obj.contains("L")) spec.neighbors = get_int(obj, "L", where);
    try {
        spec.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(where + ": " + e.what());
    }
}

} // namespace detail

/// Parses a run configuration. Unknown keys are rejected; missing keys keep
/// their defaults.
inline RunConfig parse_run_config(const json& doc, RunMode mode = RunMode::Reconstruct) {
    using namespace detail;
    RunConfig rc;
    auto& f = rc.fit;
    f.stroke_loss = default_stroke_loss(mode);
    reject_unknown(doc, {"seed", "num_strokes", "stroke_steps", "pixel_steps", "lr_strokes", "lr_pixels", "canvas_size",
                         "pixel_target_side", "preview_every", "init", "render", "stroke_loss", "pixel_loss", "extractor",
                         "content", "style", "paths"},
                   "");
    try {
        if (doc.contains("seed")) {
            if (!doc["seed"].is_number_unsigned() && !doc["seed"].is_number_integer()) throw ConfigError("seed: expected an integer");
            f.seed = doc["seed"].get<std::uint64_t>();
        }
        if (doc.contains("num_strokes")) f.num_strokes = get_int(doc, "num_strokes", "");
        if (doc.contains("stroke_steps")) f.stroke_steps = get_int(doc, "stroke_steps", "");
        if (doc.contains("pixel_steps")) f.pixel_steps = get_int(doc, "pixel_steps", "");
        if (doc.contains("lr_strokes")) f.lr_strokes = get_number(doc, "lr_strokes", "");
        if (doc.contains("lr_pixels")) f.lr_pixels = get_number(doc, "lr_pixels", "");
        if (doc.contains("canvas_size")) f.canvas_size = get_int(doc, "canvas_size", "");
        if (doc.contains("pixel_target_side")) f.pixel_target_side = get_int(doc, "pixel_target_side", "");
        if (doc.contains("preview_every")) f.preview_every = get_int(doc, "preview_every", "");
        if (doc.contains("init")) {
            const auto& o = doc["init"];
            reject_unknown(o, {"method", "width_factor", "compactness", "iters"}, "init");
            if (o.contains("method")) {
                const auto m = o["method"].is_string() ? o["method"].get<std::string>() : "";
                if (m == "slic") f.init.method = InitMethod::Slic;
                else if (m == "random") f.init.method = InitMethod::Random;
                else throw ConfigError("init.method: expected \"slic\" or \"random\"");
            }
            if (o.contains("width_factor")) f.init.width_factor = get_number(o, "width_factor", "init");
            if (o.contains("compactness")) f.init.compactness = get_number(o, "compactness", "init");
            if (o.contains("iters")) f.init.slic_iters = get_int(o, "iters", "init");
        }
        if (doc.contains("render")) {
            const auto& o = doc["render"];
            reject_unknown(o, {"samples", "neighbors", "t_sigmoid", "t_softmax", "background", "coarse_factor"}, "render");
            auto& r = f.render;
            if (o.contains("samples")) r.samples = get_int(o, "samples", "render");
            if (o.contains("neighbors")) r.neighbors = get_int(o, "neighbors", "render");
            if (o.contains("t_sigmoid")) r.t_sigmoid = get_number(o, "t_sigmoid", "render");
            if (o.contains("t_softmax")) r.t_softmax = get_number(o, "t_softmax", "render");
            if (o.contains("background")) r.background = get_rgb(o["background"], "render.background");
            if (o.contains("coarse_factor")) r.coarse_factor = get_number(o, "coarse_factor", "render");
        }
        if (doc.contains("stroke_loss")) parse_loss(doc["stroke_loss"], f.stroke_loss, "stroke_loss");
        if (doc.contains("pixel_loss")) parse_loss(doc["pixel_loss"], f.pixel_loss, "pixel_loss");
        if (doc.contains("extractor")) {
            const auto& o = doc["extractor"];
            reject_unknown(o, {"seed", "weights"}, "extractor");
            if (o.contains("seed")) f.extractor_seed = o["seed"].get<std::uint64_t>();
            if (o.contains("weights")) {
                if (!o["weights"].is_string()) throw ConfigError("extractor.weights: expected a path");
                f.extractor_weights = o["weights"].get<std::string>();
            }
        }
        for (const char* key : {"content", "style", "paths"}) {
            if (!doc.contains(key)) continue;
            if (!doc[key].is_string()) throw ConfigError(std::string(key) + ": expected a path");
            auto& slot = std::string(key) == "content" ? rc.content : (std::string(key) == "style" ? rc.style : rc.paths);
            slot = doc[key].get<std::string>();
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("invalid config: ") + e.what());
    }
    f.validate();
    return rc;
}

inline RunConfig load_run_config(const std::string& path, RunMode mode = RunMode::Reconstruct) {
    json doc;
    try {
        doc = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw ConfigError(path + ": " + e.what());
    } catch (const IoError& e) {
        throw ConfigError(e.what());
    }
    return parse_run_config(doc, mode);
}

} // namespace brushfit
