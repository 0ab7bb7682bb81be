#pragma once

// Pluggable feature extractors for the content and style losses.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "canvas.hpp"
#include "error.hpp"

namespace brushfit {

/// H x W x C activations, channel-last.
struct FeatureMap {
    int h = 0;
    int w = 0;
    int c = 0;
    std::vector<double> data;

    FeatureMap() = default;
    FeatureMap(int h_, int w_, int c_) : h(h_), w(w_), c(c_), data(static_cast<std::size_t>(h_) * w_ * c_, 0.0) {}

    double& at(int y, int x, int k) { return data[(static_cast<std::size_t>(y) * w + x) * c + k]; }
    double at(int y, int x, int k) const { return data[(static_cast<std::size_t>(y) * w + x) * c + k]; }
    std::size_t positions() const { return static_cast<std::size_t>(h) * w; }
    bool empty() const { return data.empty(); }
};

inline FeatureMap to_feature_map(const Canvas& canvas) {
    FeatureMap f(canvas.height(), canvas.width(), 3);
    std::copy(canvas.values().begin(), canvas.values().end(), f.data.begin());
    return f;
}

/// Maps a canvas to an ordered set of named feature layers. Implementations
/// are immutable after construction and deterministic.
class FeatureExtractor {
public:
    virtual ~FeatureExtractor() = default;

    virtual const std::vector<std::string>& layer_names() const = 0;

    /// Features of every layer, in layer_names() order.
    virtual std::vector<FeatureMap> extract(const Canvas& input) const = 0;

    /// Vector-Jacobian product: given dL/d(layer l) for every layer (an empty
    /// map means zero), returns dL/d(input).
    virtual Canvas backward(const Canvas& input, std::span<const FeatureMap> layer_grads) const = 0;

    std::size_t layer_index(const std::string& name) const {
        const auto& names = layer_names();
        auto it = std::find(names.begin(), names.end(), name);
        if (it == names.end()) throw ConfigError("unknown feature layer '" + name + "'");
        return static_cast<std::size_t>(it - names.begin());
    }
};

/// Raw pixels as a single layer named "pixels".
class IdentityExtractor final : public FeatureExtractor {
public:
    const std::vector<std::string>& layer_names() const override { return names_; }

    std::vector<FeatureMap> extract(const Canvas& input) const override { return {to_feature_map(input)}; }

    Canvas backward(const Canvas& input, std::span<const FeatureMap> grads) const override {
        Canvas g(input.height(), input.width());
        if (!grads.empty() && !grads[0].empty()) std::copy(grads[0].data.begin(), grads[0].data.end(), g.values().begin());
        return g;
    }

private:
    std::vector<std::string> names_{"pixels"};
};

/// One 3x3 same-padded convolution followed by max(0, x).
struct ConvLayer {
    std::string name;
    int in = 0;
    int out = 0;
    // Stored [ky][kx][out][in] so the inner loop walks contiguous input channels.
    std::vector<double> weight;
    std::vector<double> bias;

    double& w(int ky, int kx, int o, int i) { return weight[((static_cast<std::size_t>(ky) * 3 + kx) * out + o) * in + i]; }
    double w(int ky, int kx, int o, int i) const { return weight[((static_cast<std::size_t>(ky) * 3 + kx) * out + o) * in + i]; }
};

namespace detail {

inline FeatureMap conv_forward(const FeatureMap& x, const ConvLayer& layer) {
    FeatureMap pre(x.h, x.w, layer.out);
    for (int y = 0; y < x.h; ++y) {
        for (int xx = 0; xx < x.w; ++xx) {
            double* o = &pre.data[(static_cast<std::size_t>(y) * x.w + xx) * layer.out];
            std::copy(layer.bias.begin(), layer.bias.end(), o);
            for (int ky = 0; ky < 3; ++ky) {
                const int sy = y + ky - 1;
                if (sy < 0 || sy >= x.h) continue;
                for (int kx = 0; kx < 3; ++kx) {
                    const int sx = xx + kx - 1;
                    if (sx < 0 || sx >= x.w) continue;
                    const double* in = &x.data[(static_cast<std::size_t>(sy) * x.w + sx) * layer.in];
                    const double* wk = &layer.weight[(static_cast<std::size_t>(ky) * 3 + kx) * layer.out * layer.in];
                    for (int oc = 0; oc < layer.out; ++oc) {
                        const double* wo = wk + static_cast<std::size_t>(oc) * layer.in;
                        double acc = 0.0;
                        for (int ic = 0; ic < layer.in; ++ic) acc += wo[ic] * in[ic];
                        o[oc] += acc;
                    }
                }
            }
        }
    }
    return pre;
}

// dL/d(input) given dL/d(pre-activation output).
inline FeatureMap conv_backward(const FeatureMap& grad_pre, const ConvLayer& layer) {
    FeatureMap gin(grad_pre.h, grad_pre.w, layer.in);
    for (int y = 0; y < grad_pre.h; ++y) {
        for (int xx = 0; xx < grad_pre.w; ++xx) {
            const double* g = &grad_pre.data[(static_cast<std::size_t>(y) * grad_pre.w + xx) * layer.out];
            for (int ky = 0; ky < 3; ++ky) {
                const int sy = y + ky - 1;
                if (sy < 0 || sy >= grad_pre.h) continue;
                for (int kx = 0; kx < 3; ++kx) {
                    const int sx = xx + kx - 1;
                    if (sx < 0 || sx >= grad_pre.w) continue;
                    double* gi = &gin.data[(static_cast<std::size_t>(sy) * grad_pre.w + sx) * layer.in];
                    const double* wk = &layer.weight[(static_cast<std::size_t>(ky) * 3 + kx) * layer.out * layer.in];
                    for (int oc = 0; oc < layer.out; ++oc) {
                        const double go = g[oc];
                        if (go == 0.0) continue;
                        const double* wo = wk + static_cast<std::size_t>(oc) * layer.in;
                        for (int ic = 0; ic < layer.in; ++ic) gi[ic] += go * wo[ic];
                    }
                }
            }
        }
    }
    return gin;
}

// 2x2 average pooling; odd trailing rows/cols are dropped, extents never go below 1.
inline FeatureMap avg_pool(const FeatureMap& x) {
    if (x.h < 2 || x.w < 2) return x;
    FeatureMap out(x.h / 2, x.w / 2, x.c);
    for (int y = 0; y < out.h; ++y)
        for (int xx = 0; xx < out.w; ++xx)
            for (int k = 0; k < x.c; ++k)
                out.at(y, xx, k) = 0.25 * (x.at(2 * y, 2 * xx, k) + x.at(2 * y + 1, 2 * xx, k) +
                                           x.at(2 * y, 2 * xx + 1, k) + x.at(2 * y + 1, 2 * xx + 1, k));
    return out;
}

inline void avg_pool_backward(const FeatureMap& grad_out, FeatureMap& grad_in) {
    if (grad_in.h < 2 || grad_in.w < 2) {
        for (std::size_t i = 0; i < grad_in.data.size(); ++i) grad_in.data[i] += grad_out.data[i];
        return;
    }
    for (int y = 0; y < grad_out.h; ++y)
        for (int xx = 0; xx < grad_out.w; ++xx)
            for (int k = 0; k < grad_out.c; ++k) {
                const double g = 0.25 * grad_out.at(y, xx, k);
                grad_in.at(2 * y, 2 * xx, k) += g;
                grad_in.at(2 * y + 1, 2 * xx, k) += g;
                grad_in.at(2 * y, 2 * xx + 1, k) += g;
                grad_in.at(2 * y + 1, 2 * xx + 1, k) += g;
            }
}

inline void relu_inplace(FeatureMap& x) {
    for (auto& v : x.data) v = std::max(0.0, v);
}

} // namespace detail

/// Stack of conv3x3 -> relu stages separated by 2x2 average pooling. The
/// relu output of each stage is one named feature layer.
class ConvStackExtractor final : public FeatureExtractor {
public:
    explicit ConvStackExtractor(std::vector<ConvLayer> layers) : layers_(std::move(layers)) {
        if (layers_.empty()) throw ConfigError("conv stack needs at least one layer");
        int channels = 3;
        for (const auto& l : layers_) {
            if (l.in != channels) throw ConfigError("conv stack layer '" + l.name + "' has mismatched input channels");
            if (l.weight.size() != static_cast<std::size_t>(9) * l.in * l.out || l.bias.size() != static_cast<std::size_t>(l.out))
                throw ConfigError("conv stack layer '" + l.name + "' has wrong parameter count");
            channels = l.out;
            names_.push_back(l.name);
        }
    }

    /// Fixed-seed He-initialized stack; default widths 16/32/64/128/128 named f1..f5.
    static ConvStackExtractor random(std::uint64_t seed = 2020, std::vector<int> channels = {16, 32, 64, 128, 128}) {
        std::mt19937_64 rng(seed);
        std::vector<ConvLayer> layers;
        int in = 3;
        for (std::size_t l = 0; l < channels.size(); ++l) {
            ConvLayer layer;
            layer.name = "f" + std::to_string(l + 1);
            layer.in = in;
            layer.out = channels[l];
            layer.weight.resize(static_cast<std::size_t>(9) * layer.in * layer.out);
            layer.bias.resize(static_cast<std::size_t>(layer.out));
            std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / (9.0 * layer.in)));
            for (auto& v : layer.weight) v = normal(rng);
            std::uniform_real_distribution<double> small(-0.05, 0.05);
            for (auto& v : layer.bias) v = small(rng);
            layers.push_back(std::move(layer));
            in = channels[l];
        }
        return ConvStackExtractor(std::move(layers));
    }

    const std::vector<std::string>& layer_names() const override { return names_; }
    const std::vector<ConvLayer>& layers() const { return layers_; }

    std::vector<FeatureMap> extract(const Canvas& input) const override {
        std::vector<FeatureMap> feats;
        FeatureMap x = to_feature_map(input);
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            FeatureMap y = detail::conv_forward(x, layers_[l]);
            detail::relu_inplace(y);
            if (l + 1 < layers_.size()) x = detail::avg_pool(y);
            feats.push_back(std::move(y));
        }
        return feats;
    }

    Canvas backward(const Canvas& input, std::span<const FeatureMap> grads) const override {
        if (grads.size() != layers_.size()) throw DomainError("backward: expected one gradient slot per layer");
        // Forward again, keeping each stage's input and relu output.
        std::vector<FeatureMap> inputs, outputs;
        FeatureMap x = to_feature_map(input);
        std::size_t deepest = 0;
        for (std::size_t l = 0; l < grads.size(); ++l)
            if (!grads[l].empty()) deepest = l + 1;
        for (std::size_t l = 0; l < deepest; ++l) {
            FeatureMap y = detail::conv_forward(x, layers_[l]);
            detail::relu_inplace(y);
            inputs.push_back(std::move(x));
            if (l + 1 < layers_.size()) x = detail::avg_pool(y);
            outputs.push_back(std::move(y));
        }

        Canvas result(input.height(), input.width());
        if (deepest == 0) return result;
        FeatureMap carry;  // dL/d(relu output of stage l) arriving from deeper stages
        for (std::size_t l = deepest; l-- > 0;) {
            FeatureMap g(outputs[l].h, outputs[l].w, outputs[l].c);
            if (!carry.empty()) detail::avg_pool_backward(carry, g);
            if (!grads[l].empty()) {
                if (grads[l].data.size() != g.data.size()) throw DomainError("backward: gradient shape mismatch for layer " + names_[l]);
                for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += grads[l].data[i];
            }
            for (std::size_t i = 0; i < g.data.size(); ++i)
                if (outputs[l].data[i] <= 0.0) g.data[i] = 0.0;
            carry = detail::conv_backward(g, layers_[l]);
        }
        std::copy(carry.data.begin(), carry.data.end(), result.values().begin());
        return result;
    }

private:
    std::vector<ConvLayer> layers_;
    std::vector<std::string> names_;
};

// Weight file: 4-byte little-endian header length, JSON header
// {"format": "brushfit.features/1", "layers": [{"name", "in", "out", "kernel": 3}, ...]},
// then little-endian float32 values; per layer the weights in
// [out][in][ky][kx] order followed by `out` biases.

namespace detail {

inline std::uint32_t read_le32(const unsigned char* p) {
    return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
}

inline void write_le32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

} // namespace detail

inline ConvStackExtractor load_feature_weights(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open feature weights '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 4) throw IoError("feature weights '" + path + "' truncated");
    const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::uint32_t header_len = detail::read_le32(raw);
    if (4 + static_cast<std::size_t>(header_len) > bytes.size()) throw IoError("feature weights header exceeds file size");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(4, header_len));
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("feature weights header is not JSON: ") + e.what());
    }
    if (header.value("format", "") != "brushfit.features/1") throw IoError("feature weights: unsupported format tag");

    std::size_t offset = 4 + header_len;
    auto next_float = [&]() {
        if (offset + 4 > bytes.size()) throw IoError("feature weights: payload truncated");
        const std::uint32_t bits = detail::read_le32(raw + offset);
        offset += 4;
        return static_cast<double>(std::bit_cast<float>(bits));
    };

    std::vector<ConvLayer> layers;
    for (const auto& spec : header.at("layers")) {
        ConvLayer layer;
        layer.name = spec.at("name").get<std::string>();
        layer.in = spec.at("in").get<int>();
        layer.out = spec.at("out").get<int>();
        if (spec.value("kernel", 3) != 3) throw IoError("feature weights: only 3x3 kernels are supported");
        if (layer.in <= 0 || layer.out <= 0) throw IoError("feature weights: non-positive channel count");
        layer.weight.resize(static_cast<std::size_t>(9) * layer.in * layer.out);
        layer.bias.resize(static_cast<std::size_t>(layer.out));
        for (int o = 0; o < layer.out; ++o)
            for (int i = 0; i < layer.in; ++i)
                for (int ky = 0; ky < 3; ++ky)
                    for (int kx = 0; kx < 3; ++kx) layer.w(ky, kx, o, i) = next_float();
        for (auto& b : layer.bias) b = next_float();
        layers.push_back(std::move(layer));
    }
    if (offset != bytes.size()) throw IoError("feature weights: trailing bytes after payload");
    return ConvStackExtractor(std::move(layers));
}

inline void save_feature_weights(const ConvStackExtractor& extractor, const std::string& path) {
    nlohmann::json header;
    header["format"] = "brushfit.features/1";
    header["layers"] = nlohmann::json::array();
    for (const auto& l : extractor.layers())
        header["layers"].push_back({{"name", l.name}, {"in", l.in}, {"out", l.out}, {"kernel", 3}});
    const std::string text = header.dump();
    std::string out;
    detail::write_le32(out, static_cast<std::uint32_t>(text.size()));
    out += text;
    for (const auto& l : extractor.layers()) {
        for (int o = 0; o < l.out; ++o)
            for (int i = 0; i < l.in; ++i)
                for (int ky = 0; ky < 3; ++ky)
                    for (int kx = 0; kx < 3; ++kx)
                        detail::write_le32(out, std::bit_cast<std::uint32_t>(static_cast<float>(l.w(ky, kx, o, i))));
        for (double b : l.bias) detail::write_le32(out, std::bit_cast<std::uint32_t>(static_cast<float>(b)));
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write feature weights '" + path + "'");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

} // namespace brushfit
