#pragma once

#include <charconv>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "textbin/checkpoint.hpp"
#include "textbin/quantizers.hpp"

namespace textbin {

enum class QuantizerKind { binary, vq };
enum class InferenceRoute { raw, vq };

inline const char* to_string(QuantizerKind k) { return k == QuantizerKind::binary ? "binary" : "vq"; }
inline const char* to_string(InferenceRoute r) { return r == InferenceRoute::raw ? "raw" : "vq"; }

enum class ReconNorm { l1, mse };

inline const char* to_string(ReconNorm n) { return n == ReconNorm::l1 ? "l1" : "mse"; }

inline const std::set<std::string>& codec_components() {
    static const std::set<std::string> names{"encoder", "vq", "projector", "quantizer2", "decoder"};
    return names;
}

struct CodecConfig {
    std::size_t image_size = 64;
    std::size_t channels = 3;
    std::size_t downsample_factor = 4;
    std::size_t base_width = 32;
    std::size_t feature_dim = 32;  // D, encoder output width
    QuantizerKind kind = QuantizerKind::binary;
    BinaryQuantizerConfig quantizer;
    int projector_depth = 1;
    bool hybrid = true;          // frozen VQ branch in front of the projector
    std::size_t vq_size = 1024;  // hybrid branch entries, or the codebook size when kind == vq
    double route_prob = 0.5;
    InferenceRoute inference_route = InferenceRoute::raw;
    float codebook_weight = 1.0f;  // kind == vq only
    ReconNorm recon_loss = ReconNorm::mse;
    std::set<std::string> freeze;

    std::size_t grid() const { return image_size / downsample_factor; }
    std::size_t tokens() const { return grid() * grid(); }
    std::size_t code_width() const { return kind == QuantizerKind::binary ? std::size_t(quantizer.dims) : feature_dim; }
    std::size_t vocab_size() const {
        return kind == QuantizerKind::binary ? (std::size_t{1} << quantizer.dims) : vq_size;
    }

    void validate() const {
        quantizer.validate();
        if (channels != 3) throw ConfigError("codec: only 3-channel images are supported");
        if (downsample_factor != 4) throw ConfigError("codec: the conv stack downsamples by exactly 4");
        if (image_size == 0 || image_size % downsample_factor != 0) {
            throw ConfigError("codec: image_size must be a positive multiple of downsample_factor");
        }
        if (base_width == 0 || feature_dim == 0) throw ConfigError("codec: widths must be positive");
        if (projector_depth != 1 && projector_depth != 3) throw ConfigError("codec: projector depth must be 1 or 3");
        if (route_prob < 0.0 || route_prob > 1.0) throw ConfigError("codec: route_prob must be in [0, 1]");
        if ((hybrid || kind == QuantizerKind::vq) && vq_size == 0) throw ConfigError("codec: vq_size must be positive");
        for (const auto& f : freeze) {
            if (!codec_components().count(f)) throw ConfigError("codec: unknown component to freeze: " + f);
        }
    }
};

namespace detail {

inline std::string fmt_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

// Shortest form that round-trips through float.
inline std::string fmt_double(float v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s, const std::string& key) {
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw ConfigError("bad number for " + key + ": " + s);
    return v;
}

inline long parse_long(const std::string& s, const std::string& key) {
    long v = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw ConfigError("bad integer for " + key + ": " + s);
    return v;
}

inline bool parse_bool(const std::string& s, const std::string& key) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw ConfigError("bad boolean for " + key + ": " + s);
}

inline std::set<std::string> parse_set(const std::string& s) {
    std::set<std::string> out;
    std::stringstream in(s);
    std::string item;
    while (std::getline(in, item, ',')) {
        item.erase(0, item.find_first_not_of(" \t"));
        item.erase(item.find_last_not_of(" \t") + 1);
        if (!item.empty()) out.insert(item);
    }
    return out;
}

inline std::string join_set(const std::set<std::string>& s) {
    std::string out;
    for (const auto& x : s) out += (out.empty() ? "" : ",") + x;
    return out;
}

}  // namespace detail

/// Flat key/value view, shared by the config file reader and checkpoint metadata.
inline std::map<std::string, std::string> to_kv(const CodecConfig& c) {
    return {
        {"image_size", std::to_string(c.image_size)},
        {"base_width", std::to_string(c.base_width)},
        {"feature_dim", std::to_string(c.feature_dim)},
        {"kind", to_string(c.kind)},
        {"dims", std::to_string(c.quantizer.dims)},
        {"entropy_weight", detail::fmt_double(c.quantizer.entropy_weight)},
        {"entropy_batch_weight", detail::fmt_double(c.quantizer.entropy_batch_weight)},
        {"commitment_weight", detail::fmt_double(c.quantizer.commitment_weight)},
        {"temperature", detail::fmt_double(c.quantizer.temperature)},
        {"projector_depth", std::to_string(c.projector_depth)},
        {"hybrid", c.hybrid ? "true" : "false"},
        {"vq_size", std::to_string(c.vq_size)},
        {"route_prob", detail::fmt_double(c.route_prob)},
        {"inference_route", to_string(c.inference_route)},
        {"codebook_weight", detail::fmt_double(c.codebook_weight)},
        {"recon_loss", to_string(c.recon_loss)},
        {"freeze", detail::join_set(c.freeze)},
    };
}

/// Applies one key; unknown keys are a ConfigError.
inline void set_key(CodecConfig& c, const std::string& key, const std::string& v) {
    using namespace detail;
    if (key == "image_size") c.image_size = std::size_t(parse_long(v, key));
    else if (key == "base_width") c.base_width = std::size_t(parse_long(v, key));
    else if (key == "feature_dim") c.feature_dim = std::size_t(parse_long(v, key));
    else if (key == "kind") {
        if (v != "binary" && v != "vq") throw ConfigError("kind must be binary or vq");
        c.kind = v == "binary" ? QuantizerKind::binary : QuantizerKind::vq;
    } else if (key == "dims") c.quantizer.dims = int(parse_long(v, key));
    else if (key == "entropy_weight") c.quantizer.entropy_weight = float(parse_double(v, key));
    else if (key == "entropy_batch_weight") c.quantizer.entropy_batch_weight = float(parse_double(v, key));
    else if (key == "commitment_weight") c.quantizer.commitment_weight = float(parse_double(v, key));
    else if (key == "temperature") c.quantizer.temperature = float(parse_double(v, key));
    else if (key == "projector_depth") c.projector_depth = int(parse_long(v, key));
    else if (key == "hybrid") c.hybrid = parse_bool(v, key);
    else if (key == "vq_size") c.vq_size = std::size_t(parse_long(v, key));
    else if (key == "route_prob") c.route_prob = parse_double(v, key);
    else if (key == "inference_route") {
        if (v != "raw" && v != "vq") throw ConfigError("inference_route must be raw or vq");
        c.inference_route = v == "raw" ? InferenceRoute::raw : InferenceRoute::vq;
    } else if (key == "codebook_weight") c.codebook_weight = float(parse_double(v, key));
    else if (key == "recon_loss") {
        if (v != "l1" && v != "mse") throw ConfigError("recon_loss must be l1 or mse");
        c.recon_loss = v == "l1" ? ReconNorm::l1 : ReconNorm::mse;
    }    else if (key == "freeze") c.freeze = parse_set(v);
    else throw ConfigError("unknown tokenizer key: " + key);
}

inline std::string kv_text(const std::map<std::string, std::string>& kv) {
    std::string out;
    for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
    return out;
}

inline std::map<std::string, std::string> parse_kv_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("bad key/value line: " + line);
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

inline CodecConfig codec_config_from_kv(const std::map<std::string, std::string>& kv) {
    CodecConfig c;
    for (const auto& [k, v] : kv) set_key(c, k, v);
    c.validate();
    return c;
}

/// Per-term breakdown of the tokenizer objective. `total` sums the
/// reconstruction, commitment, entropy and codebook terms; `codebook` is only
/// non-zero for the plain VQ baseline. `l1` is reported whatever the norm.
struct TokenizerLoss {
    Tensor total;
    Tensor reconstruction;
    double l1 = 0.0;
    Tensor commitment;
    Tensor entropy;
    Tensor codebook;
};

namespace detail {

inline Tensor add_scalars(const std::vector<Tensor>& terms) {
    Tensor acc = terms.front();
    double ext = acc.item_extended();
    for (std::size_t i = 1; i < terms.size(); ++i) {
        acc = add(acc, terms[i]);
        ext += terms[i].item_extended();
    }
    return with_extended(acc, ext);
}

}  // namespace detail

namespace detail {

inline Tensor reconstruction_term(const Tensor& image, const Tensor& reconstruction, ReconNorm norm, double& l1) {
    Tensor abs = l1_loss(image, reconstruction);
    l1 = abs.item_extended();
    return norm == ReconNorm::l1 ? abs : mse_loss(image, reconstruction);
}

}  // namespace detail

/// Reconstruction + commitment + entropy penalty on the pre-quantization
/// embedding. Adversarial and perceptual terms are not part of this objective.
inline TokenizerLoss tokenizer_loss(const Tensor& image, const Tensor& reconstruction, const Tensor& pre_quant,
                                    const Tensor& quantized, const BinaryQuantizerConfig& cfg,
                                    ReconNorm norm = ReconNorm::l1) {
    TokenizerLoss out;
    out.reconstruction = detail::reconstruction_term(image, reconstruction, norm, out.l1);
    out.commitment = commitment_loss(pre_quant, quantized, cfg.commitment_weight);
    Tensor flat = pre_quant.rank() == 2 ? pre_quant : reshape(pre_quant, {pre_quant.numel() / pre_quant.shape().back(), pre_quant.shape().back()});
    out.entropy = entropy_penalty(flat, cfg);
    out.codebook = Tensor::scalar(0.0f);
    out.total = detail::add_scalars({out.reconstruction, out.commitment, out.entropy});
    return out;
}

struct CodecForward {
    Tensor features;        // encoder output, [B x g x g x D]
    Tensor pre_quant;       // [B*T x d] (binary) or [B*T x D] (vq)
    Tensor quantized;       // straight-through codes, same shape as pre_quant
    Tensor codewords;       // vq only: selected entries carrying codebook gradient
    Tensor reconstruction;  // [B x 3 x H x W]
    std::vector<std::uint32_t> indices;
    std::vector<std::uint8_t> routed;
};

/// Convolutional encoder, quantizer and decoder. Parameter names are prefixed
/// by component ("encoder.", "vq.", "projector.", "decoder.") so freezing is a
/// prefix operation.
class Codec {
public:
    explicit Codec(CodecConfig cfg, std::uint64_t seed = 0) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng rng(seed);
        const std::size_t w = cfg_.base_width, D = cfg_.feature_dim, c = cfg_.code_width();
        auto conv = [&](const std::string& name, std::size_t out, std::size_t in, std::size_t k) {
            Tensor weight = params_.add(name + ".weight", he_normal({out, in, k, k}, in * k * k, rng));
            params_.add(name + ".bias", Tensor(Shape{out}), false);
            return weight;
        };
        conv("encoder.conv0", w, cfg_.channels, 3);
        conv("encoder.conv1", w, w, 4);
        conv("encoder.conv2", 2 * w, w, 4);
        conv("encoder.conv3", D, 2 * w, 3);
        enc_norm_ = LayerNorm::create(params_, "encoder.norm", D);

        if (cfg_.kind == QuantizerKind::vq) {
            vq_ = VqCodebook(params_.add("vq.codebook", normal_tensor({cfg_.vq_size, D}, 1.0f, rng)));
        } else {
            if (cfg_.hybrid) {
                vq_ = VqCodebook(params_.add("vq.codebook", VqCodebook::random_entries(cfg_.vq_size, D, rng), false));
                params_.at("vq.codebook").frozen = true;  // always frozen in the hybrid path
            }
            projector_ = Projector(params_, "projector", D, std::size_t(cfg_.quantizer.dims), cfg_.projector_depth, rng);
        }

        conv("decoder.conv0", 2 * w, c, 3);
        // Transposed conv weights are [in x out x k x k].
        params_.add("decoder.up1.weight", he_normal({2 * w, w, 4, 4}, 2 * w * 4, rng));
        params_.add("decoder.up1.bias", Tensor(Shape{w}), false);
        params_.add("decoder.up2.weight", he_normal({w, w, 4, 4}, w * 4, rng));
        params_.add("decoder.up2.bias", Tensor(Shape{w}), false);
        conv("decoder.conv3", cfg_.channels, w, 3);

        for (const auto& comp : cfg_.freeze) params_.freeze_prefix(comp + ".");
    }

    Codec(const Codec&) = delete;
    Codec& operator=(const Codec&) = delete;
    Codec(Codec&&) = default;
    Codec& operator=(Codec&&) = default;

    const CodecConfig& config() const { return cfg_; }
    void set_inference_route(InferenceRoute route) { cfg_.inference_route = route; }
    ParameterSet& params() { return params_; }
    const ParameterSet& params() const { return params_; }
    VqCodebook& codebook() { return vq_; }
    const Projector& projector() const { return projector_; }

    /// images [B x 3 x H x W] in [0,1] -> features [B x g x g x D].
    Tensor encode(const Tensor& images) const {
        check_images(images);
        Tensor h = silu(conv("encoder.conv0", images, 1, 1));
        h = silu(conv("encoder.conv1", h, 2, 1));
        h = silu(conv("encoder.conv2", h, 2, 1));
        h = conv("encoder.conv3", h, 1, 1);
        return enc_norm_(permute(h, {0, 2, 3, 1}));
    }

    /// Projector output for features; binary kind only.
    Tensor project(const Tensor& features) const {
        require_binary("project");
        const std::size_t D = features.shape().back(), rows = features.numel() / D;
        return projector_(reshape(features, {rows, D}), cfg_.tokens());
    }

    /// codes [B x g x g x c] channel-last -> images [B x 3 x H x W].
    Tensor decode_codes(const Tensor& codes) const {
        if (codes.rank() != 4 || codes.shape().back() != cfg_.code_width()) {
            throw DimensionError("decode_codes: expected [B x g x g x " + std::to_string(cfg_.code_width()) + "], got " +
                                 shape_str(codes.shape()));
        }
        Tensor h = silu(conv("decoder.conv0", permute(codes, {0, 3, 1, 2}), 1, 1));
        h = silu(add_channel_bias(conv_transpose2d(h, param("decoder.up1.weight"), 2, 1), param("decoder.up1.bias")));
        h = silu(add_channel_bias(conv_transpose2d(h, param("decoder.up2.weight"), 2, 1), param("decoder.up2.bias")));
        return conv("decoder.conv3", h, 1, 1);
    }

    /// Full pass. In training, hybrid routing draws from `rng`; at inference
    /// the configured inference route is used for every sample.
    CodecForward forward(const Tensor& images, Rng& rng, bool training) {
        CodecForward out;
        out.features = encode(images);
        const std::size_t batch = images.dim(0), g = cfg_.grid();
        if (cfg_.kind == QuantizerKind::vq) {
            VqResult v = vq_encode(out.features, vq_);
            const std::size_t D = cfg_.feature_dim;
            out.pre_quant = reshape(out.features, {batch * cfg_.tokens(), D});
            out.quantized = reshape(v.quantized, {batch * cfg_.tokens(), D});
            out.codewords = reshape(v.codewords, {batch * cfg_.tokens(), D});
            out.indices = std::move(v.indices);
            out.routed.assign(batch, 1);
        } else if (cfg_.hybrid) {
            double p = cfg_.route_prob;
            Rng fixed(0);
            if (!training) p = cfg_.inference_route == InferenceRoute::vq ? 1.0 : 0.0;
            HybridOutput h = hybrid_forward(out.features, vq_, projector_, cfg_.quantizer, p, training ? rng : fixed);
            out.pre_quant = h.pre_quant;
            out.quantized = h.codes.quantized;
            out.indices = std::move(h.codes.indices);
            out.routed = std::move(h.routed);
        } else {
            out.pre_quant = project(out.features);
            BinaryQuantization q = binary_quantize(out.pre_quant, cfg_.quantizer.dims);
            out.quantized = q.quantized;
            out.indices = std::move(q.indices);
            out.routed.assign(batch, 0);
        }
        out.reconstruction = decode_codes(reshape(out.quantized, {batch, g, g, cfg_.code_width()}));
        return out;
    }

    TokenizerLoss loss(const Tensor& images, const CodecForward& fwd) const {
        if (cfg_.kind == QuantizerKind::binary) {
            return tokenizer_loss(images, fwd.reconstruction, fwd.pre_quant, fwd.quantized, cfg_.quantizer, cfg_.recon_loss);
        }
        TokenizerLoss out;
        out.reconstruction = detail::reconstruction_term(images, fwd.reconstruction, cfg_.recon_loss, out.l1);
        out.commitment = commitment_loss(fwd.pre_quant, fwd.quantized, cfg_.quantizer.commitment_weight);
        out.entropy = Tensor::scalar(0.0f);
        Tensor cb = mse_loss(fwd.codewords, fwd.pre_quant.detach());
        out.codebook = detail::with_extended(scale(cb, cfg_.codebook_weight), double(cfg_.codebook_weight) * cb.item_extended());
        out.total = detail::add_scalars({out.reconstruction, out.commitment, out.codebook});
        return out;
    }

    /// Token indices in raster order, `tokens()` per image, images concatenated.
    std::vector<std::uint32_t> tokenize(const Tensor& images) {
        Rng unused(0);
        return forward(images, unused, false).indices;
    }

    /// Inverse of tokenize up to the decoder; a pure function of the indices.
    Tensor decode_tokens(std::span<const std::uint32_t> indices) const {
        const std::size_t T = cfg_.tokens(), g = cfg_.grid();
        if (indices.empty() || indices.size() % T != 0) {
            throw DimensionError("decode_tokens: expected a multiple of " + std::to_string(T) + " indices");
        }
        const std::size_t batch = indices.size() / T;
        for (auto i : indices) {
            if (i >= cfg_.vocab_size()) throw DomainError("decode_tokens: token " + std::to_string(i) + " out of range");
        }
        Tensor codes;
        if (cfg_.kind == QuantizerKind::binary) {
            codes = indices_to_signs(indices, cfg_.quantizer.dims);
        } else {
            codes = vq_.entries.detach();
            codes = embedding(codes, indices);
        }
        Tensor img = decode_codes(reshape(codes, {batch, g, g, cfg_.code_width()})).detach();
        for (float& v : img.data()) v = std::clamp(v, 0.0f, 1.0f);
        return img;
    }

private:
    const Tensor& param(const std::string& name) const { return params_.at(name).tensor; }

    Tensor conv(const std::string& name, const Tensor& x, std::size_t stride, std::size_t pad) const {
        return add_channel_bias(conv2d(x, param(name + ".weight"), stride, pad), param(name + ".bias"));
    }

    void check_images(const Tensor& images) const {
        if (images.rank() != 4 || images.dim(1) != cfg_.channels || images.dim(2) != cfg_.image_size ||
            images.dim(3) != cfg_.image_size) {
            throw DimensionError("codec: expected [B x 3 x " + std::to_string(cfg_.image_size) + " x " +
                                 std::to_string(cfg_.image_size) + "], got " + shape_str(images.shape()));
        }
        for (float v : images.data()) {
            if (!(v >= 0.0f && v <= 1.0f)) throw DomainError("codec: pixel values must lie in [0, 1]");
        }
    }

    void require_binary(const char* what) const {
        if (cfg_.kind != QuantizerKind::binary) throw ConfigError(std::string(what) + " needs the binary quantizer");
    }

    CodecConfig cfg_;
    ParameterSet params_;
    LayerNorm enc_norm_;
    VqCodebook vq_;
    Projector projector_;
};

/// Stacks [3 x H x W] images into one [B x 3 x H x W] batch.
inline Tensor stack_images(const std::vector<Tensor>& images, std::span<const std::size_t> which) {
    if (which.empty()) throw DimensionError("stack_images: empty selection");
    const Shape& s = images.at(which[0]).shape();
    std::vector<float> data;
    data.reserve(which.size() * images[which[0]].numel());
    for (auto i : which) {
        if (images.at(i).shape() != s) throw DimensionError("stack_images: mixed image shapes");
        data.insert(data.end(), images[i].data().begin(), images[i].data().end());
    }
    Shape shape{which.size()};
    shape.insert(shape.end(), s.begin(), s.end());
    return Tensor(std::move(shape), std::move(data));
}

// ---------------------------------------------------------------------------
// Training

struct TokenizerTrainConfig {
    long steps = 2000;
    std::size_t batch = 8;
    float peak_lr = 5e-4f;
    long warmup = 100;
    float decay_rate = 5.0f;
    std::uint64_t seed = 0;
    AdamWConfig adam;
};

struct LossRecord {
    long step = 0;
    double total = 0.0;
    double reconstruction = 0.0;
    double commitment = 0.0;
    double entropy = 0.0;
    double codebook = 0.0;
    double l1 = 0.0;
};

inline std::string history_text(const std::vector<LossRecord>& h) {
    std::string out;
    for (const auto& r : h) {
        out += std::to_string(r.step) + " " + detail::fmt_double(r.total) + " " + detail::fmt_double(r.reconstruction) + " " +
               detail::fmt_double(r.commitment) + " " + detail::fmt_double(r.entropy) + " " + detail::fmt_double(r.codebook) + " " +
               detail::fmt_double(r.l1) + "\n";
    }
    return out;
}

inline std::vector<LossRecord> parse_history(const std::string& text) {
    std::vector<LossRecord> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream fields(line);
        std::string a, b, c, d, e, f, g;
        if (!(fields >> a >> b >> c >> d >> e >> f >> g)) throw ConfigError("corrupt loss history line: " + line);
        out.push_back({detail::parse_long(a, "step"), detail::parse_double(b, "total"), detail::parse_double(c, "recon"),
                       detail::parse_double(d, "commit"), detail::parse_double(e, "entropy"),
                       detail::parse_double(f, "codebook"), detail::parse_double(g, "l1")});
    }
    return out;
}

/// Mean of the last `window` values ending at index `end` (exclusive).
inline double smoothed(const std::vector<LossRecord>& h, std::size_t end, std::size_t window,
                       double LossRecord::*field = &LossRecord::l1) {
    if (end == 0 || end > h.size()) throw DomainError("smoothed: bad range");
    const std::size_t begin = end > window ? end - window : 0;
    double acc = 0.0;
    for (std::size_t i = begin; i < end; ++i) acc += h[i].*field;
    return acc / double(end - begin);
}

/// Step counter, optimizer moments, rng and loss history for one codec run.
/// The codec's parameters complete the resumable state.
class TokenizerTrainer {
public:
    TokenizerTrainer(Codec& codec, const std::vector<Tensor>& images, TokenizerTrainConfig cfg)
        : codec_(codec), images_(images), cfg_(cfg), opt_(cfg.adam), rng_(cfg.seed) {
        if (images_.empty()) throw DomainError("train_tokenizer: empty corpus");
        if (cfg_.batch == 0) throw ConfigError("train_tokenizer: batch must be positive");
        if (!(cfg_.decay_rate > 0.0f)) throw ConfigError("train_tokenizer: decay_rate must be positive");
        schedule_ = LrSchedule{cfg_.peak_lr, cfg_.warmup, cfg_.steps, cfg_.decay_rate};
    }

    long step() const { return step_; }
    const std::vector<LossRecord>& history() const { return history_; }
    const AdamW& optimizer() const { return opt_; }
    const Rng& rng() const { return rng_; }
    const TokenizerTrainConfig& config() const { return cfg_; }

    /// One optimizer update. Non-finite values raise TrainingError with the
    /// parameters left at their last good values.
    LossRecord advance() {
        std::vector<std::size_t> pick(cfg_.batch);
        for (auto& p : pick) p = std::size_t(rng_.below(images_.size()));
        Tensor batch = stack_images(images_, pick);
        const long next = step_ + 1;
        LossRecord rec;
        try {
            CodecForward fwd = codec_.forward(batch, rng_, true);
            TokenizerLoss loss = codec_.loss(batch, fwd);
            rec = {next, loss.total.item_extended(), loss.reconstruction.item_extended(), loss.commitment.item_extended(),
                   loss.entropy.item_extended(), loss.codebook.item_extended(), loss.l1};
            if (!std::isfinite(rec.total)) throw NumericError("non-finite tokenizer loss");
            loss.total.backward();
            opt_.step(codec_.params(), schedule_.at(next), next);
        } catch (const NumericError& e) {
            codec_.params().zero_grad();
            throw TrainingError("tokenizer training diverged at step " + std::to_string(next) + ": " + e.what());
        }
        step_ = next;
        history_.push_back(rec);
        return rec;
    }

    void run_until(long last, const std::function<void(const LossRecord&)>& on_step = {}) {
        while (step_ < last) {
            const LossRecord rec = advance();
            if (on_step) on_step(rec);
        }
    }

    Checkpoint save() const {
        Checkpoint ck;
        capture(ck, codec_.params(), &opt_);
        ck.meta["kind"] = "tokenizer";
        ck.meta["step"] = std::to_string(step_);
        ck.meta["rng"] = rng_.serialize();
        ck.meta["codec"] = kv_text(to_kv(codec_.config()));
        ck.meta["history"] = history_text(history_);
        return ck;
    }

    void load(const Checkpoint& ck) {
        if (ck.meta_at("kind") != "tokenizer") throw ConfigError("not a tokenizer checkpoint");
        if (codec_config_from_kv(parse_kv_text(ck.meta_at("codec"))).vocab_size() != codec_.config().vocab_size()) {
            throw ConfigError("checkpoint codebook size does not match the configured tokenizer");
        }
        restore(ck, codec_.params(), &opt_);
        step_ = detail::parse_long(ck.meta_at("step"), "step");
        rng_ = Rng::deserialize(ck.meta_at("rng"));
        history_ = parse_history(ck.meta_at("history"));
    }

private:
    Codec& codec_;
    const std::vector<Tensor>& images_;
    TokenizerTrainConfig cfg_;
    LrSchedule schedule_;
    AdamW opt_;
    Rng rng_;
    long step_ = 0;
    std::vector<LossRecord> history_;
};

/// Rebuilds a codec from a tokenizer checkpoint (weights only).
inline Codec load_codec(const Checkpoint& ck) {
    Codec codec(codec_config_from_kv(parse_kv_text(ck.meta_at("codec"))));
    restore(ck, codec.params());
    return codec;
}

}  // namespace textbin
