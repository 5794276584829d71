#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "textbin/nn.hpp"
#include "textbin/ops.hpp"
#include "textbin/random.hpp"

namespace textbin {

inline constexpr int kMaxCodeDims = 24;

struct BinaryQuantizerConfig {
    int dims = 8;  // codebook size is 2^dims
    float entropy_weight = 0.1f;
    float entropy_batch_weight = 0.1f;
    float commitment_weight = 0.25f;
    float temperature = 1.0f;

    std::uint64_t codebook_size() const { return std::uint64_t{1} << dims; }

    void validate() const {
        if (dims < 1 || dims > kMaxCodeDims) throw ConfigError("quantizer dims must be in [1, 24]");
        if (entropy_weight < 0 || entropy_batch_weight < 0 || commitment_weight < 0) {
            throw ConfigError("quantizer loss weights must be non-negative");
        }
        if (!(temperature > 0)) throw ConfigError("quantizer temperature must be positive");
    }
};

/// A length-d sign vector and its token index; bit k of the index is set
/// exactly when sign k is +1.
struct BinaryCode {
    std::vector<std::int8_t> signs;
    std::uint32_t index = 0;

    bool operator==(const BinaryCode&) const = default;
};

inline std::uint32_t code_index(std::span<const float> signs_or_values) {
    std::uint32_t index = 0;
    for (std::size_t k = 0; k < signs_or_values.size(); ++k) {
        if (signs_or_values[k] > 0.0f) index |= std::uint32_t{1} << k;
    }
    return index;
}

inline BinaryCode index_to_code(std::uint64_t index, int dims) {
    if (dims < 1 || dims > kMaxCodeDims) throw DomainError("index_to_code: dims must be in [1, 24]");
    if (index >= (std::uint64_t{1} << dims)) {
        throw DomainError("index_to_code: index " + std::to_string(index) + " outside [0, 2^" + std::to_string(dims) + ")");
    }
    BinaryCode code;
    code.index = static_cast<std::uint32_t>(index);
    code.signs.resize(static_cast<std::size_t>(dims));
    for (int k = 0; k < dims; ++k) code.signs[k] = ((index >> k) & 1u) ? 1 : -1;
    return code;
}

/// Sign tensor [N x d] for a list of token indices.
inline Tensor indices_to_signs(std::span<const std::uint32_t> indices, int dims) {
    std::vector<float> data(indices.size() * static_cast<std::size_t>(dims));
    for (std::size_t n = 0; n < indices.size(); ++n) {
        const BinaryCode code = index_to_code(indices[n], dims);
        for (int k = 0; k < dims; ++k) data[n * dims + k] = code.signs[k];
    }
    return Tensor(Shape{indices.size(), static_cast<std::size_t>(dims)}, std::move(data));
}

struct BinaryQuantization {
    Tensor quantized;                    // same shape as the input, entries +-1
    std::vector<std::uint32_t> indices;  // one per position (product of leading axes)
    int dims = 0;

    BinaryCode code(std::size_t position) const {
        BinaryCode c;
        c.index = indices.at(position);
        c.signs.resize(static_cast<std::size_t>(dims));
        for (int k = 0; k < dims; ++k) c.signs[k] = quantized.data()[position * dims + k] > 0.0f ? 1 : -1;
        return c;
    }
};

/// Per-dimension sign quantization with sign(0) = -1 and a straight-through
/// backward pass.
inline BinaryQuantization binary_quantize(const Tensor& x, int dims) {
    if (dims < 1 || dims > kMaxCodeDims) throw DomainError("binary_quantize: dims must be in [1, 24]");
    if (x.shape().back() != static_cast<std::size_t>(dims)) {
        throw DimensionError("binary_quantize: last axis " + std::to_string(x.shape().back()) + " != dims " +
                             std::to_string(dims));
    }
    detail::check_finite(x.data(), "binary_quantize input");
    const std::size_t positions = x.numel() / dims;
    std::vector<float> signs(x.numel());
    BinaryQuantization out;
    out.dims = dims;
    out.indices.resize(positions);
    for (std::size_t n = 0; n < positions; ++n) {
        for (int k = 0; k < dims; ++k) signs[n * dims + k] = x.data()[n * dims + k] > 0.0f ? 1.0f : -1.0f;
        out.indices[n] = code_index(std::span<const float>(signs).subspan(n * dims, dims));
    }
    out.quantized = straight_through(x, Tensor(x.shape(), std::move(signs)));
    return out;
}

namespace detail {

inline double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

// Binary entropy (nats) of sigmoid(z), stable for large |z|.
inline double logistic_entropy(double z) {
    const double p = 1.0 / (1.0 + std::exp(-z));
    return p * softplus(-z) + (1.0 - p) * softplus(z);
}

inline double binary_entropy(double q) {
    double h = 0.0;
    if (q > 0.0) h -= q * std::log(q);
    if (q < 1.0) h -= (1.0 - q) * std::log(1.0 - q);
    return h;
}

}  // namespace detail

/// entropy_weight * mean_{n,k} H(p_nk) - entropy_batch_weight * mean_k H(mean_n p_nk)
/// with p_nk = sigmoid(2 x_nk / temperature). Low per-sample entropy makes
/// codes confident; high batch entropy spreads usage across codes.
inline Tensor entropy_penalty(const Tensor& x, const BinaryQuantizerConfig& cfg) {
    if (x.rank() != 2) throw DimensionError("entropy_penalty: expected [N x d]");
    const std::size_t rows = x.dim(0), d = x.dim(1);
    const double tau = cfg.temperature;
    std::vector<double> p(x.numel());
    std::vector<double> q(d, 0.0);
    double per_sample = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double z = 2.0 * x.data()[i] / tau;
        p[i] = 1.0 / (1.0 + std::exp(-z));
        per_sample += detail::logistic_entropy(z);
        q[i % d] += p[i];
    }
    per_sample /= double(x.numel());
    double batch = 0.0;
    for (auto& qk : q) {
        qk /= double(rows);
        batch += detail::binary_entropy(qk);
    }
    batch /= double(d);
    const double value = cfg.entropy_weight * per_sample - cfg.entropy_batch_weight * batch;
    const double w1 = cfg.entropy_weight, w2 = cfg.entropy_batch_weight;
    return detail::with_extended(detail::make_result(
        Shape{1}, {static_cast<float>(value)}, {&x}, "entropy_penalty",
        [xn = x.node().get(), p = std::move(p), q = std::move(q), rows, d, tau, w1, w2](detail::Node& self) {
            const double upstream = self.grad[0];
            std::vector<double> batch_slope(d);
            for (std::size_t k = 0; k < d; ++k) {
                const double qk = std::clamp(q[k], 1e-12, 1.0 - 1e-12);
                batch_slope[k] = std::log((1.0 - qk) / qk);  // dH/dq
            }
            std::vector<float> g(p.size());
            const double n_all = double(rows * d);
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double z = 2.0 * xn->data[i] / tau;
                const double dp_dx = (2.0 / tau) * p[i] * (1.0 - p[i]);
                // dH(sigmoid(z))/dp = log((1-p)/p) = -z
                const double d_sample = -z * dp_dx / n_all;
                const double d_batch = batch_slope[i % d] * dp_dx / double(rows) / double(d);
                g[i] = static_cast<float>(upstream * (w1 * d_sample - w2 * d_batch));
            }
            xn->accumulate(g);
        }), value);
}

/// beta * mean((x - stopgrad(quantized))^2); no gradient reaches `quantized`.
inline Tensor commitment_loss(const Tensor& x, const Tensor& quantized, float beta) {
    detail::require_same_shape(x, quantized, "commitment_loss");
    Tensor err = mse_loss(x, quantized.detach());
    return detail::with_extended(scale(err, beta), double(beta) * err.item_extended());
}

// ---------------------------------------------------------------------------
// Vector quantization baseline

struct VqCodebook {
    Tensor entries;  // [K x D]
    std::vector<std::uint64_t> usage_counts;

    VqCodebook() = default;
    explicit VqCodebook(Tensor e) : entries(std::move(e)), usage_counts(entries.dim(0), 0) {}

    std::size_t size() const { return entries.defined() ? entries.dim(0) : 0; }
    std::size_t width() const { return entries.dim(1); }

    /// Unit-normal draws, each row L2-normalized.
    static Tensor random_entries(std::size_t count, std::size_t width, Rng& rng) {
        Tensor t = normal_tensor({count, width}, 1.0f, rng);
        for (std::size_t r = 0; r < count; ++r) {
            double norm = 0.0;
            for (std::size_t j = 0; j < width; ++j) norm += double(t.data()[r * width + j]) * t.data()[r * width + j];
            norm = std::sqrt(norm);
            for (std::size_t j = 0; j < width; ++j) t.data()[r * width + j] = static_cast<float>(t.data()[r * width + j] / norm);
        }
        return t;
    }
};

struct VqResult {
    std::vector<std::uint32_t> indices;
    Tensor quantized;  // selected entries forward, straight-through to f
    Tensor codewords;  // selected entries with gradient flowing to the codebook
};

/// Nearest codebook entry per position by squared Euclidean distance; ties go
/// to the lowest index.
inline VqResult vq_encode(const Tensor& f, VqCodebook& codebook) {
    if (codebook.size() == 0) throw DomainError("vq_encode: empty codebook");
    const std::size_t width = codebook.width();
    if (f.shape().back() != width) throw DimensionError("vq_encode: feature width does not match codebook");
    const std::size_t positions = f.numel() / width, count = codebook.size();
    VqResult out;
    out.indices.resize(positions);
    const float* e = codebook.entries.data().data();
    const float* fd = f.data().data();
    // Screen with |e|^2 - 2 f.e in float, rescore near-best entries in double.
    std::vector<float> norms(count);
    for (std::size_t c = 0; c < count; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j < width; ++j) acc += double(e[c * width + j]) * e[c * width + j];
        norms[c] = static_cast<float>(acc);
    }
    constexpr std::size_t kChunk = 256;
    std::vector<float> dots(kChunk * count);
    for (std::size_t n0 = 0; n0 < positions; n0 += kChunk) {
        const std::size_t rows = std::min(kChunk, positions - n0);
        detail::gemm(fd + n0 * width, false, e, true, dots.data(), rows, count, width, false);
        for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t n = n0 + r;
            const float* row = fd + n * width;
            const float* dr = dots.data() + r * count;
            float fnorm = 0.0f, best_score = std::numeric_limits<float>::infinity();
            for (std::size_t j = 0; j < width; ++j) fnorm += row[j] * row[j];
            float max_norm = 0.0f;
            for (std::size_t c = 0; c < count; ++c) {
                best_score = std::min(best_score, norms[c] - 2.0f * dr[c]);
                max_norm = std::max(max_norm, norms[c]);
            }
            const float margin = 1e-4f * (fnorm + max_norm + 1.0f);
            double best = std::numeric_limits<double>::infinity();
            std::uint32_t best_idx = 0;
            for (std::size_t c = 0; c < count; ++c) {
                if (norms[c] - 2.0f * dr[c] > best_score + margin) continue;
                double dist = 0.0;
                for (std::size_t j = 0; j < width; ++j) {
                    const double diff = double(row[j]) - e[c * width + j];
                    dist += diff * diff;
                }
                if (dist < best) {
                    best = dist;
                    best_idx = static_cast<std::uint32_t>(c);
                }
            }
            out.indices[n] = best_idx;
            ++codebook.usage_counts[best_idx];
        }
    }
    Tensor gathered = embedding(codebook.entries, out.indices);
    out.codewords = reshape(gathered, f.shape());
    out.quantized = straight_through(f, out.codewords.detach());
    return out;
}

// ---------------------------------------------------------------------------
// Codebook usage

struct CodebookStats {
    std::vector<std::uint64_t> counts;
    std::uint64_t total = 0;

    explicit CodebookStats(std::uint64_t size = 0) : counts(size, 0) {}

    double utilization() const {
        if (counts.empty()) return 0.0;
        std::size_t used = 0;
        for (auto c : counts) used += c > 0;
        return double(used) / double(counts.size());
    }
};

inline CodebookStats& update_stats(CodebookStats& stats, std::span<const std::uint32_t> indices) {
    for (auto i : indices) {
        if (i >= stats.counts.size()) throw DomainError("update_stats: index " + std::to_string(i) + " out of range");
    }
    for (auto i : indices) ++stats.counts[i];
    stats.total += indices.size();
    return stats;
}

inline double utilization(const CodebookStats& stats) { return stats.utilization(); }

// ---------------------------------------------------------------------------
// Projector

/// Maps [N x D] features to [N x d] pre-quantization embeddings. Depth 1 is a
/// single affine map; depth 3 runs three pre-norm transformer blocks over
/// each sample's spatial token sequence before the affine head.
class Projector {
public:
    Projector() = default;

    Projector(ParameterSet& params, const std::string& name, std::size_t in_width, std::size_t out_dims, int depth,
              Rng& rng)
        : depth_(depth) {
        if (depth != 1 && depth != 3) throw ConfigError("projector depth must be 1 or 3");
        if (depth == 3) {
            const std::size_t heads = in_width % 4 == 0 ? 4 : 1;
            for (int i = 0; i < depth; ++i) {
                blocks_.push_back(TransformerBlock::create(params, name + ".block" + std::to_string(i), in_width, heads, rng));
            }
            final_norm_ = LayerNorm::create(params, name + ".ln_out", in_width);
        }
        head_ = Linear::create(params, name + ".head", in_width, out_dims, rng);
    }

    int depth() const { return depth_; }
    Linear& head() { return head_; }

    /// `tokens_per_sample` groups rows into sequences for attention.
    Tensor operator()(const Tensor& f, std::size_t tokens_per_sample) const {
        if (f.rank() != 2) throw DimensionError("projector: expected [N x D] input");
        if (depth_ == 1) return head_(f);
        if (tokens_per_sample == 0 || f.dim(0) % tokens_per_sample != 0) {
            throw DimensionError("projector: rows must be a multiple of tokens_per_sample");
        }
        std::vector<std::size_t> segments(f.dim(0) / tokens_per_sample, tokens_per_sample);
        Tensor h = f;
        for (const auto& block : blocks_) h = block(h, segments, false, 0.0f, nullptr, false);
        return head_(final_norm_(h));
    }

private:
    int depth_ = 1;
    std::vector<TransformerBlock> blocks_;
    LayerNorm final_norm_;
    Linear head_;
};

// ---------------------------------------------------------------------------
// Hybrid VQ -> projector -> binary path

struct HybridOutput {
    BinaryQuantization codes;            // z_TB and its indices
    Tensor pre_quant;                    // projector output x, [N x d]
    Tensor branch_input;                 // per-sample mix of raw and VQ features
    std::vector<std::uint8_t> routed;    // 1 where the sample took the VQ branch
    std::vector<std::uint32_t> vq_indices;
};

/// f is [B x T x D] (T spatial tokens per sample, any leading spatial layout
/// flattened). Each sample independently takes the VQ branch with
/// probability route_prob; the codebook receives no gradient.
inline HybridOutput hybrid_forward(const Tensor& f, VqCodebook& vq, const Projector& projector, const BinaryQuantizerConfig& cfg,
                                   double route_prob, Rng& rng) {
    if (route_prob < 0.0 || route_prob > 1.0) throw DomainError("hybrid_forward: route_prob must be in [0, 1]");
    if (f.rank() < 2) throw DimensionError("hybrid_forward: expected [B x ... x D]");
    const std::size_t batch = f.dim(0), width = f.shape().back();
    const std::size_t tokens = f.numel() / (batch * width);
    HybridOutput out;
    out.routed.resize(batch);
    for (auto& r : out.routed) r = rng.bernoulli(route_prob) ? 1 : 0;
    Tensor branch = f;
    if (vq.size() > 0 && std::any_of(out.routed.begin(), out.routed.end(), [](auto r) { return r != 0; })) {
        const bool was = vq.entries.requires_grad();
        vq.entries.set_requires_grad(false);
        VqResult v = vq_encode(f, vq);
        vq.entries.set_requires_grad(was);
        out.vq_indices = std::move(v.indices);
        branch = select_samples(f, v.quantized, out.routed);
    } else if (vq.size() == 0 && route_prob > 0.0) {
        throw DomainError("hybrid_forward: VQ branch requested without a codebook");
    }
    out.branch_input = branch;
    out.pre_quant = projector(reshape(branch, {batch * tokens, width}), tokens);
    out.codes = binary_quantize(out.pre_quant, cfg.dims);
    return out;
}

}  // namespace textbin
