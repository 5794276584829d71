#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "textbin/ops.hpp"
#include "textbin/random.hpp"

namespace textbin {

/// Rows [begin, end) of a rank>=2 parameter that the optimizer must leave untouched.
struct RowRange {
    std::size_t begin = 0;
    std::size_t end = 0;
    bool contains(std::size_t row) const { return row >= begin && row < end; }
};

struct Parameter {
    std::string name;
    Tensor tensor;
    bool frozen = false;
    std::optional<RowRange> frozen_rows;
    bool decay = true;  // decoupled weight decay applies
};

/// Ordered, uniquely named parameter collection. Order is registration order
/// and fixes the checkpoint layout.
class ParameterSet {
public:
    Tensor add(std::string name, Tensor tensor, bool decay = true) {
        if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
        tensor.set_requires_grad(true);
        index_.emplace(name, params_.size());
        params_.push_back(Parameter{std::move(name), tensor, false, std::nullopt, decay});
        return tensor;
    }

    Parameter& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
        return params_[it->second];
    }
    const Parameter& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
        return params_[it->second];
    }
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    /// Freezes every parameter whose name starts with `prefix`; returns how many matched.
    std::size_t freeze_prefix(const std::string& prefix, bool frozen = true) {
        std::size_t hits = 0;
        for (auto& p : params_) {
            if (p.name.rfind(prefix, 0) == 0) {
                p.frozen = frozen;
                ++hits;
            }
        }
        return hits;
    }

    std::vector<Parameter>& items() { return params_; }
    const std::vector<Parameter>& items() const { return params_; }
    std::size_t size() const { return params_.size(); }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

    std::size_t element_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.tensor.numel();
        return n;
    }

private:
    std::vector<Parameter> params_;
    std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Initializers

inline Tensor normal_tensor(Shape shape, float stddev, Rng& rng) {
    std::vector<float> data(shape_numel(shape));
    for (auto& v : data) v = rng.normal(0.0f, stddev);
    return Tensor(std::move(shape), std::move(data));
}

/// He-normal for a weight whose fan-in is `fan_in`.
inline Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
    return normal_tensor(std::move(shape), std::sqrt(2.0f / static_cast<float>(fan_in)), rng);
}

// ---------------------------------------------------------------------------
// Layers

/// y = x W + b with W stored [in x out].
struct Linear {
    Tensor weight;
    Tensor bias;

    static Linear create(ParameterSet& params, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                         float stddev = -1.0f) {
        Linear layer;
        const float sd = stddev > 0.0f ? stddev : std::sqrt(1.0f / static_cast<float>(in));
        layer.weight = params.add(name + ".weight", normal_tensor({in, out}, sd, rng));
        layer.bias = params.add(name + ".bias", Tensor(Shape{out}), false);
        return layer;
    }

    Tensor operator()(const Tensor& x) const { return add_bias(matmul(x, weight), bias); }
};

struct LayerNorm {
    Tensor gain;
    Tensor bias;

    static LayerNorm create(ParameterSet& params, const std::string& name, std::size_t width) {
        LayerNorm ln;
        ln.gain = params.add(name + ".gain", Tensor(Shape{width}, 1.0f), false);
        ln.bias = params.add(name + ".bias", Tensor(Shape{width}), false);
        return ln;
    }

    Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias, 1e-5f); }
};

/// Pre-norm transformer block: x + Attn(LN(x)), then x + FF(LN(x)).
struct TransformerBlock {
    LayerNorm norm_attn;
    Linear qkv;
    Linear proj;
    LayerNorm norm_ff;
    Linear ff_in;
    Linear ff_out;
    std::size_t heads = 1;

    static TransformerBlock create(ParameterSet& params, const std::string& name, std::size_t width, std::size_t heads,
                                   Rng& rng, std::size_t ff_mult = 4) {
        TransformerBlock block;
        block.heads = heads;
        block.norm_attn = LayerNorm::create(params, name + ".ln_attn", width);
        block.qkv = Linear::create(params, name + ".qkv", width, 3 * width, rng);
        block.proj = Linear::create(params, name + ".proj", width, width, rng);
        block.norm_ff = LayerNorm::create(params, name + ".ln_ff", width);
        block.ff_in = Linear::create(params, name + ".ff_in", width, ff_mult * width, rng);
        block.ff_out = Linear::create(params, name + ".ff_out", ff_mult * width, width, rng);
        return block;
    }

    Tensor operator()(const Tensor& x, const std::vector<std::size_t>& segments, bool causal, float drop, Rng* rng,
                      bool training) const {
        Rng dummy(0);
        Rng& r = rng ? *rng : dummy;
        Tensor attn = proj(self_attention(qkv(norm_attn(x)), segments, heads, causal));
        Tensor h = add(x, dropout(attn, drop, r, training));
        Tensor ff = ff_out(gelu(ff_in(norm_ff(h))));
        return add(h, dropout(ff, drop, r, training));
    }
};

// ---------------------------------------------------------------------------
// Optimization

struct AdamWConfig {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.95f;
    float eps = 1e-5f;
    float weight_decay = 0.1f;
    float clip_norm = 1.0f;
};

/// Linear warm-up to the peak rate, then exponential decay that reaches
/// exactly zero at `total` steps: peak * (e^{-r u} - e^{-r}) / (1 - e^{-r}).
struct LrSchedule {
    float peak = 1e-3f;
    long warmup = 100;
    long total = 1000;
    float decay_rate = 5.0f;

    float at(long step) const {  // step is 1-based
        if (warmup > 0 && step <= warmup) return peak * static_cast<float>(step) / static_cast<float>(warmup);
        if (total <= warmup) return peak;
        const double u = std::clamp(double(step - warmup) / double(total - warmup), 0.0, 1.0);
        const double floor = std::exp(-double(decay_rate));
        return static_cast<float>(peak * (std::exp(-decay_rate * u) - floor) / (1.0 - floor));
    }
};

struct Moments {
    std::vector<float> m;
    std::vector<float> v;
};

/// Adam with decoupled weight decay and global gradient-norm clipping.
/// Frozen parameters and frozen row ranges are never written.
class AdamW {
public:
    AdamW() = default;
    explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

    const AdamWConfig& config() const { return cfg_; }
    std::map<std::string, Moments>& moments() { return moments_; }
    const std::map<std::string, Moments>& moments() const { return moments_; }

    /// Applies one update with learning rate `lr`; `step` is the 1-based
    /// update count used for bias correction. Returns the pre-clip norm.
    double step(ParameterSet& params, float lr, long step) {
        double sq = 0.0;
        for (auto& p : params.items()) {
            if (p.frozen) {
                p.tensor.zero_grad();
                continue;
            }
            if (!p.tensor.has_grad()) continue;
            auto g = p.tensor.mutable_grad();
            detail::check_finite(g, p.name.c_str());
            if (p.frozen_rows) {
                const std::size_t width = p.tensor.numel() / p.tensor.dim(0);
                for (std::size_t r = p.frozen_rows->begin; r < p.frozen_rows->end; ++r) {
                    std::fill_n(g.begin() + r * width, width, 0.0f);
                }
            }
            for (float v : g) sq += double(v) * v;
        }
        const double norm = std::sqrt(sq);
        const float clip = (cfg_.clip_norm > 0.0f && norm > cfg_.clip_norm) ? static_cast<float>(cfg_.clip_norm / norm) : 1.0f;
        const float bc1 = 1.0f - std::pow(cfg_.beta1, static_cast<float>(step));
        const float bc2 = 1.0f - std::pow(cfg_.beta2, static_cast<float>(step));
        for (auto& p : params.items()) {
            if (p.frozen || !p.tensor.has_grad()) continue;
            auto& mom = moments_[p.name];
            if (mom.m.empty()) {
                mom.m.assign(p.tensor.numel(), 0.0f);
                mom.v.assign(p.tensor.numel(), 0.0f);
            }
            auto g = p.tensor.grad();
            auto w = p.tensor.data();
            const std::size_t width = p.tensor.numel() / p.tensor.dim(0);
            const float decay = p.decay ? cfg_.weight_decay : 0.0f;
            for (std::size_t i = 0; i < w.size(); ++i) {
                if (p.frozen_rows && p.frozen_rows->contains(i / width)) continue;
                const float gi = g[i] * clip;
                mom.m[i] = cfg_.beta1 * mom.m[i] + (1.0f - cfg_.beta1) * gi;
                mom.v[i] = cfg_.beta2 * mom.v[i] + (1.0f - cfg_.beta2) * gi * gi;
                const float mhat = mom.m[i] / bc1;
                const float vhat = mom.v[i] / bc2;
                w[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + decay * w[i]);
            }
            p.tensor.zero_grad();
        }
        return norm;
    }

private:
    AdamWConfig cfg_;
    std::map<std::string, Moments> moments_;
};

}  // namespace textbin
