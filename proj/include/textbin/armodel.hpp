#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "textbin/checkpoint.hpp"
#include "textbin/codec.hpp"
#include "textbin/nn.hpp"
#include "textbin/textrender.hpp"

namespace textbin {

/// Unified id space: visual codes first, then four specials, then one id per
/// printable ASCII byte.
///
///   [0, K)            visual token k
///   K                 BOS
///   K + 1             BOI (begin image)
///   K + 2             EOI (end image)
///   K + 3             PAD (also the mask token)
///   K + 4 + (b - 32)  text byte b
struct VocabLayout {
    static constexpr std::size_t kSpecialCount = 4;
    static constexpr std::size_t kTextCount = kGlyphCount;

    std::size_t visual = 0;

    static VocabLayout for_visual(std::size_t k) {
        if (k == 0) throw ConfigError("vocabulary needs at least one visual token");
        return VocabLayout{k};
    }

    std::uint32_t bos() const { return id(visual); }
    std::uint32_t boi() const { return id(visual + 1); }
    std::uint32_t eoi() const { return id(visual + 2); }
    std::uint32_t pad() const { return id(visual + 3); }
    std::size_t text_base() const { return visual + kSpecialCount; }
    std::size_t total() const { return text_base() + kTextCount; }

    bool is_visual(std::uint32_t t) const { return t < visual; }
    bool is_special(std::uint32_t t) const { return t >= visual && t < text_base(); }
    bool is_text(std::uint32_t t) const { return t >= text_base() && t < total(); }

private:
    static std::uint32_t id(std::size_t v) { return static_cast<std::uint32_t>(v); }
};

inline std::vector<std::uint32_t> text_tokenize(const VocabLayout& vocab, const std::string& s) {
    require_printable(s, "text_tokenize");
    std::vector<std::uint32_t> out;
    out.reserve(s.size());
    for (unsigned char c : s) out.push_back(static_cast<std::uint32_t>(vocab.text_base() + (c - kFirstChar)));
    return out;
}

inline std::string text_detokenize(const VocabLayout& vocab, std::span<const std::uint32_t> ids) {
    std::string out;
    out.reserve(ids.size());
    for (auto t : ids) {
        if (!vocab.is_text(t)) throw DomainError("text_detokenize: id " + std::to_string(t) + " is not a text token");
        out.push_back(static_cast<char>(kFirstChar + (t - vocab.text_base())));
    }
    return out;
}

/// [BOS] prompt [BOI] image... [EOI]; `image_start`/`image_length` locate the
/// image span.
struct TokenSequence {
    std::vector<std::uint32_t> ids;
    std::size_t image_start = 0;
    std::size_t image_length = 0;
};

/// Builds the sequence for `prompt`. Without `image`, the span is filled with PAD.
inline TokenSequence make_sequence(const VocabLayout& vocab, const std::string& prompt, std::size_t image_tokens,
                                   std::span<const std::uint32_t> image = {}) {
    if (image_tokens == 0) throw DomainError("make_sequence: empty image span");
    if (!image.empty() && image.size() != image_tokens) {
        throw DimensionError("make_sequence: expected " + std::to_string(image_tokens) + " image tokens");
    }
    TokenSequence seq;
    seq.ids.push_back(vocab.bos());
    auto text = text_tokenize(vocab, prompt);
    seq.ids.insert(seq.ids.end(), text.begin(), text.end());
    seq.ids.push_back(vocab.boi());
    seq.image_start = seq.ids.size();
    seq.image_length = image_tokens;
    if (image.empty()) {
        seq.ids.insert(seq.ids.end(), image_tokens, vocab.pad());
    } else {
        for (auto t : image) {
            if (!vocab.is_visual(t)) throw DomainError("make_sequence: image token " + std::to_string(t) + " is not visual");
        }
        seq.ids.insert(seq.ids.end(), image.begin(), image.end());
    }
    seq.ids.push_back(vocab.eoi());
    return seq;
}

/// The model input for `seq`: every image-span id replaced by PAD.
inline std::vector<std::uint32_t> masked_input(const VocabLayout& vocab, const TokenSequence& seq) {
    if (seq.image_length == 0) throw DomainError("masked_input: empty image span");
    std::vector<std::uint32_t> ids = seq.ids;
    std::fill_n(ids.begin() + static_cast<std::ptrdiff_t>(seq.image_start), seq.image_length, vocab.pad());
    for (auto t : ids) {
        if (vocab.is_visual(t)) throw DomainError("masked_input: visual id leaked into the model input");
    }
    return ids;
}

struct ArConfig {
    std::size_t layers = 4;
    std::size_t heads = 4;
    std::size_t model_dim = 128;
    std::size_t context_len = 512;
    float dropout = 0.1f;
    bool causal = false;

    void validate() const {
        if (layers == 0 || heads == 0 || model_dim == 0 || context_len == 0) throw ConfigError("ArConfig: sizes must be positive");
        if (model_dim % heads != 0) throw ConfigError("ArConfig: heads must divide model_dim");
        if (!(dropout >= 0.0f && dropout < 1.0f)) throw ConfigError("ArConfig: dropout must be in [0, 1)");
    }
};

inline std::map<std::string, std::string> to_kv(const ArConfig& c) {
    return {{"layers", std::to_string(c.layers)},
            {"heads", std::to_string(c.heads)},
            {"model_dim", std::to_string(c.model_dim)},
            {"context_len", std::to_string(c.context_len)},
            {"dropout", detail::fmt_double(c.dropout)},
            {"causal", c.causal ? "true" : "false"}};
}

inline void set_key(ArConfig& c, const std::string& key, const std::string& value) {
    auto count = [&](const char* what) {
        const long v = detail::parse_long(value, what);
        if (v <= 0) throw ConfigError(std::string(what) + " must be positive");
        return static_cast<std::size_t>(v);
    };
    if (key == "layers") c.layers = count("layers");
    else if (key == "heads") c.heads = count("heads");
    else if (key == "model_dim") c.model_dim = count("model_dim");
    else if (key == "context_len") c.context_len = count("context_len");
    else if (key == "dropout") c.dropout = static_cast<float>(detail::parse_double(value, "dropout"));
    else if (key == "causal") c.causal = detail::parse_bool(value, "causal");
    else throw ConfigError("unknown ar key: " + key);
}

inline ArConfig ar_config_from_kv(const std::map<std::string, std::string>& kv) {
    ArConfig c;
    for (const auto& [k, v] : kv) set_key(c, k, v);
    c.validate();
    return c;
}

enum class SampleMode { greedy, top_k };

struct GenerateOptions {
    SampleMode mode = SampleMode::greedy;
    std::size_t k = 16;
    float temperature = 1.0f;
    std::uint64_t seed = 0;
};

/// Transformer over the unified vocabulary. Text and special rows of the
/// embedding table and of the output projection are frozen at initialization.
class ArModel {
public:
    ArModel(ArConfig cfg, VocabLayout vocab, std::size_t image_tokens, std::uint64_t seed = 0)
        : cfg_(cfg), vocab_(vocab), image_tokens_(image_tokens) {
        cfg_.validate();
        if (image_tokens_ == 0) throw ConfigError("ArModel: image span must be nonempty");
        if (image_tokens_ + 3 > cfg_.context_len) throw CapacityError("ArModel: image span does not fit the context");
        Rng rng(seed);
        const std::size_t C = cfg_.model_dim, V = vocab_.total();
        table_ = params_.add("embed.table", normal_tensor({V, C}, 0.02f, rng), false);
        positions_ = params_.add("embed.position", normal_tensor({cfg_.context_len, C}, 0.02f, rng), false);
        for (std::size_t i = 0; i < cfg_.layers; ++i) {
            blocks_.push_back(TransformerBlock::create(params_, "block" + std::to_string(i), C, cfg_.heads, rng));
        }
        final_norm_ = LayerNorm::create(params_, "final_norm", C);
        head_ = params_.add("head.weight", normal_tensor({V, C}, 0.02f, rng));
        const RowRange fixed{vocab_.visual, V};
        params_.at("embed.table").frozen_rows = fixed;
        params_.at("head.weight").frozen_rows = fixed;
    }

    ArModel(const ArModel&) = delete;
    ArModel& operator=(const ArModel&) = delete;
    ArModel(ArModel&&) = default;
    ArModel& operator=(ArModel&&) = default;

    const ArConfig& config() const { return cfg_; }
    const VocabLayout& vocab() const { return vocab_; }
    std::size_t image_tokens() const { return image_tokens_; }
    ParameterSet& params() { return params_; }
    const ParameterSet& params() const { return params_; }

    TokenSequence sequence(const std::string& prompt, std::span<const std::uint32_t> image = {}) const {
        TokenSequence seq = make_sequence(vocab_, prompt, image_tokens_, image);
        if (seq.ids.size() > cfg_.context_len) {
            throw CapacityError("prompt needs " + std::to_string(seq.ids.size()) + " positions, context is " +
                                std::to_string(cfg_.context_len));
        }
        return seq;
    }

    /// Logits [sum(image spans) x total] at the image positions of the masked inputs.
    Tensor image_logits(const std::vector<TokenSequence>& batch, Rng* rng, bool training) const {
        if (batch.empty()) throw DomainError("image_logits: empty batch");
        std::vector<std::uint32_t> ids, pos, rows;
        std::vector<std::size_t> segments;
        for (const auto& seq : batch) {
            if (seq.ids.size() > cfg_.context_len) throw CapacityError("sequence longer than the context");
            const auto in = masked_input(vocab_, seq);
            const auto offset = static_cast<std::uint32_t>(ids.size());
            for (std::size_t i = 0; i < in.size(); ++i) {
                ids.push_back(in[i]);
                pos.push_back(static_cast<std::uint32_t>(i));
            }
            for (std::size_t i = 0; i < seq.image_length; ++i) rows.push_back(offset + static_cast<std::uint32_t>(seq.image_start + i));
            segments.push_back(in.size());
        }
        Tensor h = add(embedding(table_, ids), embedding(positions_, pos));
        for (const auto& block : blocks_) h = block(h, segments, cfg_.causal, cfg_.dropout, rng, training);
        h = final_norm_(embedding(h, rows));
        return matmul_nt(h, head_);
    }

    /// Mean negative log-likelihood of the true visual ids at the image positions.
    Tensor masked_loss(const std::vector<TokenSequence>& batch, Rng* rng, bool training) const {
        Tensor logits = image_logits(batch, rng, training);
        std::vector<std::uint32_t> targets;
        for (const auto& seq : batch) {
            for (std::size_t i = 0; i < seq.image_length; ++i) {
                const auto t = seq.ids[seq.image_start + i];
                if (!vocab_.is_visual(t)) throw DomainError("masked_loss: target " + std::to_string(t) + " is not visual");
                targets.push_back(t);
            }
        }
        std::vector<std::uint8_t> mask(targets.size(), 1);
        return softmax_cross_entropy(logits, targets, mask);
    }

    /// Image token grid for `prompt`, raster order. Each position is chosen
    /// from the distribution restricted to visual ids.
    std::vector<std::uint32_t> generate(const std::string& prompt, const GenerateOptions& opt = {}) const {
        if (opt.mode == SampleMode::top_k && (opt.k == 0 || !(opt.temperature > 0.0f))) {
            throw DomainError("generate: top-k needs k > 0 and temperature > 0");
        }
        const TokenSequence seq = sequence(prompt);
        const Tensor logits = image_logits({seq}, nullptr, false);
        const std::size_t V = vocab_.total(), K = vocab_.visual;
        Rng rng(opt.seed);
        std::vector<std::uint32_t> grid(image_tokens_);
        std::vector<std::uint32_t> order(K);
        std::vector<double> weights;
        for (std::size_t p = 0; p < image_tokens_; ++p) {
            const float* row = logits.data().data() + p * V;
            if (opt.mode == SampleMode::greedy) {
                grid[p] = static_cast<std::uint32_t>(std::max_element(row, row + K) - row);
                continue;
            }
            const std::size_t k = std::min(opt.k, K);
            std::iota(order.begin(), order.end(), 0u);
            std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                              [&](std::uint32_t a, std::uint32_t b) { return row[a] > row[b] || (row[a] == row[b] && a < b); });
            weights.assign(k, 0.0);
            const double top = row[order[0]];
            double total = 0.0;
            for (std::size_t i = 0; i < k; ++i) total += weights[i] = std::exp((row[order[i]] - top) / opt.temperature);
            double u = double(rng.uniform()) * total;
            std::size_t pick = 0;
            while (pick + 1 < k && u >= weights[pick]) u -= weights[pick++];
            grid[p] = order[pick];
        }
        return grid;
    }

private:
    ArConfig cfg_;
    VocabLayout vocab_;
    std::size_t image_tokens_ = 0;
    ParameterSet params_;
    Tensor table_;
    Tensor positions_;
    std::vector<TransformerBlock> blocks_;
    LayerNorm final_norm_;
    Tensor head_;
};

// ---------------------------------------------------------------------------
// Training

struct ArExample {
    std::string prompt;
    std::vector<std::uint32_t> tokens;
};

struct ArTrainConfig {
    long max_steps = 3000;
    std::size_t batch = 8;
    float peak_lr = 1e-3f;
    long warmup = 100;
    double target_loss = 0.1;  // stop once a step's loss falls below this; <= 0 disables
    std::uint64_t seed = 0;
    AdamWConfig adam;
};

struct ArRecord {
    long step = 0;
    double loss = 0.0;
};

inline std::string ar_history_text(const std::vector<ArRecord>& h) {
    std::string out;
    for (const auto& r : h) out += std::to_string(r.step) + " " + detail::fmt_double(r.loss) + "\n";
    return out;
}

inline std::vector<ArRecord> parse_ar_history(const std::string& text) {
    std::vector<ArRecord> out;
    std::istringstream in(text);
    std::string a, b;
    while (in >> a >> b) out.push_back({detail::parse_long(a, "step"), detail::parse_double(b, "loss")});
    if (!in.eof()) throw ConfigError("corrupt ar history");
    return out;
}

/// Masked-objective training over fixed (prompt, token grid) pairs. When the
/// batch covers the whole set every step sees every pair in order.
class ArTrainer {
public:
    ArTrainer(ArModel& model, const std::vector<ArExample>& data, ArTrainConfig cfg)
        : model_(model), cfg_(cfg), opt_(cfg.adam), rng_(cfg.seed) {
        if (data.empty()) throw DomainError("train_ar: no training pairs");
        if (cfg_.batch == 0) throw ConfigError("train_ar: batch must be positive");
        for (const auto& ex : data) seqs_.push_back(model_.sequence(ex.prompt, ex.tokens));
        schedule_ = LrSchedule{cfg_.peak_lr, cfg_.warmup, cfg_.max_steps, 5.0f};
    }

    long step() const { return step_; }
    const std::vector<ArRecord>& history() const { return history_; }
    const AdamW& optimizer() const { return opt_; }
    const Rng& rng() const { return rng_; }

    bool converged() const { return cfg_.target_loss > 0.0 && !history_.empty() && history_.back().loss < cfg_.target_loss; }
    bool finished() const { return step_ >= cfg_.max_steps || converged(); }

    ArRecord advance() {
        std::vector<TokenSequence> batch;
        if (cfg_.batch >= seqs_.size()) {
            batch = seqs_;
        } else {
            for (std::size_t i = 0; i < cfg_.batch; ++i) batch.push_back(seqs_[rng_.below(seqs_.size())]);
        }
        const long next = step_ + 1;
        ArRecord rec{next, 0.0};
        try {
            Tensor loss = model_.masked_loss(batch, &rng_, true);
            rec.loss = loss.item_extended();
            if (!std::isfinite(rec.loss)) throw NumericError("non-finite masked loss");
            loss.backward();
            opt_.step(model_.params(), schedule_.at(next), next);
        } catch (const NumericError& e) {
            model_.params().zero_grad();
            throw TrainingError("ar training diverged at step " + std::to_string(next) + ": " + e.what());
        }
        step_ = next;
        history_.push_back(rec);
        return rec;
    }

    /// Trains until `last` steps, the step budget, or the loss target.
    void run(long last = -1, const std::function<void(const ArRecord&)>& on_step = {}) {
        while (!finished() && (last < 0 || step_ < last)) {
            const ArRecord rec = advance();
            if (on_step) on_step(rec);
        }
    }

    Checkpoint save() const {
        Checkpoint ck;
        capture(ck, model_.params(), &opt_);
        ck.meta["kind"] = "ar";
        ck.meta["step"] = std::to_string(step_);
        ck.meta["rng"] = rng_.serialize();
        ck.meta["ar"] = kv_text(to_kv(model_.config()));
        ck.meta["visual_vocab"] = std::to_string(model_.vocab().visual);
        ck.meta["image_tokens"] = std::to_string(model_.image_tokens());
        ck.meta["history"] = ar_history_text(history_);
        return ck;
    }

    void load(const Checkpoint& ck) {
        if (ck.meta_at("kind") != "ar") throw ConfigError("not an ar checkpoint");
        restore(ck, model_.params(), &opt_);
        step_ = detail::parse_long(ck.meta_at("step"), "step");
        rng_ = Rng::deserialize(ck.meta_at("rng"));
        history_ = parse_ar_history(ck.meta_at("history"));
    }

private:
    ArModel& model_;
    std::vector<TokenSequence> seqs_;
    ArTrainConfig cfg_;
    LrSchedule schedule_;
    AdamW opt_;
    Rng rng_;
    long step_ = 0;
    std::vector<ArRecord> history_;
};

/// Rebuilds an AR model from its checkpoint (weights only).
inline ArModel load_ar_model(const Checkpoint& ck) {
    if (ck.meta_at("kind") != "ar") throw ConfigError("not an ar checkpoint");
    const long visual = detail::parse_long(ck.meta_at("visual_vocab"), "visual_vocab");
    const long tokens = detail::parse_long(ck.meta_at("image_tokens"), "image_tokens");
    if (visual <= 0 || tokens <= 0) throw ConfigError("ar checkpoint: bad vocabulary metadata");
    ArModel model(ar_config_from_kv(parse_kv_text(ck.meta_at("ar"))), VocabLayout::for_visual(std::size_t(visual)),
                  std::size_t(tokens));
    restore(ck, model.params());
    return model;
}

}  // namespace textbin
