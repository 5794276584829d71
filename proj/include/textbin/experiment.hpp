#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "textbin/armodel.hpp"
#include "textbin/codec.hpp"
#include "textbin/evalkit.hpp"
#include "textbin/textrender.hpp"

namespace textbin {

/// Manifest records with their images in memory, plus split indices.
struct CorpusData {
    CorpusManifest records;
    std::vector<Tensor> images;
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;

    std::vector<Tensor> images_of(const std::vector<std::size_t>& which) const {
        std::vector<Tensor> out;
        for (auto i : which) out.push_back(images[i]);
        return out;
    }
    std::vector<std::string> names_of(const std::vector<std::size_t>& which) const {
        std::vector<std::string> out;
        for (auto i : which) out.push_back(records[i].image);
        return out;
    }
};

namespace detail {

inline CorpusData index_splits(CorpusManifest records, std::vector<Tensor> images) {
    CorpusData d{std::move(records), std::move(images), {}, {}};
    for (std::size_t i = 0; i < d.records.size(); ++i) (d.records[i].split == "test" ? d.test : d.train).push_back(i);
    return d;
}

}  // namespace detail

/// Renders every record in memory.
inline CorpusData render_corpus(const CorpusManifest& records) {
    std::vector<Tensor> images;
    for (const auto& r : records) images.push_back(render(r.spec));
    return detail::index_splits(records, std::move(images));
}

/// Reads a corpus written by generate_corpus.
inline CorpusData load_corpus(const std::string& dir) {
    const std::filesystem::path root(dir);
    CorpusManifest records = load_manifest((root / "manifest.jsonl").string());
    std::vector<Tensor> images;
    for (const auto& r : records) images.push_back(read_ppm((root / r.image).string()));
    return detail::index_splits(std::move(records), std::move(images));
}

/// Indices of the first `n` axis-aligned training records.
inline std::vector<std::size_t> ar_pair_indices(const CorpusData& corpus, std::size_t n) {
    std::vector<std::size_t> out;
    for (auto i : corpus.train) {
        if (out.size() == n) break;
        if (quarter_turns(corpus.records[i].spec.rotation_deg) >= 0) out.push_back(i);
    }
    if (out.size() < n) throw DomainError("corpus has only " + std::to_string(out.size()) + " axis-aligned training records");
    return out;
}

/// The records of ar_pair_indices, tokenized by `codec`.
inline std::vector<ArExample> ar_pairs(const CorpusData& corpus, Codec& codec, std::size_t n,
                                       std::vector<std::size_t>* picked = nullptr) {
    const auto idx = ar_pair_indices(corpus, n);
    std::vector<ArExample> out;
    for (auto i : idx) {
        const Tensor& img = corpus.images[i];
        out.push_back({corpus.records[i].prompt, codec.tokenize(reshape(img, {1, img.dim(0), img.dim(1), img.dim(2)}))});
    }
    if (picked) *picked = idx;
    return out;
}

// ---------------------------------------------------------------------------
// Ablation over tokenizer freeze / projector / width settings

struct AblationVariant {
    std::string name;
    CodecConfig codec;
};

/// Frozen-VQ rows keep the encoder and VQ branch fixed and train the
/// projector and decoder; the no-VQ rows train the encoder end to end.
inline std::vector<AblationVariant> ablation_variants(const CodecConfig& base) {
    auto make = [&](std::string name, bool hybrid, int depth, int dims) {
        CodecConfig c = base;
        c.kind = QuantizerKind::binary;
        c.hybrid = hybrid;
        c.projector_depth = depth;
        c.quantizer.dims = dims;
        c.freeze = hybrid ? std::set<std::string>{"encoder", "vq"} : std::set<std::string>{};
        return AblationVariant{std::move(name), c};
    };
    std::vector<AblationVariant> v = {
        make("vq_frozen_fc_d13", true, 1, 13),  make("vq_frozen_tf3_d13", true, 3, 13),
        make("vq_frozen_tf3_d16", true, 3, 16), make("no_vq_tf3_d13", false, 3, 13),
        make("no_vq_fc_d13", false, 1, 13),
    };
    CodecConfig vq = base;
    vq.kind = QuantizerKind::vq;
    vq.hybrid = false;
    vq.freeze.clear();
    v.push_back({"vq_baseline", vq});
    return v;
}

inline std::vector<AblationVariant> select_variants(const std::vector<AblationVariant>& all, const std::vector<std::string>& names) {
    if (names.empty()) return all;
    std::vector<AblationVariant> out;
    for (const auto& n : names) {
        auto it = std::find_if(all.begin(), all.end(), [&](const AblationVariant& v) { return v.name == n; });
        if (it == all.end()) throw ConfigError("unknown ablation variant: " + n);
        out.push_back(*it);
    }
    return out;
}

struct AblationResult {
    std::string name;
    CodecConfig codec;
    long steps = 0;
    double final_reconstruction = 0.0;  // mean over the last 50 steps
    double psnr = 0.0;
    double ssim = 0.0;
    double utilization = 0.0;
    std::size_t frozen_tensors = 0;
    bool frozen_unchanged = true;
};

/// Trains one variant on the corpus train split and evaluates on its test split.
inline AblationResult run_ablation(const AblationVariant& variant, const CorpusData& corpus, TokenizerTrainConfig train,
                                   long steps, std::uint64_t seed) {
    Codec codec(variant.codec, seed);
    std::vector<std::pair<std::string, std::vector<float>>> before;
    for (const auto& p : codec.params().items()) {
        if (p.frozen) before.emplace_back(p.name, p.tensor.values());
    }
    const auto images = corpus.images_of(corpus.train);
    train.steps = steps;
    train.seed = seed;
    TokenizerTrainer trainer(codec, images, train);
    trainer.run_until(steps);

    AblationResult r;
    r.name = variant.name;
    r.codec = variant.codec;
    r.steps = steps;
    r.final_reconstruction = smoothed(trainer.history(), trainer.history().size(), 50);
    r.frozen_tensors = before.size();
    for (const auto& [name, values] : before) {
        if (codec.params().at(name).tensor.values() != values) r.frozen_unchanged = false;
    }
    const MetricReport m = evaluate_reconstruction(corpus.names_of(corpus.test), corpus.images_of(corpus.test), codec);
    r.psnr = m.mean_psnr;
    r.ssim = m.mean_ssim;
    r.utilization = m.utilization;
    return r;
}

inline std::string ablation_csv(const std::vector<AblationResult>& rows) {
    std::string out = "variant,kind,hybrid,projector_depth,dims,frozen,steps,final_l1,psnr,ssim,utilization,frozen_tensors,frozen_unchanged\n";
    for (const auto& r : rows) {
        std::string frozen = detail::join_set(r.codec.freeze);
        for (auto& ch : frozen)
            if (ch == ',') ch = '+';
        out += r.name + "," + to_string(r.codec.kind) + "," + (r.codec.hybrid ? "true" : "false") + "," +
               std::to_string(r.codec.projector_depth) + "," + std::to_string(r.codec.quantizer.dims) + "," + frozen + "," +
               std::to_string(r.steps) + "," + detail::fmt6(r.final_reconstruction) + "," + detail::fmt6(r.psnr) + "," +
               detail::fmt6(r.ssim) + "," + detail::fmt6(r.utilization) + "," + std::to_string(r.frozen_tensors) + "," +
               (r.frozen_unchanged ? "true" : "false") + "\n";
    }
    return out;
}

}  // namespace textbin
