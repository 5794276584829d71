#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "textbin/codec.hpp"
#include "textbin/quantizers.hpp"
#include "textbin/textrender.hpp"

namespace textbin {

inline constexpr double kPsnrCap = 99.0;

/// 10 log10(1 / MSE) for images in [0,1]; kPsnrCap when identical.
inline double psnr(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw DimensionError("psnr: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    if (a.numel() == 0) throw DimensionError("psnr: empty image");
    double se = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const double d = double(a.data()[i]) - double(b.data()[i]);
        se += d * d;
    }
    const double mse = se / double(a.numel());
    if (mse == 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

namespace detail {

inline constexpr int kSsimWindow = 11;

inline const std::array<double, kSsimWindow>& ssim_kernel() {
    static const std::array<double, kSsimWindow> k = [] {
        std::array<double, kSsimWindow> w{};
        double total = 0.0;
        for (int i = 0; i < kSsimWindow; ++i) {
            const double x = i - kSsimWindow / 2;
            total += w[std::size_t(i)] = std::exp(-x * x / (2.0 * 1.5 * 1.5));
        }
        for (auto& v : w) v /= total;
        return w;
    }();
    return k;
}

/// Channel mean of a [C x H x W] image.
inline std::vector<double> grayscale(const Tensor& img) {
    const std::size_t C = img.dim(0), plane = img.dim(1) * img.dim(2);
    std::vector<double> g(plane, 0.0);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < plane; ++i) g[i] += img.data()[c * plane + i];
    for (auto& v : g) v /= double(C);
    return g;
}

/// Separable Gaussian filter over valid windows only.
inline std::vector<double> filter_valid(const std::vector<double>& x, std::size_t H, std::size_t W) {
    const auto& k = ssim_kernel();
    const std::size_t oh = H - kSsimWindow + 1, ow = W - kSsimWindow + 1;
    std::vector<double> rows(H * ow, 0.0), out(oh * ow, 0.0);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x0 = 0; x0 < ow; ++x0) {
            double acc = 0.0;
            for (int j = 0; j < kSsimWindow; ++j) acc += k[std::size_t(j)] * x[y * W + x0 + std::size_t(j)];
            rows[y * ow + x0] = acc;
        }
    for (std::size_t y0 = 0; y0 < oh; ++y0)
        for (std::size_t x0 = 0; x0 < ow; ++x0) {
            double acc = 0.0;
            for (int j = 0; j < kSsimWindow; ++j) acc += k[std::size_t(j)] * rows[(y0 + std::size_t(j)) * ow + x0];
            out[y0 * ow + x0] = acc;
        }
    return out;
}

}  // namespace detail

/// Mean SSIM of the grayscale (channel mean) images over all valid 11x11
/// Gaussian windows (sigma 1.5), C1 = 0.01^2, C2 = 0.03^2.
inline double ssim(const Tensor& first, const Tensor& second) {
    if (first.shape() != second.shape()) {
        throw DimensionError("ssim: shapes " + shape_str(first.shape()) + " and " + shape_str(second.shape()));
    }
    // Canonical operand order: fused multiply-adds make the formula's
    // symmetric terms round differently when the operands swap.
    const bool swap = std::lexicographical_compare(second.data().begin(), second.data().end(), first.data().begin(),
                                                   first.data().end());
    const Tensor& a = swap ? second : first;
    const Tensor& b = swap ? first : second;
    if (a.rank() != 3) throw DimensionError("ssim: expected a [C x H x W] image");
    const std::size_t H = a.dim(1), W = a.dim(2);
    if (H < std::size_t(detail::kSsimWindow) || W < std::size_t(detail::kSsimWindow)) {
        throw DomainError("ssim: image smaller than the 11x11 window");
    }
    const auto ga = detail::grayscale(a), gb = detail::grayscale(b);
    std::vector<double> aa(ga.size()), bb(ga.size()), ab(ga.size());
    for (std::size_t i = 0; i < ga.size(); ++i) {
        aa[i] = ga[i] * ga[i];
        bb[i] = gb[i] * gb[i];
        ab[i] = ga[i] * gb[i];
    }
    const auto mu_a = detail::filter_valid(ga, H, W), mu_b = detail::filter_valid(gb, H, W);
    const auto e_aa = detail::filter_valid(aa, H, W), e_bb = detail::filter_valid(bb, H, W);
    const auto e_ab = detail::filter_valid(ab, H, W);
    // Rounded products kept in memory so none of them is fused into a
    // subtraction; with a == b every term then matches and ssim is exactly 1.
    std::vector<double> ma2(mu_a.size()), mb2(mu_a.size()), mab(mu_a.size());
    for (std::size_t i = 0; i < mu_a.size(); ++i) {
        ma2[i] = mu_a[i] * mu_a[i];
        mb2[i] = mu_b[i] * mu_b[i];
        mab[i] = mu_a[i] * mu_b[i];
    }
    constexpr double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
    double total = 0.0;
    for (std::size_t i = 0; i < mu_a.size(); ++i) {
        const double va = e_aa[i] - ma2[i], vb = e_bb[i] - mb2[i];
        const double cov = e_ab[i] - mab[i];
        total += ((2.0 * mab[i] + C1) * (2.0 * cov + C2)) / ((ma2[i] + mb2[i] + C1) * (va + vb + C2));
    }
    return total / double(mu_a.size());
}

/// Metrics this toolkit computes; FID and CLIPScore need pretrained networks.
inline void require_supported_metric(const std::string& name) {
    static const std::vector<std::string> known = {"psnr", "ssim", "utilization", "word_accuracy", "char_accuracy", "f_measure"};
    if (name == "fid" || name == "clipscore") throw UnsupportedMetric("metric '" + name + "' is not supported: it needs a pretrained model");
    if (std::find(known.begin(), known.end(), name) == known.end()) throw ConfigError("unknown metric: " + name);
}

// ---------------------------------------------------------------------------
// Reports

struct MetricRow {
    std::string name;
    double psnr = std::nan("");
    double ssim = std::nan("");
    double word_acc = std::nan("");
    double char_acc = std::nan("");
    double f_measure = std::nan("");
};

struct MetricReport {
    std::vector<MetricRow> rows;
    double mean_psnr = std::nan("");
    double mean_ssim = std::nan("");
    double utilization = std::nan("");
};

namespace detail {

inline std::string fmt6(double v) {
    if (std::isnan(v)) return "";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

/// Mean over values summed in sorted order, so any permutation of the
/// inputs gives the same bits.
inline double ordered_mean(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    double acc = 0.0;
    for (double x : v) acc += x;
    return acc / double(v.size());
}

}  // namespace detail

/// Header plus one row per image; empty fields for metrics not measured.
inline std::string report_csv(const MetricReport& r) {
    std::string out = "name,psnr,ssim,word_acc,char_acc,f_measure\n";
    for (const auto& row : r.rows) {
        out += row.name + "," + detail::fmt6(row.psnr) + "," + detail::fmt6(row.ssim) + "," + detail::fmt6(row.word_acc) + "," +
               detail::fmt6(row.char_acc) + "," + detail::fmt6(row.f_measure) + "\n";
    }
    return out;
}

struct Reconstruction {
    std::vector<std::uint32_t> tokens;
    Tensor image;
};

using ReconstructFn = std::function<Reconstruction(const Tensor& image)>;

/// Reconstructs every image and aggregates PSNR, SSIM and codebook
/// utilization over `codebook_size` codes.
inline MetricReport evaluate_reconstruction(const std::vector<std::string>& names, const std::vector<Tensor>& images,
                                            const ReconstructFn& reconstruct, std::size_t codebook_size) {
    if (names.size() != images.size()) throw DimensionError("evaluate_reconstruction: names and images differ in count");
    if (images.empty()) throw DomainError("evaluate_reconstruction: empty evaluation set");
    MetricReport report;
    CodebookStats stats(codebook_size);
    std::vector<double> ps, ss;
    for (std::size_t i = 0; i < images.size(); ++i) {
        Reconstruction rec = reconstruct(images[i]);
        update_stats(stats, rec.tokens);
        MetricRow row;
        row.name = names[i];
        row.psnr = psnr(images[i], rec.image);
        row.ssim = ssim(images[i], rec.image);
        ps.push_back(row.psnr);
        ss.push_back(row.ssim);
        report.rows.push_back(row);
    }
    report.mean_psnr = detail::ordered_mean(ps);
    report.mean_ssim = detail::ordered_mean(ss);
    report.utilization = stats.utilization();
    return report;
}

/// Tokenizer round trip through a codec. `expected_dims`, when nonzero, must
/// match the codec's code width.
inline MetricReport evaluate_reconstruction(const std::vector<std::string>& names, const std::vector<Tensor>& images,
                                            Codec& codec, std::size_t expected_dims = 0) {
    if (expected_dims != 0 && codec.config().kind == QuantizerKind::binary && expected_dims != std::size_t(codec.config().quantizer.dims)) {
        throw ConfigError("tokenizer has d=" + std::to_string(codec.config().quantizer.dims) + " but the run expects d=" +
                          std::to_string(expected_dims));
    }
    const auto& c = codec.config();
    return evaluate_reconstruction(
        names, images,
        [&](const Tensor& img) {
            Reconstruction r;
            r.tokens = codec.tokenize(reshape(img, {1, img.dim(0), img.dim(1), img.dim(2)}));
            Tensor out = codec.decode_tokens(r.tokens);
            r.image = reshape(out, {c.channels, c.image_size, c.image_size});
            return r;
        },
        c.vocab_size());
}

struct GenerationReport {
    MetricReport metrics;
    TextScores short_text;
    TextScores long_text;
    std::size_t short_count = 0;
    std::size_t long_count = 0;
    std::size_t skipped = 0;  // non axis-aligned specs
};

using GenerateFn = std::function<Tensor(const CorpusRecord& record)>;

/// Generates an image per record, reads it back with the OCR oracle and
/// scores it against the record's text. Short means fewer than ten words.
inline GenerationReport evaluate_generation(const CorpusManifest& records, const GenerateFn& generate) {
    GenerationReport out;
    for (const auto& rec : records) {
        if (quarter_turns(rec.spec.rotation_deg) < 0) {
            ++out.skipped;
            continue;
        }
        const Tensor img = generate(rec);
        const TextScores s = score_reading(rec.spec, ocr_read(img, rec.spec));
        if (is_long_text(rec.spec.text)) {
            out.long_text += s;
            ++out.long_count;
        } else {
            out.short_text += s;
            ++out.short_count;
        }
        MetricRow row;
        row.name = rec.image.empty() ? std::to_string(rec.index) : rec.image;
        row.word_acc = s.word_accuracy();
        row.char_acc = s.char_accuracy();
        row.f_measure = s.f_measure();
        out.metrics.rows.push_back(row);
    }
    return out;
}

/// Split-level summary lines: split,count,word_acc,char_acc,f_measure.
inline std::string generation_summary_csv(const GenerationReport& r) {
    std::string out = "split,count,word_acc,char_acc,f_measure\n";
    auto line = [&](const char* name, std::size_t n, const TextScores& s) {
        out += std::string(name) + "," + std::to_string(n) + "," + detail::fmt6(s.word_accuracy()) + "," +
               detail::fmt6(s.char_accuracy()) + "," + detail::fmt6(s.f_measure()) + "\n";
    };
    TextScores all = r.short_text;
    all += r.long_text;
    line("short", r.short_count, r.short_text);
    line("long", r.long_count, r.long_text);
    line("all", r.short_count + r.long_count, all);
    out += "skipped," + std::to_string(r.skipped) + ",,,\n";
    return out;
}

}  // namespace textbin
