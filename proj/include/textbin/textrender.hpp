#pragma once

#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "textbin/font.hpp"
#include "textbin/random.hpp"
#include "textbin/tensor.hpp"

namespace textbin {

using Rgb = std::array<int, 3>;

enum class Alignment { left, center, right };

inline const char* to_string(Alignment a) {
    switch (a) {
        case Alignment::left: return "left";
        case Alignment::center: return "center";
        case Alignment::right: return "right";
    }
    return "left";
}

inline Alignment parse_alignment(const std::string& s) {
    if (s == "left") return Alignment::left;
    if (s == "center") return Alignment::center;
    if (s == "right") return Alignment::right;
    throw DomainError("unknown alignment: " + s);
}

/// Everything needed to draw one text image. The OCR oracle reads every
/// field except `text`.
struct RenderSpec {
    std::string text;
    int font_id = 0;
    int scale = 1;
    Rgb color{0, 0, 0};
    Rgb background{255, 255, 255};
    double rotation_deg = 0.0;
    Alignment alignment = Alignment::left;
    int width = 64;
    int height = 64;

    void validate_geometry() const {
        if (font_id < 0 || font_id >= kFontCount) throw DomainError("unknown font id " + std::to_string(font_id));
        if (scale < 1) throw DomainError("scale must be a positive integer");
        if (width < 1 || height < 1) throw DomainError("canvas must be non-empty");
        for (int c : color)
            if (c < 0 || c > 255) throw DomainError("color components must be in [0, 255]");
        for (int c : background)
            if (c < 0 || c > 255) throw DomainError("background components must be in [0, 255]");
        if (color == background) throw DomainError("foreground and background colors are identical");
        if (!std::isfinite(rotation_deg)) throw DomainError("rotation must be finite");
    }

    void validate() const {
        if (text.empty()) throw DomainError("render: text is empty");
        require_printable(text, "render");
        validate_geometry();
    }
};

/// Rotation reduced to [0, 360).
inline double normalized_rotation(double deg) {
    double r = std::fmod(deg, 360.0);
    if (r < 0) r += 360.0;
    return r;
}

/// Quarter turns for axis-aligned rotations, -1 otherwise.
inline int quarter_turns(double deg) {
    const double r = normalized_rotation(deg);
    for (int q = 0; q < 4; ++q)
        if (r == 90.0 * q) return q;
    return -1;
}

// ---------------------------------------------------------------------------
// Layout

/// Text placed on a grid of glyph cells before rotation.
struct TextLayout {
    int cols = 0;
    int rows = 0;
    int cell = 0;
    int canvas_width = 0;  // layout canvas; width/height swap for 90 and 270
    int canvas_height = 0;
    std::vector<std::string> lines;
    std::vector<int> offsets;  // first column of each line
};

/// Grid dimensions only; no text needed.
inline TextLayout layout_grid(const RenderSpec& spec) {
    spec.validate_geometry();
    TextLayout lay;
    const bool swap = quarter_turns(spec.rotation_deg) % 2 == 1;
    lay.canvas_width = swap ? spec.height : spec.width;
    lay.canvas_height = swap ? spec.width : spec.height;
    lay.cell = kGlyphSize * spec.scale;
    lay.cols = lay.canvas_width / lay.cell;
    lay.rows = lay.canvas_height / lay.cell;
    return lay;
}

inline int align_offset(Alignment a, int cols, int len) {
    switch (a) {
        case Alignment::left: return 0;
        case Alignment::right: return cols - len;
        case Alignment::center: return (cols - len) / 2;
    }
    return 0;
}

/// Greedy word wrap at the grid width. Lines break at a single space, which
/// is consumed. A word wider than a line, or more lines than rows, is a
/// CapacityError.
inline TextLayout layout_text(const RenderSpec& spec) {
    spec.validate();
    TextLayout lay = layout_grid(spec);
    if (lay.cols == 0 || lay.rows == 0) throw CapacityError("canvas is smaller than one glyph cell");
    std::vector<std::string> words;
    {
        std::string cur;
        for (char c : spec.text) {
            if (c == ' ') {
                words.push_back(cur);
                cur.clear();
            } else {
                cur += c;
            }
        }
        words.push_back(cur);
    }
    std::string line;
    bool started = false;
    for (const auto& w : words) {
        if (int(w.size()) > lay.cols) throw CapacityError("word '" + w + "' is wider than the canvas");
        if (!started) {
            line = w;
            started = true;
        } else if (int(line.size() + 1 + w.size()) <= lay.cols) {
            line += ' ' + w;
        } else {
            lay.lines.push_back(line);
            line = w;
        }
    }
    lay.lines.push_back(line);
    if (int(lay.lines.size()) > lay.rows) {
        throw CapacityError("text needs " + std::to_string(lay.lines.size()) + " lines, canvas holds " + std::to_string(lay.rows));
    }
    for (const auto& l : lay.lines) lay.offsets.push_back(align_offset(spec.alignment, lay.cols, int(l.size())));
    return lay;
}

// ---------------------------------------------------------------------------
// Rendering

namespace detail {

/// Rotates a single-plane raster counter-clockwise by q quarter turns.
template <typename T>
std::vector<T> rotate_quarter(const std::vector<T>& src, int w, int h, int q, int& out_w, int& out_h) {
    q = ((q % 4) + 4) % 4;
    out_w = (q % 2) ? h : w;
    out_h = (q % 2) ? w : h;
    std::vector<T> dst(src.size());
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            int xo = x, yo = y;
            if (q == 1) { xo = y; yo = w - 1 - x; }
            else if (q == 2) { xo = w - 1 - x; yo = h - 1 - y; }
            else if (q == 3) { xo = h - 1 - y; yo = x; }
            dst[std::size_t(yo) * out_w + xo] = src[std::size_t(y) * w + x];
        }
    }
    return dst;
}

/// Nearest-neighbour rotation about the canvas centre, counter-clockwise.
/// Pixels mapping outside the source keep `fill`.
template <typename T>
std::vector<T> rotate_nearest(const std::vector<T>& src, int w, int h, double deg, T fill) {
    const double th = deg * 3.14159265358979323846 / 180.0;
    const double c = std::cos(th), s = std::sin(th);
    const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
    std::vector<T> dst(src.size(), fill);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double u = x - cx, v = cy - y;  // y up
            const double us = c * u + s * v, vs = -s * u + c * v;
            const long xs = std::lround(us + cx), ys = std::lround(cy - vs);
            if (xs < 0 || ys < 0 || xs >= w || ys >= h) continue;
            dst[std::size_t(y) * w + x] = src[std::size_t(ys) * w + xs];
        }
    }
    return dst;
}

}  // namespace detail

/// Foreground mask (1 = glyph pixel) of the final image, rotation applied.
inline std::vector<std::uint8_t> render_mask(const RenderSpec& spec) {
    const TextLayout lay = layout_text(spec);
    const int W = lay.canvas_width, H = lay.canvas_height;
    std::vector<std::uint8_t> mask(std::size_t(W) * H, 0);
    for (std::size_t r = 0; r < lay.lines.size(); ++r) {
        for (std::size_t i = 0; i < lay.lines[r].size(); ++i) {
            const GlyphRows g = glyph_rows(spec.font_id, lay.lines[r][i]);
            const int x0 = (lay.offsets[r] + int(i)) * lay.cell, y0 = int(r) * lay.cell;
            for (int gy = 0; gy < kGlyphSize; ++gy)
                for (int gx = 0; gx < kGlyphSize; ++gx) {
                    if (!glyph_pixel(g, gx, gy)) continue;
                    for (int dy = 0; dy < spec.scale; ++dy)
                        for (int dx = 0; dx < spec.scale; ++dx)
                            mask[std::size_t(y0 + gy * spec.scale + dy) * W + x0 + gx * spec.scale + dx] = 1;
                }
        }
    }
    const int q = quarter_turns(spec.rotation_deg);
    int ow = W, oh = H;
    if (q >= 0) return detail::rotate_quarter(mask, W, H, q, ow, oh);
    return detail::rotate_nearest<std::uint8_t>(mask, W, H, normalized_rotation(spec.rotation_deg), 0);
}

/// [3 x H x W] image with channel values c / 255.
inline Tensor mask_to_image(const std::vector<std::uint8_t>& mask, int width, int height, const Rgb& fg, const Rgb& bg) {
    std::vector<float> data(std::size_t(3) * width * height);
    const std::size_t plane = std::size_t(width) * height;
    for (std::size_t i = 0; i < plane; ++i)
        for (std::size_t c = 0; c < 3; ++c) data[c * plane + i] = float(mask[i] ? fg[c] : bg[c]) / 255.0f;
    return Tensor({3, std::size_t(height), std::size_t(width)}, std::move(data));
}

/// Rotates a [3 x H x W] image counter-clockwise by q quarter turns.
inline Tensor rotate_image_quarter(const Tensor& image, int q) {
    if (image.rank() != 3) throw DimensionError("rotate_image_quarter: expected [C x H x W]");
    const int h = int(image.dim(1)), w = int(image.dim(2));
    const std::size_t plane = std::size_t(h) * w;
    std::vector<float> out;
    int ow = w, oh = h;
    for (std::size_t c = 0; c < image.dim(0); ++c) {
        std::vector<float> src(image.data().begin() + c * plane, image.data().begin() + (c + 1) * plane);
        auto dst = detail::rotate_quarter(src, w, h, q, ow, oh);
        out.insert(out.end(), dst.begin(), dst.end());
    }
    return Tensor({image.dim(0), std::size_t(oh), std::size_t(ow)}, std::move(out));
}

inline Tensor render(const RenderSpec& spec) {
    return mask_to_image(render_mask(spec), spec.width, spec.height, spec.color, spec.background);
}

/// Per pixel: 1 where the colour is strictly closer to `fg` than to `bg`.
inline std::vector<std::uint8_t> binarize(const Tensor& image, const Rgb& fg, const Rgb& bg) {
    if (image.rank() != 3 || image.dim(0) != 3) throw DimensionError("binarize: expected [3 x H x W]");
    const std::size_t plane = image.dim(1) * image.dim(2);
    std::vector<std::uint8_t> mask(plane);
    for (std::size_t i = 0; i < plane; ++i) {
        double df = 0, db = 0;
        for (std::size_t c = 0; c < 3; ++c) {
            const double v = image.data()[c * plane + i] * 255.0;
            df += (v - fg[c]) * (v - fg[c]);
            db += (v - bg[c]) * (v - bg[c]);
        }
        mask[i] = df < db ? 1 : 0;
    }
    return mask;
}

// ---------------------------------------------------------------------------
// PPM (binary P6, 8-bit, no comments)

inline std::string encode_ppm(const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 3) throw DimensionError("encode_ppm: expected [3 x H x W]");
    const std::size_t h = image.dim(1), w = image.dim(2), plane = h * w;
    std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    out.reserve(out.size() + 3 * plane);
    for (std::size_t i = 0; i < plane; ++i)
        for (std::size_t c = 0; c < 3; ++c) {
            const float v = std::clamp(image.data()[c * plane + i], 0.0f, 1.0f);
            out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f))));
        }
    return out;
}

inline Tensor decode_ppm(const std::string& bytes) {
    std::size_t pos = 0;
    auto token = [&]() {
        while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
        const std::size_t start = pos;
        while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
        return bytes.substr(start, pos - start);
    };
    auto number = [&](const char* what) {
        const std::string t = token();
        long v = 0;
        auto res = std::from_chars(t.data(), t.data() + t.size(), v);
        if (res.ec != std::errc() || res.ptr != t.data() + t.size() || v <= 0) throw IoError(std::string("ppm: bad ") + what);
        return v;
    };
    if (token() != "P6") throw IoError("ppm: not a binary P6 file");
    const long w = number("width"), h = number("height"), maxval = number("maxval");
    if (maxval != 255) throw IoError("ppm: only 8-bit files are supported");
    if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) throw IoError("ppm: truncated header");
    ++pos;
    const std::size_t plane = std::size_t(w) * std::size_t(h);
    if (bytes.size() - pos != 3 * plane) throw IoError("ppm: pixel data length mismatch");
    std::vector<float> data(3 * plane);
    for (std::size_t i = 0; i < plane; ++i)
        for (std::size_t c = 0; c < 3; ++c) data[c * plane + i] = float(static_cast<unsigned char>(bytes[pos + 3 * i + c])) / 255.0f;
    return Tensor({3, std::size_t(h), std::size_t(w)}, std::move(data));
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw IoError("write failed: " + path);
}

inline void write_ppm(const std::string& path, const Tensor& image) { write_file(path, encode_ppm(image)); }
inline Tensor read_ppm(const std::string& path) { return decode_ppm(read_file(path)); }

// ---------------------------------------------------------------------------
// Prompt serialization

inline std::string format_number(double v) {
    if (v == std::floor(v) && std::fabs(v) < 1e15) return std::to_string(static_cast<long long>(v));
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

/// "font=<id> scale=<n> color=<r,g,b> align=<a> rot=<deg>"
inline std::string variables_string(const RenderSpec& spec) {
    return "font=" + std::to_string(spec.font_id) + " scale=" + std::to_string(spec.scale) + " color=" +
           std::to_string(spec.color[0]) + "," + std::to_string(spec.color[1]) + "," + std::to_string(spec.color[2]) +
           " align=" + to_string(spec.alignment) + " rot=" + format_number(spec.rotation_deg);
}

inline const std::string& prompt_prefix() {
    static const std::string p = "Generate text image with ";
    return p;
}

inline std::string build_prompt(const RenderSpec& spec) {
    return prompt_prefix() + variables_string(spec) + " using the following text: " + spec.text;
}

// ---------------------------------------------------------------------------
// OCR oracle

/// Cell-by-cell reading of an axis-aligned render.
struct OcrReading {
    std::vector<std::string> grid;  // one string of `cols` characters per grid row
    std::string text;               // rows trimmed, blank rows dropped, joined by single spaces
};

/// Binarizes against the known colours, undoes the rotation, majority-votes
/// each scale x scale block and matches every cell to the nearest glyph
/// template by Hamming distance (lowest character code on ties).
inline OcrReading ocr_read(const Tensor& image, const RenderSpec& geometry) {
    geometry.validate_geometry();
    const int q = quarter_turns(geometry.rotation_deg);
    if (q < 0) throw DomainError("ocr: rotation must be a multiple of 90 degrees");
    if (image.rank() != 3 || image.dim(0) != 3 || int(image.dim(1)) != geometry.height || int(image.dim(2)) != geometry.width) {
        throw DomainError("ocr: image shape " + shape_str(image.shape()) + " does not match the geometry");
    }
    const TextLayout lay = layout_grid(geometry);
    int W = 0, H = 0;
    const auto mask = detail::rotate_quarter(binarize(image, geometry.color, geometry.background), geometry.width,
                                             geometry.height, (4 - q) % 4, W, H);
    std::array<GlyphRows, kGlyphCount> templates{};
    for (int c = kFirstChar; c <= kLastChar; ++c) templates[std::size_t(c - kFirstChar)] = glyph_rows(geometry.font_id, char(c));
    const int s = geometry.scale, votes_needed = s * s / 2 + 1;
    OcrReading out;
    for (int r = 0; r < lay.rows; ++r) {
        std::string row;
        for (int c = 0; c < lay.cols; ++c) {
            GlyphRows cell{};
            for (int gy = 0; gy < kGlyphSize; ++gy)
                for (int gx = 0; gx < kGlyphSize; ++gx) {
                    int on = 0;
                    for (int dy = 0; dy < s; ++dy)
                        for (int dx = 0; dx < s; ++dx)
                            on += mask[std::size_t(r * lay.cell + gy * s + dy) * W + c * lay.cell + gx * s + dx];
                    if (on >= votes_needed) cell[std::size_t(gy)] = std::uint8_t(cell[std::size_t(gy)] | (1u << gx));
                }
            int best = 0, best_d = 1 << 30;
            for (int t = 0; t < kGlyphCount; ++t) {
                int d = 0;
                for (int y = 0; y < kGlyphSize; ++y) d += std::popcount(unsigned(cell[std::size_t(y)] ^ templates[std::size_t(t)][std::size_t(y)]));
                if (d < best_d) {
                    best_d = d;
                    best = t;
                }
            }
            row += char(kFirstChar + best);
        }
        out.grid.push_back(row);
    }
    for (const auto& row : out.grid) {
        const auto b = row.find_first_not_of(' ');
        if (b == std::string::npos) continue;
        const auto e = row.find_last_not_of(' ');
        if (!out.text.empty()) out.text += ' ';
        out.text += row.substr(b, e - b + 1);
    }
    return out;
}

inline std::string ocr_oracle(const Tensor& image, const RenderSpec& geometry) { return ocr_read(image, geometry).text; }

inline std::vector<std::string> split_words(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream in(s);
    std::string w;
    while (in >> w) out.push_back(w);
    return out;
}

/// Exact word matches by position / number of truth words.
inline double word_accuracy(const std::string& truth, const std::string& recognized) {
    const auto t = split_words(truth), r = split_words(recognized);
    if (t.empty()) throw DomainError("word_accuracy: empty truth");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < t.size() && i < r.size(); ++i) hit += t[i] == r[i];
    return double(hit) / double(t.size());
}

/// Character matches by position / number of truth characters.
inline double char_accuracy(const std::string& truth, const std::string& recognized) {
    if (truth.empty()) throw DomainError("char_accuracy: empty truth");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < truth.size() && i < recognized.size(); ++i) hit += truth[i] == recognized[i];
    return double(hit) / double(truth.size());
}

/// Cell-aligned comparison of a reading with the truth layout. Blank cells
/// are background and count in neither precision nor recall.
struct TextScores {
    std::size_t words = 0, words_correct = 0;
    std::size_t chars = 0, chars_correct = 0;  // non-space truth cells
    std::size_t recognized = 0;                // non-space recognized cells

    double word_accuracy() const { return words ? double(words_correct) / double(words) : 0.0; }
    double char_accuracy() const { return chars ? double(chars_correct) / double(chars) : 0.0; }
    double precision() const { return recognized ? double(chars_correct) / double(recognized) : 0.0; }
    double recall() const { return char_accuracy(); }
    double f_measure() const {
        const double p = precision(), r = recall();
        return p + r > 0 ? 2 * p * r / (p + r) : 0.0;
    }
    TextScores& operator+=(const TextScores& o) {
        words += o.words;
        words_correct += o.words_correct;
        chars += o.chars;
        chars_correct += o.chars_correct;
        recognized += o.recognized;
        return *this;
    }
};

inline TextScores score_reading(const RenderSpec& truth, const OcrReading& reading) {
    const TextLayout lay = layout_text(truth);
    if (int(reading.grid.size()) != lay.rows) throw DimensionError("score_reading: grid does not match the layout");
    std::vector<std::string> expected(std::size_t(lay.rows), std::string(std::size_t(lay.cols), ' '));
    for (std::size_t r = 0; r < lay.lines.size(); ++r) expected[r].replace(std::size_t(lay.offsets[r]), lay.lines[r].size(), lay.lines[r]);
    TextScores s;
    for (int r = 0; r < lay.rows; ++r) {
        const std::string& want = expected[std::size_t(r)];
        const std::string& got = reading.grid[std::size_t(r)];
        if (int(got.size()) != lay.cols) throw DimensionError("score_reading: grid row width does not match the layout");
        for (int c = 0; c < lay.cols; ++c) {
            if (want[std::size_t(c)] != ' ') {
                ++s.chars;
                s.chars_correct += want[std::size_t(c)] == got[std::size_t(c)];
            }
            s.recognized += got[std::size_t(c)] != ' ';
        }
    }
    for (std::size_t r = 0; r < lay.lines.size(); ++r) {
        const std::string& line = lay.lines[r];
        std::size_t start = 0;
        while (start <= line.size()) {
            std::size_t end = line.find(' ', start);
            if (end == std::string::npos) end = line.size();
            if (end > start) {
                ++s.words;
                const std::size_t col = std::size_t(lay.offsets[r]) + start;
                s.words_correct += reading.grid[r].compare(col, end - start, line, start, end - start) == 0;
            }
            start = end + 1;
        }
    }
    return s;
}

// ---------------------------------------------------------------------------
// Corpus

inline const std::vector<std::string>& word_list() {
    static const std::vector<std::string> words{
        "a",     "an",    "as",    "at",    "be",    "by",    "do",    "go",    "if",    "in",    "is",    "it",
        "me",    "my",    "no",    "of",    "on",    "or",    "so",    "to",    "up",    "us",    "we",    "add",
        "age",   "air",   "all",   "and",   "any",   "arm",   "art",   "ask",   "bad",   "bag",   "big",   "box",
        "boy",   "bus",   "buy",   "can",   "car",   "cat",   "cup",   "cut",   "day",   "dog",   "dry",   "ear",
        "eat",   "egg",   "end",   "eye",   "far",   "few",   "fit",   "fly",   "for",   "fun",   "get",   "hat",
        "hot",   "ice",   "ink",   "job",   "key",   "map",   "new",   "old",   "one",   "pen",   "red",   "run",
        "sea",   "sky",   "sun",   "ten",   "top",   "two",   "way",   "yes",   "able",  "also",  "area",  "back",
        "ball",  "band",  "bank",  "bird",  "blue",  "boat",  "book",  "cake",  "city",  "cold",  "dark",  "door",
        "draw",  "east",  "easy",  "fast",  "fire",  "fish",  "five",  "font",  "food",  "free",  "game",  "gold",
        "good",  "green", "hand",  "home",  "idea",  "iron",  "king",  "lake",  "left",  "line",  "long",  "main",
        "mark",  "milk",  "moon",  "name",  "near",  "note",  "open",  "page",  "park",  "rain",  "read",  "rich",
        "road",  "rock",  "room",  "rose",  "safe",  "ship",  "shop",  "show",  "slow",  "snow",  "song",  "star",
        "text",  "time",  "town",  "tree",  "type",  "walk",  "warm",  "west",  "wide",  "wind",  "word",  "work",
        "yard",  "year",  "zero",  "apple", "bread", "chair", "clock", "cloud", "dance", "earth", "field", "glass",
        "heart", "house", "image", "large", "light", "money", "music", "night", "ocean", "paper", "plant", "print",
        "quiet", "river", "round", "small", "sound", "stone", "table", "title", "water", "white", "world", "write",
        "Hello", "Paris", "North", "Sale",  "Open",  "News",  "Menu",  "Cafe",  "Exit",  "Stop",  "Welcome", "OK",
        "2024",  "42",    "7",     "100%",  "$5",    "A+",    "#1",    "3.14",  "x=2",   "(new)", "re-do", "it's",
    };
    return words;
}

/// Sampling distribution over render specs. Texts are drawn until they fit.
struct CorpusOptions {
    int width = 64;
    int height = 64;
    std::vector<int> scales{1, 1, 2};     // uniform pick; repeats weight the draw
    double long_fraction = 0.4;           // share of long (>= 10 words) texts, scale 1 only
    double off_axis_fraction = 0.1;       // share of non-multiple-of-90 rotations
    std::vector<double> off_axis_angles{15.0, 30.0, 45.0, 330.0};
    std::vector<Rgb> colors{{0, 0, 0}, {200, 30, 30}, {20, 60, 190}, {20, 130, 50}, {120, 40, 160}, {200, 110, 0}};
    std::vector<Rgb> backgrounds{{255, 255, 255}, {250, 240, 200}};
    int max_attempts = 64;
};

inline std::uint64_t record_seed(std::uint64_t corpus_seed, std::uint64_t index) {
    // splitmix64 of the pair
    std::uint64_t z = corpus_seed * 0x9E3779B97F4A7C15ull + index + 0x632BE59BD9B4E5ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

template <typename T>
const T& pick(const std::vector<T>& v, Rng& rng) {
    if (v.empty()) throw ConfigError("corpus: empty choice list");
    return v[std::size_t(rng.below(v.size()))];
}

/// One spec drawn from `seed` alone, so any record can be regenerated in isolation.
inline RenderSpec sample_spec(std::uint64_t seed, const CorpusOptions& opt) {
    Rng rng(seed);
    RenderSpec spec;
    spec.width = opt.width;
    spec.height = opt.height;
    spec.font_id = int(rng.below(kFontCount));
    spec.color = pick(opt.colors, rng);
    spec.background = pick(opt.backgrounds, rng);
    spec.alignment = static_cast<Alignment>(rng.below(3));
    spec.rotation_deg = rng.uniform() < opt.off_axis_fraction ? pick(opt.off_axis_angles, rng) : 90.0 * double(rng.below(4));
    const bool want_long = rng.uniform() < opt.long_fraction;
    spec.scale = want_long ? 1 : pick(opt.scales, rng);
    const auto& words = word_list();
    for (int attempt = 0; attempt < opt.max_attempts; ++attempt) {
        // Long texts shrink toward 10 words on retries.
        const int n = want_long ? 10 + int(rng.below(std::uint64_t(std::max(1, 6 - attempt / 4))))
                                : 1 + int(rng.below(std::uint64_t(std::max(1, 9 - attempt / 4))));
        std::string text;
        for (int i = 0; i < n; ++i) {
            // Long texts favour short words so they fit the grid.
            const std::string& w = want_long ? words[std::size_t(rng.below(std::min<std::size_t>(words.size(), 84)))] : pick(words, rng);
            text += (i ? " " : "") + w;
        }
        spec.text = text;
        try {
            layout_text(spec);
            return spec;
        } catch (const CapacityError&) {
        }
    }
    spec.text = "OK";
    return spec;
}

struct CorpusRecord {
    std::size_t index = 0;
    std::string split;  // "train" or "test"
    std::string image;  // path relative to the corpus directory
    RenderSpec spec;
    std::string prompt;
    std::uint64_t seed = 0;
};

using CorpusManifest = std::vector<CorpusRecord>;

inline std::string split_of(std::size_t index) { return index % 10 == 9 ? "test" : "train"; }

inline std::size_t word_count(const std::string& text) { return split_words(text).size(); }
inline bool is_long_text(const std::string& text) { return word_count(text) >= 10; }

inline std::string manifest_line(const CorpusRecord& r) {
    nlohmann::ordered_json j;
    j["index"] = r.index;
    j["split"] = r.split;
    j["image"] = r.image;
    j["text"] = r.spec.text;
    j["font"] = r.spec.font_id;
    j["scale"] = r.spec.scale;
    j["color"] = r.spec.color;
    j["background"] = r.spec.background;
    j["rotation"] = r.spec.rotation_deg;
    j["align"] = to_string(r.spec.alignment);
    j["width"] = r.spec.width;
    j["height"] = r.spec.height;
    j["prompt"] = r.prompt;
    j["seed"] = r.seed;
    return j.dump();
}

inline CorpusRecord parse_manifest_line(const std::string& line) {
    try {
        const auto j = nlohmann::json::parse(line);
        CorpusRecord r;
        r.index = j.at("index").get<std::size_t>();
        r.split = j.at("split").get<std::string>();
        r.image = j.at("image").get<std::string>();
        r.spec.text = j.at("text").get<std::string>();
        r.spec.font_id = j.at("font").get<int>();
        r.spec.scale = j.at("scale").get<int>();
        r.spec.color = j.at("color").get<Rgb>();
        r.spec.background = j.at("background").get<Rgb>();
        r.spec.rotation_deg = j.at("rotation").get<double>();
        r.spec.alignment = parse_alignment(j.at("align").get<std::string>());
        r.spec.width = j.at("width").get<int>();
        r.spec.height = j.at("height").get<int>();
        r.prompt = j.at("prompt").get<std::string>();
        r.seed = j.at("seed").get<std::uint64_t>();
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("bad manifest line: ") + e.what());
    }
}

inline CorpusManifest build_manifest(std::size_t n, std::uint64_t seed, const CorpusOptions& opt = {}) {
    if (n == 0) throw DomainError("corpus: n must be at least 1");
    CorpusManifest m;
    for (std::size_t i = 0; i < n; ++i) {
        CorpusRecord r;
        r.index = i;
        r.split = split_of(i);
        char name[32];
        std::snprintf(name, sizeof name, "images/%06zu.ppm", i);
        r.image = name;
        r.seed = record_seed(seed, i);
        r.spec = sample_spec(r.seed, opt);
        r.prompt = build_prompt(r.spec);
        m.push_back(std::move(r));
    }
    return m;
}

inline std::string manifest_text(const CorpusManifest& m) {
    std::string out;
    for (const auto& r : m) out += manifest_line(r) + "\n";
    return out;
}

/// Renders n images into `dir/images` and writes `dir/manifest.jsonl`.
inline CorpusManifest generate_corpus(const std::string& dir, std::size_t n, std::uint64_t seed, const CorpusOptions& opt = {}) {
    CorpusManifest m = build_manifest(n, seed, opt);
    std::error_code ec;
    std::filesystem::create_directories(std::filesystem::path(dir) / "images", ec);
    if (ec) throw IoError("cannot create corpus directory " + dir + ": " + ec.message());
    for (const auto& r : m) write_ppm((std::filesystem::path(dir) / r.image).string(), render(r.spec));
    write_file((std::filesystem::path(dir) / "manifest.jsonl").string(), manifest_text(m));
    return m;
}

inline CorpusManifest load_manifest(const std::string& path) {
    std::istringstream in(read_file(path));
    CorpusManifest m;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) m.push_back(parse_manifest_line(line));
    return m;
}

}  // namespace textbin
