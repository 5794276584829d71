#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "textbin/errors.hpp"

namespace textbin {

inline constexpr int kGlyphSize = 8;
inline constexpr int kFirstChar = 32;
inline constexpr int kLastChar = 126;
inline constexpr int kGlyphCount = kLastChar - kFirstChar + 1;

/// Font ids: 0 regular, 1 bold (each row OR-ed with itself shifted one pixel right).
inline constexpr int kFontCount = 2;

using GlyphRows = std::array<std::uint8_t, kGlyphSize>;

namespace detail {

// 8x8 cells, one byte per row, bit 0 = leftmost pixel. Printable ASCII in
// code order. Drawn for this project and released to the public domain.
inline constexpr std::array<GlyphRows, kGlyphCount> kRegularGlyphs = {{
    {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00},  // space
    {0x08, 0x08, 0x08, 0x08, 0x00, 0x08, 0x00, 0x00},  // !
    {0x14, 0x14, 0x14, 0x00, 0x00, 0x00, 0x00, 0x00},  // "
    {0x14, 0x14, 0x3e, 0x14, 0x3e, 0x14, 0x14, 0x00},  // #
    {0x08, 0x3c, 0x0a, 0x1c, 0x28, 0x1e, 0x08, 0x00},  // $
    {0x06, 0x26, 0x10, 0x08, 0x04, 0x32, 0x30, 0x00},  // %
    {0x0c, 0x12, 0x0a, 0x04, 0x2a, 0x12, 0x2c, 0x00},  // &
    {0x0c, 0x08, 0x04, 0x00, 0x00, 0x00, 0x00, 0x00},  // '
    {0x10, 0x08, 0x04, 0x04, 0x04, 0x08, 0x10, 0x00},  // (
    {0x04, 0x08, 0x10, 0x10, 0x10, 0x08, 0x04, 0x00},  // )
    {0x00, 0x08, 0x2a, 0x1c, 0x2a, 0x08, 0x00, 0x00},  // *
    {0x00, 0x08, 0x08, 0x3e, 0x08, 0x08, 0x00, 0x00},  // +
    {0x00, 0x00, 0x00, 0x00, 0x0c, 0x08, 0x04, 0x00},  // ,
    {0x00, 0x00, 0x00, 0x3e, 0x00, 0x00, 0x00, 0x00},  // -
    {0x00, 0x00, 0x00, 0x00, 0x00, 0x0c, 0x0c, 0x00},  // .
    {0x00, 0x20, 0x10, 0x08, 0x04, 0x02, 0x00, 0x00},  // /
    {0x1c, 0x22, 0x32, 0x2a, 0x26, 0x22, 0x1c, 0x00},  // 0
    {0x08, 0x0c, 0x08, 0x08, 0x08, 0x08, 0x1c, 0x00},  // 1
    {0x1c, 0x22, 0x20, 0x10, 0x08, 0x04, 0x3e, 0x00},  // 2
    {0x3e, 0x10, 0x08, 0x10, 0x20, 0x22, 0x1c, 0x00},  // 3
    {0x10, 0x18, 0x14, 0x12, 0x3e, 0x10, 0x10, 0x00},  // 4
    {0x3e, 0x02, 0x1e, 0x20, 0x20, 0x22, 0x1c, 0x00},  // 5
    {0x18, 0x04, 0x02, 0x1e, 0x22, 0x22, 0x1c, 0x00},  // 6
    {0x3e, 0x20, 0x10, 0x08, 0x04, 0x04, 0x04, 0x00},  // 7
    {0x1c, 0x22, 0x22, 0x1c, 0x22, 0x22, 0x1c, 0x00},  // 8
    {0x1c, 0x22, 0x22, 0x3c, 0x20, 0x10, 0x0c, 0x00},  // 9
    {0x00, 0x0c, 0x0c, 0x00, 0x0c, 0x0c, 0x00, 0x00},  // :
    {0x00, 0x0c, 0x0c, 0x00, 0x18, 0x08, 0x04, 0x00},  // ;
    {0x20, 0x10, 0x08, 0x04, 0x08, 0x10, 0x20, 0x00},  // <
    {0x00, 0x00, 0x3e, 0x00, 0x3e, 0x00, 0x00, 0x00},  // =
    {0x02, 0x04, 0x08, 0x10, 0x08, 0x04, 0x02, 0x00},  // >
    {0x1c, 0x22, 0x20, 0x10, 0x08, 0x00, 0x08, 0x00},  // ?
    {0x1c, 0x22, 0x20, 0x2c, 0x2a, 0x2a, 0x1c, 0x00},  // @
    {0x1c, 0x22, 0x22, 0x22, 0x3e, 0x22, 0x22, 0x00},  // A
    {0x1e, 0x22, 0x22, 0x1e, 0x22, 0x22, 0x1e, 0x00},  // B
    {0x1c, 0x22, 0x02, 0x02, 0x02, 0x22, 0x1c, 0x00},  // C
    {0x0e, 0x12, 0x22, 0x22, 0x22, 0x12, 0x0e, 0x00},  // D
    {0x3e, 0x02, 0x02, 0x1e, 0x02, 0x02, 0x3e, 0x00},  // E
    {0x3e, 0x02, 0x02, 0x1e, 0x02, 0x02, 0x02, 0x00},  // F
    {0x1c, 0x22, 0x02, 0x3a, 0x22, 0x22, 0x3c, 0x00},  // G
    {0x22, 0x22, 0x22, 0x3e, 0x22, 0x22, 0x22, 0x00},  // H
    {0x1c, 0x08, 0x08, 0x08, 0x08, 0x08, 0x1c, 0x00},  // I
    {0x38, 0x10, 0x10, 0x10, 0x10, 0x12, 0x0c, 0x00},  // J
    {0x22, 0x12, 0x0a, 0x06, 0x0a, 0x12, 0x22, 0x00},  // K
    {0x02, 0x02, 0x02, 0x02, 0x02, 0x02, 0x3e, 0x00},  // L
    {0x22, 0x36, 0x2a, 0x2a, 0x22, 0x22, 0x22, 0x00},  // M
    {0x22, 0x26, 0x26, 0x2a, 0x32, 0x32, 0x22, 0x00},  // N
    {0x1c, 0x22, 0x22, 0x22, 0x22, 0x22, 0x1c, 0x00},  // O
    {0x1e, 0x22, 0x22, 0x1e, 0x02, 0x02, 0x02, 0x00},  // P
    {0x1c, 0x22, 0x22, 0x22, 0x2a, 0x12, 0x2c, 0x00},  // Q
    {0x1e, 0x22, 0x22, 0x1e, 0x0a, 0x12, 0x22, 0x00},  // R
    {0x3c, 0x02, 0x02, 0x1c, 0x20, 0x20, 0x1e, 0x00},  // S
    {0x3e, 0x08, 0x08, 0x08, 0x08, 0x08, 0x08, 0x00},  // T
    {0x22, 0x22, 0x22, 0x22, 0x22, 0x22, 0x1c, 0x00},  // U
    {0x22, 0x22, 0x22, 0x22, 0x22, 0x14, 0x08, 0x00},  // V
    {0x22, 0x22, 0x22, 0x2a, 0x2a, 0x2a, 0x14, 0x00},  // W
    {0x22, 0x22, 0x14, 0x08, 0x14, 0x22, 0x22, 0x00},  // X
    {0x22, 0x22, 0x22, 0x14, 0x08, 0x08, 0x08, 0x00},  // Y
    {0x3e, 0x20, 0x10, 0x08, 0x04, 0x02, 0x3e, 0x00},  // Z
    {0x1c, 0x04, 0x04, 0x04, 0x04, 0x04, 0x1c, 0x00},  // [
    {0x00, 0x02, 0x04, 0x08, 0x10, 0x20, 0x00, 0x00},  // backslash
    {0x1c, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1c, 0x00},  // ]
    {0x08, 0x14, 0x22, 0x00, 0x00, 0x00, 0x00, 0x00},  // ^
    {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x3e, 0x00},  // _
    {0x04, 0x08, 0x10, 0x00, 0x00, 0x00, 0x00, 0x00},  // `
    {0x00, 0x00, 0x1c, 0x20, 0x3c, 0x22, 0x3c, 0x00},  // a
    {0x02, 0x02, 0x1a, 0x26, 0x22, 0x22, 0x1e, 0x00},  // b
    {0x00, 0x00, 0x3c, 0x02, 0x02, 0x02, 0x3c, 0x00},  // c
    {0x20, 0x20, 0x2c, 0x32, 0x22, 0x22, 0x3c, 0x00},  // d
    {0x00, 0x00, 0x1c, 0x22, 0x3e, 0x02, 0x1c, 0x00},  // e
    {0x18, 0x24, 0x04, 0x0e, 0x04, 0x04, 0x04, 0x00},  // f
    {0x00, 0x3c, 0x22, 0x22, 0x3c, 0x20, 0x1c, 0x00},  // g
    {0x02, 0x02, 0x1a, 0x26, 0x22, 0x22, 0x22, 0x00},  // h
    {0x08, 0x00, 0x0c, 0x08, 0x08, 0x08, 0x1c, 0x00},  // i
    {0x10, 0x00, 0x18, 0x10, 0x10, 0x12, 0x0c, 0x00},  // j
    {0x02, 0x02, 0x12, 0x0a, 0x06, 0x0a, 0x12, 0x00},  // k
    {0x04, 0x04, 0x04, 0x04, 0x04, 0x04, 0x18, 0x00},  // l
    {0x00, 0x00, 0x16, 0x2a, 0x2a, 0x22, 0x22, 0x00},  // m
    {0x00, 0x00, 0x1e, 0x22, 0x22, 0x22, 0x22, 0x00},  // n
    {0x00, 0x00, 0x1c, 0x22, 0x22, 0x22, 0x1c, 0x00},  // o
    {0x00, 0x00, 0x1e, 0x22, 0x1e, 0x02, 0x02, 0x00},  // p
    {0x00, 0x00, 0x2c, 0x32, 0x3c, 0x20, 0x20, 0x00},  // q
    {0x00, 0x00, 0x1a, 0x26, 0x02, 0x02, 0x02, 0x00},  // r
    {0x00, 0x00, 0x1c, 0x02, 0x1c, 0x20, 0x1e, 0x00},  // s
    {0x04, 0x04, 0x0e, 0x04, 0x04, 0x24, 0x18, 0x00},  // t
    {0x00, 0x00, 0x22, 0x22, 0x22, 0x32, 0x2c, 0x00},  // u
    {0x00, 0x00, 0x22, 0x22, 0x22, 0x14, 0x08, 0x00},  // v
    {0x00, 0x00, 0x22, 0x22, 0x2a, 0x2a, 0x14, 0x00},  // w
    {0x00, 0x00, 0x22, 0x14, 0x08, 0x14, 0x22, 0x00},  // x
    {0x00, 0x00, 0x22, 0x22, 0x3c, 0x20, 0x1c, 0x00},  // y
    {0x00, 0x00, 0x3e, 0x10, 0x08, 0x04, 0x3e, 0x00},  // z
    {0x10, 0x08, 0x08, 0x04, 0x08, 0x08, 0x10, 0x00},  // {
    {0x08, 0x08, 0x08, 0x08, 0x08, 0x08, 0x08, 0x08},  // |
    {0x04, 0x08, 0x08, 0x10, 0x08, 0x08, 0x04, 0x00},  // }
    {0x00, 0x00, 0x04, 0x2a, 0x10, 0x00, 0x00, 0x00},  // ~
}};

}  // namespace detail

inline bool is_printable_ascii(char c) { return c >= kFirstChar && c <= kLastChar; }

inline void require_printable(const std::string& s, const char* what) {
    for (char c : s) {
        if (!is_printable_ascii(c)) {
            throw EncodingError(std::string(what) + ": character code " + std::to_string(int(static_cast<unsigned char>(c))) +
                                " is not printable ASCII");
        }
    }
}

inline GlyphRows glyph_rows(int font_id, char c) {
    if (font_id < 0 || font_id >= kFontCount) throw DomainError("unknown font id " + std::to_string(font_id));
    if (!is_printable_ascii(c)) throw EncodingError("no glyph for character code " + std::to_string(int(static_cast<unsigned char>(c))));
    GlyphRows rows = detail::kRegularGlyphs[std::size_t(c - kFirstChar)];
    if (font_id == 1) {
        for (auto& r : rows) r = static_cast<std::uint8_t>(r | (r << 1));
    }
    return rows;
}

inline bool glyph_pixel(const GlyphRows& rows, int x, int y) { return (rows[std::size_t(y)] >> x) & 1u; }

}  // namespace textbin
