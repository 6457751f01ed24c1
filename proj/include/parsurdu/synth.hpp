// Synthetic word-image renderer. Each (letter, position) pair owns a fixed
// procedurally generated stroke bitmap; words are composed right-to-left with
// the tiles overlapping at the baseline, then padded to the requested
// geometry and speckled with Gaussian noise.
#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "parsurdu/image.hpp"
#include "parsurdu/shaping.hpp"
#include "parsurdu/util.hpp"

namespace parsurdu {

inline constexpr int kGlyphTileWidth = 12;
inline constexpr int kGlyphTileHeight = 16;
inline constexpr int kGlyphBaselineRow = 10;
inline constexpr int kGlyphOverlap = 1;

namespace detail {

// Salt for the per-form stream; fixed so tiles never depend on caller state.
inline constexpr std::uint64_t kGlyphSalt = 0x676C796068733153ULL;

inline void plot_block(std::vector<std::uint8_t>& mask, int x, int y) {
  for (int dy = 0; dy < 2; ++dy) {
    for (int dx = 0; dx < 2; ++dx) {
      const int xx = x + dx, yy = y + dy;
      if (xx >= 0 && yy >= 0 && xx < kGlyphTileWidth && yy < kGlyphTileHeight) {
        mask[static_cast<std::size_t>(yy) * kGlyphTileWidth + xx] = 1;
      }
    }
  }
}

inline void plot_segment(std::vector<std::uint8_t>& mask, int x0, int y0, int x1, int y1) {
  const int steps = std::max({std::abs(x1 - x0), std::abs(y1 - y0), 1});
  for (int i = 0; i <= steps; ++i) {
    const double t = static_cast<double>(i) / steps;
    plot_block(mask, static_cast<int>(std::lround(x0 + t * (x1 - x0))),
               static_cast<int>(std::lround(y0 + t * (y1 - y0))));
  }
}

}  // namespace detail

// 12x16 ink mask (1 = ink) for one glyph form. Deterministic in (base,
// position) only. Joined positions carry a baseline stub on the side facing
// the neighbour: the following letter sits to the left, the preceding one to
// the right.
inline std::vector<std::uint8_t> glyph_bitmap(char32_t base, GlyphPosition pos) {
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(kGlyphTileWidth) * kGlyphTileHeight, 0);
  Rng rng(mix_seed(detail::kGlyphSalt, static_cast<std::uint64_t>(base),
                   static_cast<std::uint64_t>(pos)));

  const bool joins_left = pos == GlyphPosition::Initial || pos == GlyphPosition::Medial;
  const bool joins_right = pos == GlyphPosition::Medial || pos == GlyphPosition::Final;
  if (joins_left) detail::plot_segment(mask, 0, kGlyphBaselineRow, 2, kGlyphBaselineRow);
  if (joins_right) detail::plot_segment(mask, 9, kGlyphBaselineRow, 11, kGlyphBaselineRow);

  auto body_x = [&] { return static_cast<int>(rng.uniform_int(2, 9)); };
  auto body_y = [&] { return static_cast<int>(rng.uniform_int(2, 12)); };

  // Main strokes.
  int ax = body_x(), ay = body_y();
  for (int s = 0; s < 3; ++s) {
    const int bx = body_x(), by = body_y();
    detail::plot_segment(mask, ax, ay, bx, by);
    ax = bx;
    ay = by;
  }
  // Anchor the body to the baseline so joined forms read as one stroke.
  detail::plot_segment(mask, ax, ay, static_cast<int>(rng.uniform_int(3, 8)), kGlyphBaselineRow);

  // Optional diacritic-like dot above or below.
  if (rng.uniform() < 0.5) {
    const bool above = rng.uniform() < 0.5;
    detail::plot_block(mask, static_cast<int>(rng.uniform_int(3, 8)),
                       above ? static_cast<int>(rng.uniform_int(0, 3))
                             : static_cast<int>(rng.uniform_int(13, 14)));
  }

  // Guarantee a minimum ink budget.
  for (int guard = 0; guard < 10; ++guard) {
    int ink = 0;
    for (std::uint8_t m : mask) ink += m;
    if (ink >= 20) break;
    detail::plot_segment(mask, body_x(), body_y(), body_x(), body_y());
  }
  return mask;
}

struct SynthOptions {
  int width = 128;
  int height = 32;
  double noise_sigma = 8.0;  // additive Gaussian pixel noise
  int jitter_px = 1;         // uniform placement jitter, each axis
};

// Renders one word: shape, compose tiles right-to-left, pad/scale into the
// target geometry (dark ink 0 on light background 255), add noise.
inline GrayImage render_word_image(std::string_view word_utf8, Rng& rng,
                                   const SynthOptions& opt = {}) {
  const std::vector<GlyphForm> forms = shape_word(word_utf8);
  const int n = static_cast<int>(forms.size());
  const int advance = kGlyphTileWidth - kGlyphOverlap;
  const int word_w = kGlyphTileWidth + (n - 1) * advance;

  GrayImage word_img(word_w + 4, kGlyphTileHeight + 4, 255);
  for (int i = 0; i < n; ++i) {
    const std::vector<std::uint8_t> tile = glyph_bitmap(forms[static_cast<std::size_t>(i)].base,
                                                        forms[static_cast<std::size_t>(i)].position);
    const int x_off = 2 + word_w - kGlyphTileWidth - i * advance;  // first letter rightmost
    for (int y = 0; y < kGlyphTileHeight; ++y) {
      for (int x = 0; x < kGlyphTileWidth; ++x) {
        if (tile[static_cast<std::size_t>(y) * kGlyphTileWidth + x]) {
          word_img.at(x_off + x, y + 2) = 0;
        }
      }
    }
  }

  GrayImage canvas = fit_to(word_img, opt.width, opt.height, 255, 2);

  if (opt.jitter_px > 0) {
    const int jx = static_cast<int>(rng.uniform_int(-opt.jitter_px, opt.jitter_px));
    const int jy = static_cast<int>(rng.uniform_int(-opt.jitter_px, opt.jitter_px));
    if (jx != 0 || jy != 0) {
      GrayImage shifted(canvas.width, canvas.height, 255);
      for (int y = 0; y < canvas.height; ++y) {
        for (int x = 0; x < canvas.width; ++x) {
          const int sx = x - jx, sy = y - jy;
          if (sx >= 0 && sy >= 0 && sx < canvas.width && sy < canvas.height) {
            shifted.at(x, y) = canvas.at(sx, sy);
          }
        }
      }
      canvas = std::move(shifted);
    }
  }

  if (opt.noise_sigma > 0.0) {
    for (std::uint8_t& p : canvas.pixels) {
      p = clamp_u8(static_cast<double>(p) + opt.noise_sigma * rng.normal());
    }
  }
  return canvas;
}

}  // namespace parsurdu
