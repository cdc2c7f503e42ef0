#include "mambacsr/degrade.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "mambacsr/errors.hpp"
#include "mambacsr/resample.hpp"
#include "mambacsr/rng.hpp"

namespace mambacsr {

namespace {

// ITU-T T.81 Annex K baseline tables.
constexpr std::array<int, 64> kBaseLuma = {
    16, 11, 10, 16, 24,  40,  51,  61,   //
    12, 12, 14, 19, 26,  58,  60,  55,   //
    14, 13, 16, 24, 40,  57,  69,  56,   //
    14, 17, 22, 29, 51,  87,  80,  62,   //
    18, 22, 37, 56, 68,  109, 103, 77,   //
    24, 35, 55, 64, 81,  104, 113, 92,   //
    49, 64, 78, 87, 103, 121, 120, 101,  //
    72, 92, 95, 98, 112, 100, 103, 99};

constexpr std::array<int, 64> kBaseChroma = {
    17, 18, 24, 47, 99, 99, 99, 99,  //
    18, 21, 26, 66, 99, 99, 99, 99,  //
    24, 26, 56, 99, 99, 99, 99, 99,  //
    47, 66, 99, 99, 99, 99, 99, 99,  //
    99, 99, 99, 99, 99, 99, 99, 99,  //
    99, 99, 99, 99, 99, 99, 99, 99,  //
    99, 99, 99, 99, 99, 99, 99, 99,  //
    99, 99, 99, 99, 99, 99, 99, 99};

uint8_t clamp_u8(double v) {
  return static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
}

struct Plane {
  int h = 0;
  int w = 0;
  std::vector<double> v;

  double& at(int r, int c) { return v[static_cast<size_t>(r) * w + c]; }
  double at(int r, int c) const { return v[static_cast<size_t>(r) * w + c]; }
};

Plane make_plane(int h, int w) {
  Plane p;
  p.h = h;
  p.w = w;
  p.v.assign(static_cast<size_t>(h) * w, 0.0);
  return p;
}

// 2x2 mean; odd borders average the available samples.
Plane subsample_420(const Plane& p) {
  Plane out = make_plane((p.h + 1) / 2, (p.w + 1) / 2);
  for (int r = 0; r < out.h; ++r) {
    for (int c = 0; c < out.w; ++c) {
      double acc = 0.0;
      int cnt = 0;
      for (int dr = 0; dr < 2; ++dr) {
        for (int dc = 0; dc < 2; ++dc) {
          const int sr = 2 * r + dr, sc = 2 * c + dc;
          if (sr < p.h && sc < p.w) {
            acc += p.at(sr, sc);
            ++cnt;
          }
        }
      }
      out.at(r, c) = acc / cnt;
    }
  }
  return out;
}

Plane upsample_nearest(const Plane& p, int h, int w) {
  Plane out = make_plane(h, w);
  for (int r = 0; r < h; ++r) {
    const int sr = std::min(r / 2, p.h - 1);
    for (int c = 0; c < w; ++c) {
      out.at(r, c) = p.at(sr, std::min(c / 2, p.w - 1));
    }
  }
  return out;
}

// Level shift, DCT, quantize/dequantize, inverse DCT, per 8x8 block.
// Partial border blocks are edge-replicated before the transform.
void quantize_plane(Plane& p, const std::array<int, 64>& table) {
  double block[64];
  double coef[64];
  for (int br = 0; br < p.h; br += 8) {
    for (int bc = 0; bc < p.w; bc += 8) {
      for (int r = 0; r < 8; ++r) {
        const int sr = std::min(br + r, p.h - 1);
        for (int c = 0; c < 8; ++c) {
          block[r * 8 + c] = p.at(sr, std::min(bc + c, p.w - 1)) - 128.0;
        }
      }
      dct8x8_forward(block, coef);
      for (int i = 0; i < 64; ++i) {
        const double q = static_cast<double>(table[static_cast<size_t>(i)]);
        coef[i] = std::round(coef[i] / q) * q;
      }
      dct8x8_inverse(coef, block);
      const int rmax = std::min(8, p.h - br);
      const int cmax = std::min(8, p.w - bc);
      for (int r = 0; r < rmax; ++r) {
        for (int c = 0; c < cmax; ++c) {
          p.at(br + r, bc + c) = block[r * 8 + c] + 128.0;
        }
      }
    }
  }
}

}  // namespace

ImageU8 bicubic_resize(const ImageU8& img, int out_h, int out_w) {
  if (out_h <= 0 || out_w <= 0) {
    throw InvariantError("bicubic_resize: non-positive target extents");
  }
  const std::vector<CubicTap> ytaps = cubic_taps(img.height, out_h);
  const std::vector<CubicTap> xtaps = cubic_taps(img.width, out_w);
  // horizontal pass first, float intermediate
  std::vector<double> mid(static_cast<size_t>(img.height) * out_w * 3);
  for (int r = 0; r < img.height; ++r) {
    for (int c = 0; c < out_w; ++c) {
      const CubicTap& t = xtaps[static_cast<size_t>(c)];
      for (int ch = 0; ch < 3; ++ch) {
        double acc = 0.0;
        for (int j = 0; j < 4; ++j) acc += t.w[j] * img.at(r, t.idx[j], ch);
        mid[(static_cast<size_t>(r) * out_w + c) * 3 + ch] = acc;
      }
    }
  }
  ImageU8 out = make_image(out_h, out_w);
  for (int r = 0; r < out_h; ++r) {
    const CubicTap& t = ytaps[static_cast<size_t>(r)];
    for (int c = 0; c < out_w; ++c) {
      for (int ch = 0; ch < 3; ++ch) {
        double acc = 0.0;
        for (int j = 0; j < 4; ++j) {
          acc += t.w[j] * mid[(static_cast<size_t>(t.idx[j]) * out_w + c) * 3 + ch];
        }
        out.at(r, c, ch) = clamp_u8(acc);
      }
    }
  }
  return out;
}

void rgb_to_ycbcr(double r, double g, double b, double& y, double& cb, double& cr) {
  y = 0.299 * r + 0.587 * g + 0.114 * b;
  cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b;
  cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b;
}

void ycbcr_to_rgb(double y, double cb, double cr, double& r, double& g, double& b) {
  r = y + 1.402 * (cr - 128.0);
  g = y - 0.344136 * (cb - 128.0) - 0.714136 * (cr - 128.0);
  b = y + 1.772 * (cb - 128.0);
}

std::vector<double> luma_plane(const ImageU8& img) {
  std::vector<double> y(static_cast<size_t>(img.height) * img.width);
  for (int r = 0; r < img.height; ++r) {
    for (int c = 0; c < img.width; ++c) {
      double yy, cb, cr;
      rgb_to_ycbcr(img.at(r, c, 0), img.at(r, c, 1), img.at(r, c, 2), yy, cb, cr);
      y[static_cast<size_t>(r) * img.width + c] = yy;
    }
  }
  return y;
}

QuantTables base_quant_tables() { return {kBaseLuma, kBaseChroma}; }

QuantTables quant_tables_for_quality(int qf) {
  if (qf < 1 || qf > 100) {
    throw InvariantError("quality factor must be in [1, 100], got " +
                         std::to_string(qf));
  }
  const int s = qf < 50 ? 5000 / qf : 200 - 2 * qf;
  QuantTables out = base_quant_tables();
  for (int i = 0; i < 64; ++i) {
    out.luma[static_cast<size_t>(i)] =
        std::clamp((kBaseLuma[static_cast<size_t>(i)] * s + 50) / 100, 1, 255);
    out.chroma[static_cast<size_t>(i)] =
        std::clamp((kBaseChroma[static_cast<size_t>(i)] * s + 50) / 100, 1, 255);
  }
  return out;
}

void dct8x8_forward(const double* in, double* out) {
  static const auto basis = [] {
    std::array<double, 64> c{};
    for (int u = 0; u < 8; ++u) {
      const double alpha = u == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
      for (int x = 0; x < 8; ++x) {
        c[static_cast<size_t>(u * 8 + x)] =
            alpha * std::cos((2.0 * x + 1.0) * u * M_PI / 16.0);
      }
    }
    return c;
  }();
  double tmp[64];
  // rows
  for (int r = 0; r < 8; ++r) {
    for (int u = 0; u < 8; ++u) {
      double acc = 0.0;
      for (int x = 0; x < 8; ++x) acc += basis[static_cast<size_t>(u * 8 + x)] * in[r * 8 + x];
      tmp[r * 8 + u] = acc;
    }
  }
  // columns
  for (int u = 0; u < 8; ++u) {
    for (int c = 0; c < 8; ++c) {
      double acc = 0.0;
      for (int x = 0; x < 8; ++x) acc += basis[static_cast<size_t>(u * 8 + x)] * tmp[x * 8 + c];
      out[u * 8 + c] = acc;
    }
  }
}

void dct8x8_inverse(const double* in, double* out) {
  static const auto basis = [] {
    std::array<double, 64> c{};
    for (int u = 0; u < 8; ++u) {
      const double alpha = u == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
      for (int x = 0; x < 8; ++x) {
        c[static_cast<size_t>(u * 8 + x)] =
            alpha * std::cos((2.0 * x + 1.0) * u * M_PI / 16.0);
      }
    }
    return c;
  }();
  double tmp[64];
  for (int u = 0; u < 8; ++u) {
    for (int c = 0; c < 8; ++c) {
      double acc = 0.0;
      for (int x = 0; x < 8; ++x) acc += basis[static_cast<size_t>(x * 8 + u)] * in[x * 8 + c];
      tmp[u * 8 + c] = acc;
    }
  }
  for (int r = 0; r < 8; ++r) {
    for (int x = 0; x < 8; ++x) {
      double acc = 0.0;
      for (int u = 0; u < 8; ++u) acc += basis[static_cast<size_t>(u * 8 + x)] * tmp[r * 8 + u];
      out[r * 8 + x] = acc;
    }
  }
}

ImageU8 jpeg_like_compress(const ImageU8& img, int qf) {
  const QuantTables tables = quant_tables_for_quality(qf);
  if (qf != 10 && qf != 20 && qf != 30) {
    std::fprintf(stderr,
                 "warning: quality factor %d is outside the studied set "
                 "{10, 20, 30}\n",
                 qf);
  }
  const int h = img.height, w = img.width;
  Plane y = make_plane(h, w), cb = make_plane(h, w), cr = make_plane(h, w);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      rgb_to_ycbcr(img.at(r, c, 0), img.at(r, c, 1), img.at(r, c, 2), y.at(r, c),
                   cb.at(r, c), cr.at(r, c));
    }
  }
  Plane cb2 = subsample_420(cb);
  Plane cr2 = subsample_420(cr);
  quantize_plane(y, tables.luma);
  quantize_plane(cb2, tables.chroma);
  quantize_plane(cr2, tables.chroma);
  const Plane cbu = upsample_nearest(cb2, h, w);
  const Plane cru = upsample_nearest(cr2, h, w);
  ImageU8 out = make_image(h, w);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      double rr, gg, bb;
      ycbcr_to_rgb(y.at(r, c), cbu.at(r, c), cru.at(r, c), rr, gg, bb);
      out.at(r, c, 0) = clamp_u8(rr);
      out.at(r, c, 1) = clamp_u8(gg);
      out.at(r, c, 2) = clamp_u8(bb);
    }
  }
  return out;
}

ImageU8 degrade(const ImageU8& hr, const DegradeSpec& spec) {
  if (spec.scale < 1) throw InvariantError("degrade: scale must be >= 1");
  if (hr.height < spec.scale || hr.width < spec.scale) {
    throw InvariantError("degrade: image smaller than one downsampling step");
  }
  const ImageU8 lr =
      bicubic_resize(hr, hr.height / spec.scale, hr.width / spec.scale);
  return jpeg_like_compress(lr, spec.qf);
}

ImageU8 dihedral_transform(const ImageU8& img, int which) {
  if (which < 0 || which >= 8) {
    throw InvariantError("dihedral_transform: index must be in [0, 8)");
  }
  const bool mirror_cols = which & 1;
  const bool mirror_rows = which & 2;
  const bool transpose = which & 4;
  const int oh = transpose ? img.width : img.height;
  const int ow = transpose ? img.height : img.width;
  ImageU8 out = make_image(oh, ow);
  for (int r = 0; r < oh; ++r) {
    for (int c = 0; c < ow; ++c) {
      int sr = transpose ? c : r;
      int sc = transpose ? r : c;
      if (mirror_rows) sr = img.height - 1 - sr;
      if (mirror_cols) sc = img.width - 1 - sc;
      for (int ch = 0; ch < 3; ++ch) out.at(r, c, ch) = img.at(sr, sc, ch);
    }
  }
  return out;
}

ImageU8 crop_and_augment(const ImageU8& img, int size, uint64_t seed) {
  if (size <= 0 || size > img.height || size > img.width) {
    throw InvariantError("crop_and_augment: crop size " + std::to_string(size) +
                         " does not fit in " + std::to_string(img.height) + "x" +
                         std::to_string(img.width));
  }
  Rng rng = Rng(seed).child("crop_and_augment");
  const int r0 = static_cast<int>(rng.below(static_cast<uint64_t>(img.height - size + 1)));
  const int c0 = static_cast<int>(rng.below(static_cast<uint64_t>(img.width - size + 1)));
  ImageU8 crop = make_image(size, size);
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) {
      for (int ch = 0; ch < 3; ++ch) crop.at(r, c, ch) = img.at(r0 + r, c0 + c, ch);
    }
  }
  return dihedral_transform(crop, static_cast<int>(rng.below(8)));
}

}  // namespace mambacsr
