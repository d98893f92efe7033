#include "oarstd/asac.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "oarstd/preprocess.hpp"
#include "oarstd/rng.hpp"

namespace oarstd {

namespace {

constexpr int kInD = 12, kInM = 128;   // resize target (matches the smallest scale)
constexpr int kAugD = 12, kAugM = 96;  // training crop after augmentation

struct Centroid {
  double y = 0, x = 0;
};

Centroid inplane_mask_centroid(const VolumeSample& s) {
  double sy = 0, sx = 0;
  std::int64_t n = 0;
  for (int z = 0; z < s.mask.dim(0); ++z)
    for (int y = 0; y < s.mask.dim(1); ++y)
      for (int x = 0; x < s.mask.dim(2); ++x)
        if (s.mask.at(z, y, x)) {
          sy += y;
          sx += x;
          ++n;
        }
  if (n == 0) throw std::invalid_argument("mask is empty");
  return {sy / static_cast<double>(n), sx / static_cast<double>(n)};
}

}  // namespace

const std::vector<CropScale>& crop_scale_table() {
  static const std::vector<CropScale> table{
      {12, 128}, {18, 192}, {24, 256}, {30, 320}, {36, 384}};
  return table;
}

double adaptive_preresize(VolumeSample& sample, int largest_m) {
  if (largest_m <= 0) throw std::invalid_argument("largest_m must be positive");
  int ymin = sample.mask.dim(1), ymax = -1, xmin = sample.mask.dim(2), xmax = -1;
  for (int z = 0; z < sample.mask.dim(0); ++z)
    for (int y = 0; y < sample.mask.dim(1); ++y)
      for (int x = 0; x < sample.mask.dim(2); ++x)
        if (sample.mask.at(z, y, x)) {
          ymin = std::min(ymin, y);
          ymax = std::max(ymax, y);
          xmin = std::min(xmin, x);
          xmax = std::max(xmax, x);
        }
  if (ymax < 0) throw std::invalid_argument("mask is empty");

  const int extent = std::max(ymax - ymin + 1, xmax - xmin + 1);
  if (extent <= largest_m) return 1.0;

  const double f = static_cast<double>(largest_m) / extent;
  const int dims[3] = {sample.ct.dim(0), sample.ct.dim(1), sample.ct.dim(2)};
  int out[3];
  for (int a = 0; a < 3; ++a)
    out[a] = std::max(1, static_cast<int>(std::floor((dims[a] - 1) * f)) + 1);

  const Spacing sp = sample.spacing;
  sample.ct = trilinear_resample(sample.ct, out[0], out[1], out[2]);
  sample.mask = resample_mask(sample.mask, out[0], out[1], out[2]);
  const auto stretch = [](double spacing, int in_dim, int out_dim) {
    return out_dim > 1 ? spacing * (in_dim - 1) / (out_dim - 1) : spacing;
  };
  sample.spacing = {stretch(sp.z, dims[0], out[0]), stretch(sp.y, dims[1], out[1]),
                    stretch(sp.x, dims[2], out[2])};
  return f;
}

std::vector<CropCubeSpec> enumerate_crops(const VolumeSample& sample,
                                          const std::vector<int>& scale_subset) {
  const auto& table = crop_scale_table();
  std::vector<int> scales = scale_subset;
  if (scales.empty())
    for (int i = 0; i < static_cast<int>(table.size()); ++i) scales.push_back(i);
  for (int s : scales)
    if (s < 0 || s >= static_cast<int>(table.size()))
      throw std::invalid_argument("scale index " + std::to_string(s) + " out of range");

  const int D = sample.ct.dim(0);
  std::vector<CropCubeSpec> out;
  for (int s : scales) {
    const auto [n, m] = table[static_cast<std::size_t>(s)];
    if (D < n) {
      out.push_back({s, n, m, 0, true});
      continue;
    }
    const int step = 2 * n / 3;
    int last = -1;
    for (int z = 0; z <= D - n; z += step) {
      out.push_back({s, n, m, z, false});
      last = z;
    }
    if (last != D - n) out.push_back({s, n, m, D - n, false});
  }
  return out;
}

ModelInput extract_and_resize(const VolumeSample& sample, const CropCubeSpec& spec) {
  const auto& table = crop_scale_table();
  if (spec.scale_index < 0 || spec.scale_index >= static_cast<int>(table.size()) ||
      table[static_cast<std::size_t>(spec.scale_index)].n != spec.n ||
      table[static_cast<std::size_t>(spec.scale_index)].m != spec.m)
    throw std::invalid_argument("crop spec does not match the scale table");

  const int D = sample.ct.dim(0), H = sample.ct.dim(1), W = sample.ct.dim(2);
  const int n = spec.n, m = spec.m;
  if (!spec.padded && (spec.z_start < 0 || spec.z_start + n > D))
    throw std::invalid_argument("crop z range outside volume");

  const Centroid c = inplane_mask_centroid(sample);
  const int y0 = static_cast<int>(std::lround(c.y)) - m / 2;
  const int x0 = static_cast<int>(std::lround(c.x)) - m / 2;
  const int pad_z = spec.padded ? (n - D) / 2 : 0;

  GridF ct({n, m, m});
  GridF mk({n, m, m});
  for (int z = 0; z < n; ++z) {
    const int sz = spec.z_start + z - pad_z;
    if (sz < 0 || sz >= D) continue;
    for (int y = 0; y < m; ++y) {
      const int sy = y0 + y;
      if (sy < 0 || sy >= H) continue;
      const int xa = std::max(0, -x0);
      const int xb = std::min(m, W - x0);
      for (int x = xa; x < xb; ++x) {
        ct.at(z, y, x) = sample.ct.at(sz, sy, x0 + x);
        mk.at(z, y, x) = sample.mask.at(sz, sy, x0 + x);
      }
    }
  }

  const GridF ct_r = trilinear_resample(ct, kInD, kInM, kInM);
  const GridF mk_r = trilinear_resample(mk, kInD, kInM, kInM);

  ModelInput out;
  out.spec = spec;
  out.data = Tensor<float>({2, kInD, kInM, kInM});
  const std::int64_t plane = static_cast<std::int64_t>(kInD) * kInM * kInM;
  std::copy_n(ct_r.data(), plane, out.data.data());
  float* mdst = out.data.data() + plane;
  for (std::int64_t i = 0; i < plane; ++i) mdst[i] = mk_r[i] >= 0.5f ? 1.0f : 0.0f;
  return out;
}

namespace {

struct Affine2 {
  // source = M * (dst - center) + center - translation
  double m00, m01, m10, m11;
  double ty, tx;
};

Affine2 draw_affine(Rng& rng, const AugmentRanges& r) {
  const double ty = rng.uniform(-r.translate_vox, r.translate_vox);
  const double tx = rng.uniform(-r.translate_vox, r.translate_vox);
  const double rot = rng.uniform(-r.rotate_deg, r.rotate_deg) * 3.14159265358979323846 / 180.0;
  const double shear = rng.uniform(-r.shear_deg, r.shear_deg) * 3.14159265358979323846 / 180.0;
  const double scale = rng.uniform(r.scale_lo, r.scale_hi);

  // Forward map F = R(rot) * Shear(shear) * scale; sampling uses its inverse.
  const double cr = std::cos(rot), sr = std::sin(rot);
  const double sh = std::tan(shear);
  // F = [[cr, -sr], [sr, cr]] * [[1, sh], [0, 1]] * scale  (rows: y, x)
  const double f00 = cr * scale, f01 = (cr * sh - sr) * scale;
  const double f10 = sr * scale, f11 = (sr * sh + cr) * scale;
  const double det = f00 * f11 - f01 * f10;
  return {f11 / det, -f01 / det, -f10 / det, f00 / det, ty, tx};
}

constexpr Affine2 kIdentityAffine{1.0, 0.0, 0.0, 1.0, 0.0, 0.0};

// Applies the in-plane affine and crops the central kAugM window. The mask
// channel is sampled bilinearly and rethresholded. The identity transform
// degenerates to an exact central crop.
Tensor<float> resample_augmented(const Tensor<float>& in, const Affine2& a) {
  const int D = in.dim(1), M = in.dim(2);
  const double cy = (M - 1) / 2.0, cx = (M - 1) / 2.0;
  const int off = (M - kAugM) / 2;
  Tensor<float> out({2, kAugD, kAugM, kAugM});

  for (int ch = 0; ch < 2; ++ch) {
    const bool mask_ch = ch == 1;
    for (int z = 0; z < D; ++z) {
      for (int y = 0; y < kAugM; ++y) {
        for (int x = 0; x < kAugM; ++x) {
          const double dy = (y + off) - cy;
          const double dx = (x + off) - cx;
          const double syf = a.m00 * dy + a.m01 * dx + cy - a.ty;
          const double sxf = a.m10 * dy + a.m11 * dx + cx - a.tx;
          float v = 0.0f;
          if (syf >= 0 && syf <= M - 1 && sxf >= 0 && sxf <= M - 1) {
            const int y0 = std::min(static_cast<int>(syf), M - 2);
            const int x0 = std::min(static_cast<int>(sxf), M - 2);
            const double fy = syf - y0, fx = sxf - x0;
            const float v00 = in.at(ch, z, y0, x0);
            const float v01 = in.at(ch, z, y0, std::min(x0 + 1, M - 1));
            const float v10 = in.at(ch, z, std::min(y0 + 1, M - 1), x0);
            const float v11 = in.at(ch, z, std::min(y0 + 1, M - 1), std::min(x0 + 1, M - 1));
            const double top = v00 + fx * (static_cast<double>(v01) - v00);
            const double bot = v10 + fx * (static_cast<double>(v11) - v10);
            v = static_cast<float>(top + fy * (bot - top));
          }
          out.at(ch, z, y, x) = mask_ch ? (v >= 0.5f ? 1.0f : 0.0f) : v;
        }
      }
    }
  }
  return out;
}

bool mask_nonempty(const Tensor<float>& t) {
  const std::int64_t plane = static_cast<std::int64_t>(t.dim(1)) * t.dim(2) * t.dim(3);
  const float* p = t.data() + plane;
  for (std::int64_t i = 0; i < plane; ++i)
    if (p[i] != 0.0f) return true;
  return false;
}

}  // namespace

ModelInput augment(const ModelInput& input, const AugmentRanges& ranges,
                   std::uint64_t seed) {
  if (input.data.rank() != 4 || input.data.dim(0) != 2 || input.data.dim(1) != kInD ||
      input.data.dim(2) != kInM || input.data.dim(3) != kInM)
    throw std::invalid_argument("augment expects a " + std::to_string(kInD) + "x" +
                                std::to_string(kInM) + " model input");

  Rng rng(seed);
  ModelInput out;
  out.spec = input.spec;
  for (int attempt = 0; attempt < 5; ++attempt) {
    const Affine2 a = draw_affine(rng, ranges);
    out.data = resample_augmented(input.data, a);
    if (mask_nonempty(out.data)) return out;
  }
  out.data = resample_augmented(input.data, kIdentityAffine);
  return out;
}

}  // namespace oarstd
