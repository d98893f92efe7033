#include "oarstd/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace oarstd {

namespace {

// lerp written as a + t*(b - a): equal endpoints reproduce the value exactly,
// which keeps constant volumes bit-stable through resampling.
inline float lerp(float a, float b, double t) {
  return static_cast<float>(a + t * (static_cast<double>(b) - a));
}

struct AxisMap {
  int i0, i1;
  double t;
};

inline AxisMap axis_map(double pos, int in_dim) {
  int i0 = static_cast<int>(std::floor(pos));
  i0 = std::clamp(i0, 0, in_dim - 1);
  const int i1 = std::min(i0 + 1, in_dim - 1);
  return {i0, i1, pos - i0};
}

inline double axis_scale(int in_dim, int out_dim) {
  return out_dim > 1 ? static_cast<double>(in_dim - 1) / (out_dim - 1) : 0.0;
}

int rounded_dim(double extent, double spacing) {
  return static_cast<int>(std::floor(extent / spacing + 0.5)) + 1;
}

}  // namespace

void PreprocessConfig::validate() const {
  for (double r : target_ratio)
    if (!(r > 0)) throw std::invalid_argument("target ratio components must be positive");
  if (!(hu_hi > hu_lo)) throw std::invalid_argument("hu window must be increasing");
  if (target_spacing_xy && !(*target_spacing_xy > 0))
    throw std::invalid_argument("target spacing must be positive");
}

GridF trilinear_resample(const GridF& in, int nz, int ny, int nx) {
  if (in.rank() != 3 || in.size() == 0) throw std::invalid_argument("resample needs a rank-3 volume");
  if (nz < 1 || ny < 1 || nx < 1) throw std::invalid_argument("resample target must be positive");
  const int iz = in.dim(0), iy = in.dim(1), ix = in.dim(2);
  if (nz == iz && ny == iy && nx == ix) return in;

  GridF out({nz, ny, nx});
  const double sz = axis_scale(iz, nz);
  const double sy = axis_scale(iy, ny);
  const double sx = axis_scale(ix, nx);

  std::vector<AxisMap> xs(static_cast<std::size_t>(nx));
  for (int x = 0; x < nx; ++x) xs[static_cast<std::size_t>(x)] = axis_map(x * sx, ix);

  for (int z = 0; z < nz; ++z) {
    const AxisMap mz = axis_map(z * sz, iz);
    for (int y = 0; y < ny; ++y) {
      const AxisMap my = axis_map(y * sy, iy);
      const float* p00 = &in.at(mz.i0, my.i0, 0);
      const float* p01 = &in.at(mz.i0, my.i1, 0);
      const float* p10 = &in.at(mz.i1, my.i0, 0);
      const float* p11 = &in.at(mz.i1, my.i1, 0);
      float* dst = &out.at(z, y, 0);
      for (int x = 0; x < nx; ++x) {
        const AxisMap& mx = xs[static_cast<std::size_t>(x)];
        const float a = lerp(lerp(p00[mx.i0], p00[mx.i1], mx.t),
                             lerp(p01[mx.i0], p01[mx.i1], mx.t), my.t);
        const float b = lerp(lerp(p10[mx.i0], p10[mx.i1], mx.t),
                             lerp(p11[mx.i0], p11[mx.i1], mx.t), my.t);
        dst[x] = lerp(a, b, mz.t);
      }
    }
  }
  return out;
}

GridU8 resample_mask(const GridU8& in, int nz, int ny, int nx) {
  if (in.rank() != 3 || in.size() == 0) throw std::invalid_argument("resample needs a rank-3 volume");
  if (nz == in.dim(0) && ny == in.dim(1) && nx == in.dim(2)) return in;
  GridF f({in.dim(0), in.dim(1), in.dim(2)});
  for (std::int64_t i = 0; i < in.size(); ++i) f[i] = in[i];
  const GridF r = trilinear_resample(f, nz, ny, nx);
  GridU8 out({nz, ny, nx});
  for (std::int64_t i = 0; i < r.size(); ++i) out[i] = r[i] >= 0.5f ? 1 : 0;
  return out;
}

void normalize_voxels(VolumeSample& sample, const PreprocessConfig& config) {
  config.validate();
  sample.validate();

  // In-plane unit spacing, then the ratio fixes the other axes.
  const double unit = config.target_spacing_xy
                          ? *config.target_spacing_xy
                          : std::min(sample.spacing.y, sample.spacing.x);
  const double rz = config.target_ratio[0] / config.target_ratio[1];
  const double rx = config.target_ratio[2] / config.target_ratio[1];
  const Spacing target{rz * unit, unit, rx * unit};

  const int dims[3] = {sample.ct.dim(0), sample.ct.dim(1), sample.ct.dim(2)};
  const double spacings[3] = {sample.spacing.z, sample.spacing.y, sample.spacing.x};
  const double targets[3] = {target.z, target.y, target.x};

  int out_dims[3];
  double out_spacing[3];
  for (int a = 0; a < 3; ++a) {
    const double extent = (dims[a] - 1) * spacings[a];
    out_dims[a] = dims[a] > 1 ? std::max(1, rounded_dim(extent, targets[a])) : 1;
    out_spacing[a] = out_dims[a] > 1 ? extent / (out_dims[a] - 1) : targets[a];
  }

  sample.ct = trilinear_resample(sample.ct, out_dims[0], out_dims[1], out_dims[2]);
  sample.mask = resample_mask(sample.mask, out_dims[0], out_dims[1], out_dims[2]);
  sample.spacing = {out_spacing[0], out_spacing[1], out_spacing[2]};

  bool any = false;
  for (std::int64_t i = 0; i < sample.mask.size() && !any; ++i) any = sample.mask[i] != 0;
  if (!any)
    throw std::runtime_error("mask '" + sample.original_label +
                             "' lost all foreground during voxel normalization");
}

void normalize_hu(VolumeSample& sample, const PreprocessConfig& config) {
  config.validate();
  if (sample.hu_normalized)
    throw std::invalid_argument("sample '" + sample.original_label + "' is already normalized");
  const float lo = static_cast<float>(config.hu_lo);
  const float hi = static_cast<float>(config.hu_hi);
  const float range = hi - lo;
  for (std::int64_t i = 0; i < sample.ct.size(); ++i) {
    const float v = std::clamp(sample.ct[i], lo, hi);
    sample.ct[i] = (v - lo) / range;
  }
  sample.hu_normalized = true;
}

void fill_missing_mask_slices(GridU8& mask) {
  if (mask.rank() != 3) throw std::invalid_argument("mask must be rank 3");
  const int D = mask.dim(0);
  const std::int64_t slice = static_cast<std::int64_t>(mask.dim(1)) * mask.dim(2);

  std::vector<bool> nonempty(static_cast<std::size_t>(D), false);
  int first = -1, last = -1;
  for (int z = 0; z < D; ++z) {
    const std::uint8_t* p = mask.data() + z * slice;
    for (std::int64_t i = 0; i < slice; ++i)
      if (p[i]) {
        nonempty[static_cast<std::size_t>(z)] = true;
        break;
      }
    if (nonempty[static_cast<std::size_t>(z)]) {
      if (first < 0) first = z;
      last = z;
    }
  }
  if (first < 0) return;

  for (int z = first + 1; z < last; ++z) {
    if (nonempty[static_cast<std::size_t>(z)]) continue;
    int src = -1;
    for (int d = 1; src < 0; ++d) {
      if (z - d >= first && nonempty[static_cast<std::size_t>(z - d)])
        src = z - d;  // lower index wins ties
      else if (z + d <= last && nonempty[static_cast<std::size_t>(z + d)])
        src = z + d;
    }
    std::copy_n(mask.data() + src * slice, slice, mask.data() + z * slice);
  }
}

VolumeSample preprocess_sample(const VolumeSample& sample, const PreprocessConfig& config) {
  VolumeSample out = sample;
  fill_missing_mask_slices(out.mask);
  normalize_voxels(out, config);
  normalize_hu(out, config);
  return out;
}

}  // namespace oarstd
