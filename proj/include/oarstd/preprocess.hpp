#pragma once

#include <array>
#include <optional>

#include "oarstd/dataset.hpp"
#include "oarstd/tensor.hpp"

namespace oarstd {

struct PreprocessConfig {
  // Physical spacing ratio z:y:x the volume is resampled to.
  std::array<double, 3> target_ratio{0.77, 1.0, 1.0};
  // HU window mapped to [0, 1].
  double hu_lo = -1000.0;
  double hu_hi = 2500.0;
  // In-plane target spacing; by default the finer of the input's y/x
  // spacings is kept so small structures are never downsampled away.
  std::optional<double> target_spacing_xy;

  void validate() const;
};

// Corner-aligned trilinear interpolation to a new grid size. Constant input
// maps to constant output exactly; resampling to the same shape is a copy.
GridF trilinear_resample(const GridF& in, int nz, int ny, int nx);
// Mask variant: interpolates the {0,1} field and thresholds at 0.5.
GridU8 resample_mask(const GridU8& in, int nz, int ny, int nx);

// Resamples ct and mask so spacing reaches the target ratio while the
// physical extent along each axis is preserved to within voxel rounding.
void normalize_voxels(VolumeSample& sample, const PreprocessConfig& config);

// Maps HU through clip(hu, lo, hi) -> [0, 1] and flags the sample.
void normalize_hu(VolumeSample& sample, const PreprocessConfig& config);

// Replaces empty mask slices strictly between the first and last nonempty
// slice with a copy of the nearest nonempty slice (lower index on ties).
void fill_missing_mask_slices(GridU8& mask);

// Full pipeline: slice fill, voxel normalization, HU normalization.
VolumeSample preprocess_sample(const VolumeSample& sample, const PreprocessConfig& config);

}  // namespace oarstd
