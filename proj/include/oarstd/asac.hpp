#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "oarstd/dataset.hpp"
#include "oarstd/tensor.hpp"

namespace oarstd {

// Scale-adaptive cropping: every sample is covered by axial crop cubes at a
// ladder of sizes, each resized to a fixed network input so one classifier
// sees the structure at several physical scales.

// (n, m): n axial slices of an m-by-m in-plane window.
struct CropScale {
  int n = 0;
  int m = 0;
  bool operator==(const CropScale&) const = default;
};

// The five supported cube sizes, smallest first.
const std::vector<CropScale>& crop_scale_table();

struct CropCubeSpec {
  int scale_index = -1;  // into crop_scale_table()
  int n = 0;
  int m = 0;
  int z_start = 0;  // may sit anywhere in [0, D-n]; 0 with padding when D < n
  bool padded = false;
};

// Network input tensor: channels (ct, mask) x 12 x 128 x 128.
inline constexpr std::array<int, 4> kModelInputShape{2, 12, 128, 128};

struct ModelInput {
  Tensor<float> data;  // (2, 12, 128, 128), mask channel binary
  CropCubeSpec spec;
};

// Shrinks oversized structures so the largest window spans the mask: when the
// in-plane mask bounding box exceeds the largest m, the whole volume is
// resampled by factor largest_m / max_extent. Returns the factor (1 if
// untouched).
double adaptive_preresize(VolumeSample& sample, int largest_m);

// All crop cubes for a sample at the given scale subset (empty = all scales).
// Starts step by 2n/3 and always include z = D-n; volumes shallower than n
// produce a single centered, zero-padded crop.
std::vector<CropCubeSpec> enumerate_crops(const VolumeSample& sample,
                                          const std::vector<int>& scale_subset = {});

// Cuts the cube (in-plane window centered on the mask centroid, out-of-bounds
// zero-filled) and resizes it to kModelInputShape.
ModelInput extract_and_resize(const VolumeSample& sample, const CropCubeSpec& spec);

struct AugmentRanges {
  double translate_vox = 10.0;
  double rotate_deg = 10.0;
  double shear_deg = 5.0;
  double scale_lo = 0.9;
  double scale_hi = 1.1;
};

// Training-time augmentation: random in-plane affine (translate, rotate,
// shear, scale), then a central 12x96x96 crop. Draws leaving the mask channel
// empty are retried up to 5 times before falling back to the identity
// transform. Identity parameters reproduce the central crop exactly.
ModelInput augment(const ModelInput& input, const AugmentRanges& ranges,
                   std::uint64_t seed);

}  // namespace oarstd
