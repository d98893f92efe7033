#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "oarstd/dataset.hpp"

namespace oarstd {

// Synthetic CT/mask generator. Each sample renders a soft-tissue body with a
// fixed bright bone landmark plus one organ archetype, so classes are
// separable by shape, intensity and position relative to the landmark. Two
// archetypes (SphereA/SphereB) are identical spheres whose centers differ by
// a ~2 voxel offset: resolvable at native resolution, sub-voxel once a whole
// volume is downsampled to network input size.
struct PhantomClassSpec {
  std::string name;  // must be one of archetype_names()
  int count = 0;
};

struct PhantomConfig {
  std::vector<PhantomClassSpec> classes;
  std::array<int, 3> grid_shape{48, 96, 96};  // z cap, y, x
  Spacing spacing{1.0, 1.0, 1.0};
  double jitter = 2.0;             // in-plane anatomy shift, voxels
  double size_jitter = 0.06;       // relative organ size variation
  double delineation_noise = 0.0;  // 0..1 contour corruption severity
  double hu_noise = 12.0;          // gaussian CT noise sigma, HU
  int z_margin = 4;                // slices kept above/below the organ

  // Emitted volumes are z-cropped to the organ's axial extent plus z_margin,
  // the way structure-centered volume pairs are stored.
  void validate() const;
};

// All organ archetype names, pretraining set first, then the four shapes
// reserved for transfer experiments.
const std::vector<std::string>& phantom_archetype_names();

// Writes one sample directory per entry under out_dir/samples and returns the
// manifest (all entries tagged "train"; split separately). Byte-identical
// output for a given (config, seed), regardless of worker count.
DatasetManifest generate_phantom_dataset(const PhantomConfig& config,
                                         std::uint64_t seed,
                                         const std::filesystem::path& out_dir,
                                         int workers = 1);

}  // namespace oarstd
