#include "oarstd/phantom.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <thread>

#include "oarstd/rng.hpp"

namespace oarstd {

namespace {

struct Vec3 {
  double z = 0, y = 0, x = 0;
};

enum class Shape {
  ellipsoid,   // semi-axes a
  tube_z,      // radius a.x in-plane, half-length a.z
  tube_y,      // radius a.x in z/x, half-length a.y
  torus_z,     // major radius a.y, minor radius a.x, axial plane
  cross_bars,  // two boxes: (a.z, a.x, a.y) and (a.z, a.y, a.x) half-extents
  shell,       // outer radius a.y, inner radius a.z
  cone_z,      // half-height a.z, base radius a.y at the bottom, apex on top
};

struct Archetype {
  const char* name;
  Shape shape;
  Vec3 a;       // shape parameters, voxels
  Vec3 offset;  // organ center relative to the anatomy center
  double hu;    // organ HU offset above soft tissue
};

constexpr double kAirHu = -1000.0;
constexpr double kBodyHu = 30.0;
constexpr double kLandmarkHu = 700.0;
constexpr Vec3 kLandmarkOffset{0.0, -14.0, 9.0};
constexpr double kLandmarkRadius = 3.5;
constexpr Vec3 kBodySemi{1e9, 40.0, 44.0};  // elliptic cylinder along z

const Archetype kArchetypes[] = {
    {"EllipsoidLarge", Shape::ellipsoid, {11.0, 26.0, 30.0}, {0, 0, 0}, 60.0},
    {"TubeAxial", Shape::tube_z, {12.0, 0, 3.5}, {0, 0, 0}, 90.0},
    {"OvalL", Shape::ellipsoid, {4.0, 7.0, 5.0}, {0, 4.0, -15.0}, 75.0},
    {"OvalR", Shape::ellipsoid, {4.0, 7.0, 5.0}, {0, 4.0, 15.0}, 75.0},
    {"SlabFlat", Shape::ellipsoid, {3.0, 16.0, 9.0}, {0, -10.0, 0}, 110.0},
    {"TubeCoronal", Shape::tube_y, {0, 14.0, 3.0}, {0, 6.0, 0}, 50.0},
    {"SphereA", Shape::ellipsoid, {2.5, 2.5, 2.5}, {0, -6.0, 0}, 70.0},
    {"SphereB", Shape::ellipsoid, {2.5, 2.5, 2.5}, {1.0, -4.0, 0}, 70.0},
    {"RingAxial", Shape::torus_z, {0, 9.0, 2.2}, {0, 2.0, 0}, 85.0},
    {"CrossBars", Shape::cross_bars, {2.0, 12.0, 2.0}, {0, 0, 0}, 95.0},
    {"ShellSphere", Shape::shell, {5.5, 8.0, 0}, {0, -2.0, 0}, 65.0},
    {"ConeAxial", Shape::cone_z, {8.0, 7.0, 0}, {0, 0, 0}, 105.0},
};

const Archetype& archetype_by_name(const std::string& name) {
  for (const auto& a : kArchetypes)
    if (name == a.name) return a;
  throw std::invalid_argument("unknown phantom archetype: " + name);
}

bool inside_organ(const Archetype& arch, double scale, Vec3 p) {
  const Vec3& a = arch.a;
  p.z /= scale;
  p.y /= scale;
  p.x /= scale;
  switch (arch.shape) {
    case Shape::ellipsoid: {
      const double q = p.z * p.z / (a.z * a.z) + p.y * p.y / (a.y * a.y) +
                       p.x * p.x / (a.x * a.x);
      return q <= 1.0;
    }
    case Shape::tube_z:
      return std::fabs(p.z) <= a.z && p.y * p.y + p.x * p.x <= a.x * a.x;
    case Shape::tube_y:
      return std::fabs(p.y) <= a.y && p.z * p.z + p.x * p.x <= a.x * a.x;
    case Shape::torus_z: {
      const double r = std::sqrt(p.y * p.y + p.x * p.x) - a.y;
      return r * r + p.z * p.z <= a.x * a.x;
    }
    case Shape::cross_bars:
      return std::fabs(p.z) <= a.z &&
             ((std::fabs(p.y) <= a.x && std::fabs(p.x) <= a.y) ||
              (std::fabs(p.y) <= a.y && std::fabs(p.x) <= a.x));
    case Shape::shell: {
      const double r2 = p.z * p.z + p.y * p.y + p.x * p.x;
      return r2 <= a.y * a.y && r2 >= a.z * a.z;
    }
    case Shape::cone_z: {
      if (std::fabs(p.z) > a.z) return false;
      const double r = a.y * (a.z - p.z) / (2.0 * a.z);  // base at p.z = -a.z
      return p.y * p.y + p.x * p.x <= r * r;
    }
  }
  return false;
}

// Axial half-extent of the organ, for the z-tight crop window.
double z_extent(const Archetype& arch, double scale) {
  switch (arch.shape) {
    case Shape::tube_y:
    case Shape::torus_z:
      return arch.a.x * scale;
    case Shape::shell:
      return arch.a.y * scale;
    default:
      return arch.a.z * scale;
  }
}

double inplane_extent(const Archetype& arch, double scale) {
  switch (arch.shape) {
    case Shape::tube_z:
      return arch.a.x * scale;
    case Shape::tube_y:
      return std::max(arch.a.y, arch.a.x) * scale;
    case Shape::torus_z:
      return (arch.a.y + arch.a.x) * scale;
    case Shape::cross_bars:
      return arch.a.y * scale;
    case Shape::shell:
    case Shape::cone_z:
      return arch.a.y * scale;
    default:
      return std::max(arch.a.y, arch.a.x) * scale;
  }
}

// Fraction of a voxel inside the shape, 3x3x3 supersampling of the unit cube
// around the voxel center. Cubes whose center and corners agree are taken as
// uniform; every shape here is thicker than a voxel, so the shortcut cannot
// skip over a feature.
template <typename Inside>
double coverage(const Inside& inside, double z, double y, double x) {
  const bool c = inside(z, y, x);
  bool mixed = false;
  for (int i = 0; i < 8 && !mixed; ++i) {
    const double dz = (i & 1) ? 0.5 : -0.5;
    const double dy = (i & 2) ? 0.5 : -0.5;
    const double dx = (i & 4) ? 0.5 : -0.5;
    mixed = inside(z + dz, y + dy, x + dx) != c;
  }
  if (!mixed) return c ? 1.0 : 0.0;

  static constexpr double off[3] = {-1.0 / 3.0, 0.0, 1.0 / 3.0};
  int hits = 0;
  for (double dz : off)
    for (double dy : off)
      for (double dx : off)
        hits += inside(z + dz, y + dy, x + dx) ? 1 : 0;
  return hits / 27.0;
}

struct BoundaryBite {
  Vec3 center;
  double radius;
};

// Distinct but recognizable variants of the canonical name, so label
// standardization has real work to do.
std::string decorate_label(const std::string& name, int index, Rng& rng) {
  std::string base = name;
  switch (rng.uniform_int(3)) {
    case 0:
      for (auto& ch : base) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
      break;
    case 1:
      for (auto& ch : base) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
      break;
    default:
      break;
  }
  switch (rng.uniform_int(3)) {
    case 0:
      return base + " series " + std::to_string(index);
    case 1:
      return base + "_rev" + std::to_string(1 + rng.uniform_int(4));
    default:
      return "study " + std::to_string(100 + index) + " " + base;
  }
}

VolumeSample render_sample(const PhantomConfig& cfg, const Archetype& arch,
                           int sample_index, std::uint64_t sample_seed) {
  Rng rng(sample_seed);

  const double jy = rng.uniform(-cfg.jitter, cfg.jitter);
  const double jx = rng.uniform(-cfg.jitter, cfg.jitter);
  const double scale = 1.0 + rng.uniform(-cfg.size_jitter, cfg.size_jitter);

  const int H = cfg.grid_shape[1];
  const int W = cfg.grid_shape[2];
  // Centered on the voxel grid so mirrored organ placements reflect exactly.
  const Vec3 anatomy{(cfg.grid_shape[0] - 1) / 2.0, (H - 1) / 2.0 + jy,
                     (W - 1) / 2.0 + jx};
  const Vec3 organ{anatomy.z + arch.offset.z * scale,
                   anatomy.y + arch.offset.y * scale,
                   anatomy.x + arch.offset.x * scale};
  const Vec3 landmark{anatomy.z + kLandmarkOffset.z, anatomy.y + kLandmarkOffset.y,
                      anatomy.x + kLandmarkOffset.x};

  const double ez = z_extent(arch, scale);
  int z0 = static_cast<int>(std::floor(organ.z - ez)) - cfg.z_margin;
  int z1 = static_cast<int>(std::ceil(organ.z + ez)) + cfg.z_margin + 1;
  z0 = std::max(z0, 0);
  z1 = std::min(z1, cfg.grid_shape[0]);
  const int D = z1 - z0;

  const auto organ_inside = [&](double z, double y, double x) {
    return inside_organ(arch, scale, {z - organ.z, y - organ.y, x - organ.x});
  };
  const auto landmark_inside = [&](double z, double y, double x) {
    const double dz = z - landmark.z, dy = y - landmark.y, dx = x - landmark.x;
    return dz * dz + dy * dy + dx * dx <= kLandmarkRadius * kLandmarkRadius;
  };
  const auto body_inside = [&](double, double y, double x) {
    const double dy = (y - anatomy.y) / kBodySemi.y;
    const double dx = (x - anatomy.x) / kBodySemi.x;
    return dy * dy + dx * dx <= 1.0;
  };

  VolumeSample s;
  s.ct = GridF({D, H, W});
  s.mask = GridU8({D, H, W});
  s.spacing = cfg.spacing;
  s.true_label = arch.name;
  s.original_label = decorate_label(arch.name, sample_index, rng);

  GridF organ_cov({D, H, W});

  const double organ_ze = z_extent(arch, scale) + 1.0;
  const double organ_pe = inplane_extent(arch, scale) + 1.0;
  const double lm_reach = kLandmarkRadius + 1.0;

  for (int z = 0; z < D; ++z) {
    const double sz = z + z0;
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        double oc = 0.0;
        if (std::fabs(sz - organ.z) <= organ_ze &&
            std::fabs(y - organ.y) <= organ_pe && std::fabs(x - organ.x) <= organ_pe)
          oc = coverage(organ_inside, sz, y, x);
        organ_cov.at(z, y, x) = static_cast<float>(oc);

        double lc = 0.0;
        if (std::fabs(sz - landmark.z) <= lm_reach &&
            std::fabs(y - landmark.y) <= lm_reach && std::fabs(x - landmark.x) <= lm_reach)
          lc = coverage(landmark_inside, sz, y, x);

        const double bc = coverage(body_inside, sz, y, x);

        // Organ takes precedence over landmark over body.
        const double l = std::min(lc, 1.0 - oc);
        const double b = std::max(0.0, std::min(bc, 1.0 - oc - l));
        const double air = 1.0 - oc - l - b;
        s.ct.at(z, y, x) = static_cast<float>(
            air * kAirHu + oc * (kBodyHu + arch.hu) + l * kLandmarkHu + b * kBodyHu);
      }
    }
  }

  if (cfg.hu_noise > 0) {
    for (std::int64_t i = 0; i < s.ct.size(); ++i)
      s.ct[i] += static_cast<float>(rng.normal(0.0, cfg.hu_noise));
  }

  // Contour corruption: biased threshold shift, boundary bites, and an
  // occasional dropped interior slice.
  const double nu = cfg.delineation_noise;
  const double threshold = 0.5 + (nu > 0 ? nu * rng.uniform(-0.2, 0.3) : 0.0);

  std::vector<BoundaryBite> bites;
  if (nu > 0) {
    // Bites scale with the organ so severity 1 removes substantial chunks
    // from any archetype, not just the small ones.
    const double reach = std::max(z_extent(arch, scale), inplane_extent(arch, scale));
    const int nbites = 1 + static_cast<int>(std::floor(9.0 * nu * rng.uniform()));
    for (int i = 0; i < nbites; ++i) {
      // A point between mid-organ and the surface; interior holes are part
      // of severe contour corruption, not just nibbled boundaries.
      const double ang = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
      const double zr = rng.uniform(-1.0, 1.0);
      const double radial = rng.uniform(0.5, 1.05);
      bites.push_back({{organ.z + zr * z_extent(arch, scale),
                        organ.y + radial * std::sin(ang) * inplane_extent(arch, scale),
                        organ.x + radial * std::cos(ang) * inplane_extent(arch, scale)},
                       1.0 + (0.4 + 0.55 * rng.uniform()) * nu * reach});
    }
  }

  const auto build_mask = [&](double thr, bool with_bites) {
    std::int64_t fg = 0;
    for (int z = 0; z < D; ++z)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          bool on = organ_cov.at(z, y, x) >= thr;
          if (on && with_bites) {
            for (const auto& bite : bites) {
              const double dz = z + z0 - bite.center.z, dy = y - bite.center.y,
                           dx = x - bite.center.x;
              if (dz * dz + dy * dy + dx * dx <= bite.radius * bite.radius) {
                on = false;
                break;
              }
            }
          }
          s.mask.at(z, y, x) = on ? 1 : 0;
          fg += on;
        }
    return fg;
  };

  if (build_mask(threshold, true) == 0) build_mask(0.5, false);

  if (nu > 0 && rng.uniform() < std::min(0.8 * nu, 1.0)) {
    int first = -1, last = -1;
    std::vector<bool> nonempty(static_cast<std::size_t>(D), false);
    for (int z = 0; z < D; ++z) {
      for (int y = 0; y < H && !nonempty[static_cast<std::size_t>(z)]; ++y)
        for (int x = 0; x < W; ++x)
          if (s.mask.at(z, y, x)) {
            nonempty[static_cast<std::size_t>(z)] = true;
            break;
          }
      if (nonempty[static_cast<std::size_t>(z)]) {
        if (first < 0) first = z;
        last = z;
      }
    }
    if (last - first >= 2) {
      const int drop = first + 1 + rng.uniform_int(last - first - 1);
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) s.mask.at(drop, y, x) = 0;
    }
  }

  return s;
}

}  // namespace

void PhantomConfig::validate() const {
  if (classes.empty()) throw std::invalid_argument("phantom config has no classes");
  for (const auto& c : classes) {
    if (c.count <= 0)
      throw std::invalid_argument("phantom class '" + c.name + "' has nonpositive count");
    const auto& arch = archetype_by_name(c.name);
    const double grow = 1.0 + size_jitter;
    const double ze = z_extent(arch, grow) + std::fabs(arch.offset.z) + z_margin;
    const double ye = inplane_extent(arch, grow) + std::fabs(arch.offset.y) + jitter;
    const double xe = inplane_extent(arch, grow) + std::fabs(arch.offset.x) + jitter;
    if (2.0 * ze >= grid_shape[0] || ye >= grid_shape[1] / 2.0 || xe >= grid_shape[2] / 2.0)
      throw std::invalid_argument("phantom organ '" + c.name + "' does not fit grid " +
                                  std::to_string(grid_shape[0]) + "x" +
                                  std::to_string(grid_shape[1]) + "x" +
                                  std::to_string(grid_shape[2]));
  }
  if (!(spacing.z > 0 && spacing.y > 0 && spacing.x > 0))
    throw std::invalid_argument("phantom spacing must be positive");
  if (jitter < 0 || size_jitter < 0 || delineation_noise < 0 || hu_noise < 0 || z_margin < 1)
    throw std::invalid_argument("phantom noise parameters must be nonnegative (z_margin >= 1)");
}

const std::vector<std::string>& phantom_archetype_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> v;
    for (const auto& a : kArchetypes) v.emplace_back(a.name);
    return v;
  }();
  return names;
}

DatasetManifest generate_phantom_dataset(const PhantomConfig& config,
                                         std::uint64_t seed,
                                         const std::filesystem::path& out_dir,
                                         int workers) {
  config.validate();
  if (workers < 1) throw std::invalid_argument("workers must be >= 1");

  std::vector<std::string> names;
  for (const auto& c : config.classes) names.push_back(c.name);
  DatasetManifest manifest;
  manifest.vocabulary = LabelVocabulary(names);

  struct Job {
    const Archetype* arch;
    int class_index;
    int sample_index;
    std::uint64_t seed;
    std::string rel_path;
  };
  std::vector<Job> jobs;
  std::uint64_t stream = 0;
  for (int c = 0; c < static_cast<int>(config.classes.size()); ++c) {
    const auto& spec = config.classes[static_cast<std::size_t>(c)];
    const auto& arch = archetype_by_name(spec.name);
    for (int i = 0; i < spec.count; ++i, ++stream) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "_%04d", i);
      jobs.push_back({&arch, c, i, derive_seed(seed, stream),
                      "samples/" + spec.name + buf});
    }
  }

  std::filesystem::create_directories(out_dir / "samples");
  const auto run = [&](std::size_t begin, std::size_t end) {
    for (std::size_t j = begin; j < end; ++j) {
      const auto& job = jobs[j];
      VolumeSample s = render_sample(config, *job.arch, job.sample_index, job.seed);
      write_sample(s, out_dir / job.rel_path);
    }
  };

  if (workers == 1 || jobs.size() < 2) {
    run(0, jobs.size());
  } else {
    const std::size_t nthreads = std::min<std::size_t>(static_cast<std::size_t>(workers), jobs.size());
    std::vector<std::thread> threads;
    const std::size_t chunk = (jobs.size() + nthreads - 1) / nthreads;
    for (std::size_t t = 0; t < nthreads; ++t) {
      const std::size_t b = t * chunk;
      const std::size_t e = std::min(jobs.size(), b + chunk);
      if (b < e) threads.emplace_back(run, b, e);
    }
    for (auto& th : threads) th.join();
  }

  for (const auto& job : jobs)
    manifest.entries.push_back({job.rel_path, job.class_index, "train"});
  return manifest;
}

}  // namespace oarstd
