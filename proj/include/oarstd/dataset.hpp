#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "oarstd/tensor.hpp"

namespace oarstd {

// Ordered, duplicate-free set of canonical structure names. The index of a
// name is the class id used everywhere else.
class LabelVocabulary {
 public:
  LabelVocabulary() = default;
  explicit LabelVocabulary(std::vector<std::string> names);

  // The 28 head-and-neck structures the default pipeline is configured for.
  static const LabelVocabulary& head_and_neck();

  int size() const { return static_cast<int>(names_.size()); }
  const std::string& name(int index) const;
  std::optional<int> index_of(std::string_view name) const;
  const std::vector<std::string>& names() const { return names_; }
  bool operator==(const LabelVocabulary& o) const { return names_ == o.names_; }

 private:
  std::vector<std::string> names_;
  std::map<std::string, int, std::less<>> index_;
};

// One (CT, binary mask) pair on a shared voxel grid, ordered (z, y, x).
struct VolumeSample {
  GridF ct;
  GridU8 mask;
  Spacing spacing;
  std::string original_label;
  std::optional<std::string> true_label;
  bool hu_normalized = false;

  void validate() const;
};

struct ManifestEntry {
  std::string path;  // sample directory, relative to the manifest location
  int class_index = -1;
  std::string split;  // "train", "val" or "test"
};

struct DatasetManifest {
  LabelVocabulary vocabulary;
  std::vector<ManifestEntry> entries;

  void validate() const;
  std::vector<std::size_t> split_indices(std::string_view split) const;
  // Entry count per class restricted to one split ("" for all entries).
  std::vector<int> class_counts(std::string_view split) const;
};

// Sample directory layout: meta.json + ct.f32 + mask.u8 (little-endian,
// C-order). Round trips are bit exact.
void write_sample(const VolumeSample& sample, const std::filesystem::path& dir);
VolumeSample read_sample(const std::filesystem::path& dir);

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& file);
DatasetManifest read_manifest(const std::filesystem::path& file);

// Stratified split with largest-remainder apportionment per class. Entries
// are shuffled per class by seed, then retagged in place. Classes with fewer
// than 3 samples go entirely to train; a warning line is returned for each.
std::vector<std::string> split_manifest(DatasetManifest& manifest, double w_train,
                                        double w_val, double w_test,
                                        std::uint64_t seed);

// Inverse-frequency weights over one split, aligned with split_indices().
// Every vocabulary class that appears in the manifest must have at least one
// entry in the split.
std::vector<double> balanced_sampling_weights(const DatasetManifest& manifest,
                                              std::string_view split);

}  // namespace oarstd
