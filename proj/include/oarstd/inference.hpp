#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "oarstd/asac.hpp"
#include "oarstd/checkpoint.hpp"
#include "oarstd/dataset.hpp"
#include "oarstd/network.hpp"

namespace oarstd {

// Label standardization: exact dictionary lookup first, multi-crop voting
// classification for everything the dictionary misses.

struct StandardizationDictionary {
  std::set<std::string> canonical;
  std::map<std::string, std::string> aliases;  // alias -> canonical name

  // Every alias target must be a canonical name.
  void validate() const;
};

// JSON file format: {"canonical": [...], "aliases": {...}} (aliases optional).
StandardizationDictionary load_dictionary(const std::filesystem::path& path);
void save_dictionary(const std::filesystem::path& path,
                     const StandardizationDictionary& dict);

// Trimmed, ASCII-case-insensitive full-string match against canonical names
// (checked first) and aliases. Returns the canonical name as stored, or
// nothing. No fuzzy matching.
std::optional<std::string> early_match(std::string_view original_label,
                                       const StandardizationDictionary& dict);

struct Prediction {
  std::vector<std::pair<CropCubeSpec, std::vector<double>>> per_crop_scores;
  std::vector<double> voted;  // uniform mean of the per-crop vectors
  int class_index = -1;       // argmax of voted, lowest index on ties
  std::string source;         // "early_match" or "classifier"
};

// Uniform mean of per-crop probability vectors, exactly summed so the result
// is bitwise independent of crop order and of duplicating the whole set.
std::vector<double> vote(const std::vector<std::vector<double>>& per_crop_scores);

int argmax_lowest_index(const std::vector<double>& scores);

// Full pipeline for one preprocessed sample: adaptive preresize, crop
// enumeration over the scale subset (empty = all scales), per-crop forward
// pass and softmax, then voting.
Prediction predict_sample(const VolumeSample& sample, const NetworkConfig& config,
                          const ParameterSet<float>& params,
                          const std::vector<int>& scale_subset = {});
Prediction predict_sample(const VolumeSample& sample, const Checkpoint& checkpoint,
                          const std::vector<int>& scale_subset = {});

// Pooled feature vector (pre-head, feature_dim wide) averaged over the same
// crops predict_sample votes on; input to the 2-d projection plots.
std::vector<double> sample_feature_vector(const VolumeSample& sample,
                                          const NetworkConfig& config,
                                          const ParameterSet<float>& params,
                                          const std::vector<int>& scale_subset = {});

inline constexpr const char* kUnrecognizedLabel = "unrecognized";

struct StandardizationRow {
  std::string original_label;
  std::string assigned_label;  // canonical/vocabulary name, "unrecognized", or empty on error
  std::string source;          // "early_match", "classifier", or "error"
  double confidence = 0.0;     // 1.0 for dictionary hits, max voted probability otherwise
  std::string error;           // failure description when source == "error"
  std::vector<double> voted;   // present only for classifier rows
};

struct StandardizationReport {
  std::vector<StandardizationRow> rows;  // one per input structure, input order
  int classifier_invocations = 0;

  void write_csv(const std::filesystem::path& path) const;
  void write_scores_json(const std::filesystem::path& path,
                         const LabelVocabulary& vocab) const;
};

using SamplePredictor = std::function<Prediction(const VolumeSample&)>;

// Standardizes a structure set. The predictor runs only for structures the
// dictionary misses; predictions whose best voted probability falls below
// the threshold are reported as unrecognized. Per-structure failures are
// recorded in their rows and never abort the batch.
StandardizationReport standardize_structure_set(const std::vector<VolumeSample>& samples,
                                                const StandardizationDictionary& dict,
                                                const LabelVocabulary& vocab,
                                                const SamplePredictor& predictor,
                                                double threshold = 0.5);
StandardizationReport standardize_structure_set(const std::vector<VolumeSample>& samples,
                                                const StandardizationDictionary& dict,
                                                const Checkpoint& checkpoint,
                                                double threshold = 0.5,
                                                const std::vector<int>& scale_subset = {});

}  // namespace oarstd
