#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "oarstd/dataset.hpp"
#include "oarstd/tensor.hpp"

namespace oarstd {

// Classification metrics from one-vs-rest reductions. Zero-denominator rates
// are reported as 0 with the matching *_undefined flag set.
struct ClassMetrics {
  long long tp = 0, fp = 0, fn = 0;
  double tpr = 0, ppv = 0, f1 = 0;
  bool tpr_undefined = false, ppv_undefined = false, f1_undefined = false;
  std::optional<double> auc;  // absent without scores or without both outcomes
};

struct MetricsReport {
  std::vector<ClassMetrics> per_class;
  std::vector<std::vector<long long>> confusion;  // [true][predicted]
  double accuracy = 0;
  double macro_tpr = 0, macro_ppv = 0, macro_f1 = 0;
  std::optional<double> macro_auc;  // mean over classes where AUC is defined

  void write_csv(const std::filesystem::path& path, const LabelVocabulary& vocab) const;
  void write_json(const std::filesystem::path& path, const LabelVocabulary& vocab) const;
};

// `scores` may be empty (no AUC) or hold one num_classes-sized probability
// vector per sample.
MetricsReport classification_metrics(const std::vector<int>& truths,
                                     const std::vector<int>& predictions,
                                     const std::vector<std::vector<double>>& scores,
                                     int num_classes);

// Rank-based AUC with average ranks on ties; requires at least one positive
// and one negative label.
double auc_one_vs_rest(const std::vector<int>& binary_labels,
                       const std::vector<double>& scores);

// Dice similarity 2|X∩Y|/(|X|+|Y|); both masks empty counts as 1.
double dsc(const GridU8& x, const GridU8& y);

struct AtlasEntry {
  std::string label;
  GridU8 mask;
};

// Warp of a moving mask onto the fixed mask's grid.
using MaskTransform = std::function<GridU8(const GridU8& moving, const GridU8& fixed)>;

// Default transform: the moving mask pasted center-aligned onto the fixed grid.
GridU8 center_align_transform(const GridU8& moving, const GridU8& fixed);

struct AtlasResult {
  std::string label;
  std::vector<double> scores;  // one DSC per atlas entry, input order
  bool zero_overlap = false;   // best score was 0, label fell back to the first entry
};

// Names the fixed mask after the atlas entry with the largest DSC
// (lowest-index tie-break).
AtlasResult atlas_relabel(const GridU8& fixed_mask, const std::vector<AtlasEntry>& atlas,
                          const MaskTransform& transform = {});

struct AnovaResult {
  double mean_difference = 0;  // mean(a) - mean(b)
  double f = 0;
  double p = 1;
};

// Two-group one-way ANOVA; p from the F(1, n_a+n_b-2) survival function.
// Zero within-group variance: p = 1 when the means agree, 0 otherwise.
AnovaResult one_way_anova(const std::vector<double>& a, const std::vector<double>& b);

// Mean-centered projection onto the top-2 principal directions. Sign
// convention: each direction's largest-magnitude component is positive.
std::vector<std::array<double, 2>> project_features_2d(
    const std::vector<std::vector<double>>& features);

}  // namespace oarstd
