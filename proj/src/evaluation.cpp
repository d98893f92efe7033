#include "oarstd/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "json.hpp"
#include "oarstd/numerics.hpp"

namespace oarstd {

using nlohmann::json;

MetricsReport classification_metrics(const std::vector<int>& truths,
                                     const std::vector<int>& predictions,
                                     const std::vector<std::vector<double>>& scores,
                                     int num_classes) {
  if (truths.empty()) throw std::invalid_argument("classification_metrics: empty input");
  if (truths.size() != predictions.size())
    throw std::invalid_argument("classification_metrics: size mismatch");
  if (!scores.empty() && scores.size() != truths.size())
    throw std::invalid_argument("classification_metrics: score count mismatch");
  if (num_classes < 1) throw std::invalid_argument("classification_metrics: bad class count");

  MetricsReport report;
  report.confusion.assign(num_classes, std::vector<long long>(num_classes, 0));
  for (std::size_t i = 0; i < truths.size(); ++i) {
    const int t = truths[i], p = predictions[i];
    if (t < 0 || t >= num_classes || p < 0 || p >= num_classes)
      throw std::invalid_argument("classification_metrics: label out of range");
    ++report.confusion[t][p];
  }

  report.per_class.resize(num_classes);
  long long correct = 0;
  double auc_sum = 0;
  int auc_defined = 0;
  for (int c = 0; c < num_classes; ++c) {
    ClassMetrics& m = report.per_class[c];
    m.tp = report.confusion[c][c];
    correct += m.tp;
    for (int o = 0; o < num_classes; ++o) {
      if (o == c) continue;
      m.fn += report.confusion[c][o];
      m.fp += report.confusion[o][c];
    }
    if (m.tp + m.fn > 0) m.tpr = static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn);
    else m.tpr_undefined = true;
    if (m.tp + m.fp > 0) m.ppv = static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp);
    else m.ppv_undefined = true;
    if (m.ppv + m.tpr > 0) m.f1 = 2 * m.ppv * m.tpr / (m.ppv + m.tpr);
    else m.f1_undefined = true;

    if (!scores.empty()) {
      std::vector<int> binary(truths.size());
      std::vector<double> class_scores(truths.size());
      bool has_pos = false, has_neg = false;
      for (std::size_t i = 0; i < truths.size(); ++i) {
        binary[i] = truths[i] == c ? 1 : 0;
        (binary[i] ? has_pos : has_neg) = true;
        if (static_cast<int>(scores[i].size()) != num_classes)
          throw std::invalid_argument("classification_metrics: score vector size mismatch");
        class_scores[i] = scores[i][static_cast<std::size_t>(c)];
      }
      if (has_pos && has_neg) {
        m.auc = auc_one_vs_rest(binary, class_scores);
        auc_sum += *m.auc;
        ++auc_defined;
      }
    }

    report.macro_tpr += m.tpr;
    report.macro_ppv += m.ppv;
    report.macro_f1 += m.f1;
  }
  report.accuracy = static_cast<double>(correct) / static_cast<double>(truths.size());
  report.macro_tpr /= num_classes;
  report.macro_ppv /= num_classes;
  report.macro_f1 /= num_classes;
  if (auc_defined > 0) report.macro_auc = auc_sum / auc_defined;
  return report;
}

double auc_one_vs_rest(const std::vector<int>& binary_labels,
                       const std::vector<double>& scores) {
  if (binary_labels.size() != scores.size())
    throw std::invalid_argument("auc: size mismatch");
  const std::size_t n = scores.size();
  long long positives = 0;
  for (int b : binary_labels) positives += b ? 1 : 0;
  const long long negatives = static_cast<long long>(n) - positives;
  if (positives == 0 || negatives == 0)
    throw std::invalid_argument("auc: needs at least one positive and one negative");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Ascending 1-based ranks, tied scores sharing the average rank.
  double positive_rank_sum = 0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k)
      if (binary_labels[order[k]]) positive_rank_sum += avg_rank;
    i = j + 1;
  }
  const double m = static_cast<double>(positives);
  return (positive_rank_sum - m * (m + 1) / 2.0) /
         (m * static_cast<double>(negatives));
}

double dsc(const GridU8& x, const GridU8& y) {
  if (!x.same_shape(y)) throw std::invalid_argument("dsc: shape mismatch");
  std::int64_t nx = 0, ny = 0, both = 0;
  for (std::int64_t i = 0; i < x.size(); ++i) {
    const bool a = x[i] != 0, b = y[i] != 0;
    nx += a;
    ny += b;
    both += a && b;
  }
  if (nx + ny == 0) return 1.0;  // two absent structures agree perfectly
  return 2.0 * static_cast<double>(both) / static_cast<double>(nx + ny);
}

GridU8 center_align_transform(const GridU8& moving, const GridU8& fixed) {
  if (moving.rank() != 3 || fixed.rank() != 3)
    throw std::invalid_argument("center_align_transform expects rank-3 masks");
  if (moving.same_shape(fixed)) return moving;
  GridU8 out(fixed.shape());
  int off[3], lo[3], hi[3];
  for (int a = 0; a < 3; ++a) {
    off[a] = (fixed.dim(a) - moving.dim(a)) / 2;  // may be negative
    lo[a] = std::max(0, off[a]);
    hi[a] = std::min(fixed.dim(a), off[a] + moving.dim(a));
  }
  for (int z = lo[0]; z < hi[0]; ++z)
    for (int y = lo[1]; y < hi[1]; ++y)
      for (int x = lo[2]; x < hi[2]; ++x)
        out.at(z, y, x) = moving.at(z - off[0], y - off[1], x - off[2]);
  return out;
}

AtlasResult atlas_relabel(const GridU8& fixed_mask, const std::vector<AtlasEntry>& atlas,
                          const MaskTransform& transform) {
  if (atlas.empty()) throw std::invalid_argument("atlas_relabel: empty atlas");
  const MaskTransform& warp = transform ? transform : center_align_transform;
  AtlasResult result;
  result.scores.reserve(atlas.size());
  std::size_t best = 0;
  for (std::size_t i = 0; i < atlas.size(); ++i) {
    GridU8 warped = warp(atlas[i].mask, fixed_mask);
    const double score = dsc(warped, fixed_mask);
    result.scores.push_back(score);
    if (score > result.scores[best]) best = i;
  }
  result.label = atlas[best].label;
  result.zero_overlap = result.scores[best] == 0.0;
  return result;
}

AnovaResult one_way_anova(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() < 2 || b.size() < 2)
    throw std::invalid_argument("one_way_anova: each group needs at least 2 values");
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  const double mean_a = std::accumulate(a.begin(), a.end(), 0.0) / na;
  const double mean_b = std::accumulate(b.begin(), b.end(), 0.0) / nb;
  const double grand = (mean_a * na + mean_b * nb) / (na + nb);

  double ssw = 0;
  for (double v : a) ssw += (v - mean_a) * (v - mean_a);
  for (double v : b) ssw += (v - mean_b) * (v - mean_b);
  const double ssb =
      na * (mean_a - grand) * (mean_a - grand) + nb * (mean_b - grand) * (mean_b - grand);
  const double df_within = na + nb - 2;

  AnovaResult r;
  r.mean_difference = mean_a - mean_b;
  if (ssw == 0.0) {
    // Degenerate zero-variance groups: identical means agree perfectly,
    // differing means are a certain effect.
    if (mean_a == mean_b) {
      r.f = 0;
      r.p = 1.0;
    } else {
      r.f = std::numeric_limits<double>::infinity();
      r.p = 0.0;
    }
    return r;
  }
  r.f = ssb / (ssw / df_within);
  r.p = f_survival(r.f, 1.0, df_within);
  return r;
}

std::vector<std::array<double, 2>> project_features_2d(
    const std::vector<std::vector<double>>& features) {
  const std::size_t n = features.size();
  if (n < 2) throw std::invalid_argument("project_features_2d: need at least 2 vectors");
  const std::size_t d = features[0].size();
  if (d == 0) throw std::invalid_argument("project_features_2d: empty vectors");
  for (const auto& f : features)
    if (f.size() != d) throw std::invalid_argument("project_features_2d: ragged input");

  std::vector<double> mean(d, 0.0);
  for (const auto& f : features)
    for (std::size_t k = 0; k < d; ++k) mean[k] += f[k];
  for (double& m : mean) m /= static_cast<double>(n);

  std::vector<std::vector<double>> centered(n, std::vector<double>(d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) centered[i][k] = features[i][k] - mean[k];

  std::vector<double> cov(d * d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t r = 0; r < d; ++r) {
      const double vr = centered[i][r];
      if (vr == 0.0) continue;
      for (std::size_t c = 0; c < d; ++c) cov[r * d + c] += vr * centered[i][c];
    }
  for (double& v : cov) v /= static_cast<double>(n - 1);

  auto top_eigenvector = [&](std::vector<double>& matrix) {
    // Deterministic start biased toward the dominant diagonal entry.
    std::vector<double> v(d, 1.0 / std::sqrt(static_cast<double>(d)));
    std::size_t lead = 0;
    for (std::size_t k = 1; k < d; ++k)
      if (matrix[k * d + k] > matrix[lead * d + lead]) lead = k;
    v[lead] += 1.0;
    double norm = 0;
    for (double x : v) norm += x * x;
    for (double& x : v) x /= std::sqrt(norm);

    std::vector<double> w(d);
    double lambda = 0;
    for (int iter = 0; iter < 20000; ++iter) {
      for (std::size_t r = 0; r < d; ++r) {
        double acc = 0;
        for (std::size_t c = 0; c < d; ++c) acc += matrix[r * d + c] * v[c];
        w[r] = acc;
      }
      double wn = 0;
      for (double x : w) wn += x * x;
      wn = std::sqrt(wn);
      if (wn < 1e-300) {  // direction annihilated: no variance left
        std::fill(v.begin(), v.end(), 0.0);
        return std::pair(v, 0.0);
      }
      double drift = 0;
      for (std::size_t k = 0; k < d; ++k) {
        w[k] /= wn;
        drift = std::max(drift, std::fabs(std::fabs(w[k]) - std::fabs(v[k])));
      }
      v = w;
      lambda = wn;
      if (drift < 1e-14 && iter > 2) break;
    }
    // Sign convention: largest-magnitude component positive.
    std::size_t big = 0;
    for (std::size_t k = 1; k < d; ++k)
      if (std::fabs(v[k]) > std::fabs(v[big])) big = k;
    if (v[big] < 0)
      for (double& x : v) x = -x;
    return std::pair(v, lambda);
  };

  double trace = 0;
  for (std::size_t k = 0; k < d; ++k) trace += cov[k * d + k];
  // Eigenvalues below the noise floor of the total variance mean the
  // direction carries no real signal; report it as annihilated.
  const double floor = trace * 1e-12;

  auto [v1, l1] = top_eigenvector(cov);
  if (l1 <= floor) std::fill(v1.begin(), v1.end(), 0.0);
  // Deflate and repeat for the second direction.
  std::vector<double> deflated = cov;
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < d; ++c) deflated[r * d + c] -= l1 * v1[r] * v1[c];
  auto [v2, l2] = top_eigenvector(deflated);
  if (l2 <= floor) std::fill(v2.begin(), v2.end(), 0.0);

  std::vector<std::array<double, 2>> coords(n);
  for (std::size_t i = 0; i < n; ++i) {
    double x = 0, y = 0;
    for (std::size_t k = 0; k < d; ++k) {
      x += centered[i][k] * v1[k];
      y += centered[i][k] * v2[k];
    }
    coords[i] = {x, y};
  }
  return coords;
}

void MetricsReport::write_csv(const std::filesystem::path& path,
                              const LabelVocabulary& vocab) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out << "class_index,class_name,tp,fp,fn,tpr,ppv,f1,auc\n";
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    const ClassMetrics& m = per_class[c];
    out << c << ',' << vocab.name(static_cast<int>(c)) << ',' << m.tp << ','
        << m.fp << ',' << m.fn << ',' << m.tpr << ',' << m.ppv << ',' << m.f1
        << ',';
    if (m.auc) out << *m.auc;
    out << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

void MetricsReport::write_json(const std::filesystem::path& path,
                               const LabelVocabulary& vocab) const {
  json per = json::array();
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    const ClassMetrics& m = per_class[c];
    json entry{{"class_index", c},
               {"class_name", vocab.name(static_cast<int>(c))},
               {"tp", m.tp},
               {"fp", m.fp},
               {"fn", m.fn},
               {"tpr", m.tpr},
               {"ppv", m.ppv},
               {"f1", m.f1},
               {"tpr_undefined", m.tpr_undefined},
               {"ppv_undefined", m.ppv_undefined},
               {"f1_undefined", m.f1_undefined}};
    entry["auc"] = m.auc ? json(*m.auc) : json(nullptr);
    per.push_back(entry);
  }
  json j{{"accuracy", accuracy},
         {"macro_tpr", macro_tpr},
         {"macro_ppv", macro_ppv},
         {"macro_f1", macro_f1},
         {"macro_auc", macro_auc ? json(*macro_auc) : json(nullptr)},
         {"confusion", confusion},
         {"per_class", per}};
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace oarstd
