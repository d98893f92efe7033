#include "oarstd/inference.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "oarstd/numerics.hpp"

namespace oarstd {

using nlohmann::json;

namespace {

std::string fold(std::string_view s) {
  std::size_t first = 0, last = s.size();
  while (first < last && std::isspace(static_cast<unsigned char>(s[first]))) ++first;
  while (last > first && std::isspace(static_cast<unsigned char>(s[last - 1]))) --last;
  std::string out;
  out.reserve(last - first);
  for (std::size_t i = first; i < last; ++i)
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(s[i]))));
  return out;
}

std::string csv_field(const std::string& s) {
  const bool needs_quotes = s.find_first_of(",\"\n\r") != std::string::npos ||
                            (!s.empty() && (s.front() == ' ' || s.back() == ' '));
  if (!needs_quotes) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += '"';
  return out;
}

std::vector<double> softmax_double(const float* logits, int k) {
  double mx = logits[0];
  for (int i = 1; i < k; ++i) mx = std::max(mx, static_cast<double>(logits[i]));
  std::vector<double> probs(static_cast<std::size_t>(k));
  double denom = 0;
  for (int i = 0; i < k; ++i) {
    probs[static_cast<std::size_t>(i)] = std::exp(static_cast<double>(logits[i]) - mx);
    denom += probs[static_cast<std::size_t>(i)];
  }
  for (double& p : probs) p /= denom;
  return probs;
}

}  // namespace

void StandardizationDictionary::validate() const {
  for (const auto& [alias, target] : aliases)
    if (!canonical.count(target))
      throw std::invalid_argument("alias '" + alias + "' targets unknown canonical name '" +
                                  target + "'");
}

StandardizationDictionary load_dictionary(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dictionary: " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error("invalid dictionary JSON in " + path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw std::runtime_error("dictionary root must be an object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (key != "canonical" && key != "aliases")
      throw std::runtime_error("unknown dictionary key: " + key);
  }
  StandardizationDictionary dict;
  if (!j.contains("canonical") || !j["canonical"].is_array())
    throw std::runtime_error("dictionary requires a 'canonical' array");
  for (const auto& name : j["canonical"]) {
    if (!name.is_string()) throw std::runtime_error("canonical entries must be strings");
    dict.canonical.insert(name.get<std::string>());
  }
  if (j.contains("aliases")) {
    if (!j["aliases"].is_object()) throw std::runtime_error("'aliases' must be an object");
    for (const auto& [alias, target] : j["aliases"].items()) {
      if (!target.is_string()) throw std::runtime_error("alias targets must be strings");
      dict.aliases.emplace(alias, target.get<std::string>());
    }
  }
  dict.validate();
  return dict;
}

void save_dictionary(const std::filesystem::path& path, const StandardizationDictionary& dict) {
  dict.validate();
  json j;
  j["canonical"] = json::array();
  for (const auto& name : dict.canonical) j["canonical"].push_back(name);
  j["aliases"] = json::object();
  for (const auto& [alias, target] : dict.aliases) j["aliases"][alias] = target;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write dictionary: " + path.string());
  out << j.dump(2) << '\n';
}

std::optional<std::string> early_match(std::string_view original_label,
                                       const StandardizationDictionary& dict) {
  const std::string key = fold(original_label);
  if (key.empty()) return std::nullopt;
  for (const auto& name : dict.canonical)
    if (fold(name) == key) return name;
  for (const auto& [alias, target] : dict.aliases)
    if (fold(alias) == key) return target;
  return std::nullopt;
}

std::vector<double> vote(const std::vector<std::vector<double>>& per_crop_scores) {
  if (per_crop_scores.empty()) throw std::invalid_argument("vote: no crop scores");
  const std::size_t k = per_crop_scores.front().size();
  for (const auto& s : per_crop_scores)
    if (s.size() != k) throw std::invalid_argument("vote: inconsistent score lengths");
  std::vector<double> voted(k);
  for (std::size_t c = 0; c < k; ++c) {
    ExactSum sum;
    for (const auto& s : per_crop_scores) sum.add(s[c]);
    voted[c] = sum.value() / static_cast<double>(per_crop_scores.size());
  }
  return voted;
}

int argmax_lowest_index(const std::vector<double>& scores) {
  if (scores.empty()) throw std::invalid_argument("argmax of empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[best]) best = i;
  return static_cast<int>(best);
}

Prediction predict_sample(const VolumeSample& sample, const NetworkConfig& config,
                          const ParameterSet<float>& params,
                          const std::vector<int>& scale_subset) {
  if (!sample.hu_normalized)
    throw std::invalid_argument("predict_sample requires a preprocessed sample");

  const auto& table = crop_scale_table();
  int largest_m = 0;
  if (scale_subset.empty()) {
    largest_m = table.back().m;
  } else {
    for (int idx : scale_subset) {
      if (idx < 0 || idx >= static_cast<int>(table.size()))
        throw std::invalid_argument("scale index out of range");
      largest_m = std::max(largest_m, table[static_cast<std::size_t>(idx)].m);
    }
  }

  VolumeSample working = sample;
  adaptive_preresize(working, largest_m);
  const std::vector<CropCubeSpec> specs = enumerate_crops(working, scale_subset);
  if (specs.empty()) throw std::logic_error("crop enumeration produced no cubes");

  Backbone<float> net(config);
  const int k = config.num_classes;

  Prediction pred;
  pred.source = "classifier";
  pred.per_crop_scores.reserve(specs.size());
  std::vector<std::vector<double>> score_rows;
  score_rows.reserve(specs.size());
  for (const CropCubeSpec& spec : specs) {
    ModelInput input = extract_and_resize(working, spec);
    Tensor<float> batched({1, kModelInputShape[0], kModelInputShape[1], kModelInputShape[2],
                           kModelInputShape[3]});
    std::copy(input.data.data(), input.data.data() + input.data.size(), batched.data());
    const Tensor<float> features = net.forward(batched, params);
    const Tensor<float> logits = net.classify(features, params);
    std::vector<double> probs = softmax_double(logits.data(), k);
    score_rows.push_back(probs);
    pred.per_crop_scores.emplace_back(spec, std::move(probs));
  }
  pred.voted = vote(score_rows);
  pred.class_index = argmax_lowest_index(pred.voted);
  return pred;
}

Prediction predict_sample(const VolumeSample& sample, const Checkpoint& checkpoint,
                          const std::vector<int>& scale_subset) {
  return predict_sample(sample, checkpoint.config, checkpoint.params, scale_subset);
}

std::vector<double> sample_feature_vector(const VolumeSample& sample,
                                          const NetworkConfig& config,
                                          const ParameterSet<float>& params,
                                          const std::vector<int>& scale_subset) {
  if (!sample.hu_normalized)
    throw std::invalid_argument("sample_feature_vector requires a preprocessed sample");

  const auto& table = crop_scale_table();
  int largest_m = 0;
  if (scale_subset.empty()) {
    largest_m = table.back().m;
  } else {
    for (int idx : scale_subset) {
      if (idx < 0 || idx >= static_cast<int>(table.size()))
        throw std::invalid_argument("scale index out of range");
      largest_m = std::max(largest_m, table[static_cast<std::size_t>(idx)].m);
    }
  }

  VolumeSample working = sample;
  adaptive_preresize(working, largest_m);
  const std::vector<CropCubeSpec> specs = enumerate_crops(working, scale_subset);
  if (specs.empty()) throw std::logic_error("crop enumeration produced no cubes");

  Backbone<float> net(config);
  std::vector<ExactSum> sums(static_cast<std::size_t>(config.feature_dim));
  for (const CropCubeSpec& spec : specs) {
    ModelInput input = extract_and_resize(working, spec);
    Tensor<float> batched({1, kModelInputShape[0], kModelInputShape[1], kModelInputShape[2],
                           kModelInputShape[3]});
    std::copy(input.data.data(), input.data.data() + input.data.size(), batched.data());
    const Tensor<float> features = net.forward(batched, params);
    for (int d = 0; d < config.feature_dim; ++d)
      sums[static_cast<std::size_t>(d)].add(static_cast<double>(features.data()[d]));
  }
  std::vector<double> mean(static_cast<std::size_t>(config.feature_dim));
  for (std::size_t d = 0; d < mean.size(); ++d)
    mean[d] = sums[d].value() / static_cast<double>(specs.size());
  return mean;
}

StandardizationReport standardize_structure_set(const std::vector<VolumeSample>& samples,
                                                const StandardizationDictionary& dict,
                                                const LabelVocabulary& vocab,
                                                const SamplePredictor& predictor,
                                                double threshold) {
  dict.validate();
  StandardizationReport report;
  report.rows.reserve(samples.size());
  for (const VolumeSample& sample : samples) {
    StandardizationRow row;
    row.original_label = sample.original_label;
    if (auto hit = early_match(sample.original_label, dict)) {
      row.assigned_label = *hit;
      row.source = "early_match";
      row.confidence = 1.0;
      report.rows.push_back(std::move(row));
      continue;
    }
    ++report.classifier_invocations;
    try {
      Prediction pred = predictor(sample);
      if (pred.class_index < 0 || pred.class_index >= vocab.size())
        throw std::runtime_error("predicted class outside the vocabulary");
      row.source = "classifier";
      row.confidence = pred.voted[static_cast<std::size_t>(pred.class_index)];
      row.voted = std::move(pred.voted);
      row.assigned_label =
          row.confidence < threshold ? kUnrecognizedLabel : vocab.name(pred.class_index);
    } catch (const std::exception& e) {
      row.source = "error";
      row.assigned_label.clear();
      row.confidence = 0.0;
      row.voted.clear();
      row.error = e.what();
    }
    report.rows.push_back(std::move(row));
  }
  return report;
}

StandardizationReport standardize_structure_set(const std::vector<VolumeSample>& samples,
                                                const StandardizationDictionary& dict,
                                                const Checkpoint& checkpoint, double threshold,
                                                const std::vector<int>& scale_subset) {
  SamplePredictor predictor = [&](const VolumeSample& sample) {
    return predict_sample(sample, checkpoint.config, checkpoint.params, scale_subset);
  };
  return standardize_structure_set(samples, dict, checkpoint.vocabulary, predictor, threshold);
}

void StandardizationReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write report: " + path.string());
  out << "original_label,assigned_label,source,confidence\n";
  char buf[32];
  for (const StandardizationRow& row : rows) {
    std::snprintf(buf, sizeof(buf), "%.6f", row.confidence);
    out << csv_field(row.original_label) << ',' << csv_field(row.assigned_label) << ','
        << row.source << ',' << buf << '\n';
  }
}

void StandardizationReport::write_scores_json(const std::filesystem::path& path,
                                              const LabelVocabulary& vocab) const {
  json j = json::array();
  for (const StandardizationRow& row : rows) {
    json r;
    r["original_label"] = row.original_label;
    r["assigned_label"] = row.assigned_label;
    r["source"] = row.source;
    r["confidence"] = row.confidence;
    if (!row.error.empty()) r["error"] = row.error;
    if (!row.voted.empty()) {
      json scores = json::object();
      for (std::size_t c = 0; c < row.voted.size(); ++c)
        scores[vocab.name(static_cast<int>(c))] = row.voted[c];
      r["scores"] = scores;
    }
    j.push_back(std::move(r));
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write scores: " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace oarstd
