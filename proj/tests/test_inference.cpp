#include "doctest.h"

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "oarstd/inference.hpp"
#include "oarstd/rng.hpp"

using namespace oarstd;

namespace {

StandardizationDictionary small_dict() {
  StandardizationDictionary dict;
  dict.canonical = {"Brainstem", "Larynx", "Parotid_L"};
  dict.aliases = {{"BS", "Brainstem"}, {"Left Parotid", "Parotid_L"}};
  return dict;
}

VolumeSample blob_sample(int depth, const std::string& label) {
  VolumeSample s;
  s.ct = GridF({depth, 40, 40});
  for (std::int64_t i = 0; i < s.ct.size(); ++i)
    s.ct[i] = 0.25f + 0.5f * static_cast<float>(i % 7) / 7.0f;
  s.mask = GridU8({depth, 40, 40});
  for (int z = depth / 3; z < 2 * depth / 3 + 1; ++z)
    for (int y = 15; y < 25; ++y)
      for (int x = 15; x < 25; ++x) s.mask.at(z, y, x) = 1;
  s.spacing = {3.0, 1.0, 1.0};
  s.original_label = label;
  s.hu_normalized = true;
  return s;
}

}  // namespace

TEST_CASE("dictionary validation and file round trip") {
  StandardizationDictionary dict = small_dict();
  CHECK_NOTHROW(dict.validate());

  StandardizationDictionary broken = dict;
  broken.aliases["GTV"] = "NotThere";
  CHECK_THROWS_AS(broken.validate(), std::invalid_argument);

  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "oarstd_dict_test";
  fs::create_directories(dir);
  save_dictionary(dir / "dict.json", dict);
  StandardizationDictionary loaded = load_dictionary(dir / "dict.json");
  CHECK(loaded.canonical == dict.canonical);
  CHECK(loaded.aliases == dict.aliases);

  std::ofstream(dir / "bad_key.json") << R"({"canonical": ["A"], "extra": 1})";
  CHECK_THROWS_AS(load_dictionary(dir / "bad_key.json"), std::runtime_error);
  std::ofstream(dir / "no_canon.json") << R"({"aliases": {}})";
  CHECK_THROWS_AS(load_dictionary(dir / "no_canon.json"), std::runtime_error);
  std::ofstream(dir / "bad_alias.json") << R"({"canonical": ["A"], "aliases": {"x": "B"}})";
  CHECK_THROWS_AS(load_dictionary(dir / "bad_alias.json"), std::invalid_argument);
  CHECK_THROWS_AS(load_dictionary(dir / "missing.json"), std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("early match is exact up to trim and case") {
  const StandardizationDictionary dict = small_dict();
  CHECK(early_match("Brainstem", dict) == std::string("Brainstem"));
  CHECK(early_match("  brainstem ", dict) == std::string("Brainstem"));
  CHECK(early_match("LARYNX", dict) == std::string("Larynx"));
  CHECK(early_match("bs", dict) == std::string("Brainstem"));
  CHECK(early_match(" left parotid ", dict) == std::string("Parotid_L"));
  CHECK_FALSE(early_match("PAROTIDE D", dict).has_value());
  CHECK_FALSE(early_match("Brainstem1", dict).has_value());
  CHECK_FALSE(early_match("Brain stem", dict).has_value());
  CHECK_FALSE(early_match("", dict).has_value());
  CHECK_FALSE(early_match("   ", dict).has_value());

  // anything returned is always a canonical name
  for (const char* probe : {"bs", "larynx", "LEFT PAROTID", "Parotid_L"}) {
    auto hit = early_match(probe, dict);
    REQUIRE(hit.has_value());
    CHECK(dict.canonical.count(*hit) == 1);
  }
}

TEST_CASE("voting is an exact mean, invariant to order and duplication") {
  // hand-built fixture: 3 crops at (0.6, 0.4), 6 at (0.45, 0.55); both class
  // means are exactly 0.5, so the tie breaks to the lower index
  std::vector<std::vector<double>> rows;
  for (int i = 0; i < 3; ++i) rows.push_back({0.6, 0.4});
  for (int i = 0; i < 6; ++i) rows.push_back({0.45, 0.55});
  std::vector<double> voted = vote(rows);
  REQUIRE(voted.size() == 2);
  CHECK(voted[0] == 0.5);
  CHECK(voted[1] == 0.5);
  CHECK(argmax_lowest_index(voted) == 0);
  for (std::size_t c = 0; c < 2; ++c) {
    long double acc = 0;
    for (const auto& r : rows) acc += r[c];
    const double oracle = static_cast<double>(acc / 9.0L);
    CHECK(voted[c] == doctest::Approx(oracle).epsilon(1e-15));
  }

  // a minority of strongly confident crops loses to a consistent majority
  std::vector<std::vector<double>> skewed;
  for (int i = 0; i < 3; ++i) skewed.push_back({0.6, 0.4});
  for (int i = 0; i < 6; ++i) skewed.push_back({0.44, 0.56});
  const std::vector<double> lean = vote(skewed);
  CHECK(lean[1] > lean[0]);
  CHECK(argmax_lowest_index(lean) == 1);
  CHECK(lean[0] == doctest::Approx((3 * 0.6 + 6 * 0.44) / 9).epsilon(1e-15));
  CHECK(lean[1] == doctest::Approx((3 * 0.4 + 6 * 0.56) / 9).epsilon(1e-15));

  // single crop: the mean is that crop, bit for bit
  std::vector<std::vector<double>> one = {{0.123456, 0.7, 0.176544}};
  std::vector<double> single = vote(one);
  for (std::size_t c = 0; c < 3; ++c) CHECK(single[c] == one[0][c]);

  Rng rng(311);
  for (int trial = 0; trial < 20; ++trial) {
    const int crops = 2 + static_cast<int>(rng.uniform_int(12));
    std::vector<std::vector<double>> scores(static_cast<std::size_t>(crops),
                                            std::vector<double>(5));
    for (auto& row : scores) {
      double total = 0;
      for (double& v : row) {
        v = rng.uniform();
        total += v;
      }
      for (double& v : row) v /= total;
    }
    const std::vector<double> base = vote(scores);

    std::vector<std::vector<double>> shuffled = scores;
    for (std::size_t i = shuffled.size(); i > 1; --i)
      std::swap(shuffled[i - 1], shuffled[rng.uniform_int(i)]);
    const std::vector<double> permuted = vote(shuffled);

    std::vector<std::vector<double>> doubled = scores;
    doubled.insert(doubled.end(), scores.begin(), scores.end());
    const std::vector<double> twice = vote(doubled);

    CHECK(std::memcmp(base.data(), permuted.data(), base.size() * sizeof(double)) == 0);
    CHECK(std::memcmp(base.data(), twice.data(), base.size() * sizeof(double)) == 0);
  }

  CHECK_THROWS_AS(vote({}), std::invalid_argument);
  CHECK_THROWS_AS(vote({{0.5, 0.5}, {1.0}}), std::invalid_argument);
  CHECK(argmax_lowest_index({0.5, 0.5}) == 0);
  CHECK(argmax_lowest_index({0.2, 0.7, 0.7}) == 1);
  CHECK_THROWS_AS(argmax_lowest_index({}), std::invalid_argument);
}

TEST_CASE("predict_sample runs the crop ladder and votes") {
  NetworkConfig config = NetworkConfig::toy(5);
  ParameterSet<float> params = Backbone<float>(config).init_parameters(77);

  // depth 20 at scale 0 (n = 12, step 8) yields starts {0, 8}
  VolumeSample sample = blob_sample(20, "mystery");
  Prediction pred = predict_sample(sample, config, params, {0});
  CHECK(pred.source == "classifier");
  REQUIRE(pred.per_crop_scores.size() == 2);
  CHECK(pred.per_crop_scores[0].first.z_start == 0);
  CHECK(pred.per_crop_scores[1].first.z_start == 8);
  for (const auto& [spec, probs] : pred.per_crop_scores) {
    REQUIRE(probs.size() == 5);
    double total = 0;
    for (double p : probs) {
      CHECK(p >= 0.0);
      total += p;
    }
    CHECK(std::fabs(total - 1.0) < 1e-6);
  }
  std::vector<std::vector<double>> rows;
  for (const auto& [spec, probs] : pred.per_crop_scores) rows.push_back(probs);
  const std::vector<double> recomputed = vote(rows);
  for (std::size_t c = 0; c < recomputed.size(); ++c) CHECK(pred.voted[c] == recomputed[c]);
  CHECK(pred.class_index == argmax_lowest_index(pred.voted));

  // deterministic end to end
  Prediction again = predict_sample(sample, config, params, {0});
  CHECK(std::memcmp(pred.voted.data(), again.voted.data(),
                    pred.voted.size() * sizeof(double)) == 0);

  // a single crop votes as itself
  VolumeSample shallow = blob_sample(12, "mystery");
  Prediction solo = predict_sample(shallow, config, params, {0});
  REQUIRE(solo.per_crop_scores.size() == 1);
  for (std::size_t c = 0; c < solo.voted.size(); ++c)
    CHECK(solo.voted[c] == solo.per_crop_scores[0].second[c]);

  VolumeSample raw = blob_sample(12, "raw");
  raw.hu_normalized = false;
  CHECK_THROWS_AS(predict_sample(raw, config, params, {0}), std::invalid_argument);
  CHECK_THROWS_AS(predict_sample(sample, config, params, {9}), std::invalid_argument);
}

TEST_CASE("standardization short-circuits, thresholds, and survives errors") {
  LabelVocabulary vocab({"OpticNerve_L", "OpticNerve_R", "Chiasm"});
  StandardizationDictionary dict;
  dict.canonical = {"Alpha", "Beta"};

  std::vector<VolumeSample> samples;
  for (const char* label : {"Alpha", " beta ", "mystery_confident", "mystery_vague", "boom"}) {
    VolumeSample s;
    s.original_label = label;
    samples.push_back(std::move(s));
  }

  int calls = 0;
  SamplePredictor predictor = [&calls](const VolumeSample& s) {
    ++calls;
    if (s.original_label == "boom") throw std::runtime_error("corrupt volume");
    Prediction p;
    p.source = "classifier";
    p.voted = s.original_label == "mystery_confident" ? std::vector<double>{0.02, 0.95, 0.03}
                                                      : std::vector<double>{0.4, 0.3, 0.3};
    p.class_index = argmax_lowest_index(p.voted);
    return p;
  };

  StandardizationReport report = standardize_structure_set(samples, dict, vocab, predictor, 0.5);
  CHECK(calls == 3);
  CHECK(report.classifier_invocations == 3);
  REQUIRE(report.rows.size() == samples.size());

  CHECK(report.rows[0].source == "early_match");
  CHECK(report.rows[0].assigned_label == "Alpha");
  CHECK(report.rows[0].confidence == 1.0);
  CHECK(report.rows[0].voted.empty());
  CHECK(report.rows[1].assigned_label == "Beta");

  CHECK(report.rows[2].source == "classifier");
  CHECK(report.rows[2].assigned_label == "OpticNerve_R");
  CHECK(report.rows[2].confidence == doctest::Approx(0.95));

  CHECK(report.rows[3].assigned_label == kUnrecognizedLabel);
  CHECK(report.rows[3].confidence == doctest::Approx(0.4));

  CHECK(report.rows[4].source == "error");
  CHECK(report.rows[4].assigned_label.empty());
  CHECK(report.rows[4].error == "corrupt volume");

  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "oarstd_report_test";
  fs::create_directories(dir);
  report.rows[2].original_label = "nerve, optic";  // force CSV quoting
  report.write_csv(dir / "report.csv");
  report.write_scores_json(dir / "scores.json", vocab);

  std::ifstream in(dir / "report.csv");
  std::string line;
  std::getline(in, line);
  CHECK(line == "original_label,assigned_label,source,confidence");
  int count = 0;
  bool quoted = false;
  while (std::getline(in, line)) {
    ++count;
    if (line.rfind("\"nerve, optic\",", 0) == 0) quoted = true;
  }
  CHECK(count == 5);
  CHECK(quoted);

  std::ifstream jin(dir / "scores.json");
  std::string all((std::istreambuf_iterator<char>(jin)), std::istreambuf_iterator<char>());
  CHECK(all.find("\"OpticNerve_R\"") != std::string::npos);
  CHECK(all.find("corrupt volume") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("thirty-eight structures with seventeen dictionary misses") {
  StandardizationDictionary dict;
  std::vector<VolumeSample> samples;
  for (int i = 0; i < 21; ++i) {
    const std::string name = "Canonical_" + std::to_string(i);
    dict.canonical.insert(name);
    VolumeSample s;
    s.original_label = name;
    samples.push_back(std::move(s));
  }
  for (int i = 0; i < 17; ++i) {
    VolumeSample s;
    s.original_label = "odd name " + std::to_string(i);
    samples.push_back(std::move(s));
  }
  REQUIRE(samples.size() == 38);

  LabelVocabulary vocab({"A", "B"});
  int calls = 0;
  SamplePredictor predictor = [&calls](const VolumeSample&) {
    ++calls;
    Prediction p;
    p.voted = {0.9, 0.1};
    p.class_index = 0;
    return p;
  };
  StandardizationReport report = standardize_structure_set(samples, dict, vocab, predictor, 0.5);
  CHECK(calls == 17);
  CHECK(report.classifier_invocations == 17);
  CHECK(report.rows.size() == 38);
  for (int i = 0; i < 21; ++i) CHECK(report.rows[static_cast<std::size_t>(i)].source == "early_match");
  for (int i = 21; i < 38; ++i) CHECK(report.rows[static_cast<std::size_t>(i)].source == "classifier");
}
