#include "doctest.h"

#include <array>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "oarstd/evaluation.hpp"
#include "oarstd/inference.hpp"
#include "oarstd/phantom.hpp"
#include "oarstd/preprocess.hpp"
#include "oarstd/rng.hpp"
#include "oarstd/training.hpp"

using namespace oarstd;
namespace fs = std::filesystem;

namespace {

// Generates, preprocesses and splits a phantom dataset under dir.
DatasetManifest phantom_set(const fs::path& dir, const std::vector<PhantomClassSpec>& classes,
                            std::array<int, 3> grid, std::uint64_t seed, double w_train,
                            double w_val, double w_test) {
  PhantomConfig config;
  config.classes = classes;
  config.grid_shape = grid;
  DatasetManifest manifest = generate_phantom_dataset(config, seed, dir);
  PreprocessConfig pp;
  for (const auto& entry : manifest.entries) {
    VolumeSample s = read_sample(dir / entry.path);
    write_sample(preprocess_sample(s, pp), dir / entry.path);
  }
  split_manifest(manifest, w_train, w_val, w_test, seed + 99);
  return manifest;
}

bool same_bytes(const ParameterSet<float>& a, const ParameterSet<float>& b) {
  if (a.count() != b.count()) return false;
  for (std::size_t i = 0; i < a.count(); ++i) {
    const auto& [an, at] = a.item(i);
    const auto& [bn, bt] = b.item(i);
    if (an != bn || !at.same_shape(bt)) return false;
    if (std::memcmp(at.data(), bt.data(), static_cast<std::size_t>(at.size()) * sizeof(float)))
      return false;
  }
  return true;
}

// Geometry statistics of a preprocessed sample: organ centroid relative to
// the bright landmark, size and extent. Drives the learnability oracle.
std::vector<double> mask_stats(const VolumeSample& s) {
  const int D = s.mask.dim(0), H = s.mask.dim(1), W = s.mask.dim(2);
  double n = 0, cz = 0, cy = 0, cx = 0, ct_sum = 0;
  double bn = 0, bz = 0, by = 0, bx = 0;
  int z0 = D, z1 = -1, y0 = H, y1 = -1, x0 = W, x1 = -1;
  for (int z = 0; z < D; ++z)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        if (s.mask.at(z, y, x)) {
          n += 1;
          cz += z;
          cy += y;
          cx += x;
          ct_sum += s.ct.at(z, y, x);
          z0 = std::min(z0, z); z1 = std::max(z1, z);
          y0 = std::min(y0, y); y1 = std::max(y1, y);
          x0 = std::min(x0, x); x1 = std::max(x1, x);
        }
        if (s.ct.at(z, y, x) > 0.42f) {
          bn += 1;
          bz += z;
          by += y;
          bx += x;
        }
      }
  REQUIRE(n > 0);
  // Large organs can swallow the landmark entirely; fall back to the organ's
  // own centroid for them, the shape features still separate such classes.
  const double rz = bn > 0 ? bz / bn : cz / n;
  const double ry = bn > 0 ? by / bn : cy / n;
  const double rx = bn > 0 ? bx / bn : cx / n;
  return {cz / n - rz,  cy / n - ry,     cx / n - rx,
          std::cbrt(n), double(z1 - z0), double(y1 - y0),
          double(x1 - x0), ct_sum / n};
}

// Nearest-centroid accuracy on the train split with standardized features.
double centroid_oracle_accuracy(const DatasetManifest& manifest, const fs::path& root) {
  std::vector<std::vector<double>> feats;
  std::vector<int> labels;
  for (std::size_t i : manifest.split_indices("train")) {
    feats.push_back(mask_stats(read_sample(root / manifest.entries[i].path)));
    labels.push_back(manifest.entries[i].class_index);
  }
  const std::size_t dim = feats.front().size();
  std::vector<double> mean(dim, 0), sd(dim, 0);
  for (const auto& f : feats)
    for (std::size_t d = 0; d < dim; ++d) mean[d] += f[d] / double(feats.size());
  for (const auto& f : feats)
    for (std::size_t d = 0; d < dim; ++d) sd[d] += (f[d] - mean[d]) * (f[d] - mean[d]);
  for (std::size_t d = 0; d < dim; ++d) sd[d] = std::max(std::sqrt(sd[d] / feats.size()), 1e-9);

  const int k = manifest.vocabulary.size();
  std::vector<std::vector<double>> centroid(k, std::vector<double>(dim, 0));
  std::vector<int> counts(k, 0);
  for (std::size_t i = 0; i < feats.size(); ++i) {
    ++counts[labels[i]];
    for (std::size_t d = 0; d < dim; ++d)
      centroid[labels[i]][d] += (feats[i][d] - mean[d]) / sd[d];
  }
  for (int c = 0; c < k; ++c)
    for (std::size_t d = 0; d < dim; ++d) centroid[c][d] /= std::max(counts[c], 1);

  int correct = 0;
  for (std::size_t i = 0; i < feats.size(); ++i) {
    int best = 0;
    double best_dist = 1e300;
    for (int c = 0; c < k; ++c) {
      double dist = 0;
      for (std::size_t d = 0; d < dim; ++d) {
        const double delta = (feats[i][d] - mean[d]) / sd[d] - centroid[c][d];
        dist += delta * delta;
      }
      if (dist < best_dist) {
        best_dist = dist;
        best = c;
      }
    }
    if (best == labels[i]) ++correct;
  }
  return double(correct) / double(feats.size());
}

double voting_accuracy(const DatasetManifest& manifest, const fs::path& root,
                       const NetworkConfig& config, const ParameterSet<float>& params,
                       std::string_view split, const std::vector<int>& scales) {
  int correct = 0, total = 0;
  for (std::size_t i : manifest.split_indices(split)) {
    const VolumeSample s = read_sample(root / manifest.entries[i].path);
    const Prediction pred = predict_sample(s, config, params, scales);
    correct += pred.class_index == manifest.entries[i].class_index;
    ++total;
  }
  REQUIRE(total > 0);
  return double(correct) / double(total);
}

}  // namespace

TEST_CASE("learning rate schedule drops tenfold at each milestone") {
  TrainConfig config;  // lr0 1e-4, milestones {2, 5, 10}
  CHECK(lr_at_epoch(config, 0) == doctest::Approx(1e-4));
  CHECK(lr_at_epoch(config, 1) == doctest::Approx(1e-4));
  CHECK(lr_at_epoch(config, 2) == doctest::Approx(1e-5));
  CHECK(lr_at_epoch(config, 3) == doctest::Approx(1e-5));
  CHECK(lr_at_epoch(config, 6) == doctest::Approx(1e-6));
  CHECK(lr_at_epoch(config, 11) == doctest::Approx(1e-7));
  CHECK(lr_at_epoch(config, 19) == doctest::Approx(1e-7));

  CHECK_NOTHROW(config.validate());
  TrainConfig bad = config;
  bad.milestones = {2, 2, 10};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = config;
  bad.milestones = {2, 5, 25};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = config;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = config;
  bad.train_scales = {7};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = config;
  bad.epochs = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  FinetuneConfig ft;
  CHECK_NOTHROW(ft.validate());
  ft.epochs = 21;
  CHECK_THROWS_AS(ft.validate(), std::invalid_argument);
}

TEST_CASE("balanced draws hit every class uniformly") {
  CHECK(weighted_draw({1.0, 2.0, 3.0}, 0.0) == 0);
  CHECK(weighted_draw({1.0, 2.0, 3.0}, 0.32) == 0);
  CHECK(weighted_draw({1.0, 2.0, 3.0}, 0.34) == 1);
  CHECK(weighted_draw({1.0, 2.0, 3.0}, 0.99) == 2);
  CHECK(weighted_draw({1.0, 2.0, 3.0}, 0.999999999) == 2);
  CHECK_THROWS_AS(weighted_draw({}, 0.5), std::invalid_argument);

  DatasetManifest manifest;
  manifest.vocabulary = LabelVocabulary({"a", "b", "c"});
  auto push = [&](int cls, int count) {
    for (int i = 0; i < count; ++i)
      manifest.entries.push_back({"s" + std::to_string(manifest.entries.size()), cls, "train"});
  };
  push(0, 50);
  push(1, 10);
  push(2, 40);

  const std::vector<double> weights = balanced_sampling_weights(manifest, "train");
  const std::vector<std::size_t> train_idx = manifest.split_indices("train");
  std::vector<double> cumulative(weights.size());
  double total = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    total += weights[i];
    cumulative[i] = total;
  }

  Rng rng(1234);
  const int draws = 10000;
  std::array<int, 3> counts{0, 0, 0};
  for (int i = 0; i < draws; ++i) {
    const std::size_t slot = weighted_draw(cumulative, rng.uniform());
    ++counts[static_cast<std::size_t>(
        manifest.entries[train_idx[slot]].class_index)];
  }
  const double expected = draws / 3.0;
  const double three_sigma = 3 * std::sqrt(draws * (1.0 / 3) * (2.0 / 3));
  for (int c = 0; c < 3; ++c) CHECK(std::fabs(counts[static_cast<std::size_t>(c)] - expected) <= three_sigma);
}

TEST_CASE("adam descends and honors the trainable predicate") {
  const NetworkConfig config = NetworkConfig::toy(3);
  Backbone<float> net(config);
  ParameterSet<float> params = net.init_parameters(11);

  Tensor<float> input({2, 2, 12, 32, 32});
  Rng rng(42);
  for (std::int64_t i = 0; i < input.size(); ++i)
    input[i] = static_cast<float>(rng.uniform());
  const std::vector<int> labels{0, 2};

  Adam opt(params);
  double first = 0, last = 0;
  for (int step = 0; step < 5; ++step) {
    typename Backbone<float>::Cache cache;
    const Tensor<float> features = net.forward(input, params, &cache);
    const Tensor<float> logits = net.classify(features, params);
    const SoftmaxLossResult<float> loss = softmax_cross_entropy(logits, labels);
    if (step == 0) first = loss.loss;
    last = loss.loss;
    ParameterSet<float> grads = params.zeros_like();
    Tensor<float> gfeatures;
    net.classify_backward(features, loss.glogits, params, grads, gfeatures);
    net.backward(gfeatures, cache, params, grads);
    opt.step(params, grads, 1e-3);
  }
  CHECK(last < first);

  // frozen tensors keep their exact bytes
  ParameterSet<float> before = params;
  ParameterSet<float> fake_grads = params.zeros_like();
  for (std::size_t i = 0; i < fake_grads.count(); ++i) fake_grads.item(i).second.fill(1.0f);
  Adam frozen_opt(params);
  frozen_opt.step(params, fake_grads, 1e-3, finetune_trainable);
  for (std::size_t i = 0; i < params.count(); ++i) {
    const auto& [name, tensor] = params.item(i);
    const Tensor<float>& orig = before.get(name);
    const bool identical =
        std::memcmp(tensor.data(), orig.data(),
                    static_cast<std::size_t>(tensor.size()) * sizeof(float)) == 0;
    CHECK(identical == !finetune_trainable(name));
  }

  CHECK(finetune_trainable("res4.b0.conv1.weight"));
  CHECK(finetune_trainable("head.bias"));
  CHECK_FALSE(finetune_trainable("res3.b0.nl.wf"));
  CHECK_FALSE(finetune_trainable("feature.weight"));
  CHECK_FALSE(finetune_trainable("stem.weight"));
}

TEST_CASE("history csv leaves skipped validation fields blank") {
  TrainHistory history;
  EpochStats e0;
  e0.epoch = 0;
  e0.lr = 1e-4;
  e0.train_loss = 2.5;
  history.epochs.push_back(e0);
  EpochStats e1 = e0;
  e1.epoch = 1;
  e1.val_loss = 1.5;
  e1.val_macro_f1 = 0.25;
  history.epochs.push_back(e1);

  const fs::path dir = fs::temp_directory_path() / "oarstd_history_test";
  fs::create_directories(dir);
  history.write_csv(dir / "history.csv");
  std::ifstream in(dir / "history.csv");
  std::string header, row0, row1;
  std::getline(in, header);
  std::getline(in, row0);
  std::getline(in, row1);
  CHECK(header == "epoch,lr,train_loss,val_loss,val_macro_f1");
  CHECK(row0 == "0,0.0001,2.5,,");
  CHECK(row1 == "1,0.0001,2.5,1.5,0.25");
  fs::remove_all(dir);
}

TEST_CASE("training is deterministic and rejects bad inputs") {
  const fs::path dir = fs::temp_directory_path() / "oarstd_train_det";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const DatasetManifest manifest = phantom_set(
      dir, {{"EllipsoidLarge", 8}, {"TubeAxial", 8}, {"OvalL", 8}}, {40, 72, 72}, 21, 0.7,
      0.15, 0.15);

  const NetworkConfig net_config = NetworkConfig::toy(3);
  TrainConfig tc;
  tc.epochs = 2;
  tc.milestones = {1};
  tc.batch_size = 8;
  tc.seed = 5;
  tc.train_scales = {0};
  tc.val_scales = {0};

  const TrainResult a = train(manifest, dir, net_config, tc);
  const TrainResult b = train(manifest, dir, net_config, tc);
  CHECK(same_bytes(a.params, b.params));
  REQUIRE(a.history.epochs.size() == 2);
  REQUIRE(b.history.epochs.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(a.history.epochs[i].train_loss == b.history.epochs[i].train_loss);
    CHECK(a.history.epochs[i].lr == lr_at_epoch(tc, static_cast<int>(i)));
    REQUIRE(a.history.epochs[i].val_macro_f1.has_value());
    CHECK(*a.history.epochs[i].val_macro_f1 == *b.history.epochs[i].val_macro_f1);
  }
  CHECK(a.best_epoch == b.best_epoch);
  CHECK(a.best_epoch >= 0);

  // a different seed must change the outcome
  TrainConfig other = tc;
  other.seed = 6;
  const TrainResult c = train(manifest, dir, net_config, other);
  CHECK_FALSE(same_bytes(a.params, c.params));

  // empty val split is an error for full training
  DatasetManifest no_val = manifest;
  for (auto& entry : no_val.entries)
    if (entry.split == "val") entry.split = "test";
  CHECK_THROWS_AS(train(no_val, dir, net_config, tc), std::invalid_argument);

  // vocabulary size must match the network head
  CHECK_THROWS_AS(train(manifest, dir, NetworkConfig::toy(5), tc), std::invalid_argument);

  // raw (never preprocessed) samples are rejected at first use
  const fs::path raw_dir = fs::temp_directory_path() / "oarstd_train_raw";
  fs::remove_all(raw_dir);
  fs::create_directories(raw_dir);
  PhantomConfig raw_config;
  raw_config.classes = {{"EllipsoidLarge", 3}, {"TubeAxial", 3}};
  raw_config.grid_shape = {40, 72, 72};
  DatasetManifest raw = generate_phantom_dataset(raw_config, 31, raw_dir);
  for (std::size_t i = 0; i < raw.entries.size(); ++i)
    raw.entries[i].split = i % 3 == 2 ? "val" : "train";
  CHECK_THROWS_AS(train(raw, raw_dir, NetworkConfig::toy(2), tc), std::invalid_argument);

  fs::remove_all(dir);
  fs::remove_all(raw_dir);
}

TEST_CASE("finetuning trains res4 and a fresh head, freezing the rest") {
  const fs::path dir = fs::temp_directory_path() / "oarstd_ft_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const DatasetManifest manifest = phantom_set(dir, {{"RingAxial", 6}, {"CrossBars", 6}},
                                               {40, 72, 72}, 77, 0.8, 0.0, 0.2);

  Checkpoint base;
  base.config = NetworkConfig::toy(3);
  base.vocabulary = LabelVocabulary({"EllipsoidLarge", "TubeAxial", "OvalL"});
  base.params = Backbone<float>(base.config).init_parameters(5);

  FinetuneConfig fc;
  fc.epochs = 2;
  fc.batch_size = 4;
  fc.seed = 9;
  fc.train_scales = {0};
  fc.val_scales = {0};

  const TrainResult result = finetune(base, manifest, dir, fc);

  NetworkConfig new_config = base.config;
  new_config.num_classes = 2;
  const ParameterSet<float> layout = Backbone<float>(new_config).zero_parameters();
  REQUIRE(result.params.count() == layout.count());

  bool res4_changed = false, head_changed = false;
  for (std::size_t i = 0; i < result.params.count(); ++i) {
    const auto& [name, tensor] = result.params.item(i);
    if (finetune_trainable(name)) {
      if (name.rfind("head.", 0) == 0) {
        // the head was zero-initialized for the new classes
        CHECK(tensor.dim(0) == (name == "head.weight" ? 2 : tensor.dim(0)));
        for (std::int64_t k = 0; k < tensor.size(); ++k)
          if (tensor[k] != 0.0f) head_changed = true;
      } else {
        const Tensor<float>& orig = base.params.get(name);
        if (std::memcmp(tensor.data(), orig.data(),
                        static_cast<std::size_t>(tensor.size()) * sizeof(float)))
          res4_changed = true;
      }
    } else {
      const Tensor<float>& orig = base.params.get(name);
      REQUIRE(orig.same_shape(tensor));
      const bool frozen_identical =
          std::memcmp(tensor.data(), orig.data(),
                      static_cast<std::size_t>(tensor.size()) * sizeof(float)) == 0;
      CHECK(frozen_identical);
    }
  }
  CHECK(res4_changed);
  CHECK(head_changed);

  // constant fine-tuning learning rate, no validation rows without a val split
  REQUIRE(result.history.epochs.size() == 2);
  for (const EpochStats& e : result.history.epochs) {
    CHECK(e.lr == 1e-5);
    CHECK_FALSE(e.val_loss.has_value());
    CHECK_FALSE(e.val_macro_f1.has_value());
  }
  CHECK(result.best_epoch == 1);
  CHECK(result.best_val_macro_f1 == -1.0);

  fs::remove_all(dir);
}

TEST_CASE("training learns a six class phantom task") {
  const fs::path dir = fs::temp_directory_path() / "oarstd_train_learn";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::vector<PhantomClassSpec> classes;
  for (const std::string& name :
       {"EllipsoidLarge", "TubeAxial", "OvalL", "OvalR", "SlabFlat", "TubeCoronal"})
    classes.push_back({name, 50});
  const DatasetManifest manifest =
      phantom_set(dir, classes, {44, 80, 80}, 2024, 0.8, 0.1, 0.1);
  for (int c = 0; c < 6; ++c) CHECK(manifest.class_counts("train")[static_cast<std::size_t>(c)] >= 40);

  // the task itself is learnable: plain mask statistics separate the classes
  CHECK(centroid_oracle_accuracy(manifest, dir) >= 0.8);

  const NetworkConfig net_config = NetworkConfig::toy(6);
  TrainConfig tc;
  tc.lr0 = 1e-3;           // small net, small data: a warm rate converges in few epochs
  tc.batch_size = 8;
  tc.epochs = 16;
  tc.milestones = {12};
  tc.seed = 3;
  tc.val_every = 2;        // best-checkpoint selection needs regular validation
  tc.train_scales = {0};   // train and evaluate on the same cube scale
  tc.val_scales = {0};
  tc.augment.scale_lo = 0.7;  // zoom-out draws cover the uncropped voting view

  const TrainResult result = train(manifest, dir, net_config, tc);
  REQUIRE(result.history.epochs.size() == 16);
  CHECK(result.history.epochs.back().train_loss < result.history.epochs.front().train_loss);
  CHECK(result.best_epoch >= 0);
  CHECK(result.best_val_macro_f1 > 0.5);

  const double train_acc = voting_accuracy(manifest, dir, net_config, result.params, "train", {0});
  CHECK(train_acc >= 0.8);
  const double val_acc = voting_accuracy(manifest, dir, net_config, result.params, "val", {0});
  CHECK(val_acc >= 0.8);

  fs::remove_all(dir);
}
