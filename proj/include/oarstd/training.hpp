#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "oarstd/asac.hpp"
#include "oarstd/checkpoint.hpp"
#include "oarstd/dataset.hpp"
#include "oarstd/network.hpp"

namespace oarstd {

struct TrainConfig {
  double lr0 = 1e-4;
  int batch_size = 16;
  int epochs = 20;
  std::vector<int> milestones{2, 5, 10};  // epochs after which lr drops
  double decay_factor = 10.0;
  std::uint64_t seed = 0;
  int val_every = 1;              // validate every k epochs; the last epoch always is
  std::vector<int> train_scales;  // crop scale subset for training draws (empty = all)
  std::vector<int> val_scales;    // voting scale subset at validation (empty = all)
  AugmentRanges augment;

  // Milestones must be strictly increasing inside (0, epochs).
  void validate() const;
};

// lr0 / decay^(number of milestones passed), counting a milestone m as passed
// from epoch m on. Pure; epochs are 0-based.
double lr_at_epoch(const TrainConfig& config, int epoch);

// First index whose cumulative weight exceeds u * total. u in [0, 1).
std::size_t weighted_draw(const std::vector<double>& cumulative, double u);

struct EpochStats {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  std::optional<double> val_loss;      // mean -log(voted[truth]) over the val split
  std::optional<double> val_macro_f1;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
  // Columns epoch,lr,train_loss,val_loss,val_macro_f1; blank when skipped.
  void write_csv(const std::filesystem::path& path) const;
};

struct TrainResult {
  ParameterSet<float> params;  // best validation macro-F1 checkpoint
  TrainHistory history;
  int best_epoch = -1;
  double best_val_macro_f1 = -1.0;  // -1 when validation never ran
};

// Adam with conventional defaults. Tensors rejected by the trainable
// predicate are skipped outright, leaving their bytes untouched.
class Adam {
 public:
  explicit Adam(const ParameterSet<float>& params, double beta1 = 0.9,
                double beta2 = 0.999, double epsilon = 1e-8);

  void step(ParameterSet<float>& params, const ParameterSet<float>& grads, double lr,
            const std::function<bool(const std::string&)>& trainable = {});

 private:
  double beta1_, beta2_, epsilon_;
  long long t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

// Full training: He-initialized backbone, balanced sampling with replacement
// (one random augmented crop per draw, train-entry-count draws per epoch),
// milestone lr schedule, best checkpoint by validation macro-F1. Samples must
// be preprocessed. Deterministic per seed in this single-worker build.
TrainResult train(const DatasetManifest& manifest, const std::filesystem::path& data_root,
                  const NetworkConfig& net_config, const TrainConfig& train_config);

struct FinetuneConfig {
  double lr = 1e-5;  // constant, no schedule
  int batch_size = 16;
  int epochs = 20;  // capped at 20
  std::uint64_t seed = 0;
  int val_every = 1;
  std::vector<int> train_scales;
  std::vector<int> val_scales;
  AugmentRanges augment;

  void validate() const;
};

// True for the tensors fine-tuning updates: the fourth residual stage and the
// classification head.
bool finetune_trainable(const std::string& name);

// Transfer to a new vocabulary: copies every non-head tensor from the base
// checkpoint, zero-initializes a head sized for the new classes, and trains
// only res4.* and head.* at a constant lr. All other tensors are bit-identical
// afterwards. An empty val split skips validation and keeps the final epoch.
TrainResult finetune(const Checkpoint& base, const DatasetManifest& new_manifest,
                     const std::filesystem::path& data_root, const FinetuneConfig& config);

}  // namespace oarstd
