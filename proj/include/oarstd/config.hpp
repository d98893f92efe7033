#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "oarstd/asac.hpp"
#include "oarstd/network.hpp"
#include "oarstd/phantom.hpp"
#include "oarstd/preprocess.hpp"
#include "oarstd/training.hpp"

namespace oarstd {

struct RunPaths {
  std::string data_dir;
  std::string checkpoint;
  std::string dictionary;
  std::string output_dir;
};

struct AsacSettings {
  std::vector<int> scales;  // crop scale subset; empty = all
  AugmentRanges augment;
};

struct PhantomSettings {
  PhantomConfig config;
  std::array<double, 3> split{0.7, 0.15, 0.15};  // train/val/test weights
};

// One configuration drives every subcommand; sections a command does not use
// are carried along untouched so a saved snapshot reproduces any run.
struct RunConfig {
  std::uint64_t seed = 0;
  int workers = 1;
  RunPaths paths;
  PreprocessConfig preprocess;
  AsacSettings asac;
  NetworkConfig network;
  TrainConfig train;
  FinetuneConfig finetune;
  double inference_threshold = 0.5;
  PhantomSettings phantom;

  // Checks everything except the phantom class list, which only gen-phantom
  // needs populated.
  void validate() const;
};

// Strict parse: any key the schema does not define is an error, as are type
// mismatches. Absent keys keep their defaults.
RunConfig load_run_config(const std::filesystem::path& path);

// Writes the fully resolved configuration; load_run_config(save(x)) == x.
void save_run_config(const RunConfig& config, const std::filesystem::path& path);

}  // namespace oarstd
