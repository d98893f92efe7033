#pragma once

#include <filesystem>

#include "oarstd/dataset.hpp"
#include "oarstd/network.hpp"

namespace oarstd {

// Model snapshot: architecture, class vocabulary and all weights in one file.
// Binary layout: 8-byte magic, little-endian u32 format version, u64 JSON
// header length, the header (config + vocabulary + tensor manifest), then the
// raw float32 payloads in manifest order. Weights round-trip bit-exactly.
struct Checkpoint {
  NetworkConfig config;
  LabelVocabulary vocabulary;
  ParameterSet<float> params;
};

void save_checkpoint(const std::filesystem::path& path, const NetworkConfig& config,
                     const LabelVocabulary& vocabulary,
                     const ParameterSet<float>& params);

Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace oarstd
