#include "oarstd/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <stdexcept>

#include "json.hpp"
#include "oarstd/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "sample files are little-endian");

namespace oarstd {

using nlohmann::json;

namespace {

constexpr int kSampleFormatVersion = 1;
constexpr int kManifestFormatVersion = 1;

const std::set<std::string, std::less<>>& valid_splits() {
  static const std::set<std::string, std::less<>> s{"train", "val", "test"};
  return s;
}

template <typename T>
void write_raw(const std::filesystem::path& file, const T* data, std::size_t n) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + file.string());
  out.write(reinterpret_cast<const char*>(data),
            static_cast<std::streamsize>(n * sizeof(T)));
  if (!out) throw std::runtime_error("write failed: " + file.string());
}

template <typename T>
void read_raw(const std::filesystem::path& file, T* data, std::size_t n) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + file.string());
  in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(T)));
  if (in.gcount() != static_cast<std::streamsize>(n * sizeof(T)))
    throw std::runtime_error("short read: " + file.string());
  char extra;
  if (in.read(&extra, 1))
    throw std::runtime_error("trailing bytes: " + file.string());
}

json load_json(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot open: " + file.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw std::runtime_error(file.string() + ": " + e.what());
  }
  return j;
}

void store_json(const json& j, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + file.string());
  out << j.dump(2) << "\n";
}

}  // namespace

LabelVocabulary::LabelVocabulary(std::vector<std::string> names)
    : names_(std::move(names)) {
  if (names_.empty()) throw std::invalid_argument("vocabulary is empty");
  for (int i = 0; i < static_cast<int>(names_.size()); ++i) {
    const auto& n = names_[static_cast<std::size_t>(i)];
    if (n.empty()) throw std::invalid_argument("vocabulary contains an empty name");
    if (!index_.emplace(n, i).second)
      throw std::invalid_argument("duplicate vocabulary name: " + n);
  }
}

const LabelVocabulary& LabelVocabulary::head_and_neck() {
  static const LabelVocabulary v{{
      "Lens_L",          "Lens_R",          "Eye_L",
      "Eye_R",           "GlnD_Lacrimal_L", "GlnD_Lacrimal_R",
      "Parotid_L",       "Parotid_R",       "GlnD_Submand_L",
      "GlnD_Submand_R",  "Cavity_Oral",     "Lips",
      "Bone_Mandible",   "Cochlea_L",       "Cochlea_R",
      "Musc_Constrict",  "Larynx",          "Esophagus",
      "BrachialPlex_L",  "BrachialPlex_R",  "Thyroid",
      "Brain",           "Brainstem",       "Pituitary",
      "OpticChiasm",     "OpticNrv_L",      "OpticNrv_R",
      "SpinalCord",
  }};
  return v;
}

const std::string& LabelVocabulary::name(int index) const {
  if (index < 0 || index >= size())
    throw std::out_of_range("vocabulary index " + std::to_string(index));
  return names_[static_cast<std::size_t>(index)];
}

std::optional<int> LabelVocabulary::index_of(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

void VolumeSample::validate() const {
  if (ct.rank() != 3) throw std::invalid_argument("ct volume must be rank 3");
  if (!ct.same_shape(mask))
    throw std::invalid_argument("ct and mask shapes differ: " +
                                shape_string(ct.shape()) + " vs " +
                                shape_string(mask.shape()));
  if (ct.size() == 0) throw std::invalid_argument("empty volume");
  if (!(spacing.z > 0 && spacing.y > 0 && spacing.x > 0))
    throw std::invalid_argument("voxel spacing must be positive");
  for (std::int64_t i = 0; i < mask.size(); ++i)
    if (mask[i] > 1) throw std::invalid_argument("mask values must be 0 or 1");
}

void DatasetManifest::validate() const {
  for (const auto& e : entries) {
    if (e.class_index < 0 || e.class_index >= vocabulary.size())
      throw std::invalid_argument("entry " + e.path + ": class index " +
                                  std::to_string(e.class_index) +
                                  " outside vocabulary");
    if (!valid_splits().count(e.split))
      throw std::invalid_argument("entry " + e.path + ": bad split tag '" +
                                  e.split + "'");
    if (e.path.empty()) throw std::invalid_argument("entry with empty path");
  }
}

std::vector<std::size_t> DatasetManifest::split_indices(std::string_view split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (split.empty() || entries[i].split == split) out.push_back(i);
  return out;
}

std::vector<int> DatasetManifest::class_counts(std::string_view split) const {
  std::vector<int> counts(static_cast<std::size_t>(vocabulary.size()), 0);
  for (const auto& e : entries)
    if (split.empty() || e.split == split)
      ++counts[static_cast<std::size_t>(e.class_index)];
  return counts;
}

void write_sample(const VolumeSample& sample, const std::filesystem::path& dir) {
  sample.validate();
  std::filesystem::create_directories(dir);
  json meta{
      {"format_version", kSampleFormatVersion},
      {"shape", sample.ct.shape()},
      {"spacing", {sample.spacing.z, sample.spacing.y, sample.spacing.x}},
      {"original_label", sample.original_label},
      {"true_class", sample.true_label ? json(*sample.true_label) : json(nullptr)},
      {"hu_normalized", sample.hu_normalized},
  };
  store_json(meta, dir / "meta.json");
  write_raw(dir / "ct.f32", sample.ct.data(), static_cast<std::size_t>(sample.ct.size()));
  write_raw(dir / "mask.u8", sample.mask.data(), static_cast<std::size_t>(sample.mask.size()));
}

VolumeSample read_sample(const std::filesystem::path& dir) {
  const json meta = load_json(dir / "meta.json");
  if (meta.at("format_version").get<int>() != kSampleFormatVersion)
    throw std::runtime_error(dir.string() + ": unsupported sample format version");
  const auto shape = meta.at("shape").get<std::vector<int>>();
  if (shape.size() != 3) throw std::runtime_error(dir.string() + ": shape must have 3 dims");

  VolumeSample s;
  s.ct = GridF(shape);
  s.mask = GridU8(shape);
  const auto sp = meta.at("spacing").get<std::vector<double>>();
  if (sp.size() != 3) throw std::runtime_error(dir.string() + ": spacing must have 3 values");
  s.spacing = {sp[0], sp[1], sp[2]};
  s.original_label = meta.at("original_label").get<std::string>();
  if (!meta.at("true_class").is_null())
    s.true_label = meta.at("true_class").get<std::string>();
  s.hu_normalized = meta.at("hu_normalized").get<bool>();

  read_raw(dir / "ct.f32", s.ct.data(), static_cast<std::size_t>(s.ct.size()));
  read_raw(dir / "mask.u8", s.mask.data(), static_cast<std::size_t>(s.mask.size()));
  s.validate();
  return s;
}

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& file) {
  manifest.validate();
  json entries = json::array();
  for (const auto& e : manifest.entries)
    entries.push_back({{"path", e.path},
                       {"class", manifest.vocabulary.name(e.class_index)},
                       {"split", e.split}});
  const json j{{"format_version", kManifestFormatVersion},
               {"vocabulary", manifest.vocabulary.names()},
               {"entries", entries}};
  store_json(j, file);
}

DatasetManifest read_manifest(const std::filesystem::path& file) {
  const json j = load_json(file);
  if (j.at("format_version").get<int>() != kManifestFormatVersion)
    throw std::runtime_error(file.string() + ": unsupported manifest format version");
  DatasetManifest m;
  m.vocabulary = LabelVocabulary(j.at("vocabulary").get<std::vector<std::string>>());
  for (const auto& je : j.at("entries")) {
    ManifestEntry e;
    e.path = je.at("path").get<std::string>();
    const auto cls = je.at("class").get<std::string>();
    const auto idx = m.vocabulary.index_of(cls);
    if (!idx) throw std::runtime_error(file.string() + ": class '" + cls + "' not in vocabulary");
    e.class_index = *idx;
    e.split = je.at("split").get<std::string>();
    m.entries.push_back(std::move(e));
  }
  m.validate();
  return m;
}

std::vector<std::string> split_manifest(DatasetManifest& manifest, double w_train,
                                        double w_val, double w_test,
                                        std::uint64_t seed) {
  if (!(w_train > 0) || w_val < 0 || w_test < 0)
    throw std::invalid_argument("split weights must be nonnegative with positive train weight");
  const double total = w_train + w_val + w_test;
  const char* split_names[3] = {"train", "val", "test"};
  const double weights[3] = {w_train, w_val, w_test};

  std::vector<std::string> warnings;
  Rng rng(seed);
  for (int c = 0; c < manifest.vocabulary.size(); ++c) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < manifest.entries.size(); ++i)
      if (manifest.entries[i].class_index == c) idx.push_back(i);
    if (idx.empty()) continue;

    const int n = static_cast<int>(idx.size());
    if (n < 3) {
      for (auto i : idx) manifest.entries[i].split = "train";
      warnings.push_back("class '" + manifest.vocabulary.name(c) + "' has only " +
                         std::to_string(n) + " samples; all assigned to train");
      continue;
    }

    // Fisher-Yates so the assignment does not depend on entry order quirks.
    for (std::size_t i = idx.size(); i > 1; --i)
      std::swap(idx[i - 1], idx[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(i)))]);

    int counts[3];
    double remainders[3];
    int assigned = 0;
    for (int s = 0; s < 3; ++s) {
      const double quota = n * weights[s] / total;
      counts[s] = static_cast<int>(std::floor(quota));
      remainders[s] = quota - counts[s];
      assigned += counts[s];
    }
    // Largest remainder first; ties resolved in train, val, test order.
    int order[3] = {0, 1, 2};
    std::stable_sort(order, order + 3,
                     [&](int a, int b) { return remainders[a] > remainders[b]; });
    for (int leftover = n - assigned, s = 0; leftover > 0; --leftover, ++s)
      ++counts[order[s % 3]];

    std::size_t pos = 0;
    for (int s = 0; s < 3; ++s)
      for (int j = 0; j < counts[s]; ++j)
        manifest.entries[idx[pos++]].split = split_names[s];
  }
  return warnings;
}

std::vector<double> balanced_sampling_weights(const DatasetManifest& manifest,
                                              std::string_view split) {
  const auto counts = manifest.class_counts(split);
  const auto all_counts = manifest.class_counts("");
  for (int c = 0; c < manifest.vocabulary.size(); ++c)
    if (all_counts[static_cast<std::size_t>(c)] > 0 && counts[static_cast<std::size_t>(c)] == 0)
      throw std::invalid_argument("class '" + manifest.vocabulary.name(c) +
                                  "' has no entries in split '" + std::string(split) + "'");
  std::vector<double> weights;
  for (auto i : manifest.split_indices(split))
    weights.push_back(1.0 / counts[static_cast<std::size_t>(manifest.entries[i].class_index)]);
  return weights;
}

}  // namespace oarstd
