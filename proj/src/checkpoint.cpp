#include "oarstd/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace oarstd {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'O', 'A', 'R', 'S', 'T', 'D', 'C', 'K'};
constexpr std::uint32_t kFormatVersion = 1;

json config_to_json(const NetworkConfig& c) {
  return json{{"stage_blocks", c.stage_blocks},
              {"base_width", c.base_width},
              {"feature_dim", c.feature_dim},
              {"num_classes", c.num_classes},
              {"nonlocal_stages", std::vector<int>(c.nonlocal_stages.begin(),
                                                   c.nonlocal_stages.end())},
              {"nonlocal_ratio", c.nonlocal_ratio}};
}

NetworkConfig config_from_json(const json& j) {
  NetworkConfig c;
  const auto blocks = j.at("stage_blocks").get<std::vector<int>>();
  if (blocks.size() != 4)
    throw std::runtime_error("checkpoint: stage_blocks must have 4 entries");
  std::copy(blocks.begin(), blocks.end(), c.stage_blocks.begin());
  c.base_width = j.at("base_width").get<int>();
  c.feature_dim = j.at("feature_dim").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  const auto stages = j.at("nonlocal_stages").get<std::vector<int>>();
  c.nonlocal_stages = std::set<int>(stages.begin(), stages.end());
  c.nonlocal_ratio = j.at("nonlocal_ratio").get<int>();
  c.validate();
  return c;
}

template <typename T>
void write_pod(std::ofstream& out, const T& value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in, const char* what) {
  T value;
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw std::runtime_error(std::string("checkpoint: truncated ") + what);
  return value;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const NetworkConfig& config,
                     const LabelVocabulary& vocabulary,
                     const ParameterSet<float>& params) {
  if (vocabulary.size() != config.num_classes)
    throw std::invalid_argument("checkpoint: vocabulary size must equal num_classes");

  json tensors = json::array();
  for (std::size_t i = 0; i < params.count(); ++i) {
    const auto& [name, t] = params.item(i);
    tensors.push_back(json{{"name", name}, {"shape", t.shape()}});
  }
  const json header{{"network", config_to_json(config)},
                    {"vocabulary", vocabulary.names()},
                    {"tensors", tensors}};
  const std::string header_bytes = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out.write(kMagic, sizeof(kMagic));
  write_pod(out, kFormatVersion);
  write_pod(out, static_cast<std::uint64_t>(header_bytes.size()));
  out.write(header_bytes.data(), static_cast<std::streamsize>(header_bytes.size()));
  for (std::size_t i = 0; i < params.count(); ++i) {
    const Tensor<float>& t = params.item(i).second;
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.size() * sizeof(float)));
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path.string());

  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("not a checkpoint file: " + path.string());
  const auto version = read_pod<std::uint32_t>(in, "version");
  if (version != kFormatVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  const auto header_len = read_pod<std::uint64_t>(in, "header length");
  std::string header_bytes(header_len, '\0');
  in.read(header_bytes.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw std::runtime_error("checkpoint: truncated header");

  json header;
  try {
    header = json::parse(header_bytes);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(std::string("checkpoint: bad header: ") + e.what());
  }

  Checkpoint ck;
  ck.config = config_from_json(header.at("network"));
  ck.vocabulary = LabelVocabulary(header.at("vocabulary").get<std::vector<std::string>>());
  if (ck.vocabulary.size() != ck.config.num_classes)
    throw std::runtime_error("checkpoint: vocabulary size does not match num_classes");

  // The architecture dictates the exact tensor list; the manifest must agree.
  ck.params = Backbone<float>(ck.config).zero_parameters();
  const json& tensors = header.at("tensors");
  if (tensors.size() != ck.params.count())
    throw std::runtime_error("checkpoint: tensor count does not match architecture");
  for (std::size_t i = 0; i < ck.params.count(); ++i) {
    auto& [name, t] = ck.params.item(i);
    const json& entry = tensors.at(i);
    if (entry.at("name").get<std::string>() != name)
      throw std::runtime_error("checkpoint: unexpected tensor " +
                               entry.at("name").get<std::string>() + ", wanted " + name);
    if (entry.at("shape").get<std::vector<int>>() != t.shape())
      throw std::runtime_error("checkpoint: shape mismatch for " + name);
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(float)));
    if (!in) throw std::runtime_error("checkpoint: truncated payload at " + name);
  }
  char extra;
  if (in.read(&extra, 1))
    throw std::runtime_error("checkpoint: trailing bytes in " + path.string());
  return ck;
}

}  // namespace oarstd
