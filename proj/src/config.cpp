#include "oarstd/config.hpp"

#include <fstream>
#include <set>
#include <stdexcept>

#include "json.hpp"

namespace oarstd {
namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& where, const std::string& what) {
  throw std::runtime_error("config: " + where + ": " + what);
}

// Every object is read through this guard so misspelled keys never pass
// silently.
void reject_unknown(const json& j, const std::string& where,
                    const std::set<std::string>& allowed) {
  if (!j.is_object()) fail(where, "expected an object");
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key)) fail(where, "unknown key \"" + key + "\"");
}

template <typename T>
void get_to(const json& j, const std::string& where, const char* key, T& out) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    it->get_to(out);
  } catch (const json::exception& e) {
    fail(where + "." + key, e.what());
  }
}

template <typename T, std::size_t N>
void get_array(const json& j, const std::string& where, const char* key,
               std::array<T, N>& out) {
  auto it = j.find(key);
  if (it == j.end()) return;
  if (!it->is_array() || it->size() != N)
    fail(where + "." + key, "expected an array of " + std::to_string(N));
  for (std::size_t i = 0; i < N; ++i) {
    try {
      it->at(i).get_to(out[i]);
    } catch (const json::exception& e) {
      fail(where + "." + key, e.what());
    }
  }
}

void parse_paths(const json& j, RunPaths& p) {
  reject_unknown(j, "paths", {"data_dir", "checkpoint", "dictionary", "output_dir"});
  get_to(j, "paths", "data_dir", p.data_dir);
  get_to(j, "paths", "checkpoint", p.checkpoint);
  get_to(j, "paths", "dictionary", p.dictionary);
  get_to(j, "paths", "output_dir", p.output_dir);
}

void parse_preprocess(const json& j, PreprocessConfig& p) {
  reject_unknown(j, "preprocess", {"target_ratio", "hu_lo", "hu_hi", "target_spacing_xy"});
  get_array(j, "preprocess", "target_ratio", p.target_ratio);
  get_to(j, "preprocess", "hu_lo", p.hu_lo);
  get_to(j, "preprocess", "hu_hi", p.hu_hi);
  if (auto it = j.find("target_spacing_xy"); it != j.end()) {
    if (it->is_null())
      p.target_spacing_xy.reset();
    else if (it->is_number())
      p.target_spacing_xy = it->get<double>();
    else
      fail("preprocess.target_spacing_xy", "expected a number or null");
  }
}

void parse_augment(const json& j, AugmentRanges& a) {
  reject_unknown(j, "asac.augment",
                 {"translate_vox", "rotate_deg", "shear_deg", "scale_lo", "scale_hi"});
  get_to(j, "asac.augment", "translate_vox", a.translate_vox);
  get_to(j, "asac.augment", "rotate_deg", a.rotate_deg);
  get_to(j, "asac.augment", "shear_deg", a.shear_deg);
  get_to(j, "asac.augment", "scale_lo", a.scale_lo);
  get_to(j, "asac.augment", "scale_hi", a.scale_hi);
}

void parse_asac(const json& j, AsacSettings& a) {
  reject_unknown(j, "asac", {"scales", "augment"});
  get_to(j, "asac", "scales", a.scales);
  if (auto it = j.find("augment"); it != j.end()) parse_augment(*it, a.augment);
}

void parse_network(const json& j, NetworkConfig& n) {
  reject_unknown(j, "network",
                 {"stage_blocks", "base_width", "feature_dim", "num_classes", "nonlocal_stages",
                  "nonlocal_ratio"});
  get_array(j, "network", "stage_blocks", n.stage_blocks);
  get_to(j, "network", "base_width", n.base_width);
  get_to(j, "network", "feature_dim", n.feature_dim);
  get_to(j, "network", "num_classes", n.num_classes);
  if (auto it = j.find("nonlocal_stages"); it != j.end()) {
    std::vector<int> stages;
    try {
      it->get_to(stages);
    } catch (const json::exception& e) {
      fail("network.nonlocal_stages", e.what());
    }
    n.nonlocal_stages = std::set<int>(stages.begin(), stages.end());
  }
  get_to(j, "network", "nonlocal_ratio", n.nonlocal_ratio);
}

void parse_train(const json& j, TrainConfig& t) {
  reject_unknown(j, "train",
                 {"lr0", "batch_size", "epochs", "milestones", "decay_factor", "val_every",
                  "val_scales"});
  get_to(j, "train", "lr0", t.lr0);
  get_to(j, "train", "batch_size", t.batch_size);
  get_to(j, "train", "epochs", t.epochs);
  get_to(j, "train", "milestones", t.milestones);
  get_to(j, "train", "decay_factor", t.decay_factor);
  get_to(j, "train", "val_every", t.val_every);
  get_to(j, "train", "val_scales", t.val_scales);
}

void parse_finetune(const json& j, FinetuneConfig& f) {
  reject_unknown(j, "finetune", {"lr", "batch_size", "epochs", "val_every", "val_scales"});
  get_to(j, "finetune", "lr", f.lr);
  get_to(j, "finetune", "batch_size", f.batch_size);
  get_to(j, "finetune", "epochs", f.epochs);
  get_to(j, "finetune", "val_every", f.val_every);
  get_to(j, "finetune", "val_scales", f.val_scales);
}

void parse_phantom(const json& j, PhantomSettings& p) {
  reject_unknown(j, "phantom",
                 {"classes", "grid_shape", "spacing", "jitter", "size_jitter",
                  "delineation_noise", "hu_noise", "z_margin", "split"});
  if (auto it = j.find("classes"); it != j.end()) {
    if (!it->is_array()) fail("phantom.classes", "expected an array");
    p.config.classes.clear();
    for (const auto& entry : *it) {
      reject_unknown(entry, "phantom.classes[]", {"name", "count"});
      PhantomClassSpec spec;
      get_to(entry, "phantom.classes[]", "name", spec.name);
      get_to(entry, "phantom.classes[]", "count", spec.count);
      p.config.classes.push_back(std::move(spec));
    }
  }
  get_array(j, "phantom", "grid_shape", p.config.grid_shape);
  if (auto it = j.find("spacing"); it != j.end()) {
    std::array<double, 3> zyx{p.config.spacing.z, p.config.spacing.y, p.config.spacing.x};
    get_array(j, "phantom", "spacing", zyx);
    p.config.spacing = {zyx[0], zyx[1], zyx[2]};
  }
  get_to(j, "phantom", "jitter", p.config.jitter);
  get_to(j, "phantom", "size_jitter", p.config.size_jitter);
  get_to(j, "phantom", "delineation_noise", p.config.delineation_noise);
  get_to(j, "phantom", "hu_noise", p.config.hu_noise);
  get_to(j, "phantom", "z_margin", p.config.z_margin);
  get_array(j, "phantom", "split", p.split);
}

}  // namespace

void RunConfig::validate() const {
  if (workers < 1) throw std::invalid_argument("workers must be at least 1");
  if (!(inference_threshold >= 0.0 && inference_threshold <= 1.0))
    throw std::invalid_argument("inference_threshold must lie in [0, 1]");
  const int n_scales = static_cast<int>(crop_scale_table().size());
  for (int s : asac.scales)
    if (s < 0 || s >= n_scales)
      throw std::invalid_argument("asac.scales entry out of range: " + std::to_string(s));
  for (double w : phantom.split)
    if (w < 0.0) throw std::invalid_argument("phantom.split weights must be nonnegative");
  if (phantom.split[0] + phantom.split[1] + phantom.split[2] <= 0.0)
    throw std::invalid_argument("phantom.split weights must not all be zero");
  preprocess.validate();
  network.validate();
  train.validate();
  finetune.validate();
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    fail(path.string(), e.what());
  }
  reject_unknown(j, "root",
                 {"seed", "workers", "paths", "preprocess", "asac", "network", "train",
                  "finetune", "inference", "phantom"});
  RunConfig c;
  get_to(j, "root", "seed", c.seed);
  get_to(j, "root", "workers", c.workers);
  if (auto it = j.find("paths"); it != j.end()) parse_paths(*it, c.paths);
  if (auto it = j.find("preprocess"); it != j.end()) parse_preprocess(*it, c.preprocess);
  if (auto it = j.find("asac"); it != j.end()) parse_asac(*it, c.asac);
  if (auto it = j.find("network"); it != j.end()) parse_network(*it, c.network);
  if (auto it = j.find("train"); it != j.end()) parse_train(*it, c.train);
  if (auto it = j.find("finetune"); it != j.end()) parse_finetune(*it, c.finetune);
  if (auto it = j.find("inference"); it != j.end()) {
    reject_unknown(*it, "inference", {"threshold"});
    get_to(*it, "inference", "threshold", c.inference_threshold);
  }
  if (auto it = j.find("phantom"); it != j.end()) parse_phantom(*it, c.phantom);
  return c;
}

void save_run_config(const RunConfig& c, const std::filesystem::path& path) {
  json j;
  j["seed"] = c.seed;
  j["workers"] = c.workers;
  j["paths"] = {{"data_dir", c.paths.data_dir},
                {"checkpoint", c.paths.checkpoint},
                {"dictionary", c.paths.dictionary},
                {"output_dir", c.paths.output_dir}};
  json pre = {{"target_ratio", c.preprocess.target_ratio},
              {"hu_lo", c.preprocess.hu_lo},
              {"hu_hi", c.preprocess.hu_hi}};
  pre["target_spacing_xy"] =
      c.preprocess.target_spacing_xy ? json(*c.preprocess.target_spacing_xy) : json(nullptr);
  j["preprocess"] = std::move(pre);
  j["asac"] = {{"scales", c.asac.scales},
               {"augment",
                {{"translate_vox", c.asac.augment.translate_vox},
                 {"rotate_deg", c.asac.augment.rotate_deg},
                 {"shear_deg", c.asac.augment.shear_deg},
                 {"scale_lo", c.asac.augment.scale_lo},
                 {"scale_hi", c.asac.augment.scale_hi}}}};
  j["network"] = {{"stage_blocks", c.network.stage_blocks},
                  {"base_width", c.network.base_width},
                  {"feature_dim", c.network.feature_dim},
                  {"num_classes", c.network.num_classes},
                  {"nonlocal_stages",
                   std::vector<int>(c.network.nonlocal_stages.begin(),
                                    c.network.nonlocal_stages.end())},
                  {"nonlocal_ratio", c.network.nonlocal_ratio}};
  j["train"] = {{"lr0", c.train.lr0},
                {"batch_size", c.train.batch_size},
                {"epochs", c.train.epochs},
                {"milestones", c.train.milestones},
                {"decay_factor", c.train.decay_factor},
                {"val_every", c.train.val_every},
                {"val_scales", c.train.val_scales}};
  j["finetune"] = {{"lr", c.finetune.lr},
                   {"batch_size", c.finetune.batch_size},
                   {"epochs", c.finetune.epochs},
                   {"val_every", c.finetune.val_every},
                   {"val_scales", c.finetune.val_scales}};
  j["inference"] = {{"threshold", c.inference_threshold}};
  json classes = json::array();
  for (const auto& spec : c.phantom.config.classes)
    classes.push_back({{"name", spec.name}, {"count", spec.count}});
  j["phantom"] = {{"classes", std::move(classes)},
                  {"grid_shape", c.phantom.config.grid_shape},
                  {"spacing",
                   std::array<double, 3>{c.phantom.config.spacing.z, c.phantom.config.spacing.y,
                                         c.phantom.config.spacing.x}},
                  {"jitter", c.phantom.config.jitter},
                  {"size_jitter", c.phantom.config.size_jitter},
                  {"delineation_noise", c.phantom.config.delineation_noise},
                  {"hu_noise", c.phantom.config.hu_noise},
                  {"z_margin", c.phantom.config.z_margin},
                  {"split", c.phantom.split}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("config: cannot write " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error("config: failed writing " + path.string());
}

}  // namespace oarstd
