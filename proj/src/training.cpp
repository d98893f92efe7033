#include "oarstd/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "oarstd/evaluation.hpp"
#include "oarstd/inference.hpp"
#include "oarstd/rng.hpp"

namespace oarstd {

namespace {

void check_scale_subset(const std::vector<int>& subset) {
  const int count = static_cast<int>(crop_scale_table().size());
  for (int idx : subset)
    if (idx < 0 || idx >= count) throw std::invalid_argument("scale index out of range");
}

int largest_scale_m(const std::vector<int>& subset) {
  const auto& table = crop_scale_table();
  if (subset.empty()) return table.back().m;
  int largest = 0;
  for (int idx : subset) largest = std::max(largest, table[static_cast<std::size_t>(idx)].m);
  return largest;
}

void zero_gradients(ParameterSet<float>& grads) {
  for (std::size_t i = 0; i < grads.count(); ++i) grads.item(i).second.fill(0.0f);
}

// Everything shared between full training and fine-tuning: the balanced draw
// loop, batch assembly, optimizer stepping, validation and best tracking.
struct LoopSpec {
  int batch_size = 16;
  int epochs = 20;
  std::uint64_t seed = 0;
  int val_every = 1;
  std::vector<int> train_scales;
  std::vector<int> val_scales;
  AugmentRanges augment;
  std::function<double(int)> lr_of;
  std::function<bool(const std::string&)> trainable;  // empty = every tensor
  bool require_val = true;
};

TrainResult run_loop(const DatasetManifest& manifest, const std::filesystem::path& data_root,
                     const NetworkConfig& config, ParameterSet<float> params,
                     const LoopSpec& spec) {
  manifest.validate();
  check_scale_subset(spec.train_scales);
  check_scale_subset(spec.val_scales);
  if (manifest.vocabulary.size() != config.num_classes)
    throw std::invalid_argument("manifest vocabulary does not match the network class count");

  const std::vector<std::size_t> train_idx = manifest.split_indices("train");
  const std::vector<std::size_t> val_idx = manifest.split_indices("val");
  if (train_idx.empty()) throw std::invalid_argument("train split is empty");
  if (spec.require_val && val_idx.empty()) throw std::invalid_argument("val split is empty");

  const std::vector<double> weights = balanced_sampling_weights(manifest, "train");
  std::vector<double> cumulative(weights.size());
  double total = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    total += weights[i];
    cumulative[i] = total;
  }

  const int largest_m = largest_scale_m(spec.train_scales);
  std::map<std::size_t, VolumeSample> train_cache;  // preresized once
  std::map<std::size_t, VolumeSample> val_cache;    // as stored
  auto load_train = [&](std::size_t entry) -> const VolumeSample& {
    auto it = train_cache.find(entry);
    if (it == train_cache.end()) {
      VolumeSample s = read_sample(data_root / manifest.entries[entry].path);
      if (!s.hu_normalized)
        throw std::invalid_argument("sample not preprocessed: " + manifest.entries[entry].path);
      adaptive_preresize(s, largest_m);
      it = train_cache.emplace(entry, std::move(s)).first;
    }
    return it->second;
  };
  auto load_val = [&](std::size_t entry) -> const VolumeSample& {
    auto it = val_cache.find(entry);
    if (it == val_cache.end())
      it = val_cache.emplace(entry, read_sample(data_root / manifest.entries[entry].path)).first;
    return it->second;
  };

  Backbone<float> net(config);
  Adam optimizer(params);
  Rng rng(derive_seed(spec.seed, 1));

  TrainResult result;
  ParameterSet<float> grads = params.zeros_like();
  ParameterSet<float> best;

  const std::int64_t draws_per_epoch = static_cast<std::int64_t>(train_idx.size());
  for (int epoch = 0; epoch < spec.epochs; ++epoch) {
    const double lr = spec.lr_of(epoch);
    double loss_sum = 0;
    std::int64_t done = 0;
    while (done < draws_per_epoch) {
      const int batch = static_cast<int>(
          std::min<std::int64_t>(spec.batch_size, draws_per_epoch - done));
      Tensor<float> inputs;
      std::vector<int> labels;
      std::vector<std::string> ids;
      labels.reserve(static_cast<std::size_t>(batch));
      for (int b = 0; b < batch; ++b) {
        const std::size_t slot = weighted_draw(cumulative, rng.uniform());
        const std::size_t entry = train_idx[slot];
        const VolumeSample& sample = load_train(entry);
        const std::vector<CropCubeSpec> crops = enumerate_crops(sample, spec.train_scales);
        const CropCubeSpec crop = crops[static_cast<std::size_t>(
            rng.uniform_int(static_cast<int>(crops.size())))];
        ModelInput extracted = extract_and_resize(sample, crop);
        ModelInput augmented = augment(extracted, spec.augment, rng.next());
        const Tensor<float>& item = augmented.data;
        if (b == 0)
          inputs = Tensor<float>({batch, item.dim(0), item.dim(1), item.dim(2), item.dim(3)});
        std::copy(item.data(), item.data() + item.size(), inputs.data() + b * item.size());
        labels.push_back(manifest.entries[entry].class_index);
        ids.push_back(manifest.entries[entry].path);
      }

      typename Backbone<float>::Cache cache;
      const Tensor<float> features = net.forward(inputs, params, &cache);
      const Tensor<float> logits = net.classify(features, params);
      SoftmaxLossResult<float> loss = softmax_cross_entropy(logits, labels);
      if (!std::isfinite(loss.loss)) {
        std::ostringstream msg;
        msg << "non-finite loss at epoch " << epoch << " (lr " << lr << "); batch entries:";
        for (const std::string& id : ids) msg << ' ' << id;
        throw std::runtime_error(msg.str());
      }
      zero_gradients(grads);
      Tensor<float> gfeatures;
      net.classify_backward(features, loss.glogits, params, grads, gfeatures);
      net.backward(gfeatures, cache, params, grads);
      optimizer.step(params, grads, lr, spec.trainable);

      loss_sum += static_cast<double>(loss.loss) * batch;
      done += batch;
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.lr = lr;
    stats.train_loss = loss_sum / static_cast<double>(draws_per_epoch);

    const bool last = epoch == spec.epochs - 1;
    if (!val_idx.empty() && ((epoch + 1) % spec.val_every == 0 || last)) {
      std::vector<int> truths, preds;
      truths.reserve(val_idx.size());
      double val_loss = 0;
      for (std::size_t entry : val_idx) {
        const VolumeSample& sample = load_val(entry);
        const Prediction pred = predict_sample(sample, config, params, spec.val_scales);
        const int truth = manifest.entries[entry].class_index;
        truths.push_back(truth);
        preds.push_back(pred.class_index);
        val_loss -= std::log(std::max(pred.voted[static_cast<std::size_t>(truth)], 1e-300));
      }
      stats.val_loss = val_loss / static_cast<double>(val_idx.size());
      stats.val_macro_f1 =
          classification_metrics(truths, preds, {}, config.num_classes).macro_f1;
      if (*stats.val_macro_f1 > result.best_val_macro_f1) {
        result.best_val_macro_f1 = *stats.val_macro_f1;
        result.best_epoch = epoch;
        best = params;
      }
    }
    result.history.epochs.push_back(std::move(stats));
  }

  if (result.best_epoch < 0) {  // validation never ran: keep the final state
    result.best_epoch = spec.epochs - 1;
    result.params = std::move(params);
  } else {
    result.params = std::move(best);
  }
  return result;
}

}  // namespace

void TrainConfig::validate() const {
  if (lr0 <= 0) throw std::invalid_argument("lr0 must be positive");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be at least 1");
  if (epochs < 1) throw std::invalid_argument("epochs must be at least 1");
  if (decay_factor <= 0) throw std::invalid_argument("decay_factor must be positive");
  if (val_every < 1) throw std::invalid_argument("val_every must be at least 1");
  for (std::size_t i = 0; i < milestones.size(); ++i) {
    if (milestones[i] < 1 || milestones[i] >= epochs)
      throw std::invalid_argument("milestones must lie inside (0, epochs)");
    if (i > 0 && milestones[i] <= milestones[i - 1])
      throw std::invalid_argument("milestones must be strictly increasing");
  }
  check_scale_subset(train_scales);
  check_scale_subset(val_scales);
}

double lr_at_epoch(const TrainConfig& config, int epoch) {
  int passed = 0;
  for (int m : config.milestones)
    if (epoch >= m) ++passed;
  return config.lr0 / std::pow(config.decay_factor, passed);
}

std::size_t weighted_draw(const std::vector<double>& cumulative, double u) {
  if (cumulative.empty()) throw std::invalid_argument("weighted_draw: empty weights");
  const double target = u * cumulative.back();
  const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), target);
  return std::min(static_cast<std::size_t>(it - cumulative.begin()), cumulative.size() - 1);
}

void TrainHistory::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write history: " + path.string());
  out << "epoch,lr,train_loss,val_loss,val_macro_f1\n";
  char buf[64];
  for (const EpochStats& e : epochs) {
    std::snprintf(buf, sizeof(buf), "%d,%.10g,%.10g", e.epoch, e.lr, e.train_loss);
    out << buf;
    if (e.val_loss) {
      std::snprintf(buf, sizeof(buf), ",%.10g", *e.val_loss);
      out << buf;
    } else {
      out << ',';
    }
    if (e.val_macro_f1) {
      std::snprintf(buf, sizeof(buf), ",%.10g", *e.val_macro_f1);
      out << buf;
    } else {
      out << ',';
    }
    out << '\n';
  }
}

Adam::Adam(const ParameterSet<float>& params, double beta1, double beta2, double epsilon)
    : beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {
  m_.resize(params.count());
  v_.resize(params.count());
  for (std::size_t i = 0; i < params.count(); ++i) {
    const std::size_t n = static_cast<std::size_t>(params.item(i).second.size());
    m_[i].assign(n, 0.0f);
    v_[i].assign(n, 0.0f);
  }
}

void Adam::step(ParameterSet<float>& params, const ParameterSet<float>& grads, double lr,
                const std::function<bool(const std::string&)>& trainable) {
  if (params.count() != m_.size() || grads.count() != m_.size())
    throw std::invalid_argument("optimizer state does not match the parameter set");
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.count(); ++i) {
    auto& [name, tensor] = params.item(i);
    if (trainable && !trainable(name)) continue;
    const auto& [gname, gtensor] = grads.item(i);
    if (gname != name || !gtensor.same_shape(tensor))
      throw std::invalid_argument("gradient layout mismatch at " + name);
    float* p = tensor.data();
    const float* g = gtensor.data();
    std::vector<float>& m = m_[i];
    std::vector<float>& v = v_[i];
    const std::int64_t n = tensor.size();
    for (std::int64_t k = 0; k < n; ++k) {
      const double gk = g[k];
      const std::size_t ks = static_cast<std::size_t>(k);
      m[ks] = static_cast<float>(beta1_ * m[ks] + (1.0 - beta1_) * gk);
      v[ks] = static_cast<float>(beta2_ * v[ks] + (1.0 - beta2_) * gk * gk);
      const double mh = m[ks] / bc1;
      const double vh = v[ks] / bc2;
      p[k] = static_cast<float>(p[k] - lr * mh / (std::sqrt(vh) + epsilon_));
    }
  }
}

TrainResult train(const DatasetManifest& manifest, const std::filesystem::path& data_root,
                  const NetworkConfig& net_config, const TrainConfig& train_config) {
  train_config.validate();
  net_config.validate();
  ParameterSet<float> params = Backbone<float>(net_config).init_parameters(train_config.seed);
  LoopSpec spec;
  spec.batch_size = train_config.batch_size;
  spec.epochs = train_config.epochs;
  spec.seed = train_config.seed;
  spec.val_every = train_config.val_every;
  spec.train_scales = train_config.train_scales;
  spec.val_scales = train_config.val_scales;
  spec.augment = train_config.augment;
  spec.lr_of = [&train_config](int epoch) { return lr_at_epoch(train_config, epoch); };
  spec.require_val = true;
  return run_loop(manifest, data_root, net_config, std::move(params), spec);
}

void FinetuneConfig::validate() const {
  if (lr <= 0) throw std::invalid_argument("lr must be positive");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be at least 1");
  if (epochs < 1) throw std::invalid_argument("epochs must be at least 1");
  if (epochs > 20) throw std::invalid_argument("fine-tuning is capped at 20 epochs");
  if (val_every < 1) throw std::invalid_argument("val_every must be at least 1");
  check_scale_subset(train_scales);
  check_scale_subset(val_scales);
}

bool finetune_trainable(const std::string& name) {
  return name.rfind("res4.", 0) == 0 || name.rfind("head.", 0) == 0;
}

TrainResult finetune(const Checkpoint& base, const DatasetManifest& new_manifest,
                     const std::filesystem::path& data_root, const FinetuneConfig& config) {
  config.validate();
  NetworkConfig net_config = base.config;
  net_config.num_classes = new_manifest.vocabulary.size();
  net_config.validate();

  ParameterSet<float> params = Backbone<float>(net_config).zero_parameters();
  for (std::size_t i = 0; i < params.count(); ++i) {
    auto& [name, tensor] = params.item(i);
    if (name.rfind("head.", 0) == 0) continue;  // reinitialized for the new classes
    const Tensor<float>& src = base.params.get(name);
    if (!src.same_shape(tensor))
      throw std::invalid_argument("checkpoint tensor shape mismatch at " + name);
    std::copy(src.data(), src.data() + src.size(), tensor.data());
  }

  LoopSpec spec;
  spec.batch_size = config.batch_size;
  spec.epochs = config.epochs;
  spec.seed = config.seed;
  spec.val_every = config.val_every;
  spec.train_scales = config.train_scales;
  spec.val_scales = config.val_scales;
  spec.augment = config.augment;
  const double lr = config.lr;
  spec.lr_of = [lr](int) { return lr; };
  spec.trainable = finetune_trainable;
  spec.require_val = false;
  return run_loop(new_manifest, data_root, net_config, std::move(params), spec);
}

}  // namespace oarstd
