#pragma once

#include <array>
#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "oarstd/tensor.hpp"

namespace oarstd {

// 3d classification backbone: strided stem conv, four bottleneck stages with
// non-local blocks appended in selected stages, global average pooling and a
// linear feature map feeding a classifier head. Templated on float (training
// and inference through the vectorized kernels) and double (gradient checks).

struct NetworkConfig {
  std::array<int, 4> stage_blocks{3, 4, 6, 3};
  int base_width = 64;
  int feature_dim = 256;
  int num_classes = 28;
  std::set<int> nonlocal_stages{2, 3};  // 1-based stage numbers
  int nonlocal_ratio = 2;               // embedding channels = C / ratio

  void validate() const;
  // Smallest toy variant used by fast tests.
  static NetworkConfig toy(int num_classes);
  bool operator==(const NetworkConfig&) const = default;
};

// Named tensors in fixed insertion order; the order defines the checkpoint
// payload layout.
template <typename T>
class ParameterSet {
 public:
  Tensor<T>& add(const std::string& name, Tensor<T> tensor) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
    index_.emplace(name, items_.size());
    items_.emplace_back(name, std::move(tensor));
    return items_.back().second;
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return items_[it->second].second;
  }
  Tensor<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return items_[it->second].second;
  }

  std::size_t count() const { return items_.size(); }
  const std::pair<std::string, Tensor<T>>& item(std::size_t i) const { return items_[i]; }
  std::pair<std::string, Tensor<T>>& item(std::size_t i) { return items_[i]; }

  std::int64_t total_size() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : items_) n += t.size();
    return n;
  }

  ParameterSet zeros_like() const {
    ParameterSet out;
    for (const auto& [name, t] : items_) out.add(name, Tensor<T>(t.shape()));
    return out;
  }

  template <typename U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (const auto& [name, t] : items_) {
      Tensor<U> c(t.shape());
      for (std::int64_t i = 0; i < t.size(); ++i) c[i] = static_cast<U>(t[i]);
      out.add(name, std::move(c));
    }
    return out;
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct Stride3 {
  int z = 1, y = 1, x = 1;
};
struct Pad3 {
  int z = 0, y = 0, x = 0;
};

// y = conv(x, w) + b with x (B, Cin, D, H, W), w (Cout, Cin, kz, ky, kx).
template <typename T>
Tensor<T> conv3d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                         Stride3 stride, Pad3 pad);

// Accumulates gw/gb and writes gx (zeroed first) when gx != nullptr.
template <typename T>
void conv3d_backward(const Tensor<T>& x, const Tensor<T>& w, Stride3 stride,
                     Pad3 pad, const Tensor<T>& gy, Tensor<T>* gx, Tensor<T>& gw,
                     Tensor<T>& gb);

template <typename T>
struct NonLocalCache {
  Tensor<T> x;                     // (B, C, D, H, W)
  std::vector<Tensor<T>> theta, mu, psi;  // per item (Cr, N)
  std::vector<Tensor<T>> u, v;            // per item (N)
  std::vector<Tensor<T>> s;               // per item (N, N), rectified scores
  std::vector<Tensor<T>> y;               // per item (Cr, N)
};

// Non-local feature aggregation: every position attends to every other
// position with a rectified linear score on concatenated embeddings; the
// aggregate is averaged over all positions, re-embedded and added back to the
// input. Parameters live under `prefix` (theta/mu/psi/sigma 1x1x1 convs and
// the score weight wf).
template <typename T>
Tensor<T> nonlocal_forward(const Tensor<T>& x, const ParameterSet<T>& params,
                           const std::string& prefix, NonLocalCache<T>* cache = nullptr);

template <typename T>
void nonlocal_backward(const Tensor<T>& gz, const NonLocalCache<T>& cache,
                       const ParameterSet<T>& params, const std::string& prefix,
                       ParameterSet<T>& grads, Tensor<T>& gx);

// Names of the parameters a non-local block owns, in insertion order.
std::vector<std::string> nonlocal_param_names(const std::string& prefix);

template <typename T>
struct SoftmaxLossResult {
  T loss = T(0);           // mean cross entropy over the batch
  Tensor<T> probs;         // (B, K)
  Tensor<T> glogits;       // (B, K), gradient of the mean loss
};

template <typename T>
SoftmaxLossResult<T> softmax_cross_entropy(const Tensor<T>& logits,
                                           const std::vector<int>& labels);

template <typename T>
class Backbone {
 public:
  explicit Backbone(NetworkConfig config);

  const NetworkConfig& config() const { return config_; }

  // Every parameter tensor, zero-filled, in checkpoint order.
  ParameterSet<T> zero_parameters() const;

  // He-initialized weights; the non-local output convs start at zero so each
  // block begins as an exact identity.
  ParameterSet<T> init_parameters(std::uint64_t seed) const;

  struct BlockCache {
    Tensor<T> x_in;
    Tensor<T> r1, r2;    // post-relu conv1/conv2 outputs
    Tensor<T> out;       // post-relu block output (before non-local)
    NonLocalCache<T> nl; // filled when the stage has non-local blocks
  };
  struct Cache {
    Tensor<T> input;
    Tensor<T> stem_out;  // post-relu
    std::vector<BlockCache> blocks;
    std::vector<int> map_shape;  // final feature map (B, C, D, H, W)
    Tensor<T> gap_out;                    // (B, C)
  };

  // Input (B, 2, D, H, W) with D >= 8, H >= 32, W >= 32; returns features
  // (B, feature_dim). Pass a cache to enable backward().
  Tensor<T> forward(const Tensor<T>& input, const ParameterSet<T>& params,
                    Cache* cache = nullptr) const;

  // logits (B, num_classes) from features.
  Tensor<T> classify(const Tensor<T>& features, const ParameterSet<T>& params) const;

  // Gradient of the head: accumulates into grads and writes gfeatures.
  void classify_backward(const Tensor<T>& features, const Tensor<T>& glogits,
                         const ParameterSet<T>& params, ParameterSet<T>& grads,
                         Tensor<T>& gfeatures) const;

  // Backpropagates gfeatures through the backbone, accumulating into grads.
  void backward(const Tensor<T>& gfeatures, const Cache& cache,
                const ParameterSet<T>& params, ParameterSet<T>& grads) const;

  // Stage layout helpers.
  int stage_channels(int stage) const;  // output channels of stage 1..4
  static constexpr std::array<int, 3> min_input_dims() { return {8, 32, 32}; }

 private:
  struct BlockDef {
    std::string prefix;
    int c_in, c_mid, c_out;
    Stride3 stride;
    bool has_proj;
    bool has_nonlocal;
  };
  NetworkConfig config_;
  std::vector<BlockDef> blocks_;
  int last_channels_ = 0;
};

extern template class Backbone<float>;
extern template class Backbone<double>;

}  // namespace oarstd
