// SPDX-License-Identifier: Apache-2.0
//
// Parameter containers and small layer building blocks on top of ad::Tensor.

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "ntf3d/ad.hpp"

namespace ntf3d {

using Rng = std::mt19937_64;

// Rounds to the nearest fp32 value. Parameters and optimizer state are kept
// fp32-representable so the fp32 checkpoint format round-trips bit-exactly.
inline double round_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

// 64-bit FNV-1a.
std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 1469598103934665603ULL);
inline std::uint64_t fnv1a(const std::string& s) { return fnv1a(s.data(), s.size()); }

struct NamedParam {
  std::string name;
  ad::Tensor tensor;
};

// Ordered list of named trainable tensors owned by one model component.
class ParamSet {
 public:
  ad::Tensor add(std::string name, ad::Shape shape, std::vector<double> values);
  const std::vector<NamedParam>& params() const { return params_; }
  std::vector<NamedParam>& params() { return params_; }
  void zero_grad();
  // Appends every parameter of `other`, prefixing names with `prefix`.
  void extend(const ParamSet& other, const std::string& prefix);
  // FNV-1a over names and raw value bytes.
  std::uint64_t hash() const;
  std::size_t total_size() const;

 private:
  std::vector<NamedParam> params_;
};

enum class Activation { kNone, kSilu, kTanh };

ad::Tensor activate(const ad::Tensor& x, Activation act);

// Dense layer y = x W + b with W [in, out].
class Linear {
 public:
  Linear() = default;
  Linear(ParamSet& params, const std::string& name, std::int64_t in, std::int64_t out, Rng& rng,
         double gain = 1.0);
  ad::Tensor operator()(const ad::Tensor& x) const;
  const ad::Tensor& weight() const { return weight_; }
  const ad::Tensor& bias() const { return bias_; }
  std::int64_t in_features() const { return in_; }
  std::int64_t out_features() const { return out_; }

 private:
  ad::Tensor weight_;
  ad::Tensor bias_;
  std::int64_t in_ = 0;
  std::int64_t out_ = 0;
};

// Stack of Linear layers with `hidden_act` between them and `out_act` last.
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParamSet& params, const std::string& name, const std::vector<std::int64_t>& widths, Rng& rng,
      Activation hidden_act = Activation::kSilu, Activation out_act = Activation::kNone, double last_gain = 1.0);
  ad::Tensor operator()(const ad::Tensor& x) const;
  const std::vector<Linear>& layers() const { return layers_; }

 private:
  std::vector<Linear> layers_;
  Activation hidden_act_ = Activation::kSilu;
  Activation out_act_ = Activation::kNone;
};

// 3x3 same-padding convolution on NHWC tensors.
class Conv3x3 {
 public:
  Conv3x3() = default;
  Conv3x3(ParamSet& params, const std::string& name, std::int64_t in, std::int64_t out, Rng& rng);
  ad::Tensor operator()(const ad::Tensor& x) const;

 private:
  ad::Tensor weight_;
  ad::Tensor bias_;
};

std::vector<double> normal_vector(std::size_t n, Rng& rng, double stddev = 1.0);

}  // namespace ntf3d
