// SPDX-License-Identifier: Apache-2.0

#include "ntf3d/nn.hpp"

#include <cmath>
#include <cstring>

#include "ntf3d/errors.hpp"

namespace ntf3d {

ad::Tensor ParamSet::add(std::string name, ad::Shape shape, std::vector<double> values) {
  for (auto& v : values) v = round_f32(v);
  auto t = ad::Tensor::from(std::move(shape), std::move(values), true);
  params_.push_back({std::move(name), t});
  return t;
}

void ParamSet::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void ParamSet::extend(const ParamSet& other, const std::string& prefix) {
  for (const auto& p : other.params_) params_.push_back({prefix + p.name, p.tensor});
}

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t ParamSet::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& p : params_) {
    h = fnv1a(p.name.data(), p.name.size(), h);
    const auto v = p.tensor.values();
    h = fnv1a(v.data(), v.size() * sizeof(double), h);
  }
  return h;
}

std::size_t ParamSet::total_size() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.tensor.numel());
  return n;
}

ad::Tensor activate(const ad::Tensor& x, Activation act) {
  switch (act) {
    case Activation::kSilu:
      return ad::silu(x);
    case Activation::kTanh:
      return ad::tanh(x);
    case Activation::kNone:
      break;
  }
  return x;
}

std::vector<double> normal_vector(std::size_t n, Rng& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> out(n);
  for (auto& v : out) v = dist(rng);
  return out;
}

Linear::Linear(ParamSet& params, const std::string& name, std::int64_t in, std::int64_t out, Rng& rng,
               double gain)
    : in_(in), out_(out) {
  const double stddev = gain / std::sqrt(static_cast<double>(in));
  weight_ = params.add(name + ".w", {in, out}, normal_vector(static_cast<std::size_t>(in * out), rng, stddev));
  bias_ = params.add(name + ".b", {out}, std::vector<double>(static_cast<std::size_t>(out), 0.0));
}

ad::Tensor Linear::operator()(const ad::Tensor& x) const {
  if (x.rank() != 2 || x.shape()[1] != in_) {
    throw InvalidInput("Linear: expected [N, " + std::to_string(in_) + "] input, got " + ad::shape_str(x.shape()));
  }
  return ad::add(ad::matmul(x, weight_), bias_);
}

Mlp::Mlp(ParamSet& params, const std::string& name, const std::vector<std::int64_t>& widths, Rng& rng,
         Activation hidden_act, Activation out_act, double last_gain)
    : hidden_act_(hidden_act), out_act_(out_act) {
  if (widths.size() < 2) throw InvalidInput("Mlp: needs at least input and output width");
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const bool last = i + 2 == widths.size();
    layers_.emplace_back(params, name + ".l" + std::to_string(i), widths[i], widths[i + 1], rng,
                         last ? last_gain : 1.0);
  }
}

ad::Tensor Mlp::operator()(const ad::Tensor& x) const {
  ad::Tensor h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i](h);
    h = activate(h, i + 1 == layers_.size() ? out_act_ : hidden_act_);
  }
  return h;
}

Conv3x3::Conv3x3(ParamSet& params, const std::string& name, std::int64_t in, std::int64_t out, Rng& rng) {
  const double stddev = 1.0 / std::sqrt(static_cast<double>(9 * in));
  weight_ = params.add(name + ".w", {9 * in, out}, normal_vector(static_cast<std::size_t>(9 * in * out), rng, stddev));
  bias_ = params.add(name + ".b", {out}, std::vector<double>(static_cast<std::size_t>(out), 0.0));
}

ad::Tensor Conv3x3::operator()(const ad::Tensor& x) const { return ad::conv3x3(x, weight_, bias_); }

}  // namespace ntf3d
