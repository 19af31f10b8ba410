/*
 * Copyright 2026 The xmodal Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Dense feed-forward substrate: linear layers chained with rectifiers, forward
// passes that keep every intermediate output ("taps"), backward passes that
// accept extra gradients injected at those taps, softmax cross-entropy, SGD
// with weight decay and a central finite-difference gradient checker.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "xmodal/error.hpp"
#include "xmodal/rng.hpp"
#include "xmodal/tensor.hpp"

namespace xmodal {

inline Tensor init_gaussian(std::vector<std::size_t> shape, double stddev, Rng& rng) {
  if (!(stddev > 0.0)) throw ConfigError("init_gaussian: stddev must be positive");
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = rng.normal() * stddev;
  return t;
}

struct LinearLayer {
  Tensor weight;  // [out x in]
  Tensor bias;    // [out]

  LinearLayer() = default;
  LinearLayer(Tensor w, Tensor b) : weight(std::move(w)), bias(std::move(b)) {
    if (weight.rank() != 2 || bias.rank() != 1 || bias.dim(0) != weight.dim(0)) {
      throw DimensionError("linear layer weight " + weight.shape_string() +
                           " incompatible with bias " + bias.shape_string());
    }
  }

  static LinearLayer gaussian(std::size_t in_dim, std::size_t out_dim, double stddev, Rng& rng) {
    Tensor w = init_gaussian({out_dim, in_dim}, stddev, rng);
    return LinearLayer(std::move(w), Tensor::vector(out_dim));
  }

  std::size_t in_dim() const { return weight.dim(1); }
  std::size_t out_dim() const { return weight.dim(0); }

  friend bool operator==(const LinearLayer&, const LinearLayer&) = default;
};

struct LayerGrad {
  Tensor weight;
  Tensor bias;
};

// Outputs of every layer of a chain for one batch. outputs[j] is the output of
// layer j after its activation; the last entry is the chain output.
struct Taps {
  Tensor input;
  std::vector<Tensor> outputs;

  const Tensor& output() const { return outputs.back(); }
};

// Non-owning view of a layer chain; lets a modality encoder and a shared trunk
// be evaluated as one network without copying parameters.
using LayerChain = std::vector<const LinearLayer*>;

// Rectifier after every layer but the last.
inline Taps chain_forward(const LayerChain& layers, const Tensor& input) {
  if (layers.empty()) throw DimensionError("forward: empty layer chain");
  if (input.rank() != 2) throw DimensionError("forward: input must be [batch x dim]");
  Taps taps;
  taps.input = input;
  taps.outputs.reserve(layers.size());
  const std::size_t batch = input.rows();
  for (std::size_t j = 0; j < layers.size(); ++j) {
    const LinearLayer& layer = *layers[j];
    const Tensor& x = j == 0 ? input : taps.outputs[j - 1];
    if (x.cols() != layer.in_dim()) {
      throw DimensionError("forward: layer " + std::to_string(j) + " expects input dim " +
                           std::to_string(layer.in_dim()) + ", got " + std::to_string(x.cols()));
    }
    const bool rectify = j + 1 < layers.size();
    Tensor y = Tensor::matrix(batch, layer.out_dim());
    for (std::size_t b = 0; b < batch; ++b) {
      const auto xr = x.row(b);
      auto yr = y.row(b);
      for (std::size_t o = 0; o < layer.out_dim(); ++o) {
        const auto wr = layer.weight.row(o);
        double acc = layer.bias[o];
        for (std::size_t i = 0; i < xr.size(); ++i) acc += wr[i] * xr[i];
        yr[o] = rectify ? std::max(acc, 0.0) : acc;
      }
    }
    taps.outputs.push_back(std::move(y));
  }
  return taps;
}

using TapInjections = std::map<std::size_t, Tensor>;

struct BackwardResult {
  std::vector<LayerGrad> layer_grads;  // same order as the chain
  Tensor input_grad;
};

// Backpropagates `output_grad` (gradient w.r.t. the chain output) through the
// chain. injected[j] is added to the gradient arriving at tap j before it is
// propagated further down, so a loss term defined on a hidden activation only
// needs to supply its own derivative.
inline BackwardResult chain_backward(const LayerChain& layers, const Taps& taps,
                                     const Tensor& output_grad,
                                     const TapInjections& injected = {}) {
  if (taps.outputs.size() != layers.size()) {
    throw DimensionError("backward: taps do not belong to this chain");
  }
  if (output_grad.shape() != taps.output().shape()) {
    throw DimensionError("backward: output grad " + output_grad.shape_string() +
                         " does not match output " + taps.output().shape_string());
  }
  for (const auto& [index, grad] : injected) {
    if (index >= layers.size()) {
      throw DimensionError("backward: injection at tap " + std::to_string(index) +
                           " out of range (chain has " + std::to_string(layers.size()) + " taps)");
    }
    if (grad.shape() != taps.outputs[index].shape()) {
      throw DimensionError("backward: injection at tap " + std::to_string(index) + " has shape " +
                           grad.shape_string() + ", tap is " + taps.outputs[index].shape_string());
    }
  }

  BackwardResult result;
  result.layer_grads.resize(layers.size());
  const std::size_t batch = taps.input.rows();
  Tensor upstream = output_grad;
  for (std::size_t j = layers.size(); j-- > 0;) {
    const LinearLayer& layer = *layers[j];
    if (auto it = injected.find(j); it != injected.end()) {
      for (std::size_t i = 0; i < upstream.size(); ++i) upstream[i] += it->second[i];
    }
    if (j + 1 < layers.size()) {
      const Tensor& y = taps.outputs[j];
      for (std::size_t i = 0; i < upstream.size(); ++i) {
        if (!(y[i] > 0.0)) upstream[i] = 0.0;
      }
    }
    const Tensor& x = j == 0 ? taps.input : taps.outputs[j - 1];
    LayerGrad& g = result.layer_grads[j];
    g.weight = Tensor::matrix(layer.out_dim(), layer.in_dim());
    g.bias = Tensor::vector(layer.out_dim());
    Tensor down = Tensor::matrix(batch, layer.in_dim());
    for (std::size_t b = 0; b < batch; ++b) {
      const auto ur = upstream.row(b);
      const auto xr = x.row(b);
      auto dr = down.row(b);
      for (std::size_t o = 0; o < layer.out_dim(); ++o) {
        const double u = ur[o];
        if (u == 0.0) continue;
        g.bias[o] += u;
        auto gw = g.weight.row(o);
        const auto wr = layer.weight.row(o);
        for (std::size_t i = 0; i < xr.size(); ++i) {
          gw[i] += u * xr[i];
          dr[i] += u * wr[i];
        }
      }
    }
    upstream = std::move(down);
  }
  result.input_grad = std::move(upstream);
  return result;
}

class Mlp {
 public:
  Mlp() = default;
  explicit Mlp(std::vector<LinearLayer> layers) : layers_(std::move(layers)) {
    for (std::size_t j = 1; j < layers_.size(); ++j) {
      if (layers_[j].in_dim() != layers_[j - 1].out_dim()) {
        throw DimensionError("mlp: layer " + std::to_string(j) + " input dim " +
                             std::to_string(layers_[j].in_dim()) +
                             " does not chain with previous output dim " +
                             std::to_string(layers_[j - 1].out_dim()));
      }
    }
  }

  // Layers of widths dims[0] -> dims[1] -> ... with N(0, stddev^2) weights.
  static Mlp gaussian(std::span<const std::size_t> dims, double stddev, Rng& rng) {
    std::vector<LinearLayer> layers;
    for (std::size_t j = 0; j + 1 < dims.size(); ++j) {
      layers.push_back(LinearLayer::gaussian(dims[j], dims[j + 1], stddev, rng));
    }
    return Mlp(std::move(layers));
  }

  std::vector<LinearLayer>& layers() { return layers_; }
  const std::vector<LinearLayer>& layers() const { return layers_; }
  std::size_t in_dim() const { return layers_.front().in_dim(); }
  std::size_t out_dim() const { return layers_.back().out_dim(); }

  LayerChain chain() const {
    LayerChain c;
    for (const auto& l : layers_) c.push_back(&l);
    return c;
  }

  Taps forward(const Tensor& input) const { return chain_forward(chain(), input); }

  BackwardResult backward(const Taps& taps, const Tensor& output_grad,
                          const TapInjections& injected = {}) const {
    return chain_backward(chain(), taps, output_grad, injected);
  }

  friend bool operator==(const Mlp&, const Mlp&) = default;

 private:
  std::vector<LinearLayer> layers_;
};

struct LossAndGrad {
  double loss = 0.0;
  Tensor grad;
};

// Mean over the batch of -log softmax(logits)[label], with a max-subtracted
// softmax so large logits do not overflow.
inline LossAndGrad softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  const std::size_t batch = logits.rows();
  const std::size_t classes = logits.cols();
  if (labels.size() != batch) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for batch of " + std::to_string(batch));
  }
  LossAndGrad out{0.0, Tensor::matrix(batch, classes)};
  const double inv_batch = 1.0 / static_cast<double>(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const int label = labels[b];
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw ConfigError("softmax_cross_entropy: label " + std::to_string(label) + " outside [0, " +
                        std::to_string(classes) + ")");
    }
    const auto z = logits.row(b);
    const double zmax = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - zmax);
    const double log_sum = std::log(sum);
    out.loss += -(z[label] - zmax - log_sum);
    auto g = out.grad.row(b);
    for (std::size_t c = 0; c < classes; ++c) {
      g[c] = std::exp(z[c] - zmax - log_sum) * inv_batch;
    }
    g[label] -= inv_batch;
  }
  out.loss *= inv_batch;
  return out;
}

struct SgdOptions {
  double lr = 1e-3;
  double weight_decay = 5e-4;
};

// p <- p - lr * (g + weight_decay * p) on the weights; biases take no decay.
inline void sgd_step(LinearLayer& layer, const LayerGrad& grad, const SgdOptions& opt,
                     std::string_view name = "layer") {
  if (!(opt.lr > 0.0) || opt.weight_decay < 0.0) {
    throw ConfigError("sgd_step: need lr > 0 and weight_decay >= 0");
  }
  if (grad.weight.shape() != layer.weight.shape() || grad.bias.shape() != layer.bias.shape()) {
    throw DimensionError("sgd_step: gradient shape mismatch for " + std::string(name));
  }
  if (!grad.weight.all_finite()) {
    throw Error("sgd_step: non-finite gradient in " + std::string(name) + ".weight");
  }
  if (!grad.bias.all_finite()) {
    throw Error("sgd_step: non-finite gradient in " + std::string(name) + ".bias");
  }
  auto w = layer.weight.data();
  const auto gw = grad.weight.data();
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] -= opt.lr * (gw[i] + opt.weight_decay * w[i]);
  }
  auto b = layer.bias.data();
  const auto gb = grad.bias.data();
  for (std::size_t i = 0; i < b.size(); ++i) b[i] -= opt.lr * gb[i];
}

struct FiniteDiffOptions {
  double epsilon = 1e-6;
  // Check at most this many coordinates, chosen uniformly without replacement
  // when there are more. Zero means all.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
  // Multiple of the rounding bound u * (|f+| + |f-|) / 2e subtracted from each
  // coordinate's error before it is made relative. Zero disables.
  double roundoff_factor = 8.0;
};

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  double raw_max_rel_error = 0.0;  // without the rounding allowance
  std::size_t worst_index = 0;     // flat index over all parameter blocks
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coords_checked = 0;
};

// Compares analytic gradients against (f(p+e) - f(p-e)) / 2e. Parameters are
// perturbed in place and restored. Relative error per coordinate is
// max(0, |a - n| - r) / max(|a|, |n|, 1e-12), where r bounds the rounding
// error of the numeric estimate.
inline FiniteDiffReport finite_diff_check(const std::function<double()>& loss_fn,
                                          std::span<const std::span<double>> params,
                                          std::span<const std::span<const double>> analytic,
                                          const FiniteDiffOptions& opt = {}) {
  if (params.size() != analytic.size()) {
    throw DimensionError("finite_diff_check: parameter/gradient block count mismatch");
  }
  if (opt.epsilon < 1e-8 || opt.epsilon > 1e-4) {
    throw ConfigError("finite_diff_check: epsilon must lie in [1e-8, 1e-4]");
  }
  std::vector<std::pair<std::size_t, std::size_t>> coords;  // (block, offset)
  for (std::size_t b = 0; b < params.size(); ++b) {
    if (params[b].size() != analytic[b].size()) {
      throw DimensionError("finite_diff_check: block " + std::to_string(b) + " size mismatch");
    }
    for (std::size_t i = 0; i < params[b].size(); ++i) coords.emplace_back(b, i);
  }
  std::vector<std::size_t> flat_offset(params.size(), 0);
  for (std::size_t b = 1; b < params.size(); ++b) {
    flat_offset[b] = flat_offset[b - 1] + params[b - 1].size();
  }
  if (opt.max_coords != 0 && coords.size() > opt.max_coords) {
    Rng rng(opt.seed);
    rng.shuffle(std::span(coords));
    coords.resize(opt.max_coords);
  }

  FiniteDiffReport report;
  for (const auto& [b, i] : coords) {
    double& p = params[b][i];
    const double saved = p;
    p = saved + opt.epsilon;
    const double up = loss_fn();
    p = saved - opt.epsilon;
    const double down = loss_fn();
    p = saved;
    const double numeric = (up - down) / (2.0 * opt.epsilon);
    const double a = analytic[b][i];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-12});
    const double rounding = opt.roundoff_factor * std::numeric_limits<double>::epsilon() *
                            (std::abs(up) + std::abs(down)) / (2.0 * opt.epsilon);
    const double raw = std::abs(a - numeric) / denom;
    const double rel = std::max(0.0, std::abs(a - numeric) - rounding) / denom;
    ++report.coords_checked;
    report.raw_max_rel_error =
        std::max(report.raw_max_rel_error, std::isfinite(raw) ? raw : INFINITY);
    if (rel > report.max_rel_error || !std::isfinite(rel)) {
      report.max_rel_error = std::isfinite(rel) ? rel : INFINITY;
      report.worst_index = flat_offset[b] + i;
      report.worst_analytic = a;
      report.worst_numeric = numeric;
    }
  }
  return report;
}

// Mutable parameter blocks of a layer list, weight then bias for each layer.
inline std::vector<std::span<double>> parameter_blocks(std::span<LinearLayer* const> layers) {
  std::vector<std::span<double>> blocks;
  for (LinearLayer* l : layers) {
    blocks.push_back(l->weight.data());
    blocks.push_back(l->bias.data());
  }
  return blocks;
}

inline std::vector<std::span<const double>> gradient_blocks(std::span<const LayerGrad> grads) {
  std::vector<std::span<const double>> blocks;
  for (const auto& g : grads) {
    blocks.push_back(g.weight.data());
    blocks.push_back(g.bias.data());
  }
  return blocks;
}

}  // namespace xmodal
