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

// Multi-branch network with a shared trunk and the training strategies that
// run on it.
//
// Every modality has a private encoder (an MLP from its input size to the
// shared width) feeding one trunk: fc6 -> fc7 -> classifier, rectifiers after
// fc6 and fc7. The encoder output is rectified too and is the first shared
// activation ("shared_in"). A modality's full path is evaluated as a single
// layer chain, so its taps are
//
//   encoder hidden layers ..., shared_in, fc6, fc7, logits
//
// and regularizer gradients enter through chain_backward's tap injections.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "xmodal/binary_io.hpp"
#include "xmodal/density.hpp"
#include "xmodal/error.hpp"
#include "xmodal/netcore.hpp"
#include "xmodal/rng.hpp"
#include "xmodal/synthdata.hpp"
#include "xmodal/tensor.hpp"

namespace xmodal {

enum class LayerId { kSharedIn, kFc6, kFc7, kLogits };

inline constexpr std::array<LayerId, 3> kRegularizedLayers = {LayerId::kSharedIn, LayerId::kFc6,
                                                              LayerId::kFc7};

inline std::string to_string(LayerId id) {
  switch (id) {
    case LayerId::kSharedIn:
      return "shared_in";
    case LayerId::kFc6:
      return "fc6";
    case LayerId::kFc7:
      return "fc7";
    case LayerId::kLogits:
      return "logits";
  }
  return "?";
}

inline LayerId parse_layer_id(std::string_view s) {
  if (s == "shared_in") return LayerId::kSharedIn;
  if (s == "fc6") return LayerId::kFc6;
  if (s == "fc7") return LayerId::kFc7;
  if (s == "logits") return LayerId::kLogits;
  throw ConfigError("unknown layer id '" + std::string(s) + "'");
}

struct ArchConfig {
  std::size_t num_classes = 10;
  std::size_t shared_dim = 32;  // encoder output / trunk input
  std::size_t hidden_dim = 32;  // fc6 and fc7 width
  std::size_t encoder_width = 64;
  std::size_t encoder_layers = 2;
  double encoder_init_std = 0.3;
  double trunk_init_std = 0.25;

  void validate() const {
    if (num_classes < 2 || shared_dim == 0 || hidden_dim == 0 || encoder_width == 0) {
      throw ConfigError("arch: dims must be positive and num_classes >= 2");
    }
    if (encoder_layers < 1) throw ConfigError("arch: encoder_layers must be >= 1");
    if (!(encoder_init_std > 0) || !(trunk_init_std > 0)) {
      throw ConfigError("arch: init std must be positive");
    }
  }
};

struct SharedTrunk {
  LinearLayer fc6;
  LinearLayer fc7;
  LinearLayer classifier;

  static SharedTrunk gaussian(const ArchConfig& arch, Rng& rng) {
    SharedTrunk t;
    t.fc6 = LinearLayer::gaussian(arch.shared_dim, arch.hidden_dim, arch.trunk_init_std, rng);
    t.fc7 = LinearLayer::gaussian(arch.hidden_dim, arch.hidden_dim, arch.trunk_init_std, rng);
    t.classifier =
        LinearLayer::gaussian(arch.hidden_dim, arch.num_classes, arch.trunk_init_std, rng);
    return t;
  }

  std::size_t in_dim() const { return fc6.in_dim(); }
  friend bool operator==(const SharedTrunk&, const SharedTrunk&) = default;
};

struct ModalityBranch {
  std::size_t modality = 0;
  Mlp encoder;

  // input_dim -> width -> ... -> shared_dim
  static ModalityBranch gaussian(std::size_t modality, std::size_t input_dim,
                                 const ArchConfig& arch, Rng& rng) {
    std::vector<std::size_t> dims{input_dim};
    for (std::size_t j = 1; j < arch.encoder_layers; ++j) dims.push_back(arch.encoder_width);
    dims.push_back(arch.shared_dim);
    return {modality, Mlp::gaussian(dims, arch.encoder_init_std, rng)};
  }

  friend bool operator==(const ModalityBranch&, const ModalityBranch&) = default;
};

// Branches keyed by modality over exactly one trunk.
class CrossModalNet {
 public:
  CrossModalNet() = default;
  CrossModalNet(SharedTrunk trunk, std::vector<ModalityBranch> branches)
      : trunk_(std::move(trunk)), branches_(std::move(branches)) {
    for (const auto& b : branches_) {
      if (b.encoder.out_dim() != trunk_.in_dim()) {
        throw DimensionError("branch for modality " + std::to_string(b.modality) + " outputs " +
                             std::to_string(b.encoder.out_dim()) + " dims, trunk expects " +
                             std::to_string(trunk_.in_dim()));
      }
    }
  }

  SharedTrunk& trunk() { return trunk_; }
  const SharedTrunk& trunk() const { return trunk_; }
  std::vector<ModalityBranch>& branches() { return branches_; }
  const std::vector<ModalityBranch>& branches() const { return branches_; }

  bool has_branch(std::size_t modality) const { return find(modality) != nullptr; }

  ModalityBranch& branch(std::size_t modality) {
    return const_cast<ModalityBranch&>(std::as_const(*this).branch(modality));
  }
  const ModalityBranch& branch(std::size_t modality) const {
    const ModalityBranch* b = find(modality);
    if (!b) throw ConfigError("network has no branch for modality " + std::to_string(modality));
    return *b;
  }

  void add_branch(ModalityBranch b) {
    if (has_branch(b.modality)) throw ConfigError("duplicate branch");
    if (b.encoder.out_dim() != trunk_.in_dim()) throw DimensionError("branch/trunk dim mismatch");
    branches_.push_back(std::move(b));
  }

  // Encoder layers followed by fc6, fc7, classifier. The trunk entries point at
  // this net's single trunk for every modality.
  LayerChain chain(std::size_t modality) const {
    LayerChain c = branch(modality).encoder.chain();
    c.push_back(&trunk_.fc6);
    c.push_back(&trunk_.fc7);
    c.push_back(&trunk_.classifier);
    return c;
  }

  // Mutable layers in chain order, with their parameter ids.
  std::vector<std::pair<std::string, LinearLayer*>> named_layers(std::size_t modality) {
    std::vector<std::pair<std::string, LinearLayer*>> out;
    auto& enc = branch(modality).encoder.layers();
    for (std::size_t j = 0; j < enc.size(); ++j) {
      out.emplace_back(encoder_param_id(modality, j), &enc[j]);
    }
    out.emplace_back("trunk.fc6", &trunk_.fc6);
    out.emplace_back("trunk.fc7", &trunk_.fc7);
    out.emplace_back("trunk.classifier", &trunk_.classifier);
    return out;
  }

  std::size_t tap_index(std::size_t modality, LayerId id) const {
    const std::size_t enc = branch(modality).encoder.layers().size();
    return enc - 1 + static_cast<std::size_t>(id);
  }

  Taps forward(std::size_t modality, const Tensor& x) const {
    return chain_forward(chain(modality), x);
  }

  static std::string encoder_param_id(std::size_t modality, std::size_t layer) {
    return "encoder." + std::to_string(modality) + "." + std::to_string(layer);
  }

  friend bool operator==(const CrossModalNet&, const CrossModalNet&) = default;

 private:
  const ModalityBranch* find(std::size_t modality) const {
    for (const auto& b : branches_) {
      if (b.modality == modality) return &b;
    }
    return nullptr;
  }

  SharedTrunk trunk_;
  std::vector<ModalityBranch> branches_;
};

enum class StrategyKind {
  kBlIndividual,
  kBlSharedScratch,
  kBlSharedUpper,
  kATuneFrozen,
  kATuneFree,
  kBGauss,
  kBGmm,
  kCJoint,
};

inline constexpr std::array<StrategyKind, 8> kAllStrategies = {
    StrategyKind::kBlIndividual, StrategyKind::kBlSharedScratch, StrategyKind::kBlSharedUpper,
    StrategyKind::kATuneFrozen,  StrategyKind::kATuneFree,       StrategyKind::kBGauss,
    StrategyKind::kBGmm,         StrategyKind::kCJoint};

inline std::string to_string(StrategyKind k) {
  switch (k) {
    case StrategyKind::kBlIndividual:
      return "bl_individual";
    case StrategyKind::kBlSharedScratch:
      return "bl_shared_scratch";
    case StrategyKind::kBlSharedUpper:
      return "bl_shared_upper";
    case StrategyKind::kATuneFrozen:
      return "a_tune_frozen";
    case StrategyKind::kATuneFree:
      return "a_tune_free";
    case StrategyKind::kBGauss:
      return "b_gauss";
    case StrategyKind::kBGmm:
      return "b_gmm";
    case StrategyKind::kCJoint:
      return "c_joint";
  }
  return "?";
}

// Row labels in the style of the published tables.
inline std::string display_name(StrategyKind k) {
  switch (k) {
    case StrategyKind::kBlIndividual:
      return "BL-Individual";
    case StrategyKind::kBlSharedScratch:
      return "BL-Shared-Upper-Scratch";
    case StrategyKind::kBlSharedUpper:
      return "BL-Shared-Upper";
    case StrategyKind::kATuneFrozen:
      return "A: Tune";
    case StrategyKind::kATuneFree:
      return "A: Tune (Free)";
    case StrategyKind::kBGauss:
      return "B: StatReg (Gaussian)";
    case StrategyKind::kBGmm:
      return "B: StatReg (GMM)";
    case StrategyKind::kCJoint:
      return "C: Tune + StatReg (GMM)";
  }
  return "?";
}

inline StrategyKind parse_strategy(std::string_view s) {
  for (StrategyKind k : kAllStrategies) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown strategy '" + std::string(s) + "'");
}

enum class DensityKind { kGaussian, kGmm };

inline bool uses_density(StrategyKind k) {
  return k == StrategyKind::kBGauss || k == StrategyKind::kBGmm || k == StrategyKind::kCJoint;
}

inline bool uses_anchor(StrategyKind k) { return k != StrategyKind::kBlSharedScratch; }

inline DensityKind density_kind_for(StrategyKind k) {
  return k == StrategyKind::kBGauss ? DensityKind::kGaussian : DensityKind::kGmm;
}

struct CurriculumSchedule {
  std::size_t freeze_iters = 3000;
  std::size_t total_iters = 6000;
  double lr = 1e-3;
  std::size_t batch_size = 32;
  double weight_decay = 5e-4;

  void validate() const {
    if (freeze_iters > total_iters) throw ConfigError("schedule: freeze_iters > total_iters");
    if (!(lr > 0)) throw ConfigError("schedule: lr must be positive");
    if (batch_size == 0) throw ConfigError("schedule: batch_size must be positive");
    if (weight_decay < 0) throw ConfigError("schedule: weight_decay must be nonnegative");
  }
};

struct RegConfig {
  std::map<LayerId, double> lambdas = {
      {LayerId::kSharedIn, 0.01}, {LayerId::kFc6, 0.01}, {LayerId::kFc7, 0.01}};
  std::size_t num_components = 20;
  bool regularize_anchor = false;

  void validate() const {
    for (const auto& [layer, lambda] : lambdas) {
      if (layer == LayerId::kLogits) throw ConfigError("reg: logits cannot be regularized");
      if (!(lambda >= 0)) throw ConfigError("reg: lambda for " + to_string(layer) + " < 0");
    }
    if (num_components == 0) throw ConfigError("reg: K must be >= 1");
  }
};

struct StrategySpec {
  StrategyKind kind = StrategyKind::kCJoint;
  CurriculumSchedule curriculum;
  RegConfig reg;

  void validate() const {
    curriculum.validate();
    reg.validate();
    if ((kind == StrategyKind::kATuneFree || kind == StrategyKind::kCJoint) &&
        curriculum.freeze_iters == 0) {
      throw ConfigError(to_string(kind) + " needs freeze_iters > 0");
    }
  }
};

enum class Phase { kFrozen, kFree };

inline Phase phase_at(const StrategySpec& s, std::size_t iter) {
  switch (s.kind) {
    case StrategyKind::kATuneFrozen:
      return Phase::kFrozen;
    case StrategyKind::kATuneFree:
    case StrategyKind::kCJoint:
      return iter < s.curriculum.freeze_iters ? Phase::kFrozen : Phase::kFree;
    default:
      return Phase::kFree;
  }
}

// Parameter ids updated for a batch of `modality` in the given phase. Trunk ids
// refer to the trunk of whichever network serves that modality.
inline std::set<std::string> trainable_set(StrategyKind kind, Phase phase, std::size_t modality,
                                           std::size_t encoder_layers) {
  std::set<std::string> ids;
  for (std::size_t j = 0; j < encoder_layers; ++j) {
    ids.insert(CrossModalNet::encoder_param_id(modality, j));
  }
  const bool curriculum = kind == StrategyKind::kATuneFrozen || kind == StrategyKind::kATuneFree ||
                          kind == StrategyKind::kCJoint;
  if (!(curriculum && phase == Phase::kFrozen)) {
    ids.insert({"trunk.fc6", "trunk.fc7", "trunk.classifier"});
  }
  return ids;
}

// Whether the activation penalty is on for this batch.
inline bool regularizer_active(const StrategySpec& s, Phase phase, std::size_t modality,
                               std::size_t anchor) {
  if (modality == anchor && !s.reg.regularize_anchor) return false;
  switch (s.kind) {
    case StrategyKind::kBGauss:
    case StrategyKind::kBGmm:
      return true;
    case StrategyKind::kCJoint:
      return phase == Phase::kFree;
    default:
      return false;
  }
}

using PreparedDensitySet = std::map<LayerId, PreparedDensity>;

inline PreparedDensitySet prepare_densities(const LayerDensitySet& set) {
  PreparedDensitySet out;
  for (const auto& [name, model] : set) out.emplace(parse_layer_id(name), PreparedDensity(model));
  return out;
}

struct ObjectiveResult {
  double loss = 0.0;  // ce + sum_i lambda_i * reg[i]
  double ce = 0.0;
  std::map<LayerId, double> reg;  // batch-mean penalty per regularized layer
  std::map<LayerId, double> lambdas;
  BackwardResult backward;  // chain order
};

// Mean softmax cross-entropy plus sum_i lambda_i * mean_n R_i(h_i(x_n)) on one
// single-modality batch. Layers with lambda == 0 are skipped entirely, so an
// all-zero lambda map reproduces the unregularized objective bit for bit.
inline ObjectiveResult regularized_objective(const CrossModalNet& net, std::size_t modality,
                                             const Tensor& x, std::span<const int> labels,
                                             const PreparedDensitySet* densities,
                                             const std::map<LayerId, double>& lambdas) {
  const LayerChain chain = net.chain(modality);
  const Taps taps = chain_forward(chain, x);
  LossAndGrad ce = softmax_cross_entropy(taps.output(), labels);
  ObjectiveResult out;
  out.ce = ce.loss;
  out.loss = ce.loss;
  TapInjections inject;
  const std::size_t batch = x.rows();
  const double inv_batch = 1.0 / static_cast<double>(batch);
  for (const auto& [layer, lambda] : lambdas) {
    if (lambda == 0.0) continue;
    if (layer == LayerId::kLogits) throw ConfigError("logits cannot be regularized");
    const PreparedDensity* density = nullptr;
    if (densities) {
      if (auto it = densities->find(layer); it != densities->end()) density = &it->second;
    }
    if (!density) {
      throw ConfigError("lambda for " + to_string(layer) + " is " + std::to_string(lambda) +
                        " but no density was fitted for it");
    }
    const std::size_t tap = net.tap_index(modality, layer);
    const Tensor& h = taps.outputs[tap];
    Tensor g = Tensor::matrix(batch, h.cols());
    double sum = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      auto gr = g.row(b);
      sum += density->penalty(h.row(b), gr);
      for (double& v : gr) v *= lambda * inv_batch;
    }
    const double mean = sum * inv_batch;
    out.reg[layer] = mean;
    out.lambdas[layer] = lambda;
    out.loss += lambda * mean;
    inject.emplace(tap, std::move(g));
  }
  out.backward = chain_backward(chain, taps, ce.grad, inject);
  return out;
}

// Networks produced by one strategy. Shared strategies hold a single network
// with a branch per modality; bl_individual holds one private network per
// modality.
struct CrossModalModel {
  std::string strategy;  // strategy name, or "anchor"
  std::vector<CrossModalNet> nets;
  std::vector<std::size_t> net_of_modality;

  const CrossModalNet& net_for(std::size_t modality) const {
    if (modality >= net_of_modality.size()) {
      throw ConfigError("model has no network for modality " + std::to_string(modality));
    }
    return nets.at(net_of_modality[modality]);
  }
  CrossModalNet& net_for(std::size_t modality) {
    return const_cast<CrossModalNet&>(std::as_const(*this).net_for(modality));
  }
  std::size_t num_modalities() const { return net_of_modality.size(); }

  friend bool operator==(const CrossModalModel&, const CrossModalModel&) = default;
};

// Row-order-preserving activations of `x` at `layer`.
inline Tensor extract_features(const CrossModalModel& model, std::size_t modality, const Tensor& x,
                               LayerId layer) {
  const CrossModalNet& net = model.net_for(modality);
  const Taps taps = net.forward(modality, x);
  return taps.outputs[net.tap_index(modality, layer)];
}

// Activations at each requested layer over at most max_samples rows of
// `split`. With fewer rows than requested, every row is used; otherwise a
// random subset (kept in original order) is drawn from rng.
inline std::map<LayerId, Tensor> collect_activations(const CrossModalNet& net, std::size_t modality,
                                                     const SplitData& split,
                                                     std::span<const LayerId> layers,
                                                     std::size_t max_samples, Rng& rng) {
  std::vector<std::size_t> rows(split.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  if (max_samples > 0 && max_samples < rows.size()) {
    rng.shuffle(std::span(rows));
    rows.resize(max_samples);
    std::sort(rows.begin(), rows.end());
  }
  const Taps taps = net.forward(modality, gather_rows(split.features, rows));
  std::map<LayerId, Tensor> out;
  for (LayerId id : layers) out[id] = taps.outputs[net.tap_index(modality, id)];
  return out;
}

struct DensityFitOptions {
  DensityKind kind = DensityKind::kGmm;
  std::size_t num_components = 8;
  std::size_t max_samples = 0;  // 0 = all anchor training rows
  EmOptions em;
};

// One density per regularized layer, fitted on anchor-network activations of
// the anchor training split.
inline LayerDensitySet fit_layer_densities(const CrossModalNet& anchor_net, std::size_t anchor,
                                           const SplitData& anchor_train,
                                           const DensityFitOptions& opt, Rng& rng) {
  Rng sample_rng = rng.fork(1);
  const auto acts = collect_activations(anchor_net, anchor, anchor_train, kRegularizedLayers,
                                        opt.max_samples, sample_rng);
  LayerDensitySet set;
  std::uint64_t stream = 10;
  for (const auto& [layer, samples] : acts) {
    if (opt.kind == DensityKind::kGaussian) {
      set[to_string(layer)] = fit_gaussian(samples, opt.em.variance_floor);
    } else {
      Rng em_rng = rng.fork(stream++);
      set[to_string(layer)] = fit_gmm_em(samples, opt.num_components, em_rng, opt.em).model;
    }
  }
  return set;
}

struct TrainLogEntry {
  std::size_t iteration = 0;
  std::string modality;
  std::string phase;
  double ce_loss = 0.0;
  std::map<LayerId, double> reg;
  std::map<LayerId, double> lambdas;
  double total = 0.0;
};

struct TrainOptions {
  std::size_t log_every = 10;   // 0 disables logging
  std::size_t trace_every = 0;  // parameter-hash trace period, 0 disables
  // Called after every completed iteration with the current model.
  std::function<void(std::size_t, const CrossModalModel&)> on_iteration;
};

struct TrainResult {
  CrossModalModel model;
  std::vector<TrainLogEntry> log;
  std::optional<CrossModalModel> end_of_frozen_phase;
  std::vector<std::uint64_t> trace;  // parameter hashes (see TrainOptions)
};

inline std::uint64_t parameter_hash(const CrossModalModel& model) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](const Tensor& t) {
    for (double v : t.storage()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      h = (h ^ bits) * 0x100000001b3ULL;
    }
  };
  for (const auto& net : model.nets) {
    for (const auto& b : net.branches())
      for (const auto& l : b.encoder.layers()) {
        mix(l.weight);
        mix(l.bias);
      }
    for (const auto* l : {&net.trunk().fc6, &net.trunk().fc7, &net.trunk().classifier}) {
      mix(l->weight);
      mix(l->bias);
    }
  }
  return h;
}

// Cycles through a shuffled permutation of [0, n), reshuffling per epoch.
class EpochSampler {
 public:
  EpochSampler(std::size_t n, Rng rng) : order_(n), rng_(std::move(rng)) {
    for (std::size_t i = 0; i < n; ++i) order_[i] = i;
    pos_ = n;
  }

  std::vector<std::size_t> next(std::size_t batch) {
    std::vector<std::size_t> out;
    out.reserve(batch);
    while (out.size() < batch) {
      if (pos_ == order_.size()) {
        rng_.shuffle(std::span(order_));
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  Rng rng_;
  std::size_t pos_;
};

namespace detail {

inline std::vector<int> gather_labels(const std::vector<int>& labels,
                                      std::span<const std::size_t> idx) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(labels[i]);
  return out;
}

inline void apply_step(CrossModalNet& net, std::size_t modality, const BackwardResult& grads,
                       const std::set<std::string>& trainable, const SgdOptions& sgd) {
  auto layers = net.named_layers(modality);
  for (std::size_t j = 0; j < layers.size(); ++j) {
    if (trainable.contains(layers[j].first)) {
      sgd_step(*layers[j].second, grads.layer_grads[j], sgd, layers[j].first);
    }
  }
}

}  // namespace detail

// Plain supervised training of the anchor modality's full network.
inline CrossModalNet train_anchor(const ModalityData& anchor_data, std::size_t anchor,
                                  const ArchConfig& arch, const CurriculumSchedule& sched,
                                  Rng& rng) {
  arch.validate();
  sched.validate();
  const SplitData& train = anchor_data.train;
  std::set<int> present(train.labels.begin(), train.labels.end());
  for (std::size_t c = 0; c < arch.num_classes; ++c) {
    if (!present.contains(static_cast<int>(c))) {
      throw ConfigError("anchor training split has no examples of class " + std::to_string(c));
    }
  }
  Rng init_rng = rng.fork(1);
  SharedTrunk trunk = SharedTrunk::gaussian(arch, init_rng);
  CrossModalNet net(std::move(trunk),
                    {ModalityBranch::gaussian(anchor, anchor_data.input_dim(), arch, init_rng)});
  EpochSampler sampler(train.size(), rng.fork(2));
  const SgdOptions sgd{sched.lr, sched.weight_decay};
  const std::set<std::string> all =
      trainable_set(StrategyKind::kBlSharedScratch, Phase::kFree, anchor, arch.encoder_layers);
  for (std::size_t iter = 0; iter < sched.total_iters; ++iter) {
    const auto idx = sampler.next(sched.batch_size);
    const Tensor x = gather_rows(train.features, idx);
    const auto y = detail::gather_labels(train.labels, idx);
    const ObjectiveResult obj = regularized_objective(net, anchor, x, y, nullptr, {});
    if (!std::isfinite(obj.loss)) throw DivergenceError("anchor training diverged", iter);
    detail::apply_step(net, anchor, obj.backward, all, sgd);
  }
  return net;
}

// The network(s) a strategy starts from. `anchor_net` may be null only for
// bl_shared_scratch. Encoders of non-anchor modalities are freshly drawn with
// the encoder init std, except that bl_individual copies the anchor encoder
// into a private network when input sizes agree.
inline CrossModalModel initial_model(StrategyKind kind, const CrossModalDataset& data,
                                     const CrossModalNet* anchor_net, const ArchConfig& arch,
                                     const Rng& rng) {
  arch.validate();
  const std::size_t anchor = data.anchor;
  if (uses_anchor(kind) && !anchor_net) {
    throw MissingArtifactError(to_string(kind) + " needs a trained anchor network");
  }
  CrossModalModel model;
  model.strategy = to_string(kind);
  const std::size_t m_count = data.num_modalities();
  auto fresh_branch = [&](std::size_t m) {
    Rng r = rng.fork(300 + m);
    return ModalityBranch::gaussian(m, data.modalities[m].input_dim(), arch, r);
  };
  if (kind == StrategyKind::kBlIndividual) {
    const ModalityBranch& anchor_branch = anchor_net->branch(anchor);
    for (std::size_t m = 0; m < m_count; ++m) {
      ModalityBranch b;
      if (m == anchor) {
        b = anchor_branch;
      } else if (data.modalities[m].input_dim() == anchor_branch.encoder.in_dim()) {
        b = anchor_branch;
        b.modality = m;
      } else {
        b = fresh_branch(m);
      }
      model.nets.emplace_back(anchor_net->trunk(), std::vector<ModalityBranch>{std::move(b)});
      model.net_of_modality.push_back(m);
    }
    return model;
  }
  std::vector<ModalityBranch> branches;
  SharedTrunk trunk;
  if (kind == StrategyKind::kBlSharedScratch) {
    Rng r = rng.fork(400);
    trunk = SharedTrunk::gaussian(arch, r);
    for (std::size_t m = 0; m < m_count; ++m) branches.push_back(fresh_branch(m));
  } else {
    trunk = anchor_net->trunk();
    for (std::size_t m = 0; m < m_count; ++m) {
      branches.push_back(m == anchor ? anchor_net->branch(anchor) : fresh_branch(m));
    }
  }
  model.nets.emplace_back(std::move(trunk), std::move(branches));
  model.net_of_modality.assign(m_count, 0);
  return model;
}

// Runs one strategy. Iterations are round-robin cycles: in each, every
// modality in index order contributes one batch and one SGD step on the
// parameters trainable_set allows for it.
inline TrainResult train_strategy(const StrategySpec& spec, const CrossModalDataset& data,
                                  const CrossModalNet* anchor_net, const ArchConfig& arch,
                                  const LayerDensitySet* densities, const Rng& rng,
                                  const TrainOptions& opt = {}) {
  spec.validate();
  const std::size_t m_count = data.num_modalities();
  for (std::size_t m = 0; m < m_count; ++m) {
    if (data.modalities[m].train.size() == 0) {
      throw ConfigError("modality " + data.modalities[m].name + " has no training data");
    }
  }
  PreparedDensitySet prepared;
  if (uses_density(spec.kind)) {
    if (!densities) throw MissingArtifactError(to_string(spec.kind) + " needs fitted densities");
    for (const auto& [layer, lambda] : spec.reg.lambdas) {
      if (lambda > 0 && !densities->contains(to_string(layer))) {
        throw ConfigError("no density fitted for layer " + to_string(layer));
      }
    }
    prepared = prepare_densities(*densities);
  }

  TrainResult result;
  result.model = initial_model(spec.kind, data, anchor_net, arch, rng);
  CrossModalModel& model = result.model;
  std::vector<EpochSampler> samplers;
  for (std::size_t m = 0; m < m_count; ++m) {
    samplers.emplace_back(data.modalities[m].train.size(), rng.fork(200 + m));
  }
  const SgdOptions sgd{spec.curriculum.lr, spec.curriculum.weight_decay};
  const std::map<LayerId, double> no_lambdas;
  const std::size_t total = spec.curriculum.total_iters;
  const bool has_boundary =
      spec.kind == StrategyKind::kATuneFree || spec.kind == StrategyKind::kCJoint;

  for (std::size_t iter = 0; iter < total; ++iter) {
    if (has_boundary && iter == spec.curriculum.freeze_iters) {
      result.end_of_frozen_phase = model;
    }
    const Phase phase = phase_at(spec, iter);
    for (std::size_t m = 0; m < m_count; ++m) {
      const SplitData& train = data.modalities[m].train;
      const auto idx = samplers[m].next(spec.curriculum.batch_size);
      const Tensor x = gather_rows(train.features, idx);
      const auto y = detail::gather_labels(train.labels, idx);
      const bool reg_on = regularizer_active(spec, phase, m, data.anchor);
      CrossModalNet& net = model.net_for(m);
      const ObjectiveResult obj = regularized_objective(net, m, x, y, reg_on ? &prepared : nullptr,
                                                        reg_on ? spec.reg.lambdas : no_lambdas);
      if (!std::isfinite(obj.loss)) {
        throw DivergenceError(to_string(spec.kind) + " loss is not finite",
                              static_cast<std::int64_t>(iter));
      }
      detail::apply_step(net, m, obj.backward,
                         trainable_set(spec.kind, phase, m, arch.encoder_layers), sgd);
      if (opt.log_every && (iter % opt.log_every == 0 || iter + 1 == total)) {
        result.log.push_back({iter, data.modalities[m].name,
                              phase == Phase::kFrozen ? "frozen" : "free", obj.ce, obj.reg,
                              obj.lambdas, obj.loss});
      }
    }
    if (opt.trace_every && (iter % opt.trace_every == 0 || iter + 1 == total)) {
      result.trace.push_back(parameter_hash(model));
    }
    if (opt.on_iteration) opt.on_iteration(iter, model);
  }
  if (has_boundary && !result.end_of_frozen_phase) result.end_of_frozen_phase = model;
  return result;
}

inline double classification_accuracy(const CrossModalModel& model, std::size_t modality,
                                      const SplitData& split) {
  if (split.size() == 0) throw ConfigError("accuracy on an empty split");
  const Tensor logits = extract_features(model, modality, split.features, LayerId::kLogits);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < split.size(); ++i) {
    const auto row = logits.row(i);
    const auto best = std::max_element(row.begin(), row.end()) - row.begin();
    correct += best == split.labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(split.size());
}

// XMCK1 checkpoint, little-endian:
//   "XMCK1" 5 bytes, version u16 (= 1)
//   strategy name                  u32 length + bytes
//   arch header                    shared_dim u32, hidden_dim u32, num_classes u32
//   modality count M u32, net index per modality u32[M]
//   net count u32, then per net:
//     branch count u32, per branch: modality u32, layer count u32, layers
//     trunk: fc6, fc7, classifier layers
//   layer: out u32, in u32, weight f64[out*in] row-major, bias f64[out]
inline constexpr std::string_view kCheckpointMagic = "XMCK1";
inline constexpr std::uint16_t kCheckpointVersion = 1;

namespace detail {

inline void put_layer(BinaryWriter& w, const LinearLayer& l) {
  w.put(static_cast<std::uint32_t>(l.out_dim()));
  w.put(static_cast<std::uint32_t>(l.in_dim()));
  for (double v : l.weight.storage()) w.put(v);
  for (double v : l.bias.storage()) w.put(v);
}

inline LinearLayer get_layer(BinaryReader& r) {
  const auto out = r.get<std::uint32_t>();
  const auto in = r.get<std::uint32_t>();
  Tensor w = Tensor::matrix(out, in);
  for (double& v : w.storage()) v = r.get<double>();
  Tensor b = Tensor::vector(out);
  for (double& v : b.storage()) v = r.get<double>();
  return LinearLayer(std::move(w), std::move(b));
}

}  // namespace detail

inline BinaryWriter encode_checkpoint(const CrossModalModel& model) {
  BinaryWriter w;
  w.put_bytes(kCheckpointMagic);
  w.put(kCheckpointVersion);
  w.put_string(model.strategy);
  const SharedTrunk& t0 = model.nets.at(0).trunk();
  w.put(static_cast<std::uint32_t>(t0.fc6.in_dim()));
  w.put(static_cast<std::uint32_t>(t0.fc6.out_dim()));
  w.put(static_cast<std::uint32_t>(t0.classifier.out_dim()));
  w.put(static_cast<std::uint32_t>(model.net_of_modality.size()));
  for (auto n : model.net_of_modality) w.put(static_cast<std::uint32_t>(n));
  w.put(static_cast<std::uint32_t>(model.nets.size()));
  for (const auto& net : model.nets) {
    w.put(static_cast<std::uint32_t>(net.branches().size()));
    for (const auto& b : net.branches()) {
      w.put(static_cast<std::uint32_t>(b.modality));
      w.put(static_cast<std::uint32_t>(b.encoder.layers().size()));
      for (const auto& l : b.encoder.layers()) detail::put_layer(w, l);
    }
    detail::put_layer(w, net.trunk().fc6);
    detail::put_layer(w, net.trunk().fc7);
    detail::put_layer(w, net.trunk().classifier);
  }
  return w;
}

inline CrossModalModel decode_checkpoint(BinaryReader& r) {
  r.expect_magic(kCheckpointMagic);
  const std::size_t version_at = r.offset();
  if (r.get<std::uint16_t>() != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version", version_at);
  }
  CrossModalModel model;
  model.strategy = r.get_string();
  const std::size_t arch_at = r.offset();
  const auto shared_dim = r.get<std::uint32_t>();
  const auto hidden_dim = r.get<std::uint32_t>();
  const auto classes = r.get<std::uint32_t>();
  model.net_of_modality.resize(r.get<std::uint32_t>());
  for (auto& n : model.net_of_modality) n = r.get<std::uint32_t>();
  const auto net_count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < net_count; ++i) {
    std::vector<ModalityBranch> branches(r.get<std::uint32_t>());
    for (auto& b : branches) {
      b.modality = r.get<std::uint32_t>();
      std::vector<LinearLayer> layers(r.get<std::uint32_t>());
      for (auto& l : layers) l = detail::get_layer(r);
      b.encoder = Mlp(std::move(layers));
    }
    SharedTrunk t;
    t.fc6 = detail::get_layer(r);
    t.fc7 = detail::get_layer(r);
    t.classifier = detail::get_layer(r);
    if (t.fc6.in_dim() != shared_dim || t.fc6.out_dim() != hidden_dim ||
        t.classifier.out_dim() != classes) {
      throw FormatError("trunk disagrees with arch header", arch_at);
    }
    model.nets.emplace_back(std::move(t), std::move(branches));
  }
  for (auto n : model.net_of_modality) {
    if (n >= model.nets.size()) throw FormatError("net index out of range", arch_at);
  }
  r.expect_end();
  return model;
}

inline void write_checkpoint(const CrossModalModel& model, const std::filesystem::path& path) {
  encode_checkpoint(model).write_file(path);
}

inline CrossModalModel read_checkpoint(const std::filesystem::path& path) {
  BinaryReader r = BinaryReader::from_file(path);
  return decode_checkpoint(r);
}

// Wraps a single anchor network so it can be checkpointed like a model.
inline CrossModalModel anchor_model(const CrossModalNet& net, std::size_t num_modalities) {
  CrossModalModel m;
  m.strategy = "anchor";
  m.nets = {net};
  m.net_of_modality.assign(num_modalities, 0);
  return m;
}

}  // namespace xmodal
