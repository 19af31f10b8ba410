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

// Finite-difference verification suite: dense chains, softmax cross-entropy,
// density penalties, and the full regularized objective with a Gaussian and
// two mixture densities attached to the three shared taps.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "xmodal/crossmodal.hpp"
#include "xmodal/density.hpp"
#include "xmodal/netcore.hpp"
#include "xmodal/rng.hpp"

namespace xmodal {

struct GradcheckOptions {
  double tolerance = 1e-5;
  double epsilon = 1e-6;
  std::size_t num_seeds = 10;
  std::uint64_t base_seed = 0;
  // Small network for the full-objective cases.
  std::size_t input_dim = 6;
  std::size_t shared_dim = 8;
  std::size_t hidden_dim = 8;
  std::size_t num_classes = 4;
  std::size_t num_components = 3;
  std::size_t batch = 5;
  double lambda = 0.5;
  // Rectifier inputs closer than this to zero make a point ineligible.
  double kink_margin = 1e-4;
  // Test hook: edits analytic gradients of full-objective cases before checking.
  std::function<void(std::vector<LayerGrad>&)> corrupt;
};

struct GradcheckCase {
  std::string name;
  std::uint64_t seed = 0;
  FiniteDiffReport report;
  std::string worst_parameter;  // "<block> [offset]"
  bool passed = false;
};

struct GradcheckReport {
  double tolerance = 0.0;
  std::vector<GradcheckCase> cases;

  bool passed() const {
    return std::all_of(cases.begin(), cases.end(), [](const auto& c) { return c.passed; });
  }
  const GradcheckCase& worst() const {
    return *std::max_element(cases.begin(), cases.end(), [](const auto& a, const auto& b) {
      return a.report.max_rel_error < b.report.max_rel_error;
    });
  }
  std::string format() const {
    std::ostringstream out;
    out.precision(3);
    out << std::scientific;
    for (const auto& c : cases) {
      out << (c.passed ? "PASS " : "FAIL ") << c.name << " seed=" << c.seed
          << " coords=" << c.report.coords_checked << " max_rel_err=" << c.report.max_rel_error
          << " raw=" << c.report.raw_max_rel_error;
      if (!c.passed) {
        out << " worst=" << c.worst_parameter << " analytic=" << c.report.worst_analytic
            << " numeric=" << c.report.worst_numeric;
      }
      out << "\n";
    }
    if (!cases.empty()) {
      const auto& w = worst();
      double raw = 0.0;
      for (const auto& c : cases) raw = std::max(raw, c.report.raw_max_rel_error);
      out << "worst: " << w.name << " seed=" << w.seed << " " << w.worst_parameter
          << " max_rel_err=" << w.report.max_rel_error << " (tolerance " << tolerance
          << "); without rounding allowance " << raw << "\n";
    }
    return out.str();
  }
};

namespace detail {

inline Tensor random_matrix(std::size_t rows, std::size_t cols, double scale, Rng& rng) {
  Tensor t = Tensor::matrix(rows, cols);
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

// Smallest |pre-activation| over every rectified unit of the chain.
inline double rectifier_margin(const LayerChain& chain, const Tensor& x) {
  const Taps taps = chain_forward(chain, x);
  double margin = INFINITY;
  for (std::size_t j = 0; j + 1 < chain.size(); ++j) {
    const Tensor& in = j == 0 ? x : taps.outputs[j - 1];
    const LinearLayer& l = *chain[j];
    for (std::size_t b = 0; b < in.rows(); ++b) {
      const auto xr = in.row(b);
      for (std::size_t o = 0; o < l.out_dim(); ++o) {
        double z = l.bias[o];
        const auto wr = l.weight.row(o);
        for (std::size_t i = 0; i < xr.size(); ++i) z += wr[i] * xr[i];
        margin = std::min(margin, std::abs(z));
      }
    }
  }
  return margin;
}

// Draws batches until every rectifier input clears the margin.
inline Tensor smooth_batch(const LayerChain& chain, std::size_t batch, std::size_t dim,
                           double margin, Rng& rng) {
  for (int attempt = 0; attempt < 1000; ++attempt) {
    Tensor x = random_matrix(batch, dim, 1.0, rng);
    if (rectifier_margin(chain, x) > margin) return x;
  }
  throw GradientCheckError("gradcheck: could not draw a batch away from rectifier kinks");
}

inline DiagonalGaussian random_gaussian(std::size_t dim, Rng& rng) {
  DiagonalGaussian g{Tensor::vector(dim), Tensor::vector(dim)};
  for (double& v : g.mean.data()) v = rng.uniform(0.0, 1.5);
  for (double& v : g.variance.data()) v = rng.uniform(0.3, 1.5);
  return g;
}

inline DiagonalGmm random_gmm(std::size_t dim, std::size_t k, Rng& rng) {
  DiagonalGmm m{Tensor::vector(k), {}};
  double total = 0.0;
  for (double& w : m.weights.data()) total += (w = rng.uniform(0.2, 1.0));
  for (double& w : m.weights.data()) w /= total;
  for (std::size_t i = 0; i < k; ++i) m.components.push_back(random_gaussian(dim, rng));
  return m;
}

inline std::string locate(const std::vector<std::string>& block_names,
                          const std::vector<std::size_t>& block_sizes, std::size_t flat) {
  for (std::size_t b = 0; b < block_sizes.size(); ++b) {
    if (flat < block_sizes[b]) return block_names[b] + " [" + std::to_string(flat) + "]";
    flat -= block_sizes[b];
  }
  return "?";
}

inline GradcheckCase finish_case(std::string name, std::uint64_t seed, FiniteDiffReport r,
                                 const std::vector<std::string>& names,
                                 const std::vector<std::size_t>& sizes, double tol) {
  GradcheckCase c{std::move(name), seed, r, locate(names, sizes, r.worst_index), false};
  c.passed = std::isfinite(r.max_rel_error) && r.max_rel_error < tol;
  return c;
}

inline GradcheckCase check_layers(std::string name, std::uint64_t seed,
                                  std::vector<std::pair<std::string, LinearLayer*>> layers,
                                  const std::vector<LayerGrad>& grads,
                                  const std::function<double()>& loss,
                                  const GradcheckOptions& opt) {
  std::vector<LinearLayer*> ptrs;
  std::vector<std::string> names;
  std::vector<std::size_t> sizes;
  for (auto& [id, l] : layers) {
    ptrs.push_back(l);
    names.push_back(id + ".weight");
    sizes.push_back(l->weight.size());
    names.push_back(id + ".bias");
    sizes.push_back(l->bias.size());
  }
  const auto params = parameter_blocks(ptrs);
  const auto analytic = gradient_blocks(grads);
  return finish_case(std::move(name), seed,
                     finite_diff_check(loss, params, analytic, {opt.epsilon, 0, seed}), names,
                     sizes, opt.tolerance);
}

}  // namespace detail

// Random chain with a fixed linear readout sum(G * output).
inline GradcheckCase gradcheck_chain(std::uint64_t seed, const GradcheckOptions& opt) {
  Rng rng(seed);
  const std::vector<std::size_t> dims{5, 7, 6, 4};
  Mlp net = Mlp::gaussian(dims, 0.6, rng);
  for (auto& l : net.layers()) {
    for (double& b : l.bias.data()) b = 0.1 * rng.normal();
  }
  const Tensor x = detail::smooth_batch(net.chain(), 4, dims.front(), opt.kink_margin, rng);
  const Tensor g = detail::random_matrix(4, dims.back(), 1.0, rng);
  auto loss = [&] {
    const Taps t = chain_forward(net.chain(), x);
    double s = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) s += g.data()[i] * t.output().data()[i];
    return s;
  };
  const BackwardResult br = chain_backward(net.chain(), chain_forward(net.chain(), x), g);
  std::vector<std::pair<std::string, LinearLayer*>> layers;
  for (std::size_t j = 0; j < net.layers().size(); ++j) {
    layers.emplace_back("layer" + std::to_string(j), &net.layers()[j]);
  }
  return detail::check_layers("chain", seed, layers, br.layer_grads, loss, opt);
}

// Softmax cross-entropy gradient with respect to the logits.
inline GradcheckCase gradcheck_softmax(std::uint64_t seed, const GradcheckOptions& opt) {
  Rng rng(seed);
  Tensor logits = detail::random_matrix(opt.batch, opt.num_classes, 2.0, rng);
  std::vector<int> labels(opt.batch);
  for (int& y : labels) y = static_cast<int>(rng.next_u64() % opt.num_classes);
  const Tensor grad = softmax_cross_entropy(logits, labels).grad;
  const std::span<double> p[] = {logits.data()};
  const std::span<const double> a[] = {grad.data()};
  auto loss = [&] { return softmax_cross_entropy(logits, labels).loss; };
  return detail::finish_case("softmax_ce", seed,
                             finite_diff_check(loss, p, a, {opt.epsilon, 0, seed}), {"logits"},
                             {logits.size()}, opt.tolerance);
}

// dR/dh of a density penalty at a random point.
inline GradcheckCase gradcheck_density(const std::string& name, const DensityModel& model,
                                       std::uint64_t seed, const GradcheckOptions& opt) {
  Rng rng(seed ^ 0x5bd1e995ULL);
  const std::size_t dim = density_dim(model);
  Tensor h = Tensor::vector(dim);
  for (double& v : h.data()) v = rng.uniform(-1.0, 2.5);
  const PreparedDensity prepared(model);
  Tensor grad = Tensor::vector(dim);
  prepared.penalty(h.data(), grad.data());
  Tensor scratch = Tensor::vector(dim);
  auto loss = [&] { return prepared.penalty(h.data(), scratch.data()); };
  const std::span<double> p[] = {h.data()};
  const std::span<const double> a[] = {grad.data()};
  return detail::finish_case(name, seed, finite_diff_check(loss, p, a, {opt.epsilon, 0, seed}),
                             {"h"}, {dim}, opt.tolerance);
}

// Cross-entropy plus a Gaussian penalty at shared_in and mixture penalties at
// fc6 and fc7, all parameters of one modality's chain.
inline GradcheckCase gradcheck_objective(std::uint64_t seed, const GradcheckOptions& opt) {
  Rng rng(seed);
  ArchConfig arch;
  arch.num_classes = opt.num_classes;
  arch.shared_dim = opt.shared_dim;
  arch.hidden_dim = opt.hidden_dim;
  arch.encoder_width = opt.shared_dim;
  arch.encoder_layers = 2;
  arch.encoder_init_std = 0.5;
  arch.trunk_init_std = 0.5;
  Rng net_rng = rng.fork(1);
  SharedTrunk trunk = SharedTrunk::gaussian(arch, net_rng);
  std::vector<ModalityBranch> branches;
  for (std::size_t m = 0; m < 2; ++m) {
    branches.push_back(ModalityBranch::gaussian(m, opt.input_dim + m, arch, net_rng));
  }
  CrossModalNet net(std::move(trunk), std::move(branches));
  for (auto& [id, l] : net.named_layers(0)) {
    for (double& b : l->bias.data()) b = 0.2 * net_rng.normal();
  }
  for (auto& [id, l] : net.named_layers(1)) {
    if (id.starts_with("encoder")) {
      for (double& b : l->bias.data()) b = 0.2 * net_rng.normal();
    }
  }
  const std::size_t modality = seed % 2;

  Rng dens_rng = rng.fork(2);
  LayerDensitySet densities;
  densities.emplace(to_string(LayerId::kSharedIn),
                    detail::random_gaussian(opt.shared_dim, dens_rng));
  densities.emplace(to_string(LayerId::kFc6),
                    detail::random_gmm(opt.hidden_dim, opt.num_components, dens_rng));
  densities.emplace(to_string(LayerId::kFc7),
                    detail::random_gmm(opt.hidden_dim, opt.num_components, dens_rng));
  const PreparedDensitySet prepared = prepare_densities(densities);
  const std::map<LayerId, double> lambdas{
      {LayerId::kSharedIn, opt.lambda}, {LayerId::kFc6, opt.lambda}, {LayerId::kFc7, opt.lambda}};

  Rng data_rng = rng.fork(3);
  const Tensor x = detail::smooth_batch(net.chain(modality), opt.batch, opt.input_dim + modality,
                                        opt.kink_margin, data_rng);
  std::vector<int> labels(opt.batch);
  for (int& y : labels) y = static_cast<int>(data_rng.next_u64() % opt.num_classes);

  ObjectiveResult obj = regularized_objective(net, modality, x, labels, &prepared, lambdas);
  if (opt.corrupt) opt.corrupt(obj.backward.layer_grads);
  auto loss = [&] {
    return regularized_objective(net, modality, x, labels, &prepared, lambdas).loss;
  };
  return detail::check_layers("objective(m=" + std::to_string(modality) + ")", seed,
                              net.named_layers(modality), obj.backward.layer_grads, loss, opt);
}

inline GradcheckReport run_gradcheck(const GradcheckOptions& opt = {}) {
  GradcheckReport rep;
  rep.tolerance = opt.tolerance;
  for (std::size_t i = 0; i < opt.num_seeds; ++i) {
    const std::uint64_t seed = opt.base_seed + i;
    rep.cases.push_back(gradcheck_chain(seed, opt));
    rep.cases.push_back(gradcheck_softmax(seed, opt));
    Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
    rep.cases.push_back(gradcheck_density("gaussian_penalty",
                                          detail::random_gaussian(opt.hidden_dim, rng), seed, opt));
    rep.cases.push_back(gradcheck_density(
        "gmm_penalty", detail::random_gmm(opt.hidden_dim, opt.num_components, rng), seed, opt));
    rep.cases.push_back(gradcheck_objective(seed, opt));
  }
  return rep;
}

}  // namespace xmodal
