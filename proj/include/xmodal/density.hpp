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

// Densities over layer activations and the negative log-likelihood penalties
// derived from them.
//
// Both model kinds use diagonal covariances. The single-Gaussian penalty drops
// its normalising constant, R(h) = 1/2 sum_d (h_d - mu_d)^2 / var_d. The mixture
// penalty is the full -log sum_k alpha_k N(h; mu_k, var_k): the per-component
// constants differ through var_k and shape the responsibilities, so they stay.
// Everything is evaluated in log space with log-sum-exp.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "xmodal/binary_io.hpp"
#include "xmodal/error.hpp"
#include "xmodal/rng.hpp"
#include "xmodal/tensor.hpp"

namespace xmodal {

inline constexpr double kDefaultVarianceFloor = 1e-6;

struct DiagonalGaussian {
  Tensor mean;      // [D]
  Tensor variance;  // [D], every entry >= the floor used at fit time

  std::size_t dim() const { return mean.size(); }
  friend bool operator==(const DiagonalGaussian&, const DiagonalGaussian&) = default;
};

struct DiagonalGmm {
  Tensor weights;  // [K], nonnegative, sums to 1
  std::vector<DiagonalGaussian> components;

  std::size_t num_components() const { return components.size(); }
  std::size_t dim() const { return components.empty() ? 0 : components.front().dim(); }
  friend bool operator==(const DiagonalGmm&, const DiagonalGmm&) = default;
};

using DensityModel = std::variant<DiagonalGaussian, DiagonalGmm>;

// One density per regularized layer, keyed by layer id.
using LayerDensitySet = std::map<std::string, DensityModel>;

inline std::size_t density_dim(const DensityModel& m) {
  return std::visit([](const auto& d) { return d.dim(); }, m);
}

struct PenaltyResult {
  double value = 0.0;
  Tensor grad;  // dR/dh
};

namespace detail {

inline void check_dim(std::size_t expected, std::size_t got, const char* what) {
  if (expected != got) {
    throw DimensionError(std::string(what) + ": model dim " + std::to_string(expected) +
                         " but activation dim " + std::to_string(got));
  }
}

inline double log_sum_exp(std::span<const double> v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

}  // namespace detail

// Mixture with the per-component terms that do not depend on h precomputed.
// Components with zero weight are dropped from the log-sum.
class PreparedGmm {
 public:
  explicit PreparedGmm(const DiagonalGmm& gmm) : dim_(gmm.dim()) {
    for (std::size_t k = 0; k < gmm.num_components(); ++k) {
      const double alpha = gmm.weights[k];
      if (!(alpha > 0.0)) continue;
      const auto& c = gmm.components[k];
      double log_det = 0.0;
      for (std::size_t d = 0; d < dim_; ++d) log_det += std::log(c.variance[d]);
      log_const_.push_back(std::log(alpha) - 0.5 * log_det -
                           0.5 * static_cast<double>(dim_) * std::log(2.0 * std::numbers::pi));
      means_.insert(means_.end(), c.mean.storage().begin(), c.mean.storage().end());
      for (std::size_t d = 0; d < dim_; ++d) inv_var_.push_back(1.0 / c.variance[d]);
      index_.push_back(k);
    }
    if (index_.empty()) throw ConfigError("gmm has no component with positive weight");
  }

  std::size_t dim() const { return dim_; }
  std::size_t active_components() const { return index_.size(); }

  // log alpha_k + log N(h; mu_k, var_k) per active component.
  void component_log_terms(std::span<const double> h, std::span<double> out) const {
    for (std::size_t a = 0; a < index_.size(); ++a) {
      const double* mu = &means_[a * dim_];
      const double* iv = &inv_var_[a * dim_];
      double q = 0.0;
      for (std::size_t d = 0; d < dim_; ++d) {
        const double diff = h[d] - mu[d];
        q += diff * diff * iv[d];
      }
      out[a] = log_const_[a] - 0.5 * q;
    }
  }

  double log_density(std::span<const double> h) const {
    std::vector<double> terms(index_.size());
    component_log_terms(h, terms);
    return detail::log_sum_exp(terms);
  }

  // Responsibilities over all K components (zero for dropped ones).
  std::vector<double> responsibilities(std::span<const double> h,
                                       std::size_t num_components) const {
    std::vector<double> terms(index_.size());
    component_log_terms(h, terms);
    const double lse = detail::log_sum_exp(terms);
    std::vector<double> gamma(num_components, 0.0);
    for (std::size_t a = 0; a < index_.size(); ++a) gamma[index_[a]] = std::exp(terms[a] - lse);
    return gamma;
  }

  // Returns -log p(h) and writes sum_k gamma_k (h - mu_k) / var_k into grad.
  double penalty(std::span<const double> h, std::span<double> grad) const {
    thread_local std::vector<double> terms;
    terms.resize(index_.size());
    component_log_terms(h, terms);
    const double lse = detail::log_sum_exp(terms);
    std::fill(grad.begin(), grad.end(), 0.0);
    for (std::size_t a = 0; a < index_.size(); ++a) {
      const double gamma = std::exp(terms[a] - lse);
      if (gamma == 0.0) continue;
      const double* mu = &means_[a * dim_];
      const double* iv = &inv_var_[a * dim_];
      for (std::size_t d = 0; d < dim_; ++d) grad[d] += gamma * (h[d] - mu[d]) * iv[d];
    }
    return -lse;
  }

 private:
  std::size_t dim_;
  std::vector<double> log_const_;
  std::vector<double> means_;
  std::vector<double> inv_var_;
  std::vector<std::size_t> index_;
};

// Exact diagonal-Gaussian log density, constants included.
inline double gaussian_log_density(const DiagonalGaussian& g, std::span<const double> h) {
  detail::check_dim(g.dim(), h.size(), "gaussian_log_density");
  double s = 0.0;
  for (std::size_t d = 0; d < h.size(); ++d) {
    const double diff = h[d] - g.mean[d];
    s += diff * diff / g.variance[d] + std::log(2.0 * std::numbers::pi * g.variance[d]);
  }
  return -0.5 * s;
}

inline PenaltyResult gaussian_penalty(const DiagonalGaussian& g, std::span<const double> h) {
  detail::check_dim(g.dim(), h.size(), "gaussian_penalty");
  PenaltyResult r{0.0, Tensor::vector(h.size())};
  for (std::size_t d = 0; d < h.size(); ++d) {
    const double diff = h[d] - g.mean[d];
    r.value += 0.5 * diff * diff / g.variance[d];
    r.grad[d] = diff / g.variance[d];
  }
  return r;
}

inline double gmm_log_density(const DiagonalGmm& gmm, std::span<const double> h) {
  detail::check_dim(gmm.dim(), h.size(), "gmm_log_density");
  return PreparedGmm(gmm).log_density(h);
}

inline std::vector<double> gmm_responsibilities(const DiagonalGmm& gmm, std::span<const double> h) {
  detail::check_dim(gmm.dim(), h.size(), "gmm_responsibilities");
  return PreparedGmm(gmm).responsibilities(h, gmm.num_components());
}

inline PenaltyResult gmm_penalty(const DiagonalGmm& gmm, std::span<const double> h) {
  detail::check_dim(gmm.dim(), h.size(), "gmm_penalty");
  PenaltyResult r{0.0, Tensor::vector(h.size())};
  r.value = PreparedGmm(gmm).penalty(h, r.grad.data());
  return r;
}

// A density ready for repeated penalty evaluation during training.
class PreparedDensity {
 public:
  explicit PreparedDensity(const DensityModel& model) {
    if (const auto* g = std::get_if<DiagonalGaussian>(&model)) {
      mean_ = g->mean.storage();
      inv_var_.resize(g->dim());
      for (std::size_t d = 0; d < g->dim(); ++d) inv_var_[d] = 1.0 / g->variance[d];
    } else {
      gmm_.emplace_back(std::get<DiagonalGmm>(model));
    }
  }

  std::size_t dim() const { return gmm_.empty() ? mean_.size() : gmm_.front().dim(); }

  double penalty(std::span<const double> h, std::span<double> grad) const {
    detail::check_dim(dim(), h.size(), "penalty");
    if (!gmm_.empty()) return gmm_.front().penalty(h, grad);
    double r = 0.0;
    for (std::size_t d = 0; d < h.size(); ++d) {
      const double diff = h[d] - mean_[d];
      r += 0.5 * diff * diff * inv_var_[d];
      grad[d] = diff * inv_var_[d];
    }
    return r;
  }

 private:
  std::vector<double> mean_;
  std::vector<double> inv_var_;
  std::vector<PreparedGmm> gmm_;  // at most one
};

// Sample mean and population variance (divide by N), floored.
inline DiagonalGaussian fit_gaussian(const Tensor& samples,
                                     double variance_floor = kDefaultVarianceFloor) {
  const std::size_t n = samples.rows();
  const std::size_t dim = samples.cols();
  if (n < 2) {
    throw InsufficientDataError("fit_gaussian: need at least 2 samples, got " + std::to_string(n));
  }
  DiagonalGaussian g{Tensor::vector(dim), Tensor::vector(dim)};
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = samples.row(i);
    for (std::size_t d = 0; d < dim; ++d) g.mean[d] += r[d];
  }
  for (std::size_t d = 0; d < dim; ++d) g.mean[d] /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = samples.row(i);
    for (std::size_t d = 0; d < dim; ++d) {
      const double diff = r[d] - g.mean[d];
      g.variance[d] += diff * diff;
    }
  }
  for (std::size_t d = 0; d < dim; ++d) {
    g.variance[d] = std::max(g.variance[d] / static_cast<double>(n), variance_floor);
  }
  return g;
}

struct EmOptions {
  std::size_t max_iters = 200;
  double tol = 1e-6;  // on the per-sample mean log-likelihood
  double variance_floor = kDefaultVarianceFloor;
};

struct EmResult {
  DiagonalGmm model;
  // Per-sample mean log-likelihood of the training samples, one entry per
  // E-step; the last entry belongs to `model`.
  std::vector<double> log_likelihood;
  std::vector<std::size_t> reseeded_at;  // indices into log_likelihood
  bool converged = false;
};

// Diagonal-covariance EM. Means are seeded k-means++ style from the samples,
// weights start uniform and every component starts at the global per-dimension
// variance. A component whose responsibility mass falls below 1e-8 is re-seeded
// at a random sample.
inline EmResult fit_gmm_em(const Tensor& samples, std::size_t num_components, Rng& rng,
                           const EmOptions& opt = {}) {
  const std::size_t n = samples.rows();
  const std::size_t dim = samples.cols();
  const std::size_t k_count = num_components;
  if (k_count == 0) throw ConfigError("fit_gmm_em: K must be at least 1");
  if (n < k_count || n < 2) {
    throw InsufficientDataError("fit_gmm_em: need at least K=" + std::to_string(k_count) +
                                " samples, got " + std::to_string(n));
  }

  const DiagonalGaussian global = fit_gaussian(samples, opt.variance_floor);

  EmResult result;
  DiagonalGmm& gmm = result.model;
  gmm.weights = Tensor::vector(k_count, 1.0 / static_cast<double>(k_count));
  gmm.components.assign(k_count, global);

  // k-means++ seeding.
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  std::size_t pick = rng.uniform_int(n);
  for (std::size_t k = 0; k < k_count; ++k) {
    const auto chosen = samples.row(pick);
    std::copy(chosen.begin(), chosen.end(), gmm.components[k].mean.storage().begin());
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto r = samples.row(i);
      double d2 = 0.0;
      for (std::size_t d = 0; d < dim; ++d) d2 += (r[d] - chosen[d]) * (r[d] - chosen[d]);
      nearest[i] = std::min(nearest[i], d2);
      total += nearest[i];
    }
    if (k + 1 == k_count) break;
    if (total > 0.0) {
      double target = rng.uniform() * total;
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        target -= nearest[i];
        if (target < 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = rng.uniform_int(n);
    }
  }

  std::vector<double> resp(n * k_count);
  std::vector<double> terms(k_count);
  double previous = -std::numeric_limits<double>::infinity();
  for (std::size_t iter = 0; iter < opt.max_iters; ++iter) {
    // E-step.
    const PreparedGmm prepared(gmm);
    double ll = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto g = prepared.responsibilities(samples.row(i), k_count);
      std::copy(g.begin(), g.end(), resp.begin() + static_cast<std::ptrdiff_t>(i * k_count));
      ll += prepared.log_density(samples.row(i));
    }
    ll /= static_cast<double>(n);
    result.log_likelihood.push_back(ll);
    if (iter > 0 && ll - previous < opt.tol) {
      result.converged = true;
      break;
    }
    previous = ll;
    if (iter + 1 == opt.max_iters) break;

    // M-step.
    bool reseeded = false;
    for (std::size_t k = 0; k < k_count; ++k) {
      double mass = 0.0;
      for (std::size_t i = 0; i < n; ++i) mass += resp[i * k_count + k];
      DiagonalGaussian& c = gmm.components[k];
      if (mass < 1e-8) {
        const auto r = samples.row(rng.uniform_int(n));
        std::copy(r.begin(), r.end(), c.mean.storage().begin());
        c.variance = global.variance;
        gmm.weights[k] = 1.0 / static_cast<double>(n);
        reseeded = true;
        continue;
      }
      gmm.weights[k] = mass / static_cast<double>(n);
      c.mean.fill(0.0);
      for (std::size_t i = 0; i < n; ++i) {
        const double g = resp[i * k_count + k];
        const auto r = samples.row(i);
        for (std::size_t d = 0; d < dim; ++d) c.mean[d] += g * r[d];
      }
      for (std::size_t d = 0; d < dim; ++d) c.mean[d] /= mass;
      c.variance.fill(0.0);
      for (std::size_t i = 0; i < n; ++i) {
        const double g = resp[i * k_count + k];
        const auto r = samples.row(i);
        for (std::size_t d = 0; d < dim; ++d) {
          const double diff = r[d] - c.mean[d];
          c.variance[d] += g * diff * diff;
        }
      }
      for (std::size_t d = 0; d < dim; ++d) {
        c.variance[d] = std::max(c.variance[d] / mass, opt.variance_floor);
      }
    }
    double wsum = 0.0;
    for (std::size_t k = 0; k < k_count; ++k) wsum += gmm.weights[k];
    for (std::size_t k = 0; k < k_count; ++k) gmm.weights[k] /= wsum;
    if (reseeded) {
      result.reseeded_at.push_back(result.log_likelihood.size());
      previous = -std::numeric_limits<double>::infinity();
    }
  }
  return result;
}

// XMDM1 density blob, little-endian:
//   "XMDM1"            5 bytes
//   kind               u8   (0 = single Gaussian, 1 = mixture)
//   K                  u32  (1 for a single Gaussian)
//   D                  u32
//   weights            f64[K]
//   means              f64[K*D]   component-major
//   variances          f64[K*D]   component-major
inline constexpr std::string_view kDensityMagic = "XMDM1";

inline void encode_density(BinaryWriter& w, const DensityModel& model) {
  w.put_bytes(kDensityMagic);
  DiagonalGmm as_gmm;
  std::uint8_t kind = 1;
  if (const auto* g = std::get_if<DiagonalGaussian>(&model)) {
    kind = 0;
    as_gmm.weights = Tensor::vector(1, 1.0);
    as_gmm.components = {*g};
  } else {
    as_gmm = std::get<DiagonalGmm>(model);
  }
  w.put(kind);
  w.put(static_cast<std::uint32_t>(as_gmm.num_components()));
  w.put(static_cast<std::uint32_t>(as_gmm.dim()));
  for (double v : as_gmm.weights.storage()) w.put(v);
  for (const auto& c : as_gmm.components)
    for (double v : c.mean.storage()) w.put(v);
  for (const auto& c : as_gmm.components)
    for (double v : c.variance.storage()) w.put(v);
}

inline DensityModel decode_density(BinaryReader& r) {
  r.expect_magic(kDensityMagic);
  const std::size_t kind_at = r.offset();
  const auto kind = r.get<std::uint8_t>();
  if (kind > 1) throw FormatError("unknown density kind " + std::to_string(kind), kind_at);
  const std::size_t k_at = r.offset();
  const auto k = r.get<std::uint32_t>();
  const auto d = r.get<std::uint32_t>();
  if (k == 0 || (kind == 0 && k != 1)) {
    throw FormatError("invalid component count " + std::to_string(k), k_at);
  }
  DiagonalGmm gmm;
  gmm.weights = Tensor::vector(k);
  for (std::uint32_t i = 0; i < k; ++i) gmm.weights[i] = r.get<double>();
  gmm.components.assign(k, DiagonalGaussian{Tensor::vector(d), Tensor::vector(d)});
  for (auto& c : gmm.components)
    for (double& v : c.mean.storage()) v = r.get<double>();
  for (auto& c : gmm.components)
    for (double& v : c.variance.storage()) v = r.get<double>();
  if (kind == 0) return gmm.components.front();
  return gmm;
}

inline void write_density(const std::filesystem::path& path, const DensityModel& model) {
  BinaryWriter w;
  encode_density(w, model);
  w.write_file(path);
}

inline DensityModel read_density(const std::filesystem::path& path) {
  BinaryReader r = BinaryReader::from_file(path);
  DensityModel m = decode_density(r);
  r.expect_end();
  return m;
}

}  // namespace xmodal
