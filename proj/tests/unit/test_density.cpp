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

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "xmodal/crossmodal.hpp"
#include "xmodal/density.hpp"

namespace xmodal {
namespace {

DiagonalGaussian gaussian(std::vector<double> mean, std::vector<double> var) {
  const std::size_t d = mean.size();
  return {Tensor({d}, std::move(mean)), Tensor({d}, std::move(var))};
}

DiagonalGmm random_gmm(std::size_t dim, std::size_t k, Rng& rng) {
  DiagonalGmm m{Tensor::vector(k), {}};
  double total = 0.0;
  for (double& w : m.weights.data()) total += (w = rng.uniform(0.1, 1.0));
  for (double& w : m.weights.data()) w /= total;
  for (std::size_t i = 0; i < k; ++i) {
    DiagonalGaussian g{Tensor::vector(dim), Tensor::vector(dim)};
    for (double& v : g.mean.data()) v = rng.normal();
    for (double& v : g.variance.data()) v = rng.uniform(0.2, 2.0);
    m.components.push_back(g);
  }
  return m;
}

Tensor two_clusters(std::size_t per, Rng& rng) {
  Tensor x = Tensor::matrix(2 * per, 2);
  for (std::size_t i = 0; i < 2 * per; ++i) {
    const double c = i < per ? -3.0 : 3.0;
    x.at(i, 0) = c + 0.5 * rng.normal();
    x.at(i, 1) = -c + 0.5 * rng.normal();
  }
  return x;
}

TEST(FitGaussian, ConstantSamplesClampToFloor) {
  const Tensor x({3, 2}, std::vector<double>{1, 2, 1, 2, 1, 2});
  const auto g = fit_gaussian(x, 1e-3);
  EXPECT_EQ(g.mean.storage(), (std::vector<double>{1, 2}));
  EXPECT_EQ(g.variance.storage(), (std::vector<double>{1e-3, 1e-3}));
}

TEST(FitGaussian, PopulationVariance) {
  const auto g = fit_gaussian(Tensor({2, 2}, std::vector<double>{0, 0, 2, 2}));
  EXPECT_EQ(g.mean.storage(), (std::vector<double>{1, 1}));
  EXPECT_EQ(g.variance.storage(), (std::vector<double>{1, 1}));
}

TEST(FitGaussian, RecoversMoments) {
  Rng rng(1);
  Tensor x = Tensor::matrix(100000, 1);
  for (double& v : x.data()) v = rng.normal(3.0, 2.0);
  const auto g = fit_gaussian(x);
  EXPECT_NEAR(g.mean[0], 3.0, 0.05);
  EXPECT_NEAR(g.variance[0], 4.0, 0.15);
}

TEST(FitGaussian, NeedsTwoSamples) {
  EXPECT_THROW(fit_gaussian(Tensor::matrix(1, 3)), InsufficientDataError);
}

TEST(GaussianPenalty, MinimumAtMean) {
  const auto g = gaussian({1, -2}, {0.5, 2});
  const auto r = gaussian_penalty(g, g.mean.data());
  EXPECT_EQ(r.value, 0.0);
  EXPECT_EQ(r.grad.storage(), (std::vector<double>{0, 0}));
}

TEST(GaussianPenalty, StandardNormalArithmetic) {
  const std::vector<double> h{3};
  const auto r = gaussian_penalty(gaussian({0}, {1}), h);
  EXPECT_DOUBLE_EQ(r.value, 4.5);
  EXPECT_DOUBLE_EQ(r.grad[0], 3.0);
}

TEST(GaussianPenalty, FiniteDifferences) {
  Rng rng(2);
  for (int t = 0; t < 10; ++t) {
    const auto g = random_gmm(6, 1, rng).components[0];
    std::vector<double> h(6);
    for (double& v : h) v = rng.normal();
    const auto r = gaussian_penalty(g, h);
    const std::span<double> p[] = {h};
    const std::span<const double> a[] = {r.grad.data()};
    const auto rep = finite_diff_check([&] { return gaussian_penalty(g, h).value; }, p, a);
    EXPECT_LT(rep.max_rel_error, 1e-7);
  }
}

TEST(GmmLogDensity, SingleComponentIsGaussian) {
  Rng rng(3);
  const auto m = random_gmm(5, 1, rng);
  std::vector<double> h(5);
  for (double& v : h) v = rng.normal();
  EXPECT_NEAR(gmm_log_density(m, h), gaussian_log_density(m.components[0], h), 1e-12);
}

TEST(GmmLogDensity, FarComponentNegligible) {
  DiagonalGmm m{Tensor({2}, std::vector<double>{0.5, 0.5}),
                {gaussian({0, 0}, {1, 1}), gaussian({100, 100}, {1, 1})}};
  const std::vector<double> h{0, 0};
  const double expect = std::log(0.5) + gaussian_log_density(m.components[0], h);
  EXPECT_NEAR(gmm_log_density(m, h), expect, 1e-9);
}

TEST(GmmLogDensity, ExtremeInputStaysFinite) {
  Rng rng(4);
  const auto m = random_gmm(3, 4, rng);
  const std::vector<double> h{1e150, -1e150, 1e150};
  const double ld = gmm_log_density(m, h);
  EXPECT_FALSE(std::isnan(ld));
  const auto r = gmm_penalty(m, std::vector<double>{1e6, -1e6, 1e6});
  EXPECT_TRUE(std::isfinite(r.value));
  EXPECT_TRUE(r.grad.all_finite());
}

TEST(GmmLogDensity, ZeroWeightComponentExcluded) {
  DiagonalGmm m{Tensor({2}, std::vector<double>{1.0, 0.0}),
                {gaussian({0}, {1}), gaussian({0.1}, {1})}};
  const std::vector<double> h{0.3};
  EXPECT_NEAR(gmm_log_density(m, h), gaussian_log_density(m.components[0], h), 1e-12);
}

TEST(GmmPenalty, SingleComponentMatchesGaussianGradient) {
  Rng rng(5);
  for (int t = 0; t < 20; ++t) {
    const auto m = random_gmm(7, 1, rng);
    std::vector<double> h(7);
    for (double& v : h) v = 2.0 * rng.normal();
    const auto a = gmm_penalty(m, h);
    const auto b = gaussian_penalty(m.components[0], h);
    for (std::size_t d = 0; d < 7; ++d) EXPECT_NEAR(a.grad[d], b.grad[d], 1e-12);
    EXPECT_NEAR(a.value, -gaussian_log_density(m.components[0], h), 1e-10);
  }
}

TEST(GmmPenalty, MirroredComponentsCancelOnBisector) {
  DiagonalGmm m{Tensor({2}, std::vector<double>{0.5, 0.5}),
                {gaussian({-1, 0.5}, {1, 1}), gaussian({1, 0.5}, {1, 1})}};
  const auto r = gmm_penalty(m, std::vector<double>{0.0, 2.0});
  EXPECT_NEAR(r.grad[0], 0.0, 1e-10);
  EXPECT_NEAR(r.grad[1], 1.5, 1e-10);
}

TEST(GmmPenalty, FiniteDifferences) {
  Rng rng(6);
  for (int t = 0; t < 10; ++t) {
    const auto m = random_gmm(5, 4, rng);
    std::vector<double> h(5);
    for (double& v : h) v = rng.normal();
    const auto r = gmm_penalty(m, h);
    const std::span<double> p[] = {h};
    const std::span<const double> a[] = {r.grad.data()};
    const auto rep = finite_diff_check([&] { return gmm_penalty(m, h).value; }, p, a);
    EXPECT_LT(rep.max_rel_error, 1e-6);
  }
}

TEST(GmmResponsibilities, SumToOne) {
  Rng rng(7);
  const auto m = random_gmm(4, 6, rng);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> h(4);
    for (double& v : h) v = 3.0 * rng.normal();
    const auto g = gmm_responsibilities(m, h);
    double s = 0.0;
    for (double v : g) {
      EXPECT_GE(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Em, LogLikelihoodNonDecreasing) {
  Rng rng(8);
  for (int problem = 0; problem < 20; ++problem) {
    const std::size_t dim = 1 + rng.uniform_int(4);
    const std::size_t k = 1 + rng.uniform_int(5);
    const auto truth = random_gmm(dim, 3, rng);
    Tensor x = Tensor::matrix(300, dim);
    for (std::size_t i = 0; i < 300; ++i) {
      const auto& c = truth.components[i % 3];
      for (std::size_t d = 0; d < dim; ++d) {
        x.at(i, d) = c.mean[d] + std::sqrt(c.variance[d]) * rng.normal();
      }
    }
    Rng fit_rng(100 + problem);
    const auto r = fit_gmm_em(x, k, fit_rng);
    for (std::size_t i = 1; i < r.log_likelihood.size(); ++i) {
      if (std::find(r.reseeded_at.begin(), r.reseeded_at.end(), i) != r.reseeded_at.end()) {
        continue;
      }
      EXPECT_GE(r.log_likelihood[i], r.log_likelihood[i - 1] - 1e-9)
          << "problem " << problem << " iteration " << i;
    }
  }
}

TEST(Em, SingleComponentIsFitGaussian) {
  Rng rng(9);
  Tensor x = Tensor::matrix(200, 3);
  for (double& v : x.data()) v = rng.normal(1.0, 0.7);
  Rng fit_rng(1);
  const auto r = fit_gmm_em(x, 1, fit_rng);
  const auto g = fit_gaussian(x);
  for (std::size_t d = 0; d < 3; ++d) {
    EXPECT_NEAR(r.model.components[0].mean[d], g.mean[d], 1e-10);
    EXPECT_NEAR(r.model.components[0].variance[d], g.variance[d], 1e-10);
  }
}

TEST(Em, RecoversTwoClusters) {
  Rng rng(10);
  const Tensor x = two_clusters(500, rng);
  Rng fit_rng(2);
  const auto m = fit_gmm_em(x, 2, fit_rng).model;
  const std::size_t lo = m.components[0].mean[0] < m.components[1].mean[0] ? 0 : 1;
  const auto& a = m.components[lo];
  const auto& b = m.components[1 - lo];
  EXPECT_NEAR(a.mean[0], -3.0, 0.1);
  EXPECT_NEAR(a.mean[1], 3.0, 0.1);
  EXPECT_NEAR(b.mean[0], 3.0, 0.1);
  EXPECT_NEAR(b.mean[1], -3.0, 0.1);
  EXPECT_NEAR(m.weights[0], 0.5, 0.05);
  EXPECT_NEAR(m.weights[1], 0.5, 0.05);
}

TEST(Em, VarianceFloorRespected) {
  Rng rng(11);
  Tensor x = Tensor::matrix(100, 2);
  for (std::size_t i = 0; i < 100; ++i) {
    x.at(i, 0) = static_cast<double>(i % 4);
    x.at(i, 1) = rng.normal();
  }
  EmOptions opt;
  opt.variance_floor = 0.05;
  Rng fit_rng(3);
  const auto m = fit_gmm_em(x, 4, fit_rng, opt).model;
  double wsum = 0.0;
  for (std::size_t k = 0; k < 4; ++k) {
    wsum += m.weights[k];
    for (double v : m.components[k].variance.data()) EXPECT_GE(v, 0.05);
  }
  EXPECT_NEAR(wsum, 1.0, 1e-9);
}

TEST(Em, NeedsAtLeastKSamples) {
  Rng rng(12);
  EXPECT_THROW(fit_gmm_em(Tensor::matrix(3, 2, 1.0), 5, rng), InsufficientDataError);
}

TEST(DensityIo, RoundTripAndBadMagic) {
  Rng rng(13);
  const auto dir = std::filesystem::temp_directory_path() / "xmodal_density_io";
  std::filesystem::create_directories(dir);
  const DensityModel gmm = random_gmm(3, 2, rng);
  const DensityModel g = random_gmm(3, 1, rng).components[0];
  write_density(dir / "a.xmdm", gmm);
  write_density(dir / "b.xmdm", g);
  EXPECT_EQ(read_density(dir / "a.xmdm"), gmm);
  EXPECT_EQ(read_density(dir / "b.xmdm"), g);
  {
    std::fstream f(dir / "a.xmdm", std::ios::in | std::ios::out | std::ios::binary);
    f.put('Z');
  }
  EXPECT_THROW(read_density(dir / "a.xmdm"), FormatError);
  std::filesystem::remove_all(dir);
}

TEST(CollectActivations, ShapesAndSubsampling) {
  ArchConfig arch;
  Rng rng(14);
  CrossModalNet net(SharedTrunk::gaussian(arch, rng), {ModalityBranch::gaussian(0, 6, arch, rng)});
  SplitData split;
  split.features = Tensor::matrix(50, 6);
  for (double& v : split.features.data()) v = rng.normal();
  split.labels.assign(50, 0);
  split.latent_ids.assign(50, 0);
  Rng a(1), b(1);
  const auto acts = collect_activations(net, 0, split, kRegularizedLayers, 20, a);
  EXPECT_EQ(acts.at(LayerId::kSharedIn).shape(), (std::vector<std::size_t>{20, arch.shared_dim}));
  EXPECT_EQ(acts.at(LayerId::kFc6).shape(), (std::vector<std::size_t>{20, arch.hidden_dim}));
  EXPECT_EQ(acts.at(LayerId::kFc7).shape(), (std::vector<std::size_t>{20, arch.hidden_dim}));
  EXPECT_EQ(acts, collect_activations(net, 0, split, kRegularizedLayers, 20, b));
}

}  // namespace
}  // namespace xmodal
