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

// Synthetic unpaired multi-modal scene data.
//
// A shared latent "scene" space holds one prototype per class plus a
// dictionary of part directions that every class mixes with its own weights.
// Each example is an independent latent draw
//
//   z = prototype[c] + part_scale * sum_j s_j * part[m_j] + spread * eps,
//   m_j ~ Categorical(part_weights[c]),  s_j ~ U(0.5, 1.5),  eps ~ N(0, I)
//
// rendered into a modality through that modality's frozen random matrix and
// elementwise nonlinearity, plus observation noise and appended pure-noise
// distractor coordinates. Modalities share nothing but the class label: no
// latent draw is ever rendered twice.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "xmodal/binary_io.hpp"
#include "xmodal/error.hpp"
#include "xmodal/rng.hpp"
#include "xmodal/tensor.hpp"

namespace xmodal {

enum class Nonlinearity : std::uint8_t { kIdentity = 0, kTanh = 1, kRelu = 2, kSign = 3 };

inline std::string_view to_string(Nonlinearity n) {
  switch (n) {
    case Nonlinearity::kIdentity:
      return "identity";
    case Nonlinearity::kTanh:
      return "tanh";
    case Nonlinearity::kRelu:
      return "relu";
    case Nonlinearity::kSign:
      return "sign";
  }
  return "?";
}

inline Nonlinearity parse_nonlinearity(std::string_view s) {
  if (s == "identity") return Nonlinearity::kIdentity;
  if (s == "tanh") return Nonlinearity::kTanh;
  if (s == "relu") return Nonlinearity::kRelu;
  if (s == "sign") return Nonlinearity::kSign;
  throw ConfigError("unknown nonlinearity '" + std::string(s) + "'");
}

inline double apply_nonlinearity(Nonlinearity n, double x) {
  switch (n) {
    case Nonlinearity::kIdentity:
      return x;
    case Nonlinearity::kTanh:
      return std::tanh(x);
    case Nonlinearity::kRelu:
      return x > 0.0 ? x : 0.0;
    case Nonlinearity::kSign:
      return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
  }
  return x;
}

struct ModalitySpec {
  std::string name;
  std::size_t input_dim = 48;  // includes distractors
  std::size_t distractor_dims = 8;
  Nonlinearity nonlinearity = Nonlinearity::kIdentity;
  double gain = 1.0;  // applied to the mixed latent before the nonlinearity
  double noise_std = 0.1;
  std::size_t train_per_class = 100;

  friend bool operator==(const ModalitySpec&, const ModalitySpec&) = default;
};

struct DataSpec {
  std::size_t num_classes = 10;
  std::size_t latent_dim = 16;
  std::size_t num_parts = 12;
  std::size_t parts_per_example = 2;
  double prototype_scale = 1.0;
  double part_scale = 1.0;
  double part_concentration = 1.5;  // log-normal spread of class part weights
  double spread = 0.5;
  std::size_t val_per_class = 10;
  std::size_t anchor = 0;
  std::vector<ModalitySpec> modalities;

  // The three-modality desk configuration: an anchor ("nat"), a second visual
  // modality with the same input size ("clp") and a text-like modality with a
  // different size and a sign nonlinearity ("dsc").
  static DataSpec desk_default() {
    DataSpec s;
    s.modalities = {
        {"nat", 48, 8, Nonlinearity::kIdentity, 1.0, 0.1, 100},
        {"clp", 48, 8, Nonlinearity::kRelu, 1.5, 0.2, 100},
        {"dsc", 32, 4, Nonlinearity::kSign, 1.0, 0.3, 100},
    };
    return s;
  }

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw ConfigError("invalid data spec: " + field + " " + why);
    };
    if (num_classes < 2) fail("num_classes", "must be >= 2");
    if (num_classes > 65535) fail("num_classes", "must fit in 16 bits");
    if (latent_dim == 0) fail("latent_dim", "must be positive");
    if (parts_per_example > 0 && num_parts == 0) fail("num_parts", "must be positive");
    if (val_per_class == 0) fail("val_per_class", "must be positive");
    if (prototype_scale < 0 || part_scale < 0 || spread < 0 || part_concentration < 0) {
      fail("scales", "must be nonnegative");
    }
    if (modalities.size() < 2) fail("modalities", "need at least two");
    if (anchor >= modalities.size()) fail("anchor", "out of range");
    std::set<std::string> names;
    for (const auto& m : modalities) {
      if (m.name.empty() || !names.insert(m.name).second) {
        fail("modality name", "'" + m.name + "' empty or duplicated");
      }
      if (m.distractor_dims >= m.input_dim) {
        fail(m.name + ".dim", "must exceed " + m.name + ".distractors");
      }
      if (m.train_per_class < 1) fail(m.name + ".train_per_class", "must be >= 1");
      if (m.noise_std < 0) fail(m.name + ".noise", "must be nonnegative");
    }
  }

  std::uint64_t hash() const {
    BinaryWriter w;
    w.put<std::uint64_t>(num_classes);
    w.put<std::uint64_t>(latent_dim);
    w.put<std::uint64_t>(num_parts);
    w.put<std::uint64_t>(parts_per_example);
    w.put(prototype_scale);
    w.put(part_scale);
    w.put(part_concentration);
    w.put(spread);
    w.put<std::uint64_t>(val_per_class);
    w.put<std::uint64_t>(anchor);
    for (const auto& m : modalities) {
      w.put_string(m.name);
      w.put<std::uint64_t>(m.input_dim);
      w.put<std::uint64_t>(m.distractor_dims);
      w.put(static_cast<std::uint8_t>(m.nonlinearity));
      w.put(m.gain);
      w.put(m.noise_std);
      w.put<std::uint64_t>(m.train_per_class);
    }
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (char c : w.bytes()) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ULL;
    }
    return h;
  }
};

struct SceneConceptModel {
  std::size_t parts_per_example = 2;
  double part_scale = 1.0;
  double spread = 0.5;
  Tensor prototypes;    // [C x L]
  Tensor parts;         // [M x L], unit rows
  Tensor part_weights;  // [C x M], rows sum to 1

  std::size_t num_classes() const { return prototypes.rows(); }
  std::size_t latent_dim() const { return prototypes.cols(); }
  std::size_t num_parts() const { return parts.rows(); }

  friend bool operator==(const SceneConceptModel&, const SceneConceptModel&) = default;
};

struct ModalityRenderer {
  Nonlinearity nonlinearity = Nonlinearity::kIdentity;
  double gain = 1.0;
  double noise_std = 0.0;
  std::size_t distractor_dims = 0;
  Tensor mixing;  // [core x L]

  std::size_t core_dim() const { return mixing.rows(); }
  std::size_t input_dim() const { return core_dim() + distractor_dims; }

  friend bool operator==(const ModalityRenderer&, const ModalityRenderer&) = default;
};

enum class Split : std::uint8_t { kTrain = 0, kVal = 1 };

// Rows of one (modality, split): features [N x D_m], labels, and the id of the
// latent draw behind each row. Latent ids exist for auditing unpairedness and
// are not part of what a model sees.
struct SplitData {
  Tensor features;
  std::vector<int> labels;
  std::vector<std::uint32_t> latent_ids;

  std::size_t size() const { return labels.size(); }
  friend bool operator==(const SplitData&, const SplitData&) = default;
};

struct ModalityData {
  std::string name;
  ModalityRenderer renderer;
  SplitData train;
  SplitData val;

  std::size_t input_dim() const { return renderer.input_dim(); }
  friend bool operator==(const ModalityData&, const ModalityData&) = default;
};

struct HoldoutSpec {
  std::vector<int> classes;
  std::vector<std::size_t> affected;  // empty means every non-anchor modality
};

struct CrossModalDataset {
  std::uint64_t seed = 0;
  std::uint64_t spec_hash = 0;
  std::size_t num_classes = 0;
  std::size_t anchor = 0;
  std::size_t val_per_class = 0;
  SceneConceptModel concepts;
  std::vector<ModalityData> modalities;
  std::vector<int> holdout_classes;             // empty without holdout
  std::vector<std::size_t> holdout_modalities;  // modalities that lost them

  std::size_t num_modalities() const { return modalities.size(); }
  bool has_holdout() const { return !holdout_classes.empty(); }

  std::size_t modality_index(std::string_view name) const {
    for (std::size_t m = 0; m < modalities.size(); ++m) {
      if (modalities[m].name == name) return m;
    }
    throw ConfigError("unknown modality '" + std::string(name) + "'");
  }

  friend bool operator==(const CrossModalDataset&, const CrossModalDataset&) = default;
};

namespace detail {

inline double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

inline SceneConceptModel make_concepts(const DataSpec& spec, Rng& rng) {
  SceneConceptModel cm;
  cm.parts_per_example = spec.parts_per_example;
  cm.part_scale = spec.part_scale;
  cm.spread = spec.spread;
  const std::size_t c_count = spec.num_classes, l = spec.latent_dim, m = spec.num_parts;
  cm.prototypes = Tensor::matrix(c_count, l);
  for (double& v : cm.prototypes.storage()) v = spec.prototype_scale * rng.normal();
  cm.parts = Tensor::matrix(m, l);
  for (std::size_t p = 0; p < m; ++p) {
    auto row = cm.parts.row(p);
    double norm = 0.0;
    for (double& v : row) {
      v = rng.normal();
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (double& v : row) v /= norm;
  }
  cm.part_weights = Tensor::matrix(c_count, m);
  for (std::size_t c = 0; c < c_count; ++c) {
    auto row = cm.part_weights.row(c);
    double sum = 0.0;
    for (double& v : row) {
      v = std::exp(spec.part_concentration * rng.normal());
      sum += v;
    }
    for (double& v : row) v /= sum;
  }
  double min_dist = INFINITY;
  for (std::size_t a = 0; a < c_count; ++a) {
    for (std::size_t b = a + 1; b < c_count; ++b) {
      double d2 = 0.0;
      for (std::size_t j = 0; j < l; ++j) {
        const double diff = cm.prototypes.at(a, j) - cm.prototypes.at(b, j);
        d2 += diff * diff;
      }
      min_dist = std::min(min_dist, d2);
    }
  }
  if (!(min_dist > 0.0)) throw ConfigError("invalid data spec: class prototypes coincide");
  return cm;
}

inline ModalityRenderer make_renderer(const ModalitySpec& m, std::size_t latent_dim, Rng& rng) {
  ModalityRenderer r;
  r.nonlinearity = m.nonlinearity;
  r.gain = m.gain;
  r.noise_std = m.noise_std;
  r.distractor_dims = m.distractor_dims;
  const std::size_t core = m.input_dim - m.distractor_dims;
  r.mixing = Tensor::matrix(core, latent_dim);
  const double scale = 1.0 / std::sqrt(static_cast<double>(latent_dim));
  for (double& v : r.mixing.storage()) v = scale * rng.normal();
  return r;
}

inline void sample_latent(const SceneConceptModel& cm, int label, Rng& rng, std::span<double> z) {
  const auto proto = cm.prototypes.row(static_cast<std::size_t>(label));
  std::copy(proto.begin(), proto.end(), z.begin());
  const auto weights = cm.part_weights.row(static_cast<std::size_t>(label));
  for (std::size_t j = 0; j < cm.parts_per_example; ++j) {
    double u = rng.uniform();
    std::size_t part = weights.size() - 1;
    for (std::size_t p = 0; p < weights.size(); ++p) {
      u -= weights[p];
      if (u < 0.0) {
        part = p;
        break;
      }
    }
    const double strength = cm.part_scale * rng.uniform(0.5, 1.5);
    const auto dir = cm.parts.row(part);
    for (std::size_t d = 0; d < z.size(); ++d) z[d] += strength * dir[d];
  }
  for (double& v : z) v += cm.spread * rng.normal();
}

inline void render(const ModalityRenderer& r, std::span<const double> z, Rng& rng,
                   std::span<double> x) {
  const std::size_t core = r.core_dim();
  for (std::size_t i = 0; i < core; ++i) {
    const auto w = r.mixing.row(i);
    double a = 0.0;
    for (std::size_t d = 0; d < z.size(); ++d) a += w[d] * z[d];
    x[i] = to_f32(apply_nonlinearity(r.nonlinearity, r.gain * a) + r.noise_std * rng.normal());
  }
  for (std::size_t i = core; i < x.size(); ++i) x[i] = to_f32(rng.normal());
}

}  // namespace detail

// Seed-deterministic. Features are rounded to f32 at generation so the on-disk
// encoding is lossless.
inline CrossModalDataset generate_dataset(const DataSpec& spec, std::uint64_t seed) {
  spec.validate();
  const Rng root(seed);
  Rng concept_rng = root.fork(1);

  CrossModalDataset ds;
  ds.seed = seed;
  ds.spec_hash = spec.hash();
  ds.num_classes = spec.num_classes;
  ds.anchor = spec.anchor;
  ds.val_per_class = spec.val_per_class;
  ds.concepts = detail::make_concepts(spec, concept_rng);

  std::uint32_t next_latent = 0;
  std::vector<double> z(spec.latent_dim);
  for (std::size_t m = 0; m < spec.modalities.size(); ++m) {
    const ModalitySpec& ms = spec.modalities[m];
    Rng render_rng = root.fork(100 + m);
    Rng sample_rng = root.fork(1000 + m);
    ModalityData md;
    md.name = ms.name;
    md.renderer = detail::make_renderer(ms, spec.latent_dim, render_rng);
    auto fill = [&](SplitData& split, std::size_t per_class) {
      const std::size_t n = per_class * spec.num_classes;
      split.features = Tensor::matrix(n, ms.input_dim);
      split.labels.resize(n);
      split.latent_ids.resize(n);
      std::size_t row = 0;
      for (std::size_t c = 0; c < spec.num_classes; ++c) {
        for (std::size_t i = 0; i < per_class; ++i, ++row) {
          detail::sample_latent(ds.concepts, static_cast<int>(c), sample_rng, z);
          detail::render(md.renderer, z, sample_rng, split.features.row(row));
          split.labels[row] = static_cast<int>(c);
          split.latent_ids[row] = next_latent++;
        }
      }
    };
    fill(md.train, ms.train_per_class);
    fill(md.val, spec.val_per_class);
    ds.modalities.push_back(std::move(md));
  }
  return ds;
}

namespace detail {

inline SplitData filter_rows(const SplitData& s, const std::set<int>& drop) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!drop.contains(s.labels[i])) keep.push_back(i);
  }
  SplitData out;
  out.features = gather_rows(s.features, keep);
  for (std::size_t i : keep) {
    out.labels.push_back(s.labels[i]);
    out.latent_ids.push_back(s.latent_ids[i]);
  }
  return out;
}

}  // namespace detail

// Removes the held-out classes from the training split of the affected
// modalities. Validation data and the anchor modality are untouched.
inline CrossModalDataset holdout_classes(const CrossModalDataset& ds, const HoldoutSpec& h) {
  if (h.classes.empty()) throw ConfigError("holdout: held-out class set is empty");
  std::set<int> drop;
  for (int c : h.classes) {
    if (c < 0 || static_cast<std::size_t>(c) >= ds.num_classes) {
      throw ConfigError("holdout: class " + std::to_string(c) + " out of range");
    }
    drop.insert(c);
  }
  std::vector<std::size_t> affected = h.affected;
  if (affected.empty()) {
    for (std::size_t m = 0; m < ds.num_modalities(); ++m) {
      if (m != ds.anchor) affected.push_back(m);
    }
  }
  CrossModalDataset out = ds;
  for (std::size_t m : affected) {
    if (m >= ds.num_modalities()) throw ConfigError("holdout: modality index out of range");
    if (m == ds.anchor) throw ConfigError("holdout: the anchor modality cannot lose classes");
    std::set<int> present(ds.modalities[m].train.labels.begin(),
                          ds.modalities[m].train.labels.end());
    bool any_left = false;
    for (int c : present) any_left |= !drop.contains(c);
    if (!any_left) {
      throw ConfigError("holdout: would remove every class of modality " + ds.modalities[m].name);
    }
    out.modalities[m].train = detail::filter_rows(ds.modalities[m].train, drop);
  }
  std::set<int> all(out.holdout_classes.begin(), out.holdout_classes.end());
  all.insert(drop.begin(), drop.end());
  out.holdout_classes.assign(all.begin(), all.end());
  std::set<std::size_t> mods(out.holdout_modalities.begin(), out.holdout_modalities.end());
  mods.insert(affected.begin(), affected.end());
  out.holdout_modalities.assign(mods.begin(), mods.end());
  return out;
}

// round(fraction * C) distinct classes chosen uniformly with `rng`, sorted.
inline std::vector<int> choose_holdout(std::size_t num_classes, double fraction, Rng& rng) {
  const auto count =
      static_cast<std::size_t>(std::llround(fraction * static_cast<double>(num_classes)));
  if (count == 0 || count >= num_classes) {
    throw ConfigError("holdout fraction " + std::to_string(fraction) +
                      " must select between 1 and C-1 classes");
  }
  std::vector<int> classes(num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) classes[c] = static_cast<int>(c);
  rng.shuffle(std::span(classes));
  classes.resize(count);
  std::sort(classes.begin(), classes.end());
  return classes;
}

// XMDS1 dataset file, little-endian throughout.
//
//   header
//     "XMDS1"                        5 bytes
//     version                        u16 (= 1)
//     modality count M               u32
//     class count C                  u32
//     D_m for each modality          u32[M]
//     train, val row counts          u32[2M]  (train_0, val_0, train_1, ...)
//   metadata
//     seed u64, spec hash u64, anchor u32, val_per_class u32
//     held-out classes               u32 count, u32[count]
//     held-out modalities            u32 count, u32[count]
//     modality names                 M x (u32 length, bytes)
//     concept model                  L u32, parts M' u32, parts_per_example u32,
//                                    spread f64, part_scale f64,
//                                    prototypes f64[C*L], parts f64[M'*L],
//                                    part_weights f64[C*M']
//     renderers, per modality        nonlinearity u8, gain f64, noise f64,
//                                    distractors u32, core u32, mixing f64[core*L]
//   records, per modality: train rows then val rows
//     modality u16, class u16, split u8, features f32[D_m]
//   latent ids, same order as the records   u32 each
inline constexpr std::string_view kDatasetMagic = "XMDS1";
inline constexpr std::uint16_t kDatasetVersion = 1;

inline BinaryWriter encode_dataset(const CrossModalDataset& ds) {
  BinaryWriter w;
  w.put_bytes(kDatasetMagic);
  w.put(kDatasetVersion);
  w.put(static_cast<std::uint32_t>(ds.num_modalities()));
  w.put(static_cast<std::uint32_t>(ds.num_classes));
  for (const auto& m : ds.modalities) w.put(static_cast<std::uint32_t>(m.input_dim()));
  for (const auto& m : ds.modalities) {
    w.put(static_cast<std::uint32_t>(m.train.size()));
    w.put(static_cast<std::uint32_t>(m.val.size()));
  }
  w.put(ds.seed);
  w.put(ds.spec_hash);
  w.put(static_cast<std::uint32_t>(ds.anchor));
  w.put(static_cast<std::uint32_t>(ds.val_per_class));
  w.put(static_cast<std::uint32_t>(ds.holdout_classes.size()));
  for (int c : ds.holdout_classes) w.put(static_cast<std::uint32_t>(c));
  w.put(static_cast<std::uint32_t>(ds.holdout_modalities.size()));
  for (std::size_t m : ds.holdout_modalities) w.put(static_cast<std::uint32_t>(m));
  for (const auto& m : ds.modalities) w.put_string(m.name);
  const auto& cm = ds.concepts;
  w.put(static_cast<std::uint32_t>(cm.latent_dim()));
  w.put(static_cast<std::uint32_t>(cm.num_parts()));
  w.put(static_cast<std::uint32_t>(cm.parts_per_example));
  w.put(cm.spread);
  w.put(cm.part_scale);
  for (double v : cm.prototypes.storage()) w.put(v);
  for (double v : cm.parts.storage()) w.put(v);
  for (double v : cm.part_weights.storage()) w.put(v);
  for (const auto& m : ds.modalities) {
    const auto& r = m.renderer;
    w.put(static_cast<std::uint8_t>(r.nonlinearity));
    w.put(r.gain);
    w.put(r.noise_std);
    w.put(static_cast<std::uint32_t>(r.distractor_dims));
    w.put(static_cast<std::uint32_t>(r.core_dim()));
    for (double v : r.mixing.storage()) w.put(v);
  }
  for (std::size_t mi = 0; mi < ds.num_modalities(); ++mi) {
    const auto& m = ds.modalities[mi];
    for (const auto* split : {&m.train, &m.val}) {
      const auto tag = split == &m.train ? Split::kTrain : Split::kVal;
      for (std::size_t i = 0; i < split->size(); ++i) {
        w.put(static_cast<std::uint16_t>(mi));
        w.put(static_cast<std::uint16_t>(split->labels[i]));
        w.put(static_cast<std::uint8_t>(tag));
        for (double v : split->features.row(i)) w.put(static_cast<float>(v));
      }
    }
  }
  for (const auto& m : ds.modalities) {
    for (auto id : m.train.latent_ids) w.put(id);
    for (auto id : m.val.latent_ids) w.put(id);
  }
  return w;
}

inline CrossModalDataset decode_dataset(BinaryReader& r) {
  r.expect_magic(kDatasetMagic);
  const std::size_t version_at = r.offset();
  const auto version = r.get<std::uint16_t>();
  if (version != kDatasetVersion) {
    throw FormatError("unsupported dataset version " + std::to_string(version), version_at);
  }
  CrossModalDataset ds;
  const auto m_count = r.get<std::uint32_t>();
  ds.num_classes = r.get<std::uint32_t>();
  std::vector<std::uint32_t> dims(m_count), train_n(m_count), val_n(m_count);
  for (auto& d : dims) d = r.get<std::uint32_t>();
  for (std::uint32_t m = 0; m < m_count; ++m) {
    train_n[m] = r.get<std::uint32_t>();
    val_n[m] = r.get<std::uint32_t>();
  }
  ds.seed = r.get<std::uint64_t>();
  ds.spec_hash = r.get<std::uint64_t>();
  ds.anchor = r.get<std::uint32_t>();
  ds.val_per_class = r.get<std::uint32_t>();
  ds.holdout_classes.resize(r.get<std::uint32_t>());
  for (int& c : ds.holdout_classes) c = static_cast<int>(r.get<std::uint32_t>());
  ds.holdout_modalities.resize(r.get<std::uint32_t>());
  for (auto& m : ds.holdout_modalities) m = r.get<std::uint32_t>();
  ds.modalities.resize(m_count);
  for (auto& m : ds.modalities) m.name = r.get_string();
  auto& cm = ds.concepts;
  const auto l = r.get<std::uint32_t>();
  const auto parts = r.get<std::uint32_t>();
  cm.parts_per_example = r.get<std::uint32_t>();
  cm.spread = r.get<double>();
  cm.part_scale = r.get<double>();
  cm.prototypes = Tensor::matrix(ds.num_classes, l);
  for (double& v : cm.prototypes.storage()) v = r.get<double>();
  cm.parts = Tensor::matrix(parts, l);
  for (double& v : cm.parts.storage()) v = r.get<double>();
  cm.part_weights = Tensor::matrix(ds.num_classes, parts);
  for (double& v : cm.part_weights.storage()) v = r.get<double>();
  for (std::uint32_t m = 0; m < m_count; ++m) {
    auto& rd = ds.modalities[m].renderer;
    const std::size_t nl_at = r.offset();
    const auto nl = r.get<std::uint8_t>();
    if (nl > 3) throw FormatError("unknown nonlinearity " + std::to_string(nl), nl_at);
    rd.nonlinearity = static_cast<Nonlinearity>(nl);
    rd.gain = r.get<double>();
    rd.noise_std = r.get<double>();
    rd.distractor_dims = r.get<std::uint32_t>();
    const std::size_t core_at = r.offset();
    const auto core = r.get<std::uint32_t>();
    if (core + rd.distractor_dims != dims[m]) {
      throw FormatError("renderer dims disagree with header", core_at);
    }
    rd.mixing = Tensor::matrix(core, l);
    for (double& v : rd.mixing.storage()) v = r.get<double>();
  }
  for (std::uint32_t m = 0; m < m_count; ++m) {
    auto& md = ds.modalities[m];
    for (auto* split : {&md.train, &md.val}) {
      const bool is_train = split == &md.train;
      const std::size_t n = is_train ? train_n[m] : val_n[m];
      split->features = Tensor::matrix(n, dims[m]);
      split->labels.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t at = r.offset();
        const auto mod = r.get<std::uint16_t>();
        const auto label = r.get<std::uint16_t>();
        const auto tag = r.get<std::uint8_t>();
        if (mod != m || tag != static_cast<std::uint8_t>(is_train ? Split::kTrain : Split::kVal) ||
            label >= ds.num_classes) {
          throw FormatError("record out of order or invalid", at);
        }
        split->labels[i] = label;
        for (double& v : split->features.row(i)) v = static_cast<double>(r.get<float>());
      }
    }
  }
  for (auto& md : ds.modalities) {
    md.train.latent_ids.resize(md.train.size());
    for (auto& id : md.train.latent_ids) id = r.get<std::uint32_t>();
    md.val.latent_ids.resize(md.val.size());
    for (auto& id : md.val.latent_ids) id = r.get<std::uint32_t>();
  }
  r.expect_end();
  return ds;
}

inline void write_dataset(const CrossModalDataset& ds, const std::filesystem::path& path) {
  encode_dataset(ds).write_file(path);
}

inline CrossModalDataset read_dataset(const std::filesystem::path& path) {
  BinaryReader r = BinaryReader::from_file(path);
  return decode_dataset(r);
}

}  // namespace xmodal
