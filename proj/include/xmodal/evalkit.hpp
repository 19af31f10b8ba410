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

// Evaluation: ranked-retrieval metrics, the cross-modal retrieval protocol,
// zero-shot measurements on held-out classes, per-unit activation consistency
// and embedding export.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <map>
#include <numeric>
#include <ranges>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "xmodal/crossmodal.hpp"
#include "xmodal/error.hpp"
#include "xmodal/parallel.hpp"
#include "xmodal/rng.hpp"
#include "xmodal/synthdata.hpp"
#include "xmodal/tensor.hpp"

namespace xmodal {

// (1/R) * sum over relevant positions p (1-based) of precision@p. Accepts any
// range whose elements convert to bool.
template <std::ranges::input_range R>
double average_precision(const R& relevance) {
  std::size_t hits = 0, pos = 0;
  double sum = 0.0;
  for (const auto& rel : relevance) {
    ++pos;
    if (static_cast<bool>(rel)) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(pos);
    }
  }
  if (hits == 0) throw ConfigError("average_precision: no relevant items");
  return sum / static_cast<double>(hits);
}

inline double average_precision(std::initializer_list<bool> relevance) {
  return average_precision(std::span<const bool>(relevance.begin(), relevance.size()));
}

template <std::ranges::sized_range R>
double precision_at_k(const R& relevance, std::size_t k) {
  const std::size_t n = std::ranges::size(relevance);
  if (k == 0 || k > n) {
    throw ConfigError("precision_at_k: k=" + std::to_string(k) + " with " + std::to_string(n) +
                      " items");
  }
  std::size_t hits = 0, pos = 0;
  for (const auto& rel : relevance) {
    if (pos++ == k) break;
    hits += static_cast<bool>(rel);
  }
  return static_cast<double>(hits) / static_cast<double>(k);
}

// Validation features of one modality at one layer.
struct ModalityFeatures {
  std::string name;
  Tensor features;  // [N x D]
  std::vector<int> labels;
};

struct RetrievalProtocol {
  std::size_t n_queries = 1000;
  std::size_t k = 10;
  std::uint64_t seed = 0;
};

struct PairResult {
  std::size_t query = 0;
  std::size_t target = 0;
  double map = 0.0;
  double pr_at_k = 0.0;
};

struct RetrievalReport {
  std::string strategy;
  std::string layer;
  std::vector<std::string> modalities;
  std::vector<PairResult> pairs;  // query-major, targets in modality order
  double mean_map = 0.0;
  double mean_pr_at_k = 0.0;
  std::size_t k = 10;
  std::vector<std::string> warnings;

  // Mean over the pairs with the given query modality.
  double row_mean_map(std::size_t query) const {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& p : pairs) {
      if (p.query == query) {
        s += p.map;
        ++n;
      }
    }
    return n ? s / static_cast<double>(n) : 0.0;
  }
};

namespace detail {

// Unit-normalized copy; zero rows stay zero and are reported.
inline Tensor normalize_rows(const Tensor& f, std::vector<bool>& is_zero) {
  Tensor out = f;
  is_zero.assign(f.rows(), false);
  for (std::size_t i = 0; i < f.rows(); ++i) {
    auto r = out.row(i);
    double n2 = 0.0;
    for (double v : r) n2 += v * v;
    if (n2 == 0.0) {
      is_zero[i] = true;
      continue;
    }
    const double inv = 1.0 / std::sqrt(n2);
    for (double& v : r) v *= inv;
  }
  return out;
}

// Cosine similarity of `query` to every target row.
inline void cosine_scores(const Tensor& targets, const std::vector<bool>& target_zero,
                          std::span<const double> query, bool query_zero,
                          std::vector<double>& scores) {
  scores.resize(targets.rows());
  for (std::size_t j = 0; j < targets.rows(); ++j) {
    if (query_zero || target_zero[j]) {
      scores[j] = -1.0;
      continue;
    }
    const auto t = targets.row(j);
    double s = 0.0;
    for (std::size_t d = 0; d < t.size(); ++d) s += t[d] * query[d];
    scores[j] = s;
  }
}

// Target indices by descending score, ties by ascending index.
inline std::vector<std::size_t> rank_desc(const std::vector<double>& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

}  // namespace detail

// For every ordered pair of distinct modalities: draw n_queries query rows
// (uniformly, with replacement), rank all target rows by cosine similarity,
// and score class-match relevance with AP and precision@k.
inline RetrievalReport retrieval_eval(const std::vector<ModalityFeatures>& feats,
                                      const RetrievalProtocol& protocol) {
  if (feats.size() < 2) throw ConfigError("retrieval_eval: need at least two modalities");
  if (protocol.n_queries == 0) throw ConfigError("retrieval_eval: n_queries must be >= 1");
  RetrievalReport report;
  report.k = protocol.k;
  std::vector<Tensor> unit(feats.size());
  std::vector<std::vector<bool>> zero(feats.size());
  for (std::size_t m = 0; m < feats.size(); ++m) {
    const auto& f = feats[m];
    if (f.features.rows() != f.labels.size() || f.labels.empty()) {
      throw DimensionError("retrieval_eval: features/labels misaligned for " + f.name);
    }
    if (f.features.cols() != feats[0].features.cols()) {
      throw DimensionError("retrieval_eval: feature dims differ across modalities");
    }
    report.modalities.push_back(f.name);
    unit[m] = detail::normalize_rows(f.features, zero[m]);
    const auto zeros = std::count(zero[m].begin(), zero[m].end(), true);
    if (zeros > 0) {
      report.warnings.push_back(f.name + ": " + std::to_string(zeros) +
                                " zero-norm feature vectors scored as similarity -1");
    }
  }
  const Rng root(protocol.seed);
  double map_sum = 0.0, pr_sum = 0.0;
  for (std::size_t q = 0; q < feats.size(); ++q) {
    for (std::size_t t = 0; t < feats.size(); ++t) {
      if (q == t) continue;
      const std::set<int> target_classes(feats[t].labels.begin(), feats[t].labels.end());
      for (int c : feats[q].labels) {
        if (!target_classes.contains(c)) {
          throw ConfigError("retrieval_eval: class " + std::to_string(c) + " missing from " +
                            feats[t].name);
        }
      }
      if (feats[t].labels.size() < protocol.k) {
        throw ConfigError("retrieval_eval: target set smaller than k");
      }
      Rng rng = root.fork(q * feats.size() + t);
      std::vector<std::size_t> queries(protocol.n_queries);
      for (auto& qi : queries) qi = rng.uniform_int(feats[q].labels.size());
      std::vector<double> ap(protocol.n_queries), pr(protocol.n_queries);
      parallel_for(protocol.n_queries, [&](std::size_t i) {
        std::vector<double> scores;
        const std::size_t qi = queries[i];
        detail::cosine_scores(unit[t], zero[t], unit[q].row(qi), zero[q][qi], scores);
        const auto order = detail::rank_desc(scores);
        std::vector<char> rel(order.size());
        for (std::size_t r = 0; r < order.size(); ++r) {
          rel[r] = feats[t].labels[order[r]] == feats[q].labels[qi];
        }
        ap[i] = average_precision(rel);
        pr[i] = precision_at_k(rel, protocol.k);
      });
      PairResult p{q, t, 0.0, 0.0};
      for (std::size_t i = 0; i < protocol.n_queries; ++i) {
        p.map += ap[i];
        p.pr_at_k += pr[i];
      }
      p.map /= static_cast<double>(protocol.n_queries);
      p.pr_at_k /= static_cast<double>(protocol.n_queries);
      map_sum += p.map;
      pr_sum += p.pr_at_k;
      report.pairs.push_back(p);
    }
  }
  report.mean_map = map_sum / static_cast<double>(report.pairs.size());
  report.mean_pr_at_k = pr_sum / static_cast<double>(report.pairs.size());
  return report;
}

struct ChanceEstimate {
  double mean = 0.0;
  double stddev = 0.0;  // across trials, i.e. of an n_queries-query mean
};

// Monte-Carlo mAP of random rankings. Each trial averages n_queries APs; a
// query's class is drawn in proportion to class_counts and the target list is
// a uniform random permutation of the same class multiset.
inline ChanceEstimate chance_map_estimate(std::span<const std::size_t> class_counts,
                                          std::size_t n_queries, std::size_t n_trials,
                                          std::uint64_t seed) {
  if (class_counts.empty() || n_queries == 0 || n_trials == 0) {
    throw ConfigError("chance_map_estimate: counts, n_queries and n_trials must be positive");
  }
  std::vector<int> labels;
  for (std::size_t c = 0; c < class_counts.size(); ++c) {
    if (class_counts[c] == 0) throw ConfigError("chance_map_estimate: zero class count");
    labels.insert(labels.end(), class_counts[c], static_cast<int>(c));
  }
  Rng rng(seed);
  std::vector<double> trial_means(n_trials);
  std::vector<char> rel(labels.size());
  for (std::size_t t = 0; t < n_trials; ++t) {
    double s = 0.0;
    for (std::size_t q = 0; q < n_queries; ++q) {
      const int cls = labels[rng.uniform_int(labels.size())];
      rng.shuffle(std::span(labels));
      for (std::size_t i = 0; i < labels.size(); ++i) rel[i] = labels[i] == cls;
      s += average_precision(rel);
    }
    trial_means[t] = s / static_cast<double>(n_queries);
  }
  ChanceEstimate est;
  for (double v : trial_means) est.mean += v;
  est.mean /= static_cast<double>(n_trials);
  if (n_trials > 1) {
    double var = 0.0;
    for (double v : trial_means) var += (v - est.mean) * (v - est.mean);
    est.stddev = std::sqrt(var / static_cast<double>(n_trials - 1));
  }
  return est;
}

// Validation features of every modality at `layer`.
inline std::vector<ModalityFeatures> validation_features(const CrossModalModel& model,
                                                         const CrossModalDataset& data,
                                                         LayerId layer) {
  std::vector<ModalityFeatures> out;
  for (std::size_t m = 0; m < data.num_modalities(); ++m) {
    const auto& md = data.modalities[m];
    out.push_back({md.name, extract_features(model, m, md.val.features, layer), md.val.labels});
  }
  return out;
}

inline ModalityFeatures restrict_to_classes(const ModalityFeatures& f,
                                            const std::set<int>& classes) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < f.labels.size(); ++i) {
    if (classes.contains(f.labels[i])) rows.push_back(i);
  }
  ModalityFeatures out{f.name, gather_rows(f.features, rows), {}};
  for (std::size_t i : rows) out.labels.push_back(f.labels[i]);
  return out;
}

struct ZeroShotAccuracy {
  std::string modality;
  double accuracy = 0.0;
  std::size_t examples = 0;
};

// Held-out-class validation accuracy for each affected modality, predicting
// argmax over all C logits.
inline std::vector<ZeroShotAccuracy> zero_shot_classify(const CrossModalModel& model,
                                                        const CrossModalDataset& data) {
  if (!data.has_holdout()) {
    throw NoHoldoutError("zero_shot_classify: dataset has no held-out classes");
  }
  const std::set<int> held(data.holdout_classes.begin(), data.holdout_classes.end());
  std::vector<ZeroShotAccuracy> out;
  for (std::size_t m : data.holdout_modalities) {
    if (m == data.anchor) continue;
    const auto& val = data.modalities[m].val;
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < val.size(); ++i) {
      if (held.contains(val.labels[i])) rows.push_back(i);
    }
    if (rows.empty()) throw ConfigError("zero_shot_classify: no held-out validation examples");
    SplitData subset;
    subset.features = gather_rows(val.features, rows);
    for (std::size_t i : rows) subset.labels.push_back(val.labels[i]);
    const double acc = classification_accuracy(model, m, subset);
    out.push_back({data.modalities[m].name, acc, rows.size()});
  }
  return out;
}

// Retrieval restricted to held-out classes among the affected modalities;
// the anchor is neither query nor target.
inline RetrievalReport zero_shot_retrieval(const std::vector<ModalityFeatures>& all,
                                           const CrossModalDataset& data,
                                           const RetrievalProtocol& protocol) {
  if (!data.has_holdout()) {
    throw NoHoldoutError("zero_shot_retrieval: dataset has no held-out classes");
  }
  const std::set<int> held(data.holdout_classes.begin(), data.holdout_classes.end());
  std::vector<ModalityFeatures> subset;
  for (std::size_t m : data.holdout_modalities) {
    if (m == data.anchor) continue;
    subset.push_back(restrict_to_classes(all.at(m), held));
  }
  return retrieval_eval(subset, protocol);
}

struct UnitEntry {
  std::size_t unit = 0;
  std::vector<std::vector<std::size_t>> top_examples;  // per modality, best first
  std::vector<int> majority_class;                     // per modality, -1 if inactive
  bool consistent = false;
};

struct UnitConsistencyReport {
  std::size_t top_k = 5;
  std::vector<std::string> modalities;
  std::vector<UnitEntry> units;
  double consistency_rate = 0.0;
};

// Per unit and modality: the top_k rows by activation (ties by row index) and
// their majority class, ties between classes going to the class of the
// higher-ranked example. A unit counts as consistent when every modality has
// top_k strictly positive activations and all majority classes agree.
inline UnitConsistencyReport unit_activation_report(const std::vector<ModalityFeatures>& feats,
                                                    std::size_t top_k) {
  if (feats.empty()) throw ConfigError("unit_activation_report: no modalities");
  UnitConsistencyReport rep;
  rep.top_k = top_k;
  const std::size_t units = feats[0].features.cols();
  for (const auto& f : feats) {
    if (top_k == 0 || top_k > f.labels.size()) {
      throw ConfigError("unit_activation_report: top_k exceeds validation size of " + f.name);
    }
    if (f.features.cols() != units) throw DimensionError("unit_activation_report: dim mismatch");
    rep.modalities.push_back(f.name);
  }
  std::size_t consistent = 0;
  for (std::size_t u = 0; u < units; ++u) {
    UnitEntry e;
    e.unit = u;
    bool agree = true;
    for (const auto& f : feats) {
      std::vector<std::size_t> order(f.labels.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return f.features.at(a, u) > f.features.at(b, u);
      });
      order.resize(top_k);
      bool active = true;
      std::map<int, std::size_t> votes;
      for (std::size_t idx : order) {
        active &= f.features.at(idx, u) > 0.0;
        ++votes[f.labels[idx]];
      }
      int majority = -1;
      std::size_t best = 0;
      for (std::size_t idx : order) {  // rank order resolves ties
        const int c = f.labels[idx];
        if (votes[c] > best) {
          best = votes[c];
          majority = c;
        }
      }
      if (!active) majority = -1;
      e.top_examples.push_back(std::move(order));
      e.majority_class.push_back(majority);
      agree &= majority >= 0 && majority == e.majority_class.front();
    }
    e.consistent = agree;
    consistent += agree;
    rep.units.push_back(std::move(e));
  }
  rep.consistency_rate = static_cast<double>(consistent) / static_cast<double>(units);
  return rep;
}

// Chance consistency for the same activations: labels are shuffled within each
// modality, which keeps every unit's activation profile but breaks its link to
// classes. Returns the mean rate over `trials` shuffles.
inline double permuted_consistency_rate(std::vector<ModalityFeatures> feats, std::size_t top_k,
                                        std::size_t trials, std::uint64_t seed) {
  Rng rng(seed);
  double sum = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    for (auto& f : feats) rng.shuffle(std::span(f.labels));
    sum += unit_activation_report(feats, top_k).consistency_rate;
  }
  return sum / static_cast<double>(trials);
}

// CSV: header "modality,class,f0,...,f{D-1}", then up to per_modality_cap rows
// per modality (a seeded subset in original order when there are more), values
// printed with enough digits to recover them as f32.
inline void export_embeddings(const std::vector<ModalityFeatures>& feats,
                              const std::filesystem::path& path, std::size_t per_modality_cap,
                              std::uint64_t seed) {
  if (feats.empty()) throw ConfigError("export_embeddings: nothing to export");
  const std::size_t dim = feats[0].features.cols();
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "modality,class";
  for (std::size_t d = 0; d < dim; ++d) out << ",f" << d;
  out << '\n';
  const Rng root(seed);
  char buf[32];
  for (std::size_t m = 0; m < feats.size(); ++m) {
    const auto& f = feats[m];
    if (f.features.rows() != f.labels.size() || f.features.cols() != dim) {
      throw DimensionError("export_embeddings: rows misaligned for " + f.name);
    }
    std::vector<std::size_t> rows(f.labels.size());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    if (per_modality_cap > 0 && rows.size() > per_modality_cap) {
      Rng rng = root.fork(m);
      rng.shuffle(std::span(rows));
      rows.resize(per_modality_cap);
      std::sort(rows.begin(), rows.end());
    }
    for (std::size_t i : rows) {
      out << f.name << ',' << f.labels[i];
      for (double v : f.features.row(i)) {
        std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(static_cast<float>(v)));
        out << ',' << buf;
      }
      out << '\n';
    }
  }
  if (!out) throw IoError("failed writing " + path.string());
}

// Fixed one-decimal percentage.
inline std::string pct(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", 100.0 * fraction);
  return buf;
}

// Aligned text table in the layout of the published retrieval tables: one
// column per (query, target) pair grouped by query, a mean column on the right
// and one row per labelled report. All reports must share a modality list.
inline std::string format_retrieval_table(
    const std::vector<std::pair<std::string, RetrievalReport>>& rows, bool precision) {
  if (rows.empty()) return {};
  const auto& ref = rows.front().second;
  std::size_t label_w = 8;
  for (const auto& [label, r] : rows) label_w = std::max(label_w, label.size());
  auto pad = [](const std::string& s, std::size_t w) {
    return s.size() >= w ? s : std::string(w - s.size(), ' ') + s;
  };
  auto left = [](const std::string& s, std::size_t w) {
    return s.size() >= w ? s : s + std::string(w - s.size(), ' ');
  };
  constexpr std::size_t kCell = 6;
  auto render = [&](const std::string& label, auto&& cell_of, const std::string& mean) {
    std::string line = left(label, label_w) + " |";
    for (std::size_t i = 0; i < ref.pairs.size(); ++i) {
      if (i > 0 && ref.pairs[i].query != ref.pairs[i - 1].query) line += " |";
      line += pad(cell_of(i), kCell);
    }
    return line + " |" + pad(mean, 7) + "\n";
  };
  std::ostringstream os;
  os << render(
      "Query",
      [&](std::size_t i) {
        const bool first = i == 0 || ref.pairs[i].query != ref.pairs[i - 1].query;
        return first ? ref.modalities[ref.pairs[i].query] : std::string();
      },
      "Mean");
  const std::string target_line = render(
      "Target", [&](std::size_t i) { return ref.modalities[ref.pairs[i].target]; },
      precision ? "PR@" + std::to_string(ref.k) : std::string("mAP"));
  os << target_line << std::string(target_line.size() - 1, '-') << '\n';
  for (const auto& [label, r] : rows) {
    os << render(
        label,
        [&](std::size_t i) { return pct(precision ? r.pairs.at(i).pr_at_k : r.pairs.at(i).map); },
        pct(precision ? r.mean_pr_at_k : r.mean_map));
  }
  return os.str();
}

}  // namespace xmodal
