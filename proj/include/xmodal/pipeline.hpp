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

// Run-directory pipeline behind the command-line tool.
//
// Layout of a run directory:
//
//   config.ini                         resolved configuration
//   dataset.xmds                       dataset (holdout already applied)
//   anchor.xmck                        anchor network
//   densities/<kind>/<layer>.xmdm      fitted activation densities
//   strategies/<name>/model.xmck       trained model
//   strategies/<name>/frozen_phase.xmck  model at the end of the frozen phase
//   strategies/<name>/train.jsonl      training log
//   reports/                           evaluation outputs (.json and .txt)
//
// Every stage is a no-op when its output exists, unless forced. Random streams
// derive from the configured seed s:
//
//   dataset      generate_dataset(data, s)
//   holdout      Rng(s).fork(10 + holdout_seed)
//   anchor       Rng(s).fork(20)
//   densities    Rng(s).fork(30 + kind)
//   strategies   Rng(s).fork(40), shared by all strategies
//   untrained    Rng(s).fork(50)

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "xmodal/config.hpp"
#include "xmodal/crossmodal.hpp"
#include "xmodal/density.hpp"
#include "xmodal/error.hpp"
#include "xmodal/evalkit.hpp"
#include "xmodal/rng.hpp"
#include "xmodal/synthdata.hpp"

namespace xmodal {

using Json = nlohmann::ordered_json;

inline std::string to_string(DensityKind k) {
  return k == DensityKind::kGaussian ? "gaussian" : "gmm";
}

struct RunPaths {
  std::filesystem::path root;

  std::filesystem::path config() const { return root / "config.ini"; }
  std::filesystem::path dataset() const { return root / "dataset.xmds"; }
  std::filesystem::path anchor() const { return root / "anchor.xmck"; }
  std::filesystem::path densities() const { return root / "densities"; }
  std::filesystem::path density(DensityKind kind, LayerId layer) const {
    return densities() / to_string(kind) / (to_string(layer) + ".xmdm");
  }
  std::filesystem::path strategies() const { return root / "strategies"; }
  std::filesystem::path strategy_dir(StrategyKind k) const { return strategies() / to_string(k); }
  std::filesystem::path model(StrategyKind k) const { return strategy_dir(k) / "model.xmck"; }
  std::filesystem::path frozen_phase(StrategyKind k) const {
    return strategy_dir(k) / "frozen_phase.xmck";
  }
  std::filesystem::path train_log(StrategyKind k) const { return strategy_dir(k) / "train.jsonl"; }
  std::filesystem::path reports() const { return root / "reports"; }
};

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

inline void require(const std::filesystem::path& path, const std::string& what) {
  if (!std::filesystem::exists(path)) {
    throw MissingArtifactError("missing " + what + ": " + path.string());
  }
}

inline Json layer_map_json(const std::map<LayerId, double>& m) {
  Json j = Json::object();
  for (const auto& [id, v] : m) j[to_string(id)] = v;
  return j;
}

}  // namespace detail

// Resolves the configuration of a run directory. Without `requested` the
// stored snapshot is used (defaults when there is none). A requested
// configuration that differs from the stored one is an error unless `force`,
// in which case the snapshot is replaced and every derived artifact removed.
// Without `create` the run directory must already exist.
inline RunConfig open_run(const RunPaths& run, const std::optional<RunConfig>& requested,
                          bool force, bool create = true) {
  const bool stored = std::filesystem::exists(run.config());
  if (!stored && !create) detail::require(run.config(), "run configuration");
  RunConfig cfg = requested ? *requested : (stored ? load_config(run.config()) : RunConfig{});
  cfg.validate();
  if (stored && requested) {
    const std::string before = detail::read_text(run.config());
    if (before != to_ini(cfg)) {
      if (!force) {
        throw ConfigError("run directory " + run.root.string() +
                          " holds a different configuration; pass --force to replace it");
      }
      for (const auto& p :
           {run.dataset(), run.anchor(), run.densities(), run.strategies(), run.reports()}) {
        std::filesystem::remove_all(p);
      }
    }
  }
  std::filesystem::create_directories(run.root);
  detail::write_text(run.config(), to_ini(cfg));
  return cfg;
}

inline CrossModalDataset build_dataset(const RunConfig& cfg) {
  CrossModalDataset ds = generate_dataset(cfg.data, cfg.seed);
  if (cfg.holdout_frac > 0) {
    Rng rng = Rng(cfg.seed).fork(10 + cfg.holdout_seed);
    ds = holdout_classes(ds, {choose_holdout(ds.num_classes, cfg.holdout_frac, rng), {}});
  }
  return ds;
}

inline CrossModalDataset ensure_dataset(const RunPaths& run, const RunConfig& cfg, bool force,
                                        bool* created = nullptr) {
  if (created) *created = false;
  if (!force && std::filesystem::exists(run.dataset())) return read_dataset(run.dataset());
  CrossModalDataset ds = build_dataset(cfg);
  write_dataset(ds, run.dataset());
  if (created) *created = true;
  return ds;
}

inline CrossModalDataset load_dataset(const RunPaths& run, const RunConfig& cfg) {
  detail::require(run.dataset(), "dataset (run gen-data first)");
  CrossModalDataset ds = read_dataset(run.dataset());
  if (ds.seed != cfg.seed || ds.spec_hash != cfg.data.hash()) {
    throw ConfigError("dataset in " + run.root.string() +
                      " does not match the configuration; rerun gen-data --force");
  }
  return ds;
}

inline CrossModalNet train_anchor_network(const RunConfig& cfg, const CrossModalDataset& ds) {
  Rng rng = Rng(cfg.seed).fork(20);
  return train_anchor(ds.modalities.at(ds.anchor), ds.anchor, cfg.arch, cfg.anchor_schedule, rng);
}

inline CrossModalNet ensure_anchor(const RunPaths& run, const RunConfig& cfg,
                                   const CrossModalDataset& ds, bool force) {
  if (!force && std::filesystem::exists(run.anchor())) {
    return read_checkpoint(run.anchor()).nets.at(0);
  }
  CrossModalNet net = train_anchor_network(cfg, ds);
  write_checkpoint(anchor_model(net, ds.num_modalities()), run.anchor());
  return net;
}

inline LayerDensitySet fit_run_densities(const RunConfig& cfg, const CrossModalDataset& ds,
                                         const CrossModalNet& anchor, DensityKind kind) {
  Rng rng = Rng(cfg.seed).fork(30 + static_cast<std::uint64_t>(kind));
  return fit_layer_densities(anchor, ds.anchor, ds.modalities.at(ds.anchor).train,
                             cfg.density_options(kind), rng);
}

inline LayerDensitySet ensure_densities(const RunPaths& run, const RunConfig& cfg,
                                        const CrossModalDataset& ds, const CrossModalNet& anchor,
                                        DensityKind kind, bool force) {
  bool present = true;
  for (LayerId id : kRegularizedLayers) present &= std::filesystem::exists(run.density(kind, id));
  if (!force && present) {
    LayerDensitySet set;
    for (LayerId id : kRegularizedLayers)
      set.emplace(to_string(id), read_density(run.density(kind, id)));
    return set;
  }
  LayerDensitySet set = fit_run_densities(cfg, ds, anchor, kind);
  for (LayerId id : kRegularizedLayers) {
    std::filesystem::create_directories(run.density(kind, id).parent_path());
    write_density(run.density(kind, id), set.at(to_string(id)));
  }
  return set;
}

inline TrainResult train_run_strategy(const RunConfig& cfg, const CrossModalDataset& ds,
                                      StrategyKind kind, const CrossModalNet* anchor,
                                      const LayerDensitySet* densities, TrainOptions opt = {}) {
  opt.log_every = cfg.log_every;
  return train_strategy(cfg.strategy(kind), ds, anchor, cfg.arch, densities, Rng(cfg.seed).fork(40),
                        opt);
}

inline std::string train_log_jsonl(const std::vector<TrainLogEntry>& log) {
  std::string out;
  for (const auto& e : log) {
    Json j;
    j["iteration"] = e.iteration;
    j["modality"] = e.modality;
    j["phase"] = e.phase;
    j["ce_loss"] = e.ce_loss;
    j["reg"] = detail::layer_map_json(e.reg);
    j["lambdas"] = detail::layer_map_json(e.lambdas);
    j["total"] = e.total;
    out += j.dump() + "\n";
  }
  return out;
}

struct TrainStageResult {
  bool skipped = false;
  CrossModalModel model;
  std::vector<double> val_accuracy;  // per modality
};

// Trains one strategy, fitting the anchor and densities first when needed.
inline TrainStageResult train_stage(const RunPaths& run, const RunConfig& cfg, StrategyKind kind,
                                    bool force) {
  const CrossModalDataset ds = load_dataset(run, cfg);
  TrainStageResult res;
  if (!force && std::filesystem::exists(run.model(kind))) {
    res.skipped = true;
    res.model = read_checkpoint(run.model(kind));
  } else {
    std::optional<CrossModalNet> anchor;
    if (uses_anchor(kind)) anchor = ensure_anchor(run, cfg, ds, false);
    std::optional<LayerDensitySet> dens;
    if (uses_density(kind)) {
      dens = ensure_densities(run, cfg, ds, *anchor, density_kind_for(kind), false);
    }
    TrainResult tr =
        train_run_strategy(cfg, ds, kind, anchor ? &*anchor : nullptr, dens ? &*dens : nullptr);
    std::filesystem::create_directories(run.strategy_dir(kind));
    write_checkpoint(tr.model, run.model(kind));
    if (tr.end_of_frozen_phase) write_checkpoint(*tr.end_of_frozen_phase, run.frozen_phase(kind));
    detail::write_text(run.train_log(kind), train_log_jsonl(tr.log));
    res.model = std::move(tr.model);
  }
  for (std::size_t m = 0; m < ds.num_modalities(); ++m) {
    res.val_accuracy.push_back(classification_accuracy(res.model, m, ds.modalities[m].val));
  }
  return res;
}

inline std::vector<StrategyKind> trained_strategies(const RunPaths& run) {
  std::vector<StrategyKind> out;
  for (StrategyKind k : kAllStrategies) {
    if (std::filesystem::exists(run.model(k))) out.push_back(k);
  }
  return out;
}

inline CrossModalModel load_model(const RunPaths& run, StrategyKind kind) {
  detail::require(run.model(kind), "checkpoint for " + to_string(kind));
  return read_checkpoint(run.model(kind));
}

// Chance mAP for retrieving among one modality's validation set.
inline ChanceEstimate validation_chance(const CrossModalDataset& ds,
                                        const RetrievalProtocol& protocol,
                                        std::size_t num_classes) {
  const std::vector<std::size_t> counts(num_classes, ds.val_per_class);
  return chance_map_estimate(counts, protocol.n_queries, 100, protocol.seed + 1);
}

inline Json retrieval_json(const RetrievalReport& r) {
  Json j;
  j["strategy"] = r.strategy;
  j["layer"] = r.layer;
  j["modalities"] = r.modalities;
  j["mean_map"] = r.mean_map;
  j["mean_pr_at_k"] = r.mean_pr_at_k;
  j["k"] = r.k;
  Json pairs = Json::array();
  for (const auto& p : r.pairs) {
    pairs.push_back({{"query", r.modalities[p.query]},
                     {"target", r.modalities[p.target]},
                     {"map", p.map},
                     {"pr_at_k", p.pr_at_k}});
  }
  j["pairs"] = pairs;
  j["warnings"] = r.warnings;
  return j;
}

struct EvalStageResult {
  std::string table;  // human-readable, also written to reports/
  std::vector<std::pair<StrategyKind, RetrievalReport>> reports;
  ChanceEstimate chance;
};

inline RetrievalReport evaluate_model(const CrossModalModel& model, const CrossModalDataset& ds,
                                      LayerId layer, const RetrievalProtocol& protocol) {
  RetrievalReport r = retrieval_eval(validation_features(model, ds, layer), protocol);
  r.strategy = model.strategy;
  r.layer = to_string(layer);
  return r;
}

// Retrieval reports for every trained strategy at `layer`, plus a summary of
// grand means across all shared layers.
inline EvalStageResult eval_stage(const RunPaths& run, const RunConfig& cfg, LayerId layer,
                                  const RetrievalProtocol& protocol) {
  const CrossModalDataset ds = load_dataset(run, cfg);
  const auto kinds = trained_strategies(run);
  if (kinds.empty()) {
    throw MissingArtifactError("no trained strategy checkpoints under " +
                               run.strategies().string());
  }
  EvalStageResult res;
  res.chance = validation_chance(ds, protocol, ds.num_classes);
  std::map<StrategyKind, std::map<LayerId, RetrievalReport>> by_layer;
  for (StrategyKind k : kinds) {
    const CrossModalModel model = load_model(run, k);
    for (LayerId l : kRegularizedLayers) by_layer[k][l] = evaluate_model(model, ds, l, protocol);
    if (!by_layer[k].contains(layer))
      by_layer[k][layer] = evaluate_model(model, ds, layer, protocol);
    res.reports.emplace_back(k, by_layer[k][layer]);
  }

  Json j;
  j["layer"] = to_string(layer);
  j["n_queries"] = protocol.n_queries;
  j["seed"] = protocol.seed;
  j["chance_map"] = {{"mean", res.chance.mean}, {"stddev", res.chance.stddev}};
  Json rows = Json::array();
  std::vector<std::pair<std::string, RetrievalReport>> labelled;
  for (const auto& [k, r] : res.reports) {
    rows.push_back(retrieval_json(r));
    labelled.emplace_back(display_name(k), r);
  }
  j["strategies"] = rows;
  std::ostringstream text;
  text << "Cross-modal retrieval mAP (%), layer " << to_string(layer) << ", " << protocol.n_queries
       << " queries per pair\n"
       << format_retrieval_table(labelled, false) << "chance mAP " << pct(res.chance.mean)
       << "\n\nCross-modal retrieval PR@" << protocol.k << " (%), layer " << to_string(layer)
       << "\n"
       << format_retrieval_table(labelled, true);
  for (const auto& [k, r] : res.reports) {
    for (const auto& w : r.warnings) text << "warning (" << to_string(k) << "): " << w << "\n";
  }

  Json layers = Json::array();
  std::ostringstream lt;
  lt << "Mean cross-modal retrieval mAP (%) across layers\n";
  std::size_t label_w = 8;
  for (StrategyKind k : kinds) label_w = std::max(label_w, display_name(k).size());
  auto row = [&](const std::string& label, const std::vector<std::string>& cells) {
    std::string line = label + std::string(label_w - label.size(), ' ') + " |";
    for (const auto& c : cells) line += std::string(c.size() < 10 ? 10 - c.size() : 0, ' ') + c;
    lt << line << "\n";
  };
  std::vector<std::string> head;
  for (LayerId l : kRegularizedLayers) head.push_back(to_string(l));
  row("Layer", head);
  for (StrategyKind k : kinds) {
    Json e;
    e["strategy"] = to_string(k);
    std::vector<std::string> cells;
    for (LayerId l : kRegularizedLayers) {
      e[to_string(l)] = by_layer[k][l].mean_map;
      cells.push_back(pct(by_layer[k][l].mean_map));
    }
    layers.push_back(e);
    row(display_name(k), cells);
  }

  const std::string stem = "retrieval_" + to_string(layer);
  detail::write_text(run.reports() / (stem + ".json"), j.dump(2) + "\n");
  detail::write_text(run.reports() / (stem + ".txt"), text.str());
  detail::write_text(run.reports() / "layers.json", layers.dump(2) + "\n");
  detail::write_text(run.reports() / "layers.txt", lt.str());
  res.table = text.str() + "\n" + lt.str();
  return res;
}

struct ZeroShotRow {
  std::string label;
  std::vector<ZeroShotAccuracy> accuracy;
  RetrievalReport retrieval;
};

struct ZeroShotStageResult {
  std::string table;
  std::vector<ZeroShotRow> rows;
  ChanceEstimate chance;
};

inline ZeroShotRow zero_shot_row(const std::string& label, const CrossModalModel& model,
                                 const CrossModalDataset& ds, LayerId layer,
                                 const RetrievalProtocol& protocol) {
  ZeroShotRow row{label, zero_shot_classify(model, ds), {}};
  row.retrieval = zero_shot_retrieval(validation_features(model, ds, layer), ds, protocol);
  row.retrieval.strategy = label;
  row.retrieval.layer = to_string(layer);
  return row;
}

// Held-out-class accuracy and retrieval for every trained strategy. The
// first row is the anchor trunk with untrained encoders for the other
// modalities.
inline ZeroShotStageResult zeroshot_stage(const RunPaths& run, const RunConfig& cfg) {
  const CrossModalDataset ds = load_dataset(run, cfg);
  if (!ds.has_holdout()) {
    throw NoHoldoutError("run " + run.root.string() +
                         " has no held-out classes (set zeroshot.holdout_frac or --holdout-frac)");
  }
  const auto kinds = trained_strategies(run);
  if (kinds.empty()) throw MissingArtifactError("no trained strategy checkpoints");
  const LayerId layer = cfg.eval_layer;
  ZeroShotStageResult res;
  res.chance = validation_chance(ds, cfg.protocol, ds.holdout_classes.size());
  if (std::filesystem::exists(run.anchor())) {
    const CrossModalNet anchor = read_checkpoint(run.anchor()).nets.at(0);
    CrossModalModel base =
        initial_model(StrategyKind::kATuneFrozen, ds, &anchor, cfg.arch, Rng(cfg.seed).fork(40));
    base.strategy = "anchor_untrained_encoders";
    res.rows.push_back(zero_shot_row("Anchor + untrained encoders", base, ds, layer, cfg.protocol));
  }
  for (StrategyKind k : kinds) {
    res.rows.push_back(zero_shot_row(display_name(k), load_model(run, k), ds, layer, cfg.protocol));
  }

  Json j;
  j["holdout_classes"] = ds.holdout_classes;
  j["layer"] = to_string(layer);
  j["chance_accuracy"] = 1.0 / static_cast<double>(ds.num_classes);
  j["chance_map"] = {{"mean", res.chance.mean}, {"stddev", res.chance.stddev}};
  Json rows = Json::array();
  for (const auto& r : res.rows) {
    Json acc = Json::object();
    for (const auto& a : r.accuracy) acc[a.modality] = a.accuracy;
    rows.push_back(
        {{"label", r.label}, {"accuracy", acc}, {"retrieval", retrieval_json(r.retrieval)}});
  }
  j["rows"] = rows;

  std::ostringstream t;
  std::size_t label_w = 8;
  for (const auto& r : res.rows) label_w = std::max(label_w, r.label.size());
  auto pad_left = [&](const std::string& s) { return s + std::string(label_w - s.size(), ' '); };
  auto cell = [](const std::string& s) {
    return std::string(s.size() < 7 ? 7 - s.size() : 0, ' ') + s;
  };
  t << "Zero-shot classification accuracy (%) on held-out classes, " << ds.num_classes << "-way\n"
    << pad_left("Modality") << " |";
  for (const auto& a : res.rows.front().accuracy) t << cell(a.modality);
  t << "\n";
  for (const auto& r : res.rows) {
    t << pad_left(r.label) << " |";
    for (const auto& a : r.accuracy) t << cell(pct(a.accuracy));
    t << "\n";
  }
  t << "chance " << pct(1.0 / static_cast<double>(ds.num_classes)) << "\n\n";
  std::vector<std::pair<std::string, RetrievalReport>> labelled;
  for (const auto& r : res.rows) labelled.emplace_back(r.label, r.retrieval);
  t << "Zero-shot retrieval mAP (%), held-out classes, layer " << to_string(layer) << "\n"
    << format_retrieval_table(labelled, false) << "chance mAP " << pct(res.chance.mean) << "\n";

  detail::write_text(run.reports() / "zeroshot.json", j.dump(2) + "\n");
  detail::write_text(run.reports() / "zeroshot.txt", t.str());
  res.table = t.str();
  return res;
}

struct UnitsRow {
  std::string label;
  UnitConsistencyReport report;
  double permuted_rate = 0.0;
};

struct UnitsStageResult {
  std::string table;
  std::vector<UnitsRow> rows;  // first row: untrained model
};

inline CrossModalModel untrained_model(const RunConfig& cfg, const CrossModalDataset& ds) {
  CrossModalModel m =
      initial_model(StrategyKind::kBlSharedScratch, ds, nullptr, cfg.arch, Rng(cfg.seed).fork(50));
  m.strategy = "untrained";
  return m;
}

inline UnitsRow units_row(const std::string& label, const CrossModalModel& model,
                          const CrossModalDataset& ds, LayerId layer, std::size_t top_k,
                          std::uint64_t seed) {
  const auto feats = validation_features(model, ds, layer);
  return {label, unit_activation_report(feats, top_k),
          permuted_consistency_rate(feats, top_k, 20, seed)};
}

inline UnitsStageResult units_stage(const RunPaths& run, const RunConfig& cfg, LayerId layer,
                                    std::size_t top_k) {
  const CrossModalDataset ds = load_dataset(run, cfg);
  const auto kinds = trained_strategies(run);
  if (kinds.empty()) throw MissingArtifactError("no trained strategy checkpoints");
  UnitsStageResult res;
  const std::uint64_t seed = cfg.protocol.seed + 2;
  res.rows.push_back(units_row("Untrained", untrained_model(cfg, ds), ds, layer, top_k, seed));
  for (StrategyKind k : kinds) {
    res.rows.push_back(units_row(display_name(k), load_model(run, k), ds, layer, top_k, seed));
  }
  Json j;
  j["layer"] = to_string(layer);
  j["top_k"] = top_k;
  Json rows = Json::array();
  std::ostringstream t;
  std::size_t label_w = 8;
  for (const auto& r : res.rows) label_w = std::max(label_w, r.label.size());
  t << "Unit consistency at " << to_string(layer) << " (top " << top_k << " per modality)\n"
    << "Model" << std::string(label_w - 5, ' ') << " |   rate | permuted\n";
  for (const auto& r : res.rows) {
    Json units = Json::array();
    for (const auto& u : r.report.units) {
      units.push_back({{"unit", u.unit},
                       {"majority_class", u.majority_class},
                       {"top_examples", u.top_examples},
                       {"consistent", u.consistent}});
    }
    rows.push_back({{"label", r.label},
                    {"consistency_rate", r.report.consistency_rate},
                    {"permuted_rate", r.permuted_rate},
                    {"units", units}});
    const std::string a = pct(r.report.consistency_rate), b = pct(r.permuted_rate);
    t << r.label << std::string(label_w - r.label.size(), ' ') << " |"
      << std::string(7 - std::min<std::size_t>(7, a.size()), ' ') << a << " |"
      << std::string(9 - std::min<std::size_t>(9, b.size()), ' ') << b << "\n";
  }
  j["rows"] = rows;
  const std::string stem = "units_" + to_string(layer);
  detail::write_text(run.reports() / (stem + ".json"), j.dump(2) + "\n");
  detail::write_text(run.reports() / (stem + ".txt"), t.str());
  res.table = t.str();
  return res;
}

// One CSV per trained strategy; returns the written paths.
inline std::vector<std::filesystem::path> export_stage(const RunPaths& run, const RunConfig& cfg,
                                                       LayerId layer) {
  const CrossModalDataset ds = load_dataset(run, cfg);
  const auto kinds = trained_strategies(run);
  if (kinds.empty()) throw MissingArtifactError("no trained strategy checkpoints");
  std::filesystem::create_directories(run.reports());
  std::vector<std::filesystem::path> out;
  for (StrategyKind k : kinds) {
    const auto path =
        run.reports() / ("embeddings_" + to_string(k) + "_" + to_string(layer) + ".csv");
    export_embeddings(validation_features(load_model(run, k), ds, layer), path, cfg.export_cap,
                      cfg.protocol.seed);
    out.push_back(path);
  }
  return out;
}

// Mean and sample standard deviation of per-run values.
struct Aggregate {
  double mean = 0.0;
  double stddev = 0.0;
  std::size_t runs = 0;
};

inline Aggregate aggregate(const std::vector<double>& v) {
  Aggregate a;
  a.runs = v.size();
  if (v.empty()) return a;
  for (double x : v) a.mean += x;
  a.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double s = 0.0;
    for (double x : v) s += (x - a.mean) * (x - a.mean);
    a.stddev = std::sqrt(s / static_cast<double>(v.size() - 1));
  }
  return a;
}

inline std::string format_aggregate(const Aggregate& a) {
  return pct(a.mean) + " +- " + pct(a.stddev);
}

// Read-only aggregation of evaluated run directories (typically one per seed).
inline std::string compare_runs(const std::vector<std::filesystem::path>& roots, LayerId layer,
                                Json* out_json = nullptr) {
  if (roots.empty()) throw ConfigError("compare: no run directories given");
  std::map<std::string, std::vector<double>> maps, prs, zs_map;
  std::map<std::string, std::map<std::string, std::vector<double>>> zs_acc;
  std::vector<std::string> order, zs_order;
  std::set<std::string> zs_modalities;
  std::vector<double> chance;
  for (const auto& root : roots) {
    const RunPaths run{root};
    const auto path = run.reports() / ("retrieval_" + to_string(layer) + ".json");
    detail::require(path, "retrieval report (run eval first)");
    const Json j = Json::parse(detail::read_text(path));
    chance.push_back(j["chance_map"]["mean"].get<double>());
    for (const auto& r : j["strategies"]) {
      const std::string s = r["strategy"].get<std::string>();
      if (!maps.contains(s)) order.push_back(s);
      maps[s].push_back(r["mean_map"].get<double>());
      prs[s].push_back(r["mean_pr_at_k"].get<double>());
    }
    const auto zpath = run.reports() / "zeroshot.json";
    if (std::filesystem::exists(zpath)) {
      const Json z = Json::parse(detail::read_text(zpath));
      for (const auto& r : z["rows"]) {
        const std::string s = r["label"].get<std::string>();
        if (!zs_map.contains(s)) zs_order.push_back(s);
        zs_map[s].push_back(r["retrieval"]["mean_map"].get<double>());
        for (const auto& [mod, acc] : r["accuracy"].items()) {
          zs_acc[s][mod].push_back(acc.get<double>());
          zs_modalities.insert(mod);
        }
      }
    }
  }
  std::ostringstream t;
  Json j;
  j["layer"] = to_string(layer);
  j["runs"] = roots.size();
  t << "Grand-mean retrieval at " << to_string(layer) << " over " << roots.size()
    << " run(s), mean +- std (%)\n";
  std::size_t w = 24;
  for (const auto& s : order) {
    t << s << std::string(s.size() < w ? w - s.size() : 1, ' ') << "mAP "
      << format_aggregate(aggregate(maps[s])) << "   PR@k " << format_aggregate(aggregate(prs[s]))
      << "\n";
    j["retrieval"][s] = {{"mean_map", aggregate(maps[s]).mean},
                         {"mean_map_std", aggregate(maps[s]).stddev},
                         {"mean_pr_at_k", aggregate(prs[s]).mean}};
  }
  t << "chance" << std::string(w - 6, ' ') << "mAP " << pct(aggregate(chance).mean) << "\n";
  j["chance_map"] = aggregate(chance).mean;
  if (!zs_order.empty()) {
    t << "\nZero-shot, mean +- std (%)\n";
    for (const auto& s : zs_order) {
      t << s << "\n  retrieval mAP " << format_aggregate(aggregate(zs_map[s])) << "\n";
      j["zeroshot"][s]["mean_map"] = aggregate(zs_map[s]).mean;
      for (const auto& mod : zs_modalities) {
        const auto a = aggregate(zs_acc[s][mod]);
        t << "  accuracy " << mod << " " << format_aggregate(a) << "\n";
        j["zeroshot"][s]["accuracy"][mod] = a.mean;
      }
    }
  }
  if (out_json) *out_json = j;
  return t.str();
}

}  // namespace xmodal
