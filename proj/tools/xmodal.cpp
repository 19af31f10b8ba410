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

// xmodal: command-line driver for cross-modal representation experiments.

#include <chrono>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "xmodal/gradcheck.hpp"
#include "xmodal/pipeline.hpp"

namespace {

using namespace xmodal;

struct CommonArgs {
  std::string config;
  std::string run_dir;
  std::optional<std::uint64_t> seed;
  std::optional<double> holdout_frac;
  bool force = false;
};

void add_common(CLI::App* cmd, CommonArgs& a, bool with_force = true) {
  cmd->add_option("--config", a.config, "configuration file (sections of key = value)");
  cmd->add_option("--run-dir", a.run_dir, "run directory")->required();
  cmd->add_option("--seed", a.seed, "experiment seed");
  cmd->add_option("--holdout-frac", a.holdout_frac,
                  "fraction of classes removed from non-anchor training splits");
  if (with_force) cmd->add_flag("--force", a.force, "recompute outputs that already exist");
}

std::optional<RunConfig> requested_config(const CommonArgs& a) {
  const RunPaths run{a.run_dir};
  if (a.config.empty() && !a.seed && !a.holdout_frac) return std::nullopt;
  RunConfig cfg;
  if (!a.config.empty()) {
    cfg = load_config(a.config);
  } else if (std::filesystem::exists(run.config())) {
    cfg = load_config(run.config());
  }
  if (a.seed) cfg.seed = *a.seed;
  if (a.holdout_frac) cfg.holdout_frac = *a.holdout_frac;
  cfg.validate();
  return cfg;
}

RunConfig resolve(const CommonArgs& a, bool create = false) {
  return open_run(RunPaths{a.run_dir}, requested_config(a), a.force, create);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int cmd_gen_data(const CommonArgs& a) {
  const RunPaths run{a.run_dir};
  const RunConfig cfg = resolve(a, true);
  bool created = false;
  const CrossModalDataset ds = ensure_dataset(run, cfg, a.force, &created);
  std::cout << (created ? "wrote " : "kept existing ") << run.dataset().string() << "\n"
            << "seed " << ds.seed << ", " << ds.num_classes << " classes, anchor "
            << ds.modalities[ds.anchor].name << "\n";
  if (ds.has_holdout()) {
    std::cout << "held-out classes:";
    for (int c : ds.holdout_classes) std::cout << " " << c;
    std::cout << "\n";
  }
  std::cout << "modality   dim   train    val  train per class\n";
  for (const auto& m : ds.modalities) {
    std::vector<std::size_t> counts(ds.num_classes, 0);
    for (int y : m.train.labels) ++counts[static_cast<std::size_t>(y)];
    std::printf("%-8s %5zu %7zu %6zu ", m.name.c_str(), m.input_dim(), m.train.size(),
                m.val.size());
    for (std::size_t c : counts) std::printf(" %zu", c);
    std::printf("\n");
  }
  return 0;
}

int cmd_train(const CommonArgs& a, const std::string& strategy) {
  const RunPaths run{a.run_dir};
  std::vector<StrategyKind> kinds;
  if (strategy == "all") {
    kinds.assign(kAllStrategies.begin(), kAllStrategies.end());
  } else {
    kinds.push_back(parse_strategy(strategy));
  }
  const RunConfig cfg = resolve(a);
  const CrossModalDataset ds = load_dataset(run, cfg);
  for (StrategyKind k : kinds) {
    const auto t0 = std::chrono::steady_clock::now();
    const TrainStageResult r = train_stage(run, cfg, k, a.force);
    std::printf("%-18s %s", to_string(k).c_str(), r.skipped ? "kept existing" : "trained");
    std::printf("  val acc");
    for (std::size_t m = 0; m < ds.num_modalities(); ++m) {
      std::printf(" %s=%s", ds.modalities[m].name.c_str(), pct(r.val_accuracy[m]).c_str());
    }
    std::printf("  (%.1fs)\n", seconds_since(t0));
  }
  return 0;
}

int cmd_eval(const CommonArgs& a, const std::string& layer, std::size_t n_queries) {
  const RunConfig cfg = resolve(a);
  RetrievalProtocol protocol = cfg.protocol;
  if (n_queries) protocol.n_queries = n_queries;
  const LayerId id = layer.empty() ? cfg.eval_layer : parse_layer_id(layer);
  std::cout << eval_stage(RunPaths{a.run_dir}, cfg, id, protocol).table;
  return 0;
}

int cmd_zeroshot(const CommonArgs& a) {
  const RunConfig cfg = resolve(a);
  std::cout << zeroshot_stage(RunPaths{a.run_dir}, cfg).table;
  return 0;
}

int cmd_units(const CommonArgs& a, const std::string& layer, std::size_t top_k) {
  const RunConfig cfg = resolve(a);
  const LayerId id = layer.empty() ? LayerId::kSharedIn : parse_layer_id(layer);
  std::cout << units_stage(RunPaths{a.run_dir}, cfg, id, top_k ? top_k : cfg.top_k).table;
  return 0;
}

int cmd_export(const CommonArgs& a, const std::string& layer) {
  const RunConfig cfg = resolve(a);
  const LayerId id = layer.empty() ? cfg.eval_layer : parse_layer_id(layer);
  for (const auto& p : export_stage(RunPaths{a.run_dir}, cfg, id)) {
    std::cout << "wrote " << p.string() << "\n";
  }
  return 0;
}

int cmd_gradcheck(const GradcheckOptions& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  const GradcheckReport r = run_gradcheck(opt);
  std::cout << r.format();
  std::printf("%s (%zu cases, %.2fs)\n", r.passed() ? "PASS" : "FAIL", r.cases.size(),
              seconds_since(t0));
  if (!r.passed()) {
    const auto& w = r.worst();
    throw GradientCheckError("gradient check failed: " + w.name + " seed " +
                             std::to_string(w.seed) + " at " + w.worst_parameter);
  }
  return 0;
}

int cmd_compare(const std::vector<std::string>& dirs, const std::string& layer,
                const std::string& out) {
  std::vector<std::filesystem::path> roots(dirs.begin(), dirs.end());
  Json j;
  std::cout << compare_runs(roots, layer.empty() ? LayerId::kFc7 : parse_layer_id(layer), &j);
  if (!out.empty()) detail::write_text(out, j.dump(2) + "\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-modal representation learning on synthetic multi-modal data"};
  app.require_subcommand(1);

  CommonArgs gen, train, eval, zs, units, exp;
  std::string strategy, eval_layer, units_layer, export_layer, cmp_layer, cmp_out;
  std::size_t n_queries = 0, top_k = 0;
  std::vector<std::string> cmp_dirs;
  GradcheckOptions gc;

  auto* c_gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  add_common(c_gen, gen);
  auto* c_train = app.add_subcommand("train", "train one strategy (or all)");
  add_common(c_train, train);
  c_train->add_option("--strategy", strategy, "strategy name or 'all'")->required();
  auto* c_eval = app.add_subcommand("eval", "cross-modal retrieval reports");
  add_common(c_eval, eval, false);
  c_eval->add_option("--layer", eval_layer, "shared_in, fc6 or fc7 (default from config)");
  c_eval->add_option("--n-queries", n_queries, "queries per modality pair");
  auto* c_zs = app.add_subcommand("zeroshot", "held-out class accuracy and retrieval");
  add_common(c_zs, zs, false);
  auto* c_units = app.add_subcommand("units", "unit consistency across modalities");
  add_common(c_units, units, false);
  c_units->add_option("--layer", units_layer, "layer (default shared_in)");
  c_units->add_option("--top-k", top_k, "top responses per modality");
  auto* c_exp = app.add_subcommand("export", "write embeddings as CSV");
  add_common(c_exp, exp, false);
  c_exp->add_option("--layer", export_layer, "layer (default from config)");
  auto* c_gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  c_gc->add_option("--tolerance", gc.tolerance, "max relative error")->capture_default_str();
  c_gc->add_option("--epsilon", gc.epsilon, "finite-difference step")->capture_default_str();
  c_gc->add_option("--seeds", gc.num_seeds, "number of random seeds")->capture_default_str();
  c_gc->add_option("--seed", gc.base_seed, "first seed")->capture_default_str();
  auto* c_cmp = app.add_subcommand("compare", "aggregate evaluated runs (mean +- std)");
  c_cmp->add_option("run_dirs", cmp_dirs, "evaluated run directories")->required();
  c_cmp->add_option("--layer", cmp_layer, "layer (default fc7)");
  c_cmp->add_option("--out", cmp_out, "also write the aggregate as JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (c_gen->parsed()) return cmd_gen_data(gen);
    if (c_train->parsed()) return cmd_train(train, strategy);
    if (c_eval->parsed()) return cmd_eval(eval, eval_layer, n_queries);
    if (c_zs->parsed()) return cmd_zeroshot(zs);
    if (c_units->parsed()) return cmd_units(units, units_layer, top_k);
    if (c_exp->parsed()) return cmd_export(exp, export_layer);
    if (c_gc->parsed()) return cmd_gradcheck(gc);
    if (c_cmp->parsed()) return cmd_compare(cmp_dirs, cmp_layer, cmp_out);
  } catch (const xmodal::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
