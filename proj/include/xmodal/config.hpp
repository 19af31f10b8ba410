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

// Run configuration: a sectioned key=value file.
//
//   [data]      seed, class/latent sizes, generator scales, modality list and
//               per-modality keys "<name>.dim", "<name>.distractors", ...
//   [arch]      network widths and init scales
//   [train]     anchor and strategy schedules, logging period
//   [reg]       lambdas per layer, mixture size, density fitting
//   [eval]      retrieval protocol, layer, unit report, export cap
//   [zeroshot]  holdout fraction and seed
//
// Blank lines and lines starting with '#' or ';' are ignored. Unknown
// sections and keys are rejected. to_ini() writes every key, so a stored
// snapshot is the fully resolved configuration.

#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include "xmodal/crossmodal.hpp"
#include "xmodal/density.hpp"
#include "xmodal/error.hpp"
#include "xmodal/evalkit.hpp"
#include "xmodal/synthdata.hpp"

namespace xmodal {

struct RunConfig {
  std::uint64_t seed = 1;
  DataSpec data = DataSpec::desk_default();
  ArchConfig arch;
  CurriculumSchedule anchor_schedule{0, 3000, 0.02, 32, 5e-4};
  CurriculumSchedule schedule;
  std::size_t log_every = 10;
  RegConfig reg;
  std::size_t density_max_samples = 0;
  EmOptions em{200, 1e-6, 1.0};
  RetrievalProtocol protocol;
  LayerId eval_layer = LayerId::kFc7;
  std::size_t top_k = 5;
  std::size_t export_cap = 1000;
  double holdout_frac = 0.0;
  std::uint64_t holdout_seed = 0;

  DensityFitOptions density_options(DensityKind kind) const {
    return {kind, reg.num_components, density_max_samples, em};
  }

  StrategySpec strategy(StrategyKind kind) const {
    StrategySpec s;
    s.kind = kind;
    s.curriculum = schedule;
    s.reg = reg;
    return s;
  }

  void validate() const {
    data.validate();
    arch.validate();
    if (arch.num_classes != data.num_classes) {
      throw ConfigError("arch.num_classes must equal data.num_classes");
    }
    anchor_schedule.validate();
    schedule.validate();
    reg.validate();
    if (!(em.variance_floor > 0)) throw ConfigError("reg.variance_floor must be positive");
    if (!(em.tol >= 0)) throw ConfigError("reg.em_tol must be nonnegative");
    if (protocol.n_queries == 0) throw ConfigError("eval.n_queries must be >= 1");
    if (protocol.k == 0) throw ConfigError("eval.k must be >= 1");
    if (eval_layer == LayerId::kLogits) throw ConfigError("eval.layer must be a shared layer");
    if (top_k == 0 || top_k > data.val_per_class * data.num_classes) {
      throw ConfigError("eval.top_k must be in [1, validation size]");
    }
    if (!(holdout_frac >= 0 && holdout_frac < 1)) {
      throw ConfigError("zeroshot.holdout_frac must be in [0, 1)");
    }
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const char* end = text.data() + text.size();
  const auto res = std::from_chars(text.data(), end, value);
  if (res.ec != std::errc() || res.ptr != end) {
    throw ConfigError("config: bad value for " + key + ": '" + text + "'");
  }
  return value;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("config: bad boolean for " + key + ": '" + text + "'");
}

inline std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ',')) out.push_back(trim(item));
  return out;
}

struct Binding {
  std::string key;  // "section.key"
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename F>
Binding bind(std::string key, F field) {
  using T = std::remove_reference_t<decltype(field(std::declval<RunConfig&>()))>;
  auto get = [field](const RunConfig& c) -> std::string {
    const T v = field(const_cast<RunConfig&>(c));
    if constexpr (std::is_same_v<T, bool>) {
      return v ? "true" : "false";
    } else if constexpr (std::is_floating_point_v<T>) {
      return format_double(v);
    } else {
      return std::to_string(v);
    }
  };
  auto set = [key, field](RunConfig& c, const std::string& text) {
    if constexpr (std::is_same_v<T, bool>) {
      field(c) = parse_bool(key, text);
    } else {
      field(c) = parse_number<T>(key, text);
    }
  };
  return {std::move(key), get, set};
}

#define XMODAL_FIELD(expr) [](RunConfig& c) -> auto& { return c.expr; }

inline std::vector<Binding> fixed_bindings() {
  std::vector<Binding> b;
  b.push_back(bind("data.seed", XMODAL_FIELD(seed)));
  b.push_back(bind("data.num_classes", XMODAL_FIELD(data.num_classes)));
  b.push_back(bind("data.latent_dim", XMODAL_FIELD(data.latent_dim)));
  b.push_back(bind("data.num_parts", XMODAL_FIELD(data.num_parts)));
  b.push_back(bind("data.parts_per_example", XMODAL_FIELD(data.parts_per_example)));
  b.push_back(bind("data.prototype_scale", XMODAL_FIELD(data.prototype_scale)));
  b.push_back(bind("data.part_scale", XMODAL_FIELD(data.part_scale)));
  b.push_back(bind("data.part_concentration", XMODAL_FIELD(data.part_concentration)));
  b.push_back(bind("data.spread", XMODAL_FIELD(data.spread)));
  b.push_back(bind("data.val_per_class", XMODAL_FIELD(data.val_per_class)));

  b.push_back(bind("arch.num_classes", XMODAL_FIELD(arch.num_classes)));
  b.push_back(bind("arch.shared_dim", XMODAL_FIELD(arch.shared_dim)));
  b.push_back(bind("arch.hidden_dim", XMODAL_FIELD(arch.hidden_dim)));
  b.push_back(bind("arch.encoder_width", XMODAL_FIELD(arch.encoder_width)));
  b.push_back(bind("arch.encoder_layers", XMODAL_FIELD(arch.encoder_layers)));
  b.push_back(bind("arch.encoder_init_std", XMODAL_FIELD(arch.encoder_init_std)));
  b.push_back(bind("arch.trunk_init_std", XMODAL_FIELD(arch.trunk_init_std)));

  b.push_back(bind("train.anchor_iters", XMODAL_FIELD(anchor_schedule.total_iters)));
  b.push_back(bind("train.anchor_lr", XMODAL_FIELD(anchor_schedule.lr)));
  b.push_back(bind("train.anchor_batch_size", XMODAL_FIELD(anchor_schedule.batch_size)));
  b.push_back(bind("train.anchor_weight_decay", XMODAL_FIELD(anchor_schedule.weight_decay)));
  b.push_back(bind("train.freeze_iters", XMODAL_FIELD(schedule.freeze_iters)));
  b.push_back(bind("train.total_iters", XMODAL_FIELD(schedule.total_iters)));
  b.push_back(bind("train.lr", XMODAL_FIELD(schedule.lr)));
  b.push_back(bind("train.batch_size", XMODAL_FIELD(schedule.batch_size)));
  b.push_back(bind("train.weight_decay", XMODAL_FIELD(schedule.weight_decay)));
  b.push_back(bind("train.log_every", XMODAL_FIELD(log_every)));

  for (LayerId id : kRegularizedLayers) {
    b.push_back(bind("reg.lambda_" + to_string(id),
                     [id](RunConfig& c) -> auto& { return c.reg.lambdas[id]; }));
  }
  b.push_back(bind("reg.num_components", XMODAL_FIELD(reg.num_components)));
  b.push_back(bind("reg.regularize_anchor", XMODAL_FIELD(reg.regularize_anchor)));
  b.push_back(bind("reg.max_samples", XMODAL_FIELD(density_max_samples)));
  b.push_back(bind("reg.em_max_iters", XMODAL_FIELD(em.max_iters)));
  b.push_back(bind("reg.em_tol", XMODAL_FIELD(em.tol)));
  b.push_back(bind("reg.variance_floor", XMODAL_FIELD(em.variance_floor)));

  b.push_back(bind("eval.n_queries", XMODAL_FIELD(protocol.n_queries)));
  b.push_back(bind("eval.k", XMODAL_FIELD(protocol.k)));
  b.push_back(bind("eval.seed", XMODAL_FIELD(protocol.seed)));
  b.push_back({"eval.layer", [](const RunConfig& c) { return to_string(c.eval_layer); },
               [](RunConfig& c, const std::string& v) { c.eval_layer = parse_layer_id(v); }});
  b.push_back(bind("eval.top_k", XMODAL_FIELD(top_k)));
  b.push_back(bind("eval.export_cap", XMODAL_FIELD(export_cap)));

  b.push_back(bind("zeroshot.holdout_frac", XMODAL_FIELD(holdout_frac)));
  b.push_back(bind("zeroshot.holdout_seed", XMODAL_FIELD(holdout_seed)));
  return b;
}

#undef XMODAL_FIELD

// Keys under [data] for one modality, e.g. "nat.dim".
inline void apply_modality_key(ModalitySpec& m, const std::string& field, const std::string& full,
                               const std::string& value) {
  if (field == "dim") {
    m.input_dim = parse_number<std::size_t>(full, value);
  } else if (field == "distractors") {
    m.distractor_dims = parse_number<std::size_t>(full, value);
  } else if (field == "nonlinearity") {
    m.nonlinearity = parse_nonlinearity(value);
  } else if (field == "gain") {
    m.gain = parse_number<double>(full, value);
  } else if (field == "noise") {
    m.noise_std = parse_number<double>(full, value);
  } else if (field == "train_per_class") {
    m.train_per_class = parse_number<std::size_t>(full, value);
  } else {
    throw ConfigError("config: unknown key " + full);
  }
}

}  // namespace detail

inline RunConfig parse_config(std::string_view text, RunConfig base = {}) {
  // Collect first so that [data] modalities/anchor can be applied before the
  // per-modality keys regardless of their order in the file.
  std::vector<std::pair<std::string, std::string>> entries;
  static const std::set<std::string> kSections = {"data", "arch", "train",
                                                  "reg",  "eval", "zeroshot"};
  std::string section;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string raw;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = detail::trim(raw);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    const std::string where = " (line " + std::to_string(line_no) + ")";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config: malformed section header" + where);
      section = detail::trim(std::string_view(line).substr(1, line.size() - 2));
      if (!kSections.count(section)) {
        throw ConfigError("config: unknown section [" + section + "]" + where);
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config: expected key = value" + where);
    if (section.empty()) throw ConfigError("config: key outside any section" + where);
    const std::string key = detail::trim(std::string_view(line).substr(0, eq));
    const std::string value = detail::trim(std::string_view(line).substr(eq + 1));
    if (key.empty()) throw ConfigError("config: empty key" + where);
    entries.emplace_back(section + "." + key, value);
  }

  RunConfig c = std::move(base);
  std::set<std::string> seen;
  for (const auto& [key, value] : entries) {
    if (!seen.insert(key).second) throw ConfigError("config: duplicate key " + key);
  }
  std::string anchor_name = c.data.modalities.at(c.data.anchor).name;
  for (const auto& [key, value] : entries) {
    if (key == "data.modalities") {
      const DataSpec desk = DataSpec::desk_default();
      std::vector<ModalitySpec> mods;
      for (const std::string& name : detail::split_list(value)) {
        ModalitySpec m;
        for (const auto& d : c.data.modalities) {
          if (d.name == name) m = d;
        }
        if (m.name.empty()) {
          for (const auto& d : desk.modalities) {
            if (d.name == name) m = d;
          }
        }
        m.name = name;
        mods.push_back(m);
      }
      c.data.modalities = std::move(mods);
    } else if (key == "data.anchor") {
      anchor_name = value;
    }
  }
  c.data.anchor = c.data.modalities.size();
  for (std::size_t m = 0; m < c.data.modalities.size(); ++m) {
    if (c.data.modalities[m].name == anchor_name) c.data.anchor = m;
  }
  if (c.data.anchor == c.data.modalities.size()) {
    throw ConfigError("config: data.anchor '" + anchor_name + "' is not a listed modality");
  }

  const auto bindings = detail::fixed_bindings();
  for (const auto& [key, value] : entries) {
    if (key == "data.modalities" || key == "data.anchor") continue;
    bool done = false;
    for (const auto& b : bindings) {
      if (b.key == key) {
        b.set(c, value);
        done = true;
        break;
      }
    }
    if (done) continue;
    if (key.rfind("data.", 0) == 0) {
      const std::string rest = key.substr(5);
      const auto dot = rest.rfind('.');
      if (dot != std::string::npos) {
        const std::string name = rest.substr(0, dot);
        for (auto& m : c.data.modalities) {
          if (m.name == name) {
            detail::apply_modality_key(m, rest.substr(dot + 1), key, value);
            done = true;
          }
        }
      }
    }
    if (!done) throw ConfigError("config: unknown key " + key);
  }
  c.validate();
  return c;
}

inline std::string to_ini(const RunConfig& c) {
  std::ostringstream out;
  const auto bindings = detail::fixed_bindings();
  std::string current;
  auto header = [&](const std::string& section) {
    if (section == current) return;
    if (!current.empty()) out << "\n";
    out << "[" << section << "]\n";
    current = section;
  };
  for (const auto& b : bindings) {
    const auto dot = b.key.find('.');
    const std::string section = b.key.substr(0, dot);
    header(section);
    out << b.key.substr(dot + 1) << " = " << b.get(c) << "\n";
    if (b.key == "data.val_per_class") {
      std::string names;
      for (const auto& m : c.data.modalities) names += (names.empty() ? "" : ",") + m.name;
      out << "modalities = " << names << "\n";
      out << "anchor = " << c.data.modalities.at(c.data.anchor).name << "\n";
      for (const auto& m : c.data.modalities) {
        out << m.name << ".dim = " << m.input_dim << "\n";
        out << m.name << ".distractors = " << m.distractor_dims << "\n";
        out << m.name << ".nonlinearity = " << to_string(m.nonlinearity) << "\n";
        out << m.name << ".gain = " << detail::format_double(m.gain) << "\n";
        out << m.name << ".noise = " << detail::format_double(m.noise_std) << "\n";
        out << m.name << ".train_per_class = " << m.train_per_class << "\n";
      }
    }
  }
  return out.str();
}

inline RunConfig load_config(const std::filesystem::path& path, RunConfig base = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config(text.str(), std::move(base));
}

}  // namespace xmodal
