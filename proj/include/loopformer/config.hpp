#pragma once

// Flat key=value run configuration. One key per line, '#' starts a comment,
// unknown or repeated keys are errors. Every field of the dataset, model,
// recurrence, trainer, curriculum, halting, sweep and analysis settings has
// a key; `to_text` writes the full set back out as a snapshot.

#include <charconv>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "loopformer/error.hpp"
#include "loopformer/inference.hpp"
#include "loopformer/kg_data.hpp"
#include "loopformer/model.hpp"
#include "loopformer/trainer.hpp"

namespace loopformer {

struct SweepConfig {
  std::vector<int> r_values{1, 2, 4, 6, 8, 10, 12, 16, 20};
  bool adaptive = true;
  double ratio_threshold = 0.60;
};

struct AnalysisConfig {
  std::string split = "test_id";  // test_id or test_ood
  int lens_hops = 4;
  int lens_iterations = 0;  // 0: recurrence.max
  int margin_r_max = 20;
  int patch_hops = 4;
  int patch_iterations = 0;  // 0: recurrence.max
  std::size_t patch_pairs = 50;
  std::size_t max_examples = 0;  // 0: whole split
};

struct RunConfig {
  DatasetConfig dataset;
  ModelConfig model = [] {
    ModelConfig m;
    m.vocab_size = 0;
    return m;
  }();
  RecurrencePolicy recurrence;
  TrainerConfig trainer;
  SystematicityConfig systematicity;
  CurriculumConfig curriculum;
  HaltingConfig halting;
  SweepConfig sweep;
  AnalysisConfig analysis;
  std::uint64_t checkpoint_interval = 10'000;
  int grad_check_seq_len = 4;
  std::size_t grad_check_coords = 200;

  // Vocabulary size follows the dataset when model.vocab_size is 0.
  ModelConfig resolved_model() const {
    ModelConfig m = model;
    const int v = Vocabulary{dataset.num_entities, dataset.num_relations}.size();
    if (m.vocab_size == 0) m.vocab_size = v;
    LOOPFORMER_CHECK(m.vocab_size == v, ErrorKind::kInvalidConfig,
                     "model.vocab_size must be 0 or num_entities + num_relations + 1");
    return m;
  }

  int analysis_iterations(int configured) const {
    return configured > 0 ? configured : (recurrence.mode == RecurrenceMode::kFixed ? recurrence.fixed
                                                                                      : recurrence.max);
  }
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

template <typename N>
N parse_integer(const std::string& key, const std::string& v) {
  N out{};
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  LOOPFORMER_CHECK(res.ec == std::errc() && res.ptr == v.data() + v.size(), ErrorKind::kInvalidConfig,
                   key + ": not an integer: '" + v + "'");
  return out;
}

inline double parse_real(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  LOOPFORMER_CHECK(res.ec == std::errc() && res.ptr == v.data() + v.size(), ErrorKind::kInvalidConfig,
                   key + ": not a number: '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw Error(ErrorKind::kInvalidConfig, key + ": expected true or false, got '" + v + "'");
}

template <typename N>
std::string show(N v) {
  if constexpr (std::is_floating_point_v<N>) {
    return format_number(v);
  } else {
    return std::to_string(v);
  }
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename N, typename Access>
Field number(std::string key, Access access) {
  return {key,
          [key, access](RunConfig& c, const std::string& v) {
            if constexpr (std::is_floating_point_v<N>) {
              access(c) = parse_real(key, v);
            } else {
              access(c) = parse_integer<N>(key, v);
            }
          },
          [access](const RunConfig& c) { return show(access(const_cast<RunConfig&>(c))); }};
}

template <typename N, typename Access>
Field optional_number(std::string key, Access access) {
  return {key,
          [key, access](RunConfig& c, const std::string& v) {
            if (v == "none") {
              access(c).reset();
            } else if constexpr (std::is_floating_point_v<N>) {
              access(c) = parse_real(key, v);
            } else {
              access(c) = parse_integer<N>(key, v);
            }
          },
          [access](const RunConfig& c) {
            const auto& o = access(const_cast<RunConfig&>(c));
            return o ? show(*o) : std::string("none");
          }};
}

inline const std::vector<Field>& fields() {
  static const std::vector<Field> all = [] {
    std::vector<Field> f;
    f.push_back({"experiment",
                 [](RunConfig& c, const std::string& v) {
                   LOOPFORMER_CHECK(v == "systematicity" || v == "extrapolation", ErrorKind::kInvalidConfig,
                                    "experiment: expected systematicity or extrapolation");
                   c.dataset.experiment = v == "systematicity" ? Experiment::kSystematicity
                                                               : Experiment::kExtrapolation;
                 },
                 [](const RunConfig& c) { return std::string(to_string(c.dataset.experiment)); }});
    f.push_back(number<int>("dataset.num_entities", [](RunConfig& c) -> auto& { return c.dataset.num_entities; }));
    f.push_back(number<int>("dataset.num_relations", [](RunConfig& c) -> auto& { return c.dataset.num_relations; }));
    f.push_back(number<int>("dataset.avg_out_degree", [](RunConfig& c) -> auto& { return c.dataset.avg_out_degree; }));
    f.push_back(number<double>("dataset.ood_fraction", [](RunConfig& c) -> auto& { return c.dataset.ood_fraction; }));
    f.push_back(number<std::size_t>("dataset.train_inferred_count",
                                    [](RunConfig& c) -> auto& { return c.dataset.train_inferred_count; }));
    f.push_back(number<std::size_t>("dataset.test_id_count", [](RunConfig& c) -> auto& { return c.dataset.test_id_count; }));
    f.push_back(number<std::size_t>("dataset.test_ood_count", [](RunConfig& c) -> auto& { return c.dataset.test_ood_count; }));
    f.push_back(number<int>("dataset.max_hops", [](RunConfig& c) -> auto& { return c.dataset.max_hops; }));
    f.push_back(number<std::size_t>("dataset.train_per_hop", [](RunConfig& c) -> auto& { return c.dataset.train_per_hop; }));
    f.push_back(number<std::size_t>("dataset.test_per_hop", [](RunConfig& c) -> auto& { return c.dataset.test_per_hop; }));
    f.push_back(number<std::uint64_t>("dataset.seed", [](RunConfig& c) -> auto& { return c.dataset.seed; }));

    f.push_back(number<int>("model.num_layers", [](RunConfig& c) -> auto& { return c.model.num_layers; }));
    f.push_back(number<int>("model.embed_dim", [](RunConfig& c) -> auto& { return c.model.embed_dim; }));
    f.push_back(number<int>("model.num_heads", [](RunConfig& c) -> auto& { return c.model.num_heads; }));
    f.push_back(number<int>("model.vocab_size", [](RunConfig& c) -> auto& { return c.model.vocab_size; }));
    f.push_back(number<int>("model.max_seq_len", [](RunConfig& c) -> auto& { return c.model.max_seq_len; }));
    f.push_back({"model.pos_mode",
                 [](RunConfig& c, const std::string& v) { c.model.pos_mode = parse_pos_mode(v); },
                 [](const RunConfig& c) { return std::string(to_string(c.model.pos_mode)); }});
    f.push_back({"model.init_mode",
                 [](RunConfig& c, const std::string& v) { c.model.init_mode = parse_init_mode(v); },
                 [](const RunConfig& c) { return std::string(to_string(c.model.init_mode)); }});
    f.push_back(number<double>("model.init_std", [](RunConfig& c) -> auto& { return c.model.init_std; }));

    f.push_back({"recurrence.mode",
                 [](RunConfig& c, const std::string& v) { c.recurrence.mode = parse_recurrence_mode(v); },
                 [](const RunConfig& c) { return std::string(to_string(c.recurrence.mode)); }});
    f.push_back(number<int>("recurrence.fixed", [](RunConfig& c) -> auto& { return c.recurrence.fixed; }));
    f.push_back(number<double>("recurrence.lambda", [](RunConfig& c) -> auto& { return c.recurrence.lambda; }));
    f.push_back(number<int>("recurrence.min", [](RunConfig& c) -> auto& { return c.recurrence.min; }));
    f.push_back(number<int>("recurrence.max", [](RunConfig& c) -> auto& { return c.recurrence.max; }));

    f.push_back(number<std::size_t>("train.batch_size", [](RunConfig& c) -> auto& { return c.trainer.batch_size; }));
    f.push_back(number<double>("train.lr", [](RunConfig& c) -> auto& { return c.trainer.adam.lr; }));
    f.push_back(number<double>("train.beta1", [](RunConfig& c) -> auto& { return c.trainer.adam.beta1; }));
    f.push_back(number<double>("train.beta2", [](RunConfig& c) -> auto& { return c.trainer.adam.beta2; }));
    f.push_back(number<double>("train.eps", [](RunConfig& c) -> auto& { return c.trainer.adam.eps; }));
    f.push_back(number<double>("train.weight_decay", [](RunConfig& c) -> auto& { return c.trainer.adam.weight_decay; }));
    f.push_back(number<std::uint64_t>("train.warmup_steps", [](RunConfig& c) -> auto& { return c.trainer.warmup_steps; }));
    f.push_back(number<std::uint64_t>("train.seed", [](RunConfig& c) -> auto& { return c.trainer.seed; }));
    f.push_back(number<std::size_t>("train.eval_batch_size", [](RunConfig& c) -> auto& { return c.trainer.eval_batch_size; }));
    f.push_back(number<std::uint64_t>("train.eval_interval", [](RunConfig& c) -> auto& { return c.trainer.eval_interval; }));
    f.push_back(number<std::uint64_t>("train.log_interval", [](RunConfig& c) -> auto& { return c.trainer.log_interval; }));
    f.push_back(number<std::uint64_t>("train.checkpoint_interval", [](RunConfig& c) -> auto& { return c.checkpoint_interval; }));
    f.push_back(number<std::uint64_t>("train.max_steps", [](RunConfig& c) -> auto& { return c.systematicity.max_steps; }));
    f.push_back(optional_number<std::uint64_t>("train.max_epochs",
                                               [](RunConfig& c) -> auto& { return c.systematicity.max_epochs; }));
    f.push_back(number<std::size_t>("train.train_eval_examples",
                                    [](RunConfig& c) -> auto& { return c.systematicity.train_eval_examples; }));
    f.push_back(optional_number<double>("train.stop_id_accuracy",
                                        [](RunConfig& c) -> auto& { return c.systematicity.stop_id_accuracy; }));
    f.push_back(optional_number<double>("train.stop_ood_accuracy",
                                        [](RunConfig& c) -> auto& { return c.systematicity.stop_ood_accuracy; }));

    f.push_back(number<int>("curriculum.start_hop", [](RunConfig& c) -> auto& { return c.curriculum.start_hop; }));
    f.push_back(number<int>("curriculum.max_hop", [](RunConfig& c) -> auto& { return c.curriculum.max_hop; }));
    f.push_back(number<double>("curriculum.threshold", [](RunConfig& c) -> auto& { return c.curriculum.threshold; }));
    f.push_back(number<std::uint64_t>("curriculum.stage_budget", [](RunConfig& c) -> auto& { return c.curriculum.stage_budget; }));

    f.push_back(number<double>("halting.eps_kl", [](RunConfig& c) -> auto& { return c.halting.eps_kl; }));
    f.push_back(number<double>("halting.entropy_threshold",
                               [](RunConfig& c) -> auto& { return c.halting.entropy_threshold; }));
    f.push_back(number<int>("halting.max_iterations", [](RunConfig& c) -> auto& { return c.halting.max_iterations; }));

    f.push_back({"sweep.r_values",
                 [](RunConfig& c, const std::string& v) {
                   c.sweep.r_values.clear();
                   for (const auto& cell : split_fields(v)) {
                     c.sweep.r_values.push_back(parse_integer<int>("sweep.r_values", trim(cell)));
                   }
                 },
                 [](const RunConfig& c) {
                   std::string s;
                   for (std::size_t i = 0; i < c.sweep.r_values.size(); ++i) {
                     s += (i ? "," : "") + std::to_string(c.sweep.r_values[i]);
                   }
                   return s;
                 }});
    f.push_back({"sweep.adaptive",
                 [](RunConfig& c, const std::string& v) { c.sweep.adaptive = parse_bool("sweep.adaptive", v); },
                 [](const RunConfig& c) { return std::string(c.sweep.adaptive ? "true" : "false"); }});
    f.push_back(number<double>("sweep.ratio_threshold", [](RunConfig& c) -> auto& { return c.sweep.ratio_threshold; }));

    f.push_back({"analysis.split",
                 [](RunConfig& c, const std::string& v) {
                   LOOPFORMER_CHECK(v == "test_id" || v == "test_ood", ErrorKind::kInvalidConfig,
                                    "analysis.split: expected test_id or test_ood");
                   c.analysis.split = v;
                 },
                 [](const RunConfig& c) { return c.analysis.split; }});
    f.push_back(number<int>("analysis.lens_hops", [](RunConfig& c) -> auto& { return c.analysis.lens_hops; }));
    f.push_back(number<int>("analysis.lens_iterations", [](RunConfig& c) -> auto& { return c.analysis.lens_iterations; }));
    f.push_back(number<int>("analysis.margin_r_max", [](RunConfig& c) -> auto& { return c.analysis.margin_r_max; }));
    f.push_back(number<int>("analysis.patch_hops", [](RunConfig& c) -> auto& { return c.analysis.patch_hops; }));
    f.push_back(number<int>("analysis.patch_iterations", [](RunConfig& c) -> auto& { return c.analysis.patch_iterations; }));
    f.push_back(number<std::size_t>("analysis.patch_pairs", [](RunConfig& c) -> auto& { return c.analysis.patch_pairs; }));
    f.push_back(number<std::size_t>("analysis.max_examples", [](RunConfig& c) -> auto& { return c.analysis.max_examples; }));

    f.push_back(number<int>("grad_check.seq_len", [](RunConfig& c) -> auto& { return c.grad_check_seq_len; }));
    f.push_back(number<std::size_t>("grad_check.coords", [](RunConfig& c) -> auto& { return c.grad_check_coords; }));
    return f;
  }();
  return all;
}

}  // namespace config_detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& f : config_detail::fields()) out.push_back(f.key);
  return out;
}

inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  for (const auto& f : config_detail::fields()) {
    if (f.key == key) {
      f.set(c, value);
      return;
    }
  }
  throw Error(ErrorKind::kInvalidConfig, "unknown config key '" + key + "'");
}

inline std::string get_config_value(const RunConfig& c, const std::string& key) {
  for (const auto& f : config_detail::fields()) {
    if (f.key == key) return f.get(c);
  }
  throw Error(ErrorKind::kInvalidConfig, "unknown config key '" + key + "'");
}

// Experiment presets seed the defaults; the file's `experiment` key, when
// present, picks the preset before any other key applies.
inline RunConfig parse_config(std::istream& in, const std::string& source = "<config>") {
  std::vector<std::pair<std::string, std::string>> entries;
  std::set<std::string> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = source + ":" + std::to_string(lineno) + ": ";
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    LOOPFORMER_CHECK(eq != std::string::npos, ErrorKind::kInvalidConfig, where + "expected key = value");
    const std::string key = config_detail::trim(line.substr(0, eq));
    const std::string value = config_detail::trim(line.substr(eq + 1));
    LOOPFORMER_CHECK(seen.insert(key).second, ErrorKind::kInvalidConfig, where + "duplicate key '" + key + "'");
    entries.emplace_back(key, value);
  }
  RunConfig c;
  for (const auto& [key, value] : entries) {
    if (key == "experiment") {
      set_config_value(c, key, value);
      if (c.dataset.experiment == Experiment::kExtrapolation) c.dataset = DatasetConfig::extrapolation();
    }
  }
  for (const auto& [key, value] : entries) {
    try {
      set_config_value(c, key, value);
    } catch (const Error& e) {
      throw Error(ErrorKind::kInvalidConfig, source + ": " + e.what());
    }
  }
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  LOOPFORMER_CHECK(in.good(), ErrorKind::kIo, "cannot open " + path.string());
  return parse_config(in, path.string());
}

inline std::string to_text(const RunConfig& c) {
  std::string out;
  for (const auto& f : config_detail::fields()) out += f.key + " = " + f.get(c) + "\n";
  return out;
}

// Cross-field checks shared by every subcommand.
inline void validate(const RunConfig& c) {
  c.resolved_model().validate();
  c.recurrence.validate();
  c.halting.validate();
  LOOPFORMER_CHECK(c.trainer.batch_size >= 1, ErrorKind::kInvalidConfig, "train.batch_size must be >= 1");
  LOOPFORMER_CHECK(c.trainer.eval_interval >= 1, ErrorKind::kInvalidConfig, "train.eval_interval must be >= 1");
  LOOPFORMER_CHECK(!c.sweep.r_values.empty(), ErrorKind::kInvalidConfig, "sweep.r_values must not be empty");
  LOOPFORMER_CHECK(c.curriculum.start_hop >= 2 && c.curriculum.start_hop <= c.curriculum.max_hop,
                   ErrorKind::kInvalidConfig, "curriculum hops out of range");
}

}  // namespace loopformer
