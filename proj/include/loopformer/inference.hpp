#pragma once

// Inference-time recurrence: accuracy grids over (recurrence r, hop k) and
// KL/entropy adaptive halting.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "loopformer/csv.hpp"
#include "loopformer/error.hpp"
#include "loopformer/kg_data.hpp"
#include "loopformer/model.hpp"
#include "loopformer/trainer.hpp"

namespace loopformer {

// Answer-position logits through the final-norm lens after each iteration:
// element t-1 is the [n, V] block after t iterations, for t = 1..r_max.
// Identical to forward() at R = t, by iteration-extension.
template <typename T>
std::vector<Tensor<T>> iteration_answer_logits(const Model<T>& model, std::span<const EncodedExample> examples,
                                               int r_max, std::size_t chunk = 1024) {
  LOOPFORMER_CHECK(r_max >= 1, ErrorKind::kInvalidConfig, "recurrence R must be >= 1");
  LOOPFORMER_CHECK(!examples.empty(), ErrorKind::kEmptySplit, "empty split");
  const int V = model.config.vocab_size;
  const auto n = static_cast<std::int64_t>(examples.size());
  std::vector<Tensor<T>> out(r_max, Tensor<T>({n, V}));
  for (std::size_t start = 0; start < examples.size(); start += chunk) {
    const auto part = examples.subspan(start, std::min(chunk, examples.size() - start));
    const Batch batch = make_batch(part, V - 1);
    Tape<T> tape(false);
    Var h = embed(tape, model, batch);
    for (int t = 1; t <= r_max; ++t) {
      h = block_apply(tape, model, h, batch.mask);
      const auto& logits = tape.value(answer_logits(tape, model, h, batch));
      std::copy(logits.values.begin(), logits.values.end(),
                out[t - 1].values.begin() + static_cast<std::ptrdiff_t>(start) * V);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Halting

struct HaltingConfig {
  double eps_kl = 0.01;
  double entropy_threshold = 3.00;  // nats
  int max_iterations = 20;

  void validate() const {
    LOOPFORMER_CHECK(eps_kl >= 0.0 && entropy_threshold >= 0.0, ErrorKind::kInvalidConfig,
                     "halting thresholds must be non-negative");
    LOOPFORMER_CHECK(max_iterations >= 2, ErrorKind::kInvalidConfig, "halting needs R_max >= 2");
  }
};

struct HaltingStats {
  double kl = 0.0;       // KL(p || q), nats
  double entropy = 0.0;  // H(p), nats
};

inline void check_distribution(std::span<const double> p) {
  double total = 0.0;
  for (double v : p) {
    LOOPFORMER_CHECK(v >= 0.0 && std::isfinite(v), ErrorKind::kNumeric, "probability out of range");
    total += v;
  }
  LOOPFORMER_CHECK(std::abs(total - 1.0) <= 1e-6, ErrorKind::kNumeric, "distribution does not sum to 1");
}

inline HaltingStats halting_statistics(std::span<const double> p, std::span<const double> q) {
  LOOPFORMER_CHECK(p.size() == q.size() && !p.empty(), ErrorKind::kShapeMismatch,
                   "halting: distributions differ in size");
  check_distribution(p);
  check_distribution(q);
  HaltingStats s;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    s.entropy -= p[i] * std::log(p[i]);
    if (q[i] == 0.0) {
      s.kl = std::numeric_limits<double>::infinity();
    } else if (std::isfinite(s.kl)) {
      s.kl += p[i] * std::log(p[i] / q[i]);
    }
  }
  return s;
}

template <typename T>
std::vector<double> softmax(const T* logits, std::int64_t n) {
  const double mx = static_cast<double>(*std::max_element(logits, logits + n));
  std::vector<double> p(static_cast<std::size_t>(n));
  double z = 0.0;
  for (std::int64_t i = 0; i < n; ++i) z += (p[i] = std::exp(static_cast<double>(logits[i]) - mx));
  for (double& v : p) v /= z;
  return p;
}

// Correct logit minus the strongest competitor.
template <typename T>
double logit_margin(const T* logits, std::int64_t n, int correct) {
  LOOPFORMER_CHECK(n >= 2, ErrorKind::kInvalidConfig, "margin needs V >= 2");
  LOOPFORMER_CHECK(correct >= 0 && correct < n, ErrorKind::kOutOfRange, "correct token out of range");
  double best_other = -std::numeric_limits<double>::infinity();
  for (std::int64_t i = 0; i < n; ++i) {
    if (i != correct) best_other = std::max(best_other, static_cast<double>(logits[i]));
  }
  return static_cast<double>(logits[correct]) - best_other;
}

struct AdaptiveResult {
  int prediction = 0;
  int iterations = 0;
  std::vector<double> margin_trace;  // margin of the target at t = 1..R_max
};

// Halt index (1-based) given per-iteration statistics: first t >= 2 with
// kl(t) < eps and entropy(t) < H, else R_max. `stats[t-1]` compares t to t-1;
// stats[0] is unused.
inline int halt_iteration(std::span<const HaltingStats> stats, const HaltingConfig& cfg) {
  for (std::size_t t = 2; t <= stats.size(); ++t) {
    if (stats[t - 1].kl < cfg.eps_kl && stats[t - 1].entropy < cfg.entropy_threshold) return static_cast<int>(t);
  }
  return static_cast<int>(stats.size());
}

// Per-example statistics over t = 1..R_max, from iteration_answer_logits.
template <typename T>
std::vector<HaltingStats> example_halting_stats(std::span<const Tensor<T>> per_iter, std::int64_t row) {
  std::vector<HaltingStats> stats(per_iter.size());
  std::vector<double> prev;
  for (std::size_t t = 0; t < per_iter.size(); ++t) {
    auto p = softmax(per_iter[t].row(row), per_iter[t].cols());
    if (t == 0) {
      stats[t] = halting_statistics(p, p);
      stats[t].kl = std::numeric_limits<double>::infinity();
    } else {
      stats[t] = halting_statistics(p, prev);
    }
    prev = std::move(p);
  }
  return stats;
}

// Runs every example to R_max and picks each one's halting iteration; the
// prediction is the argmax at that iteration.
template <typename T>
std::vector<AdaptiveResult> adaptive_infer(const Model<T>& model, std::span<const EncodedExample> examples,
                                           const HaltingConfig& cfg, std::size_t chunk = 1024) {
  cfg.validate();
  const auto per_iter = iteration_answer_logits(model, examples, cfg.max_iterations, chunk);
  std::vector<AdaptiveResult> out(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto row = static_cast<std::int64_t>(i);
    const auto stats = example_halting_stats(std::span<const Tensor<T>>(per_iter), row);
    AdaptiveResult& r = out[i];
    r.iterations = halt_iteration(stats, cfg);
    const Tensor<T>& at = per_iter[r.iterations - 1];
    r.prediction = argmax_lowest(at.row(row), at.cols());
    for (const auto& logits : per_iter) {
      r.margin_trace.push_back(logit_margin(logits.row(row), logits.cols(), examples[i].target));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Accuracy grid

struct GridRow {
  std::optional<int> r;  // nullopt: adaptive halting row (r*)
  std::vector<double> accuracy;         // per hop column
  std::vector<double> mean_iterations;  // adaptive row only
};

struct AccuracyGrid {
  std::vector<int> hops;
  std::vector<std::size_t> n_examples;  // per hop column
  std::vector<GridRow> rows;            // ascending r, adaptive last

  double at(int r, int k) const {
    const auto col = column(k);
    for (const auto& row : rows) {
      if (row.r && *row.r == r) return row.accuracy[col];
    }
    throw Error(ErrorKind::kOutOfRange, "grid has no row r=" + std::to_string(r));
  }

  std::size_t column(int k) const {
    const auto it = std::find(hops.begin(), hops.end(), k);
    LOOPFORMER_CHECK(it != hops.end(), ErrorKind::kOutOfRange, "grid has no column k=" + std::to_string(k));
    return static_cast<std::size_t>(it - hops.begin());
  }

  const GridRow* adaptive() const {
    return !rows.empty() && !rows.back().r ? &rows.back() : nullptr;
  }
};

template <typename T>
AccuracyGrid recurrence_sweep(const Model<T>& model, const std::map<int, std::vector<EncodedExample>>& splits,
                              std::vector<int> r_values, const std::optional<HaltingConfig>& halting = {},
                              std::size_t chunk = 1024) {
  LOOPFORMER_CHECK(!splits.empty(), ErrorKind::kEmptySplit, "sweep needs at least one hop split");
  LOOPFORMER_CHECK(!r_values.empty(), ErrorKind::kInvalidConfig, "sweep needs at least one r");
  std::sort(r_values.begin(), r_values.end());
  r_values.erase(std::unique(r_values.begin(), r_values.end()), r_values.end());
  LOOPFORMER_CHECK(r_values.front() >= 1, ErrorKind::kInvalidConfig, "recurrence R must be >= 1");
  if (halting) halting->validate();
  int r_max = r_values.back();
  if (halting) r_max = std::max(r_max, halting->max_iterations);

  AccuracyGrid grid;
  for (int r : r_values) grid.rows.push_back({r, {}, {}});
  if (halting) grid.rows.push_back({std::nullopt, {}, {}});
  for (const auto& [k, examples] : splits) {
    LOOPFORMER_CHECK(!examples.empty(), ErrorKind::kEmptySplit, "empty split for k=" + std::to_string(k));
    grid.hops.push_back(k);
    grid.n_examples.push_back(examples.size());
    const auto per_iter = iteration_answer_logits(model, std::span<const EncodedExample>(examples), r_max, chunk);
    const auto n = static_cast<double>(examples.size());
    for (std::size_t ri = 0; ri < r_values.size(); ++ri) {
      const Tensor<T>& logits = per_iter[r_values[ri] - 1];
      std::size_t correct = 0;
      for (std::size_t i = 0; i < examples.size(); ++i) {
        correct += argmax_lowest(logits.row(static_cast<std::int64_t>(i)), logits.cols()) == examples[i].target;
      }
      grid.rows[ri].accuracy.push_back(static_cast<double>(correct) / n);
    }
    if (halting) {
      std::size_t correct = 0;
      double iters = 0.0;
      for (std::size_t i = 0; i < examples.size(); ++i) {
        const auto row = static_cast<std::int64_t>(i);
        const auto head = std::span<const Tensor<T>>(per_iter).first(halting->max_iterations);
        const int t = halt_iteration(example_halting_stats(head, row), *halting);
        correct += argmax_lowest(per_iter[t - 1].row(row), per_iter[t - 1].cols()) == examples[i].target;
        iters += t;
      }
      grid.rows.back().accuracy.push_back(static_cast<double>(correct) / n);
      grid.rows.back().mean_iterations.push_back(iters / n);
    }
  }
  return grid;
}

using Metadata = std::vector<std::pair<std::string, std::string>>;

inline const std::vector<std::string>& grid_columns() {
  static const std::vector<std::string> cols{"r", "k", "accuracy", "n_examples", "mean_iterations"};
  return cols;
}

inline CsvTable grid_table(const AccuracyGrid& grid, const Metadata& meta) {
  CsvTable t;
  t.metadata = meta;
  t.columns = grid_columns();
  for (const auto& row : grid.rows) {
    for (std::size_t c = 0; c < grid.hops.size(); ++c) {
      t.rows.push_back({row.r ? std::to_string(*row.r) : "adaptive", std::to_string(grid.hops[c]),
                        format_number(row.accuracy[c]), std::to_string(grid.n_examples[c]),
                        row.r ? "" : format_number(row.mean_iterations[c])});
    }
  }
  return t;
}

inline AccuracyGrid grid_from_table(const CsvTable& t) {
  LOOPFORMER_CHECK(t.columns == grid_columns(), ErrorKind::kFormat, "not a grid table");
  AccuracyGrid g;
  std::map<int, std::size_t> n_by_k;
  std::map<std::optional<int>, std::map<int, std::pair<double, double>>> cells;
  for (const auto& row : t.rows) {
    const std::optional<int> r = row[0] == "adaptive" ? std::nullopt : std::optional<int>(std::stoi(row[0]));
    const int k = std::stoi(row[1]);
    n_by_k[k] = std::stoul(row[3]);
    cells[r][k] = {parse_number(row[2]), row[4].empty() ? 0.0 : parse_number(row[4])};
  }
  for (const auto& [k, n] : n_by_k) {
    g.hops.push_back(k);
    g.n_examples.push_back(n);
  }
  for (const auto& [r, by_k] : cells) {
    GridRow gr{r, {}, {}};
    for (int k : g.hops) {
      const auto it = by_k.find(k);
      LOOPFORMER_CHECK(it != by_k.end(), ErrorKind::kFormat, "grid table has a missing cell");
      gr.accuracy.push_back(it->second.first);
      if (!r) gr.mean_iterations.push_back(it->second.second);
    }
    g.rows.push_back(std::move(gr));
  }
  // std::optional orders nullopt first; the adaptive row belongs last.
  if (!g.rows.empty() && !g.rows.front().r) std::rotate(g.rows.begin(), g.rows.begin() + 1, g.rows.end());
  return g;
}

}  // namespace loopformer
