#pragma once

// Interpretability: logit lens, margin curves with first-hit iterations,
// activation patching, and the generalization ratio.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "loopformer/csv.hpp"
#include "loopformer/error.hpp"
#include "loopformer/inference.hpp"
#include "loopformer/kg_data.hpp"
#include "loopformer/model.hpp"

namespace loopformer {

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

template <typename T>
Metadata analysis_metadata(const Model<T>& model, std::uint64_t dataset_seed, Metadata extra = {}) {
  Metadata m{{"model_checksum", hex64(model_checksum(model))}, {"dataset_seed", std::to_string(dataset_seed)}};
  m.insert(m.end(), extra.begin(), extra.end());
  return m;
}

// ---------------------------------------------------------------------------
// Logit lens

// Depth s = r*L + l is the state after l layers of iteration r + 1 (s = 0 is
// the embedding). Position j in 1..k-1 holds relation r_j and is scored
// against the bridge entity reached after hop j; position k is scored
// against the tail.
struct LensGrid {
  int hops = 0;
  int depths = 0;
  std::size_t n = 0;
  std::vector<double> accuracy;  // [depth * hops + (position - 1)]
  std::vector<int> predictions;  // [(example * depths + depth) * (hops + 1) + position]

  double at(int depth, int position) const {
    LOOPFORMER_CHECK(depth >= 0 && depth < depths && position >= 1 && position <= hops,
                     ErrorKind::kOutOfRange, "lens index out of range");
    return accuracy[static_cast<std::size_t>(depth * hops + position - 1)];
  }

  int prediction(std::size_t example, int depth, int position) const {
    return predictions[(example * depths + depth) * (hops + 1) + position];
  }

  std::string role(int position) const {
    return position == hops ? std::string("target") : "bridge_" + std::to_string(position);
  }
};

template <typename T>
LensGrid logit_lens(const Model<T>& model, const KnowledgeGraph& kg, std::span<const InferredFact> facts,
                    int iterations, std::size_t chunk = 512) {
  LOOPFORMER_CHECK(!facts.empty(), ErrorKind::kEmptySplit, "empty split");
  const Vocabulary vocab{kg.num_entities(), kg.num_relations()};
  LOOPFORMER_CHECK(model.config.vocab_size == vocab.size(),
                   ErrorKind::kShapeMismatch, "lens: model vocabulary does not match the graph");
  const int k = facts.front().hops();
  LensGrid g;
  g.hops = k;
  g.depths = iterations * model.config.num_layers + 1;
  g.n = facts.size();
  g.predictions.assign(g.n * g.depths * (k + 1), -1);
  std::vector<std::size_t> correct(static_cast<std::size_t>(g.depths * k), 0);
  // expected[i][j-1]: entity scored at position j.
  std::vector<std::vector<int>> expected;
  for (const auto& f : facts) {
    LOOPFORMER_CHECK(f.hops() == k, ErrorKind::kShapeMismatch, "lens: facts must share one hop count");
    const auto path = oracle_path(kg, f.head, f.relations);
    LOOPFORMER_CHECK(path.has_value() && path->back() == f.tail, ErrorKind::kInvalidConfig,
                     "lens: fact disagrees with the graph");
    expected.push_back(*path);
  }
  const int E = kg.num_entities();
  for (std::size_t start = 0; start < facts.size(); start += chunk) {
    const std::size_t count = std::min(chunk, facts.size() - start);
    std::vector<EncodedExample> ex;
    for (std::size_t i = 0; i < count; ++i) ex.push_back(encode_example(facts[start + i], E));
    const Batch batch = make_batch(ex, model.config.vocab_size - 1);
    const auto traced = forward_traced(model, batch, iterations);
    for (int depth = 0; depth < g.depths; ++depth) {
      const Tensor<T>& state = traced.trace.states[depth];
      for (int pos = 0; pos <= k; ++pos) {
        std::vector<std::int64_t> rows(count);
        for (std::size_t b = 0; b < count; ++b) rows[b] = static_cast<std::int64_t>(b) * batch.seq + pos;
        Tape<T> tape(false);
        const auto& logits = tape.value(lm_head(tape, model, gather_rows(tape, tape.constant(state), rows)));
        for (std::size_t b = 0; b < count; ++b) {
          const int pred = argmax_lowest(logits.row(static_cast<std::int64_t>(b)), logits.cols());
          const std::size_t i = start + b;
          g.predictions[(i * g.depths + depth) * (k + 1) + pos] = pred;
          if (pos >= 1) correct[depth * k + pos - 1] += pred == expected[i][pos - 1];
        }
      }
    }
  }
  for (std::size_t c : correct) g.accuracy.push_back(static_cast<double>(c) / static_cast<double>(g.n));
  return g;
}

inline CsvTable lens_table(const LensGrid& g, const std::string& split, const Metadata& meta) {
  CsvTable t;
  t.metadata = meta;
  t.columns = {"depth", "position", "role", "accuracy", "split"};
  for (int d = 0; d < g.depths; ++d) {
    for (int p = 1; p <= g.hops; ++p) {
      t.rows.push_back({std::to_string(d), std::to_string(p), g.role(p), format_number(g.at(d, p)), split});
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Margins

// First iteration (1-based) with a strictly positive margin.
inline std::optional<int> first_hit_iteration(std::span<const double> margins) {
  for (std::size_t t = 0; t < margins.size(); ++t) {
    if (margins[t] > 0.0) return static_cast<int>(t + 1);
  }
  return std::nullopt;
}

struct MarginCurve {
  int k = 0;
  std::size_t n = 0;
  std::vector<double> mean_margin;  // t = 1..R_max
  std::optional<double> first_hit_mean;
  std::size_t never_hit_count = 0;

  // Iteration (1-based) of the largest mean margin; ties go to the earliest.
  int peak_iteration() const {
    return static_cast<int>(std::max_element(mean_margin.begin(), mean_margin.end()) - mean_margin.begin()) + 1;
  }

  // The mean margin rises from t = 1 to an interior peak, then falls by
  // more than `tolerance` by t = R_max.
  bool rises_then_declines(double tolerance = 0.0) const {
    const int p = peak_iteration();
    if (p <= 1 || p >= static_cast<int>(mean_margin.size())) return false;
    const double peak = mean_margin[p - 1];
    return peak > mean_margin.front() + tolerance && peak > mean_margin.back() + tolerance;
  }
};

// Mean margins per iteration from per-example traces.
inline MarginCurve margin_curve_from_traces(int k, const std::vector<std::vector<double>>& traces) {
  LOOPFORMER_CHECK(!traces.empty(), ErrorKind::kEmptySplit, "empty split");
  MarginCurve c;
  c.k = k;
  c.n = traces.size();
  c.mean_margin.assign(traces.front().size(), 0.0);
  double hit_sum = 0.0;
  std::size_t hits = 0;
  for (const auto& tr : traces) {
    for (std::size_t t = 0; t < tr.size(); ++t) c.mean_margin[t] += tr[t] / static_cast<double>(c.n);
    if (const auto h = first_hit_iteration(tr)) {
      hit_sum += *h;
      ++hits;
    } else {
      ++c.never_hit_count;
    }
  }
  if (hits > 0) c.first_hit_mean = hit_sum / static_cast<double>(hits);
  return c;
}

template <typename T>
std::vector<MarginCurve> margin_curves(const Model<T>& model,
                                       const std::map<int, std::vector<EncodedExample>>& splits, int r_max,
                                       std::size_t chunk = 1024) {
  std::vector<MarginCurve> out;
  for (const auto& [k, examples] : splits) {
    const auto per_iter = iteration_answer_logits(model, std::span<const EncodedExample>(examples), r_max, chunk);
    std::vector<std::vector<double>> traces(examples.size());
    for (std::size_t i = 0; i < examples.size(); ++i) {
      for (const auto& logits : per_iter) {
        traces[i].push_back(
            logit_margin(logits.row(static_cast<std::int64_t>(i)), logits.cols(), examples[i].target));
      }
    }
    out.push_back(margin_curve_from_traces(k, traces));
  }
  return out;
}

inline CsvTable margin_table(const std::vector<MarginCurve>& curves, const Metadata& meta) {
  CsvTable t;
  t.metadata = meta;
  t.columns = {"k", "t", "mean_margin", "n", "first_hit_mean", "never_hit_count"};
  for (const auto& c : curves) {
    for (std::size_t i = 0; i < c.mean_margin.size(); ++i) {
      t.rows.push_back({std::to_string(c.k), std::to_string(i + 1), format_number(c.mean_margin[i]),
                        std::to_string(c.n), c.first_hit_mean ? format_number(*c.first_hit_mean) : "",
                        std::to_string(c.never_hit_count)});
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Activation patching

// Sites follow HiddenTrace numbering (0 = embedding, s = state after s layer
// applications). Exported as (iteration, layer) with iteration 0 layer 0 for
// the embedding and 1-based iteration and layer otherwise.
struct PatchGrid {
  int positions = 0;
  int sites = 0;
  int layers = 0;
  std::size_t pairs = 0;
  double clean_margin = 0.0;  // mean over pairs
  std::vector<double> delta;  // [position * sites + site]

  double at(int position, int site) const {
    LOOPFORMER_CHECK(position >= 0 && position < positions && site >= 0 && site < sites,
                     ErrorKind::kOutOfRange, "patch index out of range");
    return delta[static_cast<std::size_t>(position * sites + site)];
  }

  std::pair<int, int> iteration_layer(int site) const {
    if (site == 0) return {0, 0};
    return {(site - 1) / layers + 1, (site - 1) % layers + 1};
  }
};

// States at sites `site`..R*L of the clean run after replacing position
// `pos` of the site-`site` state with the corrupt run's vector.
template <typename T>
std::vector<Tensor<T>> patched_states(const Model<T>& model, const Batch& clean_batch, const HiddenTrace<T>& clean,
                                      const HiddenTrace<T>& corrupt, int site, int pos) {
  const int L = model.config.num_layers;
  const int last = clean.num_sites() - 1;
  LOOPFORMER_CHECK(site >= 0 && site <= last && pos >= 0 && pos < clean.seq, ErrorKind::kOutOfRange,
                   "patch site out of range");
  Tensor<T> start = clean.states[site];
  const Tensor<T>& src = corrupt.states[site];
  const std::int64_t d = clean.dim;
  for (std::int64_t b = 0; b < clean.batch; ++b) {
    const std::int64_t row = b * clean.seq + pos;
    std::copy(src.row(row), src.row(row) + d, start.row(row));
  }
  Tape<T> tape(false);
  std::vector<Tensor<T>> out{start};
  Var h = tape.constant(std::move(start));
  for (int s = site; s < last; ++s) {
    h = layer_apply(tape, model, s % L, h, clean_batch.mask);
    out.push_back(tape.value(h));
  }
  return out;
}

template <typename T>
double answer_margin(const Model<T>& model, const Batch& batch, const Tensor<T>& final_state) {
  Tape<T> tape(false);
  const auto& logits = tape.value(answer_logits(tape, model, tape.constant(final_state), batch));
  return logit_margin(logits.row(0), logits.cols(), batch.targets[0]);
}

// Margin change of the clean answer for every (position, site) patch,
// averaged over (clean, corrupt) pairs of equal length.
template <typename T>
PatchGrid activation_patch(const Model<T>& model,
                           std::span<const std::pair<EncodedExample, EncodedExample>> pairs, int iterations) {
  LOOPFORMER_CHECK(!pairs.empty(), ErrorKind::kEmptySplit, "patching needs at least one pair");
  PatchGrid g;
  g.layers = model.config.num_layers;
  g.sites = iterations * g.layers + 1;
  g.positions = static_cast<int>(pairs.front().first.input.size());
  g.pairs = pairs.size();
  g.delta.assign(static_cast<std::size_t>(g.positions * g.sites), 0.0);
  const int pad = model.config.vocab_size - 1;
  for (const auto& [clean_ex, corrupt_ex] : pairs) {
    LOOPFORMER_CHECK(static_cast<int>(clean_ex.input.size()) == g.positions &&
                         corrupt_ex.input.size() == clean_ex.input.size(),
                     ErrorKind::kShapeMismatch, "patching needs clean and corrupt inputs of one length");
    const std::vector<EncodedExample> c1{clean_ex}, c2{corrupt_ex};
    const Batch clean_batch = make_batch(c1, pad), corrupt_batch = make_batch(c2, pad);
    const auto clean = forward_traced(model, clean_batch, iterations).trace;
    const auto corrupt = forward_traced(model, corrupt_batch, iterations).trace;
    const double base = answer_margin(model, clean_batch, clean.states.back());
    g.clean_margin += base / static_cast<double>(pairs.size());
    for (int pos = 0; pos < g.positions; ++pos) {
      for (int site = 0; site < g.sites; ++site) {
        const auto states = patched_states(model, clean_batch, clean, corrupt, site, pos);
        const double delta = answer_margin(model, clean_batch, states.back()) - base;
        g.delta[static_cast<std::size_t>(pos * g.sites + site)] += delta / static_cast<double>(pairs.size());
      }
    }
  }
  return g;
}

template <typename T>
PatchGrid activation_patch(const Model<T>& model, const EncodedExample& clean, const EncodedExample& corrupt,
                           int iterations) {
  const std::vector<std::pair<EncodedExample, EncodedExample>> pairs{{clean, corrupt}};
  return activation_patch(model, std::span<const std::pair<EncodedExample, EncodedExample>>(pairs), iterations);
}

// Each clean example is paired with a uniformly drawn same-split example
// whose answer differs.
inline std::vector<std::pair<EncodedExample, EncodedExample>> sample_patch_pairs(
    std::span<const EncodedExample> split, std::size_t count, std::uint64_t seed) {
  LOOPFORMER_CHECK(split.size() >= 2, ErrorKind::kEmptySplit, "patching needs two or more examples");
  std::mt19937_64 rng(seed);
  std::vector<std::pair<EncodedExample, EncodedExample>> out;
  for (std::size_t i = 0; i < count; ++i) {
    const auto& clean = split[uniform_below(rng, split.size())];
    for (int attempt = 0; attempt < 1000; ++attempt) {
      const auto& other = split[uniform_below(rng, split.size())];
      if (other.target != clean.target && other.input.size() == clean.input.size()) {
        out.emplace_back(clean, other);
        break;
      }
    }
  }
  LOOPFORMER_CHECK(!out.empty(), ErrorKind::kExhaustedSampling, "no corrupt example with a different answer");
  return out;
}

inline CsvTable patch_table(const PatchGrid& g, const Metadata& meta) {
  CsvTable t;
  t.metadata = meta;
  t.columns = {"position", "iteration", "layer", "delta_margin"};
  for (int p = 0; p < g.positions; ++p) {
    for (int s = 0; s < g.sites; ++s) {
      const auto [it, layer] = g.iteration_layer(s);
      t.rows.push_back({std::to_string(p), std::to_string(it), std::to_string(layer), format_number(g.at(p, s))});
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Generalization ratio: the largest hop where any grid row reaches
// `threshold`, over the learnable depth.
inline double generalization_ratio(const AccuracyGrid& grid, int learnable_depth, double threshold = 0.60) {
  LOOPFORMER_CHECK(learnable_depth >= 1, ErrorKind::kInvalidConfig, "learnable depth must be >= 1");
  int best = 0;
  for (std::size_t c = 0; c < grid.hops.size(); ++c) {
    for (const auto& row : grid.rows) {
      if (row.accuracy[c] >= threshold) best = std::max(best, grid.hops[c]);
    }
  }
  return static_cast<double>(best) / learnable_depth;
}

}  // namespace loopformer
