#pragma once

// Optimization: AdamW with linear warmup, fixed or clipped-Poisson recurrence
// sampling, the systematicity training loop and the hop-depth curriculum.
//
// Every random choice made at step s (recurrence draw, curriculum batch) is
// seeded from (seed, s), and epoch orders from (seed, epoch), so a run resumed
// from a checkpoint at step s continues bit-identically.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "loopformer/error.hpp"
#include "loopformer/kg_data.hpp"
#include "loopformer/model.hpp"
#include "loopformer/tensor.hpp"

namespace loopformer {

// ---------------------------------------------------------------------------
// Recurrence policy

enum class RecurrenceMode { kFixed, kDynamic };

inline std::string_view to_string(RecurrenceMode m) {
  return m == RecurrenceMode::kFixed ? "fixed" : "dynamic";
}

inline RecurrenceMode parse_recurrence_mode(std::string_view s) {
  if (s == "fixed") return RecurrenceMode::kFixed;
  if (s == "dynamic") return RecurrenceMode::kDynamic;
  throw Error(ErrorKind::kInvalidConfig, "unknown recurrence mode '" + std::string(s) + "'");
}

struct RecurrencePolicy {
  RecurrenceMode mode = RecurrenceMode::kFixed;
  int fixed = 4;
  double lambda = 4.0;
  int min = 2;
  int max = 8;

  static RecurrencePolicy fixed_at(int r) { return {RecurrenceMode::kFixed, r, 0.0, r, r}; }
  static RecurrencePolicy dynamic(double lambda, int r_min, int r_max) {
    return {RecurrenceMode::kDynamic, r_max, lambda, r_min, r_max};
  }

  void validate() const {
    if (mode == RecurrenceMode::kFixed) {
      LOOPFORMER_CHECK(fixed >= 1, ErrorKind::kInvalidConfig, "fixed recurrence must be >= 1");
    } else {
      LOOPFORMER_CHECK(min >= 1 && min <= max, ErrorKind::kInvalidConfig,
                       "dynamic recurrence needs 1 <= R_min <= R_max");
      LOOPFORMER_CHECK(lambda > 0.0, ErrorKind::kInvalidConfig, "poisson lambda must be positive");
    }
  }

  // Recurrence used when gating on held-out accuracy.
  int eval_recurrence() const { return mode == RecurrenceMode::kFixed ? fixed : max; }
};

inline int sample_recurrence(const RecurrencePolicy& policy, std::mt19937_64& rng) {
  if (policy.mode == RecurrenceMode::kFixed) return policy.fixed;
  std::poisson_distribution<int> poisson(policy.lambda);
  return std::clamp(poisson(rng), policy.min, policy.max);
}

// ---------------------------------------------------------------------------
// Learning rate and AdamW

// Linear ramp from 0 at step 0 to base_lr at warmup_steps, constant after.
inline double lr_at(std::uint64_t step, double base_lr, std::uint64_t warmup_steps) {
  if (warmup_steps == 0 || step >= warmup_steps) return base_lr;
  return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
}

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

template <typename T>
struct OptimizerState {
  AdamWConfig config;
  std::uint64_t step = 0;  // completed updates
  std::vector<Tensor<T>> first_moment;
  std::vector<Tensor<T>> second_moment;
  std::vector<char> decay;  // weight decay applies to this parameter
};

// Decay applies to matrices (projection weights and embeddings); biases and
// layer-norm parameters are exempt.
template <typename T>
OptimizerState<T> make_optimizer(Model<T>& model, const AdamWConfig& config) {
  OptimizerState<T> s;
  s.config = config;
  for (auto& [name, p] : model.named_parameters()) {
    s.first_moment.emplace_back(p->shape);
    s.second_moment.emplace_back(p->shape);
    s.decay.push_back(p->shape.size() >= 2 ? 1 : 0);
  }
  return s;
}

template <typename T>
void adamw_step(std::span<Tensor<T>* const> params, std::span<const std::vector<T>> grads,
                OptimizerState<T>& state, double lr) {
  LOOPFORMER_CHECK(params.size() == grads.size() && params.size() == state.first_moment.size(),
                   ErrorKind::kShapeMismatch, "adamw: parameter/gradient count mismatch");
  ++state.step;
  const double b1 = state.config.beta1, b2 = state.config.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  const T step_size = static_cast<T>(lr / bc1);
  const T sqrt_bc2 = static_cast<T>(std::sqrt(bc2));
  const T eps = static_cast<T>(state.config.eps);
  const T tb1 = static_cast<T>(b1), tb2 = static_cast<T>(b2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i]->values;
    const auto& g = grads[i];
    auto& m = state.first_moment[i].values;
    auto& v = state.second_moment[i].values;
    LOOPFORMER_CHECK(g.size() == p.size() && m.size() == p.size(), ErrorKind::kShapeMismatch,
                     "adamw: gradient shape mismatch");
    const T shrink = state.decay[i] ? static_cast<T>(1.0 - lr * state.config.weight_decay) : T(1);
    for (std::size_t j = 0; j < p.size(); ++j) {
      p[j] *= shrink;
      m[j] = tb1 * m[j] + (T(1) - tb1) * g[j];
      v[j] = tb2 * v[j] + (T(1) - tb2) * g[j] * g[j];
      p[j] -= step_size * m[j] / (std::sqrt(v[j]) / sqrt_bc2 + eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Steps

template <typename T>
struct Gradients {
  double loss = 0.0;
  std::vector<std::vector<T>> per_parameter;  // model.named_parameters() order
};

// Loss at each row's answer position, and its gradient for every parameter.
template <typename T>
Gradients<T> compute_gradients(Model<T>& model, const Batch& batch, int iterations) {
  Tape<T> tape(true);
  const Var logits = answer_logits(tape, model, run_loop(tape, model, batch, iterations), batch);
  const Var loss = cross_entropy(tape, logits, batch.targets);
  tape.backward(loss);
  Gradients<T> g;
  g.loss = static_cast<double>(tape.value(loss).values[0]);
  for (auto& [name, p] : model.named_parameters()) g.per_parameter.push_back(tape.grad_of(*p));
  return g;
}

struct StepResult {
  double loss = 0.0;
  int iterations = 0;
  double lr = 0.0;
};

// Forward at recurrence `iterations`, backward, one AdamW update at the
// scheduled rate. Returns the pre-update loss.
template <typename T>
StepResult train_step(Model<T>& model, OptimizerState<T>& opt, const Batch& batch, int iterations,
                      double lr) {
  Gradients<T> g = compute_gradients(model, batch, iterations);
  std::vector<Tensor<T>*> params;
  for (auto& [name, p] : model.named_parameters()) params.push_back(p);
  adamw_step<T>(params, g.per_parameter, opt, lr);
  return {g.loss, iterations, lr};
}

template <typename T>
StepResult train_step(Model<T>& model, OptimizerState<T>& opt, const Batch& batch,
                      const RecurrencePolicy& policy, std::mt19937_64& rng, double lr) {
  return train_step(model, opt, batch, sample_recurrence(policy, rng), lr);
}

// ---------------------------------------------------------------------------
// Evaluation

// Index of the largest value; ties go to the lowest index.
template <typename T>
int argmax_lowest(const T* values, std::int64_t n) {
  int best = 0;
  for (std::int64_t i = 1; i < n; ++i) {
    if (values[i] > values[best]) best = static_cast<int>(i);
  }
  return best;
}

// Answer-position logits [n, V] for every example, in chunks.
template <typename T>
Tensor<T> answer_logits_for(const Model<T>& model, std::span<const EncodedExample> examples,
                            int iterations, std::size_t chunk = 1024) {
  const int V = model.config.vocab_size;
  const int pad = V - 1;
  Tensor<T> out({static_cast<std::int64_t>(examples.size()), V});
  for (std::size_t start = 0; start < examples.size(); start += chunk) {
    const auto part = examples.subspan(start, std::min(chunk, examples.size() - start));
    const Batch batch = make_batch(part, pad);
    Tape<T> tape(false);
    const Var h = run_loop(tape, model, batch, iterations);
    const auto& logits = tape.value(answer_logits(tape, model, h, batch));
    std::copy(logits.values.begin(), logits.values.end(),
              out.values.begin() + static_cast<std::ptrdiff_t>(start) * V);
  }
  return out;
}

template <typename T>
std::vector<int> predict(const Model<T>& model, std::span<const EncodedExample> examples,
                         int iterations, std::size_t chunk = 1024) {
  const Tensor<T> logits = answer_logits_for(model, examples, iterations, chunk);
  std::vector<int> out(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    out[i] = argmax_lowest(logits.row(static_cast<std::int64_t>(i)), logits.cols());
  }
  return out;
}

inline double accuracy_of(std::span<const int> predictions, std::span<const EncodedExample> examples) {
  LOOPFORMER_CHECK(!examples.empty(), ErrorKind::kEmptySplit, "empty split");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < examples.size(); ++i) correct += predictions[i] == examples[i].target;
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

template <typename T>
double evaluate_accuracy(const Model<T>& model, std::span<const EncodedExample> split, int iterations,
                         std::size_t chunk = 1024) {
  LOOPFORMER_CHECK(!split.empty(), ErrorKind::kEmptySplit, "empty split");
  return accuracy_of(predict(model, split, iterations, chunk), split);
}

// ---------------------------------------------------------------------------
// Training log: append-only CSV.

struct LogRow {
  std::uint64_t step = 0;
  double epoch = 0.0;
  int stage_k = 0;
  int sampled_r = 0;
  std::optional<double> loss;
  double lr = 0.0;
  std::string split;
  std::optional<double> accuracy;
};

class TrainingLog {
 public:
  static constexpr const char* kHeader = "step,epoch,stage_k,sampled_R,loss,lr,split,accuracy";

  TrainingLog() = default;
  explicit TrainingLog(const std::filesystem::path& path) { open(path); }

  void open(const std::filesystem::path& path) {
    const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
    out_.open(path, std::ios::app);
    LOOPFORMER_CHECK(out_.good(), ErrorKind::kIo, "cannot open log " + path.string());
    if (fresh) out_ << kHeader << '\n';
  }

  bool is_open() const { return out_.is_open(); }

  void write(const LogRow& r) {
    if (!out_.is_open()) return;
    out_ << r.step << ',' << std::setprecision(6) << r.epoch << ',' << r.stage_k << ',' << r.sampled_r << ',';
    if (r.loss) out_ << std::setprecision(8) << *r.loss;
    out_ << ',' << std::setprecision(8) << r.lr << ',' << r.split << ',';
    if (r.accuracy) out_ << std::setprecision(8) << *r.accuracy;
    out_ << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

// ---------------------------------------------------------------------------
// Shared trainer settings

struct TrainerConfig {
  std::size_t batch_size = 512;
  AdamWConfig adam;
  std::uint64_t warmup_steps = 2000;
  std::uint64_t seed = 0;
  std::size_t eval_batch_size = 1024;
  std::uint64_t eval_interval = 1000;
  std::uint64_t log_interval = 100;
};

inline std::mt19937_64 step_rng(std::uint64_t seed, std::uint64_t step) {
  return std::mt19937_64(mix_seed(seed ^ 0x5EEDF00DULL, step));
}

struct EvalEvent {
  std::uint64_t step = 0;
  double epoch = 0.0;
  int stage_k = 0;
  std::string split;
  double accuracy = 0.0;
};

struct TrainingHooks {
  std::function<void(const EvalEvent&)> on_eval;
  // Called after every completed step; return false to stop training.
  std::function<bool(std::uint64_t step)> after_step;
  // Called when a curriculum stage passes its gate.
  std::function<void(int k, std::uint64_t step)> on_stage_passed;
};

// Encoded view of a bundle, computed once.
struct EncodedBundle {
  int pad_token = 0;
  std::vector<EncodedExample> atomic;
  std::map<int, std::vector<EncodedExample>> train, test_id, test_ood;

  explicit EncodedBundle(const DatasetBundle& b) : pad_token(b.vocab().pad_token()) {
    const int E = b.kg.num_entities();
    atomic = encode_all(b.train_atomic, E);
    for (const auto& [k, f] : b.train_inferred) train[k] = encode_all(f, E);
    for (const auto& [k, f] : b.test_id) test_id[k] = encode_all(f, E);
    for (const auto& [k, f] : b.test_ood) test_ood[k] = encode_all(f, E);
  }
};

// ---------------------------------------------------------------------------
// Systematicity: epochs over atomic + inferred training facts.

struct SystematicityConfig {
  std::uint64_t max_steps = 100'000;
  // When set, training also stops after this many passes over the train set.
  std::optional<std::uint64_t> max_epochs;
  // Evaluated on a fixed subsample of the training set of this size.
  std::size_t train_eval_examples = 3000;
  // Optional early stop once both held-out accuracies reach these values.
  std::optional<double> stop_id_accuracy;
  std::optional<double> stop_ood_accuracy;
};

struct EvalPoint {
  std::uint64_t step = 0;
  double epoch = 0.0;
  double train = 0.0;
  double test_id = 0.0;
  std::optional<double> test_ood;
};

struct SystematicityReport {
  std::vector<EvalPoint> curve;
  std::uint64_t steps = 0;
  bool stopped_early = false;
};

// Concatenated training examples: atomic facts first, then inferred facts by hop.
inline std::vector<EncodedExample> systematicity_train_set(const EncodedBundle& data) {
  std::vector<EncodedExample> all = data.atomic;
  for (const auto& [k, ex] : data.train) all.insert(all.end(), ex.begin(), ex.end());
  return all;
}

// Example order of one epoch.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix_seed(seed ^ 0xE90C4ULL, epoch));
  shuffle_in_place(order, rng);
  return order;
}

template <typename T>
EvalPoint evaluate_systematicity(const Model<T>& model, const EncodedBundle& data,
                                 std::span<const EncodedExample> train_probe, int iterations,
                                 std::size_t chunk) {
  EvalPoint p;
  p.train = evaluate_accuracy(model, train_probe, iterations, chunk);
  p.test_id = evaluate_accuracy(model, std::span<const EncodedExample>(data.test_id.at(2)), iterations, chunk);
  if (auto it = data.test_ood.find(2); it != data.test_ood.end() && !it->second.empty()) {
    p.test_ood = evaluate_accuracy(model, std::span<const EncodedExample>(it->second), iterations, chunk);
  }
  return p;
}

// Trains from opt.step until max_steps (or the early-stop condition).
template <typename T>
SystematicityReport train_systematicity(const EncodedBundle& data, Model<T>& model,
                                        OptimizerState<T>& opt, const RecurrencePolicy& policy,
                                        const TrainerConfig& tc, const SystematicityConfig& sc,
                                        TrainingLog* log = nullptr, const TrainingHooks& hooks = {}) {
  policy.validate();
  const std::vector<EncodedExample> train = systematicity_train_set(data);
  LOOPFORMER_CHECK(!train.empty(), ErrorKind::kEmptySplit, "empty training set");
  std::vector<EncodedExample> probe;
  {
    const auto order = epoch_order(train.size(), tc.seed ^ 0x9B0BEULL, 0);
    for (std::size_t i = 0; i < std::min(sc.train_eval_examples, train.size()); ++i) {
      probe.push_back(train[order[i]]);
    }
  }
  const std::size_t per_epoch = (train.size() + tc.batch_size - 1) / tc.batch_size;
  SystematicityReport report;
  std::uint64_t cached_epoch = std::numeric_limits<std::uint64_t>::max();
  std::vector<std::size_t> order;

  const auto evaluate = [&](std::uint64_t step) {
    const double epoch = static_cast<double>(step) / static_cast<double>(per_epoch);
    EvalPoint p = evaluate_systematicity(model, data, probe, policy.eval_recurrence(), tc.eval_batch_size);
    p.step = step;
    p.epoch = epoch;
    report.curve.push_back(p);
    const auto emit = [&](const std::string& split, double acc) {
      if (log) log->write({step, epoch, 2, policy.eval_recurrence(), std::nullopt, 0.0, split, acc});
      if (hooks.on_eval) hooks.on_eval({step, epoch, 2, split, acc});
    };
    emit("train", p.train);
    emit("test_id", p.test_id);
    if (p.test_ood) emit("test_ood", *p.test_ood);
    return p;
  };

  std::uint64_t last_step = sc.max_steps;
  if (sc.max_epochs) last_step = std::min<std::uint64_t>(last_step, *sc.max_epochs * per_epoch);
  while (opt.step < last_step) {
    const std::uint64_t step = opt.step;
    const std::uint64_t epoch = step / per_epoch;
    if (epoch != cached_epoch) {
      order = epoch_order(train.size(), tc.seed, epoch);
      cached_epoch = epoch;
    }
    const std::size_t begin = (step % per_epoch) * tc.batch_size;
    const std::size_t end = std::min(begin + tc.batch_size, train.size());
    const Batch batch = make_batch(train, std::span<const std::size_t>(order).subspan(begin, end - begin),
                                   data.pad_token);
    std::mt19937_64 rng = step_rng(tc.seed, step);
    const double lr = lr_at(step, tc.adam.lr, tc.warmup_steps);
    const StepResult res = train_step(model, opt, batch, policy, rng, lr);
    const std::uint64_t done = opt.step;
    if (log && tc.log_interval > 0 && done % tc.log_interval == 0) {
      log->write({done, static_cast<double>(done) / per_epoch, 2, res.iterations, res.loss, lr, "", std::nullopt});
    }
    bool stop = hooks.after_step && !hooks.after_step(done);
    if (tc.eval_interval > 0 && done % tc.eval_interval == 0) {
      const EvalPoint p = evaluate(done);
      if (sc.stop_id_accuracy && sc.stop_ood_accuracy && p.test_ood &&
          p.test_id >= *sc.stop_id_accuracy && *p.test_ood >= *sc.stop_ood_accuracy) {
        report.stopped_early = true;
        stop = true;
      }
    }
    if (stop) break;
  }
  report.steps = opt.step;
  if (report.curve.empty() || report.curve.back().step != opt.step) evaluate(opt.step);
  return report;
}

// ---------------------------------------------------------------------------
// Curriculum over hop depth

struct CurriculumConfig {
  int start_hop = 2;
  int max_hop = 40;
  double threshold = 0.95;
  std::uint64_t stage_budget = 200'000;
};

struct StageRecord {
  int k = 0;
  std::uint64_t steps = 0;             // steps spent in this stage
  std::uint64_t cumulative_steps = 0;  // total steps when the stage ended
  double last_accuracy = 0.0;
  bool passed = false;
};

struct CurriculumState {
  int stage = 2;
  std::uint64_t stage_steps = 0;
  int learnable_depth = 1;
};

struct CurriculumReport {
  int learnable_depth = 1;
  std::vector<StageRecord> stages;
  std::uint64_t total_steps = 0;
};

// (pool, index) pairs for one batch at stage k: each element picks a pool
// uniformly among {atomic, 2-hop, ..., k-hop}, then an example uniformly.
// Pool 1 is the atomic set.
inline std::vector<std::pair<int, std::size_t>> sample_curriculum_batch(const EncodedBundle& data, int k,
                                                                        std::size_t batch_size,
                                                                        std::mt19937_64& rng) {
  std::vector<int> pools{1};
  for (const auto& [hop, ex] : data.train) {
    if (hop <= k && !ex.empty()) pools.push_back(hop);
  }
  std::vector<std::pair<int, std::size_t>> picks(batch_size);
  for (auto& pick : picks) {
    const int pool = pools[uniform_below(rng, pools.size())];
    const auto& ex = pool == 1 ? data.atomic : data.train.at(pool);
    pick = {pool, uniform_below(rng, ex.size())};
  }
  return picks;
}

template <typename T>
CurriculumReport run_curriculum(const EncodedBundle& data, Model<T>& model, OptimizerState<T>& opt,
                                const RecurrencePolicy& policy, const TrainerConfig& tc,
                                const CurriculumConfig& cc, CurriculumState state = {},
                                TrainingLog* log = nullptr, const TrainingHooks& hooks = {}) {
  policy.validate();
  LOOPFORMER_CHECK(cc.start_hop >= 2 && cc.max_hop >= cc.start_hop, ErrorKind::kInvalidConfig,
                   "curriculum hop range invalid");
  LOOPFORMER_CHECK(tc.eval_interval > 0, ErrorKind::kInvalidConfig, "eval_interval must be positive");
  if (state.stage < cc.start_hop) state.stage = cc.start_hop;
  CurriculumReport report;
  report.learnable_depth = state.learnable_depth;
  const int eval_r = policy.eval_recurrence();

  while (state.stage <= cc.max_hop) {
    const int k = state.stage;
    LOOPFORMER_CHECK(data.train.contains(k) && data.test_id.contains(k), ErrorKind::kInvalidConfig,
                     "dataset has no " + std::to_string(k) + "-hop pools");
    const auto& held_out = data.test_id.at(k);
    StageRecord rec{k, 0, 0, 0.0, false};
    bool stopped = false;
    while (state.stage_steps < cc.stage_budget) {
      const std::uint64_t step = opt.step;
      std::mt19937_64 rng = step_rng(tc.seed, step);
      const auto picks = sample_curriculum_batch(data, k, tc.batch_size, rng);
      const Batch batch = make_batch_from(
          picks.size(),
          [&](std::size_t i) -> const EncodedExample& {
            const auto& [pool, idx] = picks[i];
            return pool == 1 ? data.atomic[idx] : data.train.at(pool)[idx];
          },
          data.pad_token);
      const double lr = lr_at(step, tc.adam.lr, tc.warmup_steps);
      const StepResult res = train_step(model, opt, batch, policy, rng, lr);
      ++state.stage_steps;
      const std::uint64_t done = opt.step;
      if (log && tc.log_interval > 0 && done % tc.log_interval == 0) {
        log->write({done, 0.0, k, res.iterations, res.loss, lr, "", std::nullopt});
      }
      if (hooks.after_step && !hooks.after_step(done)) stopped = true;
      if (state.stage_steps % tc.eval_interval == 0) {
        rec.last_accuracy = evaluate_accuracy(model, std::span<const EncodedExample>(held_out), eval_r,
                                              tc.eval_batch_size);
        const std::string split = "test_k" + std::to_string(k);
        if (log) log->write({done, 0.0, k, eval_r, std::nullopt, lr, split, rec.last_accuracy});
        if (hooks.on_eval) hooks.on_eval({done, 0.0, k, split, rec.last_accuracy});
        if (rec.last_accuracy >= cc.threshold) {
          rec.passed = true;
          break;
        }
      }
      if (stopped) break;
    }
    rec.steps = state.stage_steps;
    rec.cumulative_steps = opt.step;
    report.stages.push_back(rec);
    if (!rec.passed) break;
    state.learnable_depth = k;
    report.learnable_depth = k;
    if (hooks.on_stage_passed) hooks.on_stage_passed(k, opt.step);
    ++state.stage;
    state.stage_steps = 0;
    if (stopped) break;
  }
  report.total_steps = opt.step;
  return report;
}

// ---------------------------------------------------------------------------
// Trainer checkpoints: model blobs plus optimizer moments.

template <typename T>
Checkpoint trainer_checkpoint(const Model<T>& model, const OptimizerState<T>& opt,
                              const std::map<std::string, std::string>& extra = {}) {
  Checkpoint c = model_checkpoint(model, opt.step);
  for (const auto& [k, v] : extra) c.header[k] = v;
  std::ostringstream adam;
  adam.precision(17);
  adam << opt.config.lr << ' ' << opt.config.beta1 << ' ' << opt.config.beta2 << ' ' << opt.config.eps
       << ' ' << opt.config.weight_decay;
  c.header["adamw"] = adam.str();
  std::size_t i = 0;
  model.for_each_parameter([&](const std::string& name, const Tensor<T>&) {
    c.add("adam.m." + name, opt.first_moment[i]);
    c.add("adam.v." + name, opt.second_moment[i]);
    ++i;
  });
  return c;
}

template <typename T>
OptimizerState<T> optimizer_from_checkpoint(const Checkpoint& c, Model<T>& model) {
  AdamWConfig cfg;
  std::istringstream adam(c.require("adamw"));
  adam >> cfg.lr >> cfg.beta1 >> cfg.beta2 >> cfg.eps >> cfg.weight_decay;
  OptimizerState<T> s = make_optimizer(model, cfg);
  s.step = std::stoull(c.require("step"));
  std::size_t i = 0;
  model.for_each_parameter([&](const std::string& name, const Tensor<T>&) {
    s.first_moment[i] = c.get<T>("adam.m." + name);
    s.second_moment[i] = c.get<T>("adam.v." + name);
    ++i;
  });
  return s;
}

}  // namespace loopformer
