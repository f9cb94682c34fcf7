#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "loopformer/inference.hpp"
#include "loopformer/trainer.hpp"

using namespace loopformer;

namespace {

ModelConfig small_model(int vocab, InitMode init = InitMode::kDefault) {
  ModelConfig c;
  c.num_layers = 2;
  c.embed_dim = 16;
  c.num_heads = 2;
  c.vocab_size = vocab;
  c.max_seq_len = 8;
  c.init_mode = init;
  c.init_std = 0.3;
  return c;
}

std::vector<EncodedExample> random_examples(int n, int vocab, int len, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<EncodedExample> out(n);
  for (auto& ex : out) {
    ex.input.resize(len);
    for (int& t : ex.input) t = static_cast<int>(rng() % (vocab - 1));
    ex.target = static_cast<int>(rng() % (vocab - 1));
  }
  return out;
}

// Independent KL / entropy in nats.
double kl_oracle(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0) s += p[i] * std::log(p[i] / q[i]);
  return s;
}

double entropy_oracle(const std::vector<double>& p) {
  double s = 0.0;
  for (double v : p)
    if (v > 0) s -= v * std::log(v);
  return s;
}

std::vector<double> softmax_oracle(const float* x, int n) {
  double mx = x[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, static_cast<double>(x[i]));
  std::vector<double> p(n);
  double z = 0;
  for (int i = 0; i < n; ++i) z += p[i] = std::exp(x[i] - mx);
  for (double& v : p) v /= z;
  return p;
}

}  // namespace

TEST(Halting, KlOfKnownPair) {
  const std::vector<double> p{0.9, 0.1}, q{0.5, 0.5};
  const auto s = halting_statistics(p, q);
  EXPECT_NEAR(s.kl, 0.9 * std::log(1.8) + 0.1 * std::log(0.2), 1e-12);
  EXPECT_NEAR(s.kl, 0.368064, 1e-6);
  EXPECT_NEAR(s.entropy, -(0.9 * std::log(0.9) + 0.1 * std::log(0.1)), 1e-12);
}

TEST(Halting, UniformEntropyIsLogV) {
  const std::vector<double> u(210, 1.0 / 210);
  const auto s = halting_statistics(u, u);
  EXPECT_NEAR(s.entropy, std::log(210.0), 1e-9);
  EXPECT_NEAR(s.kl, 0.0, 1e-12);
}

TEST(Halting, ZeroProbabilityTerms) {
  const std::vector<double> p{1.0, 0.0}, q{0.5, 0.5};
  EXPECT_NEAR(halting_statistics(p, q).kl, std::log(2.0), 1e-12);
  EXPECT_EQ(halting_statistics(p, q).entropy, 0.0);
  EXPECT_TRUE(std::isinf(halting_statistics(q, p).kl));
}

TEST(Halting, RejectsNonDistribution) {
  const std::vector<double> p{0.5, 0.6}, q{0.5, 0.5};
  EXPECT_THROW(halting_statistics(p, q), Error);
  const std::vector<double> a{1.0}, b{0.5, 0.5};
  EXPECT_THROW(halting_statistics(a, b), Error);
}

TEST(Halting, ConfigValidation) {
  HaltingConfig c;
  c.max_iterations = 1;
  EXPECT_THROW(c.validate(), Error);
  c.max_iterations = 2;
  c.eps_kl = -1;
  EXPECT_THROW(c.validate(), Error);
}

TEST(Halting, OneHotHaltsAtTwo) {
  std::vector<Tensor<float>> per_iter;
  for (int t = 0; t < 6; ++t) {
    Tensor<float> x({1, 10});
    x.values[3] = 60.0f;
    per_iter.push_back(x);
  }
  const auto stats = example_halting_stats(std::span<const Tensor<float>>(per_iter), 0);
  EXPECT_TRUE(std::isinf(stats[0].kl));
  EXPECT_EQ(halt_iteration(stats, HaltingConfig{}), 2);
}

TEST(Halting, ThresholdExtremes) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 5.0);
  std::vector<HaltingStats> stats(7);
  for (auto& s : stats) s = {u(rng), u(rng)};
  const double inf = std::numeric_limits<double>::infinity();
  EXPECT_EQ(halt_iteration(stats, {inf, inf, 7}), 2);
  EXPECT_EQ(halt_iteration(stats, {0.0, 0.0, 7}), 7);
}

TEST(Halting, KlOnlyNeverLaterThanJoint) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 0.05), h(0.0, 6.0);
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<HaltingStats> stats(10);
    for (auto& s : stats) s = {u(rng), h(rng)};
    const HaltingConfig joint{0.01, 3.0, 10};
    const HaltingConfig kl_only{0.01, std::numeric_limits<double>::infinity(), 10};
    EXPECT_LE(halt_iteration(stats, kl_only), halt_iteration(stats, joint));
  }
}

TEST(Margin, KnownValues) {
  const std::vector<float> x{5, 3, 1};
  EXPECT_DOUBLE_EQ(logit_margin(x.data(), 3, 0), 2.0);
  EXPECT_DOUBLE_EQ(logit_margin(x.data(), 3, 2), -4.0);
  const std::vector<float> tie{3, 3, 1};
  EXPECT_DOUBLE_EQ(logit_margin(tie.data(), 3, 0), 0.0);
}

TEST(IterationLogits, MatchEvaluateAtEachR) {
  Model<float> m = init_model<float>(small_model(13), 6);
  const auto ex = random_examples(37, 13, 4, 7);
  const auto per_iter = iteration_answer_logits(m, std::span<const EncodedExample>(ex), 5, 16);
  for (int r = 1; r <= 5; ++r) {
    const auto direct = answer_logits_for(m, std::span<const EncodedExample>(ex), r, 16);
    EXPECT_EQ(per_iter[r - 1].values, direct.values) << "r=" << r;
  }
}

TEST(Adaptive, MatchesBruteForceOracle) {
  Model<float> m = init_model<float>(small_model(13), 8);
  const auto ex = random_examples(40, 13, 4, 9);
  const HaltingConfig cfg{0.05, 2.4, 6};
  const auto got = adaptive_infer(m, std::span<const EncodedExample>(ex), cfg, 8);
  std::vector<Tensor<float>> direct;
  for (int r = 1; r <= 6; ++r) direct.push_back(answer_logits_for(m, std::span<const EncodedExample>(ex), r, 8));
  for (std::size_t i = 0; i < ex.size(); ++i) {
    int halt = 6;
    for (int t = 2; t <= 6; ++t) {
      const auto p = softmax_oracle(direct[t - 1].row(i), 13), q = softmax_oracle(direct[t - 2].row(i), 13);
      if (kl_oracle(p, q) < cfg.eps_kl && entropy_oracle(p) < cfg.entropy_threshold) {
        halt = t;
        break;
      }
    }
    EXPECT_EQ(got[i].iterations, halt);
    const float* row = direct[halt - 1].row(i);
    EXPECT_EQ(got[i].prediction, static_cast<int>(std::max_element(row, row + 13) - row));
    EXPECT_EQ(got[i].margin_trace.size(), 6u);
  }
}

TEST(Sweep, ZeroProjModelIsRecurrenceInvariantAndAtChance) {
  const KnowledgeGraph kg = generate_permutation_kg(64, 8, 1);
  const Vocabulary vocab{64, 8};
  std::map<int, std::vector<EncodedExample>> splits;
  for (int k = 2; k <= 4; ++k) {
    const auto facts = sample_inferred_facts(kg, kg.facts(), k, 3000, {}, 10 + k);
    splits[k] = encode_all(std::span<const InferredFact>(facts), 64);
  }
  ModelConfig c = small_model(vocab.size(), InitMode::kZeroProj);
  const Model<float> m = init_model<float>(c, 2);
  const auto grid = recurrence_sweep(m, splits, {4, 1, 2, 4}, HaltingConfig{});
  ASSERT_EQ(grid.rows.size(), 4u);
  EXPECT_EQ(*grid.rows[0].r, 1);
  EXPECT_EQ(*grid.rows[2].r, 4);
  ASSERT_NE(grid.adaptive(), nullptr);
  for (int k = 2; k <= 4; ++k) {
    const double a1 = grid.at(1, k);
    EXPECT_EQ(grid.at(2, k), a1);
    EXPECT_EQ(grid.at(4, k), a1);
    EXPECT_EQ(grid.adaptive()->accuracy[grid.column(k)], a1);
    // Identical iterations give KL 0, so an example halts at 2 exactly when
    // its entropy is under the threshold and runs to R_max otherwise.
    const auto logits = answer_logits_for(m, std::span<const EncodedExample>(splits[k]), 1);
    double expected = 0;
    for (std::size_t i = 0; i < splits[k].size(); ++i)
      expected += entropy_oracle(softmax_oracle(logits.row(i), vocab.size())) < 3.0 ? 2 : 20;
    EXPECT_NEAR(grid.adaptive()->mean_iterations[grid.column(k)], expected / splits[k].size(), 1e-12);
    // Chance 1/64 with n = 3000: 3 sigma is about 0.0068.
    EXPECT_LT(a1, 1.0 / 64 + 0.02);
    EXPECT_EQ(a1, evaluate_accuracy(m, std::span<const EncodedExample>(splits[k]), 1));
  }
}

TEST(Sweep, AgreesWithEvaluateAccuracy) {
  Model<float> m = init_model<float>(small_model(13), 12);
  std::map<int, std::vector<EncodedExample>> splits{{2, random_examples(50, 13, 3, 1)},
                                                    {3, random_examples(60, 13, 4, 2)}};
  const auto grid = recurrence_sweep(m, splits, {1, 3, 5});
  EXPECT_EQ(grid.adaptive(), nullptr);
  for (int r : {1, 3, 5})
    for (const auto& [k, ex] : splits)
      EXPECT_EQ(grid.at(r, k), evaluate_accuracy(m, std::span<const EncodedExample>(ex), r));
}

TEST(Sweep, Errors) {
  Model<float> m = init_model<float>(small_model(13), 1);
  std::map<int, std::vector<EncodedExample>> empty_split{{2, {}}};
  EXPECT_THROW(recurrence_sweep(m, empty_split, {1}), Error);
  std::map<int, std::vector<EncodedExample>> ok{{2, random_examples(3, 13, 3, 1)}};
  EXPECT_THROW(recurrence_sweep(m, ok, {0, 1}), Error);
  EXPECT_THROW(recurrence_sweep(m, ok, {}), Error);
}

TEST(GridCsv, RoundTripAndDeterminism) {
  Model<float> m = init_model<float>(small_model(13), 3);
  std::map<int, std::vector<EncodedExample>> splits{{2, random_examples(30, 13, 3, 5)},
                                                    {3, random_examples(30, 13, 4, 6)}};
  const auto a = recurrence_sweep(m, splits, {1, 2}, HaltingConfig{0.01, 3.0, 4});
  const auto b = recurrence_sweep(m, splits, {1, 2}, HaltingConfig{0.01, 3.0, 4});
  std::ostringstream sa, sb;
  write_csv(sa, grid_table(a, {{"model_checksum", "x"}}));
  write_csv(sb, grid_table(b, {{"model_checksum", "x"}}));
  EXPECT_EQ(sa.str(), sb.str());

  std::istringstream in(sa.str());
  const CsvTable t = read_csv(in, grid_columns());
  EXPECT_EQ(t.meta("model_checksum"), "x");
  EXPECT_EQ(t.rows.size(), 6u);
  EXPECT_EQ(t.rows.back()[0], "adaptive");
  EXPECT_EQ(t.rows.front()[4], "");
  const auto back = grid_from_table(t);
  EXPECT_EQ(back.hops, a.hops);
  EXPECT_EQ(back.n_examples, a.n_examples);
  ASSERT_EQ(back.rows.size(), a.rows.size());
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    EXPECT_EQ(back.rows[i].r, a.rows[i].r);
    EXPECT_EQ(back.rows[i].accuracy, a.rows[i].accuracy);
    EXPECT_EQ(back.rows[i].mean_iterations, a.rows[i].mean_iterations);
  }
}

TEST(GridCsv, RejectsWrongHeader) {
  std::istringstream in("# a=b\nr,k,acc\n1,2,0.5\n");
  EXPECT_THROW(read_csv(in, grid_columns()), Error);
  std::istringstream ragged("r,k,accuracy,n_examples,mean_iterations\n1,2,0.5\n");
  EXPECT_THROW(read_csv(ragged), Error);
}
