#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "loopformer/analysis.hpp"
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

struct Fixture {
  KnowledgeGraph kg = generate_permutation_kg(16, 4, 21);
  Vocabulary vocab{16, 4};
  std::vector<InferredFact> facts(int k, std::size_t n, std::uint64_t seed) const {
    return sample_inferred_facts(kg, kg.facts(), k, n, {}, seed);
  }
};

AccuracyGrid ladder_grid(int last_good) {
  AccuracyGrid g;
  GridRow low{4, {}, {}}, high{20, {}, {}};
  for (int k = 2; k <= 20; ++k) {
    g.hops.push_back(k);
    g.n_examples.push_back(100);
    low.accuracy.push_back(0.1);
    high.accuracy.push_back(k <= last_good ? 0.7 : 0.59);
  }
  g.rows = {low, high};
  return g;
}

}  // namespace

TEST(FirstHit, Definitions) {
  const std::vector<double> a{-1, 2, 3, 1};
  EXPECT_EQ(first_hit_iteration(a), 2);
  const std::vector<double> never{-1, 0, -2};
  EXPECT_FALSE(first_hit_iteration(never).has_value());
  const std::vector<double> first{0.5};
  EXPECT_EQ(first_hit_iteration(first), 1);
}

TEST(MarginCurve, AggregatesTraces) {
  const std::vector<std::vector<double>> traces{{-1, 2, 1}, {-3, -2, -1}, {1, 4, 0}};
  const auto c = margin_curve_from_traces(5, traces);
  EXPECT_EQ(c.n, 3u);
  EXPECT_NEAR(c.mean_margin[0], -1.0, 1e-12);
  EXPECT_NEAR(c.mean_margin[1], 4.0 / 3, 1e-12);
  EXPECT_NEAR(c.mean_margin[2], 0.0, 1e-12);
  EXPECT_EQ(c.never_hit_count, 1u);
  EXPECT_NEAR(*c.first_hit_mean, 1.5, 1e-12);
  EXPECT_EQ(c.peak_iteration(), 2);
  EXPECT_TRUE(c.rises_then_declines());
  EXPECT_FALSE(c.rises_then_declines(2.0));
}

TEST(MarginCurve, MonotoneCurvesHaveNoInteriorPeak) {
  MarginCurve up, down;
  up.mean_margin = {0, 1, 2, 3};
  down.mean_margin = {3, 2, 1, 0};
  EXPECT_FALSE(up.rises_then_declines());
  EXPECT_FALSE(down.rises_then_declines());
  EXPECT_THROW(margin_curve_from_traces(2, {}), Error);
}

TEST(MarginCurve, MatchesIterationLogits) {
  Fixture f;
  const Model<float> m = init_model<float>(small_model(f.vocab.size()), 5);
  const auto facts = f.facts(3, 40, 2);
  std::map<int, std::vector<EncodedExample>> splits{{3, encode_all(std::span<const InferredFact>(facts), 16)}};
  const auto curves = margin_curves(m, splits, 4, 16);
  ASSERT_EQ(curves.size(), 1u);
  for (int t = 1; t <= 4; ++t) {
    const auto logits = answer_logits_for(m, std::span<const EncodedExample>(splits[3]), t);
    double mean = 0;
    for (std::size_t i = 0; i < facts.size(); ++i) {
      const float* row = logits.row(static_cast<std::int64_t>(i));
      float best_other = -INFINITY;
      for (int v = 0; v < f.vocab.size(); ++v)
        if (v != facts[i].tail) best_other = std::max(best_other, row[v]);
      mean += (row[facts[i].tail] - best_other) / 40.0;
    }
    EXPECT_NEAR(curves[0].mean_margin[t - 1], mean, 1e-5);
  }
  const CsvTable t = margin_table(curves, analysis_metadata(m, 7));
  const std::vector<std::string> cols{"k", "t", "mean_margin", "n", "first_hit_mean", "never_hit_count"};
  EXPECT_EQ(t.columns, cols);
  EXPECT_EQ(t.rows.size(), 4u);
  EXPECT_EQ(t.meta("dataset_seed"), "7");
  EXPECT_EQ(t.meta("model_checksum").size(), 16u);
}

TEST(Patch, ShapeAndSiteLabels) {
  Fixture f;
  const Model<float> m = init_model<float>(small_model(f.vocab.size()), 3);
  const auto facts = f.facts(3, 2, 4);
  const auto a = encode_example(facts[0], 16), b = encode_example(facts[1], 16);
  const auto g = activation_patch(m, a, b, 3);
  EXPECT_EQ(g.positions, 4);
  EXPECT_EQ(g.sites, 3 * 2 + 1);
  EXPECT_EQ(g.delta.size(), 28u);
  EXPECT_EQ(g.iteration_layer(0), std::make_pair(0, 0));
  EXPECT_EQ(g.iteration_layer(1), std::make_pair(1, 1));
  EXPECT_EQ(g.iteration_layer(2), std::make_pair(1, 2));
  EXPECT_EQ(g.iteration_layer(7 - 1), std::make_pair(3, 2));
  const CsvTable t = patch_table(g, {});
  EXPECT_EQ(t.rows.size(), 28u);
  const std::vector<std::string> cols{"position", "iteration", "layer", "delta_margin"};
  EXPECT_EQ(t.columns, cols);
}

TEST(Patch, IdenticalRunsGiveExactZero) {
  Fixture f;
  const Model<float> m = init_model<float>(small_model(f.vocab.size()), 9);
  const auto facts = f.facts(4, 1, 5);
  const auto ex = encode_example(facts[0], 16);
  const auto g = activation_patch(m, ex, ex, 3);
  for (double d : g.delta) EXPECT_EQ(d, 0.0);
  const std::vector<EncodedExample> one{ex};
  const auto logits = answer_logits_for(m, std::span<const EncodedExample>(one), 3);
  EXPECT_NEAR(g.clean_margin, logit_margin(logits.row(0), logits.cols(), ex.target), 1e-5);
}

TEST(Patch, CausalLocality) {
  Fixture f;
  const Model<float> m = init_model<float>(small_model(f.vocab.size()), 10);
  const auto facts = f.facts(4, 2, 6);
  const std::vector<EncodedExample> c1{encode_example(facts[0], 16)}, c2{encode_example(facts[1], 16)};
  const Batch clean_batch = make_batch(c1, f.vocab.pad_token()), corrupt_batch = make_batch(c2, f.vocab.pad_token());
  const auto clean = forward_traced(m, clean_batch, 2).trace;
  const auto corrupt = forward_traced(m, corrupt_batch, 2).trace;
  const int d = m.config.embed_dim;
  for (int site : {0, 2, 3}) {
    for (int pos : {1, 3}) {
      const auto states = patched_states(m, clean_batch, clean, corrupt, site, pos);
      ASSERT_EQ(static_cast<int>(states.size()), clean.num_sites() - site);
      for (std::size_t j = 0; j < states.size(); ++j) {
        const Tensor<float>& ref = clean.states[site + j];
        for (int p = 0; p < pos; ++p)
          for (int i = 0; i < d; ++i) EXPECT_NEAR(states[j].row(p)[i], ref.row(p)[i], 1e-6);
      }
      // The patched row itself carries the corrupt vector at the patch site.
      for (int i = 0; i < d; ++i) EXPECT_EQ(states[0].row(pos)[i], corrupt.states[site].row(pos)[i]);
    }
  }
}

TEST(Patch, Errors) {
  Fixture f;
  const Model<float> m = init_model<float>(small_model(f.vocab.size()), 1);
  const auto f2 = f.facts(2, 1, 1), f3 = f.facts(3, 1, 1);
  EXPECT_THROW(
      {
        try {
          activation_patch(m, encode_example(f2[0], 16), encode_example(f3[0], 16), 2);
        } catch (const Error& e) {
          EXPECT_EQ(e.kind(), ErrorKind::kShapeMismatch);
          throw;
        }
      },
      Error);
  const std::vector<EncodedExample> one{encode_example(f2[0], 16)};
  EXPECT_THROW(sample_patch_pairs(one, 3, 1), Error);
}

TEST(Patch, SampledPairsDifferInAnswer) {
  Fixture f;
  const auto facts = f.facts(3, 50, 8);
  const auto ex = encode_all(std::span<const InferredFact>(facts), 16);
  const auto pairs = sample_patch_pairs(ex, 20, 3);
  EXPECT_EQ(pairs.size(), 20u);
  for (const auto& [a, b] : pairs) {
    EXPECT_NE(a.target, b.target);
    EXPECT_EQ(a.input.size(), b.input.size());
  }
  EXPECT_EQ(sample_patch_pairs(ex, 20, 3).front().second.input, pairs.front().second.input);
}

TEST(Lens, FinalDepthAgreesWithPredict) {
  Fixture f;
  const Model<float> m = init_model<float>(small_model(f.vocab.size()), 11);
  const auto facts = f.facts(3, 60, 3);
  const auto ex = encode_all(std::span<const InferredFact>(facts), 16);
  const int R = 3;
  const auto g = logit_lens(m, f.kg, std::span<const InferredFact>(facts), R, 16);
  EXPECT_EQ(g.depths, R * 2 + 1);
  const auto preds = predict(m, std::span<const EncodedExample>(ex), R, 16);
  for (std::size_t i = 0; i < ex.size(); ++i) EXPECT_EQ(g.prediction(i, g.depths - 1, 3), preds[i]);
  // Accuracy oracle from the stored predictions and the composed path.
  for (int depth = 0; depth < g.depths; ++depth) {
    for (int pos = 1; pos <= 3; ++pos) {
      int correct = 0;
      for (std::size_t i = 0; i < facts.size(); ++i) {
        int e = facts[i].head;
        for (int j = 0; j < pos; ++j) e = f.kg.tail(e, facts[i].relations[j]);
        correct += g.prediction(i, depth, pos) == e;
      }
      EXPECT_DOUBLE_EQ(g.at(depth, pos), correct / 60.0);
    }
  }
  EXPECT_EQ(g.role(1), "bridge_1");
  EXPECT_EQ(g.role(3), "target");
}

TEST(Lens, ZeroProjModelIsFlatAcrossDepth) {
  Fixture f;
  const Model<float> m = init_model<float>(small_model(f.vocab.size(), InitMode::kZeroProj), 2);
  const auto facts = f.facts(2, 30, 4);
  const auto g = logit_lens(m, f.kg, std::span<const InferredFact>(facts), 2);
  for (int depth = 1; depth < g.depths; ++depth)
    for (int pos = 1; pos <= 2; ++pos) EXPECT_EQ(g.at(depth, pos), g.at(0, pos));
  const CsvTable t = lens_table(g, "test_id_k2", analysis_metadata(m, 1));
  EXPECT_EQ(t.rows.size(), static_cast<std::size_t>(g.depths * 2));
  const std::vector<std::string> cols{"depth", "position", "role", "accuracy", "split"};
  EXPECT_EQ(t.columns, cols);
  std::ostringstream out;
  write_csv(out, t);
  std::istringstream in(out.str());
  EXPECT_EQ(read_csv(in, cols).rows, t.rows);
}

TEST(Lens, Errors) {
  Fixture f;
  const Model<float> m = init_model<float>(small_model(f.vocab.size()), 2);
  EXPECT_THROW(logit_lens(m, f.kg, std::span<const InferredFact>(), 2), Error);
  auto mixed = f.facts(2, 2, 1);
  mixed.push_back(f.facts(3, 1, 1)[0]);
  EXPECT_THROW(logit_lens(m, f.kg, std::span<const InferredFact>(mixed), 2), Error);
  auto wrong = f.facts(2, 1, 1);
  wrong[0].tail = (wrong[0].tail + 1) % 16;
  EXPECT_THROW(logit_lens(m, f.kg, std::span<const InferredFact>(wrong), 2), Error);
}

TEST(GeneralizationRatio, Values) {
  EXPECT_DOUBLE_EQ(generalization_ratio(ladder_grid(19), 12), 19.0 / 12);
  EXPECT_DOUBLE_EQ(generalization_ratio(ladder_grid(12), 12), 1.0);
  EXPECT_DOUBLE_EQ(generalization_ratio(ladder_grid(19), 12, 0.8), 0.0);
  EXPECT_THROW(generalization_ratio(ladder_grid(12), 0), Error);
}
