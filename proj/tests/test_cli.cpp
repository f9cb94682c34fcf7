#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "loopformer/cli.hpp"

using namespace loopformer;
namespace fs = std::filesystem;

namespace {

const fs::path kConfigs = fs::path(LOOPFORMER_SOURCE_DIR) / "configs";

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "loopformer");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("loopformer_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

RunConfig parse(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

// Manifest entries under [checkpoints] and [artifacts].
std::set<std::string> manifest_files(const fs::path& dir) {
  std::istringstream in(slurp(dir / "manifest.txt"));
  std::set<std::string> files;
  std::string line, section;
  while (std::getline(in, line)) {
    if (!line.empty() && line.front() == '[') {
      section = line;
    } else if (!line.empty() && (section == "[checkpoints]" || section == "[artifacts]")) {
      files.insert(line);
    }
  }
  return files;
}

std::set<std::string> files_on_disk(const fs::path& dir) {
  std::set<std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().filename() != "manifest.txt") {
      files.insert(e.path().lexically_relative(dir).generic_string());
    }
  }
  return files;
}

}  // namespace

TEST(Config, DefaultsAndPresets) {
  const RunConfig c = parse("");
  EXPECT_EQ(c.dataset.num_entities, 2000);
  EXPECT_EQ(c.model.vocab_size, 0);
  EXPECT_EQ(c.resolved_model().vocab_size, 2201);
  const RunConfig e = parse("experiment = extrapolation\n");
  EXPECT_EQ(e.dataset.num_entities, 200);
  EXPECT_EQ(e.dataset.num_relations, 10);
  EXPECT_EQ(e.dataset.ood_fraction, 0.0);
  // The preset applies before other keys regardless of order.
  const RunConfig o = parse("dataset.num_entities = 64\nexperiment = extrapolation\n");
  EXPECT_EQ(o.dataset.num_entities, 64);
}

TEST(Config, ParsesValuesCommentsAndOptionals) {
  const RunConfig c = parse(
      "# comment\n\n  model.embed_dim = 64   # trailing\nmodel.pos_mode = NoPE\nrecurrence.mode = dynamic\n"
      "recurrence.lambda = 3.5\ntrain.max_epochs = 7\ntrain.stop_id_accuracy = none\nsweep.r_values = 1, 3,5\n"
      "sweep.adaptive = false\n");
  EXPECT_EQ(c.model.embed_dim, 64);
  EXPECT_EQ(c.model.pos_mode, PosMode::kNoPE);
  EXPECT_EQ(c.recurrence.mode, RecurrenceMode::kDynamic);
  EXPECT_EQ(c.recurrence.lambda, 3.5);
  EXPECT_EQ(c.systematicity.max_epochs, 7u);
  EXPECT_FALSE(c.systematicity.stop_id_accuracy.has_value());
  EXPECT_EQ(c.sweep.r_values, (std::vector<int>{1, 3, 5}));
  EXPECT_FALSE(c.sweep.adaptive);
}

TEST(Config, Errors) {
  const auto kind_of = [](const std::string& text) {
    try {
      parse(text);
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::kIo;
  };
  EXPECT_EQ(kind_of("model.embed_dims = 4\n"), ErrorKind::kInvalidConfig);
  EXPECT_EQ(kind_of("model.embed_dim = 4\nmodel.embed_dim = 8\n"), ErrorKind::kInvalidConfig);
  EXPECT_EQ(kind_of("model.embed_dim\n"), ErrorKind::kInvalidConfig);
  EXPECT_EQ(kind_of("model.embed_dim = four\n"), ErrorKind::kInvalidConfig);
  EXPECT_EQ(kind_of("train.lr = 1e-4x\n"), ErrorKind::kInvalidConfig);
  EXPECT_EQ(kind_of("model.pos_mode = rope\n"), ErrorKind::kInvalidConfig);
  EXPECT_EQ(kind_of("experiment = other\n"), ErrorKind::kInvalidConfig);
  EXPECT_THROW(validate(parse("model.vocab_size = 5\n")), Error);
  EXPECT_THROW(validate(parse("halting.max_iterations = 1\n")), Error);
}

TEST(Config, SnapshotRoundTripCoversEveryKey) {
  RunConfig c = parse("experiment = extrapolation\ntrain.stop_ood_accuracy = 0.25\nsweep.r_values = 2,7\n");
  const std::string text = to_text(c);
  EXPECT_EQ(to_text(parse(text)), text);
  std::size_t lines = 0;
  for (char ch : text) lines += ch == '\n';
  EXPECT_EQ(lines, config_keys().size());
  for (const auto& key : config_keys()) EXPECT_NE(text.find(key + " = "), std::string::npos) << key;
}

TEST(Config, ShippedPresetsCarryTrainingHyperparameters) {
  for (const auto& e : fs::directory_iterator(kConfigs)) validate(load_config(e.path()));
  const RunConfig s = load_config(kConfigs / "systematicity.cfg");
  EXPECT_EQ(s.dataset.experiment, Experiment::kSystematicity);
  EXPECT_EQ(s.dataset.num_entities, 2000);
  EXPECT_EQ(s.dataset.num_relations, 200);
  EXPECT_EQ(s.trainer.batch_size, 512u);
  EXPECT_EQ(s.model.pos_mode, PosMode::kAPE);
  const RunConfig x = load_config(kConfigs / "extrapolation.cfg");
  EXPECT_EQ(x.trainer.batch_size, 128u);
  EXPECT_EQ(x.model.pos_mode, PosMode::kNoPE);
  EXPECT_EQ(x.curriculum.threshold, 0.95);
  for (const RunConfig* c : {&s, &x}) {
    EXPECT_EQ(c->model.num_layers, 4);
    EXPECT_EQ(c->model.embed_dim, 768);
    EXPECT_EQ(c->model.num_heads, 12);
    EXPECT_EQ(c->trainer.adam.lr, 1e-4);
    EXPECT_EQ(c->trainer.adam.weight_decay, 0.01);
    EXPECT_EQ(c->trainer.warmup_steps, 2000u);
    EXPECT_EQ(c->halting.eps_kl, 0.01);
    EXPECT_EQ(c->halting.entropy_threshold, 3.00);
  }
}

TEST(Config, ReducedPresetsBuildTheirDatasets) {
  for (const char* name : {"systematicity_reduced.cfg", "extrapolation_reduced.cfg", "tiny.cfg"}) {
    const RunConfig c = load_config(kConfigs / name);
    const DatasetBundle b = build_dataset(c.dataset);
    EXPECT_EQ(c.resolved_model().vocab_size, b.vocab().size()) << name;
    for (const auto& [k, f] : b.test_id) EXPECT_EQ(f.size(), c.dataset.experiment == Experiment::kExtrapolation
                                                                 ? c.dataset.test_per_hop
                                                                 : c.dataset.test_id_count) << name << " k=" << k;
  }
}

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"frobnicate"}).code, 2);
  const Result r = run({"gen-data", "--config", "x.cfg", "--out", "o", "--bogus", "1"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("gen-data"), std::string::npos);
  EXPECT_EQ(run({"gen-data", "--out", "o"}).code, 2);
  EXPECT_EQ(run({"gen-data", "--config", "x.cfg", "--out", "o", "--seed", "abc"}).code, 2);
}

TEST(Cli, ConfigErrorsExitOne) {
  const fs::path dir = scratch("badcfg");
  fs::create_directories(dir);
  std::ofstream(dir / "bad.cfg") << "model.embed_dims = 3\n";
  const Result r = run({"gen-data", "--config", (dir / "bad.cfg").string(), "--out", (dir / "o").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("unknown config key 'model.embed_dims'"), std::string::npos);
  EXPECT_EQ(run({"gen-data", "--config", (dir / "missing.cfg").string(), "--out", (dir / "o").string()}).code, 1);
}

TEST(Cli, GenDataIsIdempotentAndManifestComplete) {
  const fs::path a = scratch("gen_a"), b = scratch("gen_b");
  const std::string cfg = (kConfigs / "tiny.cfg").string();
  ASSERT_EQ(run({"gen-data", "--config", cfg, "--seed", "5", "--out", a.string()}).code, 0);
  ASSERT_EQ(run({"gen-data", "--config", cfg, "--seed", "5", "--out", b.string()}).code, 0);
  const auto files = files_on_disk(a);
  EXPECT_EQ(files, files_on_disk(b));
  EXPECT_EQ(files, manifest_files(a));
  for (const auto& f : files) EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  EXPECT_EQ(slurp(a / "manifest.txt"), slurp(b / "manifest.txt"));
  EXPECT_NE(slurp(a / "manifest.txt").find("dataset_seed = 5"), std::string::npos);
  // A different seed changes the data.
  const fs::path c = scratch("gen_c");
  ASSERT_EQ(run({"gen-data", "--config", cfg, "--seed", "6", "--out", c.string()}).code, 0);
  EXPECT_NE(slurp(a / "train_k2.txt"), slurp(c / "train_k2.txt"));
}

TEST(Cli, GenDataExtrapolationPresetSizes) {
  const fs::path dir = scratch("gen_extrap");
  const Result r = run({"gen-data", "--config", (kConfigs / "extrapolation.cfg").string(), "--out", dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_split(dir / "atomic_k1.txt").header.count, 2000u);
  for (int k = 2; k <= 40; ++k) {
    EXPECT_EQ(read_split(dir / split_file_name("train", k)).header.count, 15000u) << k;
    EXPECT_EQ(read_split(dir / split_file_name("test_id", k)).header.count, 750u) << k;
  }
  EXPECT_FALSE(fs::exists(dir / split_file_name("train", 41)));
  fs::remove_all(dir);
}

TEST(Cli, EvalOnEmptySplitFails) {
  const fs::path dir = scratch("empty_split");
  const std::string cfg = (kConfigs / "tiny.cfg").string();
  ASSERT_EQ(run({"train", "--config", cfg, "--out", dir.string()}).code, 0);
  SplitHeader h;
  h.num_entities = 16;
  h.num_relations = 3;
  h.kind = GraphKind::kPermutation;
  h.split = "test_id";
  h.hops = 2;
  write_split(dir / "empty.txt", h, {});
  const Result r = run({"eval", "--config", cfg, "--out", (dir / "eval").string(), "--checkpoint",
                        (dir / "checkpoints" / "final.bin").string(), "--split-file", (dir / "empty.txt").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("empty split"), std::string::npos);
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
}

TEST(Cli, TinyPipelineWritesStableOutputs) {
  const fs::path dir = scratch("pipeline");
  const std::string cfg = (kConfigs / "tiny.cfg").string();
  const fs::path data = dir / "data", trained = dir / "train";
  ASSERT_EQ(run({"gen-data", "--config", cfg, "--out", data.string()}).code, 0);
  const Result t = run({"train", "--config", cfg, "--data", data.string(), "--out", trained.string()});
  ASSERT_EQ(t.code, 0) << t.err;
  EXPECT_NE(t.out.find("learnable_depth"), std::string::npos);
  const std::string ckpt = (trained / "checkpoints" / "final.bin").string();
  EXPECT_EQ(slurp(trained / "train_log.csv").substr(0, std::string(TrainingLog::kHeader).size()),
            TrainingLog::kHeader);
  EXPECT_EQ(files_on_disk(trained), manifest_files(trained));
  const Checkpoint c = read_checkpoint(ckpt);
  EXPECT_EQ(c.require("experiment"), "extrapolation");
  EXPECT_FALSE(c.require("learnable_depth").empty());

  const std::vector<std::pair<std::string, std::string>> outputs{
      {"eval", "eval.csv"}, {"sweep", "grid.csv"}, {"lens", "lens.csv"}, {"margins", "margins.csv"}, {"patch", "patch.csv"}};
  for (const auto& [sub, file] : outputs) {
    const fs::path out = dir / sub;
    const Result r = run({sub, "--config", cfg, "--data", data.string(), "--checkpoint", ckpt, "--out", out.string()});
    ASSERT_EQ(r.code, 0) << sub << ": " << r.err;
    ASSERT_TRUE(fs::exists(out / file)) << sub;
    EXPECT_EQ(files_on_disk(out), manifest_files(out)) << sub;
    const CsvTable table = read_csv(out / file);
    EXPECT_FALSE(table.rows.empty()) << sub;
    if (sub != "eval") {
      EXPECT_EQ(table.meta("model_checksum"), hex64(model_checksum(model_from_checkpoint<float>(c))));
    }
  }
  EXPECT_EQ(read_csv(dir / "sweep" / "grid.csv").columns, grid_columns());
  EXPECT_NO_THROW(read_csv(dir / "sweep" / "grid.csv").meta("generalization_ratio"));
  // The same analysis rerun gives byte-identical output.
  const fs::path again = dir / "sweep2";
  ASSERT_EQ(run({"sweep", "--config", cfg, "--data", data.string(), "--checkpoint", ckpt, "--out", again.string()}).code, 0);
  EXPECT_EQ(slurp(again / "grid.csv"), slurp(dir / "sweep" / "grid.csv"));
}

TEST(Cli, GradCheckTinyConfig) {
  const Result r = run({"grad-check", "--config", (kConfigs / "tiny.cfg").string(), "--out", scratch("gc").string()});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("max relative error"), std::string::npos);
  EXPECT_NE(r.out.find("over 200 coordinates"), std::string::npos);
}
