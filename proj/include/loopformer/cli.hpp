#pragma once

// Command-line entry point: gen-data, train, eval, sweep, lens, margins,
// patch, grad-check. Exit 0 on success, 1 on config or runtime errors,
// 2 on usage errors.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "loopformer/analysis.hpp"
#include "loopformer/config.hpp"
#include "loopformer/inference.hpp"
#include "loopformer/kg_data.hpp"
#include "loopformer/model.hpp"
#include "loopformer/trainer.hpp"

namespace loopformer {

namespace fs = std::filesystem;

struct RunManifest {
  std::string run_id;
  std::string subcommand;
  std::string config_text;
  std::uint64_t dataset_seed = 0;
  std::uint64_t train_seed = 0;
  std::vector<fs::path> checkpoints;
  std::vector<fs::path> artifacts;

  void write(const fs::path& out_dir) const {
    std::ofstream out(out_dir / "manifest.txt", std::ios::binary);
    LOOPFORMER_CHECK(out.good(), ErrorKind::kIo, "cannot write manifest");
    out << "run_id = " << run_id << "\nsubcommand = " << subcommand << "\ndataset_seed = " << dataset_seed
        << "\ntrain_seed = " << train_seed << "\n\n[checkpoints]\n";
    for (const auto& p : checkpoints) out << p.lexically_relative(out_dir).generic_string() << '\n';
    out << "\n[artifacts]\n";
    for (const auto& p : artifacts) out << p.lexically_relative(out_dir).generic_string() << '\n';
    out << "\n[config]\n" << config_text;
  }
};

struct CommonArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

namespace cli_detail {

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

struct Run {
  RunConfig cfg;
  fs::path out;
  RunManifest manifest;
  std::ostream& log;

  Run(const std::string& sub, const CommonArgs& args, std::ostream& log_stream) : log(log_stream) {
    cfg = load_config(args.config);
    if (args.seed) {
      cfg.dataset.seed = *args.seed;
      cfg.trainer.seed = *args.seed;
    }
    validate(cfg);
    out = args.out;
    fs::create_directories(out);
    manifest.subcommand = sub;
    manifest.config_text = to_text(cfg);
    manifest.dataset_seed = cfg.dataset.seed;
    manifest.train_seed = cfg.trainer.seed;
    manifest.run_id = sub + "-" + hex64(fnv1a(sub + "\n" + manifest.config_text));
    const fs::path snapshot = out / "config.cfg";
    std::ofstream(snapshot, std::ios::binary) << manifest.config_text;
    manifest.artifacts.push_back(snapshot);
  }

  void finish() { manifest.write(out); }

  DatasetBundle dataset(const std::string& data_dir) const {
    DatasetBundle b = data_dir.empty() ? build_dataset(cfg.dataset) : read_dataset(data_dir);
    LOOPFORMER_CHECK(b.kg.num_entities() == cfg.dataset.num_entities &&
                         b.kg.num_relations() == cfg.dataset.num_relations,
                     ErrorKind::kInvalidConfig, "dataset does not match the config's entity/relation counts");
    return b;
  }

  Model<float> load_model(const std::string& path) const {
    const Checkpoint c = read_checkpoint(path);
    Model<float> m = model_from_checkpoint<float>(c);
    LOOPFORMER_CHECK(m.config.vocab_size == cfg.resolved_model().vocab_size, ErrorKind::kInvalidConfig,
                     "checkpoint vocabulary does not match the config");
    return m;
  }

  fs::path csv(const std::string& name, const CsvTable& t) {
    const fs::path p = out / name;
    write_csv(p, t);
    manifest.artifacts.push_back(p);
    return p;
  }

  const std::map<int, std::vector<EncodedExample>>& split(const EncodedBundle& enc) const {
    return cfg.analysis.split == "test_ood" ? enc.test_ood : enc.test_id;
  }

  std::map<int, std::vector<EncodedExample>> capped(const std::map<int, std::vector<EncodedExample>>& s) const {
    auto c = s;
    if (cfg.analysis.max_examples > 0) {
      for (auto& [k, ex] : c) {
        if (ex.size() > cfg.analysis.max_examples) ex.resize(cfg.analysis.max_examples);
      }
    }
    return c;
  }
};

inline void check_seq_len(const ModelConfig& m, const DatasetBundle& b) {
  int longest = 1;
  for (const auto& [k, f] : b.train_inferred) longest = std::max(longest, k);
  for (const auto& [k, f] : b.test_id) longest = std::max(longest, k);
  for (const auto& [k, f] : b.test_ood) longest = std::max(longest, k);
  LOOPFORMER_CHECK(m.max_seq_len >= longest + 1, ErrorKind::kInvalidConfig,
                   "model.max_seq_len must be >= " + std::to_string(longest + 1) + " for this dataset");
}

inline int gen_data(const CommonArgs& a, std::ostream& out, std::ostream& log) {
  Run run("gen-data", a, log);
  const DatasetBundle b = build_dataset(run.cfg.dataset);
  const auto written = write_dataset(b, run.out);
  run.manifest.artifacts.insert(run.manifest.artifacts.end(), written.begin(), written.end());
  for (const auto& p : written) {
    const auto h = read_split(p).header;
    out << p.filename().string() << ' ' << h.count << '\n';
  }
  run.finish();
  return 0;
}

inline int train(const CommonArgs& a, const std::string& data_dir, std::ostream& out, std::ostream& log) {
  Run run("train", a, log);
  const DatasetBundle bundle = run.dataset(data_dir);
  const ModelConfig mc = run.cfg.resolved_model();
  check_seq_len(mc, bundle);
  const EncodedBundle data(bundle);
  Model<float> model = init_model<float>(mc, run.cfg.trainer.seed);
  OptimizerState<float> opt = make_optimizer(model, run.cfg.trainer.adam);
  const fs::path log_path = run.out / "train_log.csv";
  TrainingLog tlog(log_path);
  run.manifest.artifacts.push_back(log_path);
  fs::create_directories(run.out / "checkpoints");

  const std::map<std::string, std::string> extra_base{
      {"experiment", std::string(to_string(run.cfg.dataset.experiment))},
      {"dataset_seed", std::to_string(run.cfg.dataset.seed)},
      {"train_seed", std::to_string(run.cfg.trainer.seed)}};
  int learnable_depth = 1;
  const auto save = [&](const std::string& name) {
    auto extra = extra_base;
    if (run.cfg.dataset.experiment == Experiment::kExtrapolation) {
      extra["learnable_depth"] = std::to_string(learnable_depth);
    }
    const fs::path p = run.out / "checkpoints" / name;
    write_checkpoint(p, trainer_checkpoint(model, opt, extra));
    run.manifest.checkpoints.push_back(p);
  };
  TrainingHooks hooks;
  hooks.on_eval = [&](const EvalEvent& e) {
    log << "step " << e.step << " " << e.split << " accuracy " << format_number(e.accuracy) << '\n';
  };
  hooks.after_step = [&](std::uint64_t step) {
    if (run.cfg.checkpoint_interval > 0 && step % run.cfg.checkpoint_interval == 0) {
      save("step_" + std::to_string(step) + ".bin");
    }
    return true;
  };
  hooks.on_stage_passed = [&](int k, std::uint64_t) {
    learnable_depth = k;
    save("stage_k" + std::to_string(k) + ".bin");
  };

  if (run.cfg.dataset.experiment == Experiment::kSystematicity) {
    const auto report = train_systematicity(data, model, opt, run.cfg.recurrence, run.cfg.trainer,
                                            run.cfg.systematicity, &tlog, hooks);
    CsvTable t;
    t.metadata = analysis_metadata(model, run.cfg.dataset.seed);
    t.columns = {"step", "epoch", "train", "test_id", "test_ood"};
    for (const auto& p : report.curve) {
      t.rows.push_back({std::to_string(p.step), format_number(p.epoch), format_number(p.train),
                        format_number(p.test_id), p.test_ood ? format_number(*p.test_ood) : ""});
    }
    run.csv("curve.csv", t);
    if (!report.curve.empty()) {
      const auto& last = report.curve.back();
      out << "steps " << report.steps << " train " << format_number(last.train) << " test_id "
          << format_number(last.test_id);
      if (last.test_ood) out << " test_ood " << format_number(*last.test_ood);
      out << '\n';
    }
  } else {
    CurriculumState state;
    state.stage = run.cfg.curriculum.start_hop;
    const auto report = run_curriculum(data, model, opt, run.cfg.recurrence, run.cfg.trainer,
                                       run.cfg.curriculum, state, &tlog, hooks);
    learnable_depth = report.learnable_depth;
    CsvTable t;
    t.metadata = analysis_metadata(model, run.cfg.dataset.seed);
    t.columns = {"k", "steps", "cumulative_steps", "last_accuracy", "passed"};
    for (const auto& s : report.stages) {
      t.rows.push_back({std::to_string(s.k), std::to_string(s.steps), std::to_string(s.cumulative_steps),
                        format_number(s.last_accuracy), s.passed ? "1" : "0"});
    }
    run.csv("curriculum.csv", t);
    out << "steps " << report.total_steps << " learnable_depth " << report.learnable_depth << '\n';
  }
  save("final.bin");
  run.finish();
  return 0;
}

inline int eval(const CommonArgs& a, const std::string& checkpoint, const std::string& data_dir,
                const std::string& split_file, std::optional<int> iterations, std::ostream& out,
                std::ostream& log) {
  Run run("eval", a, log);
  const Model<float> model = run.load_model(checkpoint);
  const int r = iterations.value_or(run.cfg.recurrence.eval_recurrence());
  CsvTable t;
  t.metadata = analysis_metadata(model, run.cfg.dataset.seed, {{"r", std::to_string(r)}});
  t.columns = {"split", "k", "r", "accuracy", "n_examples"};
  const auto add = [&](const std::string& name, int k, const std::vector<EncodedExample>& ex) {
    const double acc = evaluate_accuracy(model, std::span<const EncodedExample>(ex), r,
                                         run.cfg.trainer.eval_batch_size);
    t.rows.push_back({name, std::to_string(k), std::to_string(r), format_number(acc), std::to_string(ex.size())});
    out << name << " k=" << k << " r=" << r << " accuracy " << format_number(acc) << '\n';
  };
  if (!split_file.empty()) {
    const SplitFile s = read_split(split_file);
    add(s.header.split, s.header.hops, encode_all(s.facts, s.header.num_entities));
  } else {
    const DatasetBundle bundle = run.dataset(data_dir);
    const EncodedBundle enc(bundle);
    for (const auto& [k, ex] : enc.test_id) add("test_id", k, ex);
    for (const auto& [k, ex] : enc.test_ood) add("test_ood", k, ex);
  }
  run.csv("eval.csv", t);
  run.finish();
  return 0;
}

inline int sweep(const CommonArgs& a, const std::string& checkpoint, const std::string& data_dir,
                 std::optional<int> learnable_depth, std::ostream& out, std::ostream& log) {
  Run run("sweep", a, log);
  const Model<float> model = run.load_model(checkpoint);
  const EncodedBundle enc(run.dataset(data_dir));
  std::optional<HaltingConfig> halting;
  if (run.cfg.sweep.adaptive) halting = run.cfg.halting;
  const auto grid = recurrence_sweep(model, run.capped(run.split(enc)), run.cfg.sweep.r_values, halting,
                                     run.cfg.trainer.eval_batch_size);
  if (!learnable_depth) {
    const Checkpoint c = read_checkpoint(checkpoint);
    if (const auto it = c.header.find("learnable_depth"); it != c.header.end()) {
      learnable_depth = std::stoi(it->second);
    }
  }
  Metadata extra{{"split", run.cfg.analysis.split}};
  if (learnable_depth) {
    const double ratio = generalization_ratio(grid, *learnable_depth, run.cfg.sweep.ratio_threshold);
    extra.emplace_back("learnable_depth", std::to_string(*learnable_depth));
    extra.emplace_back("generalization_ratio", format_number(ratio));
    out << "generalization_ratio " << format_number(ratio) << " (learnable depth " << *learnable_depth << ")\n";
  } else {
    out << "generalization_ratio unavailable: no learnable depth\n";
  }
  run.csv("grid.csv", grid_table(grid, analysis_metadata(model, run.cfg.dataset.seed, extra)));
  run.finish();
  return 0;
}

inline int lens(const CommonArgs& a, const std::string& checkpoint, const std::string& data_dir,
                std::ostream& out, std::ostream& log) {
  Run run("lens", a, log);
  const Model<float> model = run.load_model(checkpoint);
  const DatasetBundle b = run.dataset(data_dir);
  const HopSplits& splits = run.cfg.analysis.split == "test_ood" ? b.test_ood : b.test_id;
  const int k = run.cfg.analysis.lens_hops;
  const auto it = splits.find(k);
  LOOPFORMER_CHECK(it != splits.end() && !it->second.empty(), ErrorKind::kEmptySplit,
                   "empty split " + run.cfg.analysis.split + " k=" + std::to_string(k));
  std::vector<InferredFact> facts = it->second;
  if (run.cfg.analysis.max_examples > 0 && facts.size() > run.cfg.analysis.max_examples) {
    facts.resize(run.cfg.analysis.max_examples);
  }
  const int iters = run.cfg.analysis_iterations(run.cfg.analysis.lens_iterations);
  const auto g = logit_lens(model, b.kg, std::span<const InferredFact>(facts), iters,
                            run.cfg.trainer.eval_batch_size);
  const std::string split = run.cfg.analysis.split + "_k" + std::to_string(k);
  run.csv("lens.csv", lens_table(g, split, analysis_metadata(model, run.cfg.dataset.seed,
                                                             {{"iterations", std::to_string(iters)}})));
  out << "lens target accuracy at final depth " << format_number(g.at(g.depths - 1, k)) << '\n';
  run.finish();
  return 0;
}

inline int margins(const CommonArgs& a, const std::string& checkpoint, const std::string& data_dir,
                   std::ostream& out, std::ostream& log) {
  Run run("margins", a, log);
  const Model<float> model = run.load_model(checkpoint);
  const EncodedBundle enc(run.dataset(data_dir));
  const auto curves = margin_curves(model, run.capped(run.split(enc)), run.cfg.analysis.margin_r_max,
                                    run.cfg.trainer.eval_batch_size);
  run.csv("margins.csv", margin_table(curves, analysis_metadata(model, run.cfg.dataset.seed,
                                                                {{"split", run.cfg.analysis.split}})));
  for (const auto& c : curves) {
    out << "k=" << c.k << " peak t=" << c.peak_iteration() << (c.rises_then_declines() ? " rise-then-decline" : "")
        << '\n';
  }
  run.finish();
  return 0;
}

inline int patch(const CommonArgs& a, const std::string& checkpoint, const std::string& data_dir,
                 std::ostream& out, std::ostream& log) {
  Run run("patch", a, log);
  const Model<float> model = run.load_model(checkpoint);
  const EncodedBundle enc(run.dataset(data_dir));
  const auto& splits = run.split(enc);
  const int k = run.cfg.analysis.patch_hops;
  const auto it = splits.find(k);
  LOOPFORMER_CHECK(it != splits.end() && !it->second.empty(), ErrorKind::kEmptySplit,
                   "empty split " + run.cfg.analysis.split + " k=" + std::to_string(k));
  const auto pairs = sample_patch_pairs(it->second, run.cfg.analysis.patch_pairs, run.cfg.trainer.seed);
  const int iters = run.cfg.analysis_iterations(run.cfg.analysis.patch_iterations);
  const auto g = activation_patch(model, std::span<const std::pair<EncodedExample, EncodedExample>>(pairs), iters);
  run.csv("patch.csv", patch_table(g, analysis_metadata(model, run.cfg.dataset.seed,
                                                        {{"split", run.cfg.analysis.split + "_k" + std::to_string(k)},
                                                         {"pairs", std::to_string(g.pairs)},
                                                         {"clean_margin", format_number(g.clean_margin)}})));
  out << "patched " << g.pairs << " pairs, clean margin " << format_number(g.clean_margin) << '\n';
  run.finish();
  return 0;
}

inline int grad_check(const CommonArgs& a, std::ostream& out, std::ostream& log) {
  Run run("grad-check", a, log);
  const auto r = model_gradient_check(run.cfg.resolved_model(), run.cfg.grad_check_seq_len,
                                      run.cfg.recurrence.eval_recurrence(), run.cfg.grad_check_coords,
                                      run.cfg.trainer.seed);
  out << "max relative error " << format_number(r.max_relative_error) << " over " << r.coordinates
      << " coordinates\n";
  run.finish();
  LOOPFORMER_CHECK(r.max_relative_error < 1e-5, ErrorKind::kNumeric, "gradient check above 1e-5");
  return 0;
}

}  // namespace cli_detail

inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
  CLI::App app{"Looped-transformer knowledge-graph reasoning experiments", "loopformer"};
  app.require_subcommand(1);
  CommonArgs common;
  std::string checkpoint, data_dir, split_file;
  std::optional<int> iterations, learnable_depth;

  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "flat key=value config file")->required();
    sub->add_option("--seed", common.seed, "overrides dataset.seed and train.seed");
    sub->add_option("--out", common.out, "output directory")->required();
  };
  const auto add_model = [&](CLI::App* sub) {
    sub->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    sub->add_option("--data", data_dir, "dataset directory from gen-data (default: rebuild from config)");
  };
  CLI::App* gen = app.add_subcommand("gen-data", "build the dataset and write split files");
  CLI::App* tr = app.add_subcommand("train", "systematicity training or the hop curriculum");
  CLI::App* ev = app.add_subcommand("eval", "accuracy on test splits or one split file");
  CLI::App* sw = app.add_subcommand("sweep", "accuracy grid over recurrence and hops");
  CLI::App* ln = app.add_subcommand("lens", "logit lens over depth and position");
  CLI::App* mg = app.add_subcommand("margins", "answer margin per iteration");
  CLI::App* pt = app.add_subcommand("patch", "activation patching grid");
  CLI::App* gc = app.add_subcommand("grad-check", "full-model finite-difference gradient check");
  for (CLI::App* sub : {gen, tr, ev, sw, ln, mg, pt, gc}) add_common(sub);
  tr->add_option("--data", data_dir, "dataset directory from gen-data (default: rebuild from config)");
  for (CLI::App* sub : {ev, sw, ln, mg, pt}) add_model(sub);
  ev->add_option("--split-file", split_file, "evaluate one split file");
  ev->add_option("--iterations", iterations, "recurrence at evaluation");
  sw->add_option("--learnable-depth", learnable_depth, "overrides the checkpoint's learnable depth");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n' << app.help();
    return 2;
  }

  try {
    if (gen->parsed()) return cli_detail::gen_data(common, out, err);
    if (tr->parsed()) return cli_detail::train(common, data_dir, out, err);
    if (ev->parsed()) return cli_detail::eval(common, checkpoint, data_dir, split_file, iterations, out, err);
    if (sw->parsed()) return cli_detail::sweep(common, checkpoint, data_dir, learnable_depth, out, err);
    if (ln->parsed()) return cli_detail::lens(common, checkpoint, data_dir, out, err);
    if (mg->parsed()) return cli_detail::margins(common, checkpoint, data_dir, out, err);
    if (pt->parsed()) return cli_detail::patch(common, checkpoint, data_dir, out, err);
    if (gc->parsed()) return cli_detail::grad_check(common, out, err);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace loopformer
