// Copyright 2026 The AgentPS Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "agentps/annotator.hpp"
#include "agentps/checkpoint.hpp"
#include "agentps/data.hpp"
#include "agentps/errors.hpp"
#include "agentps/eval.hpp"
#include "agentps/remote_annotator.hpp"
#include "agentps/run_config.hpp"
#include "agentps/training.hpp"

namespace agentps::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct Streams {
  std::ostream& out = std::cout;
  std::ostream& err = std::cerr;
};

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;

  std::pair<RunConfig, std::string> load() const {
    auto [cfg, text] = load_run_config(config_path, overrides);
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    return {cfg, text};
  }
};

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FileError("cannot open '" + tmp.string() + "' for writing");
    out << text;
    if (!out) throw FileError("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline void archive_config(const RunLayout& layout, const RunConfig& cfg, const std::string& source) {
  write_text(layout.config_copy(), source);
  write_text(layout.resolved_config(), to_json(cfg).dump(2) + "\n");
}

inline std::vector<Sample> load_split(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw FileError("dataset '" + path.string() + "' not found; run 'agentps generate' first");
  }
  return read_jsonl(path);
}

/// Training labels per sample id for the chosen source.
inline std::function<std::vector<Label>(const Sample&)> label_function(const RunLayout& layout,
                                                                       LabelSource source) {
  if (source == LabelSource::kGroundTruth) return ground_truth_labels;
  const auto mode = to_string(source);
  const auto path = layout.annotations(mode);
  if (!std::filesystem::exists(path)) {
    throw FileError("annotations '" + path.string() + "' not found; run 'agentps annotate --mode " +
                    std::string(mode) + "' first");
  }
  auto table = std::make_shared<std::map<std::string, AnnotationResult>>();
  for (auto& a : read_annotations(path)) table->emplace(a.id, std::move(a));
  return [table](const Sample& s) {
    auto it = table->find(s.id);
    if (it == table->end()) throw SchemaError("no annotation for sample '" + s.id + "'");
    if (it->second.process.size() != s.process_labels.size()) {
      throw SchemaError("annotation for '" + s.id + "' has the wrong number of process labels");
    }
    return labels_from_annotation(s, it->second);
  };
}

inline Json checkpoint_metadata(const RunConfig& cfg, const TrainConfig& tc) {
  Json m;
  m["train"] = to_json(tc);
  m["questions"] = {{"ancillary", cfg.questions.ancillary}, {"final", cfg.questions.final}};
  std::vector<std::string> words;
  const auto vocab = cfg.vocabulary();
  for (std::size_t i = Vocabulary::kReserved; i < vocab.words.size(); ++i) words.push_back(vocab.words.word(i));
  m["vocabulary"] = words;
  return m;
}

inline SpecialVocab vocabulary_from_metadata(const Json& m) {
  try {
    return SpecialVocab::build(m.at("vocabulary").get<std::vector<std::string>>(),
                               m.at("questions").at("ancillary").get<std::vector<std::string>>(),
                               m.at("questions").at("final").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("checkpoint metadata lacks the vocabulary: ") + e.what());
  }
}

inline void write_report_files(const RunLayout& layout, const std::string& arm, const MetricsReport& rep,
                               std::size_t n_questions) {
  std::ostringstream csv;
  write_report_csv_header(csv, rep.settings, n_questions);
  write_report_csv_row(csv, rep.row, n_questions);
  write_text(layout.report(arm, "csv"), csv.str());
  write_text(layout.report(arm, "json"), to_json(rep).dump(2) + "\n");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Commands

struct GenerateOptions {
  bool force = false;
  std::string from_manifest;
};

inline int cmd_generate(const Common& common, const GenerateOptions& opt, Streams io = {}) {
  auto [cfg, source] = common.load();
  RunLayout layout{cfg.output_dir};
  DatasetSpec train = cfg.train_spec(), test = cfg.test_spec();
  if (!opt.from_manifest.empty()) {
    const Json m = parse_json_text(read_text_file(opt.from_manifest), "'" + opt.from_manifest + "'");
    try {
      train = dataset_spec_from_json(m.at("train").at("spec"));
      test = dataset_spec_from_json(m.at("test").at("spec"));
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError(std::string("manifest lacks split specs: ") + e.what());
    }
  }
  for (const auto& p : {layout.train_data(), layout.test_data(), layout.manifest()}) {
    if (std::filesystem::exists(p) && !opt.force) {
      throw ConfigError("'" + p.string() + "' already exists; pass --force to overwrite");
    }
  }
  layout.create();
  const auto train_samples = generate_dataset(train);
  const auto test_samples = generate_dataset(test);
  check_disjoint(train_samples, test_samples);
  write_jsonl(train_samples, layout.train_data());
  write_jsonl(test_samples, layout.test_data());
  const Json manifest =
      make_manifest(train, test, dataset_hash(train_samples), dataset_hash(test_samples));
  detail::write_text(layout.manifest(), manifest.dump(2) + "\n");
  detail::archive_config(layout, cfg, source);
  io.out << "wrote " << train_samples.size() << " train and " << test_samples.size()
         << " test samples to " << layout.data_dir().string() << "\n";
  return kOk;
}

inline int cmd_annotate(const Common& common, const std::string& mode, Streams io = {}) {
  auto [cfg, source] = common.load();
  RunLayout layout{cfg.output_dir};
  const auto src = parse_label_source(mode);
  if (src == LabelSource::kGroundTruth) throw ConfigError("--mode must be simulated or remote");
  std::optional<Endpoint> endpoint;
  if (src == LabelSource::kRemote) endpoint = Endpoint::from_env(cfg.remote);  // fail before any work
  const auto samples = detail::load_split(layout.train_data());
  layout.create();
  std::vector<AnnotationResult> results;
  if (src == LabelSource::kSimulated) {
    results = simulate_annotations(samples, cfg.noise);
  } else {
    const auto templates = cfg.templates();
    if (templates.process.size() != cfg.model.n_questions) {
      throw ConfigError("annotator templates define " + std::to_string(templates.process.size()) +
                        " process questions, config has N=" + std::to_string(cfg.model.n_questions));
    }
    results = remote_annotate(samples, *endpoint, cfg.remote, templates,
                              [&](const std::string& msg) { io.err << msg << "\n"; });
  }
  write_annotations(results, layout.annotations(mode));
  std::size_t failures = 0;
  for (const auto& r : results) failures += r.error.empty() ? 0 : 1;
  io.out << "wrote " << results.size() << " " << mode << " annotations";
  if (failures) io.out << " (" << failures << " failed)";
  io.out << " to " << layout.annotations(mode).string() << "\n";
  return kOk;
}

struct TrainOptions {
  std::string variant = "agentps";
  std::string labels = "ground_truth";
  std::optional<std::uint64_t> seed;
  bool resume = false;
};

inline int cmd_train(const Common& common, const TrainOptions& opt, Streams io = {}) {
  auto [cfg, source] = common.load();
  RunLayout layout{cfg.output_dir};
  const Variant variant = parse_variant(opt.variant);
  TrainConfig tc = cfg.train;
  tc.variant = variant;
  tc.label_source = parse_label_source(opt.labels);
  if (opt.seed) tc.seed = *opt.seed;
  tc.validate(cfg.model.n_questions);
  if (variant == Variant::kVanilla) {
    io.err << "notice: vanilla trains only the final head; ancillary loss weights are ignored\n";
  }
  const ModelConfig mc = cfg.resolved_model(variant);
  const auto samples = detail::load_split(layout.train_data());
  const auto vocab = cfg.vocabulary();
  const auto data = make_examples<float>(samples, vocab, mc, detail::label_function(layout, tc.label_source));
  layout.create();

  const std::string arm = RunLayout::arm_name(variant, tc.seed, opt.labels);
  const auto ckpt_path = layout.checkpoint(arm);
  const auto log_path = layout.epoch_log(arm);
  TrainState<float> state;
  bool resumed = false;
  if (opt.resume && std::filesystem::exists(ckpt_path)) {
    auto ckpt = load_checkpoint<float>(ckpt_path);
    if (to_json(ckpt.state.model.config) != to_json(mc)) {
      throw ConfigError("checkpoint '" + ckpt_path.string() + "' was trained with a different model config");
    }
    state = std::move(ckpt.state);
    resumed = true;
    io.err << "resuming " << arm << " after epoch " << state.epoch << "\n";
  } else {
    state = initial_state<float>(mc, tc);
  }
  if (!resumed) {
    std::ofstream csv(log_path, std::ios::trunc);
    if (!csv) throw FileError("cannot open '" + log_path.string() + "'");
    write_epoch_csv(csv, {}, mc.n_questions, true);
  }
  if (!resumed) detail::archive_config(layout, cfg, source);

  const Json meta = detail::checkpoint_metadata(cfg, tc);
  Trainer<float> trainer(state, tc);
  trainer.train(data, [&](const TrainState<float>& st, const EpochStats& e) {
    save_checkpoint(Checkpoint<float>{st, meta}, ckpt_path);
    std::ofstream csv(log_path, std::ios::app);
    write_epoch_csv(csv, {e}, mc.n_questions, false);
    io.err << arm << " epoch " << e.epoch << " loss " << e.total_loss << "\n";
  });
  if (!std::filesystem::exists(ckpt_path)) {
    save_checkpoint(Checkpoint<float>{state, meta}, ckpt_path);
  }
  io.out << "checkpoint " << ckpt_path.string() << " (epoch " << state.epoch << ")\n";
  return kOk;
}

struct EvalOptions {
  std::string checkpoint;
  std::string test;
};

inline MetricsReport evaluate_checkpoint(const std::filesystem::path& ckpt_path,
                                         const std::vector<Sample>& test, const MetricSettings& metrics) {
  const auto ckpt = load_checkpoint<float>(ckpt_path);
  const auto vocab = detail::vocabulary_from_metadata(ckpt.metadata);
  const auto& mc = ckpt.state.model.config;
  const auto examples = make_examples<float>(test, vocab, mc);
  MetricsReport rep;
  std::uint64_t seed = 0;
  std::string labels = "ground_truth";
  if (ckpt.metadata.contains("train")) {
    seed = ckpt.metadata["train"].value("seed", std::uint64_t{0});
    labels = ckpt.metadata["train"].value("label_source", labels);
  }
  rep.row = score_row(evaluate(ckpt.state.model, examples), metrics, std::string(to_string(mc.variant)), seed);
  rep.settings = metrics;
  rep.test_size = test.size();
  rep.label_source = labels;
  return rep;
}

inline int cmd_eval(const Common& common, const EvalOptions& opt, Streams io = {}) {
  auto [cfg, source] = common.load();
  RunLayout layout{cfg.output_dir};
  if (opt.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  const std::filesystem::path ckpt_path = opt.checkpoint;
  if (!std::filesystem::exists(ckpt_path)) throw FileError("checkpoint '" + ckpt_path.string() + "' not found");
  const std::filesystem::path test_path = opt.test.empty() ? layout.test_data() : std::filesystem::path(opt.test);
  const auto test = detail::load_split(test_path);
  const auto rep = evaluate_checkpoint(ckpt_path, test, cfg.metrics);
  layout.create();
  const std::string arm = ckpt_path.stem().string();
  detail::write_report_files(layout, arm, rep, cfg.model.n_questions);
  write_report_csv_header(io.out, rep.settings, cfg.model.n_questions);
  write_report_csv_row(io.out, rep.row, cfg.model.n_questions);
  return kOk;
}

struct AblateOptions {
  std::optional<std::size_t> seeds;
  std::string labels = "ground_truth";
  std::optional<std::size_t> threads;
};

inline int cmd_ablate(const Common& common, const AblateOptions& opt, Streams io = {}) {
  auto [cfg, source] = common.load();
  RunLayout layout{cfg.output_dir};
  if (!std::filesystem::exists(layout.train_data()) || !std::filesystem::exists(layout.test_data())) {
    cmd_generate(common, {}, io);
  }
  const auto train = detail::load_split(layout.train_data());
  const auto test = detail::load_split(layout.test_data());
  layout.create();
  detail::archive_config(layout, cfg, source);

  AblationConfig ac;
  ac.model = cfg.resolved_model(cfg.model.variant);
  ac.train = cfg.train;
  ac.train.label_source = parse_label_source(opt.labels);
  ac.metrics = cfg.metrics;
  ac.threads = opt.threads.value_or(cfg.ablation.threads);
  if (opt.seeds) {
    if (*opt.seeds == 0) throw ConfigError("--seeds must be >= 1");
    ac.seeds.clear();
    for (std::size_t k = 0; k < *opt.seeds; ++k) {
      ac.seeds.push_back(k < cfg.ablation.seeds.size() ? cfg.ablation.seeds[k] : ac.seeds.back() + 1);
    }
  } else {
    ac.seeds = cfg.ablation.seeds;
  }
  ac.train_labels = detail::label_function(layout, ac.train.label_source);
  ac.log = [&](const std::string& msg) { io.err << msg << "\n"; };
  const auto result = run_ablation(train, test, cfg.vocabulary(), ac);

  const std::size_t n = cfg.model.n_questions;
  std::ostringstream all;
  write_report_csv_header(all, cfg.metrics, n);
  for (const auto& rep : result.reports) {
    const std::string arm = RunLayout::arm_name(parse_variant(rep.row.variant), rep.row.seed, opt.labels);
    detail::write_report_files(layout, arm, rep, n);
    write_report_csv_row(all, rep.row, n);
  }
  const std::string suffix = opt.labels == "ground_truth" ? "" : "_" + opt.labels;
  detail::write_text(layout.reports_dir() / ("ablation" + suffix + ".csv"), all.str());
  std::ostringstream summary;
  write_summary_csv(summary, result.summary, n);
  detail::write_text(layout.reports_dir() / ("summary" + suffix + ".csv"), summary.str());
  detail::write_text(layout.reports_dir() / ("summary" + suffix + ".json"),
                     to_json(result.summary).dump(2) + "\n");
  io.out << summary.str();
  if (result.summary.f1_gaps) {
    const auto& g = *result.summary.f1_gaps;
    io.out << "F1 gap: multitask-vanilla " << format_tenths(g.multitask_minus_vanilla)
           << " + agentps-multitask " << format_tenths(g.agentps_minus_multitask) << " = agentps-vanilla "
           << format_tenths(g.agentps_minus_vanilla) << "\n";
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// Entry point

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const NumericError*>(&e)) return kNumeric;
  if (dynamic_cast<const DataError*>(&e)) return kData;
  return kUsage;
}

inline int run(int argc, char** argv, Streams io = {}) {
  CLI::App app{"Process-supervised multimodal classification toolkit", "agentps"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", common.config_path, "JSON run config (defaults when omitted)");
    sub->add_option("--set", common.overrides, "override a config key, e.g. train.epochs=5")->take_all();
    sub->add_option("-o,--out", common.out_dir, "run directory (overrides output_dir)");
  };

  GenerateOptions gen;
  auto* g = app.add_subcommand("generate", "write train/test JSONL and a manifest");
  add_common(g);
  g->add_flag("--force", gen.force, "overwrite existing files");
  g->add_option("--from-manifest", gen.from_manifest, "regenerate the splits recorded in a manifest");

  std::string mode = "simulated";
  auto* a = app.add_subcommand("annotate", "produce process labels for the training split");
  add_common(a);
  a->add_option("--mode", mode, "simulated | remote")->check(CLI::IsMember({"simulated", "remote"}));

  TrainOptions tr;
  auto* t = app.add_subcommand("train", "train one variant and checkpoint every epoch");
  add_common(t);
  t->add_option("--variant", tr.variant, "vanilla | multitask | agentps")
      ->check(CLI::IsMember({"vanilla", "multitask", "agentps"}));
  t->add_option("--labels", tr.labels, "ground_truth | simulated | remote")
      ->check(CLI::IsMember({"ground_truth", "simulated", "remote"}));
  t->add_option("--seed", tr.seed, "training seed (overrides train.seed)");
  t->add_flag("--resume", tr.resume, "continue from the arm's checkpoint if present");

  EvalOptions ev;
  auto* e = app.add_subcommand("eval", "score a checkpoint on the test split");
  add_common(e);
  e->add_option("--checkpoint", ev.checkpoint, "checkpoint file")->required();
  e->add_option("--test", ev.test, "test JSONL (default: run directory's test split)");

  AblateOptions ab;
  auto* b = app.add_subcommand("ablate", "train and compare all three variants");
  add_common(b);
  b->add_option("--seeds", ab.seeds, "number of seeds");
  b->add_option("--labels", ab.labels, "ground_truth | simulated | remote")
      ->check(CLI::IsMember({"ground_truth", "simulated", "remote"}));
  b->add_option("--threads", ab.threads, "parallel arms");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err, io.out, io.err);
    return code == 0 ? kOk : kUsage;
  }
  try {
    if (*g) return cmd_generate(common, gen, io);
    if (*a) return cmd_annotate(common, mode, io);
    if (*t) return cmd_train(common, tr, io);
    if (*e) return cmd_eval(common, ev, io);
    if (*b) return cmd_ablate(common, ab, io);
  } catch (const std::exception& err) {
    io.err << "error: " << err.what() << "\n";
    return exit_code_for(err);
  }
  return kUsage;
}

}  // namespace agentps::cli
