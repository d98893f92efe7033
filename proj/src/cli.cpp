#include "oarstd/cli.hpp"

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "oarstd/checkpoint.hpp"
#include "oarstd/config.hpp"
#include "oarstd/dataset.hpp"
#include "oarstd/evaluation.hpp"
#include "oarstd/inference.hpp"
#include "oarstd/phantom.hpp"
#include "oarstd/preprocess.hpp"
#include "oarstd/rng.hpp"
#include "oarstd/training.hpp"

namespace oarstd::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// Thrown for anything the user got wrong (flags, config contents, missing
// paths); maps to exit code 1. Everything else maps to 2.
struct usage_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CommonFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_path, "run configuration JSON file");
  cmd->add_option("--seed", f.seed, "override the config seed");
  cmd->add_option("--workers", f.workers, "override the worker count");
}

// Config file first, then flags, then the environment for the worker count.
RunConfig resolve_config(const CommonFlags& f) {
  try {
    RunConfig run;
    if (!f.config_path.empty()) run = load_run_config(f.config_path);
    if (f.seed) run.seed = *f.seed;
    if (f.workers) run.workers = *f.workers;
    if (const char* env = std::getenv("OARSTD_WORKERS")) {
      const std::string s = env;
      std::size_t pos = 0;
      int v = 0;
      try {
        v = std::stoi(s, &pos);
      } catch (...) {
        pos = 0;
      }
      if (pos != s.size() || v < 1)
        throw std::invalid_argument("OARSTD_WORKERS must be a positive integer, got \"" + s +
                                    "\"");
      run.workers = v;
    }
    run.validate();
    return run;
  } catch (const usage_error&) {
    throw;
  } catch (const std::exception& e) {
    throw usage_error(e.what());
  }
}

std::string required(const std::string& flag_value, const std::string& config_value,
                     const char* flag, const char* config_key) {
  if (!flag_value.empty()) return flag_value;
  if (!config_value.empty()) return config_value;
  throw usage_error(std::string("missing ") + flag + " (or " + config_key + " in the config)");
}

// Accepts either a manifest file or a directory holding manifest.json;
// returns the manifest plus the data root the entry paths are relative to.
std::pair<DatasetManifest, fs::path> open_manifest(const fs::path& where) {
  const fs::path file = fs::is_directory(where) ? where / "manifest.json" : where;
  DatasetManifest manifest = read_manifest(file);
  return {std::move(manifest), file.parent_path()};
}

std::vector<ManifestEntry> split_entries(const DatasetManifest& manifest,
                                         const std::string& split) {
  if (split.empty()) return manifest.entries;
  std::vector<ManifestEntry> out;
  for (const auto& e : manifest.entries)
    if (e.split == split) out.push_back(e);
  return out;
}

void write_snapshot(const RunConfig& run, const fs::path& dir) {
  fs::create_directories(dir);
  save_run_config(run, dir / "run_config.json");
}

std::string csv_field(const std::string& s) {
  const bool needs_quotes = s.find_first_of(",\"\n\r") != std::string::npos ||
                            (!s.empty() && (s.front() == ' ' || s.back() == ' '));
  if (!needs_quotes) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += '"';
  return out;
}

// Minimal RFC-4180 reader: quoted fields may contain commas, quotes and
// newlines. Returns one vector of fields per record.
std::vector<std::vector<std::string>> parse_csv(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
    } else if (c == '"' && field.empty()) {
      quoted = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      row.push_back(std::move(field));
      field.clear();
      if (row.size() > 1 || !row.front().empty()) rows.push_back(row);
      row.clear();
    } else {
      field += c;
    }
  }
  if (!field.empty() || !row.empty()) {
    row.push_back(std::move(field));
    rows.push_back(row);
  }
  return rows;
}

// ---- gen-phantom ----------------------------------------------------------

struct GenPhantomOpts {
  CommonFlags common;
  std::string out;
};

void cmd_gen_phantom(const GenPhantomOpts& o) {
  RunConfig run = resolve_config(o.common);
  const std::string out = required(o.out, run.paths.output_dir, "--out", "paths.output_dir");
  run.paths.output_dir = out;
  run.paths.data_dir = out;
  run.phantom.config.validate();

  const fs::path out_dir = out;
  write_snapshot(run, out_dir);
  DatasetManifest manifest =
      generate_phantom_dataset(run.phantom.config, run.seed, out_dir, run.workers);
  for (const std::string& w : split_manifest(manifest, run.phantom.split[0],
                                             run.phantom.split[1], run.phantom.split[2],
                                             derive_seed(run.seed, 2)))
    std::cerr << "warning: " << w << "\n";
  write_manifest(manifest, out_dir / "manifest.json");
  std::cout << "wrote " << manifest.entries.size() << " samples over "
            << manifest.vocabulary.size() << " classes to " << out_dir.string() << "\n";
}

// ---- preprocess -----------------------------------------------------------

struct PreprocessOpts {
  CommonFlags common;
  std::string data;
  std::string out;
};

void cmd_preprocess(const PreprocessOpts& o) {
  RunConfig run = resolve_config(o.common);
  const std::string data = required(o.data, run.paths.data_dir, "--data", "paths.data_dir");
  const std::string out = required(o.out, run.paths.output_dir, "--out", "paths.output_dir");
  run.paths.data_dir = data;
  run.paths.output_dir = out;

  auto [manifest, root] = open_manifest(data);
  const fs::path out_dir = out;
  write_snapshot(run, out_dir);
  for (const ManifestEntry& entry : manifest.entries) {
    const VolumeSample sample = read_sample(root / entry.path);
    write_sample(preprocess_sample(sample, run.preprocess), out_dir / entry.path);
  }
  write_manifest(manifest, out_dir / "manifest.json");
  std::cout << "preprocessed " << manifest.entries.size() << " samples into "
            << out_dir.string() << "\n";
}

// ---- train / finetune -----------------------------------------------------

struct TrainOpts {
  CommonFlags common;
  std::string data;
  std::string out;
};

void cmd_train(const TrainOpts& o) {
  RunConfig run = resolve_config(o.common);
  const std::string data = required(o.data, run.paths.data_dir, "--data", "paths.data_dir");
  const std::string out = required(o.out, run.paths.output_dir, "--out", "paths.output_dir");
  run.paths.data_dir = data;
  run.paths.output_dir = out;

  auto [manifest, root] = open_manifest(data);
  if (run.network.num_classes != manifest.vocabulary.size()) {
    std::cout << "aligning network.num_classes to the dataset vocabulary ("
              << manifest.vocabulary.size() << " classes)\n";
    run.network.num_classes = manifest.vocabulary.size();
  }
  TrainConfig tc = run.train;
  tc.seed = run.seed;
  tc.train_scales = run.asac.scales;
  tc.augment = run.asac.augment;

  const fs::path out_dir = out;
  write_snapshot(run, out_dir);
  const TrainResult result = train(manifest, root, run.network, tc);
  save_checkpoint(out_dir / "model.ckpt", run.network, manifest.vocabulary, result.params);
  result.history.write_csv(out_dir / "history.csv");
  std::cout << "trained " << tc.epochs << " epochs; best epoch " << result.best_epoch
            << ", val macro-F1 " << result.best_val_macro_f1 << "; checkpoint at "
            << (out_dir / "model.ckpt").string() << "\n";
}

struct FinetuneOpts {
  CommonFlags common;
  std::string checkpoint;
  std::string data;
  std::string out;
};

void cmd_finetune(const FinetuneOpts& o) {
  RunConfig run = resolve_config(o.common);
  const std::string ckpt_path =
      required(o.checkpoint, run.paths.checkpoint, "--checkpoint", "paths.checkpoint");
  const std::string data = required(o.data, run.paths.data_dir, "--data", "paths.data_dir");
  const std::string out = required(o.out, run.paths.output_dir, "--out", "paths.output_dir");
  run.paths.checkpoint = ckpt_path;
  run.paths.data_dir = data;
  run.paths.output_dir = out;

  const Checkpoint base = load_checkpoint(ckpt_path);
  auto [manifest, root] = open_manifest(data);
  FinetuneConfig fc = run.finetune;
  fc.seed = run.seed;
  fc.train_scales = run.asac.scales;
  fc.augment = run.asac.augment;

  const fs::path out_dir = out;
  write_snapshot(run, out_dir);
  const TrainResult result = finetune(base, manifest, root, fc);
  NetworkConfig target = base.config;
  target.num_classes = manifest.vocabulary.size();
  save_checkpoint(out_dir / "model.ckpt", target, manifest.vocabulary, result.params);
  result.history.write_csv(out_dir / "history.csv");
  std::cout << "finetuned " << fc.epochs << " epochs onto " << manifest.vocabulary.size()
            << " classes; checkpoint at " << (out_dir / "model.ckpt").string() << "\n";
}

// ---- standardize ----------------------------------------------------------

struct StandardizeOpts {
  CommonFlags common;
  std::string checkpoint;
  std::string dictionary;
  std::string input;
  std::string out;
  std::string split;
  std::vector<int> scales;
  CLI::Option* scales_opt = nullptr;
  std::optional<double> threshold;
  bool emit_scores = false;
};

void cmd_standardize(const StandardizeOpts& o) {
  RunConfig run = resolve_config(o.common);
  const std::string ckpt_path =
      required(o.checkpoint, run.paths.checkpoint, "--checkpoint", "paths.checkpoint");
  const std::string input = required(o.input, run.paths.data_dir, "--input", "paths.data_dir");
  const std::string dict_path = !o.dictionary.empty() ? o.dictionary : run.paths.dictionary;
  std::string out = o.out;
  if (out.empty() && !run.paths.output_dir.empty())
    out = (fs::path(run.paths.output_dir) / "report.csv").string();
  if (out.empty()) throw usage_error("missing --out (or paths.output_dir in the config)");
  if (o.threshold) run.inference_threshold = *o.threshold;
  if (o.scales_opt->count()) run.asac.scales = o.scales;
  run.paths.checkpoint = ckpt_path;
  run.paths.data_dir = input;
  run.paths.dictionary = dict_path;
  run.validate();

  const Checkpoint checkpoint = load_checkpoint(ckpt_path);
  const StandardizationDictionary dict =
      dict_path.empty() ? StandardizationDictionary{} : load_dictionary(dict_path);
  auto [manifest, root] = open_manifest(input);
  const std::vector<ManifestEntry> entries = split_entries(manifest, o.split);
  if (entries.empty()) throw std::invalid_argument("no manifest entries selected");

  std::vector<VolumeSample> samples(entries.size());
  std::vector<std::string> read_errors(entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    try {
      samples[i] = read_sample(root / entries[i].path);
    } catch (const std::exception& e) {
      samples[i].original_label = entries[i].path;
      read_errors[i] = e.what();
    }
  }

  StandardizationReport report = standardize_structure_set(
      samples, dict, checkpoint, run.inference_threshold, run.asac.scales);
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (!read_errors[i].empty()) report.rows[i].error = read_errors[i];

  const fs::path out_csv = out;
  if (out_csv.has_parent_path()) fs::create_directories(out_csv.parent_path());
  report.write_csv(out_csv);
  if (o.emit_scores) {
    fs::path scores = out_csv;
    scores.replace_extension(".scores.json");
    report.write_scores_json(scores, checkpoint.vocabulary);
  }
  write_snapshot(run, out_csv.has_parent_path() ? out_csv.parent_path() : fs::path("."));

  int early = 0, unrecognized = 0, errors = 0;
  for (const auto& row : report.rows) {
    if (row.source == "early_match") ++early;
    if (row.source == "error") ++errors;
    if (row.assigned_label == kUnrecognizedLabel) ++unrecognized;
  }
  std::cout << report.rows.size() << " structures: " << early << " dictionary matches, "
            << report.classifier_invocations << " classifier calls, " << unrecognized
            << " unrecognized, " << errors << " errors; report at " << out_csv.string() << "\n";
}

// ---- evaluate -------------------------------------------------------------

struct EvaluateOpts {
  CommonFlags common;
  std::string report;
  std::string truth;
  std::string split;
  std::string out;
};

void cmd_evaluate(const EvaluateOpts& o) {
  RunConfig run = resolve_config(o.common);
  if (o.report.empty()) throw usage_error("missing --report");
  if (o.truth.empty()) throw usage_error("missing --truth");

  const std::vector<std::vector<std::string>> rows = parse_csv(o.report);
  if (rows.empty() || rows.front() !=
                          std::vector<std::string>{"original_label", "assigned_label", "source",
                                                   "confidence"})
    throw std::invalid_argument("unexpected report header in " + o.report);

  const DatasetManifest manifest = open_manifest(o.truth).first;
  const std::vector<ManifestEntry> entries = split_entries(manifest, o.split);
  const std::size_t n = rows.size() - 1;
  if (entries.size() != n)
    throw std::invalid_argument("report has " + std::to_string(n) + " rows but the truth split holds " +
                                std::to_string(entries.size()) +
                                " entries; rows are joined to entries by order");

  const LabelVocabulary& vocab = manifest.vocabulary;
  std::vector<int> truths, predictions;
  int early = 0, classifier = 0, errors = 0, unrecognized = 0, correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& row = rows[i + 1];
    if (row.size() != 4)
      throw std::invalid_argument("report row " + std::to_string(i + 1) + " is malformed");
    const std::string& assigned = row[1];
    const std::string& source = row[2];
    if (source == "early_match") ++early;
    else if (source == "classifier") ++classifier;
    else ++errors;
    if (assigned == kUnrecognizedLabel) ++unrecognized;
    const int truth = entries[i].class_index;
    if (assigned == vocab.name(truth)) ++correct;
    if (const auto idx = vocab.index_of(assigned)) {
      truths.push_back(truth);
      predictions.push_back(*idx);
    }
  }

  fs::path out_dir = o.out.empty() ? fs::path(o.report).parent_path() : fs::path(o.out);
  if (out_dir.empty()) out_dir = ".";
  fs::create_directories(out_dir);
  write_snapshot(run, out_dir);

  json summary{{"rows", n},
               {"early_match", early},
               {"classifier", classifier},
               {"error", errors},
               {"unrecognized", unrecognized},
               {"evaluated", truths.size()},
               {"coverage", n ? static_cast<double>(truths.size()) / static_cast<double>(n) : 0.0},
               {"overall_accuracy", n ? static_cast<double>(correct) / static_cast<double>(n) : 0.0}};
  if (!truths.empty()) {
    const MetricsReport metrics =
        classification_metrics(truths, predictions, {}, vocab.size());
    metrics.write_csv(out_dir / "metrics.csv", vocab);
    metrics.write_json(out_dir / "metrics.json", vocab);
    summary["evaluated_accuracy"] = metrics.accuracy;
    summary["macro_f1"] = metrics.macro_f1;
  }
  std::ofstream sum(out_dir / "summary.json");
  sum << summary.dump(2) << "\n";
  if (!sum) throw std::runtime_error("failed writing summary.json");
  std::cout << "evaluated " << truths.size() << "/" << n << " rows; overall accuracy "
            << summary["overall_accuracy"].get<double>() << "; outputs in " << out_dir.string()
            << "\n";
}

// ---- plot-features --------------------------------------------------------

struct PlotFeaturesOpts {
  CommonFlags common;
  std::string checkpoint;
  std::string data;
  std::string split = "test";
  std::string out;
  std::vector<int> scales;
  CLI::Option* scales_opt = nullptr;
};

void cmd_plot_features(const PlotFeaturesOpts& o) {
  RunConfig run = resolve_config(o.common);
  const std::string ckpt_path =
      required(o.checkpoint, run.paths.checkpoint, "--checkpoint", "paths.checkpoint");
  const std::string data = required(o.data, run.paths.data_dir, "--data", "paths.data_dir");
  const std::string out = required(o.out, run.paths.output_dir, "--out", "paths.output_dir");
  if (o.scales_opt->count()) run.asac.scales = o.scales;
  run.paths.checkpoint = ckpt_path;
  run.paths.data_dir = data;
  run.paths.output_dir = out;
  run.validate();

  const Checkpoint checkpoint = load_checkpoint(ckpt_path);
  auto [manifest, root] = open_manifest(data);
  const std::vector<ManifestEntry> entries = split_entries(manifest, o.split);
  if (entries.empty())
    throw std::invalid_argument("no manifest entries with split \"" + o.split + "\"");

  std::vector<std::vector<double>> features;
  features.reserve(entries.size());
  for (const ManifestEntry& entry : entries) {
    const VolumeSample sample = read_sample(root / entry.path);
    features.push_back(
        sample_feature_vector(sample, checkpoint.config, checkpoint.params, run.asac.scales));
  }
  const auto points = project_features_2d(features);

  const fs::path out_dir = out;
  write_snapshot(run, out_dir);
  std::ofstream csv(out_dir / "features_2d.csv");
  csv << "x,y,class\n";
  char buf[64];
  for (std::size_t i = 0; i < points.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.10g,%.10g,", points[i][0], points[i][1]);
    csv << buf << csv_field(manifest.vocabulary.name(entries[i].class_index)) << "\n";
  }
  if (!csv) throw std::runtime_error("failed writing features_2d.csv");
  std::cout << "projected " << points.size() << " samples to "
            << (out_dir / "features_2d.csv").string() << "\n";
}

}  // namespace

int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args);
}

int run(const std::vector<std::string>& args) {
  CLI::App app{"anatomical structure label standardization"};
  app.require_subcommand(1);

  auto gen = std::make_shared<GenPhantomOpts>();
  CLI::App* gen_cmd = app.add_subcommand("gen-phantom", "generate a synthetic phantom dataset");
  add_common(gen_cmd, gen->common);
  gen_cmd->add_option("--out", gen->out, "dataset output directory");
  gen_cmd->callback([gen] { cmd_gen_phantom(*gen); });

  auto pre = std::make_shared<PreprocessOpts>();
  CLI::App* pre_cmd =
      app.add_subcommand("preprocess", "normalize voxels and HU for every sample");
  add_common(pre_cmd, pre->common);
  pre_cmd->add_option("--data", pre->data, "input manifest file or dataset directory");
  pre_cmd->add_option("--out", pre->out, "output dataset directory");
  pre_cmd->callback([pre] { cmd_preprocess(*pre); });

  auto tr = std::make_shared<TrainOpts>();
  CLI::App* tr_cmd = app.add_subcommand("train", "train a classifier from scratch");
  add_common(tr_cmd, tr->common);
  tr_cmd->add_option("--data", tr->data, "preprocessed manifest file or dataset directory");
  tr_cmd->add_option("--out", tr->out, "output directory for checkpoint and history");
  tr_cmd->callback([tr] { cmd_train(*tr); });

  auto ft = std::make_shared<FinetuneOpts>();
  CLI::App* ft_cmd = app.add_subcommand("finetune", "adapt a checkpoint to a new label set");
  add_common(ft_cmd, ft->common);
  ft_cmd->add_option("--checkpoint", ft->checkpoint, "base model checkpoint");
  ft_cmd->add_option("--data", ft->data, "preprocessed manifest file or dataset directory");
  ft_cmd->add_option("--out", ft->out, "output directory for checkpoint and history");
  ft_cmd->callback([ft] { cmd_finetune(*ft); });

  auto st = std::make_shared<StandardizeOpts>();
  CLI::App* st_cmd =
      app.add_subcommand("standardize", "assign canonical names to a structure set");
  add_common(st_cmd, st->common);
  st_cmd->add_option("--checkpoint", st->checkpoint, "model checkpoint");
  st_cmd->add_option("--dict", st->dictionary, "standardization dictionary JSON");
  st_cmd->add_option("--input", st->input, "manifest file or dataset directory");
  st_cmd->add_option("--out", st->out, "report CSV path");
  st_cmd->add_option("--split", st->split, "restrict to one manifest split");
  st->scales_opt = st_cmd->add_option("--scales", st->scales, "crop scale indices")
                       ->delimiter(',');
  st_cmd->add_option("--threshold", st->threshold, "minimum voted probability");
  st_cmd->add_flag("--emit-scores", st->emit_scores, "also write per-structure voted scores");
  st_cmd->callback([st] { cmd_standardize(*st); });

  auto ev = std::make_shared<EvaluateOpts>();
  CLI::App* ev_cmd = app.add_subcommand("evaluate", "score a report against a truth manifest");
  add_common(ev_cmd, ev->common);
  ev_cmd->add_option("--report", ev->report, "standardization report CSV");
  ev_cmd->add_option("--truth", ev->truth, "truth manifest file or dataset directory");
  ev_cmd->add_option("--split", ev->split, "restrict truth entries to one split");
  ev_cmd->add_option("--out", ev->out, "output directory (default: next to the report)");
  ev_cmd->callback([ev] { cmd_evaluate(*ev); });

  auto pf = std::make_shared<PlotFeaturesOpts>();
  CLI::App* pf_cmd =
      app.add_subcommand("plot-features", "project sample features to 2-d for plotting");
  add_common(pf_cmd, pf->common);
  pf_cmd->add_option("--checkpoint", pf->checkpoint, "model checkpoint");
  pf_cmd->add_option("--data", pf->data, "preprocessed manifest file or dataset directory");
  pf_cmd->add_option("--split", pf->split, "manifest split to project")->capture_default_str();
  pf_cmd->add_option("--out", pf->out, "output directory");
  pf->scales_opt = pf_cmd->add_option("--scales", pf->scales, "crop scale indices")
                       ->delimiter(',');
  pf_cmd->callback([pf] { cmd_plot_features(*pf); });

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  } catch (const usage_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace oarstd::cli
