#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "oarstd/checkpoint.hpp"
#include "oarstd/cli.hpp"
#include "oarstd/config.hpp"
#include "oarstd/dataset.hpp"

using namespace oarstd;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const char* leaf) {
  const fs::path dir = fs::temp_directory_path() / leaf;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
  REQUIRE(out.good());
}

std::size_t line_count(const fs::path& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::size_t n = 0;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) ++n;
  return n;
}

std::string file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("run config round trips and rejects unknown keys") {
  const fs::path dir = fresh_dir("oarstd_cli_config");

  RunConfig c;
  c.seed = 7;
  c.workers = 2;
  c.paths = {"data", "model.ckpt", "dict.json", "out"};
  c.preprocess.hu_hi = 2000.0;
  c.preprocess.target_spacing_xy = 0.5;
  c.asac.scales = {0, 2};
  c.asac.augment.rotate_deg = 5.0;
  c.network = NetworkConfig::toy(4);
  c.train.lr0 = 3e-4;
  c.train.epochs = 4;
  c.train.milestones = {2};
  c.train.val_scales = {1};
  c.finetune.lr = 2e-5;
  c.finetune.epochs = 6;
  c.inference_threshold = 0.3;
  c.phantom.config.classes = {{"SphereA", 5}, {"SphereB", 5}};
  c.phantom.config.grid_shape = {30, 64, 64};
  c.phantom.config.delineation_noise = 0.2;
  c.phantom.split = {0.6, 0.2, 0.2};

  save_run_config(c, dir / "c.json");
  const RunConfig r = load_run_config(dir / "c.json");
  CHECK(r.seed == 7);
  CHECK(r.workers == 2);
  CHECK(r.paths.data_dir == "data");
  CHECK(r.paths.checkpoint == "model.ckpt");
  CHECK(r.paths.dictionary == "dict.json");
  CHECK(r.paths.output_dir == "out");
  CHECK(r.preprocess.hu_hi == 2000.0);
  CHECK(r.preprocess.target_spacing_xy == 0.5);
  CHECK(r.asac.scales == std::vector<int>{0, 2});
  CHECK(r.asac.augment.rotate_deg == 5.0);
  CHECK(r.asac.augment.scale_hi == 1.1);
  CHECK(r.network == NetworkConfig::toy(4));
  CHECK(r.train.lr0 == 3e-4);
  CHECK(r.train.epochs == 4);
  CHECK(r.train.milestones == std::vector<int>{2});
  CHECK(r.train.val_scales == std::vector<int>{1});
  CHECK(r.finetune.lr == 2e-5);
  CHECK(r.finetune.epochs == 6);
  CHECK(r.inference_threshold == 0.3);
  REQUIRE(r.phantom.config.classes.size() == 2);
  CHECK(r.phantom.config.classes[1].name == "SphereB");
  CHECK(r.phantom.config.classes[1].count == 5);
  CHECK(r.phantom.config.grid_shape == std::array<int, 3>{30, 64, 64});
  CHECK(r.phantom.config.delineation_noise == 0.2);
  CHECK(r.phantom.split == std::array<double, 3>{0.6, 0.2, 0.2});

  SUBCASE("null spacing round trips") {
    RunConfig d;
    d.preprocess.target_spacing_xy.reset();
    save_run_config(d, dir / "null.json");
    CHECK_FALSE(load_run_config(dir / "null.json").preprocess.target_spacing_xy.has_value());
  }
  SUBCASE("unknown keys rejected at every level") {
    write_text(dir / "bad1.json", R"({"bogus": 1})");
    CHECK_THROWS(load_run_config(dir / "bad1.json"));
    write_text(dir / "bad2.json", R"({"train": {"bogus": 1}})");
    CHECK_THROWS(load_run_config(dir / "bad2.json"));
    write_text(dir / "bad3.json", R"({"asac": {"augment": {"oops": 2}}})");
    CHECK_THROWS(load_run_config(dir / "bad3.json"));
    write_text(dir / "bad4.json", R"({"phantom": {"classes": [{"name": "SphereA", "n": 1}]}})");
    CHECK_THROWS(load_run_config(dir / "bad4.json"));
  }
  SUBCASE("type errors rejected") {
    write_text(dir / "bad5.json", R"({"seed": "seven"})");
    CHECK_THROWS(load_run_config(dir / "bad5.json"));
    write_text(dir / "bad6.json", R"({"preprocess": {"target_ratio": [1, 2]}})");
    CHECK_THROWS(load_run_config(dir / "bad6.json"));
    write_text(dir / "bad7.json", "not json");
    CHECK_THROWS(load_run_config(dir / "bad7.json"));
  }

  fs::remove_all(dir);
}

TEST_CASE("cli rejects usage errors") {
  const fs::path dir = fresh_dir("oarstd_cli_usage");
  CHECK(cli::run({}) == 1);
  CHECK(cli::run({"bogus"}) == 1);
  CHECK(cli::run({"--help"}) == 0);
  CHECK(cli::run({"standardize", "--input", "somewhere"}) == 1);
  CHECK(cli::run({"evaluate"}) == 1);
  CHECK(cli::run({"train", "--wat"}) == 1);
  CHECK(cli::run({"gen-phantom"}) == 1);  // no --out anywhere
  CHECK(cli::run({"train", "--config", (dir / "missing.json").string(), "--out",
                  (dir / "o").string()}) == 1);
  write_text(dir / "bad.json", R"({"bogus": true})");
  CHECK(cli::run({"train", "--config", (dir / "bad.json").string(), "--out",
                  (dir / "o").string()}) == 1);
  // a valid request that fails at runtime: data directory does not exist
  write_text(dir / "ok.json", R"({"train": {"epochs": 1, "milestones": []}})");
  CHECK(cli::run({"train", "--config", (dir / "ok.json").string(), "--data",
                  (dir / "no_data").string(), "--out", (dir / "o").string()}) == 2);
  fs::remove_all(dir);
}

TEST_CASE("cli pipeline runs end to end on a tiny phantom set") {
  const fs::path dir = fresh_dir("oarstd_cli_pipe");
  const fs::path raw = dir / "raw";
  const fs::path prep = dir / "prep";
  const fs::path model = dir / "model";

  write_text(dir / "c.json", R"({
    "seed": 11,
    "asac": {"scales": [0]},
    "network": {"stage_blocks": [1, 1, 1, 1], "base_width": 8, "feature_dim": 32,
                "num_classes": 2, "nonlocal_stages": [2, 3], "nonlocal_ratio": 2},
    "train": {"lr0": 0.001, "batch_size": 4, "epochs": 1, "milestones": []},
    "phantom": {"classes": [{"name": "TubeAxial", "count": 6}, {"name": "OvalL", "count": 6}],
                 "grid_shape": [38, 64, 64]}
  })");

  REQUIRE(cli::run({"gen-phantom", "--config", (dir / "c.json").string(), "--out",
                    raw.string()}) == 0);
  CHECK(fs::exists(raw / "manifest.json"));
  CHECK(fs::exists(raw / "run_config.json"));
  const DatasetManifest raw_manifest = read_manifest(raw / "manifest.json");
  CHECK(raw_manifest.entries.size() == 12);
  CHECK(raw_manifest.vocabulary.size() == 2);
  CHECK_FALSE(read_sample(raw / raw_manifest.entries[0].path).hu_normalized);

  REQUIRE(cli::run({"preprocess", "--config", (dir / "c.json").string(), "--data", raw.string(),
                    "--out", prep.string()}) == 0);
  const DatasetManifest prep_manifest = read_manifest(prep / "manifest.json");
  CHECK(prep_manifest.entries.size() == 12);
  CHECK(read_sample(prep / prep_manifest.entries[0].path).hu_normalized);

  REQUIRE(cli::run({"train", "--config", (dir / "c.json").string(), "--data", prep.string(),
                    "--out", model.string()}) == 0);
  CHECK(fs::exists(model / "history.csv"));
  const Checkpoint ckpt = load_checkpoint(model / "model.ckpt");
  CHECK(ckpt.vocabulary == prep_manifest.vocabulary);
  CHECK(ckpt.config.num_classes == 2);

  SUBCASE("rerunning from the snapshot reproduces the checkpoint byte for byte") {
    REQUIRE(cli::run({"train", "--config", (model / "run_config.json").string(), "--out",
                      (dir / "model2").string()}) == 0);
    CHECK(file_bytes(dir / "model2" / "model.ckpt") == file_bytes(model / "model.ckpt"));
  }

  SUBCASE("standardize, evaluate and plot-features consume the checkpoint") {
    write_text(dir / "dict.json", R"({"canonical": ["TubeAxial", "OvalL"]})");
    const fs::path report = dir / "rep" / "report.csv";
    REQUIRE(cli::run({"standardize", "--checkpoint", (model / "model.ckpt").string(), "--dict",
                      (dir / "dict.json").string(), "--input", prep.string(), "--out",
                      report.string(), "--split", "test", "--scales", "0", "--emit-scores"}) ==
            0);
    const std::size_t test_entries = prep_manifest.split_indices("test").size();
    REQUIRE(test_entries > 0);
    CHECK(line_count(report) == test_entries + 1);
    CHECK(fs::exists(dir / "rep" / "report.scores.json"));
    CHECK(fs::exists(dir / "rep" / "run_config.json"));

    REQUIRE(cli::run({"evaluate", "--report", report.string(), "--truth", prep.string(),
                      "--split", "test", "--out", (dir / "eval").string()}) == 0);
    CHECK(fs::exists(dir / "eval" / "summary.json"));
    CHECK(fs::exists(dir / "eval" / "metrics.csv"));
    CHECK(fs::exists(dir / "eval" / "metrics.json"));

    // row-count mismatch against the full manifest is a validation error
    CHECK(cli::run({"evaluate", "--report", report.string(), "--truth", prep.string(), "--out",
                    (dir / "eval2").string()}) == 1);

    REQUIRE(cli::run({"plot-features", "--checkpoint", (model / "model.ckpt").string(),
                      "--data", prep.string(), "--split", "test", "--scales", "0", "--out",
                      (dir / "plots").string()}) == 0);
    CHECK(line_count(dir / "plots" / "features_2d.csv") == test_entries + 1);
  }

  fs::remove_all(dir);
}

TEST_CASE("cli worker and seed overrides") {
  const fs::path dir = fresh_dir("oarstd_cli_env");
  write_text(dir / "c.json", R"({
    "workers": 1,
    "phantom": {"classes": [{"name": "SphereA", "count": 3}], "grid_shape": [20, 48, 48]}
  })");

  SUBCASE("flags beat the config file, the environment beats flags") {
    REQUIRE(setenv("OARSTD_WORKERS", "3", 1) == 0);
    const int rc = cli::run({"gen-phantom", "--config", (dir / "c.json").string(), "--out",
                             (dir / "a").string(), "--workers", "2", "--seed", "9"});
    unsetenv("OARSTD_WORKERS");
    REQUIRE(rc == 0);
    const RunConfig snap = load_run_config(dir / "a" / "run_config.json");
    CHECK(snap.workers == 3);
    CHECK(snap.seed == 9);
  }
  SUBCASE("malformed worker environment is a usage error") {
    REQUIRE(setenv("OARSTD_WORKERS", "many", 1) == 0);
    const int rc = cli::run({"gen-phantom", "--config", (dir / "c.json").string(), "--out",
                             (dir / "b").string()});
    unsetenv("OARSTD_WORKERS");
    CHECK(rc == 1);
  }

  fs::remove_all(dir);
}
