#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cec/config.hpp"

using namespace cec;
namespace fs = std::filesystem;

namespace {

int run_cmd(const std::string& cmd) {
  const int status = std::system(cmd.c_str());
  REQUIRE(status != -1);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -2;
}

std::string slurp(const fs::path& path) {
  std::ifstream f(path);
  REQUIRE(f);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

int count_lines(const std::string& text) {
  int n = 0;
  for (char c : text)
    if (c == '\n') ++n;
  return n;
}

}  // namespace

TEST_CASE("ini parser: sections, comments, and errors") {
  auto data = parse_ini(
      "# leading comment\n"
      "[run]\n"
      "seed = 42  # trailing comment\n"
      "out = results\n"
      "\n"
      "[train]\n"
      "epochs=3\n");
  CHECK(data.at("run").at("seed") == "42");
  CHECK(data.at("run").at("out") == "results");
  CHECK(data.at("train").at("epochs") == "3");
  CHECK_THROWS_AS(parse_ini("[broken\nkey = 1\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_ini("[ok]\nno equals sign\n"), std::invalid_argument);
}

TEST_CASE("RunConfig survives a serialize/parse round-trip") {
  RunConfig cfg;
  cfg.arch.input_size = 64;
  cfg.arch.stem_channels = 4;
  cfg.train.epochs = 17;
  cfg.train.class_weights = {1.3, 0.81};
  cfg.auto_class_weights = false;
  cfg.delta = 0.5;
  cfg.seed = 99;
  cfg.deterministic = true;
  cfg.repeats = 7;
  cfg.out_dir = "elsewhere";

  RunConfig back;
  back.apply(parse_ini(cfg.serialize()));
  CHECK(back.arch == cfg.arch);
  CHECK(back.train.epochs == 17);
  CHECK(back.train.class_weights[0] == 1.3);
  CHECK(back.train.class_weights[1] == 0.81);
  CHECK_FALSE(back.auto_class_weights);
  CHECK(back.delta == 0.5);
  CHECK(back.seed == 99);
  CHECK(back.deterministic);
  CHECK(back.repeats == 7);
  CHECK(back.out_dir == "elsewhere");
  CHECK(back.train.input_size == 64);  // follows the architecture
  CHECK(back.train.seed == 99);
}

TEST_CASE("explicit class weights switch off the automatic formula") {
  RunConfig cfg;
  CHECK(cfg.auto_class_weights);
  cfg.apply(parse_ini("[train]\nclass_weight_cancer = 0.81\n"
                      "class_weight_non_cancer = 1.3\n"));
  CHECK_FALSE(cfg.auto_class_weights);
  CHECK(cfg.train.class_weights[1] == 0.81);
  CHECK(cfg.train.class_weights[0] == 1.3);
}

TEST_CASE("cli end-to-end: gen-data, train, eval, erf") {
  const std::string bin = CECNET_BIN;
  const fs::path root = fs::temp_directory_path() / "cec_cli_test";
  fs::remove_all(root);
  fs::create_directories(root);
  const fs::path data = root / "data";
  const fs::path out = root / "out";
  const fs::path cfg_path = root / "run.ini";
  const fs::path log = root / "stdout.txt";

  // small architecture so the smoke run stays fast
  write_text_file(cfg_path.string(),
                  "[arch]\n"
                  "stem_channels = 4\n"
                  "min_resolution = 16\n"
                  "resblocks_per_stage = 1\n"
                  "[train]\n"
                  "epochs = 1\n"
                  "batch_size = 8\n"
                  "[data]\n"
                  "patients = 4\n"
                  "rois_per_patient = 4\n"
                  "dir = " + data.string() + "\n"
                  "[run]\n"
                  "seed = 3\n"
                  "deterministic = true\n"
                  "out = " + out.string() + "\n");
  const std::string base = bin + " --config " + cfg_path.string();

  SUBCASE("gen-data writes the manifest and report") {
    CHECK(run_cmd(base.substr(0, bin.size()) + " gen-data --config " +
                  cfg_path.string() + " > " + log.string()) == 0);
    const auto manifest = slurp(data / "manifest.csv");
    CHECK(count_lines(manifest) == 1 + 4 * 4);
    CHECK(manifest.rfind("patient_id,path,label", 0) == 0);
    CHECK(slurp(data / "gen_report.txt").find("centroid_oracle_accuracy") !=
          std::string::npos);
    CHECK(fs::exists(out / "config.resolved.ini"));

    // rerun reproduces the manifest byte for byte
    const auto first = slurp(data / "manifest.csv");
    CHECK(run_cmd(bin + " gen-data --config " + cfg_path.string() +
                  " > /dev/null") == 0);
    CHECK(slurp(data / "manifest.csv") == first);
  }

  SUBCASE("train, eval, and erf run end to end") {
    REQUIRE(run_cmd(bin + " gen-data --config " + cfg_path.string() +
                    " > /dev/null") == 0);
    CHECK(run_cmd(bin + " train --config " + cfg_path.string() + " > " +
                  log.string()) == 0);
    const auto stdout_text = slurp(log);
    CHECK(stdout_text.find("final_loss") != std::string::npos);
    CHECK(count_lines(slurp(out / "history.csv")) == 2);  // header + 1 epoch
    REQUIRE(fs::exists(out / "checkpoint_final.manifest"));

    const std::string ckpt = (out / "checkpoint_final").string();
    CHECK(run_cmd(bin + " eval --config " + cfg_path.string() +
                  " --checkpoint " + ckpt + " --repeats 3 > " + log.string()) ==
          0);
    const auto eval_out = slurp(log);
    CHECK(eval_out.rfind("CNN,Input,Recall,Precision,F1,Accuracy", 0) == 0);
    CHECK(eval_out.find("CEC-CNN,32x32,") != std::string::npos);
    CHECK(count_lines(slurp(out / "confusion_runs.csv")) == 4);

    // spec-hash mismatch: same checkpoint, different architecture
    CHECK(run_cmd(bin + " eval --config " + cfg_path.string() +
                  " --checkpoint " + ckpt +
                  " --input-size 64 2> /dev/null > /dev/null") == 4);

    CHECK(run_cmd(bin + " erf --config " + cfg_path.string() +
                  " --checkpoint " + ckpt +
                  " --layer head.res --channel 0 --runs 2 > " + log.string()) ==
          0);
    CHECK(fs::exists(out / "erf_head_res_c0.pgm"));
    CHECK(fs::exists(out / "erf_head_res_c0.bin"));
    CHECK(fs::exists(out / "erf_head_res_c0.txt"));
    CHECK(slurp(log).find("within_theoretical_rf yes") != std::string::npos);

    CHECK(run_cmd(bin + " erf --config " + cfg_path.string() +
                  " --layer no.such.layer --runs 1 2> " + log.string() +
                  " > /dev/null") == 5);
    CHECK(slurp(log).find("head.res") != std::string::npos);  // lists layers
  }

  SUBCASE("missing manifest exits with code 2") {
    CHECK(run_cmd(bin + " train --config " + cfg_path.string() +
                  " 2> /dev/null > /dev/null") == 2);
  }

  fs::remove_all(root);
}
