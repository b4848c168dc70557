// cecnet: command-line entry point for synthetic data generation, training,
// repeated evaluation, and ERF probing. Exit codes: 2 missing manifest,
// 3 non-finite training loss, 4 checkpoint spec-hash mismatch, 5 unknown
// layer; 1 for other errors. Results go to stdout, diagnostics to stderr.

#include <cstdio>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "cec/checkpoint.hpp"
#include "cec/config.hpp"
#include "cec/erf.hpp"
#include "cec/parallel.hpp"

namespace fs = std::filesystem;
using namespace cec;

namespace {

void prepare_run(RunConfig& cfg) {
  if (cfg.deterministic)
    set_num_threads(1);
  else
    set_num_threads(cfg.threads > 0 ? cfg.threads : hardware_threads());
  cfg.train.input_size = cfg.arch.input_size;
  cfg.train.seed = cfg.seed;
  cfg.arch.validate();
  cfg.train.validate();
  fs::create_directories(cfg.out_dir);
  write_text_file((fs::path(cfg.out_dir) / "config.resolved.ini").string(),
                  cfg.serialize());
}

std::string pct(double mean, double stddev) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.1f ±%.1f", 100.0 * mean,
                100.0 * stddev);
  return buf;
}

int cmd_gen_data(RunConfig cfg) {
  prepare_run(cfg);
  ClassParams params;
  params.delta = cfg.delta;
  auto records = generate_synthetic(cfg.patients, cfg.rois_per_patient,
                                    params, cfg.seed);
  const std::string manifest = write_dataset(records, cfg.data_dir);

  int pos = 0;
  for (const auto& r : records)
    if (r.label == Label::cancer) ++pos;
  const double oracle = centroid_oracle_accuracy(records);

  std::ostringstream report;
  report << "records " << records.size() << "\n"
         << "patients " << cfg.patients << "\n"
         << "cancer " << pos << "\n"
         << "non_cancer " << records.size() - pos << "\n"
         << "delta " << cfg.delta << "\n"
         << "centroid_oracle_accuracy " << oracle << "\n";
  write_text_file((fs::path(cfg.data_dir) / "gen_report.txt").string(),
                  report.str());
  std::cout << "manifest " << manifest << "\n" << report.str();
  return 0;
}

std::array<double, 2> resolve_class_weights(
    const RunConfig& cfg, const std::vector<PatchRecord>& train_records) {
  if (!cfg.auto_class_weights) return cfg.train.class_weights;
  return compute_class_weights(train_records);
}

int cmd_train(RunConfig cfg) {
  prepare_run(cfg);
  if (!fs::exists(cfg.manifest_path())) {
    std::cerr << "error: dataset manifest not found: " << cfg.manifest_path()
              << "\n";
    return 2;
  }
  auto records = read_dataset(cfg.manifest_path());
  auto split = split_by_patient(records, cfg.train_fraction, cfg.seed);
  auto train_records = select_by_patients(records, split.train_ids);

  TrainConfig tcfg = cfg.train;
  tcfg.class_weights = resolve_class_weights(cfg, train_records);
  std::cerr << "training on " << train_records.size() << " ROIs from "
            << split.train_ids.size() << " patients; class weights ("
            << tcfg.class_weights[1] << " cancer, " << tcfg.class_weights[0]
            << " non-cancer)\n";

  auto model = build_network<float>(cfg.arch, cfg.seed);
  TrainResult result;
  try {
    result = train(model, train_records, tcfg,
                   [&](int epoch, Model<float>& m) {
                     if (cfg.checkpoint_every > 0 &&
                         (epoch + 1) % cfg.checkpoint_every == 0)
                       save_checkpoint(
                           m, (fs::path(cfg.out_dir) /
                               ("checkpoint_epoch" + std::to_string(epoch)))
                                  .string());
                   });
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }

  write_history_csv((fs::path(cfg.out_dir) / "history.csv").string(),
                    result.history);
  save_checkpoint(model,
                  (fs::path(cfg.out_dir) / "checkpoint_final").string());
  const auto& last = result.history.back();
  std::printf("final_loss %.9g\nfinal_lr %.9g\nfinal_train_accuracy %.4f\n",
              last.loss, last.lr, last.train_accuracy);
  return 0;
}

int cmd_eval(RunConfig cfg, const std::string& checkpoint) {
  prepare_run(cfg);
  if (!fs::exists(cfg.manifest_path())) {
    std::cerr << "error: dataset manifest not found: " << cfg.manifest_path()
              << "\n";
    return 2;
  }
  Model<float> model = build_network<float>(cfg.arch, cfg.seed);
  try {
    model = load_checkpoint_checked(checkpoint, cfg.arch.hash());
  } catch (const std::runtime_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
  auto records = read_dataset(cfg.manifest_path());
  auto split = split_by_patient(records, cfg.train_fraction, cfg.seed);
  auto test_records = select_by_patients(records, split.test_ids);

  auto summary = evaluate_repeated(model, test_records, cfg.repeats,
                                   cfg.arch.input_size, cfg.seed);

  const std::string input = std::to_string(cfg.arch.input_size) + "x" +
                            std::to_string(cfg.arch.input_size);
  std::cout << "CNN,Input,Recall,Precision,F1,Accuracy\n"
            << "CEC-CNN," << input << ","
            << pct(summary.mean.recall, summary.stddev.recall) << ","
            << pct(summary.mean.precision, summary.stddev.precision) << ","
            << pct(summary.mean.f1, summary.stddev.f1) << ","
            << pct(summary.mean.accuracy, summary.stddev.accuracy) << "\n";

  std::ostringstream csv;
  csv << "metric,mean,std\n";
  char row[96];
  std::snprintf(row, sizeof(row), "recall,%.9g,%.9g\n", summary.mean.recall,
                summary.stddev.recall);
  csv << row;
  std::snprintf(row, sizeof(row), "precision,%.9g,%.9g\n",
                summary.mean.precision, summary.stddev.precision);
  csv << row;
  std::snprintf(row, sizeof(row), "f1,%.9g,%.9g\n", summary.mean.f1,
                summary.stddev.f1);
  csv << row;
  std::snprintf(row, sizeof(row), "accuracy,%.9g,%.9g\n",
                summary.mean.accuracy, summary.stddev.accuracy);
  csv << row;
  write_text_file((fs::path(cfg.out_dir) / "metrics.csv").string(),
                  csv.str());

  std::ostringstream runs;
  runs << "run,tp,tn,fp,fn\n";
  for (std::size_t i = 0; i < summary.per_run_counts.size(); ++i) {
    const auto& c = summary.per_run_counts[i];
    runs << i << "," << c.tp << "," << c.tn << "," << c.fp << "," << c.fn
         << "\n";
  }
  write_text_file((fs::path(cfg.out_dir) / "confusion_runs.csv").string(),
                  runs.str());
  return 0;
}

int cmd_erf(RunConfig cfg, const std::string& checkpoint,
            const std::string& layer, std::vector<int> channels, int runs) {
  prepare_run(cfg);
  Model<float> model = build_network<float>(cfg.arch, cfg.seed);
  if (!checkpoint.empty()) {
    try {
      model = load_checkpoint_checked(checkpoint, cfg.arch.hash());
    } catch (const std::runtime_error& e) {
      std::cerr << "error: " << e.what() << "\n";
      return 4;
    }
  }
  const auto rf = theoretical_rf(model.spec);
  for (const int channel : channels) {
    ErfMap map;
    try {
      map = compute_erf(model, layer, channel, runs, cfg.seed);
    } catch (const std::invalid_argument& e) {
      std::cerr << "error: " << e.what() << "\n";
      return 5;
    }
    std::string safe_layer = layer;
    for (auto& ch : safe_layer)
      if (ch == '.') ch = '_';
    const std::string prefix =
        (fs::path(cfg.out_dir) /
         ("erf_" + safe_layer + "_c" + std::to_string(channel)))
            .string();
    render_erf(map, prefix);

    const auto it = rf.find(layer);
    std::string contained = "n/a";
    if (it != rf.end()) {
      // the injected pixel sits at the spatial center of the feature map
      const auto shapes = symbolic_shape_walk(model.spec);
      double cy = 0, cx = 0;
      for (const auto& ns : shapes)
        if (ns.name == layer) {
          cy = static_cast<double>(ns.shape.h / 2);
          cx = static_cast<double>(ns.shape.w / 2);
        }
      contained = support_within_rf(map, it->second, cy, cx) ? "yes" : "NO";
    }
    std::cout << "erf " << layer << " channel " << channel << " -> " << prefix
              << ".pgm support_radius_5pct " << support_radius(map, 0.05)
              << " within_theoretical_rf " << contained << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CEC-CNN reference implementation"};
  app.require_subcommand(1);

  std::string config_path;
  RunConfig cfg;
  bool flag_deterministic = false;

  // global flags, applied on top of the config file
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "structured config file");
    cmd->add_option("--seed", cfg.seed, "global seed");
    cmd->add_option("--input-size", cfg.arch.input_size, "32 or 64")
        ->check(CLI::IsMember({32, 64}));
    cmd->add_option("--epochs", cfg.train.epochs, "training epochs");
    cmd->add_option("--repeats", cfg.repeats, "evaluation repeats");
    cmd->add_option("--threads", cfg.threads, "worker threads (0 = all)");
    cmd->add_flag("--deterministic", flag_deterministic,
                  "single-threaded, bitwise-reproducible mode");
    cmd->add_option("--out", cfg.out_dir, "output directory");
  };

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  add_common(gen);
  gen->add_option("--patients", cfg.patients, "number of synthetic patients");
  gen->add_option("--rois", cfg.rois_per_patient, "ROIs per patient");
  gen->add_option("--delta", cfg.delta, "class separability in [0,1]");
  gen->add_option("--data-dir", cfg.data_dir, "dataset directory");

  auto* tr = app.add_subcommand("train", "train on a dataset manifest");
  add_common(tr);
  tr->add_option("--data-dir", cfg.data_dir, "dataset directory");
  tr->add_option("--manifest", cfg.manifest, "manifest CSV path");

  std::string checkpoint;
  auto* ev = app.add_subcommand("eval", "20-repeat randomized evaluation");
  add_common(ev);
  ev->add_option("--data-dir", cfg.data_dir, "dataset directory");
  ev->add_option("--manifest", cfg.manifest, "manifest CSV path");
  ev->add_option("--checkpoint", checkpoint, "checkpoint prefix")
      ->required();

  std::string layer = "head.res";
  std::vector<int> channels{0};
  int erf_runs = 100;
  auto* erf = app.add_subcommand("erf", "effective-receptive-field probe");
  add_common(erf);
  erf->add_option("--checkpoint", checkpoint,
                  "checkpoint prefix (omit to probe a fresh build)");
  erf->add_option("--layer", layer, "target layer name");
  erf->add_option("--channel", channels, "feature map index (repeatable)");
  erf->add_option("--runs", erf_runs, "averaging runs");

  // Two-pass parse: the config file provides defaults, flags override.
  try {
    app.parse(argc, argv);
    if (!config_path.empty()) {
      cfg = RunConfig::from_file(config_path);
      app.clear();
      app.parse(argc, argv);  // re-apply flag overrides on the loaded config
    }
    cfg.deterministic = cfg.deterministic || flag_deterministic;
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(cfg);
    if (tr->parsed()) return cmd_train(cfg);
    if (ev->parsed()) return cmd_eval(cfg, checkpoint);
    if (erf->parsed()) return cmd_erf(cfg, checkpoint, layer, channels,
                                      erf_runs);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
