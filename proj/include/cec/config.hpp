#pragma once

#include <map>
#include <string>

#include "cec/arch.hpp"
#include "cec/train.hpp"

namespace cec {

// Sectioned key/value config text: "[section]" lines, "key = value" pairs,
// '#' comments.
using IniData = std::map<std::string, std::map<std::string, std::string>>;

IniData parse_ini(const std::string& text);
IniData read_ini_file(const std::string& path);

// Merged view of architecture, training, dataset, and run parameters. Every
// command writes its fully-resolved config next to its outputs so a run is
// reproducible from that file alone.
struct RunConfig {
  ArchitectureSpec arch;
  TrainConfig train;
  bool auto_class_weights = true;

  int patients = 8;
  int rois_per_patient = 40;
  double delta = 1.0;
  std::string data_dir = "data";
  std::string manifest;  // empty: <data_dir>/manifest.csv

  std::string out_dir = "out";
  std::uint64_t seed = 0;
  int threads = 0;  // 0 = all hardware threads
  bool deterministic = false;
  int repeats = 20;
  double train_fraction = 0.7;
  int checkpoint_every = 0;  // 0 = only at completion

  std::string manifest_path() const {
    return manifest.empty() ? data_dir + "/manifest.csv" : manifest;
  }

  void apply(const IniData& ini);
  std::string serialize() const;

  static RunConfig from_file(const std::string& path);
};

void write_text_file(const std::string& path, const std::string& text);

}  // namespace cec
