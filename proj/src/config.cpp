#include "cec/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace cec {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

// round-trippable double formatting
std::string precise(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("not a boolean: " + v);
}

}  // namespace

IniData parse_ini(const std::string& text) {
  IniData data;
  std::istringstream is(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw std::invalid_argument("config line " + std::to_string(lineno) +
                                    ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": expected key = value");
    data[section][trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return data;
}

IniData read_ini_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read config file " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return parse_ini(os.str());
}

void RunConfig::apply(const IniData& ini) {
  auto get = [&](const std::string& section, const std::string& key,
                 auto setter) {
    const auto s = ini.find(section);
    if (s == ini.end()) return;
    const auto k = s->second.find(key);
    if (k == s->second.end()) return;
    setter(k->second);
  };
  auto as_int = [](const std::string& v) { return std::stoi(v); };
  auto as_double = [](const std::string& v) { return std::stod(v); };

  get("arch", "input_channels",
      [&](const std::string& v) { arch.input_channels = as_int(v); });
  get("arch", "input_size",
      [&](const std::string& v) { arch.input_size = as_int(v); });
  get("arch", "stem_channels",
      [&](const std::string& v) { arch.stem_channels = as_int(v); });
  get("arch", "min_resolution",
      [&](const std::string& v) { arch.min_resolution = as_int(v); });
  get("arch", "resblocks_per_stage",
      [&](const std::string& v) { arch.resblocks_per_stage = as_int(v); });
  get("arch", "num_classes",
      [&](const std::string& v) { arch.num_classes = as_int(v); });

  get("train", "learning_rate",
      [&](const std::string& v) { train.learning_rate = as_double(v); });
  get("train", "momentum",
      [&](const std::string& v) { train.momentum = as_double(v); });
  get("train", "lr_factor",
      [&](const std::string& v) { train.lr_factor = as_double(v); });
  get("train", "plateau_patience",
      [&](const std::string& v) { train.plateau_patience = as_int(v); });
  get("train", "epochs",
      [&](const std::string& v) { train.epochs = as_int(v); });
  get("train", "batch_size",
      [&](const std::string& v) { train.batch_size = as_int(v); });
  get("train", "class_weight_non_cancer", [&](const std::string& v) {
    train.class_weights[0] = as_double(v);
    auto_class_weights = false;
  });
  get("train", "class_weight_cancer", [&](const std::string& v) {
    train.class_weights[1] = as_double(v);
    auto_class_weights = false;
  });
  get("train", "auto_class_weights",
      [&](const std::string& v) { auto_class_weights = parse_bool(v); });

  get("data", "patients",
      [&](const std::string& v) { patients = as_int(v); });
  get("data", "rois_per_patient",
      [&](const std::string& v) { rois_per_patient = as_int(v); });
  get("data", "delta", [&](const std::string& v) { delta = as_double(v); });
  get("data", "dir", [&](const std::string& v) { data_dir = v; });
  get("data", "manifest", [&](const std::string& v) { manifest = v; });

  get("run", "seed",
      [&](const std::string& v) { seed = std::stoull(v); });
  get("run", "out", [&](const std::string& v) { out_dir = v; });
  get("run", "threads",
      [&](const std::string& v) { threads = as_int(v); });
  get("run", "deterministic",
      [&](const std::string& v) { deterministic = parse_bool(v); });
  get("run", "repeats",
      [&](const std::string& v) { repeats = as_int(v); });
  get("run", "train_fraction",
      [&](const std::string& v) { train_fraction = as_double(v); });
  get("run", "checkpoint_every",
      [&](const std::string& v) { checkpoint_every = as_int(v); });

  train.input_size = arch.input_size;
  train.seed = seed;
}

std::string RunConfig::serialize() const {
  std::ostringstream os;
  os << "[arch]\n"
     << "input_channels = " << arch.input_channels << "\n"
     << "input_size = " << arch.input_size << "\n"
     << "stem_channels = " << arch.stem_channels << "\n"
     << "min_resolution = " << arch.min_resolution << "\n"
     << "resblocks_per_stage = " << arch.resblocks_per_stage << "\n"
     << "num_classes = " << arch.num_classes << "\n\n"
     << "[train]\n"
     << "learning_rate = " << precise(train.learning_rate) << "\n"
     << "momentum = " << precise(train.momentum) << "\n"
     << "lr_factor = " << precise(train.lr_factor) << "\n"
     << "plateau_patience = " << train.plateau_patience << "\n"
     << "epochs = " << train.epochs << "\n"
     << "batch_size = " << train.batch_size << "\n"
     << "auto_class_weights = " << (auto_class_weights ? "true" : "false")
     << "\n"
     << "class_weight_non_cancer = " << precise(train.class_weights[0])
     << "\n"
     << "class_weight_cancer = " << precise(train.class_weights[1])
     << "\n\n"
     << "[data]\n"
     << "patients = " << patients << "\n"
     << "rois_per_patient = " << rois_per_patient << "\n"
     << "delta = " << precise(delta) << "\n"
     << "dir = " << data_dir << "\n";
  if (!manifest.empty()) os << "manifest = " << manifest << "\n";
  os << "\n[run]\n"
     << "seed = " << seed << "\n"
     << "out = " << out_dir << "\n"
     << "threads = " << threads << "\n"
     << "deterministic = " << (deterministic ? "true" : "false") << "\n"
     << "repeats = " << repeats << "\n"
     << "train_fraction = " << precise(train_fraction) << "\n"
     << "checkpoint_every = " << checkpoint_every << "\n";
  return os.str();
}

RunConfig RunConfig::from_file(const std::string& path) {
  RunConfig cfg;
  cfg.apply(read_ini_file(path));
  return cfg;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) throw std::runtime_error("cannot write " + path);
}

}  // namespace cec
