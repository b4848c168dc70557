#include "cec/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "cec/tensor.hpp"  // detail::lerp_taps

namespace cec {

namespace fs = std::filesystem;

namespace {

void box_blur_inplace(Image& img, int radius) {
  if (radius <= 0) return;
  Image tmp = img;
  // horizontal pass
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      float acc = 0.0f;
      int count = 0;
      for (int d = -radius; d <= radius; ++d) {
        const int xx = x + d;
        if (xx < 0 || xx >= img.w) continue;
        acc += img.at(y, xx);
        ++count;
      }
      tmp.at(y, x) = acc / static_cast<float>(count);
    }
  // vertical pass
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      float acc = 0.0f;
      int count = 0;
      for (int d = -radius; d <= radius; ++d) {
        const int yy = y + d;
        if (yy < 0 || yy >= img.h) continue;
        acc += tmp.at(yy, x);
        ++count;
      }
      img.at(y, x) = acc / static_cast<float>(count);
    }
}

Image crop(const Image& img, int y0, int x0, int h, int w) {
  Image out;
  out.h = h;
  out.w = w;
  out.pix.resize(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out.at(y, x) = img.at(y0 + y, x0 + x);
  return out;
}

void rotate90_inplace(Image& img) {  // counter-clockwise
  Image out;
  out.h = img.w;
  out.w = img.h;
  out.pix.resize(img.pix.size());
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      out.at(img.w - 1 - x, y) = img.at(y, x);
  img = std::move(out);
}

}  // namespace

std::vector<PatchRecord> generate_synthetic(int num_patients,
                                            int rois_per_patient,
                                            const ClassParams& params,
                                            std::uint64_t seed) {
  if (params.delta < 0.0 || params.delta > 1.0)
    throw std::invalid_argument("delta must lie in [0, 1]");
  if (num_patients < 1 || rois_per_patient < 1)
    throw std::invalid_argument("need at least one patient and one ROI");

  std::vector<PatchRecord> records;
  records.reserve(static_cast<std::size_t>(num_patients) * rois_per_patient);

  const int pos_extra =
      static_cast<int>(std::lround(params.extra_blur_radius * params.delta));
  const double blob_amp = params.blob_amplitude * params.delta;

  for (int p = 0; p < num_patients; ++p) {
    Rng prng(mix_seed(seed, "patient", static_cast<std::uint64_t>(p)));
    // private texture phase per patient, so grouping by patient matters
    const double phase_x = prng.uniform();
    const double phase_y = prng.uniform();
    const double brightness = prng.uniform(-0.04, 0.04);

    char pid[16];
    std::snprintf(pid, sizeof(pid), "P%03d", p);

    for (int i = 0; i < rois_per_patient; ++i) {
      Rng rng(mix_seed(mix_seed(seed, "roi", static_cast<std::uint64_t>(p)),
                       static_cast<std::uint64_t>(i)));
      PatchRecord rec;
      rec.patient_id = pid;
      rec.label = rng.bernoulli(0.5) ? Label::cancer : Label::non_cancer;
      const bool pos = rec.label == Label::cancer;

      Image img;
      img.h = rng.uniform_int(params.min_roi, params.max_roi);
      img.w = rng.uniform_int(params.min_roi, params.max_roi);
      img.pix.resize(static_cast<std::size_t>(img.h) * img.w);
      for (auto& v : img.pix) v = static_cast<float>(rng.uniform(-1.0, 1.0));

      const int radius =
          params.base_blur_radius + (pos ? pos_extra : 0);
      box_blur_inplace(img, radius);

      for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
          const double s =
              0.05 * std::sin(2.0 * 3.14159265358979323846 *
                              (x / 16.0 + phase_x)) *
              std::sin(2.0 * 3.14159265358979323846 * (y / 16.0 + phase_y));
          img.at(y, x) =
              static_cast<float>(0.5 + brightness + s + img.at(y, x));
        }

      if (pos && blob_amp > 0.0) {
        for (int b = 0; b < params.blobs_per_roi; ++b) {
          const double cy = rng.uniform(0.0, img.h);
          const double cx = rng.uniform(0.0, img.w);
          const double sigma = rng.uniform(1.5, 4.0);
          for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x) {
              const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
              img.at(y, x) += static_cast<float>(
                  blob_amp * std::exp(-d2 / (2.0 * sigma * sigma)));
            }
        }
      }

      for (auto& v : img.pix) v = std::clamp(v, 0.0f, 1.0f);
      rec.image = std::move(img);
      records.push_back(std::move(rec));
    }
  }
  return records;
}

double centroid_oracle_accuracy(const std::vector<PatchRecord>& records) {
  if (records.empty()) throw std::invalid_argument("no records");
  struct Feat {
    double mean, stddev;
    Label label;
  };
  std::vector<Feat> feats;
  feats.reserve(records.size());
  for (const auto& r : records) {
    double mean = 0.0;
    for (const float v : r.image.pix) mean += v;
    mean /= static_cast<double>(r.image.pix.size());
    double var = 0.0;
    for (const float v : r.image.pix) var += (v - mean) * (v - mean);
    var /= static_cast<double>(r.image.pix.size());
    feats.push_back({mean, std::sqrt(var), r.label});
  }
  double c0m = 0, c0s = 0, c1m = 0, c1s = 0;
  int n0 = 0, n1 = 0;
  for (const auto& f : feats) {
    if (f.label == Label::cancer) {
      c1m += f.mean;
      c1s += f.stddev;
      ++n1;
    } else {
      c0m += f.mean;
      c0s += f.stddev;
      ++n0;
    }
  }
  if (n0 == 0 || n1 == 0) return 0.5;
  c0m /= n0;
  c0s /= n0;
  c1m /= n1;
  c1s /= n1;
  // standardize features so neither axis dominates
  double sm = 0, ss = 0, mm = 0, ms = 0;
  for (const auto& f : feats) {
    mm += f.mean;
    ms += f.stddev;
  }
  mm /= feats.size();
  ms /= feats.size();
  for (const auto& f : feats) {
    sm += (f.mean - mm) * (f.mean - mm);
    ss += (f.stddev - ms) * (f.stddev - ms);
  }
  sm = std::sqrt(sm / feats.size()) + 1e-12;
  ss = std::sqrt(ss / feats.size()) + 1e-12;
  int correct = 0;
  for (const auto& f : feats) {
    const double d0 = std::pow((f.mean - c0m) / sm, 2) +
                      std::pow((f.stddev - c0s) / ss, 2);
    const double d1 = std::pow((f.mean - c1m) / sm, 2) +
                      std::pow((f.stddev - c1s) / ss, 2);
    const Label pred = d1 < d0 ? Label::cancer : Label::non_cancer;
    if (pred == f.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(feats.size());
}

SampledPatch sample_patch_traced(const PatchRecord& record, Rng& rng) {
  const Image& src = record.image;
  if (src.h < 8 || src.w < 8)
    throw std::invalid_argument("ROI must be at least 8 px per side");

  // Stage 1: each dimension above 16 px is cropped to a random size in
  // [8, 15] at a uniform random position.
  int h = src.h, w = src.w, y0 = 0, x0 = 0;
  if (h > 16) {
    const int nh = rng.uniform_int(8, 15);
    y0 = rng.uniform_int(0, h - nh);
    h = nh;
  }
  if (w > 16) {
    const int nw = rng.uniform_int(8, 15);
    x0 = rng.uniform_int(0, w - nw);
    w = nw;
  }

  // Stage 2: square crop with side = min(h, w).
  const int side = std::min(h, w);
  const int sy = y0 + rng.uniform_int(0, h - side);
  const int sx = x0 + rng.uniform_int(0, w - side);

  SampledPatch out;
  out.stage1_h = h;
  out.stage1_w = w;
  out.patch = crop(src, sy, sx, side, side);
  return out;
}

Image sample_patch(const PatchRecord& record, Rng& rng) {
  return sample_patch_traced(record, rng).patch;
}

void augment_inplace(Image& patch, Rng& rng) {
  if (patch.h != patch.w)
    throw std::invalid_argument("augment requires a square patch");
  const bool hflip = rng.bernoulli(0.5);
  const bool vflip = rng.bernoulli(0.5);
  const int quarter_turns = rng.uniform_int(0, 3);
  if (hflip)
    for (int y = 0; y < patch.h; ++y)
      for (int x = 0; x < patch.w / 2; ++x)
        std::swap(patch.at(y, x), patch.at(y, patch.w - 1 - x));
  if (vflip)
    for (int y = 0; y < patch.h / 2; ++y)
      for (int x = 0; x < patch.w; ++x)
        std::swap(patch.at(y, x), patch.at(patch.h - 1 - y, x));
  for (int k = 0; k < quarter_turns; ++k) rotate90_inplace(patch);
}

Image resize_bilinear(const Image& img, int target_h, int target_w) {
  const auto ty = detail::lerp_taps(img.h, target_h);
  const auto tx = detail::lerp_taps(img.w, target_w);
  Image out;
  out.h = target_h;
  out.w = target_w;
  out.pix.resize(static_cast<std::size_t>(target_h) * target_w);
  for (int y = 0; y < target_h; ++y) {
    const auto& a = ty[static_cast<std::size_t>(y)];
    for (int x = 0; x < target_w; ++x) {
      const auto& b = tx[static_cast<std::size_t>(x)];
      out.at(y, x) = static_cast<float>(
          a.w0 * (b.w0 * img.at(static_cast<int>(a.i0),
                                static_cast<int>(b.i0)) +
                  b.w1 * img.at(static_cast<int>(a.i0),
                                static_cast<int>(b.i1))) +
          a.w1 * (b.w0 * img.at(static_cast<int>(a.i1),
                                static_cast<int>(b.i0)) +
                  b.w1 * img.at(static_cast<int>(a.i1),
                                static_cast<int>(b.i1))));
    }
  }
  return out;
}

SplitManifest split_by_patient(const std::vector<PatchRecord>& records,
                               double fraction, std::uint64_t seed) {
  std::vector<std::string> ids;
  std::set<std::string> seen;
  for (const auto& r : records)
    if (seen.insert(r.patient_id).second) ids.push_back(r.patient_id);
  if (ids.size() < 2)
    throw std::invalid_argument("need at least 2 patients to split");

  Rng rng(mix_seed(seed, "split"));
  rng.shuffle(ids);
  const std::size_t train_count = static_cast<std::size_t>(
      std::floor(fraction * static_cast<double>(ids.size())));
  SplitManifest m;
  m.seed = seed;
  m.train_ids.assign(ids.begin(), ids.begin() + train_count);
  m.test_ids.assign(ids.begin() + train_count, ids.end());
  return m;
}

std::array<double, 2> compute_class_weights(
    const std::vector<PatchRecord>& records) {
  std::array<std::int64_t, 2> counts{0, 0};
  for (const auto& r : records)
    ++counts[static_cast<std::size_t>(static_cast<int>(r.label))];
  if (counts[0] == 0 || counts[1] == 0)
    throw std::invalid_argument("both classes must be present");
  const double total = static_cast<double>(counts[0] + counts[1]);
  return {total / (2.0 * counts[0]), total / (2.0 * counts[1])};
}

void write_pgm(const std::string& path, const Image& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "P5\n" << img.w << " " << img.h << "\n65535\n";
  for (const float v : img.pix) {
    const int q = std::clamp(static_cast<int>(std::lround(v * 65535.0)), 0,
                             65535);
    const unsigned char hi = static_cast<unsigned char>(q >> 8);
    const unsigned char lo = static_cast<unsigned char>(q & 0xff);
    f.put(static_cast<char>(hi));  // big-endian per PGM
    f.put(static_cast<char>(lo));
  }
  if (!f) throw std::runtime_error("write failed for " + path);
}

Image read_pgm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path);
  std::string magic;
  f >> magic;
  if (magic != "P5") throw std::runtime_error(path + ": not a binary PGM");
  auto next_int = [&]() {
    int v;
    while (true) {
      f >> std::ws;
      if (f.peek() == '#') {
        std::string line;
        std::getline(f, line);
        continue;
      }
      f >> v;
      return v;
    }
  };
  const int w = next_int();
  const int h = next_int();
  const int maxval = next_int();
  f.get();  // single whitespace after header
  if (maxval != 255 && maxval != 65535)
    throw std::runtime_error(path + ": unsupported maxval");
  Image img;
  img.h = h;
  img.w = w;
  img.pix.resize(static_cast<std::size_t>(h) * w);
  for (auto& v : img.pix) {
    int q;
    if (maxval == 255) {
      q = f.get();
    } else {
      const int hi = f.get();
      const int lo = f.get();
      q = (hi << 8) | lo;
    }
    if (!f) throw std::runtime_error(path + ": truncated image data");
    v = static_cast<float>(q) / static_cast<float>(maxval);
  }
  return img;
}

std::string write_dataset(const std::vector<PatchRecord>& records,
                          const std::string& dir) {
  fs::create_directories(fs::path(dir) / "images");
  std::map<std::string, int> counters;
  std::ostringstream manifest;
  manifest << "patient_id,path,label\n";
  for (const auto& r : records) {
    const int idx = counters[r.patient_id]++;
    std::ostringstream name;
    name << "images/" << r.patient_id << "_" << idx << ".pgm";
    write_pgm((fs::path(dir) / name.str()).string(), r.image);
    manifest << r.patient_id << "," << name.str() << ","
             << label_name(r.label) << "\n";
  }
  const std::string manifest_path = (fs::path(dir) / "manifest.csv").string();
  std::ofstream f(manifest_path, std::ios::binary);
  f << manifest.str();
  if (!f) throw std::runtime_error("cannot write " + manifest_path);
  return manifest_path;
}

std::vector<PatchRecord> read_dataset(const std::string& manifest_path) {
  std::ifstream f(manifest_path);
  if (!f) throw std::runtime_error("cannot read " + manifest_path);
  const fs::path base = fs::path(manifest_path).parent_path();
  std::string line;
  std::getline(f, line);
  if (line != "patient_id,path,label")
    throw std::runtime_error(manifest_path + ": bad manifest header");
  std::vector<PatchRecord> records;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string pid, path, label;
    if (!std::getline(ls, pid, ',') || !std::getline(ls, path, ',') ||
        !std::getline(ls, label))
      throw std::runtime_error(manifest_path + ": malformed row: " + line);
    PatchRecord rec;
    rec.patient_id = pid;
    rec.image = read_pgm((base / path).string());
    if (label == "cancer")
      rec.label = Label::cancer;
    else if (label == "non_cancer")
      rec.label = Label::non_cancer;
    else
      throw std::runtime_error(manifest_path + ": unknown label: " + label);
    records.push_back(std::move(rec));
  }
  return records;
}

std::vector<PatchRecord> select_by_patients(
    const std::vector<PatchRecord>& records,
    const std::vector<std::string>& ids) {
  std::set<std::string> keep(ids.begin(), ids.end());
  std::vector<PatchRecord> out;
  for (const auto& r : records)
    if (keep.count(r.patient_id)) out.push_back(r);
  return out;
}

}  // namespace cec
