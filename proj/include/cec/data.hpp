#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "cec/rng.hpp"

namespace cec {

struct Image {
  int h = 0, w = 0;
  std::vector<float> pix;  // row-major, values in [0, 1]

  float& at(int y, int x) { return pix[static_cast<std::size_t>(y * w + x)]; }
  float at(int y, int x) const {
    return pix[static_cast<std::size_t>(y * w + x)];
  }
};

enum class Label : int { non_cancer = 0, cancer = 1 };

inline const char* label_name(Label l) {
  return l == Label::cancer ? "cancer" : "non_cancer";
}

// One annotated ROI: a small grayscale rectangle with its originating
// patient id and binary label.
struct PatchRecord {
  std::string patient_id;
  Image image;
  Label label = Label::non_cancer;
};

// Two-class correlated-noise texture model. delta in [0, 1] scales the
// separability; at 0 the classes are identically distributed.
struct ClassParams {
  double delta = 1.0;
  int base_blur_radius = 1;        // both classes
  double extra_blur_radius = 2.0;  // positive class, scaled by delta
  double blob_amplitude = 0.3;     // positive class, scaled by delta
  int blobs_per_roi = 3;
  int min_roi = 8, max_roi = 24;
};

std::vector<PatchRecord> generate_synthetic(int num_patients,
                                            int rois_per_patient,
                                            const ClassParams& params,
                                            std::uint64_t seed);

// Nearest-centroid classifier on (mean, stddev) features, evaluated on the
// records themselves. Used as the generation-time separability oracle.
double centroid_oracle_accuracy(const std::vector<PatchRecord>& records);

// ROI cropping: dimensions above 16 px are first cropped to a uniform random
// size in [8, 15]; a square of side min(h, w) is then cropped at a uniform
// random position.
struct SampledPatch {
  Image patch;
  int stage1_h = 0, stage1_w = 0;  // sizes after the first crop stage
};

SampledPatch sample_patch_traced(const PatchRecord& record, Rng& rng);
Image sample_patch(const PatchRecord& record, Rng& rng);

// Horizontal flip (p=0.5), vertical flip (p=0.5), rotation by k*90 degrees
// with k uniform in {0,1,2,3}. Requires a square patch.
void augment_inplace(Image& patch, Rng& rng);

// Half-pixel-center bilinear resize; agrees exactly with the tensor
// upsampler when target == 2 * side.
Image resize_bilinear(const Image& img, int target_h, int target_w);
inline Image resize_to_input(const Image& patch, int target) {
  if (patch.h != patch.w)
    throw std::invalid_argument("resize_to_input requires a square patch");
  return resize_bilinear(patch, target, target);
}

struct SplitManifest {
  std::vector<std::string> train_ids, test_ids;
  std::uint64_t seed = 0;
};

SplitManifest split_by_patient(const std::vector<PatchRecord>& records,
                               double fraction, std::uint64_t seed);

// Inverse-frequency weights with mean normalization: w_c = N / (2 * N_c),
// indexed by the label value (0 = non_cancer, 1 = cancer).
std::array<double, 2> compute_class_weights(
    const std::vector<PatchRecord>& records);

// --- On-disk layout: PGM images plus a manifest CSV -----------------------

void write_pgm(const std::string& path, const Image& img);  // 16-bit P5
Image read_pgm(const std::string& path);

// Writes images/<patient>_<index>.pgm and manifest.csv with header
// patient_id,path,label under dir. Returns the manifest path.
std::string write_dataset(const std::vector<PatchRecord>& records,
                          const std::string& dir);
std::vector<PatchRecord> read_dataset(const std::string& manifest_path);

std::vector<PatchRecord> select_by_patients(
    const std::vector<PatchRecord>& records,
    const std::vector<std::string>& ids);

}  // namespace cec
