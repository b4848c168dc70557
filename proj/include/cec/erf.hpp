#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cec/arch.hpp"
#include "cec/rng.hpp"
#include "cec/tensor.hpp"

namespace cec {

// Accumulated input-gradient magnitude map from repeated center-pixel
// gradient injections.
struct ErfMap {
  std::string layer;
  int channel = 0;
  int runs = 0;
  std::uint64_t seed = 0;
  int size = 0;  // input is size x size
  std::vector<float> acc;

  float at(int y, int x) const {
    return acc[static_cast<std::size_t>(y * size + x)];
  }
  float peak() const;
  // Sums to 1 unless the map is identically zero.
  std::vector<float> normalized() const;
};

// Receptive-field geometry of one feature map, per axis: input position of
// feature pixel i is start + i * jump, with extent rf input pixels.
struct RfInfo {
  double rf = 1.0, jump = 1.0, start = 0.0;

  double lo(double feature_index) const {
    return start + feature_index * jump - (rf - 1.0) / 2.0;
  }
  double hi(double feature_index) const {
    return start + feature_index * jump + (rf - 1.0) / 2.0;
  }
};

// Gradient-injection ERF for an arbitrary feature extractor. forward must
// map a (1, in_channels, size, size) tensor to the target feature map.
template <typename Fwd>
ErfMap compute_erf_fn(Fwd&& forward, int in_channels, int size, int channel,
                      int runs, std::uint64_t seed,
                      const std::string& layer_name = "feature") {
  if (runs < 1) throw std::invalid_argument("runs must be >= 1");
  ErfMap map;
  map.layer = layer_name;
  map.channel = channel;
  map.runs = runs;
  map.seed = seed;
  map.size = size;
  map.acc.assign(static_cast<std::size_t>(size) * size, 0.0f);

  for (int run = 0; run < runs; ++run) {
    Rng rng(mix_seed(seed, "erf-run", static_cast<std::uint64_t>(run)));
    auto x = make_tensor<float>(Shape{1, in_channels, size, size}, true);
    for (auto& v : x->data) v = static_cast<float>(rng.uniform());
    auto target = forward(x);
    if (channel < 0 || channel >= target->shape.c)
      throw std::invalid_argument("channel index out of range for " +
                                  layer_name);
    const std::int64_t cy = target->shape.h / 2;
    const std::int64_t cx = target->shape.w / 2;
    auto injected = pick(target, 0, channel, cy, cx);
    backward(injected);
    // accumulate |dL/dx| summed over input channels
    for (std::int64_t c = 0; c < in_channels; ++c)
      for (std::int64_t i = 0; i < static_cast<std::int64_t>(size) * size; ++i)
        map.acc[static_cast<std::size_t>(i)] +=
            std::abs(x->grad[static_cast<std::size_t>(
                c * size * size + i)]);
  }
  for (auto& v : map.acc) v /= static_cast<float>(runs);
  return map;
}

// Probes a recorded intermediate of the model (inference mode, frozen BN).
ErfMap compute_erf(Model<float>& model, const std::string& layer, int channel,
                   int runs, std::uint64_t seed);

// Theoretical RF per recorded intermediate, from the standard recurrence
// with interval union at merges.
std::map<std::string, RfInfo> theoretical_rf(const ArchitectureSpec& spec);
inline std::map<std::string, RfInfo> theoretical_rf(
    const Model<float>& model) {
  return theoretical_rf(model.spec);
}

// True when every nonzero pixel lies inside the theoretical footprint of the
// center feature pixel.
bool support_within_rf(const ErfMap& map, const RfInfo& rf,
                       double center_feature_y, double center_feature_x);

// Max Chebyshev distance from the input center of pixels >= frac * peak.
int support_radius(const ErfMap& map, double frac);

// Writes <prefix>.pgm (8-bit, max-normalized), <prefix>.bin (raw
// little-endian float32), and <prefix>.txt (metadata).
void render_erf(const ErfMap& map, const std::string& prefix);
ErfMap read_erf_sidecar(const std::string& prefix);

}  // namespace cec
