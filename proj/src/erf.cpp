#include "cec/erf.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace cec {

float ErfMap::peak() const {
  float mx = 0.0f;
  for (const float v : acc) mx = std::max(mx, v);
  return mx;
}

std::vector<float> ErfMap::normalized() const {
  double total = 0.0;
  for (const float v : acc) total += v;
  std::vector<float> out(acc.size(), 0.0f);
  if (total > 0.0)
    for (std::size_t i = 0; i < acc.size(); ++i)
      out[i] = static_cast<float>(acc[i] / total);
  return out;
}

ErfMap compute_erf(Model<float>& model, const std::string& layer, int channel,
                   int runs, std::uint64_t seed) {
  const bool was_training = model.training_mode;
  model.training_mode = false;
  ErfMap map;
  try {
    map = compute_erf_fn(
        [&](const TensorPtr<float>& x) {
          ActivationRecord<float> rec;
          model.forward(x, &rec);
          auto target = rec.find(layer);
          if (!target) {
            std::ostringstream os;
            os << "unknown layer '" << layer << "'; available:";
            for (const auto& name : rec.names()) os << " " << name;
            throw std::invalid_argument(os.str());
          }
          return target;
        },
        model.spec.input_channels, model.spec.input_size, channel, runs, seed,
        layer);
  } catch (...) {
    model.training_mode = was_training;
    throw;
  }
  model.training_mode = was_training;
  return map;
}

namespace {

RfInfo after_conv(RfInfo r, int k, int stride) {
  r.rf += static_cast<double>(k - 1) * r.jump;
  r.jump *= stride;
  return r;
}

RfInfo after_identity_resblock(RfInfo r) {
  // 1x1, 3x3, 1x1 stack; the identity branch is contained in the F branch
  return after_conv(r, 3, 1);
}

RfInfo after_downsample_resblock(RfInfo r) {
  r = after_conv(r, 1, 2);
  return after_conv(r, 3, 1);
}

RfInfo after_maxpool(RfInfo r) {
  r.rf += r.jump;
  r.start += 0.5 * r.jump;
  r.jump *= 2;
  return r;
}

RfInfo after_upsample(RfInfo r) {
  r.rf += r.jump;  // bilinear taps the two nearest source pixels
  r.start -= 0.25 * r.jump;
  r.jump /= 2;
  return r;
}

// Interval union at concatenation/addition merges.
RfInfo merge(const RfInfo& a, const RfInfo& b) {
  const double lo = std::min(a.start - (a.rf - 1) / 2, b.start - (b.rf - 1) / 2);
  const double hi = std::max(a.start + (a.rf - 1) / 2, b.start + (b.rf - 1) / 2);
  RfInfo out;
  out.jump = a.jump;
  out.start = (lo + hi) / 2;
  out.rf = hi - lo + 1;
  return out;
}

}  // namespace

std::map<std::string, RfInfo> theoretical_rf(const ArchitectureSpec& spec) {
  spec.validate();
  std::map<std::string, RfInfo> out;
  const auto res = spec.resolutions();
  RfInfo cur{1.0, 1.0, 0.0};
  out["input"] = cur;
  cur = after_conv(cur, 3, 1);
  out["stem"] = cur;

  std::map<int, RfInfo> preserved;
  for (std::size_t si = 0; si < res.size(); ++si) {
    const int r = res[si];
    for (int b = 0; b < spec.resblocks_per_stage; ++b) {
      cur = (si > 0 && b == 0) ? after_downsample_resblock(cur)
                               : after_identity_resblock(cur);
      out["part1.s" + std::to_string(r) + ".b" + std::to_string(b)] = cur;
    }
    preserved[r] = cur;
  }

  for (int part = 2; part <= spec.num_parts; ++part) {
    const bool expansion = (part % 2 == 0);
    std::map<int, RfInfo> next;
    if (expansion) {
      int r = res.back();
      cur = preserved[r];
      next[r] = cur;
      while (r < spec.input_size) {
        r *= 2;
        cur = merge(after_upsample(after_identity_resblock(cur)),
                    preserved[r]);
        next[r] = cur;
        out["part" + std::to_string(part) + ".u" + std::to_string(r)] = cur;
      }
    } else {
      int r = res.front();
      cur = preserved[r];
      next[r] = cur;
      while (r > spec.min_resolution) {
        r /= 2;
        cur = merge(after_maxpool(after_identity_resblock(cur)),
                    preserved[r]);
        next[r] = cur;
        out["part" + std::to_string(part) + ".d" + std::to_string(r)] = cur;
      }
    }
    preserved = std::move(next);
  }

  cur = after_identity_resblock(preserved[spec.min_resolution]);
  out["head.res"] = cur;
  // global pooling sees the whole input
  RfInfo whole;
  whole.jump = 0.0;
  whole.start = (spec.input_size - 1) / 2.0;
  whole.rf = 2.0 * spec.input_size;
  out["head.pool"] = whole;
  out["logits"] = whole;
  return out;
}

bool support_within_rf(const ErfMap& map, const RfInfo& rf,
                       double center_feature_y, double center_feature_x) {
  const double ylo = rf.lo(center_feature_y) - 1e-6;
  const double yhi = rf.hi(center_feature_y) + 1e-6;
  const double xlo = rf.lo(center_feature_x) - 1e-6;
  const double xhi = rf.hi(center_feature_x) + 1e-6;
  for (int y = 0; y < map.size; ++y)
    for (int x = 0; x < map.size; ++x)
      if (map.at(y, x) > 0.0f &&
          (y < ylo || y > yhi || x < xlo || x > xhi))
        return false;
  return true;
}

int support_radius(const ErfMap& map, double frac) {
  const float threshold = static_cast<float>(frac) * map.peak();
  const int cy = map.size / 2, cx = map.size / 2;
  int radius = 0;
  for (int y = 0; y < map.size; ++y)
    for (int x = 0; x < map.size; ++x)
      if (map.at(y, x) >= threshold && map.at(y, x) > 0.0f)
        radius = std::max(radius,
                          std::max(std::abs(y - cy), std::abs(x - cx)));
  return radius;
}

void render_erf(const ErfMap& map, const std::string& prefix) {
  {
    std::ofstream f(prefix + ".pgm", std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + prefix + ".pgm");
    f << "P5\n" << map.size << " " << map.size << "\n255\n";
    const float mx = map.peak();
    for (const float v : map.acc) {
      const int q = mx > 0.0f
                        ? std::clamp(static_cast<int>(std::lround(
                                         v / mx * 255.0f)),
                                     0, 255)
                        : 0;
      f.put(static_cast<char>(q));
    }
    if (!f) throw std::runtime_error("write failed for " + prefix + ".pgm");
  }
  {
    std::ofstream f(prefix + ".bin", std::ios::binary);
    for (const float v : map.acc) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      if constexpr (std::endian::native == std::endian::big)
        bits = __builtin_bswap32(bits);
      const char bytes[4] = {static_cast<char>(bits & 0xff),
                             static_cast<char>((bits >> 8) & 0xff),
                             static_cast<char>((bits >> 16) & 0xff),
                             static_cast<char>((bits >> 24) & 0xff)};
      f.write(bytes, 4);
    }
    if (!f) throw std::runtime_error("write failed for " + prefix + ".bin");
  }
  {
    std::ofstream f(prefix + ".txt", std::ios::binary);
    f << "layer " << map.layer << "\nchannel " << map.channel << "\nruns "
      << map.runs << "\nseed " << map.seed << "\nsize " << map.size << "\n";
    if (!f) throw std::runtime_error("write failed for " + prefix + ".txt");
  }
}

ErfMap read_erf_sidecar(const std::string& prefix) {
  ErfMap map;
  {
    std::ifstream f(prefix + ".txt");
    if (!f) throw std::runtime_error("cannot read " + prefix + ".txt");
    std::string key;
    while (f >> key) {
      if (key == "layer") f >> map.layer;
      else if (key == "channel") f >> map.channel;
      else if (key == "runs") f >> map.runs;
      else if (key == "seed") f >> map.seed;
      else if (key == "size") f >> map.size;
    }
  }
  std::ifstream f(prefix + ".bin", std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + prefix + ".bin");
  map.acc.assign(static_cast<std::size_t>(map.size) * map.size, 0.0f);
  for (auto& v : map.acc) {
    unsigned char bytes[4];
    f.read(reinterpret_cast<char*>(bytes), 4);
    if (!f) throw std::runtime_error(prefix + ".bin truncated");
    std::uint32_t bits = static_cast<std::uint32_t>(bytes[0]) |
                         (static_cast<std::uint32_t>(bytes[1]) << 8) |
                         (static_cast<std::uint32_t>(bytes[2]) << 16) |
                         (static_cast<std::uint32_t>(bytes[3]) << 24);
    if constexpr (std::endian::native == std::endian::big)
      bits = __builtin_bswap32(bits);
    std::memcpy(&v, &bits, 4);
  }
  return map;
}

}  // namespace cec
