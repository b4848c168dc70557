#pragma once

#include <cstdint>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cec/blocks.hpp"
#include "cec/rng.hpp"
#include "cec/tensor.hpp"

namespace cec {

// Declarative description of the 5-part consecutive expansion-contraction
// topology. Resolutions run from input_size down to min_resolution in powers
// of two; parts alternate contraction / expansion / contraction / expansion /
// contraction over that ladder.
struct ArchitectureSpec {
  int input_channels = 1;
  int input_size = 32;
  int stem_channels = 8;
  int min_resolution = 8;
  int resblocks_per_stage = 2;
  int num_parts = 5;
  int num_classes = 2;

  std::vector<int> resolutions() const {  // descending, e.g. {32, 16, 8}
    std::vector<int> r;
    for (int s = input_size; s >= min_resolution; s /= 2) r.push_back(s);
    return r;
  }

  void validate() const {
    auto pow2 = [](int v) { return v > 0 && (v & (v - 1)) == 0; };
    if (num_parts != 5)
      throw std::invalid_argument("architecture requires exactly 5 parts");
    if (!pow2(input_size) || !pow2(min_resolution) || min_resolution < 4)
      throw std::invalid_argument(
          "resolutions must be powers of two and >= 4");
    if (input_size < 2 * min_resolution)
      throw std::invalid_argument(
          "input size must be at least twice the smallest resolution");
    if (input_channels < 1 || stem_channels < 1 || resblocks_per_stage < 1 ||
        num_classes < 2)
      throw std::invalid_argument("invalid architecture parameters");
  }

  std::string serialize() const {
    std::ostringstream os;
    os << "cec-architecture v1\n"
       << "input_channels = " << input_channels << "\n"
       << "input_size = " << input_size << "\n"
       << "stem_channels = " << stem_channels << "\n"
       << "min_resolution = " << min_resolution << "\n"
       << "resblocks_per_stage = " << resblocks_per_stage << "\n"
       << "num_parts = " << num_parts << "\n"
       << "num_classes = " << num_classes << "\n";
    return os.str();
  }

  static ArchitectureSpec parse(const std::string& text) {
    ArchitectureSpec spec;
    std::istringstream is(text);
    std::string line;
    std::getline(is, line);
    if (line != "cec-architecture v1")
      throw std::invalid_argument("unrecognized architecture document");
    while (std::getline(is, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      std::string key = line.substr(0, eq);
      key.erase(key.find_last_not_of(' ') + 1);
      const int value = std::stoi(line.substr(eq + 1));
      if (key == "input_channels") spec.input_channels = value;
      else if (key == "input_size") spec.input_size = value;
      else if (key == "stem_channels") spec.stem_channels = value;
      else if (key == "min_resolution") spec.min_resolution = value;
      else if (key == "resblocks_per_stage") spec.resblocks_per_stage = value;
      else if (key == "num_parts") spec.num_parts = value;
      else if (key == "num_classes") spec.num_classes = value;
      else throw std::invalid_argument("unknown architecture key: " + key);
    }
    spec.validate();
    return spec;
  }

  std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (char c : serialize()) {
      h ^= static_cast<unsigned char>(c);
      h *= 1099511628211ULL;
    }
    return h;
  }

  bool operator==(const ArchitectureSpec&) const = default;
};

struct NamedShape {
  std::string name;
  Shape shape;
};

// Symbolic shape walk: applies the stage/channel laws by pure arithmetic,
// with no tensors involved. Serves as the independent bookkeeping route that
// the numeric forward pass is checked against.
inline std::vector<NamedShape> symbolic_shape_walk(const ArchitectureSpec& spec,
                                                   std::int64_t batch = 1) {
  spec.validate();
  std::vector<NamedShape> out;
  const auto res = spec.resolutions();
  auto emit = [&](const std::string& name, std::int64_t c, int r) {
    out.push_back({name, Shape{batch, c, r, r}});
  };

  emit("input", spec.input_channels, spec.input_size);
  emit("stem", spec.stem_channels, spec.input_size);

  // Part 1: pure-ResBlock contraction; the first block of every non-top
  // stage is the strided channel-doubling variant.
  std::map<int, std::int64_t> preserved;  // resolution -> channels
  std::int64_t c = spec.stem_channels;
  for (std::size_t si = 0; si < res.size(); ++si) {
    const int r = res[si];
    for (int b = 0; b < spec.resblocks_per_stage; ++b) {
      if (si > 0 && b == 0) c *= 2;  // downsample block
      emit("part1.s" + std::to_string(r) + ".b" + std::to_string(b), c, r);
    }
    preserved[r] = c;
  }

  // Parts 2-5 alternate expansion (U) and contraction (D) over the ladder.
  for (int part = 2; part <= spec.num_parts; ++part) {
    const bool expansion = (part % 2 == 0);
    std::map<int, std::int64_t> next;
    if (expansion) {
      int r = res.back();
      c = preserved[r];
      next[r] = c;  // the part's input doubles as its lowest-res output
      while (r < spec.input_size) {
        r *= 2;
        c = c / 2 + preserved[r];
        next[r] = c;
        emit("part" + std::to_string(part) + ".u" + std::to_string(r), c, r);
      }
    } else {
      int r = res.front();
      c = preserved[r];
      next[r] = c;
      while (r > spec.min_resolution) {
        r /= 2;
        c = c + preserved[r];
        next[r] = c;
        emit("part" + std::to_string(part) + ".d" + std::to_string(r), c, r);
      }
    }
    preserved = std::move(next);
  }

  const std::int64_t head_c = preserved[spec.min_resolution];
  emit("head.res", head_c, spec.min_resolution);
  emit("head.pool", head_c, 1);
  emit("logits", spec.num_classes, 1);
  return out;
}

// Ordered record of intermediate activations from one forward pass.
template <typename T>
struct ActivationRecord {
  std::vector<std::pair<std::string, TensorPtr<T>>> items;

  void put(const std::string& name, const TensorPtr<T>& t) {
    items.emplace_back(name, t);
  }
  TensorPtr<T> find(const std::string& name) const {
    for (const auto& [k, v] : items)
      if (k == name) return v;
    return nullptr;
  }
  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(items.size());
    for (const auto& [k, v] : items) out.push_back(k);
    return out;
  }
};

template <typename T>
struct SkipPathReport {
  std::vector<std::pair<std::string, std::vector<std::string>>> paths;
  bool pass = true;
  std::vector<std::string> offenders;
};

template <typename T>
class Model {
 public:
  ArchitectureSpec spec;
  Conv2dLayer<T> stem_conv;
  BatchNorm2d<T> stem_bn;
  std::vector<std::vector<ResBlock<T>>> part1;  // one vector per stage
  std::vector<UBlock<T>> part2, part4;          // ordered by ascending target res
  std::vector<DBlock<T>> part3, part5;          // ordered by descending target res
  ResBlock<T> head_block;
  TensorPtr<T> fc_weight, fc_bias;
  bool training_mode = true;

  TensorPtr<T> forward(const TensorPtr<T>& x,
                       ActivationRecord<T>* rec = nullptr) {
    if (x->shape.c != spec.input_channels || x->shape.h != spec.input_size ||
        x->shape.w != spec.input_size)
      throw ShapeError("model input must be (n," +
                       std::to_string(spec.input_channels) + "," +
                       std::to_string(spec.input_size) + "," +
                       std::to_string(spec.input_size) + "), got " +
                       x->shape.str());
    const bool training = training_mode;
    const auto res = spec.resolutions();
    auto put = [&](const std::string& name, const TensorPtr<T>& t) {
      if (rec) rec->put(name, t);
    };
    put("input", x);

    auto cur = relu(stem_bn.forward(stem_conv.forward(x), training));
    put("stem", cur);

    std::map<int, TensorPtr<T>> preserved;
    for (std::size_t si = 0; si < res.size(); ++si) {
      const int r = res[si];
      auto& blocks = part1[si];
      for (std::size_t b = 0; b < blocks.size(); ++b) {
        cur = blocks[b].forward(cur, training);
        put("part1.s" + std::to_string(r) + ".b" + std::to_string(b), cur);
      }
      preserved[r] = cur;
    }

    for (int part = 2; part <= spec.num_parts; ++part) {
      const bool expansion = (part % 2 == 0);
      std::map<int, TensorPtr<T>> next;
      if (expansion) {
        auto& ublocks = (part == 2) ? part2 : part4;
        int r = res.back();
        cur = preserved[r];
        next[r] = cur;
        std::size_t i = 0;
        while (r < spec.input_size) {
          r *= 2;
          cur = ublocks[i++].forward(cur, preserved[r], training);
          next[r] = cur;
          put("part" + std::to_string(part) + ".u" + std::to_string(r), cur);
        }
      } else {
        auto& dblocks = (part == 3) ? part3 : part5;
        int r = res.front();
        cur = preserved[r];
        next[r] = cur;
        std::size_t i = 0;
        while (r > spec.min_resolution) {
          r /= 2;
          cur = dblocks[i++].forward(cur, preserved[r], training);
          next[r] = cur;
          put("part" + std::to_string(part) + ".d" + std::to_string(r), cur);
        }
      }
      preserved = std::move(next);
    }

    cur = head_block.forward(cur, training);
    put("head.res", cur);
    auto pooled = global_avg_pool(cur);
    put("head.pool", pooled);
    auto logits = linear(pooled, fc_weight, fc_bias);
    put("logits", logits);
    return logits;
  }

  // Ordered (name, tensor) view of every learnable parameter.
  std::vector<std::pair<std::string, TensorPtr<T>>> parameters() {
    std::vector<std::pair<std::string, TensorPtr<T>>> out;
    auto add_bn = [&](const std::string& prefix, BatchNorm2d<T>& bn) {
      out.emplace_back(prefix + ".gamma", bn.gamma);
      out.emplace_back(prefix + ".beta", bn.beta);
    };
    auto add_res = [&](const std::string& prefix, ResBlock<T>& b) {
      out.emplace_back(prefix + ".conv1.weight", b.conv1.weight);
      add_bn(prefix + ".bn1", b.bn1);
      out.emplace_back(prefix + ".conv2.weight", b.conv2.weight);
      add_bn(prefix + ".bn2", b.bn2);
      out.emplace_back(prefix + ".conv3.weight", b.conv3.weight);
      add_bn(prefix + ".bn3", b.bn3);
      if (b.skip_conv)
        out.emplace_back(prefix + ".skip_conv.weight", b.skip_conv->weight);
    };
    out.emplace_back("stem.conv.weight", stem_conv.weight);
    add_bn("stem.bn", stem_bn);
    for_each_resblock([&](const std::string& name, ResBlock<T>& b) {
      add_res(name, b);
    });
    out.emplace_back("head.fc.weight", fc_weight);
    out.emplace_back("head.fc.bias", fc_bias);
    return out;
  }

  // Ordered view of the batch-norm running statistics (checkpoint buffers).
  std::vector<std::pair<std::string, std::vector<T>*>> buffers() {
    std::vector<std::pair<std::string, std::vector<T>*>> out;
    auto add_bn = [&](const std::string& prefix, BatchNorm2d<T>& bn) {
      out.emplace_back(prefix + ".running_mean", &bn.running_mean);
      out.emplace_back(prefix + ".running_var", &bn.running_var);
    };
    add_bn("stem.bn", stem_bn);
    for_each_resblock([&](const std::string& name, ResBlock<T>& b) {
      add_bn(name + ".bn1", b.bn1);
      add_bn(name + ".bn2", b.bn2);
      add_bn(name + ".bn3", b.bn3);
    });
    return out;
  }

  std::int64_t parameter_count() {
    std::int64_t total = 0;
    for (auto& [name, t] : parameters()) total += t->numel();
    return total;
  }

  void zero_grad() {
    for (auto& [name, t] : parameters()) t->zero_grad();
  }

  // Visits every ResBlock with a stable name: part-1 blocks, the refine
  // blocks of all U/D blocks, and the head block.
  template <typename Fn>
  void for_each_resblock(Fn&& fn) {
    const auto res = spec.resolutions();
    for (std::size_t si = 0; si < part1.size(); ++si)
      for (std::size_t b = 0; b < part1[si].size(); ++b)
        fn("part1.s" + std::to_string(res[si]) + ".b" + std::to_string(b),
           part1[si][b]);
    auto visit_u = [&](int part, std::vector<UBlock<T>>& blocks) {
      int r = res.back();
      for (auto& u : blocks) {
        r *= 2;
        fn("part" + std::to_string(part) + ".u" + std::to_string(r) +
               ".refine",
           u.refine);
      }
    };
    auto visit_d = [&](int part, std::vector<DBlock<T>>& blocks) {
      int r = res.front();
      for (auto& d : blocks) {
        r /= 2;
        fn("part" + std::to_string(part) + ".d" + std::to_string(r) +
               ".refine",
           d.refine);
      }
    };
    visit_u(2, part2);
    visit_d(3, part3);
    visit_u(4, part4);
    visit_d(5, part5);
    fn("head.res", head_block);
  }
};

template <typename T>
Model<T> build_network(const ArchitectureSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(mix_seed(seed, "model-init"));
  Model<T> model;
  model.spec = spec;
  const auto res = spec.resolutions();

  model.stem_conv =
      Conv2dLayer<T>::create(spec.input_channels, spec.stem_channels, 3, 1,
                             rng);
  model.stem_bn = BatchNorm2d<T>::create(spec.stem_channels);

  std::map<int, std::int64_t> preserved;
  std::int64_t c = spec.stem_channels;
  for (std::size_t si = 0; si < res.size(); ++si) {
    std::vector<ResBlock<T>> blocks;
    for (int b = 0; b < spec.resblocks_per_stage; ++b) {
      const bool down = (si > 0 && b == 0);
      blocks.push_back(ResBlock<T>::create(static_cast<int>(c), down, rng));
      if (down) c *= 2;
    }
    model.part1.push_back(std::move(blocks));
    preserved[res[si]] = c;
  }

  for (int part = 2; part <= spec.num_parts; ++part) {
    const bool expansion = (part % 2 == 0);
    std::map<int, std::int64_t> next;
    if (expansion) {
      auto& ublocks = (part == 2) ? model.part2 : model.part4;
      int r = res.back();
      c = preserved[r];
      next[r] = c;
      while (r < spec.input_size) {
        if (c % 2 != 0)
          throw std::invalid_argument(
              "expansion part reached an odd channel count");
        ublocks.push_back(UBlock<T>::create(static_cast<int>(c), rng));
        r *= 2;
        c = c / 2 + preserved[r];
        next[r] = c;
      }
    } else {
      auto& dblocks = (part == 3) ? model.part3 : model.part5;
      int r = res.front();
      c = preserved[r];
      next[r] = c;
      while (r > spec.min_resolution) {
        dblocks.push_back(DBlock<T>::create(static_cast<int>(c), rng));
        r /= 2;
        c = c + preserved[r];
        next[r] = c;
      }
    }
    preserved = std::move(next);
  }

  const std::int64_t head_c = preserved[spec.min_resolution];
  model.head_block =
      ResBlock<T>::create(static_cast<int>(head_c), false, rng);
  model.fc_weight =
      make_tensor<T>(Shape{spec.num_classes, head_c, 1, 1}, true);
  const double std = std::sqrt(2.0 / static_cast<double>(head_c));
  for (auto& v : model.fc_weight->data)
    v = static_cast<T>(rng.normal(0.0, std));
  model.fc_bias = make_tensor<T>(Shape{1, spec.num_classes, 1, 1}, true);
  return model;
}

// Structural audit of every path that bypasses a residual mapping: the
// identity additions of non-downsampling ResBlocks and the preserved-map
// branches into U/D concatenations. Passes iff none of them contains a
// convolution.
template <typename T>
SkipPathReport<T> direct_bp_audit(Model<T>& model) {
  SkipPathReport<T> report;
  auto check = [&](const std::string& name,
                   const std::vector<std::string>& ops) {
    report.paths.emplace_back(name, ops);
    for (const auto& op : ops)
      if (op.find("conv") != std::string::npos) {
        report.pass = false;
        report.offenders.push_back(name);
      }
  };
  model.for_each_resblock([&](const std::string& name, ResBlock<T>& b) {
    if (!b.downsample) check(name + ".identity", b.skip_path_ops());
  });
  const auto res = model.spec.resolutions();
  auto visit_u = [&](int part, std::vector<UBlock<T>>& blocks) {
    int r = res.back();
    for (auto& u : blocks) {
      r *= 2;
      check("part" + std::to_string(part) + ".u" + std::to_string(r) + ".skip",
            u.skip_path_ops());
    }
  };
  auto visit_d = [&](int part, std::vector<DBlock<T>>& blocks) {
    int r = res.front();
    for (auto& d : blocks) {
      r /= 2;
      check("part" + std::to_string(part) + ".d" + std::to_string(r) + ".skip",
            d.skip_path_ops());
    }
  };
  visit_u(2, model.part2);
  visit_d(3, model.part3);
  visit_u(4, model.part4);
  visit_d(5, model.part5);
  return report;
}

// Places a 1x1 convolution on the identity path of the named ResBlock. Used
// as a negative control for the audit; the convolution participates in the
// real forward pass.
template <typename T>
void inject_skip_conv(Model<T>& model, const std::string& block_name,
                      std::uint64_t seed = 0) {
  bool found = false;
  model.for_each_resblock([&](const std::string& name, ResBlock<T>& b) {
    if (name == block_name) {
      if (b.downsample)
        throw std::invalid_argument(
            "cannot inject a skip conv into a downsampling block");
      Rng rng(mix_seed(seed, "skip-conv"));
      b.skip_conv = Conv2dLayer<T>::create(static_cast<int>(b.in_channels()),
                                           static_cast<int>(b.in_channels()),
                                           1, 1, rng);
      found = true;
    }
  });
  if (!found)
    throw std::invalid_argument("no ResBlock named " + block_name);
}

}  // namespace cec
