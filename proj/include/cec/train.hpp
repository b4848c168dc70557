#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "cec/arch.hpp"
#include "cec/data.hpp"
#include "cec/tensor.hpp"

namespace cec {

struct TrainConfig {
  double learning_rate = 0.1;
  double momentum = 0.9;
  double lr_factor = 0.1;
  int plateau_patience = 10;
  int epochs = 100;
  int batch_size = 32;
  std::array<double, 2> class_weights{1.0, 1.0};  // indexed by label value
  int input_size = 32;
  std::uint64_t seed = 0;

  void validate() const {
    if (learning_rate <= 0) throw std::invalid_argument("learning_rate <= 0");
    if (momentum < 0 || momentum >= 1)
      throw std::invalid_argument("momentum must be in [0, 1)");
    if (plateau_patience < 1) throw std::invalid_argument("patience < 1");
    if (epochs < 1 || batch_size < 1)
      throw std::invalid_argument("epochs and batch_size must be positive");
    if (input_size != 32 && input_size != 64)
      throw std::invalid_argument("input_size must be 32 or 64");
  }
};

// Classic heavy-ball momentum: v <- momentum * v + g; w <- w - lr * v.
class SgdMomentum {
 public:
  explicit SgdMomentum(
      const std::vector<std::pair<std::string, TensorPtr<float>>>& params);

  void step(double lr, double momentum);
  void zero_grad();

 private:
  std::vector<TensorPtr<float>> params_;
  std::vector<std::vector<float>> velocity_;
};

// Reduces lr by lr_factor once the best training loss has gone `patience`
// consecutive epochs without a strict improvement; repeatable.
class PlateauScheduler {
 public:
  PlateauScheduler(double initial_lr, double factor, int patience)
      : lr_(initial_lr), factor_(factor), patience_(patience) {}

  // Call once per epoch with the mean training loss; returns the lr to use
  // from the next step on.
  double observe(double epoch_loss) {
    if (epoch_loss < best_) {
      best_ = epoch_loss;
      stagnant_ = 0;
    } else if (++stagnant_ >= patience_) {
      lr_ *= factor_;
      stagnant_ = 0;
    }
    return lr_;
  }

  double lr() const { return lr_; }

 private:
  double lr_, factor_;
  int patience_, stagnant_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
};

struct ConfusionCounts {
  std::int64_t tp = 0, tn = 0, fp = 0, fn = 0;

  std::int64_t total() const { return tp + tn + fp + fn; }
  void add(Label truth, Label pred) {
    if (truth == Label::cancer)
      pred == Label::cancer ? ++tp : ++fn;
    else
      pred == Label::cancer ? ++fp : ++tn;
  }
};

struct Metrics {
  double recall = 0, precision = 0, f1 = 0, accuracy = 0;
  bool degenerate = false;  // some denominator was zero; affected metrics are 0
};

Metrics compute_metrics(const ConfusionCounts& counts);

struct EpochStats {
  int epoch = 0;
  double loss = 0, lr = 0, seconds = 0, train_accuracy = 0;
};

struct TrainResult {
  std::vector<EpochStats> history;
};

// Runs the full per-epoch protocol: fresh sampling/augmentation every epoch,
// mini-batch SGD with the weighted cross-entropy, plateau scheduling.
// on_epoch, when set, is invoked after each epoch (for periodic checkpoints).
TrainResult train(
    Model<float>& model, const std::vector<PatchRecord>& train_records,
    const TrainConfig& cfg,
    const std::function<void(int, Model<float>&)>& on_epoch = {});

struct MetricSummary {
  std::vector<Metrics> per_run;
  std::vector<ConfusionCounts> per_run_counts;
  Metrics mean, stddev;  // population std across runs
};

MetricSummary evaluate_repeated(Model<float>& model,
                                const std::vector<PatchRecord>& test_records,
                                int repeats, int input_size,
                                std::uint64_t seed);

void write_history_csv(const std::string& path,
                       const std::vector<EpochStats>& history);

}  // namespace cec
