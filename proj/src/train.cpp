#include "cec/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

namespace cec {

SgdMomentum::SgdMomentum(
    const std::vector<std::pair<std::string, TensorPtr<float>>>& params) {
  for (const auto& [name, t] : params) {
    params_.push_back(t);
    velocity_.emplace_back(t->data.size(), 0.0f);
  }
}

void SgdMomentum::step(double lr, double momentum) {
  const float m = static_cast<float>(momentum);
  const float a = static_cast<float>(lr);
  for (std::size_t p = 0; p < params_.size(); ++p) {
    auto& t = *params_[p];
    if (t.grad.size() != t.data.size())
      throw ShapeError("missing gradient for parameter in optimizer step");
    auto& v = velocity_[p];
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = m * v[i] + t.grad[i];
      t.data[i] -= a * v[i];
    }
  }
}

void SgdMomentum::zero_grad() {
  for (auto& t : params_) t->zero_grad();
}

Metrics compute_metrics(const ConfusionCounts& c) {
  if (c.total() == 0)
    throw std::invalid_argument("compute_metrics: all counts are zero");
  if (c.tp < 0 || c.tn < 0 || c.fp < 0 || c.fn < 0)
    throw std::invalid_argument("compute_metrics: negative count");
  Metrics m;
  auto ratio = [&m](std::int64_t num, std::int64_t den) {
    if (den == 0) {
      m.degenerate = true;
      return 0.0;
    }
    return static_cast<double>(num) / static_cast<double>(den);
  };
  m.recall = ratio(c.tp, c.tp + c.fn);
  m.precision = ratio(c.tp, c.tp + c.fp);
  if (m.precision + m.recall > 0)
    m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
  else
    m.f1 = (m.degenerate = true, 0.0);
  m.accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
  return m;
}

namespace {

// One training batch as a tensor plus labels.
struct Batch {
  TensorPtr<float> x;
  std::vector<int> labels;
};

Batch assemble_batch(const std::vector<const PatchRecord*>& records,
                     int input_size, Rng& rng, bool with_augment) {
  const std::int64_t b = static_cast<std::int64_t>(records.size());
  auto x = make_tensor<float>(Shape{b, 1, input_size, input_size});
  std::vector<int> labels(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    Image patch = sample_patch(*records[i], rng);
    if (with_augment) augment_inplace(patch, rng);
    const Image resized = resize_to_input(patch, input_size);
    std::copy(resized.pix.begin(), resized.pix.end(),
              x->data.begin() +
                  static_cast<std::int64_t>(i) * input_size * input_size);
    labels[i] = static_cast<int>(records[i]->label);
  }
  return {x, std::move(labels)};
}

}  // namespace

TrainResult train(Model<float>& model,
                  const std::vector<PatchRecord>& train_records,
                  const TrainConfig& cfg,
                  const std::function<void(int, Model<float>&)>& on_epoch) {
  cfg.validate();
  if (train_records.empty())
    throw std::invalid_argument("training set is empty");
  if (cfg.input_size != model.spec.input_size)
    throw std::invalid_argument("config input_size does not match model");

  auto params = model.parameters();
  SgdMomentum opt(params);
  PlateauScheduler sched(cfg.learning_rate, cfg.lr_factor,
                         cfg.plateau_patience);
  const std::vector<float> weights{
      static_cast<float>(cfg.class_weights[0]),
      static_cast<float>(cfg.class_weights[1])};

  model.training_mode = true;
  TrainResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = sched.lr();
    Rng rng(mix_seed(cfg.seed, "epoch", static_cast<std::uint64_t>(epoch)));

    std::vector<const PatchRecord*> order;
    order.reserve(train_records.size());
    for (const auto& r : train_records) order.push_back(&r);
    rng.shuffle(order);

    double loss_acc = 0.0;
    std::int64_t seen = 0, correct = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const PatchRecord*> chunk(order.begin() + start,
                                            order.begin() + stop);
      Batch batch = assemble_batch(chunk, cfg.input_size, rng, true);

      opt.zero_grad();
      auto logits = model.forward(batch.x);
      auto loss = weighted_cross_entropy(logits, batch.labels, weights);
      if (!std::isfinite(static_cast<double>(loss->data[0])))
        throw NumericError("non-finite training loss at epoch " +
                           std::to_string(epoch));
      backward(loss);
      opt.step(lr, cfg.momentum);

      const std::int64_t bs = static_cast<std::int64_t>(chunk.size());
      loss_acc += static_cast<double>(loss->data[0]) * static_cast<double>(bs);
      for (std::int64_t i = 0; i < bs; ++i) {
        const float* row = logits->data.data() + i * model.spec.num_classes;
        int argmax = 0;
        for (int k = 1; k < model.spec.num_classes; ++k)
          if (row[k] > row[argmax]) argmax = k;
        if (argmax == batch.labels[static_cast<std::size_t>(i)]) ++correct;
      }
      seen += bs;
    }

    const double mean_loss = loss_acc / static_cast<double>(seen);
    sched.observe(mean_loss);
    const auto t1 = std::chrono::steady_clock::now();

    EpochStats stats;
    stats.epoch = epoch;
    stats.loss = mean_loss;
    stats.lr = lr;
    stats.seconds = std::chrono::duration<double>(t1 - t0).count();
    stats.train_accuracy =
        static_cast<double>(correct) / static_cast<double>(seen);
    result.history.push_back(stats);
    if (on_epoch) on_epoch(epoch, model);
  }
  return result;
}

MetricSummary evaluate_repeated(Model<float>& model,
                                const std::vector<PatchRecord>& test_records,
                                int repeats, int input_size,
                                std::uint64_t seed) {
  if (test_records.empty())
    throw std::invalid_argument("test set is empty");
  if (repeats < 1) throw std::invalid_argument("repeats must be >= 1");

  const bool was_training = model.training_mode;
  model.training_mode = false;
  MetricSummary summary;
  constexpr std::size_t kEvalBatch = 64;

  for (int run = 0; run < repeats; ++run) {
    Rng rng(mix_seed(seed, "eval-run", static_cast<std::uint64_t>(run)));
    ConfusionCounts counts;
    for (std::size_t start = 0; start < test_records.size();
         start += kEvalBatch) {
      const std::size_t stop =
          std::min(test_records.size(), start + kEvalBatch);
      std::vector<const PatchRecord*> chunk;
      for (std::size_t i = start; i < stop; ++i)
        chunk.push_back(&test_records[i]);
      Batch batch = assemble_batch(chunk, input_size, rng, false);
      auto logits = model.forward(batch.x);
      for (std::size_t i = 0; i < chunk.size(); ++i) {
        const float* row =
            logits->data.data() +
            static_cast<std::int64_t>(i) * model.spec.num_classes;
        // prediction is pure argmax; class weights play no role here
        const Label pred = row[1] > row[0] ? Label::cancer : Label::non_cancer;
        counts.add(chunk[i]->label, pred);
      }
    }
    summary.per_run_counts.push_back(counts);
    summary.per_run.push_back(compute_metrics(counts));
  }
  model.training_mode = was_training;

  auto stat = [&](double Metrics::* field, double& mean_out,
                  double& std_out) {
    double mean = 0;
    for (const auto& m : summary.per_run) mean += m.*field;
    mean /= static_cast<double>(summary.per_run.size());
    double var = 0;
    for (const auto& m : summary.per_run)
      var += (m.*field - mean) * (m.*field - mean);
    var /= static_cast<double>(summary.per_run.size());
    mean_out = mean;
    std_out = std::sqrt(var);
  };
  stat(&Metrics::recall, summary.mean.recall, summary.stddev.recall);
  stat(&Metrics::precision, summary.mean.precision, summary.stddev.precision);
  stat(&Metrics::f1, summary.mean.f1, summary.stddev.f1);
  stat(&Metrics::accuracy, summary.mean.accuracy, summary.stddev.accuracy);
  return summary;
}

void write_history_csv(const std::string& path,
                       const std::vector<EpochStats>& history) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "epoch,loss,lr,seconds\n";
  for (const auto& h : history) {
    char line[128];
    std::snprintf(line, sizeof(line), "%d,%.9g,%.9g,%.3f\n", h.epoch, h.loss,
                  h.lr, h.seconds);
    f << line;
  }
}

}  // namespace cec
