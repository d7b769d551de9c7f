#pragma once

#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "fusionreid/data.hpp"
#include "fusionreid/model.hpp"
#include "fusionreid/objective.hpp"

namespace fusionreid {

struct OptimConfig {
  double base_lr = 5e-4;
  double peak_lr = 5e-3;
  double warmup_epochs = 10;
  double total_epochs = 180;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double min_lr = 0.0;
  double grad_clip = 0.0;  // global-norm clip; 0 disables
  double label_smoothing = 0.1;

  void validate() const;
};

// Linear warmup from base_lr to peak_lr, then cosine decay to min_lr.
double lr_schedule(double epoch, const OptimConfig& cfg);

// Biases, norm affines, class token, position embedding, GeM p and the
// classifiers are excluded from weight decay.
bool weight_decay_exempt(const std::string& path);

// SGD with momentum: v = mu v + (g + wd p); p -= lr v. Buffers are keyed by
// parameter path and visited in lexicographic order.
class Sgd {
 public:
  explicit Sgd(ParamStore& store);

  // Throws UsageError if any parameter has no gradient. Returns the global
  // gradient norm before clipping.
  double step(double lr, double momentum, double weight_decay, double grad_clip = 0.0);

  std::map<std::string, Tensor>& momentum_buffers() { return velocity_; }
  const std::map<std::string, Tensor>& momentum_buffers() const { return velocity_; }

 private:
  ParamStore& store_;
  std::map<std::string, Tensor> velocity_;
};

struct TrainConfig {
  std::size_t p = 4;
  std::size_t k = 4;
  // Steps per schedule epoch; 0 uses the sampler's batches per epoch.
  std::size_t steps_per_epoch = 0;
  // Hard stop; 0 runs the whole schedule.
  std::size_t max_steps = 0;
  std::size_t checkpoint_every = 0;
  bool augment = true;
  AugmentPolicy augmentation;

  void validate() const;
};

struct StepMetrics {
  std::size_t step = 0;
  double epoch = 0.0;
  double lr = 0.0;
  double total = 0.0;
  double ce_sum = 0.0;
  double tri_sum = 0.0;
  double grad_norm = 0.0;
  std::vector<HeadLoss> heads;
};

// Per-parameter gradient norms and the batch that produced a non-finite
// loss; written by the CLI as a diagnostics file.
struct Diagnostics {
  std::size_t step = 0;
  double lr = 0.0;
  std::vector<std::size_t> batch;
  std::vector<std::pair<std::string, double>> grad_norms;
  std::vector<HeadLoss> heads;
};

class NonFiniteLoss : public NumericalError {
 public:
  NonFiniteLoss(const std::string& what, Diagnostics diag) : NumericalError(what), diagnostics(std::move(diag)) {}
  Diagnostics diagnostics;
};

// One optimization step on a prepared batch: forward, six-head loss,
// backward, SGD update. Throws NonFiniteLoss before touching parameters
// when the loss is not finite.
StepMetrics train_step(FusionReid& model, Sgd& optimizer, const Tensor& images, const std::vector<std::size_t>& cams,
                       const std::vector<std::size_t>& labels, const std::vector<int>& pids, double lr,
                       const OptimConfig& optim);

// Drives PK sampling, augmentation, the schedule and train_step. Every
// batch is a pure function of (seed, step), so a trainer restored at step s
// continues exactly like an uninterrupted one.
class Trainer {
 public:
  Trainer(FusionReid& model, const Dataset& data, const OptimConfig& optim, const TrainConfig& train,
          std::uint64_t seed);

  StepMetrics step();
  std::size_t current_step() const { return step_; }
  void set_step(std::size_t step) { step_ = step; }
  std::size_t total_steps() const { return total_steps_; }
  std::size_t steps_per_epoch() const { return steps_per_epoch_; }
  bool done() const { return step_ >= total_steps_; }

  Sgd& optimizer() { return sgd_; }
  const PkSampler& sampler() const { return sampler_; }
  // Train-split pid -> classifier label.
  const std::map<int, std::size_t>& label_map() const { return labels_; }
  Tensor batch_images(const Batch& batch) const;

 private:
  FusionReid& model_;
  const Dataset& data_;
  OptimConfig optim_;
  TrainConfig train_;
  std::uint64_t seed_;
  Sgd sgd_;
  PkSampler sampler_;
  std::map<int, std::size_t> labels_;
  std::size_t steps_per_epoch_ = 1;
  std::size_t total_steps_ = 0;
  std::size_t step_ = 0;
};

// Training log: one wide CSV row per step, and a long-format per-head file.
void write_log_header(std::ostream& out, const std::vector<std::string>& heads);
void write_log_row(std::ostream& out, const StepMetrics& m);
void write_head_header(std::ostream& out);
void write_head_rows(std::ostream& out, const StepMetrics& m);

}  // namespace fusionreid
