#include "fusionreid/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <optional>

namespace fusionreid {

void OptimConfig::validate() const {
  if (!(base_lr > 0.0 && base_lr <= peak_lr)) throw ConfigError("optim: need 0 < base_lr <= peak_lr");
  if (!(warmup_epochs >= 0.0 && warmup_epochs < total_epochs)) {
    throw ConfigError("optim: need 0 <= warmup_epochs < total_epochs");
  }
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("optim: momentum must lie in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("optim: weight_decay must be >= 0");
  if (min_lr < 0.0 || min_lr > peak_lr) throw ConfigError("optim: need 0 <= min_lr <= peak_lr");
  if (grad_clip < 0.0) throw ConfigError("optim: grad_clip must be >= 0");
  if (label_smoothing < 0.0 || label_smoothing > 1.0) throw ConfigError("optim: label_smoothing must lie in [0, 1]");
}

double lr_schedule(double epoch, const OptimConfig& cfg) {
  if (!(epoch >= 0.0 && epoch <= cfg.total_epochs)) {
    throw UsageError("lr_schedule: epoch " + std::to_string(epoch) + " outside [0, " +
                     std::to_string(cfg.total_epochs) + "]");
  }
  if (epoch < cfg.warmup_epochs) {
    return cfg.base_lr + (cfg.peak_lr - cfg.base_lr) * epoch / cfg.warmup_epochs;
  }
  const double progress = (epoch - cfg.warmup_epochs) / (cfg.total_epochs - cfg.warmup_epochs);
  return cfg.min_lr + (cfg.peak_lr - cfg.min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

namespace {
bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}
}  // namespace

bool weight_decay_exempt(const std::string& path) {
  for (const char* suffix : {".bias", ".gamma", ".beta", ".cls_token", ".pos_embed", ".p", ".classifier"}) {
    if (ends_with(path, suffix)) return true;
  }
  return false;
}

Sgd::Sgd(ParamStore& store) : store_(store) {
  for (const auto& [path, t] : store_.params()) velocity_.emplace(path, Tensor::zeros(t.shape()));
}

double Sgd::step(double lr, double momentum, double weight_decay, double grad_clip) {
  double sq = 0.0;
  for (const auto& [path, t] : store_.params()) {
    if (!t.has_grad()) throw UsageError("sgd: parameter '" + path + "' has no gradient");
    for (double g : t.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  const double clip_scale = grad_clip > 0.0 && norm > grad_clip ? grad_clip / norm : 1.0;
  for (const auto& [path, t] : store_.params()) {
    Tensor p = t;
    Tensor& v = velocity_.at(path);
    const double wd = weight_decay_exempt(path) ? 0.0 : weight_decay;
    auto pd = p.data();
    auto vd = v.data();
    const auto gd = t.grad();
    for (std::size_t i = 0; i < pd.size(); ++i) {
      vd[i] = momentum * vd[i] + (gd[i] * clip_scale + wd * pd[i]);
      pd[i] -= lr * vd[i];
    }
  }
  return norm;
}

void TrainConfig::validate() const {
  if (p < 2) throw ConfigError("train: P must be >= 2 for triplet mining");
  if (k < 2) throw ConfigError("train: K must be >= 2 for triplet mining");
  if (augment) augmentation.validate();
}

StepMetrics train_step(FusionReid& model, Sgd& optimizer, const Tensor& images, const std::vector<std::size_t>& cams,
                       const std::vector<std::size_t>& labels, const std::vector<int>& pids, double lr,
                       const OptimConfig& optim) {
  ParamStore& store = model.store();
  std::vector<std::pair<std::string, double>> previous_norms;
  for (const auto& [path, t] : store.params()) {
    double s = 0.0;
    for (double g : t.grad()) s += g * g;
    previous_norms.emplace_back(path, std::sqrt(s));
  }
  store.zero_grad();
  auto diagnostics = [&](std::vector<HeadLoss> heads) {
    Diagnostics d;
    d.lr = lr;
    d.grad_norms = std::move(previous_norms);
    d.heads = std::move(heads);
    return d;
  };
  std::optional<LossBreakdown> lb;
  try {
    const ModelOutput out = model.forward(images, cams, true);
    const auto heads = model.heads(out, true);
    lb = total_loss(heads, labels, pids, optim.label_smoothing, heads.size());
  } catch (const NonFiniteLoss&) {
    throw;
  } catch (const NumericalError& e) {
    // e.g. a learned pooling exponent driven out of range
    throw NonFiniteLoss(std::string("forward pass failed: ") + e.what(), diagnostics({}));
  }
  const double total = lb->total.item();
  if (!std::isfinite(total)) {
    throw NonFiniteLoss("non-finite loss " + std::to_string(total) + " at lr " + std::to_string(lr),
                        diagnostics(lb->heads));
  }
  backward(lb->total);
  StepMetrics m;
  m.lr = lr;
  m.total = total;
  m.ce_sum = lb->ce_sum();
  m.tri_sum = lb->tri_sum();
  m.heads = lb->heads;
  m.grad_norm = optimizer.step(lr, optim.momentum, optim.weight_decay, optim.grad_clip);
  return m;
}

Trainer::Trainer(FusionReid& model, const Dataset& data, const OptimConfig& optim, const TrainConfig& train,
                 std::uint64_t seed)
    : model_(model),
      data_(data),
      optim_(optim),
      train_(train),
      seed_(seed),
      sgd_(model.store()),
      sampler_(data, data.indices(Split::train), train.p, train.k, derive_seed(seed, {0x5a})) {
  optim_.validate();
  train_.validate();
  const auto pids = data_.pids(data_.indices(Split::train));
  for (std::size_t i = 0; i < pids.size(); ++i) labels_[pids[i]] = i;
  if (pids.size() > model_.config().num_classes) {
    throw ConfigError("model.num_classes = " + std::to_string(model_.config().num_classes) + " but the train split has " +
                      std::to_string(pids.size()) + " pids");
  }
  steps_per_epoch_ = train_.steps_per_epoch > 0 ? train_.steps_per_epoch : sampler_.batches_per_epoch();
  total_steps_ = static_cast<std::size_t>(std::floor(optim_.total_epochs * static_cast<double>(steps_per_epoch_)));
  if (train_.max_steps > 0) total_steps_ = std::min(total_steps_, train_.max_steps);
}

Tensor Trainer::batch_images(const Batch& batch) const {
  if (!train_.augment) return stack_images(data_, batch.indices);
  const std::size_t n = 3 * data_.height * data_.width;
  std::vector<double> out(batch.indices.size() * n);
  for (std::size_t b = 0; b < batch.indices.size(); ++b) {
    Rng rng(derive_seed(seed_, {0xa6, batch.step, b}));
    const Tensor img = augment(data_.samples[batch.indices[b]].image, rng, train_.augmentation);
    std::copy(img.data().begin(), img.data().end(), out.begin() + static_cast<std::ptrdiff_t>(b * n));
  }
  return Tensor({batch.indices.size(), 3, data_.height, data_.width}, std::move(out));
}

StepMetrics Trainer::step() {
  if (done()) throw UsageError("trainer: schedule already finished at step " + std::to_string(step_));
  const Batch batch = sampler_.batch(step_);
  std::vector<std::size_t> cams, labels;
  for (std::size_t idx : batch.indices) {
    const Sample& s = data_.samples[idx];
    cams.push_back(static_cast<std::size_t>(s.cam_id));
    labels.push_back(labels_.at(s.pid));
  }
  const double epoch = static_cast<double>(step_) / static_cast<double>(steps_per_epoch_);
  const double lr = lr_schedule(epoch, optim_);
  StepMetrics m;
  try {
    m = train_step(model_, sgd_, batch_images(batch), cams, labels, batch.pids, lr, optim_);
  } catch (NonFiniteLoss& e) {
    e.diagnostics.step = step_;
    e.diagnostics.batch = batch.indices;
    throw;
  }
  m.step = step_;
  m.epoch = epoch;
  ++step_;
  return m;
}

namespace {
std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
}  // namespace

void write_log_header(std::ostream& out, const std::vector<std::string>& heads) {
  out << "step,epoch,lr,total,ce_sum,tri_sum";
  for (const auto& h : heads) out << ',' << h << "_ce," << h << "_tri";
  out << '\n';
}

void write_log_row(std::ostream& out, const StepMetrics& m) {
  out << m.step << ',' << num(m.epoch) << ',' << num(m.lr) << ',' << num(m.total) << ',' << num(m.ce_sum) << ','
      << num(m.tri_sum);
  for (const auto& h : m.heads) out << ',' << num(h.ce) << ',' << num(h.tri);
  out << '\n';
}

void write_head_header(std::ostream& out) { out << "step,head,ce,tri\n"; }

void write_head_rows(std::ostream& out, const StepMetrics& m) {
  for (const auto& h : m.heads) out << m.step << ',' << h.name << ',' << num(h.ce) << ',' << num(h.tri) << '\n';
}

}  // namespace fusionreid
