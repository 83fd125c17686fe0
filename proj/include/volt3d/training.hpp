#pragma once

// Optimizers, learning-rate schedules, metrics and the two task loops
// (voxel classification, latent-to-voxel reconstruction).
//
// Everything here is deterministic given the config seed: batch order comes
// from a per-epoch counter-based shuffle and the kernels themselves are
// worker-count independent, so a (model seed, config) pair replays to an
// identical history.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <memory>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "volt3d/netgraph.hpp"
#include "volt3d/rng.hpp"
#include "volt3d/voxio.hpp"

namespace volt3d {

// ---------------------------------------------------------------------------
// Learning-rate schedule
// ---------------------------------------------------------------------------

// Piecewise-constant schedule: `epochs` epochs at `lr`, then the next span.
// Epochs beyond the last span keep its rate.
struct LrSpan {
    std::size_t epochs = 0;
    double lr = 0.0;
};

inline std::size_t total_epochs(const std::vector<LrSpan>& schedule) {
    std::size_t total = 0;
    for (const auto& span : schedule) total += span.epochs;
    return total;
}

inline double lr_for_epoch(const std::vector<LrSpan>& schedule, std::size_t epoch) {
    if (schedule.empty()) throw std::invalid_argument("empty learning-rate schedule");
    std::size_t consumed = 0;
    for (const auto& span : schedule) {
        consumed += span.epochs;
        if (epoch < consumed) return span.lr;
    }
    return schedule.back().lr;
}

enum class OptimizerKind { adam, sgd };

struct TrainConfig {
    std::vector<LrSpan> schedule;
    std::size_t batch_size = 8;
    OptimizerKind optimizer = OptimizerKind::adam;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double sgd_momentum = 0.0;
    Seed seed{0};
    // Stop once the epoch metric reaches this value; 0 disables the check.
    double early_stop_metric = 0.0;

    void validate() const {
        if (schedule.empty()) throw std::invalid_argument("schedule must have at least one span");
        for (const auto& span : schedule) {
            if (span.epochs == 0) throw std::invalid_argument("schedule span with zero epochs");
            // lr == 0 is allowed: it must leave parameters bitwise unchanged.
            if (span.lr < 0 || !std::isfinite(span.lr)) {
                throw std::invalid_argument("learning rate must be finite and non-negative");
            }
        }
        if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
    }
};

// The published schedules: 20 epochs at 1e-5 then 1e-6 for classification,
// 120 epochs at 1e-6 then 1e-7 for reconstruction.
inline TrainConfig classifier_reference_config() {
    TrainConfig cfg;
    cfg.schedule = {{10, 1e-5}, {10, 1e-6}};
    cfg.batch_size = 8;
    return cfg;
}

inline TrainConfig reconstruction_reference_config() {
    TrainConfig cfg;
    cfg.schedule = {{60, 1e-6}, {60, 1e-7}};
    cfg.batch_size = 32;
    return cfg;
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

template <typename T>
class Optimizer {
public:
    explicit Optimizer(std::vector<ParamRef<T>> params) : params_(std::move(params)) {}
    virtual ~Optimizer() = default;

    virtual void step(double lr) = 0;

    void zero_grad() {
        for (auto& p : params_) p.grad->fill(T(0));
    }

protected:
    std::vector<ParamRef<T>> params_;
};

template <typename T>
class SgdOptimizer final : public Optimizer<T> {
public:
    SgdOptimizer(std::vector<ParamRef<T>> params, double momentum = 0.0)
        : Optimizer<T>(std::move(params)), momentum_(momentum) {
        if (momentum_ != 0.0) {
            for (const auto& p : this->params_) velocity_.emplace_back(p.value->shape());
        }
    }

    void step(double lr) override {
        for (std::size_t i = 0; i < this->params_.size(); ++i) {
            auto& p = this->params_[i];
            for (std::size_t j = 0; j < p.value->size(); ++j) {
                double g = p.grad->at_flat(j);
                if (momentum_ != 0.0) {
                    double v = momentum_ * velocity_[i].at_flat(j) + g;
                    velocity_[i].at_flat(j) = static_cast<T>(v);
                    g = v;
                }
                p.value->at_flat(j) -= static_cast<T>(lr * g);
            }
        }
    }

private:
    double momentum_;
    std::vector<Tensor<T>> velocity_;
};

template <typename T>
class AdamOptimizer final : public Optimizer<T> {
public:
    AdamOptimizer(std::vector<ParamRef<T>> params, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8)
        : Optimizer<T>(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (const auto& p : this->params_) {
            m_.emplace_back(p.value->shape());
            v_.emplace_back(p.value->shape());
        }
    }

    void step(double lr) override {
        ++t_;
        const double corr1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double corr2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < this->params_.size(); ++i) {
            auto& p = this->params_[i];
            for (std::size_t j = 0; j < p.value->size(); ++j) {
                const double g = p.grad->at_flat(j);
                const double m = beta1_ * m_[i].at_flat(j) + (1.0 - beta1_) * g;
                const double v = beta2_ * v_[i].at_flat(j) + (1.0 - beta2_) * g * g;
                m_[i].at_flat(j) = static_cast<T>(m);
                v_[i].at_flat(j) = static_cast<T>(v);
                const double update = lr * (m / corr1) / (std::sqrt(v / corr2) + eps_);
                p.value->at_flat(j) -= static_cast<T>(update);
            }
        }
    }

private:
    double beta1_, beta2_, eps_;
    std::uint64_t t_ = 0;
    std::vector<Tensor<T>> m_, v_;
};

template <typename T>
std::unique_ptr<Optimizer<T>> make_optimizer(const TrainConfig& cfg,
                                             std::vector<ParamRef<T>> params) {
    if (cfg.optimizer == OptimizerKind::adam) {
        return std::make_unique<AdamOptimizer<T>>(std::move(params), cfg.adam_beta1,
                                                  cfg.adam_beta2, cfg.adam_eps);
    }
    return std::make_unique<SgdOptimizer<T>>(std::move(params), cfg.sgd_momentum);
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

// Fraction of rows whose argmax equals the label. Ties go to the lowest
// index, so a constant row predicts class 0.
template <typename T>
double accuracy(const Tensor<T>& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2 || logits.extent(0) != labels.size()) {
        throw std::invalid_argument("accuracy: logits must be (N,classes) matching labels");
    }
    const std::size_t n = logits.extent(0), k = logits.extent(1);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < k; ++c) {
            if (logits(i, c) > logits(i, best)) best = c;
        }
        if (static_cast<int>(best) == labels[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(n);
}

namespace detail {

template <typename T>
double iou_range(const Tensor<T>& pred, const Tensor<T>& truth, double t, std::size_t begin,
                 std::size_t end) {
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = begin; i < end; ++i) {
        const bool p = static_cast<double>(pred.at_flat(i)) > t;
        const bool y = static_cast<double>(truth.at_flat(i)) > 0.5;
        inter += (p && y) ? 1 : 0;
        uni += (p || y) ? 1 : 0;
    }
    // Both sets empty: the prediction is exactly right, score it 1.
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace detail

// Intersection-over-union of the thresholded prediction against a binary
// truth grid. Rank 4+ tensors are treated as a batch over axis 0 and the
// per-sample scores are averaged (that mean is the reported mIoU).
template <typename T>
double miou(const Tensor<T>& pred, const Tensor<T>& truth, double t) {
    if (!pred.same_shape(truth)) {
        throw std::invalid_argument("miou: prediction " + shape_str(pred.shape()) +
                                    " vs truth " + shape_str(truth.shape()));
    }
    if (!(t > 0.0 && t < 1.0)) throw std::invalid_argument("miou: threshold must be in (0,1)");
    if (pred.rank() < 4) return detail::iou_range(pred, truth, t, 0, pred.size());
    const std::size_t n = pred.extent(0);
    const std::size_t per = pred.size() / n;
    double acc = 0;
    for (std::size_t i = 0; i < n; ++i) {
        acc += detail::iou_range(pred, truth, t, i * per, (i + 1) * per);
    }
    return acc / static_cast<double>(n);
}

inline const std::vector<double>& default_thresholds() {
    static const std::vector<double> t = {0.1, 0.3, 0.5, 0.7, 0.9};
    return t;
}

struct SweepEntry {
    double threshold = 0;
    double value = 0;
};

struct SweepResult {
    std::vector<SweepEntry> entries;
    std::size_t best_index = 0;

    double best_threshold() const { return entries.at(best_index).threshold; }
    double best_value() const { return entries.at(best_index).value; }
};

template <typename T>
SweepResult threshold_sweep(const Tensor<T>& pred, const Tensor<T>& truth,
                            const std::vector<double>& thresholds = default_thresholds()) {
    if (thresholds.empty()) throw std::invalid_argument("threshold_sweep: no thresholds");
    SweepResult result;
    for (double t : thresholds) {
        result.entries.push_back({t, miou(pred, truth, t)});
        if (result.entries.back().value > result.entries[result.best_index].value) {
            result.best_index = result.entries.size() - 1;
        }
    }
    return result;
}

struct EvalResult {
    double accuracy = 0.0;
    double miou = 0.0;
    std::vector<SweepEntry> per_threshold;
};

// ---------------------------------------------------------------------------
// History
// ---------------------------------------------------------------------------

struct EpochStats {
    std::size_t epoch = 0;
    double lr = 0;
    double loss = 0;
    double metric = 0;  // accuracy for classification, mIoU for reconstruction
};

inline std::string history_csv(const std::vector<EpochStats>& history) {
    std::ostringstream out;
    out << "epoch,lr,loss,metric\n";
    out << std::setprecision(10);
    for (const auto& row : history) {
        out << row.epoch << ',' << row.lr << ',' << row.loss << ',' << row.metric << '\n';
    }
    return out.str();
}

// ---------------------------------------------------------------------------
// Task loops
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::size_t> shuffled_indices(std::size_t count, Seed seed) {
    std::vector<std::size_t> idx(count);
    for (std::size_t i = 0; i < count; ++i) idx[i] = i;
    Rng rng(seed);
    for (std::size_t i = count; i > 1; --i) {
        const std::size_t j = rng.next_u64() % i;
        std::swap(idx[i - 1], idx[j]);
    }
    return idx;
}

template <typename T>
T stable_sigmoid(T z) {
    if (z >= 0) {
        const T e = std::exp(-z);
        return T(1) / (T(1) + e);
    }
    const T e = std::exp(z);
    return e / (T(1) + e);
}

inline void guard_finite(double loss, std::size_t epoch) {
    if (!std::isfinite(loss)) {
        throw std::runtime_error("training diverged: non-finite loss at epoch " +
                                 std::to_string(epoch));
    }
}

// The loss functions reject non-finite logits as a bad argument; inside the
// training loop that situation means the optimization blew up, which is a
// runtime condition and gets the divergence error instead.
template <typename T>
void guard_divergence(const Tensor<T>& logits, std::size_t epoch) {
    for (std::size_t i = 0; i < logits.size(); ++i) {
        if (!std::isfinite(static_cast<double>(logits.at_flat(i)))) {
            throw std::runtime_error("training diverged: non-finite model output at epoch " +
                                     std::to_string(epoch));
        }
    }
}

}  // namespace detail

// Minimizes softmax cross-entropy over the dataset. The reported metric is
// training accuracy accumulated from the batch forward passes.
template <typename T>
std::vector<EpochStats> train_classifier(Model<T>& model,
                                         const std::vector<ClassificationSample>& data,
                                         const TrainConfig& cfg, std::ostream* log = nullptr) {
    cfg.validate();
    if (data.empty()) throw std::invalid_argument("train_classifier: empty dataset");
    const std::size_t res = data.front().grid.extent(0);
    auto optimizer = make_optimizer(cfg, model.params());
    const std::size_t epochs = total_epochs(cfg.schedule);

    std::vector<EpochStats> history;
    if (log) *log << "epoch,lr,loss,metric\n";
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        const double lr = lr_for_epoch(cfg.schedule, epoch);
        const auto order = detail::shuffled_indices(data.size(), subseed(cfg.seed, epoch + 1));
        double loss_sum = 0;
        double hit_sum = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t b = std::min(cfg.batch_size, order.size() - start);
            Tensor<T> x({b, 1, res, res, res});
            std::vector<int> labels(b);
            for (std::size_t i = 0; i < b; ++i) {
                const auto& sample = data[order[start + i]];
                labels[i] = sample.label;
                for (std::size_t v = 0; v < sample.grid.size(); ++v) {
                    x.at_flat(i * sample.grid.size() + v) = static_cast<T>(sample.grid.at_flat(v));
                }
            }
            auto logits = model.forward(x, true);
            detail::guard_divergence(logits, epoch);
            auto loss = softmax_cross_entropy(logits, labels);
            detail::guard_finite(loss.loss, epoch);
            loss_sum += loss.loss * static_cast<double>(b);
            hit_sum += accuracy(logits, labels) * static_cast<double>(b);
            optimizer->zero_grad();
            model.backward(loss.grad);
            optimizer->step(lr);
        }
        EpochStats row{epoch, lr, loss_sum / static_cast<double>(data.size()),
                       hit_sum / static_cast<double>(data.size())};
        history.push_back(row);
        if (log) {
            *log << row.epoch << ',' << row.lr << ',' << row.loss << ',' << row.metric << '\n';
        }
        if (cfg.early_stop_metric > 0 && row.metric >= cfg.early_stop_metric) break;
    }
    return history;
}

// Minimizes per-voxel binary cross-entropy from latent codes to occupancy
// grids. The metric is mIoU of the batch predictions at `metric_threshold`.
template <typename T>
std::vector<EpochStats> train_reconstructor(Model<T>& model,
                                            const std::vector<ReconstructionSample>& data,
                                            const TrainConfig& cfg, std::ostream* log = nullptr,
                                            double metric_threshold = 0.3) {
    cfg.validate();
    if (data.empty()) throw std::invalid_argument("train_reconstructor: empty dataset");
    const std::size_t res = data.front().grid.extent(0);
    const std::size_t latent = data.front().latent.size();
    auto optimizer = make_optimizer(cfg, model.params());
    const std::size_t epochs = total_epochs(cfg.schedule);

    std::vector<EpochStats> history;
    if (log) *log << "epoch,lr,loss,metric\n";
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        const double lr = lr_for_epoch(cfg.schedule, epoch);
        const auto order = detail::shuffled_indices(data.size(), subseed(cfg.seed, epoch + 1));
        double loss_sum = 0;
        double iou_sum = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t b = std::min(cfg.batch_size, order.size() - start);
            Tensor<T> z({b, latent});
            Tensor<T> target({b, 1, res, res, res});
            for (std::size_t i = 0; i < b; ++i) {
                const auto& sample = data[order[start + i]];
                for (std::size_t v = 0; v < latent; ++v) {
                    z.at_flat(i * latent + v) = static_cast<T>(sample.latent.at_flat(v));
                }
                for (std::size_t v = 0; v < sample.grid.size(); ++v) {
                    target.at_flat(i * sample.grid.size() + v) =
                        static_cast<T>(sample.grid.at_flat(v));
                }
            }
            auto logits = model.forward(z, true);
            detail::guard_divergence(logits, epoch);
            auto loss = voxel_bce(logits, target);
            detail::guard_finite(loss.loss, epoch);
            Tensor<T> probs(logits.shape());
            for (std::size_t i = 0; i < logits.size(); ++i) {
                probs.at_flat(i) = detail::stable_sigmoid(logits.at_flat(i));
            }
            loss_sum += loss.loss * static_cast<double>(b);
            iou_sum += miou(probs, target, metric_threshold) * static_cast<double>(b);
            optimizer->zero_grad();
            model.backward(loss.grad);
            optimizer->step(lr);
        }
        EpochStats row{epoch, lr, loss_sum / static_cast<double>(data.size()),
                       iou_sum / static_cast<double>(data.size())};
        history.push_back(row);
        if (log) {
            *log << row.epoch << ',' << row.lr << ',' << row.loss << ',' << row.metric << '\n';
        }
        if (cfg.early_stop_metric > 0 && row.metric >= cfg.early_stop_metric) break;
    }
    return history;
}

// ---------------------------------------------------------------------------
// Evaluation (inference mode)
// ---------------------------------------------------------------------------

template <typename T>
double evaluate_classifier(Model<T>& model, const std::vector<ClassificationSample>& data,
                           std::size_t batch_size = 8) {
    if (data.empty()) throw std::invalid_argument("evaluate_classifier: empty dataset");
    const std::size_t res = data.front().grid.extent(0);
    double hits = 0;
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        const std::size_t b = std::min(batch_size, data.size() - start);
        Tensor<T> x({b, 1, res, res, res});
        std::vector<int> labels(b);
        for (std::size_t i = 0; i < b; ++i) {
            labels[i] = data[start + i].label;
            const auto& grid = data[start + i].grid;
            for (std::size_t v = 0; v < grid.size(); ++v) {
                x.at_flat(i * grid.size() + v) = static_cast<T>(grid.at_flat(v));
            }
        }
        auto logits = model.forward(x, false);
        hits += accuracy(logits, labels) * static_cast<double>(b);
    }
    return hits / static_cast<double>(data.size());
}

template <typename T>
SweepResult evaluate_reconstructor(Model<T>& model, const std::vector<ReconstructionSample>& data,
                                   const std::vector<double>& thresholds = default_thresholds(),
                                   std::size_t batch_size = 8) {
    if (data.empty()) throw std::invalid_argument("evaluate_reconstructor: empty dataset");
    if (thresholds.empty()) throw std::invalid_argument("evaluate_reconstructor: no thresholds");
    const std::size_t res = data.front().grid.extent(0);
    const std::size_t latent = data.front().latent.size();
    std::vector<double> sums(thresholds.size(), 0.0);
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        const std::size_t b = std::min(batch_size, data.size() - start);
        Tensor<T> z({b, latent});
        Tensor<T> target({b, 1, res, res, res});
        for (std::size_t i = 0; i < b; ++i) {
            const auto& sample = data[start + i];
            for (std::size_t v = 0; v < latent; ++v) {
                z.at_flat(i * latent + v) = static_cast<T>(sample.latent.at_flat(v));
            }
            for (std::size_t v = 0; v < sample.grid.size(); ++v) {
                target.at_flat(i * sample.grid.size() + v) =
                    static_cast<T>(sample.grid.at_flat(v));
            }
        }
        auto logits = model.forward(z, false);
        Tensor<T> probs(logits.shape());
        for (std::size_t i = 0; i < logits.size(); ++i) {
            probs.at_flat(i) = detail::stable_sigmoid(logits.at_flat(i));
        }
        for (std::size_t t = 0; t < thresholds.size(); ++t) {
            sums[t] += miou(probs, target, thresholds[t]) * static_cast<double>(b);
        }
    }
    SweepResult result;
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
        result.entries.push_back({thresholds[t], sums[t] / static_cast<double>(data.size())});
        if (result.entries.back().value > result.entries[result.best_index].value) {
            result.best_index = t;
        }
    }
    return result;
}

}  // namespace volt3d
