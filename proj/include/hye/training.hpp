#pragma once

#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "hye/checkpoint.hpp"
#include "hye/denoiser.hpp"
#include "hye/scheduler.hpp"

namespace hye {

enum class LrSchedule { cosine, constant };

inline LrSchedule parse_lr_schedule(const std::string& s) {
    if (s == "cosine") return LrSchedule::cosine;
    if (s == "constant") return LrSchedule::constant;
    throw ConfigError("unknown lr schedule '" + s + "'");
}
inline std::string to_string(LrSchedule s) { return s == LrSchedule::cosine ? "cosine" : "constant"; }

struct TrainConfig {
    double learning_rate = 1e-3;
    double lr_min = 0.0;
    LrSchedule lr_schedule = LrSchedule::cosine;
    int batch_size = 8;
    int steps = 500;
    double gamma_offset = 0.2;
    bool offset_noise = true;
    double gamma_snr = 5.0;
    bool min_snr = true;
    double weight_decay = 0.0;
    std::optional<double> grad_clip;
    std::uint64_t seed = 42;
    TrainMode mode = TrainMode::full;
    // false trains the backbone alone, ignoring any condition tensors.
    bool conditional = true;

    void validate() const {
        if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
        if (lr_min < 0.0 || lr_min > learning_rate) throw ConfigError("lr_min must lie in [0, learning_rate]");
        if (steps < 1) throw ConfigError("steps must be >= 1");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (gamma_offset < 0.0) throw ConfigError("gamma_offset must be >= 0");
        if (!(gamma_snr > 0.0)) throw ConfigError("gamma_snr must be > 0");
        if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
        if (grad_clip && !(*grad_clip > 0.0)) throw ConfigError("grad_clip must be > 0 when set");
    }

    std::string describe() const {
        std::ostringstream os;
        os << "learning_rate=" << learning_rate << " lr_min=" << lr_min << " lr_schedule=" << to_string(lr_schedule)
           << " batch_size=" << batch_size << " steps=" << steps << " gamma_offset=" << gamma_offset
           << " offset_noise=" << offset_noise << " gamma_snr=" << gamma_snr << " min_snr=" << min_snr
           << " weight_decay=" << weight_decay << " grad_clip=" << (grad_clip ? std::to_string(*grad_clip) : "off")
           << " seed=" << seed << " mode=" << to_string(mode) << " conditional=" << conditional;
        return os.str();
    }
};

/// Cosine: lr_min + (lr0 - lr_min) * (1 + cos(pi * step / steps)) / 2.
inline double lr_at(int step, const TrainConfig& c) {
    if (step < 0 || step > c.steps)
        throw DomainError("lr_at: step " + std::to_string(step) + " outside [0, " + std::to_string(c.steps) + "]");
    if (c.lr_schedule == LrSchedule::constant) return c.learning_rate;
    const double phase = std::numbers::pi * static_cast<double>(step) / static_cast<double>(c.steps);
    return c.lr_min + 0.5 * (c.learning_rate - c.lr_min) * (1.0 + std::cos(phase));
}

/// Batch mean of weight_n * MSE_n, where MSE_n is sample n's mean squared error.
inline Tensor weighted_loss(const Tensor& eps_true, const Tensor& eps_pred, const std::vector<double>& weights) {
    if (eps_true.shape() != eps_pred.shape())
        throw DimensionError("weighted_loss: shapes " + to_string(eps_true.shape()) + " and " +
                             to_string(eps_pred.shape()) + " differ");
    if (static_cast<std::int64_t>(weights.size()) != eps_true.dim(0))
        throw DimensionError("weighted_loss: need one weight per sample");
    std::vector<float> w(weights.size());
    bool unit = true;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        if (!(weights[i] >= 0.0)) throw ConfigError("weighted_loss: negative or NaN weight");
        w[i] = static_cast<float>(weights[i]);
        unit = unit && weights[i] == 1.0;
    }
    // Equal-size samples make the unit-weight case the plain MSE.
    if (unit) return mean(square(sub(eps_pred, eps_true)));
    auto per_sample = mean_per_sample(square(sub(eps_pred, eps_true)));
    return mean(mul(per_sample, Tensor({eps_true.dim(0)}, std::move(w))));
}

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

/// Adam with decoupled weight decay: p <- p * (1 - lr * wd), then the
/// bias-corrected moment update. Moments are kept per parameter name.
class AdamW {
public:
    explicit AdamW(AdamWConfig config = {}) : config_(config) {}

    const AdamWConfig& config() const { return config_; }

    void update(const std::string& name, std::span<float> param, std::span<const float> grad, double lr) {
        auto& s = state_[name];
        if (s.m.empty()) {
            s.m.assign(param.size(), 0.0f);
            s.v.assign(param.size(), 0.0f);
        }
        if (s.m.size() != param.size() || grad.size() != param.size())
            throw DimensionError("AdamW: size changed for parameter '" + name + "'");
        ++s.t;
        const double b1 = config_.beta1, b2 = config_.beta2;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(s.t));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(s.t));
        const double decay = 1.0 - lr * config_.weight_decay;
        for (std::size_t i = 0; i < param.size(); ++i) {
            const double g = grad[i];
            const double m = b1 * s.m[i] + (1.0 - b1) * g;
            const double v = b2 * s.v[i] + (1.0 - b2) * g * g;
            s.m[i] = static_cast<float>(m);
            s.v[i] = static_cast<float>(v);
            const double step = lr * (m / c1) / (std::sqrt(v / c2) + config_.eps);
            param[i] = static_cast<float>(param[i] * decay - step);
        }
    }

    // Parameters without a gradient this step are left untouched.
    void step(std::vector<NamedParam>& params, double lr) {
        for (auto& p : params)
            if (p.tensor.has_grad()) update(p.name, p.tensor.mutable_data(), p.tensor.grad(), lr);
    }

    void store(Checkpoint& c) const {
        for (const auto& [name, s] : state_) {
            const Shape shape{static_cast<std::int64_t>(s.m.size())};
            c.tensors["adam.m/" + name] = Tensor(shape, s.m);
            c.tensors["adam.v/" + name] = Tensor(shape, s.v);
            c.texts["adam.t/" + name] = std::to_string(s.t);
        }
    }

    void restore(const Checkpoint& c) {
        state_.clear();
        for (const auto& [key, text] : c.texts) {
            if (key.rfind("adam.t/", 0) != 0) continue;
            const std::string name = key.substr(7);
            auto& s = state_[name];
            s.t = std::stoll(text);
            s.m = c.tensor("adam.m/" + name).values();
            s.v = c.tensor("adam.v/" + name).values();
        }
    }

    std::size_t tracked() const { return state_.size(); }

private:
    struct Moments {
        std::vector<float> m, v;
        std::int64_t t = 0;
    };
    AdamWConfig config_;
    std::map<std::string, Moments> state_;
};

// One training pair: a normalized image [C, H, W] and, for conditional
// training, its condition tensor [cond_channels, H, W].
struct TrainingExample {
    Tensor image;
    Tensor cond;
};

struct Batch {
    Tensor x0;    // [B, C, H, W]
    Tensor cond;  // [B, cond_channels, H, W] or undefined
};

inline Tensor stack(const std::vector<const Tensor*>& items) {
    if (items.empty()) throw DimensionError("stack of zero tensors");
    const Shape& inner = items.front()->shape();
    std::vector<float> v;
    v.reserve(static_cast<std::size_t>(numel(inner)) * items.size());
    for (const auto* t : items) {
        if (t->shape() != inner) throw DimensionError("stack: mismatched shapes");
        v.insert(v.end(), t->values().begin(), t->values().end());
    }
    Shape shape{static_cast<std::int64_t>(items.size())};
    shape.insert(shape.end(), inner.begin(), inner.end());
    return Tensor(std::move(shape), std::move(v));
}

inline Batch make_batch(const std::vector<TrainingExample>& data, const std::vector<std::size_t>& indices,
                        bool with_condition) {
    std::vector<const Tensor*> images, conds;
    for (auto i : indices) {
        images.push_back(&data.at(i).image);
        if (with_condition) {
            if (!data[i].cond.defined()) throw ConditionError("conditional training example without a condition");
            conds.push_back(&data[i].cond);
        }
    }
    return {stack(images), with_condition ? stack(conds) : Tensor{}};
}

struct StepStats {
    int step = 0;
    double lr = 0.0;
    double loss = 0.0;
    double mean_weight = 0.0;
};

inline double global_grad_norm(const std::vector<NamedParam>& params) {
    double total = 0.0;
    for (const auto& p : params)
        if (p.tensor.has_grad())
            for (float g : p.tensor.grad()) total += static_cast<double>(g) * g;
    return std::sqrt(total);
}

/// One optimization step: per-sample uniform t, (offset) noise, closed-form
/// x_t, Min-SNR-weighted loss, backward, AdamW on the trainable set.
inline StepStats train_step(const Batch& batch, Denoiser& model, const NoiseSchedule& schedule, AdamW& optimizer,
                            const TrainConfig& config, Rng& rng, int step) {
    const std::int64_t n = batch.x0.dim(0);
    std::vector<int> t(static_cast<std::size_t>(n));
    for (auto& ti : t) ti = static_cast<int>(rng.uniform_int(0, schedule.steps() - 1));
    const OffsetNoiseConfig offset{config.gamma_offset, config.offset_noise, false};
    auto noise = sample_offset_noise(batch.x0.shape(), offset, rng);
    auto x_t = forward_diffuse(batch.x0, t, noise, schedule);

    std::vector<double> weights(t.size(), 1.0);
    if (config.min_snr)
        for (std::size_t i = 0; i < t.size(); ++i) weights[i] = min_snr_weight(t[i], config.gamma_snr, schedule);

    auto diagnostics = [&] {
        std::ostringstream os;
        os << " at step " << step << " (t =";
        for (int ti : t) os << ' ' << ti;
        os << "; weights =";
        for (double w : weights) os << ' ' << w;
        os << ")";
        return os.str();
    };

    apply_train_mode(model, config.mode);
    auto params = trainable_parameters(model, config.mode);
    for (auto& p : params) p.tensor.clear_grad();
    const double lr = lr_at(step, config);
    double loss_value = 0.0;
    try {
        const auto mode = config.conditional ? ControlMode::active : ControlMode::off;
        auto pred = predict_noise(x_t, t, batch.cond, model, mode);
        auto loss = weighted_loss(noise, pred, weights);
        loss_value = loss.item();
        if (!std::isfinite(loss_value)) throw NumericError("loss is not finite");
        loss.backward();
    } catch (const NumericError& e) {
        throw TrainingError(std::string("non-finite values during training (") + e.what() + ")" + diagnostics());
    }
    if (config.grad_clip) {
        const double norm = global_grad_norm(params);
        if (!std::isfinite(norm)) throw TrainingError("non-finite gradient norm" + diagnostics());
        if (norm > *config.grad_clip) {
            const float f = static_cast<float>(*config.grad_clip / norm);
            for (auto& p : params)
                if (p.tensor.has_grad())
                    for (auto& g : p.tensor.mutable_grad()) g *= f;
        }
    }
    optimizer.step(params, lr);

    double mw = 0.0;
    for (double w : weights) mw += w;
    return {step, lr, loss_value, mw / static_cast<double>(weights.size())};
}

/// Drives train_step over an in-memory dataset and owns the resumable state
/// (step counter, random stream, optimizer moments).
class Trainer {
public:
    Trainer(Denoiser model, NoiseSchedule schedule, TrainConfig config, std::vector<TrainingExample> data)
        : model_(std::move(model)), schedule_(std::move(schedule)), config_(config), data_(std::move(data)),
          rng_(config.seed), optimizer_(AdamWConfig{0.9, 0.999, 1e-8, config.weight_decay}) {
        config_.validate();
        if (data_.empty()) throw DatasetError("training needs at least one example");
        for (const auto& ex : data_) {
            if (ex.image.ndim() != 3 || ex.image.dim(0) != model_.config.image_channels)
                throw DatasetError("training image must be [" + std::to_string(model_.config.image_channels) +
                                   ", H, W], got " + to_string(ex.image.shape()));
            if (config_.conditional && !ex.cond.defined())
                throw ConditionError("conditional training requires a condition for every example");
        }
        model_.config.check_spatial(data_[0].image.dim(1), data_[0].image.dim(2));
        apply_train_mode(model_, config_.mode);
    }

    StepStats step() {
        if (step_ >= config_.steps) throw UsageError("training already finished");
        std::vector<std::size_t> idx(static_cast<std::size_t>(config_.batch_size));
        for (auto& i : idx) i = static_cast<std::size_t>(rng_.uniform_int(0, static_cast<std::int64_t>(data_.size()) - 1));
        auto batch = make_batch(data_, idx, config_.conditional);
        auto stats = train_step(batch, model_, schedule_, optimizer_, config_, rng_, step_);
        ++step_;
        stats.step = step_;
        return stats;
    }

    // Runs until `until` (default: config.steps), writing one log row per step.
    std::vector<StepStats> run(std::ostream* log = nullptr, int until = -1) {
        const int end = until < 0 ? config_.steps : std::min(until, config_.steps);
        std::vector<StepStats> out;
        if (log && step_ == 0) *log << "step\tlr\tloss\tmean_weight\n";
        while (step_ < end) {
            out.push_back(step());
            if (log) {
                const auto& s = out.back();
                char line[128];
                std::snprintf(line, sizeof line, "%d\t%.6g\t%.8g\t%.6g\n", s.step, s.lr, s.loss, s.mean_weight);
                *log << line;
            }
        }
        return out;
    }

    Checkpoint checkpoint() const {
        Checkpoint c;
        store_model(model_, c);
        optimizer_.store(c);
        c.texts["schedule"] = encode_schedule(schedule_);
        c.texts["train.step"] = std::to_string(step_);
        c.texts["train.rng"] = rng_.serialize();
        c.texts["train.config"] = config_.describe();
        c.texts["model.conditional"] = config_.conditional ? "1" : "0";
        return c;
    }

    /// Continues a run from a checkpoint; the model, optimizer, step counter
    /// and random stream are restored so the remaining steps match an
    /// uninterrupted run exactly.
    static Trainer resume(const Checkpoint& c, TrainConfig config, std::vector<TrainingExample> data) {
        Trainer t(restore_model(c), decode_schedule(c.text("schedule")), config, std::move(data));
        t.optimizer_.restore(c);
        t.step_ = std::stoi(c.text("train.step"));
        t.rng_ = Rng::restore(c.text("train.rng"));
        if (t.step_ > t.config_.steps) throw ConfigError("checkpoint is past the configured step count");
        return t;
    }

    Denoiser& model() { return model_; }
    const NoiseSchedule& schedule() const { return schedule_; }
    const TrainConfig& config() const { return config_; }
    int current_step() const { return step_; }

private:
    Denoiser model_;
    NoiseSchedule schedule_;
    TrainConfig config_;
    std::vector<TrainingExample> data_;
    Rng rng_;
    AdamW optimizer_;
    int step_ = 0;
};

// Mean of the first and last `window` entries of a loss series.
inline std::pair<double, double> loss_window_means(const std::vector<StepStats>& stats, std::size_t window) {
    if (stats.size() < window) throw UsageError("loss series shorter than the averaging window");
    double head = 0.0, tail = 0.0;
    for (std::size_t i = 0; i < window; ++i) {
        head += stats[i].loss;
        tail += stats[stats.size() - window + i].loss;
    }
    return {head / static_cast<double>(window), tail / static_cast<double>(window)};
}

} // namespace hye
