#pragma once
/**
 * Mini-batch training of the detection classifier (binary cross-entropy on the
 * logit) and the forecasting regressor (mean squared error), with Adam.
 *
 * Everything is seeded: the weight init, the train/validation split and each
 * epoch's shuffle derive from TrainConfig::seed, so (dataset, spec, config)
 * determine the trained weights bit for bit.
 */

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <ostream>
#include <vector>

#include "fallguard/config_json.hpp"
#include "fallguard/dataset.hpp"
#include "fallguard/model_io.hpp"
#include "fallguard/rnn.hpp"

namespace fallguard {

struct TrainConfig {
    std::size_t epochs = 100;
    std::size_t batch_size = 32;
    double learning_rate = 1e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;
    std::uint64_t seed = 1;
    double validation_fraction = 0.2;

    void validate() const {
        if (batch_size < 1) throw UsageError("batch_size must be >= 1");
        if (!(learning_rate > 0.0)) throw UsageError("learning_rate must be positive");
        if (!(adam_beta1 > 0.0 && adam_beta1 < 1.0) || !(adam_beta2 > 0.0 && adam_beta2 < 1.0))
            throw UsageError("Adam betas must lie in (0, 1)");
        if (!(adam_epsilon > 0.0)) throw UsageError("adam_epsilon must be positive");
        if (!(validation_fraction >= 0.0 && validation_fraction < 1.0))
            throw UsageError("validation_fraction must lie in [0, 1)");
    }
};

inline Json to_json(const TrainConfig& c) {
    return Json{{"epochs", c.epochs},         {"batch_size", c.batch_size}, {"learning_rate", c.learning_rate},
                {"adam_beta1", c.adam_beta1}, {"adam_beta2", c.adam_beta2}, {"adam_epsilon", c.adam_epsilon},
                {"seed", c.seed},             {"validation_fraction", c.validation_fraction}};
}

inline void read_json(JsonSection& s, TrainConfig& c) {
    s.read("epochs", c.epochs);
    s.read("batch_size", c.batch_size);
    s.read("learning_rate", c.learning_rate);
    s.read("adam_beta1", c.adam_beta1);
    s.read("adam_beta2", c.adam_beta2);
    s.read("adam_epsilon", c.adam_epsilon);
    s.read("seed", c.seed);
    s.read("validation_fraction", c.validation_fraction);
}

struct Confusion {
    std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
    std::size_t total() const { return tp + tn + fp + fn; }
};

struct Metrics {
    double loss = 0.0;
    double accuracy = std::numeric_limits<double>::quiet_NaN();
    double recall = std::numeric_limits<double>::quiet_NaN();
    double precision = std::numeric_limits<double>::quiet_NaN();
    double rmse = std::numeric_limits<double>::quiet_NaN();  ///< forecasting only
    Confusion confusion;
};

/// Accuracy, recall and precision from a confusion matrix; recall (precision) is 1
/// when there are no actual (predicted) positives.
inline Metrics metrics_from_confusion(const Confusion& c, double loss = 0.0) {
    Metrics m;
    m.loss = loss;
    m.confusion = c;
    m.accuracy = c.total() ? static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total()) : 0.0;
    m.recall = c.tp + c.fn ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn) : 1.0;
    m.precision = c.tp + c.fp ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp) : 1.0;
    return m;
}

/// P(falling) > 0.5, strictly.
inline bool is_falling(double p) { return p > 0.5; }

struct LossGrad {
    double loss = 0.0;
    double grad = 0.0;
};

/// -[y ln p + (1-y) ln(1-p)] and its derivative with respect to p.
inline LossGrad bce_loss(double p, int label) {
    const double y = label;
    return {-(y * std::log(p) + (1.0 - y) * std::log1p(-p)), (p - y) / (p * (1.0 - p))};
}

/// Binary cross-entropy evaluated from the logit z (p = sigmoid(z)); the gradient
/// is with respect to z and equals p - y.
inline LossGrad bce_from_logit(double z, int label) {
    const double y = label;
    // log(1 + exp(-|z|)) keeps both branches finite.
    const double softplus = std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
    return {softplus - y * z, nn::sigmoid(z) - y};
}

struct VectorLossGrad {
    double loss = 0.0;
    Eigen::VectorXd grad;
};

/// Mean squared error over the horizon; gradient 2(pred - target)/H.
inline VectorLossGrad mse_loss(const Eigen::VectorXd& pred, const Eigen::VectorXd& target) {
    if (pred.size() != target.size() || pred.size() == 0) throw DataError("mse_loss: size mismatch");
    const Eigen::VectorXd diff = pred - target;
    const double h = static_cast<double>(pred.size());
    return {diff.squaredNorm() / h, 2.0 * diff / h};
}

struct AdamState {
    Eigen::VectorXd m, v;
    long step = 0;
};

/// One bias-corrected Adam update; increments state.step.
inline void adam_step(Eigen::VectorXd& w, const Eigen::VectorXd& g, AdamState& s, const TrainConfig& c) {
    if (s.m.size() != w.size()) {
        s.m = Eigen::VectorXd::Zero(w.size());
        s.v = Eigen::VectorXd::Zero(w.size());
    }
    if (g.size() != w.size()) throw DataError("gradient and weights differ in size");
    ++s.step;
    s.m = c.adam_beta1 * s.m + (1.0 - c.adam_beta1) * g;
    s.v = c.adam_beta2 * s.v + (1.0 - c.adam_beta2) * g.cwiseProduct(g);
    const double bc1 = 1.0 - std::pow(c.adam_beta1, static_cast<double>(s.step));
    const double bc2 = 1.0 - std::pow(c.adam_beta2, static_cast<double>(s.step));
    w.array() -= c.learning_rate * (s.m.array() / bc1) / ((s.v.array() / bc2).sqrt() + c.adam_epsilon);
}

struct Split {
    std::vector<std::size_t> train, validation;
};

/// Seeded shuffle split; stratified by label for detection data.
inline Split split_dataset(const Dataset& ds, double validation_fraction, std::uint64_t seed) {
    Split sp;
    Rng rng(seed);
    auto take = [&](std::vector<std::size_t> idx) {
        std::shuffle(idx.begin(), idx.end(), rng);
        const auto nval = static_cast<std::size_t>(std::floor(validation_fraction * static_cast<double>(idx.size())));
        sp.validation.insert(sp.validation.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(nval));
        sp.train.insert(sp.train.end(), idx.begin() + static_cast<std::ptrdiff_t>(nval), idx.end());
    };
    if (ds.task == Task::Detection) {
        std::vector<std::size_t> pos, neg;
        for (std::size_t i = 0; i < ds.windows.size(); ++i) (ds.windows[i].label ? pos : neg).push_back(i);
        take(std::move(pos));
        take(std::move(neg));
    } else {
        std::vector<std::size_t> all(ds.pairs.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        take(std::move(all));
    }
    std::sort(sp.train.begin(), sp.train.end());
    std::sort(sp.validation.begin(), sp.validation.end());
    return sp;
}

namespace detail {

inline const std::vector<double>& inputs_of(const Dataset& ds, std::size_t i) {
    return ds.task == Task::Detection ? ds.windows[i].angles : ds.pairs[i].input;
}

inline nn::SequenceBatch make_batch(const Dataset& ds, const std::size_t* idx, std::size_t n) {
    std::vector<const std::vector<double>*> seqs;
    seqs.reserve(n);
    for (std::size_t k = 0; k < n; ++k) seqs.push_back(&inputs_of(ds, idx[k]));
    return nn::SequenceBatch::from_sequences(seqs);
}

/// Loss (summed over the batch) and dLoss/d(pre-activation) scaled by `scale`.
inline double batch_loss(const Dataset& ds, const std::size_t* idx, std::size_t n, const nn::ForwardCache& fc,
                         Eigen::MatrixXd* grad_pre, double scale) {
    double total = 0.0;
    if (grad_pre) grad_pre->resize(fc.pre.rows(), fc.pre.cols());
    for (std::size_t k = 0; k < n; ++k) {
        const auto col = static_cast<Eigen::Index>(k);
        if (ds.task == Task::Detection) {
            const auto lg = bce_from_logit(fc.pre(0, col), ds.windows[idx[k]].label);
            total += lg.loss;
            if (grad_pre) (*grad_pre)(0, col) = scale * lg.grad;
        } else {
            const auto& tgt = ds.pairs[idx[k]].target;
            const Eigen::Map<const Eigen::VectorXd> t(tgt.data(), static_cast<Eigen::Index>(tgt.size()));
            const auto lg = mse_loss(fc.output.col(col), t);
            total += lg.loss;
            if (grad_pre) grad_pre->col(col) = scale * lg.grad;
        }
    }
    return total;
}

inline void check_compatible(const nn::Network& net, const Dataset& ds) {
    const auto& spec = net.spec();
    if (ds.task == Task::Detection && spec.head != nn::HeadKind::SigmoidScalar)
        throw UsageError("detection data needs a sigmoid_scalar head");
    if (ds.task == Task::Forecasting &&
        (spec.head != nn::HeadKind::LinearVector || spec.output_dim != static_cast<nn::Index>(ds.horizon)))
        throw UsageError("forecasting data needs a linear_vector head of size H = " + std::to_string(ds.horizon));
    if (spec.input_dim != 1) throw UsageError("datasets carry a single angle channel (input_dim 1)");
}

}  // namespace detail

/// Metrics of `net` on the given rows of `ds` (all rows when `rows` is null).
inline Metrics evaluate(const nn::Network& net, const Dataset& ds, const std::vector<std::size_t>* rows = nullptr,
                        std::size_t chunk = 256) {
    detail::check_compatible(net, ds);
    std::vector<std::size_t> all;
    if (!rows) {
        all.resize(ds.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        rows = &all;
    }
    if (rows->empty()) throw DataError("cannot evaluate on an empty dataset");
    Confusion c;
    double loss = 0.0;
    for (std::size_t start = 0; start < rows->size(); start += chunk) {
        const std::size_t n = std::min(chunk, rows->size() - start);
        const std::size_t* idx = rows->data() + start;
        const auto fc = nn::forward(net, detail::make_batch(ds, idx, n));
        if (!fc.output.allFinite()) throw NumericError("non-finite network output during evaluation");
        loss += detail::batch_loss(ds, idx, n, fc, nullptr, 0.0);
        if (ds.task == Task::Detection) {
            for (std::size_t k = 0; k < n; ++k) {
                const bool pred = is_falling(fc.output(0, static_cast<Eigen::Index>(k)));
                const bool truth = ds.windows[idx[k]].label == 1;
                if (pred && truth) ++c.tp;
                else if (pred) ++c.fp;
                else if (truth) ++c.fn;
                else ++c.tn;
            }
        }
    }
    loss /= static_cast<double>(rows->size());
    if (ds.task == Task::Detection) return metrics_from_confusion(c, loss);
    Metrics m;
    m.loss = loss;
    m.rmse = std::sqrt(loss);
    return m;
}

inline Metrics evaluate(const Model& model, const Dataset& ds) { return evaluate(model.net, ds); }

struct EpochRecord {
    std::size_t epoch = 0;
    double loss = 0.0;  ///< mean training loss over the epoch's batches
    double val_loss = std::numeric_limits<double>::quiet_NaN();
    Metrics metrics;    ///< on the validation split, or the training split when it is empty
};

struct TrainResult {
    Model model;
    std::vector<EpochRecord> history;
    Split split;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

inline TrainResult train(const Dataset& ds, const nn::NetworkSpec& spec, const TrainConfig& cfg,
                         const EpochCallback& on_epoch = {}) {
    cfg.validate();
    if (ds.empty()) throw DataError("training dataset is empty");
    TrainResult res;
    res.model.net = nn::init_weights(spec, derive_seed(cfg.seed, {0}));
    res.model.meta.window = ds.window;
    res.model.meta.horizon = ds.horizon;
    res.model.meta.sensor_rate = ds.sensor_rate;
    res.model.provenance = {{"train_config", to_json(cfg)}, {"dataset", ds.metadata}};
    detail::check_compatible(res.model.net, ds);
    res.split = split_dataset(ds, cfg.validation_fraction, derive_seed(cfg.seed, {1}));
    if (res.split.train.empty()) throw DataError("training split is empty");
    if (ds.task == Task::Detection) {
        std::size_t pos = 0;
        for (auto i : res.split.train) pos += ds.windows[i].label == 1;
        if (pos == 0 || pos == res.split.train.size())
            throw DataError("detection training split contains a single class");
    }
    auto& net = res.model.net;
    AdamState adam;
    std::vector<std::size_t> order = res.split.train;
    const auto& eval_rows = res.split.validation.empty() ? res.split.train : res.split.validation;
    Eigen::MatrixXd grad_pre;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        Rng rng(derive_seed(cfg.seed, {2, epoch}));
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t n = std::min(cfg.batch_size, order.size() - start);
            const std::size_t* idx = order.data() + start;
            const auto fc = nn::forward(net, detail::make_batch(ds, idx, n));
            loss_sum += detail::batch_loss(ds, idx, n, fc, &grad_pre, 1.0 / static_cast<double>(n));
            const Eigen::VectorXd g = nn::backward(net, fc, grad_pre);
            if (!g.allFinite()) throw NumericError("non-finite gradient in epoch " + std::to_string(epoch));
            adam_step(net.params(), g, adam, cfg);
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.loss = loss_sum / static_cast<double>(order.size());
        rec.metrics = evaluate(net, ds, &eval_rows);
        if (!res.split.validation.empty()) rec.val_loss = rec.metrics.loss;
        res.history.push_back(rec);
        if (on_epoch) on_epoch(rec);
    }
    return res;
}

inline void write_history_csv(std::ostream& os, const std::vector<EpochRecord>& history) {
    os << "epoch,loss,val_loss,accuracy,recall,precision\n";
    auto num = [](double v) {
        if (std::isnan(v)) return std::string();
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    for (const auto& r : history)
        os << r.epoch << ',' << num(r.loss) << ',' << num(r.val_loss) << ',' << num(r.metrics.accuracy) << ','
           << num(r.metrics.recall) << ',' << num(r.metrics.precision) << '\n';
}

}  // namespace fallguard
