#pragma once
/**
 * Streaming inference. Every sample re-runs the detector over the last W angles;
 * when the subject is classified as falling the forecaster extrapolates H samples
 * and the trigger fires once the forecast time to impact is within trigger_lead.
 *
 * Time to impact is measured from the first forecast sample, i.e. one sensor
 * period after the most recent measurement.
 */

#include <cmath>
#include <memory>
#include <optional>
#include <ostream>
#include <vector>

#include "fallguard/dynamics.hpp"
#include "fallguard/model_io.hpp"
#include "fallguard/training.hpp"

namespace fallguard {

/// First crossing of pi/2 in the forecast, linearly interpolated; nothing when the
/// horizon never reaches the floor.
inline std::optional<double> time_to_impact(const std::vector<double>& forecast, double sensor_rate) {
    if (forecast.empty()) throw UsageError("time_to_impact needs a non-empty forecast");
    if (!(sensor_rate > 0.0)) throw UsageError("sensor_rate must be positive");
    for (std::size_t k = 0; k < forecast.size(); ++k) {
        if (forecast[k] < kHalfPi) continue;
        if (k == 0) return 0.0;
        const double a = forecast[k - 1], b = forecast[k];
        return (static_cast<double>(k - 1) + (kHalfPi - a) / (b - a)) / sensor_rate;
    }
    return std::nullopt;
}

struct StreamConfig {
    double sensor_rate = 100.0;
    double trigger_lead = 0.3;      ///< [s] mitigation deployment latency
    double rate_tolerance = 0.1;    ///< relative deviation of the sample period that raises a warning
};

struct Decision {
    double t = 0.0;
    std::optional<double> p_falling;  ///< absent during warm-up
    bool is_falling = false;
    std::optional<std::vector<double>> forecast;
    std::optional<double> time_to_impact;
    bool trigger = false;
    bool rate_warning = false;
};

/// One JSON object per decision; absent fields are omitted.
inline Json to_json(const Decision& d, bool with_forecast = false) {
    Json j{{"t", d.t}};
    if (d.p_falling) j["p_falling"] = *d.p_falling;
    j["is_falling"] = d.is_falling;
    if (d.time_to_impact) j["time_to_impact"] = *d.time_to_impact;
    j["trigger"] = d.trigger;
    if (d.rate_warning) j["rate_warning"] = true;
    if (with_forecast && d.forecast) j["forecast"] = *d.forecast;
    return j;
}

class StreamState {
public:
    StreamState(std::shared_ptr<const Model> detector, std::shared_ptr<const Model> forecaster,
                StreamConfig cfg = {})
        : detector_(std::move(detector)), forecaster_(std::move(forecaster)), cfg_(cfg) {
        if (!detector_) throw UsageError("a detector model is required");
        const auto& ds = detector_->net.spec();
        if (ds.head != nn::HeadKind::SigmoidScalar || ds.input_dim != 1)
            throw UsageError("detector must have a sigmoid_scalar head over one angle channel");
        if (forecaster_) {
            const auto& fs = forecaster_->net.spec();
            if (fs.head != nn::HeadKind::LinearVector || fs.input_dim != 1)
                throw UsageError("forecaster must have a linear_vector head over one angle channel");
        }
        if (!(cfg_.sensor_rate > 0.0) || !(cfg_.trigger_lead >= 0.0) || !(cfg_.rate_tolerance >= 0.0))
            throw UsageError("invalid stream configuration");
        for (const Model* m : {detector_.get(), forecaster_.get()})
            if (m && std::abs(m->meta.sensor_rate - cfg_.sensor_rate) > 1e-9 * cfg_.sensor_rate)
                throw UsageError("model was trained at " + std::to_string(m->meta.sensor_rate) +
                                 " Hz but the stream runs at " + std::to_string(cfg_.sensor_rate) + " Hz");
        det_window_ = detector_->meta.window;
        fc_window_ = forecaster_ ? forecaster_->meta.window : 0;
        if (det_window_ == 0 || (forecaster_ && fc_window_ == 0)) throw UsageError("model window must be positive");
        ring_.assign(std::max(det_window_, fc_window_), 0.0);
    }

    const StreamConfig& config() const { return cfg_; }
    std::size_t window() const { return det_window_; }
    std::size_t buffered() const { return count_; }
    bool has_forecaster() const { return static_cast<bool>(forecaster_); }

    Decision push_sample(double t, double theta) {
        if (!std::isfinite(t) || !std::isfinite(theta)) throw DataError("non-finite sample");
        Decision d;
        d.t = t;
        if (last_t_) {
            if (!(t > *last_t_)) throw DataError("non-monotonic timestamp " + std::to_string(t));
            const double expected = 1.0 / cfg_.sensor_rate;
            d.rate_warning = std::abs((t - *last_t_) - expected) > cfg_.rate_tolerance * expected;
        }
        last_t_ = t;
        ring_[head_] = theta;
        head_ = (head_ + 1) % ring_.size();
        count_ = std::min(count_ + 1, ring_.size());
        if (count_ < det_window_) return d;

        const double p = nn::predict(detector_->net, latest(det_window_))(0);
        d.p_falling = p;
        d.is_falling = is_falling(p);
        if (d.is_falling && forecaster_ && count_ >= fc_window_) {
            d.forecast = forecast();
            d.time_to_impact = fallguard::time_to_impact(*d.forecast, cfg_.sensor_rate);
            d.trigger = d.time_to_impact && *d.time_to_impact <= cfg_.trigger_lead;
        }
        return d;
    }

    /// H future angles from the current window in one network evaluation.
    std::vector<double> forecast() const {
        if (!forecaster_) throw UsageError("no forecaster model loaded");
        if (count_ < fc_window_) throw UsageError("stream buffer is not warm yet");
        const Eigen::VectorXd y = nn::predict(forecaster_->net, latest(fc_window_));
        return {y.data(), y.data() + y.size()};
    }

    void reset() {
        count_ = 0;
        head_ = 0;
        last_t_.reset();
    }

private:
    const std::vector<double>& latest(std::size_t n) const {
        scratch_.resize(n);
        const std::size_t cap = ring_.size();
        std::size_t idx = (head_ + cap - n) % cap;
        for (std::size_t i = 0; i < n; ++i, idx = (idx + 1) % cap) scratch_[i] = ring_[idx];
        return scratch_;
    }

    std::shared_ptr<const Model> detector_;
    std::shared_ptr<const Model> forecaster_;
    StreamConfig cfg_;
    std::size_t det_window_ = 0;
    std::size_t fc_window_ = 0;
    std::vector<double> ring_;
    std::size_t head_ = 0;
    std::size_t count_ = 0;
    std::optional<double> last_t_;
    mutable std::vector<double> scratch_;
};

}  // namespace fallguard
