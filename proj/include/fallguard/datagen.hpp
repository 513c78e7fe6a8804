#pragma once
/**
 * Synthetic supervised data from the pendulum model.
 *
 * Three kinds of motion are generated per subject:
 *  - passive falls from a randomized initial tilt and angular velocity,
 *  - stabilized sway: a PD ankle torque plus a band-limited random perturbation,
 *  - recoveries: a passive fall for a reaction time, then a torque-limited PD
 *    correction back to upright (the hard negative class).
 *
 * Every generator is a pure function of its inputs and seed. Scenario i draws from
 * its own sub-seed so any parallel schedule reproduces the sequential output.
 */

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fallguard/dynamics.hpp"
#include "fallguard/error.hpp"
#include "fallguard/random.hpp"

namespace fallguard {

struct Range {
    double min = 0.0;
    double max = 0.0;
    bool valid() const { return std::isfinite(min) && std::isfinite(max) && min <= max; }
};

struct ScenarioConfig {
    std::size_t n_fall = 1000;
    std::size_t n_nonfall = 1000;
    Range length_range{1.5, 2.0};
    Range mass_range{50.0, 100.0};
    Range theta0_range{0.0, 0.3};
    Range omega0_range{0.0, 0.5};
    double sensor_rate = 100.0;
    double noise_sigma = 0.01;
    double bias_drift_rate = 0.0;
    std::uint64_t seed = 1;
    InertiaModel inertia_model = InertiaModel::UniformRod;

    // Negative-class composition.
    double recovery_fraction = 0.25;   ///< share of non-fall scenarios that are recoveries
    Range recovery_theta0_range{0.0, 0.1};
    Range recovery_omega0_range{0.0, 0.3};
    Range t_react_range{0.05, 0.3};
    double sway_torque_std = 0.05;     ///< perturbation torque std, fraction of m*g*d
    double torque_limit = 0.3;         ///< recovery torque limit, fraction of m*g*d
    double nonfall_duration = 3.0;     ///< [s]
    double max_fall_time = 10.0;       ///< [s]

    void validate() const {
        for (const Range* r : {&length_range, &mass_range, &theta0_range, &omega0_range, &recovery_theta0_range,
                               &recovery_omega0_range, &t_react_range})
            if (!r->valid()) throw UsageError("empty or non-finite range (min > max)");
        if (length_range.min <= 0.0 || mass_range.min <= 0.0) throw UsageError("length and mass must be positive");
        if (theta0_range.min < 0.0 || theta0_range.max >= kHalfPi)
            throw UsageError("theta0_range must lie inside [0, pi/2)");
        if (!(sensor_rate > 0.0)) throw UsageError("sensor_rate must be positive");
        if (!(noise_sigma >= 0.0) || !(bias_drift_rate >= 0.0))
            throw UsageError("noise_sigma and bias_drift_rate must be non-negative");
        if (recovery_fraction < 0.0 || recovery_fraction > 1.0)
            throw UsageError("recovery_fraction must be in [0, 1]");
        if (!(nonfall_duration > 0.0) || !(max_fall_time > 0.0)) throw UsageError("durations must be positive");
    }
};

struct Scenario {
    std::size_t index = 0;
    bool is_fall = true;
    PendulumParams params;
    PendulumState initial;
    std::uint64_t seed = 0;  ///< sub-seed for everything downstream of this scenario
};

/// n_fall fall scenarios followed by n_nonfall non-fall scenarios.
inline std::vector<Scenario> sample_scenarios(const ScenarioConfig& cfg) {
    cfg.validate();
    std::vector<Scenario> out;
    const std::size_t total = cfg.n_fall + cfg.n_nonfall;
    out.reserve(total);
    for (std::size_t i = 0; i < total; ++i) {
        Scenario sc;
        sc.index = i;
        sc.is_fall = i < cfg.n_fall;
        sc.seed = derive_seed(cfg.seed, {i});
        Rng rng(sc.seed);
        sc.params.length = uniform(rng, cfg.length_range.min, cfg.length_range.max);
        sc.params.mass = uniform(rng, cfg.mass_range.min, cfg.mass_range.max);
        sc.params.gravity = 9.81;
        sc.params.inertia_model = cfg.inertia_model;
        sc.initial.theta = uniform(rng, cfg.theta0_range.min, cfg.theta0_range.max);
        sc.initial.omega = uniform(rng, cfg.omega0_range.min, cfg.omega0_range.max);
        sc.initial.t = 0.0;
        out.push_back(sc);
    }
    return out;
}

namespace detail {

/// Integration substeps per sensor sample so that the fine step is close to 1 ms.
inline int substeps_for(double sensor_rate, double fine_dt = 1e-3) {
    return std::max(1, static_cast<int>(std::lround(1.0 / (sensor_rate * fine_dt))));
}

}  // namespace detail

/// Passive fall sampled at `sensor_rate` (integrated at ~1 kHz). The trajectory
/// ends at the first sensor sample with |theta| >= pi/2, or at max_t.
inline Trajectory generate_fall(const PendulumParams& p, const PendulumState& initial, double sensor_rate,
                                double max_t = 10.0) {
    p.validate();
    if (!(sensor_rate > 0.0)) throw UsageError("sensor_rate must be positive");
    if (is_impact(initial.theta)) throw AlreadyImpactedError(initial.theta);
    const int sub = detail::substeps_for(sensor_rate);
    const double dt = 1.0 / (sensor_rate * sub);
    return integrate(p, initial, dt, sub, max_t, NoTorque{}, [](const PendulumState& s) -> std::optional<Termination> {
        if (is_impact(s.theta)) return Termination::Impact;
        return std::nullopt;
    });
}

/// Continues a passive trajectory for `n` more sensor samples, ignoring the floor.
/// Used as the forecasting target under the assumption that the fall continues.
inline std::vector<PendulumState> continue_passive(const PendulumParams& p, const PendulumState& from,
                                                   double sensor_rate, std::size_t n) {
    const int sub = detail::substeps_for(sensor_rate);
    const double dt = 1.0 / (sensor_rate * sub);
    std::vector<PendulumState> out;
    out.reserve(n);
    PendulumState s = from;
    const double t0 = from.t;
    long long k = 0;
    for (std::size_t i = 0; i < n; ++i) {
        for (int j = 0; j < sub; ++j) {
            s = step_rk4(p, s, dt);
            s.t = t0 + static_cast<double>(++k) * dt;
        }
        out.push_back(s);
    }
    return out;
}

/// PD gains for the linearized pendulum: Kp = 2*m*g*d, Kd = 2*sqrt(I*Kp).
struct PdGains {
    double kp = 0.0;
    double kd = 0.0;

    static PdGains defaults_for(const PendulumParams& p) {
        const double kp = 2.0 * p.gravity_torque();
        return {kp, 2.0 * std::sqrt(p.inertia() * kp)};
    }
};

struct SwayOptions {
    PendulumState initial{};
    double torque_std = 0.05;        ///< perturbation std as a fraction of m*g*d
    double correlation_time = 0.5;   ///< [s], Ornstein-Uhlenbeck time constant
    std::optional<PdGains> gains;    ///< defaults_for(params) when absent
    double max_abs_theta = 0.35;
    int max_attempts = 10;
};

namespace detail {

/// Band-limited perturbation torque: an Ornstein-Uhlenbeck process sampled on the
/// integration grid, linearly interpolated between grid points.
class PerturbationTorque {
public:
    PerturbationTorque(double t0, double dt, std::size_t steps, double std, double tau_c, Rng& rng)
        : t0_(t0), dt_(dt), values_(steps + 2, 0.0) {
        if (std == 0.0) return;
        const double a = std::exp(-dt / tau_c);
        const double b = std * std::sqrt(1.0 - a * a);
        values_[0] = gaussian(rng, 0.0, std);
        for (std::size_t i = 1; i < values_.size(); ++i) values_[i] = a * values_[i - 1] + gaussian(rng, 0.0, b);
    }

    double operator()(double t) const {
        const double x = std::max(0.0, (t - t0_) / dt_);
        const std::size_t i = std::min(static_cast<std::size_t>(x), values_.size() - 2);
        const double f = std::min(1.0, x - static_cast<double>(i));
        return values_[i] + f * (values_[i + 1] - values_[i]);
    }

private:
    double t0_;
    double dt_;
    std::vector<double> values_;
};

}  // namespace detail

/**
 * Stabilized standing sway: u = -Kp*theta - Kd*omega + perturbation. Retries with a
 * fresh sub-seed whenever max|theta| reaches opts.max_abs_theta; throws after
 * opts.max_attempts failures.
 */
inline Trajectory generate_nonfall(const PendulumParams& p, double sensor_rate, double duration, std::uint64_t seed,
                                   const SwayOptions& opts = {}) {
    p.validate();
    if (!(duration > 0.0)) throw UsageError("duration must be positive");
    if (!(sensor_rate > 0.0)) throw UsageError("sensor_rate must be positive");
    const PdGains g = opts.gains.value_or(PdGains::defaults_for(p));
    const int sub = detail::substeps_for(sensor_rate);
    const double dt = 1.0 / (sensor_rate * sub);
    const auto steps = static_cast<std::size_t>(std::ceil(duration / dt)) + sub;
    for (int attempt = 0; attempt < opts.max_attempts; ++attempt) {
        Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(attempt)}));
        detail::PerturbationTorque perturb(opts.initial.t, dt, steps, opts.torque_std * p.gravity_torque(),
                                           opts.correlation_time, rng);
        auto torque = [&](double t, double th, double om) { return -g.kp * th - g.kd * om + perturb(t); };
        const double limit = opts.max_abs_theta;
        auto traj = integrate(p, opts.initial, dt, sub, duration, torque,
                              [limit](const PendulumState& s) -> std::optional<Termination> {
                                  if (std::abs(s.theta) >= limit) return Termination::Impact;
                                  return std::nullopt;
                              });
        if (traj.terminated_by == Termination::Impact) continue;
        traj.terminated_by = Termination::Recovered;
        return traj;
    }
    throw NumericError("sway generation exceeded |theta| bound in " + std::to_string(opts.max_attempts) +
                       " attempts; PD gains are mis-tuned for this subject");
}

struct RecoveryOptions {
    double torque_limit = 0.3;  ///< max restoring torque, fraction of m*g*d
    std::optional<PdGains> gains;
    double settle_time = 3.0;   ///< [s] of corrective control after the reaction
    double recovered_below = 0.1;
};

struct RecoveryResult {
    Trajectory trajectory;
    bool recovered = false;
};

/**
 * Passive fall for t_react seconds, then a saturated PD torque. The sample is
 * recovered when the floor is never reached and |theta| ends below
 * opts.recovered_below; otherwise it is reported as unrecoverable (a real fall).
 */
inline RecoveryResult generate_recovery(const PendulumParams& p, const PendulumState& initial, double t_react,
                                        double sensor_rate, const RecoveryOptions& opts = {}) {
    p.validate();
    if (t_react < 0.0) throw UsageError("t_react must be non-negative");
    if (is_impact(initial.theta)) throw AlreadyImpactedError(initial.theta);
    const PdGains g = opts.gains.value_or(PdGains::defaults_for(p));
    const double limit = opts.torque_limit * p.gravity_torque();
    const double t_on = initial.t + t_react;
    const int sub = detail::substeps_for(sensor_rate);
    const double dt = 1.0 / (sensor_rate * sub);
    auto torque = [&](double t, double th, double om) {
        if (t < t_on) return 0.0;
        return std::clamp(-g.kp * th - g.kd * om, -limit, limit);
    };
    RecoveryResult out;
    out.trajectory = integrate(p, initial, dt, sub, t_react + opts.settle_time, torque,
                               [](const PendulumState& s) -> std::optional<Termination> {
                                   if (is_impact(s.theta)) return Termination::Impact;
                                   return std::nullopt;
                               });
    out.recovered = out.trajectory.terminated_by != Termination::Impact &&
                    std::abs(out.trajectory.back().theta) < opts.recovered_below;
    if (out.recovered) out.trajectory.terminated_by = Termination::Recovered;
    return out;
}

/// angle[i] + N(0, noise_sigma) + bias_drift_rate * (t[i] - t[0]).
inline std::vector<double> corrupt(const std::vector<double>& angles, const std::vector<double>& times,
                                   double noise_sigma, double bias_drift_rate, std::uint64_t seed) {
    if (angles.size() != times.size()) throw UsageError("angles and times differ in length");
    if (!(noise_sigma >= 0.0) || !(bias_drift_rate >= 0.0))
        throw UsageError("noise_sigma and bias_drift_rate must be non-negative");
    Rng rng(seed);
    std::vector<double> out(angles.size());
    const double t0 = times.empty() ? 0.0 : times.front();
    for (std::size_t i = 0; i < angles.size(); ++i)
        out[i] = angles[i] + gaussian(rng, 0.0, noise_sigma) + bias_drift_rate * (times[i] - t0);
    return out;
}

inline std::vector<double> corrupt(const Trajectory& traj, double noise_sigma, double bias_drift_rate,
                                   std::uint64_t seed) {
    return corrupt(traj.angles(), traj.times(), noise_sigma, bias_drift_rate, seed);
}

struct LabeledWindow {
    std::vector<double> angles;
    int label = 0;  ///< 1 = falling
    std::string source_id;
};

struct ForecastPair {
    std::vector<double> input;
    std::vector<double> target;
    std::string source_id;
};

/// Where a sequence came from: falls are labeled 1 from `onset_index` on.
struct FallMeta {
    bool is_fall = false;
    std::size_t onset_index = 0;
    std::string source;
};

inline std::vector<LabeledWindow> windowize_detection(const std::vector<double>& angles, std::size_t window,
                                                      std::size_t stride, const FallMeta& meta) {
    if (window == 0 || stride == 0) throw UsageError("window and stride must be positive");
    if (angles.size() < window)
        throw DataError("sequence of " + std::to_string(angles.size()) + " samples is shorter than window " +
                        std::to_string(window));
    std::vector<LabeledWindow> out;
    for (std::size_t i = 0; i + window <= angles.size(); i += stride) {
        LabeledWindow w;
        w.angles.assign(angles.begin() + static_cast<std::ptrdiff_t>(i),
                        angles.begin() + static_cast<std::ptrdiff_t>(i + window));
        w.label = meta.is_fall && i + window - 1 >= meta.onset_index ? 1 : 0;
        w.source_id = meta.source + ":" + std::to_string(i);
        out.push_back(std::move(w));
    }
    return out;
}

inline std::vector<ForecastPair> make_forecast_pairs(const std::vector<double>& angles, std::size_t window,
                                                     std::size_t horizon, std::size_t stride,
                                                     const std::string& source = {}) {
    if (window == 0 || horizon == 0 || stride == 0) throw UsageError("window, horizon and stride must be positive");
    if (angles.size() < window + horizon)
        throw DataError("sequence of " + std::to_string(angles.size()) + " samples is shorter than W + H = " +
                        std::to_string(window + horizon));
    std::vector<ForecastPair> out;
    for (std::size_t i = 0; i + window + horizon <= angles.size(); i += stride) {
        const auto b = angles.begin() + static_cast<std::ptrdiff_t>(i);
        ForecastPair fp;
        fp.input.assign(b, b + static_cast<std::ptrdiff_t>(window));
        fp.target.assign(b + static_cast<std::ptrdiff_t>(window), b + static_cast<std::ptrdiff_t>(window + horizon));
        fp.source_id = source + ":" + std::to_string(i);
        out.push_back(std::move(fp));
    }
    return out;
}

struct Quaternion {
    double w = 1.0, x = 0.0, y = 0.0, z = 0.0;
};

/// Tilt of a body-fixed axis from the world up vector (0,0,1) after rotating by q.
/// Non-unit quaternions and axes are normalized; zero ones are rejected.
inline double quaternion_to_tilt(Quaternion q, std::array<double, 3> axis = {0.0, 0.0, 1.0}) {
    const double qn = std::sqrt(q.w * q.w + q.x * q.x + q.y * q.y + q.z * q.z);
    if (!(qn > 0.0) || !std::isfinite(qn)) throw DataError("zero or non-finite quaternion");
    if (std::abs(qn - 1.0) > 1e-6) {
        q.w /= qn;
        q.x /= qn;
        q.y /= qn;
        q.z /= qn;
    }
    const double an = std::sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]);
    if (!(an > 0.0) || !std::isfinite(an)) throw UsageError("zero or non-finite body axis");
    for (auto& a : axis) a /= an;
    // Third row of the rotation matrix of q.
    const double r20 = 2.0 * (q.x * q.z - q.w * q.y);
    const double r21 = 2.0 * (q.y * q.z + q.w * q.x);
    const double r22 = 1.0 - 2.0 * (q.x * q.x + q.y * q.y);
    const double up = std::clamp(r20 * axis[0] + r21 * axis[1] + r22 * axis[2], -1.0, 1.0);
    return std::acos(up);
}

}  // namespace fallguard
