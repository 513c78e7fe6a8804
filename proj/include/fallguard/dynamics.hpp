#pragma once
/**
 * Planar inverted pendulum pivoting on the ground under gravity.
 *
 * The subject is a rigid rod (or a point mass at the tip) hinged at the feet by a
 * frictionless revolute joint. The tilt angle theta is measured from the upward
 * vertical: 0 is upright, pi/2 is lying on the floor. Positive omega moves toward
 * the floor.
 *
 *   I * theta'' = m * g * d * sin(theta) + tau
 *
 * where tau is an optional external (ankle) torque. Passive falls use tau = 0.
 */

#include <cmath>
#include <cstdio>
#include <numbers>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "fallguard/error.hpp"

namespace fallguard {

inline constexpr double kHalfPi = std::numbers::pi / 2.0;

enum class InertiaModel { UniformRod, PointMass };

struct PendulumParams {
    double length = 1.8;   ///< rod length [m], the subject's height
    double mass = 70.0;    ///< [kg]
    double gravity = 9.81; ///< [m/s^2]
    InertiaModel inertia_model = InertiaModel::UniformRod;

    /// Moment of inertia about the pivot [kg m^2].
    double inertia() const {
        return inertia_model == InertiaModel::UniformRod ? mass * length * length / 3.0
                                                         : mass * length * length;
    }
    /// Distance from pivot to centre of mass [m].
    double com_distance() const {
        return inertia_model == InertiaModel::UniformRod ? length / 2.0 : length;
    }
    /// Gravity torque at theta = pi/2, m*g*d [N m].
    double gravity_torque() const { return mass * gravity * com_distance(); }

    void validate() const {
        if (!(length > 0.0) || !(mass > 0.0) || !(gravity > 0.0) || !std::isfinite(length) ||
            !std::isfinite(mass) || !std::isfinite(gravity))
            throw UsageError("pendulum parameters must be finite and positive");
    }
};

struct PendulumState {
    double theta = 0.0;  ///< [rad]
    double omega = 0.0;  ///< [rad/s]
    double t = 0.0;      ///< [s]

    bool finite() const { return std::isfinite(theta) && std::isfinite(omega) && std::isfinite(t); }
};

enum class Termination { Impact, Timeout, Recovered };

inline const char* to_string(Termination t) {
    switch (t) {
        case Termination::Impact: return "impact";
        case Termination::Timeout: return "timeout";
        case Termination::Recovered: return "recovered";
    }
    return "?";
}

struct Trajectory {
    double dt = 0.0;
    std::vector<PendulumState> samples;
    Termination terminated_by = Termination::Timeout;

    std::size_t size() const { return samples.size(); }
    const PendulumState& back() const { return samples.back(); }

    std::vector<double> angles() const {
        std::vector<double> out;
        out.reserve(samples.size());
        for (const auto& s : samples) out.push_back(s.theta);
        return out;
    }
    std::vector<double> times() const {
        std::vector<double> out;
        out.reserve(samples.size());
        for (const auto& s : samples) out.push_back(s.t);
        return out;
    }
    /// Time of the last sample minus time of the first.
    double duration() const { return samples.empty() ? 0.0 : samples.back().t - samples.front().t; }
};

/// Thrown by simulate_fall when the initial state is already on the floor.
struct AlreadyImpactedError : DataError {
    explicit AlreadyImpactedError(double theta)
        : DataError("initial angle " + std::to_string(theta) + " rad is already at or past impact (|theta| >= pi/2)") {}
};

inline bool is_impact(double theta) { return std::abs(theta) >= kHalfPi; }

inline double angular_acceleration(const PendulumParams& p, double theta) {
    return p.gravity_torque() / p.inertia() * std::sin(theta);
}

/// Angular acceleration with an additional torque about the pivot.
inline double angular_acceleration(const PendulumParams& p, double theta, double torque) {
    return (p.gravity_torque() * std::sin(theta) + torque) / p.inertia();
}

struct NoTorque {
    constexpr double operator()(double /*t*/, double /*theta*/, double /*omega*/) const { return 0.0; }
};

/// Classical RK4 step on (theta, omega). `torque(t, theta, omega)` is evaluated at every stage.
template <class Torque>
PendulumState step_rk4(const PendulumParams& p, const PendulumState& s, double dt, Torque&& torque) {
    auto acc = [&](double t, double th, double om) { return angular_acceleration(p, th, torque(t, th, om)); };
    const double k1t = s.omega;
    const double k1w = acc(s.t, s.theta, s.omega);
    const double k2t = s.omega + 0.5 * dt * k1w;
    const double k2w = acc(s.t + 0.5 * dt, s.theta + 0.5 * dt * k1t, k2t);
    const double k3t = s.omega + 0.5 * dt * k2w;
    const double k3w = acc(s.t + 0.5 * dt, s.theta + 0.5 * dt * k2t, k3t);
    const double k4t = s.omega + dt * k3w;
    const double k4w = acc(s.t + dt, s.theta + dt * k3t, k4t);
    return {s.theta + dt / 6.0 * (k1t + 2.0 * k2t + 2.0 * k3t + k4t),
            s.omega + dt / 6.0 * (k1w + 2.0 * k2w + 2.0 * k3w + k4w), s.t + dt};
}

inline PendulumState step_rk4(const PendulumParams& p, const PendulumState& s, double dt) {
    return step_rk4(p, s, dt, NoTorque{});
}

/// Kinetic plus potential energy, potential referenced to the pivot plane [J].
inline double total_energy(const PendulumParams& p, const PendulumState& s) {
    return 0.5 * p.inertia() * s.omega * s.omega + p.gravity_torque() * std::cos(s.theta);
}

/// Closed-form angular velocity reached at `theta` on a passive fall from (theta0, omega0).
inline double omega_at_angle(const PendulumParams& p, double theta0, double omega0, double theta) {
    const double radicand =
        omega0 * omega0 + 2.0 * p.gravity_torque() / p.inertia() * (std::cos(theta0) - std::cos(theta));
    if (radicand < 0.0) throw NumericError("unreachable angle " + std::to_string(theta));
    return std::sqrt(radicand);
}

/**
 * Generic fixed-step integration loop. Integrates at `dt`, records every
 * `record_every` steps, and after each recorded sample asks `stop(state)` for a
 * termination. Sample times are computed as t0 + n*dt to avoid accumulation.
 */
template <class Torque, class Stop>
Trajectory integrate(const PendulumParams& p, const PendulumState& initial, double dt, int record_every,
                     double max_t, Torque&& torque, Stop&& stop) {
    if (!(dt > 0.0)) throw UsageError("dt must be positive");
    if (!(max_t > 0.0)) throw UsageError("max_t must be positive");
    if (record_every < 1) throw UsageError("record_every must be >= 1");
    Trajectory traj;
    traj.dt = dt * record_every;
    traj.samples.push_back(initial);
    if (auto why = stop(initial)) {
        traj.terminated_by = *why;
        return traj;
    }
    PendulumState s = initial;
    const double t0 = initial.t;
    long long n = 0;
    while (true) {
        for (int k = 0; k < record_every; ++k) {
            s = step_rk4(p, s, dt, torque);
            ++n;
            s.t = t0 + static_cast<double>(n) * dt;
        }
        if (!s.finite()) throw NumericError("non-finite pendulum state at t=" + std::to_string(s.t));
        traj.samples.push_back(s);
        if (auto why = stop(s)) {
            traj.terminated_by = *why;
            return traj;
        }
        if (s.t - t0 >= max_t - 1e-9 * dt) {
            traj.terminated_by = Termination::Timeout;
            return traj;
        }
    }
}

/// Passive fall until |theta| >= pi/2 or max_t elapses, one sample per step.
inline Trajectory simulate_fall(const PendulumParams& p, const PendulumState& initial, double dt, double max_t) {
    p.validate();
    if (is_impact(initial.theta)) throw AlreadyImpactedError(initial.theta);
    return integrate(p, initial, dt, 1, max_t, NoTorque{},
                     [](const PendulumState& s) -> std::optional<Termination> {
                         if (is_impact(s.theta)) return Termination::Impact;
                         return std::nullopt;
                     });
}

/**
 * State at which the trajectory segment a->b crosses |theta| = target, using cubic
 * Hermite interpolation in time (theta with omega as slope, omega with the passive
 * acceleration as slope). Requires |a.theta| < target <= |b.theta|.
 */
inline PendulumState interpolate_crossing(const PendulumParams& p, const PendulumState& a, const PendulumState& b,
                                          double target = kHalfPi) {
    const double sign = b.theta < 0.0 ? -1.0 : 1.0;
    const double h = b.t - a.t;
    const double ya = sign * a.theta, yb = sign * b.theta;
    const double va = sign * a.omega, vb = sign * b.omega;
    const double aa = sign * angular_acceleration(p, a.theta), ab = sign * angular_acceleration(p, b.theta);
    auto hermite = [h](double y0, double y1, double m0, double m1, double s) {
        const double s2 = s * s, s3 = s2 * s;
        return (2 * s3 - 3 * s2 + 1) * y0 + (s3 - 2 * s2 + s) * h * m0 + (-2 * s3 + 3 * s2) * y1 + (s3 - s2) * h * m1;
    };
    double lo = 0.0, hi = 1.0;
    for (int i = 0; i < 80; ++i) {
        const double mid = 0.5 * (lo + hi);
        if (hermite(ya, yb, va, vb, mid) < target) lo = mid;
        else hi = mid;
    }
    const double s = 0.5 * (lo + hi);
    return {sign * target, sign * hermite(va, vb, aa, ab, s), a.t + s * h};
}

/// Writes `t,theta,omega`, one row per sample, 17 significant digits.
inline void write_trajectory_csv(std::ostream& os, const Trajectory& traj) {
    os << "t,theta,omega\n";
    char buf[96];
    for (const auto& s : traj.samples) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", s.t, s.theta, s.omega);
        os << buf;
    }
}

}  // namespace fallguard
