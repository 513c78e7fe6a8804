#pragma once
// Test-only oracles. Nothing here calls the code under test's gradient path.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>

namespace fallguard::testing {

/// Central finite differences of a scalar function of a parameter vector.
inline Eigen::VectorXd finite_difference(const std::function<double(const Eigen::VectorXd&)>& f, Eigen::VectorXd x,
                                         double eps = 1e-5) {
    Eigen::VectorXd g(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + eps;
        const double fp = f(x);
        x[i] = orig - eps;
        const double fm = f(x);
        x[i] = orig;
        g[i] = (fp - fm) / (2.0 * eps);
    }
    return g;
}

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor).
inline double max_relative_error(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double floor = 1e-6) {
    double worst = 0.0;
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
        worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
    }
    return worst;
}

/// Adaptive Simpson quadrature of f on [a, b].
inline double integrate_simpson(const std::function<double(double)>& f, double a, double b, double tol = 1e-12,
                                int depth = 50) {
    const std::function<double(double, double, double, double, double, double, int)> rec =
        [&](double lo, double hi, double flo, double fmid, double fhi, double whole, int d) {
            const double mid = 0.5 * (lo + hi), lm = 0.5 * (lo + mid), rm = 0.5 * (mid + hi);
            const double flm = f(lm), frm = f(rm);
            const double left = (mid - lo) / 6.0 * (flo + 4.0 * flm + fmid);
            const double right = (hi - mid) / 6.0 * (fmid + 4.0 * frm + fhi);
            if (d <= 0 || std::abs(left + right - whole) <= 15.0 * tol)
                return left + right + (left + right - whole) / 15.0;
            return rec(lo, mid, flo, flm, fmid, left, d - 1) + rec(mid, hi, fmid, frm, fhi, right, d - 1);
        };
    const double fa = f(a), fb = f(b), fm = f(0.5 * (a + b));
    return rec(a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4.0 * fm + fb), depth);
}

/// Time for a passive pendulum with theta'' = k sin(theta) to go from (theta0, omega0)
/// to pi/2, from energy conservation: t = int dtheta / omega(theta). The substitution
/// theta = theta0 + u^2 removes the endpoint singularity when omega0 = 0.
inline double fall_time_by_quadrature(double k, double theta0, double omega0) {
    const double half_pi = std::acos(0.0);
    auto omega = [&](double th) { return std::sqrt(omega0 * omega0 + 2.0 * k * (std::cos(theta0) - std::cos(th))); };
    auto integrand = [&](double u) {
        if (u == 0.0) return omega0 > 0.0 ? 0.0 : 2.0 / std::sqrt(2.0 * k * std::sin(theta0));
        return 2.0 * u / omega(theta0 + u * u);
    };
    return integrate_simpson(integrand, 0.0, std::sqrt(half_pi - theta0));
}

}  // namespace fallguard::testing
