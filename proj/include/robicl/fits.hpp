#pragma once

// Least-squares fits behind the scaling-law checks, the fitted form of the
// worst-case risk bound, and the two searches (safe radius, sample tax).

#include "robicl/common.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace robicl {

struct ScalingFitReport {
    std::vector<std::string> names;  // one per coefficient
    Vector coefficients;
    double r_squared = 0.0;
    Vector residuals;
    std::vector<double> x;
    std::vector<double> y;
    std::vector<double> y_se;

    double coefficient(const std::string& name) const {
        for (std::size_t i = 0; i < names.size(); ++i) {
            if (names[i] == name) {
                return coefficients[static_cast<Eigen::Index>(i)];
            }
        }
        throw InvalidArgument("no coefficient named " + name);
    }
};

/// 1 - SS_res / SS_tot, with SS_tot taken about the mean of y. A constant
/// response that is fitted exactly scores 1.
inline double r_squared(const Eigen::Ref<const Vector>& y, const Eigen::Ref<const Vector>& fitted) {
    require(y.size() == fitted.size() && y.size() > 0, "r_squared: size mismatch");
    const double ss_res = (y - fitted).squaredNorm();
    const double ss_tot = (y.array() - y.mean()).square().sum();
    if (ss_tot == 0.0) {
        return ss_res == 0.0 ? 1.0 : 0.0;
    }
    return 1.0 - ss_res / ss_tot;
}

/// Unconstrained least squares; throws on a rank-deficient design.
inline Vector least_squares(const Matrix& features, const Vector& y) {
    require(features.rows() == y.size(), "least_squares: size mismatch");
    Eigen::ColPivHouseholderQR<Matrix> qr(features);
    qr.setThreshold(1e-12);
    if (features.rows() < features.cols() || qr.rank() < features.cols()) {
        throw InvalidArgument("rank-deficient design");
    }
    return qr.solve(y);
}

/// Least squares with a nonnegativity constraint on the flagged columns.
/// Exact: enumerates which constrained columns are active, which is cheap for
/// the handful of features used here.
inline Vector nonnegative_least_squares(const Matrix& features, const Vector& y,
                                        const std::vector<bool>& nonnegative) {
    const auto p = features.cols();
    require(static_cast<Eigen::Index>(nonnegative.size()) == p, "nnls: constraint mask size mismatch");
    require(p <= 16, "nnls: too many columns for exhaustive active sets");
    std::vector<Eigen::Index> constrained;
    for (Eigen::Index j = 0; j < p; ++j) {
        if (nonnegative[static_cast<std::size_t>(j)]) {
            constrained.push_back(j);
        }
    }
    Vector best = Vector::Zero(p);
    double best_res = std::numeric_limits<double>::infinity();
    const std::size_t subsets = std::size_t{1} << constrained.size();
    for (std::size_t mask = 0; mask < subsets; ++mask) {
        std::vector<Eigen::Index> cols;
        for (Eigen::Index j = 0; j < p; ++j) {
            if (!nonnegative[static_cast<std::size_t>(j)]) {
                cols.push_back(j);
            }
        }
        for (std::size_t k = 0; k < constrained.size(); ++k) {
            if (mask & (std::size_t{1} << k)) {
                cols.push_back(constrained[k]);
            }
        }
        Vector coef = Vector::Zero(p);
        if (!cols.empty()) {
            Matrix sub(features.rows(), static_cast<Eigen::Index>(cols.size()));
            for (std::size_t c = 0; c < cols.size(); ++c) {
                sub.col(static_cast<Eigen::Index>(c)) = features.col(cols[c]);
            }
            Eigen::ColPivHouseholderQR<Matrix> qr(sub);
            qr.setThreshold(1e-12);
            if (qr.rank() < sub.cols()) {
                continue;
            }
            const Vector sol = qr.solve(y);
            bool feasible = true;
            for (std::size_t c = 0; c < cols.size(); ++c) {
                coef[cols[c]] = sol[static_cast<Eigen::Index>(c)];
                if (nonnegative[static_cast<std::size_t>(cols[c])] && sol[static_cast<Eigen::Index>(c)] < 0.0) {
                    feasible = false;
                }
            }
            if (!feasible) {
                continue;
            }
        }
        const double res = (features * coef - y).squaredNorm();
        if (res < best_res) {
            best_res = res;
            best = coef;
        }
    }
    return best;
}

namespace detail {

inline ScalingFitReport make_report(std::vector<std::string> names, const Matrix& features, Vector coef,
                                    std::vector<double> x, std::vector<double> y, std::vector<double> se) {
    const Vector yv = Eigen::Map<const Vector>(y.data(), static_cast<Eigen::Index>(y.size()));
    const Vector fitted = features * coef;
    ScalingFitReport r;
    r.names = std::move(names);
    r.coefficients = std::move(coef);
    r.residuals = yv - fitted;
    r.r_squared = r_squared(yv, fitted);
    r.x = std::move(x);
    r.y = std::move(y);
    r.y_se = se.empty() ? std::vector<double>(r.y.size(), 0.0) : std::move(se);
    return r;
}

inline void require_distinct(const std::vector<double>& x, const char* what) {
    std::set<double> uniq(x.begin(), x.end());
    if (uniq.size() != x.size()) {
        throw InvalidArgument(std::string(what) + ": x values must be distinct");
    }
}

} // namespace detail

/// Fits delta_risk = a rho + b rho^2 (no intercept).
inline ScalingFitReport fit_risk_curve(const std::vector<double>& rho, const std::vector<double>& delta_risk,
                                       const std::vector<double>& se = {}) {
    require(rho.size() == delta_risk.size(), "fit_risk_curve: size mismatch");
    if (rho.size() < 4) {
        throw InvalidArgument("fit_risk_curve: need at least 4 points (got " + std::to_string(rho.size()) + ")");
    }
    detail::require_distinct(rho, "fit_risk_curve");
    Matrix f(static_cast<Eigen::Index>(rho.size()), 2);
    Vector y(static_cast<Eigen::Index>(rho.size()));
    for (std::size_t i = 0; i < rho.size(); ++i) {
        f(static_cast<Eigen::Index>(i), 0) = rho[i];
        f(static_cast<Eigen::Index>(i), 1) = rho[i] * rho[i];
        y[static_cast<Eigen::Index>(i)] = delta_risk[i];
    }
    return detail::make_report({"a", "b"}, f, least_squares(f, y), rho, delta_risk, se);
}

/// Fits y = intercept + slope x.
inline ScalingFitReport fit_line(const std::vector<double>& x, const std::vector<double>& y,
                                 const std::vector<double>& se = {}) {
    require(x.size() == y.size(), "fit_line: size mismatch");
    if (x.size() < 2) {
        throw InvalidArgument("fit_line: need at least 2 points");
    }
    Matrix f(static_cast<Eigen::Index>(x.size()), 2);
    Vector yv(static_cast<Eigen::Index>(x.size()));
    for (std::size_t i = 0; i < x.size(); ++i) {
        f(static_cast<Eigen::Index>(i), 0) = 1.0;
        f(static_cast<Eigen::Index>(i), 1) = x[i];
        yv[static_cast<Eigen::Index>(i)] = y[i];
    }
    return detail::make_report({"intercept", "slope"}, f, least_squares(f, yv), x, y, se);
}

/// Fits y = slope x. R^2 is still measured about the mean of y.
inline ScalingFitReport fit_through_origin(const std::vector<double>& x, const std::vector<double>& y,
                                           const std::vector<double>& se = {}) {
    require(x.size() == y.size(), "fit_through_origin: size mismatch");
    if (x.size() < 2) {
        throw InvalidArgument("fit_through_origin: need at least 2 points");
    }
    Matrix f(static_cast<Eigen::Index>(x.size()), 1);
    Vector yv(static_cast<Eigen::Index>(x.size()));
    for (std::size_t i = 0; i < x.size(); ++i) {
        f(static_cast<Eigen::Index>(i), 0) = x[i];
        yv[static_cast<Eigen::Index>(i)] = y[i];
    }
    return detail::make_report({"slope"}, f, least_squares(f, yv), x, y, se);
}

/// nominal + c1 rho sqrt(d/m) + c2 rho^2 / sqrt(N), with c1, c2 fitted from
/// measured worst-case risks. Descriptive only: the constants have no closed form.
struct BoundForm {
    double nominal_risk = 0.0;
    double c1 = 0.0;
    double c2 = 0.0;
    int d = 1;
    int m = 1;
    int n = 1;

    double evaluate(double rho) const {
        return nominal_risk + c1 * rho * std::sqrt(double(d) / double(m)) + c2 * rho * rho / std::sqrt(double(n));
    }
};

inline double evaluate_bound(const BoundForm& bf, double rho) { return bf.evaluate(rho); }

struct BoundFit {
    BoundForm bound;
    bool covers_all = false;  // bound >= risk - 2 se at every fitted point
    double worst_shortfall = 0.0;
};

/// Nonnegative fit of c1, c2 with a free intercept.
inline BoundFit fit_bound(const std::vector<double>& rho, const std::vector<double>& risk,
                          const std::vector<double>& se, int d, int m, int n) {
    require(rho.size() == risk.size() && rho.size() == se.size(), "fit_bound: size mismatch");
    require(rho.size() >= 3, "fit_bound: need at least 3 points");
    require(d >= 1 && m >= 1 && n >= 1, "fit_bound: d, m, N must be positive");
    const auto k = static_cast<Eigen::Index>(rho.size());
    Matrix f(k, 3);
    Vector y(k);
    for (Eigen::Index i = 0; i < k; ++i) {
        const double r = rho[static_cast<std::size_t>(i)];
        f(i, 0) = 1.0;
        f(i, 1) = r * std::sqrt(double(d) / double(m));
        f(i, 2) = r * r / std::sqrt(double(n));
        y[i] = risk[static_cast<std::size_t>(i)];
    }
    const Vector c = nonnegative_least_squares(f, y, {false, true, true});
    BoundFit out;
    out.bound = BoundForm{c[0], c[1], c[2], d, m, n};
    out.covers_all = true;
    for (std::size_t i = 0; i < rho.size(); ++i) {
        const double shortfall = (risk[i] - 2.0 * se[i]) - out.bound.evaluate(rho[i]);
        out.worst_shortfall = std::max(out.worst_shortfall, shortfall);
        if (shortfall > 0.0) {
            out.covers_all = false;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Safe radius search

struct IncrementProbe {
    double rho = 0.0;
    double value = 0.0;
    double std_error = 0.0;
    int sample_multiplier = 1;
};

/// Risk increment at a radius; the multiplier scales the Monte Carlo budget.
using IncrementFn = std::function<IncrementProbe(double rho, int sample_multiplier)>;

struct RhoMaxOptions {
    double lo = 0.0;
    double hi = 2.0;
    double tol = 0.02;
    int max_widen = 0;  // doublings of hi allowed when the increment never exceeds epsilon
};

struct RhoMaxResult {
    double rho_max = 0.0;
    bool binding = true;  // false: increment never exceeded epsilon on the interval
    std::vector<IncrementProbe> probes;
    int reevaluations = 0;
};

/// Binary search for the largest radius whose risk increment stays <= epsilon.
/// A probe that undercuts a smaller radius (or overshoots a larger one) by more
/// than 2 standard errors is re-evaluated once with 4x samples.
inline RhoMaxResult find_rho_max(double epsilon, const IncrementFn& increment, const RhoMaxOptions& opt = {}) {
    require(opt.hi > opt.lo && opt.lo >= 0.0, "find_rho_max: invalid interval");
    require(opt.tol > 0.0, "find_rho_max: tolerance must be positive");
    RhoMaxResult res;

    auto probe = [&](double rho) {
        IncrementProbe p = increment(rho, 1);
        p.rho = rho;
        bool violates = false;
        for (const auto& q : res.probes) {
            const double band = 2.0 * std::hypot(p.std_error, q.std_error);
            if ((q.rho < rho && p.value < q.value - band) || (q.rho > rho && p.value > q.value + band)) {
                violates = true;
                break;
            }
        }
        if (violates) {
            p = increment(rho, 4);
            p.rho = rho;
            p.sample_multiplier = 4;
            ++res.reevaluations;
        }
        res.probes.push_back(p);
        return p;
    };

    double lo = opt.lo;
    double hi = opt.hi;
    const IncrementProbe left = probe(lo);
    if (left.value > epsilon) {
        std::ostringstream os;
        os << "find_rho_max: increment " << left.value << " at the left endpoint already exceeds epsilon " << epsilon;
        throw InvalidArgument(os.str());
    }
    IncrementProbe right = probe(hi);
    for (int w = 0; right.value <= epsilon && w < opt.max_widen; ++w) {
        lo = hi;
        hi *= 2.0;
        right = probe(hi);
    }
    if (right.value <= epsilon) {
        res.rho_max = hi;
        res.binding = false;
        return res;
    }
    while (hi - lo > opt.tol) {
        const double mid = 0.5 * (lo + hi);
        if (probe(mid).value <= epsilon) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    res.rho_max = 0.5 * (lo + hi);
    return res;
}

// ---------------------------------------------------------------------------
// Sample-complexity search

class SearchFailure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct SampleTaxResult {
    int n_rho = 0;
    std::vector<std::pair<int, RiskEstimate>> curve;  // worst-case risk per scanned N
};

/// Smallest N in [n_min, n_max] whose worst-case risk is <= target + one
/// standard error of that risk estimate.
inline SampleTaxResult find_sample_tax(double target, int n_min, int n_max,
                                       const std::function<RiskEstimate(int n)>& worst_risk) {
    require(n_min >= 1 && n_max >= n_min, "find_sample_tax: invalid N range");
    SampleTaxResult res;
    for (int n = n_min; n <= n_max; ++n) {
        const RiskEstimate r = worst_risk(n);
        res.curve.emplace_back(n, r);
        if (r.value <= target + r.std_error) {
            res.n_rho = n;
            return res;
        }
    }
    std::ostringstream os;
    os << "find_sample_tax: no N in [" << n_min << ", " << n_max << "] reaches target " << target << "; curve:";
    for (const auto& [n, r] : res.curve) {
        os << " N=" << n << ":" << r.value;
    }
    throw SearchFailure(os.str());
}

} // namespace robicl
