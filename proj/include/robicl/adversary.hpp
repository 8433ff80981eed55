#pragma once

// Projected gradient ascent over isotropic Gaussian task distributions
// N(mu, sigma^2 I) inside a W2 ball around N(0, I).

#include "robicl/common.hpp"
#include "robicl/linear_attention.hpp"
#include "robicl/ridge.hpp"
#include "robicl/rng.hpp"
#include "robicl/task_model.hpp"
#include "robicl/wasserstein.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <type_traits>
#include <vector>

namespace robicl {

enum class GradientMode {
    automatic,         // semi-analytic for ridge, reparameterization otherwise
    semi_analytic,     // ridge only
    reparameterization,
};

struct PgaConfig {
    double rho = 0.0;
    int iterations = 200;
    double step_eta = 0.1;
    double decay_factor = 0.95;
    int decay_every = 50;
    int tasks_per_step = 256;
    int risk_eval_samples = 20000;
    int crn_period = 10;  // iterations sharing one batch of task/context draws
    double fd_step = 1e-4;
    GradientMode mode = GradientMode::automatic;

    void validate() const {
        require(std::isfinite(rho) && rho >= 0.0, "pga: rho must be nonnegative");
        require(iterations >= 1, "pga: iterations must be >= 1");
        require(step_eta > 0.0, "pga: step_eta must be positive");
        require(decay_factor > 0.0 && decay_factor <= 1.0, "pga: decay_factor must lie in (0, 1]");
        require(decay_every >= 1 && crn_period >= 1, "pga: schedule periods must be >= 1");
        require(tasks_per_step >= 1 && risk_eval_samples >= 2, "pga: sample counts must be positive");
        require(fd_step > 0.0, "pga: fd_step must be positive");
    }

    /// Step size used on iteration t (0-based).
    double step_at(int t) const { return step_eta * std::pow(decay_factor, static_cast<double>(t / decay_every)); }
};

struct PgaTraceRow {
    int iteration = 0;
    double mu_norm = 0.0;
    double sigma = 1.0;
    double step = 0.0;
    double risk = 0.0;
    double w2 = 0.0;
};

struct AdversaryResult {
    GaussianTaskDistribution q_adv = GaussianTaskDistribution::centered(1, 1.0);
    std::vector<double> risk_trace;  // cheap risk estimate per iterate, iterate 0 is the center
    std::vector<PgaTraceRow> trace;
    double final_w2 = 0.0;
    bool converged = false;
    RiskEstimate nominal;    // risk under N(0, I)
    RiskEstimate worst;      // risk under q_adv, same samples as nominal
    RiskEstimate increment;  // paired worst - nominal
    int sigma_clamps = 0;
};

class PgaAborted : public NumericalError {
public:
    PgaAborted(const std::string& what, std::vector<PgaTraceRow> rows) : NumericalError(what), trace(std::move(rows)) {}
    std::vector<PgaTraceRow> trace;
};

struct RiskGradient {
    Vector grad_mu;
    double grad_sigma = 0.0;
    RiskEstimate risk;
};

/// A standard normal task direction z (beta = mu + sigma z) plus the context draws.
struct TaskSample {
    Vector z;
    ContextDraw draw;
};

inline std::vector<TaskSample> sample_tasks(int d, int n, int count, const SeedTree& seeds) {
    require(count >= 1, "empty task batch");
    auto zs = seeds.stream("tasks");
    auto streams = ContextStreams::from(seeds);
    std::vector<TaskSample> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        Vector z = standard_normal_vector(d, zs);
        out.push_back({std::move(z), sample_context_draw(d, n, streams)});
    }
    return out;
}

/// Exact gradients of semi_analytic_risk with respect to mu and sigma_q.
inline RiskGradient risk_gradient(const Vector& mu, double sigma_q, const DesignBatch& batch, const NoiseConfig& noise) {
    require(mu.size() == batch.dim(), "risk_gradient: dimension mismatch");
    const double lam2 = batch.lambda() * batch.lambda();
    double mean_trace = 0.0;
    for (const auto& t : batch.terms()) {
        mean_trace += t.trace_a_sq;
    }
    mean_trace /= static_cast<double>(batch.size());
    RiskGradient g;
    g.grad_mu = 2.0 * lam2 * (batch.mean_a_sq() * mu);
    g.grad_sigma = 2.0 * lam2 * sigma_q * mean_trace;
    g.risk = semi_analytic_risk(mu, sigma_q, batch, noise);
    return g;
}

namespace detail {

template <class Predictor>
double squared_error(const Predictor& p, const ContextSet& ctx) {
    const double e = p.predict(ctx) - ctx.y_test;
    return e * e;
}

// d/dbeta of the squared error. Ridge is differentiated in closed form:
// e = x_t^T A X^T (X beta + eps) - x_t^T beta - eps_t, so
// de/dbeta = X^T X A x_t - x_t.
inline Vector error_gradient(const RidgePredictor& p, const ContextSet& ctx, double, double& sq_err) {
    const int d = ctx.dim();
    Matrix shifted = ctx.X.transpose() * ctx.X;
    const Matrix gram = shifted;
    shifted.diagonal().array() += p.lambda();
    Eigen::LLT<Matrix> llt(shifted);
    if (llt.info() != Eigen::Success) {
        throw NumericalError("ill-posed, supply lambda > 0");
    }
    const Vector ax = llt.solve(ctx.x_test);
    const double e = ax.dot(ctx.X.transpose() * ctx.y) - ctx.y_test;
    sq_err = e * e;
    require(ax.size() == d, "error_gradient: dimension mismatch");
    return 2.0 * e * (gram * ax - ctx.x_test);
}

// Central differences over beta. Shifting beta by h e_j moves y by h X e_j and
// y_test by h x_test[j].
template <class Predictor>
Vector error_gradient(const Predictor& p, const ContextSet& ctx, double h, double& sq_err) {
    sq_err = squared_error(p, ctx);
    const int d = ctx.dim();
    Vector g(d);
    ContextSet shifted = ctx;
    for (int j = 0; j < d; ++j) {
        shifted.y = ctx.y + h * ctx.X.col(j);
        shifted.y_test = ctx.y_test + h * ctx.x_test[j];
        const double plus = squared_error(p, shifted);
        shifted.y = ctx.y - h * ctx.X.col(j);
        shifted.y_test = ctx.y_test - h * ctx.x_test[j];
        const double minus = squared_error(p, shifted);
        g[j] = (plus - minus) / (2.0 * h);
    }
    return g;
}

} // namespace detail

/// Reparameterization estimate: beta = mu + sigma_q z, grad_mu = avg g(beta),
/// grad_sigma = avg g(beta).z, with g the beta-gradient of the squared error.
template <class Predictor>
RiskGradient risk_gradient(const Vector& mu, double sigma_q, const Predictor& pred, const NoiseConfig& noise,
                           std::span<const TaskSample> samples, double fd_step = 1e-4) {
    if (samples.empty()) {
        throw InvalidArgument("risk_gradient: empty batch");
    }
    const double sigma = std::sqrt(noise.sigma_sq);
    const auto d = mu.size();
    RiskGradient out;
    out.grad_mu = Vector::Zero(d);
    Vector errs(static_cast<Eigen::Index>(samples.size()));
    Eigen::Index i = 0;
    for (const auto& s : samples) {
        require(s.z.size() == d, "risk_gradient: dimension mismatch");
        const ContextSet ctx = s.draw.realize(mu + sigma_q * s.z, sigma);
        double sq = 0.0;
        const Vector g = detail::error_gradient(pred, ctx, fd_step, sq);
        out.grad_mu += g;
        out.grad_sigma += g.dot(s.z);
        errs[i++] = sq;
    }
    const double inv = 1.0 / static_cast<double>(samples.size());
    out.grad_mu *= inv;
    out.grad_sigma *= inv;
    out.risk = mean_and_stderr(errs);
    return out;
}

/// Paired risk of N(0, I) and N(mu, sigma^2 I) on common samples.
struct PairedRisk {
    RiskEstimate nominal;
    RiskEstimate worst;
    RiskEstimate increment;
};

inline PairedRisk paired_risk(const Vector& mu, double sigma_q, const DesignBatch& batch, const NoiseConfig& noise) {
    const double lam2 = batch.lambda() * batch.lambda();
    const auto k = static_cast<Eigen::Index>(batch.size());
    Vector nom(k), adv(k);
    Eigen::Index i = 0;
    for (const auto& t : batch.terms()) {
        const double base = noise.sigma_sq * t.noise_trace + noise.sigma_sq;
        nom[i] = lam2 * t.trace_a_sq + base;
        adv[i] = lam2 * (mu.dot(t.a_sq * mu) + sigma_q * sigma_q * t.trace_a_sq) + base;
        ++i;
    }
    return {mean_and_stderr(nom), mean_and_stderr(adv), mean_and_stderr(adv - nom)};
}

template <class Predictor>
PairedRisk paired_risk(const Vector& mu, double sigma_q, const Predictor& pred, const NoiseConfig& noise,
                       std::span<const TaskSample> samples) {
    require(!samples.empty(), "paired_risk: empty batch");
    const double sigma = std::sqrt(noise.sigma_sq);
    const auto k = static_cast<Eigen::Index>(samples.size());
    Vector nom(k), adv(k);
    Eigen::Index i = 0;
    for (const auto& s : samples) {
        nom[i] = detail::squared_error(pred, s.draw.realize(s.z, sigma));
        adv[i] = detail::squared_error(pred, s.draw.realize(mu + sigma_q * s.z, sigma));
        ++i;
    }
    return {mean_and_stderr(nom), mean_and_stderr(adv), mean_and_stderr(adv - nom)};
}

/// Design batch used for the final ridge risk evaluation of a pga_search run
/// with these seeds.
inline DesignBatch evaluation_batch(const PgaConfig& config, int n, int d, double lambda, const SeedTree& seeds) {
    auto rng = seeds.stream("pga.eval.designs");
    return DesignBatch::sample(config.risk_eval_samples, n, d, lambda, rng);
}

/// Algorithm: start at (0, 1), ascend, project radially, decay the step, and
/// return the iterate with the highest evaluated risk.
template <class Predictor>
AdversaryResult pga_search(const PgaConfig& config, const GaussianTaskDistribution& nominal, const Predictor& pred,
                           const NoiseConfig& noise, int n, const SeedTree& seeds) {
    config.validate();
    noise.validate();
    require(n >= 1, "empty context");
    const int d = nominal.dim();
    require(pred.dim() == d, "pga: predictor dimension does not match the nominal distribution");
    const WassersteinBall ball(nominal, config.rho);

    constexpr bool is_ridge = std::is_same_v<Predictor, RidgePredictor>;
    bool semi = false;
    if constexpr (is_ridge) {
        semi = config.mode != GradientMode::reparameterization;
    } else {
        require(config.mode != GradientMode::semi_analytic, "pga: semi-analytic mode needs the ridge predictor");
    }

    std::optional<DesignBatch> step_batch;
    if constexpr (is_ridge) {
        if (semi) {
            auto rng = seeds.stream("pga.step.designs");
            step_batch.emplace(DesignBatch::sample(config.tasks_per_step, n, d, pred.lambda(), rng));
        }
    }
    std::vector<TaskSample> crn;
    int crn_block = -1;

    auto evaluate = [&](const Vector& mu, double sigma, int t) -> RiskGradient {
        if constexpr (is_ridge) {
            if (semi) {
                return risk_gradient(mu, sigma, *step_batch, noise);
            }
        }
        const int block = t / config.crn_period;
        if (block != crn_block) {
            crn = sample_tasks(d, n, config.tasks_per_step, seeds.child("pga.crn", {static_cast<std::uint64_t>(block)}));
            crn_block = block;
        }
        return risk_gradient(mu, sigma, pred, noise, std::span<const TaskSample>(crn), config.fd_step);
    };

    AdversaryResult res;
    Vector mu = nominal.mean();
    double sigma = nominal.std();
    Vector best_mu = mu;
    double best_sigma = sigma;
    double best_risk = -std::numeric_limits<double>::infinity();
    std::vector<double> best_so_far;

    auto record = [&](int t, double step, const RiskGradient& g) {
        const double w2 = std::sqrt(mu.squaredNorm() + d * (sigma - 1.0) * (sigma - 1.0));
        res.trace.push_back({t, mu.norm(), sigma, step, g.risk.value, w2});
        res.risk_trace.push_back(g.risk.value);
        if (!std::isfinite(g.risk.value) || !g.grad_mu.allFinite() || !std::isfinite(g.grad_sigma)) {
            std::ostringstream os;
            os << "pga: non-finite risk or gradient at iteration " << t << " (|mu| = " << mu.norm()
               << ", sigma = " << sigma << ")";
            throw PgaAborted(os.str(), res.trace);
        }
        if (g.risk.value > best_risk) {
            best_risk = g.risk.value;
            best_mu = mu;
            best_sigma = sigma;
        }
        best_so_far.push_back(best_risk);
    };

    RiskGradient g = evaluate(mu, sigma, 0);
    record(0, 0.0, g);
    for (int t = 0; t < config.iterations; ++t) {
        const double eta = config.step_at(t);
        Vector next_mu = mu + eta * g.grad_mu;
        double next_sigma = sigma + eta * g.grad_sigma;
        if (!(next_sigma > 0.0)) {
            next_sigma = kSigmaFloor;
            ++res.sigma_clamps;
        }
        const auto p = project_to_ball(next_mu, next_sigma, ball);
        res.sigma_clamps += p.sigma_clamped ? 1 : 0;
        mu = p.mu;
        sigma = p.sigma;
        g = evaluate(mu, sigma, t + 1);
        record(t + 1, eta, g);
    }

    const std::size_t last = best_so_far.size() - 1;
    const std::size_t window = 50;
    const double before = best_so_far[last >= window ? last - window : 0];
    res.converged = (best_so_far[last] - before) <= 0.005 * std::abs(before);

    res.q_adv = GaussianTaskDistribution(best_mu, best_sigma);
    res.final_w2 = w2_isotropic(res.q_adv, nominal);

    PairedRisk pr;
    if constexpr (is_ridge) {
        if (semi) {
            pr = paired_risk(best_mu, best_sigma, evaluation_batch(config, n, d, pred.lambda(), seeds), noise);
        }
    }
    if (!semi) {
        const auto samples = sample_tasks(d, n, config.risk_eval_samples, seeds.child("pga.eval"));
        pr = paired_risk(best_mu, best_sigma, pred, noise, std::span<const TaskSample>(samples));
    }
    res.nominal = pr.nominal;
    res.worst = pr.worst;
    res.increment = pr.increment;
    if (!std::isfinite(res.worst.value) || !std::isfinite(res.nominal.value)) {
        throw PgaAborted("pga: non-finite final risk", res.trace);
    }
    return res;
}

struct OracleResult {
    double best_risk = 0.0;
    double mu_norm = 0.0;
    double sigma = 1.0;
    bool on_boundary = false;
};

/// Brute-force maximum of the semi-analytic ridge risk over a 200 x 200 grid
/// of (r, s) with r^2 + d (s - 1)^2 <= rho^2, mu = r e_1.
inline OracleResult boundary_grid_oracle(double rho, const RidgePredictor& pred, const NoiseConfig& noise,
                                         const DesignBatch& batch, int grid = 200) {
    require(rho >= 0.0, "oracle: rho must be nonnegative");
    require(pred.lambda() == batch.lambda(), "oracle: predictor and batch lambda differ");
    require(grid >= 2, "oracle: grid must have at least 2 points per axis");
    const int d = batch.dim();
    const double lam2 = batch.lambda() * batch.lambda();
    double mean_trace = 0.0, mean_noise = 0.0;
    for (const auto& t : batch.terms()) {
        mean_trace += t.trace_a_sq;
        mean_noise += t.noise_trace;
    }
    mean_trace /= static_cast<double>(batch.size());
    mean_noise /= static_cast<double>(batch.size());
    const double a11 = batch.mean_a_sq()(0, 0);
    auto risk = [&](double r, double s) {
        return lam2 * (r * r * a11 + s * s * mean_trace) + noise.sigma_sq * mean_noise + noise.sigma_sq;
    };

    OracleResult best{risk(0.0, 1.0), 0.0, 1.0, rho == 0.0};
    if (rho == 0.0) {
        return best;
    }
    const double s_half = rho / std::sqrt(double(d));
    const double s_lo = std::max(kSigmaFloor, 1.0 - s_half);
    const double s_hi = 1.0 + s_half;
    const double tol = 1e-12 * rho * rho;
    for (int i = 0; i < grid; ++i) {
        const double r = rho * i / (grid - 1);
        for (int j = 0; j < grid; ++j) {
            const double s = s_lo + (s_hi - s_lo) * j / (grid - 1);
            const double w2sq = r * r + d * (s - 1.0) * (s - 1.0);
            if (w2sq > rho * rho + tol) {
                continue;
            }
            const double v = risk(r, s);
            if (v > best.best_risk) {
                best = {v, r, s, false};
            }
        }
    }
    const double w = std::sqrt(best.mu_norm * best.mu_norm + d * (best.sigma - 1.0) * (best.sigma - 1.0));
    // within one grid cell of the sphere
    const double cell = std::max(rho / (grid - 1), std::sqrt(double(d)) * (s_hi - s_lo) / (grid - 1));
    best.on_boundary = w >= rho - cell;
    return best;
}

inline void write_trace_csv(std::ostream& os, const std::vector<PgaTraceRow>& rows) {
    os << "iteration,mu_norm,sigma,step,risk,w2\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.iteration, r.mu_norm, r.sigma, r.step,
                      r.risk, r.w2);
        os << buf;
    }
}

} // namespace robicl
