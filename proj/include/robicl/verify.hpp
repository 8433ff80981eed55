#pragma once

// Self-checks shared by the `verify` subcommand and the acceptance binary.
// Each check draws its own randomness from the seed it is given.

#include "robicl/adversary.hpp"
#include "robicl/linear_attention.hpp"
#include "robicl/ridge.hpp"
#include "robicl/wasserstein.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

namespace robicl {

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;
};

namespace detail {

inline Matrix gaussian_matrix(int rows, int cols, RandomStream& rng) {
    Matrix x(rows, cols);
    for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) {
            x(i, j) = rng.normal();
        }
    }
    return x;
}

inline ContextSet gaussian_context(int n, int d, double sigma_sq, RandomStream& rng) {
    const Vector beta = standard_normal_vector(d, rng);
    ContextSet ctx;
    ctx.X = gaussian_matrix(n, d, rng);
    ctx.y = ctx.X * beta + std::sqrt(sigma_sq) * standard_normal_vector(n, rng);
    ctx.x_test = standard_normal_vector(d, rng);
    ctx.y_test = ctx.x_test.dot(beta) + std::sqrt(sigma_sq) * rng.normal();
    return ctx;
}

} // namespace detail

/// Worked W2 examples plus agreement of the general and isotropic formulas.
inline CheckResult check_w2_identities(std::uint64_t seed, int pairs = 100) {
    CheckResult r{"w2_identities", true, ""};
    std::ostringstream os;
    const auto p = GaussianTaskDistribution::centered(20, 1.0);
    Vector e1 = Vector::Zero(20);
    e1[0] = 1.0;
    const double ex1 = w2_isotropic(p, p);
    const double ex2 = w2_isotropic(p, GaussianTaskDistribution(e1, 1.0));
    const double ex3 = w2_isotropic(GaussianTaskDistribution::centered(4, 1.0), GaussianTaskDistribution::centered(4, 2.0));
    if (std::abs(ex1) > 1e-10 || std::abs(ex2 - 1.0) > 1e-10 || std::abs(ex3 - 2.0) > 1e-10) {
        r.passed = false;
        os << "worked examples gave " << ex1 << ", " << ex2 << ", " << ex3 << "; ";
    }
    RandomStream rng(seed);
    double worst = 0.0;
    for (int t = 0; t < pairs; ++t) {
        const int d = 1 + static_cast<int>(rng.index(10));
        const GaussianTaskDistribution a(standard_normal_vector(d, rng), 0.1 + 2.0 * rng.uniform());
        const GaussianTaskDistribution b(standard_normal_vector(d, rng), 0.1 + 2.0 * rng.uniform());
        const Matrix id = Matrix::Identity(d, d);
        const double iso = w2_isotropic(a, b);
        const double gen = w2_general(a.mean(), a.std() * a.std() * id, b.mean(), b.std() * b.std() * id);
        worst = std::max(worst, std::abs(gen - iso) / std::max(iso, 1e-300));
    }
    if (worst > 1e-10) {
        r.passed = false;
    }
    os << "max relative general/isotropic gap " << worst << " over " << pairs << " pairs";
    r.detail = os.str();
    return r;
}

/// Radial projection: lands on the sphere and is idempotent.
inline CheckResult check_projection(std::uint64_t seed, int points = 100) {
    CheckResult r{"projection", true, ""};
    RandomStream rng(seed);
    double worst_sphere = 0.0, worst_idem = 0.0;
    int done = 0;
    while (done < points) {
        const int d = 1 + static_cast<int>(rng.index(20));
        const double rho = 0.05 + 2.0 * rng.uniform();
        const WassersteinBall ball(GaussianTaskDistribution::centered(d, 1.0), rho);
        Vector mu = standard_normal_vector(d, rng);
        const double sigma0 = std::max(0.05, 1.0 + 0.5 * rng.normal());
        const double w = std::sqrt(mu.squaredNorm() + d * (sigma0 - 1.0) * (sigma0 - 1.0));
        const double grow = (rho / w) * (1.5 + rng.uniform());
        mu *= grow;
        const double sigma = 1.0 + (sigma0 - 1.0) * grow;
        if (sigma <= 0.0) {
            continue;
        }
        const auto p1 = project_to_ball(mu, sigma, ball);
        const auto p2 = project_to_ball(p1.mu, p1.sigma, ball);
        const double dist = w2_isotropic(GaussianTaskDistribution(p1.mu, p1.sigma), ball.center);
        worst_sphere = std::max(worst_sphere, std::abs(dist - rho) / rho);
        worst_idem = std::max({worst_idem, (p2.mu - p1.mu).cwiseAbs().maxCoeff(), std::abs(p2.sigma - p1.sigma)});
        ++done;
    }
    r.passed = worst_sphere <= 1e-9 && worst_idem <= 1e-12;
    std::ostringstream os;
    os << "max relative |W2 - rho| " << worst_sphere << ", max idempotence gap " << worst_idem;
    r.detail = os.str();
    return r;
}

/// Closed-form ridge vs plain gradient descent on the ridge objective, plus
/// the diagonal identity-design cases.
inline CheckResult check_ridge_closed_form(std::uint64_t seed, int instances = 20) {
    CheckResult r{"ridge_closed_form", true, ""};
    RandomStream rng(seed);
    double worst = 0.0;
    for (int t = 0; t < instances; ++t) {
        const int d = 2 + static_cast<int>(rng.index(8));
        const int n = d + 5 + static_cast<int>(rng.index(40));
        const double lambda = 0.01 + rng.uniform();
        const ContextSet ctx = detail::gaussian_context(n, d, 0.1, rng);
        const Vector closed = ridge_fit(ctx, RidgePredictor(lambda, d));
        const double lip = 2.0 * (ctx.X.squaredNorm() + lambda);
        Vector b = Vector::Zero(d);
        for (int it = 0; it < 5000000; ++it) {
            const Vector g = 2.0 * (ctx.X.transpose() * (ctx.X * b - ctx.y) + lambda * b);
            if (g.norm() < 1e-11) {
                break;
            }
            b -= g / lip;
        }
        worst = std::max(worst, (closed - b).cwiseAbs().maxCoeff());
    }
    double diag = 0.0;
    for (double lambda : {0.0, 0.1, 1.0}) {
        ContextSet ctx;
        ctx.X = Matrix::Identity(5, 5);
        ctx.y = standard_normal_vector(5, rng);
        ctx.x_test = Vector::Ones(5);
        diag = std::max(diag, (ridge_fit(ctx, RidgePredictor(lambda, 5)) - ctx.y / (1.0 + lambda)).cwiseAbs().maxCoeff());
    }
    r.passed = worst <= 1e-6 && diag <= 1e-14;
    std::ostringstream os;
    os << "max |closed - iterative| " << worst << " over " << instances << " instances, diagonal gap " << diag;
    r.detail = os.str();
    return r;
}

/// Analytic transformer gradients vs central differences at step 1e-5.
inline CheckResult check_gradients(std::uint64_t seed, int instances = 10, int d = 3, int n = 4, int m = 4) {
    CheckResult r{"attention_gradients", true, ""};
    RandomStream rng(seed);
    double worst = 0.0;
    for (int t = 0; t < instances; ++t) {
        LinearAttentionModel model(d, 4, m);
        model.initialize(rng, 0.5);
        std::vector<ContextSet> batch;
        for (int b = 0; b < 2; ++b) {
            batch.push_back(detail::gaussian_context(n, d, 0.1, rng));
        }
        Vector grad;
        model.loss_and_gradients(batch, grad);
        const double h = 1e-5;
        for (Eigen::Index i = 0; i < model.parameters().size(); ++i) {
            LinearAttentionModel plus = model, minus = model;
            plus.parameters()[i] += h;
            minus.parameters()[i] -= h;
            const double fd = (plus.loss(batch) - minus.loss(batch)) / (2.0 * h);
            worst = std::max(worst, std::abs(fd - grad[i]) / std::max(1e-3, std::abs(fd) + std::abs(grad[i])));
        }
    }
    r.passed = worst <= 1e-4;
    std::ostringstream os;
    os << "max relative error " << worst << " over " << instances << " instances (d=" << d << ", N=" << n
       << ", m=" << m << ")";
    r.detail = os.str();
    return r;
}

/// Semi-analytic ridge risk vs direct Monte Carlo over task, noise and test
/// point on the same designs.
inline CheckResult check_semi_analytic_vs_mc(std::uint64_t seed, int triples = 10, int samples = 100000) {
    CheckResult r{"semi_analytic_vs_monte_carlo", true, ""};
    RandomStream rng(seed);
    const int d = 5, n = 15;
    double worst_z = 0.0;
    for (int t = 0; t < triples; ++t) {
        const double lambda = 0.02 + 0.5 * rng.uniform();
        const NoiseConfig noise(lambda, 1.0);
        const Vector mu = 0.8 * standard_normal_vector(d, rng);
        const double sq = 0.3 + 1.5 * rng.uniform();
        const auto batch = DesignBatch::sample(64, n, d, lambda, rng);
        const double sa = semi_analytic_risk(mu, sq, batch, noise).value;
        const RidgePredictor ridge(lambda, d);
        const double sigma = std::sqrt(noise.sigma_sq);
        Vector errs(samples);
        for (int s = 0; s < samples; ++s) {
            const Matrix& x = batch.designs()[static_cast<std::size_t>(s) % batch.size()];
            const Vector beta = mu + sq * standard_normal_vector(d, rng);
            ContextSet ctx{x, x * beta + sigma * standard_normal_vector(n, rng), standard_normal_vector(d, rng), 0.0};
            ctx.y_test = ctx.x_test.dot(beta) + sigma * rng.normal();
            const double e = ridge.predict(ctx) - ctx.y_test;
            errs[s] = e * e;
        }
        const auto mc = mean_and_stderr(errs);
        const double z = std::abs(mc.value - sa) / mc.std_error;
        worst_z = std::max(worst_z, z);
    }
    r.passed = worst_z <= 3.0;
    std::ostringstream os;
    os << "max |MC - semi-analytic| = " << worst_z << " standard errors over " << triples << " triples";
    r.detail = os.str();
    return r;
}

/// Singular values of N x d Gaussian designs fall in
/// [0.9 (sqrt N - sqrt d), 1.1 (sqrt N + sqrt d)].
inline CheckResult check_singular_values(std::uint64_t seed, int trials = 100, int n = 1000, int d = 20) {
    CheckResult r{"singular_value_concentration", true, ""};
    RandomStream rng(seed);
    const double lo = 0.9 * (std::sqrt(double(n)) - std::sqrt(double(d)));
    const double hi = 1.1 * (std::sqrt(double(n)) + std::sqrt(double(d)));
    int inside = 0;
    for (int t = 0; t < trials; ++t) {
        const Vector sv = singular_values(detail::gaussian_matrix(n, d, rng));
        inside += (sv.minCoeff() >= lo && sv.maxCoeff() <= hi) ? 1 : 0;
    }
    r.passed = inside >= trials - trials / 100;
    std::ostringstream os;
    os << inside << "/" << trials << " trials inside [" << lo << ", " << hi << "]";
    r.detail = os.str();
    return r;
}

/// Ridge-path PGA against the boundary-grid maximum on the same evaluation designs.
inline CheckResult check_pga_oracle(std::uint64_t seed, const std::vector<double>& rhos, int d = 20, int n = 15,
                                    double lambda = 0.1, int eval_samples = 20000) {
    CheckResult r{"pga_vs_grid_oracle", true, ""};
    const NoiseConfig noise(lambda, 1.0);
    const auto ridge = RidgePredictor::from_noise(noise, d);
    const auto nominal = GaussianTaskDistribution::centered(d, 1.0);
    PgaConfig cfg;
    cfg.risk_eval_samples = eval_samples;
    const SeedTree seeds(seed);
    std::ostringstream os;
    for (double rho : rhos) {
        cfg.rho = rho;
        const auto res = pga_search(cfg, nominal, ridge, noise, n, seeds);
        const auto oracle = boundary_grid_oracle(rho, ridge, noise, evaluation_batch(cfg, n, d, ridge.lambda(), seeds));
        const double gap = (oracle.best_risk - res.worst.value) / oracle.best_risk;
        const bool ok = gap <= 0.02 && res.final_w2 <= 1.01 * rho;
        r.passed = r.passed && ok;
        os << "rho=" << rho << ": pga " << res.worst.value << " oracle " << oracle.best_risk << " gap " << gap
           << " W2 " << res.final_w2 << "; ";
    }
    r.detail = os.str();
    return r;
}

struct EquivalenceReport {
    double relative_mse = 0.0;       // mean (f_tf - f_ridge)^2 / mean (f_ridge - y)^2
    double transformer_mse = 0.0;
    double ridge_mse = 0.0;
};

inline EquivalenceReport ridge_equivalence(const LinearAttentionModel& model, const NoiseConfig& noise, int n,
                                           int prompts, std::uint64_t seed) {
    const int d = model.dim();
    const auto ridge = RidgePredictor::from_noise(noise, d);
    const auto prior = GaussianTaskDistribution::centered(d, std::sqrt(noise.sigma_beta_sq));
    const SeedTree tree(seed);
    auto tasks = tree.stream("equivalence.tasks");
    auto streams = ContextStreams::from(tree.child("equivalence"));
    double gap = 0.0, tf = 0.0, rr = 0.0;
    for (int i = 0; i < prompts; ++i) {
        const ContextSet ctx = sample_context(sample_task(prior, tasks), n, noise, streams);
        const double ft = model.predict(ctx);
        const double fr = ridge.predict(ctx);
        gap += (ft - fr) * (ft - fr);
        tf += (ft - ctx.y_test) * (ft - ctx.y_test);
        rr += (fr - ctx.y_test) * (fr - ctx.y_test);
    }
    return {gap / rr, tf / prompts, rr / prompts};
}

inline CheckResult check_ridge_equivalence(const LinearAttentionModel& model, const NoiseConfig& noise, int n,
                                           std::uint64_t seed, double tolerance = 0.05, int prompts = 1000,
                                           const std::string& cell = "") {
    const auto rep = ridge_equivalence(model, noise, n, prompts, seed);
    CheckResult r{"ridge_equivalence", rep.relative_mse <= tolerance, ""};
    std::ostringstream os;
    if (!cell.empty()) {
        os << cell << ": ";
    }
    os << "relative MSE vs ridge " << rep.relative_mse << " (tolerance " << tolerance << "), transformer MSE "
       << rep.transformer_mse << ", ridge MSE " << rep.ridge_mse << " over " << prompts << " prompts";
    r.detail = os.str();
    return r;
}

} // namespace robicl
