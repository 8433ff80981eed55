#include "robicl/adversary.hpp"

#include <catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

using namespace robicl;
using Catch::Approx;

namespace {

// Same predictor as RidgePredictor, but opaque to the closed-form gradient so
// the finite-difference path is exercised.
struct OpaqueRidge {
    RidgePredictor inner;
    int dim() const { return inner.dim(); }
    double predict(const ContextSet& ctx) const { return inner.predict(ctx); }
};

struct ChunkStats {
    Vector mean;
    Vector se;
};

// Mean and standard error of a vector statistic from independent chunk estimates.
ChunkStats chunk_stats(const std::vector<Vector>& chunks) {
    const auto k = static_cast<double>(chunks.size());
    Vector mean = Vector::Zero(chunks.front().size());
    for (const auto& c : chunks) {
        mean += c;
    }
    mean /= k;
    Vector var = Vector::Zero(mean.size());
    for (const auto& c : chunks) {
        var.array() += (c - mean).array().square();
    }
    var /= (k - 1.0);
    return {mean, (var / k).cwiseSqrt()};
}

Vector pack(const RiskGradient& g) {
    Vector v(g.grad_mu.size() + 1);
    v.head(g.grad_mu.size()) = g.grad_mu;
    v[g.grad_mu.size()] = g.grad_sigma;
    return v;
}

} // namespace

TEST_CASE("semi-analytic gradient vanishes in mu at the center", "[adversary]") {
    RandomStream rng(1);
    const auto batch = DesignBatch::sample(32, 15, 8, 0.1, rng);
    const auto g = risk_gradient(Vector::Zero(8), 1.0, batch, NoiseConfig(0.1, 1.0));
    CHECK(g.grad_mu.cwiseAbs().maxCoeff() == 0.0);
    CHECK(g.grad_sigma > 0.0);
}

TEST_CASE("semi-analytic gradient matches finite differences of the risk", "[adversary]") {
    RandomStream rng(2);
    const int d = 6;
    const NoiseConfig noise(0.1, 1.0);
    const auto batch = DesignBatch::sample(16, 9, d, noise.lambda(), rng);
    const Vector mu = standard_normal_vector(d, rng);
    const double s = 1.3;
    const auto g = risk_gradient(mu, s, batch, noise);
    const double h = 1e-6;
    for (int j = 0; j < d; ++j) {
        Vector e = Vector::Zero(d);
        e[j] = h;
        const double fd =
            (semi_analytic_risk(mu + e, s, batch, noise).value - semi_analytic_risk(mu - e, s, batch, noise).value) /
            (2 * h);
        CHECK(g.grad_mu[j] == Approx(fd).epsilon(1e-6).margin(1e-9));
    }
    const double fd_s =
        (semi_analytic_risk(mu, s + h, batch, noise).value - semi_analytic_risk(mu, s - h, batch, noise).value) /
        (2 * h);
    CHECK(g.grad_sigma == Approx(fd_s).epsilon(1e-6));
}

TEST_CASE("semi-analytic and reparameterization gradients agree", "[adversary][montecarlo]") {
    const int d = 5, n = 12;
    const NoiseConfig noise(0.25, 1.0);
    const RidgePredictor ridge = RidgePredictor::from_noise(noise, d);
    const SeedTree seeds(3);
    RandomStream rng(30);
    for (int trial = 0; trial < 3; ++trial) {
        const Vector mu = 0.8 * standard_normal_vector(d, rng);
        const double s = 0.5 + rng.uniform();
        std::vector<Vector> semi, reparam, fd;
        for (std::uint64_t c = 0; c < 20; ++c) {
            auto drng = seeds.stream("designs", {static_cast<std::uint64_t>(trial), c});
            const auto batch = DesignBatch::sample(500, n, d, noise.lambda(), drng);
            semi.push_back(pack(risk_gradient(mu, s, batch, noise)));
            const auto samples = sample_tasks(d, n, 1000, seeds.child("tasks", {static_cast<std::uint64_t>(trial), c}));
            reparam.push_back(pack(risk_gradient(mu, s, ridge, noise, std::span<const TaskSample>(samples))));
            if (c < 4) {
                const std::span<const TaskSample> few(samples.data(), 50);
                const auto exact = risk_gradient(mu, s, ridge, noise, few);
                const auto numeric = risk_gradient(mu, s, OpaqueRidge{ridge}, noise, few, 1e-4);
                CHECK((pack(exact) - pack(numeric)).cwiseAbs().maxCoeff() <=
                      1e-5 * std::max(1.0, pack(exact).cwiseAbs().maxCoeff()));
            }
        }
        const auto a = chunk_stats(semi);
        const auto b = chunk_stats(reparam);
        for (Eigen::Index j = 0; j < a.mean.size(); ++j) {
            const double band = 3.0 * std::hypot(a.se[j], b.se[j]);
            CHECK(std::abs(a.mean[j] - b.mean[j]) <= band);
        }
    }
}

TEST_CASE("interpolation regime has zero risk and zero gradients", "[adversary]") {
    const int d = 4, n = 10;
    const NoiseConfig noise(0.0, 1.0);
    RandomStream rng(4);
    const auto batch = DesignBatch::sample(16, n, d, 0.0, rng);
    const Vector mu = standard_normal_vector(d, rng);
    const auto g = risk_gradient(mu, 1.4, batch, noise);
    CHECK(g.grad_mu.norm() == 0.0);
    CHECK(g.grad_sigma == 0.0);
    const auto samples = sample_tasks(d, n, 64, SeedTree(5));
    const auto r = risk_gradient(mu, 1.4, RidgePredictor(0.0, d), noise, std::span<const TaskSample>(samples));
    CHECK(r.grad_mu.norm() < 1e-8);
    CHECK(std::abs(r.grad_sigma) < 1e-8);
    CHECK(r.risk.value < 1e-20);
}

TEST_CASE("risk_gradient rejects an empty batch", "[adversary]") {
    CHECK_THROWS_AS(risk_gradient(Vector::Zero(2), 1.0, RidgePredictor(0.1, 2), NoiseConfig{},
                                  std::span<const TaskSample>{}),
                    InvalidArgument);
    CHECK_THROWS_AS(sample_tasks(2, 3, 0, SeedTree(1)), InvalidArgument);
}

TEST_CASE("pga with a zero radius stays at the center", "[adversary][pga]") {
    const int d = 20;
    const NoiseConfig noise(0.1, 1.0);
    PgaConfig cfg;
    cfg.rho = 0.0;
    cfg.iterations = 20;
    cfg.risk_eval_samples = 2000;
    const auto nominal = GaussianTaskDistribution::centered(d, 1.0);
    const auto res = pga_search(cfg, nominal, RidgePredictor::from_noise(noise, d), noise, 15, SeedTree(6));
    CHECK(res.q_adv == nominal);
    CHECK(res.final_w2 == 0.0);
    CHECK(res.worst.value == res.nominal.value);
    CHECK(res.increment.value == 0.0);
}

TEST_CASE("pga on the ridge path matches the boundary-grid oracle", "[adversary][pga]") {
    const int d = 20, n = 15;
    const NoiseConfig noise(0.1, 1.0);
    const auto ridge = RidgePredictor::from_noise(noise, d);
    const auto nominal = GaussianTaskDistribution::centered(d, 1.0);
    PgaConfig cfg;
    cfg.risk_eval_samples = 4000;
    const SeedTree seeds(7);
    double prev_worst = 0.0, prev_se = 0.0;
    for (double rho : {0.5, 1.0, 1.5}) {
        cfg.rho = rho;
        const auto res = pga_search(cfg, nominal, ridge, noise, n, seeds);
        const auto oracle = boundary_grid_oracle(rho, ridge, noise, evaluation_batch(cfg, n, d, ridge.lambda(), seeds));
        CHECK(res.worst.value >= 0.98 * oracle.best_risk);
        CHECK(res.worst.value <= oracle.best_risk + 2.0 * res.worst.std_error + 1e-12);
        CHECK(oracle.on_boundary);
        CHECK(res.final_w2 <= 1.01 * rho);
        for (const auto& row : res.trace) {
            CHECK(row.w2 <= rho * (1.0 + 1e-6));
        }
        CHECK(res.worst.value >= res.nominal.value - res.nominal.std_error);
        CHECK(res.converged);
        CHECK(res.worst.value >= prev_worst - 2.0 * std::hypot(res.worst.std_error, prev_se));
        prev_worst = res.worst.value;
        prev_se = res.worst.std_error;
    }
}

TEST_CASE("boundary-grid oracle is monotone in rho", "[adversary][oracle]") {
    const int d = 10;
    const NoiseConfig noise(0.1, 1.0);
    RandomStream rng(8);
    const auto batch = DesignBatch::sample(200, 15, d, noise.lambda(), rng);
    const auto ridge = RidgePredictor::from_noise(noise, d);
    const auto center = boundary_grid_oracle(0.0, ridge, noise, batch);
    CHECK(center.best_risk == Approx(semi_analytic_risk(Vector::Zero(d), 1.0, batch, noise).value).epsilon(1e-12));
    double prev = center.best_risk;
    for (double rho = 0.1; rho <= 2.0; rho += 0.1) {
        const auto o = boundary_grid_oracle(rho, ridge, noise, batch);
        CHECK(o.best_risk >= prev);
        CHECK(o.on_boundary);
        prev = o.best_risk;
    }
}

TEST_CASE("pga step schedule", "[adversary][pga]") {
    PgaConfig cfg;
    CHECK(cfg.step_at(0) == 0.1);
    CHECK(cfg.step_at(49) == 0.1);
    CHECK(cfg.step_at(50) == Approx(0.095));
    CHECK(cfg.step_at(199) == Approx(0.1 * std::pow(0.95, 3)));
    cfg.decay_factor = 0.0;
    CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
}

TEST_CASE("pga on a trained transformer", "[adversary][pga][train]") {
    const int d = 3, n = 10, m = 8;
    const NoiseConfig noise(0.1, 1.0);
    const auto nominal = GaussianTaskDistribution::centered(d, 1.0);
    TrainConfig tc;
    tc.tasks_total = 2000;
    tc.steps = 1000;
    tc.learning_rate = 3e-3;
    const auto trained = train(tc, nominal, noise, n, m, SeedTree(9));

    PgaConfig cfg;
    cfg.rho = 0.5;
    cfg.iterations = 60;
    cfg.tasks_per_step = 128;
    cfg.risk_eval_samples = 5000;
    const SeedTree seeds(10);
    const auto a = pga_search(cfg, nominal, trained.model, noise, n, seeds);
    const auto b = pga_search(cfg, nominal, trained.model, noise, n, seeds);
    CHECK(a.q_adv == b.q_adv);
    CHECK(a.risk_trace == b.risk_trace);
    CHECK(a.worst.value == b.worst.value);

    CHECK(a.trace.size() == 61u);
    CHECK(a.final_w2 <= 1.01 * cfg.rho);
    for (const auto& row : a.trace) {
        CHECK(row.w2 <= cfg.rho * (1.0 + 1e-6));
    }
    CHECK(a.worst.value >= a.nominal.value - a.nominal.std_error);
    CHECK(a.increment.value > 0.0);

    PgaConfig bad = cfg;
    bad.mode = GradientMode::semi_analytic;
    CHECK_THROWS_AS(pga_search(bad, nominal, trained.model, noise, n, seeds), InvalidArgument);
}

TEST_CASE("trace CSV layout", "[adversary]") {
    std::ostringstream os;
    write_trace_csv(os, {{0, 0.0, 1.0, 0.0, 1.5, 0.0}, {1, 0.25, 1.1, 0.1, 1.75, 0.5}});
    CHECK(os.str() == "iteration,mu_norm,sigma,step,risk,w2\n0,0,1,0,1.5,0\n1,0.25,1.1,0.1,1.75,0.5\n");
}
