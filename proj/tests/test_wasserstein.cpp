#include "robicl/wasserstein.hpp"

#include <catch_amalgamated.hpp>

#include <cmath>

using namespace robicl;
using Catch::Approx;

namespace {

GaussianTaskDistribution random_iso(int d, RandomStream& rng) {
    return GaussianTaskDistribution(standard_normal_vector(d, rng), 0.1 + 2.0 * rng.uniform());
}

} // namespace

TEST_CASE("w2_isotropic worked examples", "[wasserstein]") {
    const auto p = GaussianTaskDistribution::centered(20, 1.0);
    CHECK(w2_isotropic(p, p) == 0.0);

    Vector e1 = Vector::Zero(20);
    e1[0] = 1.0;
    CHECK(std::abs(w2_isotropic(p, GaussianTaskDistribution(e1, 1.0)) - 1.0) < 1e-10);

    const auto a = GaussianTaskDistribution::centered(4, 1.0);
    const auto b = GaussianTaskDistribution::centered(4, 2.0);
    CHECK(std::abs(w2_isotropic(a, b) - 2.0) < 1e-10);

    CHECK_THROWS_AS(w2_isotropic(a, p), InvalidArgument);
}

TEST_CASE("w2_isotropic metric axioms on random triples", "[wasserstein][property]") {
    RandomStream rng(17);
    for (int t = 0; t < 1000; ++t) {
        const int d = 1 + static_cast<int>(rng.index(8));
        const auto p = random_iso(d, rng);
        const auto q = random_iso(d, rng);
        const auto r = random_iso(d, rng);
        const double pq = w2_isotropic(p, q);
        CHECK(pq >= 0.0);
        CHECK(pq == w2_isotropic(q, p));
        CHECK(w2_isotropic(p, p) == 0.0);
        CHECK(pq <= w2_isotropic(p, r) + w2_isotropic(r, q) + 1e-12);
    }
}

TEST_CASE("w2_general closed-form cases", "[wasserstein]") {
    const Matrix id = Matrix::Identity(3, 3);
    CHECK(w2_general(Vector::Zero(3), id, Vector::Zero(3), id) < 1e-12);
    CHECK(std::abs(w2_general(Vector::Zero(3), id, Vector::Zero(3), 4.0 * id) - std::sqrt(3.0)) < 1e-10);
}

TEST_CASE("w2_general agrees with w2_isotropic for scalar covariances", "[wasserstein][property]") {
    RandomStream rng(5);
    for (int t = 0; t < 100; ++t) {
        const int d = 1 + static_cast<int>(rng.index(10));
        const auto p = random_iso(d, rng);
        const auto q = random_iso(d, rng);
        const Matrix id = Matrix::Identity(d, d);
        const double gen = w2_general(p.mean(), p.std() * p.std() * id, q.mean(), q.std() * q.std() * id);
        const double iso = w2_isotropic(p, q);
        CHECK(std::abs(gen - iso) <= 1e-10 * std::max(1.0, iso));
    }
}

TEST_CASE("w2_general on rotated covariances", "[wasserstein]") {
    // Shared eigenvectors: W2^2 is the sum over eigen-directions of
    // (sqrt(a_i) - sqrt(b_i))^2.
    const double c = std::cos(0.3), s = std::sin(0.3);
    Matrix rot(2, 2);
    rot << c, -s, s, c;
    Matrix d1 = Eigen::Vector2d(1.0, 4.0).asDiagonal();
    Matrix d2 = Eigen::Vector2d(9.0, 1.0).asDiagonal();
    const Matrix c1 = rot * d1 * rot.transpose();
    const Matrix c2 = rot * d2 * rot.transpose();
    const double expected = std::sqrt((1.0 - 3.0) * (1.0 - 3.0) + (2.0 - 1.0) * (2.0 - 1.0));
    CHECK(w2_general(Vector::Zero(2), c1, Vector::Zero(2), c2) == Approx(expected).epsilon(1e-10));

    Matrix general(2, 2);
    general << 2.0, 0.5, 0.5, 1.0;
    CHECK(w2_general(Vector::Zero(2), general, Vector::Zero(2), general) < 1e-7);
}

TEST_CASE("w2_general rejects non-PSD covariance", "[wasserstein]") {
    Matrix bad(2, 2);
    bad << 1.0, 0.0, 0.0, -1.0;
    CHECK_THROWS_AS(w2_general(Vector::Zero(2), bad, Vector::Zero(2), Matrix::Identity(2, 2)), InvalidArgument);
    Matrix asym(2, 2);
    asym << 1.0, 0.5, 0.0, 1.0;
    CHECK_THROWS_AS(w2_general(Vector::Zero(2), asym, Vector::Zero(2), Matrix::Identity(2, 2)), InvalidArgument);
}

TEST_CASE("project_to_ball worked examples", "[wasserstein]") {
    const int d = 4;
    const auto center = GaussianTaskDistribution::centered(d, 1.0);

    SECTION("inside point unchanged") {
        Vector mu = Vector::Constant(d, 0.1);
        const auto r = project_to_ball(mu, 1.05, WassersteinBall(center, 1.0));
        CHECK(!r.scaled);
        CHECK(r.mu == mu);
        CHECK(r.sigma == 1.05);
    }
    SECTION("mean-only shift is halved") {
        Vector mu = Vector::Zero(d);
        mu[2] = 2.0;
        const auto r = project_to_ball(mu, 1.0, WassersteinBall(center, 1.0));
        CHECK(r.scaled);
        CHECK(r.mu[2] == Approx(1.0));
        CHECK(r.sigma == 1.0);
    }
    SECTION("deviation-only shift") {
        const auto r = project_to_ball(Vector::Zero(d), 1.5, WassersteinBall(center, 0.5));
        CHECK(r.sigma == Approx(1.25).epsilon(1e-12));
        CHECK(w2_isotropic(GaussianTaskDistribution(r.mu, r.sigma), center) == Approx(0.5).epsilon(1e-12));
    }
    SECTION("ball must be centered at N(0, I)") {
        const auto off = GaussianTaskDistribution::centered(d, 2.0);
        CHECK_THROWS_AS(project_to_ball(Vector::Zero(d), 1.0, WassersteinBall(off, 1.0)), InvalidArgument);
    }
}

TEST_CASE("project_to_ball clamps a degenerate deviation", "[wasserstein]") {
    const int d = 1;
    // Inside the ball but below the floor.
    const auto center = GaussianTaskDistribution::centered(d, 1.0);
    const auto r = project_to_ball(Vector::Zero(d), 1e-9, WassersteinBall(center, 5.0));
    CHECK(!r.scaled);
    CHECK(r.sigma_clamped);
    CHECK(r.sigma == kSigmaFloor);
}

TEST_CASE("project_to_ball is idempotent and lands on the sphere", "[wasserstein][property]") {
    RandomStream rng(23);
    for (int t = 0; t < 100; ++t) {
        const int d = 1 + static_cast<int>(rng.index(20));
        const double rho = 0.05 + 2.0 * rng.uniform();
        const auto center = GaussianTaskDistribution::centered(d, 1.0);
        const WassersteinBall ball(center, rho);
        // exterior point: scale a random direction out past the sphere
        Vector mu = standard_normal_vector(d, rng);
        double sigma = 1.0 + 0.5 * rng.normal();
        sigma = std::max(sigma, 0.05);
        const double w = std::sqrt(mu.squaredNorm() + d * (sigma - 1.0) * (sigma - 1.0));
        const double grow = (rho / w) * (1.5 + rng.uniform());
        mu *= grow;
        sigma = 1.0 + (sigma - 1.0) * grow;
        if (sigma <= 0.0) {
            continue;
        }
        const auto p1 = project_to_ball(mu, sigma, ball);
        REQUIRE(p1.scaled);
        const double dist = w2_isotropic(GaussianTaskDistribution(p1.mu, p1.sigma), center);
        CHECK(std::abs(dist - rho) <= 1e-9 * rho);
        const auto p2 = project_to_ball(p1.mu, p1.sigma, ball);
        CHECK((p2.mu - p1.mu).cwiseAbs().maxCoeff() <= 1e-12);
        CHECK(std::abs(p2.sigma - p1.sigma) <= 1e-12);
        CHECK(ball.contains(GaussianTaskDistribution(p2.mu, p2.sigma)));
    }
}
