#pragma once

// Closed-form Wasserstein-2 distances between Gaussians and the radial
// projection onto a W2 ball around N(0, I).

#include "robicl/common.hpp"
#include "robicl/task_model.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>

namespace robicl {

/// W2 between isotropic Gaussians: sqrt(|mu1 - mu2|^2 + d (s1 - s2)^2).
inline double w2_isotropic(const GaussianTaskDistribution& p, const GaussianTaskDistribution& q) {
    if (p.dim() != q.dim()) {
        throw InvalidArgument("w2_isotropic: dimension mismatch");
    }
    const double ds = p.std() - q.std();
    return std::sqrt((p.mean() - q.mean()).squaredNorm() + p.dim() * ds * ds);
}

namespace detail {

// PSD square root through a symmetric eigendecomposition; eigenvalues are
// clamped at zero after the PSD check.
inline Matrix psd_sqrt(const Matrix& s, double tol) {
    Eigen::SelfAdjointEigenSolver<Matrix> eig(s);
    if (eig.info() != Eigen::Success) {
        throw NumericalError("psd_sqrt: eigendecomposition failed");
    }
    const double scale = std::max(1.0, eig.eigenvalues().cwiseAbs().maxCoeff());
    if (eig.eigenvalues().minCoeff() < -tol * scale) {
        throw InvalidArgument("covariance is not positive semidefinite");
    }
    const Vector root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return eig.eigenvectors() * root.asDiagonal() * eig.eigenvectors().transpose();
}

} // namespace detail

/// W2 between N(mu1, cov1) and N(mu2, cov2) for general PSD covariances.
inline double w2_general(const Vector& mu1, const Matrix& cov1, const Vector& mu2, const Matrix& cov2) {
    const auto d = mu1.size();
    if (mu2.size() != d || cov1.rows() != d || cov1.cols() != d || cov2.rows() != d || cov2.cols() != d) {
        throw InvalidArgument("w2_general: dimension mismatch");
    }
    constexpr double tol = 1e-10;
    const double asym = std::max((cov1 - cov1.transpose()).cwiseAbs().maxCoeff(),
                                 (cov2 - cov2.transpose()).cwiseAbs().maxCoeff());
    if (asym > tol * std::max(1.0, std::max(cov1.cwiseAbs().maxCoeff(), cov2.cwiseAbs().maxCoeff()))) {
        throw InvalidArgument("w2_general: covariance is not symmetric");
    }
    const Matrix root1 = detail::psd_sqrt(cov1, tol);
    detail::psd_sqrt(cov2, tol);  // PSD check only
    Matrix inner = root1 * cov2 * root1;
    inner = 0.5 * (inner + inner.transpose());
    const Matrix cross = detail::psd_sqrt(inner, tol);
    const double tr = (cov1 + cov2 - 2.0 * cross).trace();
    return std::sqrt(std::max(0.0, (mu1 - mu2).squaredNorm() + tr));
}

struct WassersteinBall {
    GaussianTaskDistribution center;
    double radius;

    WassersteinBall(GaussianTaskDistribution c, double r) : center(std::move(c)), radius(r) {
        require(std::isfinite(r) && r >= 0.0, "ball radius must be nonnegative");
    }

    bool contains(const GaussianTaskDistribution& q, double tolerance = 1e-9) const {
        return w2_isotropic(q, center) <= radius + tolerance;
    }
};

/// Smallest standard deviation the projection may return.
inline constexpr double kSigmaFloor = 1e-6;

struct ProjectionResult {
    Vector mu;
    double sigma = 1.0;
    bool scaled = false;       // point was outside the ball
    bool sigma_clamped = false; // sigma hit kSigmaFloor
};

/// Radial scaling onto the W2 ball around N(0, I): when
/// w = sqrt(|mu|^2 + d (sigma - 1)^2) exceeds rho, mu and (sigma - 1) are both
/// multiplied by rho / w. This is not the exact metric projection.
inline ProjectionResult project_to_ball(const Vector& mu, double sigma, const WassersteinBall& ball) {
    const int d = static_cast<int>(mu.size());
    require(ball.center.dim() == d, "project_to_ball: dimension mismatch");
    require(ball.center.mean().isZero(0.0) && ball.center.std() == 1.0,
            "project_to_ball: ball must be centered at N(0, I)");
    require(std::isfinite(sigma) && sigma > 0.0, "project_to_ball: sigma must be positive");

    ProjectionResult out{mu, sigma, false, false};
    const double w = std::sqrt(mu.squaredNorm() + d * (sigma - 1.0) * (sigma - 1.0));
    if (w > ball.radius) {
        const double f = ball.radius / w;
        out.mu = mu * f;
        out.sigma = 1.0 + (sigma - 1.0) * f;
        out.scaled = true;
    }
    if (out.sigma < kSigmaFloor) {
        out.sigma = kSigmaFloor;
        out.sigma_clamped = true;
    }
    return out;
}

} // namespace robicl
