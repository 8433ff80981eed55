#pragma once

// Closed-form ridge oracle, its Jacobian diagnostics, and the exact risk of
// the ridge predictor conditional on a fixed batch of design matrices.

#include "robicl/common.hpp"
#include "robicl/task_model.hpp"

#include <Eigen/Cholesky>
#include <Eigen/SVD>

#include <cmath>
#include <limits>
#include <span>
#include <vector>

namespace robicl {

class RidgePredictor {
public:
    RidgePredictor(double lambda, int d) : lambda_(lambda), d_(d) {
        require(std::isfinite(lambda) && lambda >= 0.0, "ridge lambda must be nonnegative");
        require(d >= 1, "ridge dimension must be >= 1");
    }

    static RidgePredictor from_noise(const NoiseConfig& noise, int d) { return {noise.lambda(), d}; }

    double lambda() const noexcept { return lambda_; }
    int dim() const noexcept { return d_; }

    /// (X^T X + lambda I)^{-1} X^T y via a Cholesky factorization.
    Vector fit(const ContextSet& ctx) const {
        check(ctx);
        Matrix gram = ctx.X.transpose() * ctx.X;
        gram.diagonal().array() += lambda_;
        Eigen::LLT<Matrix> llt(gram);
        if (llt.info() != Eigen::Success || !positive_definite(llt)) {
            throw NumericalError("ill-posed, supply lambda > 0");
        }
        return llt.solve(ctx.X.transpose() * ctx.y);
    }

    double predict(const ContextSet& ctx) const { return ctx.x_test.dot(fit(ctx)); }

private:
    void check(const ContextSet& ctx) const {
        require(ctx.dim() == d_, "ridge: context dimension mismatch");
        require(ctx.y.size() == ctx.X.rows(), "ridge: label count mismatch");
    }

    // LLT happily factors near-singular matrices; reject pivots that vanish
    // relative to the largest one.
    static bool positive_definite(const Eigen::LLT<Matrix>& llt) {
        const Vector diag = llt.matrixL().toDenseMatrix().diagonal();
        const double mx = diag.maxCoeff();
        return diag.minCoeff() > 1e-7 * mx;
    }

    double lambda_;
    int d_;
};

inline Vector ridge_fit(const ContextSet& ctx, const RidgePredictor& pred) { return pred.fit(ctx); }
inline double predict(const ContextSet& ctx, const RidgePredictor& pred) { return pred.predict(ctx); }

struct JacobianReport {
    double spectral_norm = 0.0;    // |J|_2 of the row vector J
    double sigma_min_XtX = 0.0;
    double sigma_max_XtX = 0.0;
    double chain_bound = 0.0;      // |x_test| sigma_max / (sigma_min + lambda)
    double lipschitz_bound = 0.0;  // 1 / (1 + lambda / N)
};

/// J = x_test^T (X^T X + lambda I)^{-1} X^T X, the sensitivity of the ridge
/// prediction to the task vector that generated the labels.
inline JacobianReport jacobian_diagnostics(const ContextSet& ctx, const RidgePredictor& pred) {
    require(ctx.dim() == pred.dim(), "jacobian: context dimension mismatch");
    const Matrix gram = ctx.X.transpose() * ctx.X;
    Eigen::SelfAdjointEigenSolver<Matrix> eig(gram);
    const Vector ev = eig.eigenvalues().cwiseMax(0.0);
    const Matrix& vecs = eig.eigenvectors();
    // (G + lambda I)^{-1} G = V diag(e / (e + lambda)) V^T, stable for lambda = 0
    // only when G is nonsingular.
    Vector ratio(ev.size());
    for (Eigen::Index i = 0; i < ev.size(); ++i) {
        const double den = ev[i] + pred.lambda();
        ratio[i] = den > 0.0 ? ev[i] / den : 0.0;
    }
    const Vector j = vecs * ratio.asDiagonal() * vecs.transpose() * ctx.x_test;

    JacobianReport r;
    r.spectral_norm = j.norm();
    r.sigma_min_XtX = ev.minCoeff();
    r.sigma_max_XtX = ev.maxCoeff();
    const double den = r.sigma_min_XtX + pred.lambda();
    r.chain_bound = den > 0.0 ? ctx.x_test.norm() * r.sigma_max_XtX / den
                              : std::numeric_limits<double>::infinity();
    r.lipschitz_bound = 1.0 / (1.0 + pred.lambda() / ctx.n());
    return r;
}

/// Singular values of a design matrix, descending.
inline Vector singular_values(const Matrix& x) {
    return Eigen::JacobiSVD<Matrix>(x).singularValues();
}

/// Per-design quantities the semi-analytic risk needs, for one lambda.
/// With A = (X^T X + lambda I)^{-1}:
///   risk(X) = lambda^2 (mu^T A^2 mu + s^2 Tr A^2) + sigma^2 Tr(A X^T X A) + sigma^2.
struct DesignTerms {
    Matrix a_sq;           // A^2
    double trace_a_sq = 0.0;
    double noise_trace = 0.0;  // Tr(A X^T X A)
};

class DesignBatch {
public:
    DesignBatch(std::vector<Matrix> designs, double lambda) : lambda_(lambda) {
        if (designs.empty()) {
            throw InvalidArgument("empty design batch");
        }
        require(std::isfinite(lambda) && lambda >= 0.0, "design batch lambda must be nonnegative");
        d_ = static_cast<int>(designs.front().cols());
        n_ = static_cast<int>(designs.front().rows());
        terms_.reserve(designs.size());
        mean_a_sq_ = Matrix::Zero(d_, d_);
        for (const auto& x : designs) {
            require(x.cols() == d_, "design batch: inconsistent dimension");
            Matrix gram = x.transpose() * x;
            Matrix shifted = gram;
            shifted.diagonal().array() += lambda;
            Eigen::LLT<Matrix> llt(shifted);
            if (llt.info() != Eigen::Success) {
                throw NumericalError("ill-posed, supply lambda > 0");
            }
            const Matrix a = llt.solve(Matrix::Identity(d_, d_));
            DesignTerms t;
            t.a_sq = a * a;
            t.trace_a_sq = t.a_sq.trace();
            t.noise_trace = (a * gram * a).trace();
            if (!t.a_sq.allFinite() || !std::isfinite(t.noise_trace)) {
                throw NumericalError("ill-posed, supply lambda > 0");
            }
            mean_a_sq_ += t.a_sq;
            terms_.push_back(std::move(t));
        }
        mean_a_sq_ /= static_cast<double>(terms_.size());
        designs_ = std::move(designs);
    }

    /// B designs of shape n x d with standard normal entries.
    static DesignBatch sample(int batch, int n, int d, double lambda, RandomStream& rng) {
        require(batch >= 1, "empty design batch");
        require(n >= 1, "empty context");
        std::vector<Matrix> xs;
        xs.reserve(static_cast<std::size_t>(batch));
        for (int b = 0; b < batch; ++b) {
            Matrix x(n, d);
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < d; ++j) {
                    x(i, j) = rng.normal();
                }
            }
            xs.push_back(std::move(x));
        }
        return DesignBatch(std::move(xs), lambda);
    }

    std::span<const DesignTerms> terms() const noexcept { return terms_; }
    std::span<const Matrix> designs() const noexcept { return designs_; }
    const Matrix& mean_a_sq() const noexcept { return mean_a_sq_; }
    double lambda() const noexcept { return lambda_; }
    int dim() const noexcept { return d_; }
    int n() const noexcept { return n_; }
    std::size_t size() const noexcept { return terms_.size(); }

private:
    std::vector<Matrix> designs_;
    std::vector<DesignTerms> terms_;
    Matrix mean_a_sq_;
    double lambda_ = 0.0;
    int d_ = 0;
    int n_ = 0;
};

/// Exact E[(y_hat - y_test)^2] over task, label noise and test input for each
/// design of the batch; the estimate is the batch mean with its standard error
/// across designs.
inline RiskEstimate semi_analytic_risk(const Vector& mu, double sigma_q, const DesignBatch& batch,
                                       const NoiseConfig& noise) {
    require(mu.size() == batch.dim(), "semi_analytic_risk: dimension mismatch");
    const double lam2 = batch.lambda() * batch.lambda();
    Vector per(static_cast<Eigen::Index>(batch.size()));
    Eigen::Index i = 0;
    for (const auto& t : batch.terms()) {
        per[i++] = lam2 * (mu.dot(t.a_sq * mu) + sigma_q * sigma_q * t.trace_a_sq) +
                   noise.sigma_sq * t.noise_trace + noise.sigma_sq;
    }
    return mean_and_stderr(per);
}

inline RiskEstimate semi_analytic_risk(const GaussianTaskDistribution& q, const RidgePredictor& pred,
                                       const NoiseConfig& noise, const DesignBatch& batch) {
    require(pred.lambda() == batch.lambda(), "semi_analytic_risk: predictor and batch lambda differ");
    return semi_analytic_risk(q.mean(), q.std(), batch, noise);
}

} // namespace robicl
