#pragma once

// Gaussian linear-regression data model: isotropic task distributions over
// weight vectors, and in-context prompts (X, y, x_test, y_test) drawn from them.

#include "robicl/common.hpp"
#include "robicl/rng.hpp"

#include <cmath>
#include <string>

namespace robicl {

/// Isotropic Gaussian N(mean, std^2 I_d) over task weight vectors.
class GaussianTaskDistribution {
public:
    GaussianTaskDistribution(Vector mean, double std) : mean_(std::move(mean)), std_(std) {
        require(mean_.size() > 0, "task distribution needs dimension d >= 1");
        require(std::isfinite(std_) && std_ > 0.0, "task distribution std must be positive");
        require(mean_.allFinite(), "task distribution mean must be finite");
    }

    /// N(0, std^2 I_d), e.g. the pretraining prior or the experiments' nominal.
    static GaussianTaskDistribution centered(int d, double std) {
        require(d >= 1, "task distribution needs dimension d >= 1");
        return GaussianTaskDistribution(Vector::Zero(d), std);
    }

    const Vector& mean() const noexcept { return mean_; }
    double std() const noexcept { return std_; }
    int dim() const noexcept { return static_cast<int>(mean_.size()); }

    bool operator==(const GaussianTaskDistribution& o) const {
        return std_ == o.std_ && mean_.size() == o.mean_.size() && mean_ == o.mean_;
    }

private:
    Vector mean_;
    double std_;
};

/// Observation-noise variance and prior variance; their ratio is the ridge
/// regularizer an optimally pretrained model implements.
struct NoiseConfig {
    double sigma_sq = 0.1;
    double sigma_beta_sq = 1.0;

    NoiseConfig() = default;
    NoiseConfig(double noise_var, double prior_var) : sigma_sq(noise_var), sigma_beta_sq(prior_var) {
        validate();
    }

    // sigma_sq == 0 is allowed for the noiseless regime.
    void validate() const {
        require(std::isfinite(sigma_sq) && sigma_sq >= 0.0, "noise variance must be nonnegative");
        require(std::isfinite(sigma_beta_sq) && sigma_beta_sq > 0.0, "prior variance must be positive");
    }

    double lambda() const { return sigma_sq / sigma_beta_sq; }
};

/// One in-context prompt.
struct ContextSet {
    Matrix X;       // N x d
    Vector y;       // N
    Vector x_test;  // d
    double y_test = 0.0;

    int n() const noexcept { return static_cast<int>(X.rows()); }
    int dim() const noexcept { return static_cast<int>(X.cols()); }
};

/// The random draws behind a prompt, kept so that labels can be regenerated
/// for a different task vector with everything else held fixed.
struct ContextDraw {
    Matrix X;
    Vector noise;
    Vector x_test;
    double test_noise = 0.0;

    ContextSet realize(const Vector& beta, double sigma) const {
        ContextSet ctx;
        ctx.X = X;
        ctx.y = X * beta + sigma * noise;
        ctx.x_test = x_test;
        ctx.y_test = x_test.dot(beta) + sigma * test_noise;
        return ctx;
    }
};

/// Substreams for inputs, label noise and test points.
struct ContextStreams {
    RandomStream inputs;
    RandomStream noise;
    RandomStream test;

    static ContextStreams from(const SeedTree& tree) {
        return {tree.stream("context.inputs"), tree.stream("context.noise"), tree.stream("context.test")};
    }
};

inline Vector standard_normal_vector(int n, RandomStream& rng) {
    Vector v(n);
    for (int i = 0; i < n; ++i) {
        v[i] = rng.normal();
    }
    return v;
}

inline Vector sample_task(const GaussianTaskDistribution& dist, RandomStream& rng) {
    return dist.mean() + dist.std() * standard_normal_vector(dist.dim(), rng);
}

inline ContextDraw sample_context_draw(int d, int n, ContextStreams& streams) {
    if (n < 1) {
        throw InvalidArgument("empty context");
    }
    require(d >= 1, "context dimension must be >= 1");
    ContextDraw draw;
    draw.X.resize(n, d);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) {
            draw.X(i, j) = streams.inputs.normal();
        }
    }
    draw.noise = standard_normal_vector(n, streams.noise);
    draw.x_test = standard_normal_vector(d, streams.test);
    draw.test_noise = streams.test.normal();
    return draw;
}

inline ContextSet sample_context(const Vector& beta, int n, const NoiseConfig& noise, ContextStreams& streams) {
    noise.validate();
    return sample_context_draw(static_cast<int>(beta.size()), n, streams).realize(beta, std::sqrt(noise.sigma_sq));
}

} // namespace robicl
