#pragma once

// Single-layer multi-head linear self-attention for in-context regression.
//
// Tokens are rows z_i = (x_i, y_i) for the context and z_test = (x_test, 0).
// With M = Z^T Z / N (Z includes the test row), head h updates the test token by
//     c_h = V_h^T M K_h Q_h^T z_test,      update = [c_1 ... c_H] O,
// and the prediction is the last coordinate of z_test + update. No softmax,
// no MLP, no positional encoding.

#include "robicl/common.hpp"
#include "robicl/ridge.hpp"
#include "robicl/rng.hpp"
#include "robicl/task_model.hpp"

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <sstream>
#include <vector>

namespace robicl {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixView = Eigen::Map<RowMatrix>;
using ConstMatrixView = Eigen::Map<const RowMatrix>;

inline Matrix embed_prompt(const ContextSet& ctx) {
    const int n = ctx.n();
    const int d = ctx.dim();
    Matrix z(n + 1, d + 1);
    z.topLeftCorner(n, d) = ctx.X;
    z.topRightCorner(n, 1) = ctx.y;
    z.bottomLeftCorner(1, d) = ctx.x_test.transpose();
    z(n, d) = 0.0;
    return z;
}

/// Inverse of embed_prompt; y_test is not recoverable and is left at zero.
inline ContextSet unembed_prompt(const Matrix& z) {
    require(z.rows() >= 2 && z.cols() >= 2, "unembed_prompt: token matrix too small");
    const auto n = z.rows() - 1;
    const auto d = z.cols() - 1;
    ContextSet ctx;
    ctx.X = z.topLeftCorner(n, d);
    ctx.y = z.topRightCorner(n, 1);
    ctx.x_test = z.bottomLeftCorner(1, d).transpose();
    return ctx;
}

/// Parameters live in one flat row-major buffer: for each head Q_h, K_h, V_h
/// ((d+1) x head_dim each), then the output projection O (m x (d+1)).
class LinearAttentionModel {
public:
    LinearAttentionModel(int d, int heads, int total_dim) : d_(d), heads_(heads), m_(total_dim) {
        require(d >= 1, "attention: d must be >= 1");
        require(heads >= 1, "attention: heads must be >= 1");
        require(total_dim >= heads && total_dim % heads == 0,
                "attention: total head dimension m must be divisible by the head count");
        head_dim_ = m_ / heads_;
        params_ = Vector::Zero(parameter_count(d, heads, total_dim));
    }

    static std::size_t parameter_count(int d, int heads, int total_dim) {
        const auto tok = static_cast<std::size_t>(d + 1);
        const auto hd = static_cast<std::size_t>(total_dim / heads);
        return static_cast<std::size_t>(heads) * 3 * tok * hd + static_cast<std::size_t>(total_dim) * tok;
    }

    /// Every parameter drawn i.i.d. from N(0, init_std^2).
    void initialize(RandomStream& rng, double init_std = 0.02) {
        for (Eigen::Index i = 0; i < params_.size(); ++i) {
            params_[i] = init_std * rng.normal();
        }
    }

    int dim() const noexcept { return d_; }
    int heads() const noexcept { return heads_; }
    int head_dim() const noexcept { return head_dim_; }
    int total_dim() const noexcept { return m_; }
    int token_dim() const noexcept { return d_ + 1; }

    Vector& parameters() noexcept { return params_; }
    const Vector& parameters() const noexcept { return params_; }

    MatrixView query(int h) { return block(h, 0); }
    MatrixView key(int h) { return block(h, 1); }
    MatrixView value(int h) { return block(h, 2); }
    MatrixView output() { return {params_.data() + output_offset(), m_, d_ + 1}; }
    ConstMatrixView query(int h) const { return block(h, 0); }
    ConstMatrixView key(int h) const { return block(h, 1); }
    ConstMatrixView value(int h) const { return block(h, 2); }
    ConstMatrixView output() const { return {params_.data() + output_offset(), m_, d_ + 1}; }

    std::size_t block_offset(int h, int which) const {
        const auto sz = static_cast<std::size_t>(token_dim() * head_dim_);
        return (static_cast<std::size_t>(h) * 3 + static_cast<std::size_t>(which)) * sz;
    }
    std::size_t output_offset() const { return static_cast<std::size_t>(heads_) * 3 * token_dim() * head_dim_; }

    /// Pre-residual attention update of the test token, length d+1.
    Vector attention_update(const Matrix& z) const {
        check_tokens(z);
        const Matrix mom = moment(z);
        const Vector zt = z.row(z.rows() - 1).transpose();
        Vector concat(m_);
        for (int h = 0; h < heads_; ++h) {
            concat.segment(h * head_dim_, head_dim_) = head_output(h, mom, zt);
        }
        return output().transpose() * concat;
    }

    /// Prediction for the test token of a token matrix.
    double forward(const Matrix& z) const {
        check_tokens(z);
        const Matrix mom = moment(z);
        const Vector zt = z.row(z.rows() - 1).transpose();
        double out = z(z.rows() - 1, d_);
        const auto o = output();
        for (int h = 0; h < heads_; ++h) {
            out += head_output(h, mom, zt).dot(o.block(h * head_dim_, d_, head_dim_, 1).col(0));
        }
        return out;
    }

    double predict(const ContextSet& ctx) const { return forward(embed_prompt(ctx)); }

    /// Mean squared error over a batch and its exact gradient with respect to
    /// the flat parameter vector.
    double loss_and_gradients(std::span<const ContextSet> batch, Vector& grad) const {
        if (batch.empty()) {
            throw InvalidArgument("loss_and_gradients: empty batch");
        }
        grad = Vector::Zero(params_.size());
        const double inv_b = 1.0 / static_cast<double>(batch.size());
        double loss = 0.0;
        const auto o = output();
        for (const auto& ctx : batch) {
            const Matrix z = embed_prompt(ctx);
            check_tokens(z);
            const Matrix mom = moment(z);
            const Vector zt = z.row(z.rows() - 1).transpose();

            std::vector<Vector> a(heads_), b(heads_), g(heads_), c(heads_);
            double pred = zt[d_];
            for (int h = 0; h < heads_; ++h) {
                a[h] = query(h).transpose() * zt;
                b[h] = key(h) * a[h];
                g[h] = mom * b[h];
                c[h] = value(h).transpose() * g[h];
                pred += c[h].dot(o.block(h * head_dim_, d_, head_dim_, 1).col(0));
            }
            const double err = pred - ctx.y_test;
            loss += err * err * inv_b;
            const double delta = 2.0 * err * inv_b;

            MatrixView g_out(grad.data() + output_offset(), m_, d_ + 1);
            for (int h = 0; h < heads_; ++h) {
                const Vector dc = delta * o.block(h * head_dim_, d_, head_dim_, 1).col(0);
                g_out.block(h * head_dim_, d_, head_dim_, 1).col(0) += delta * c[h];
                MatrixView g_v(grad.data() + block_offset(h, 2), d_ + 1, head_dim_);
                g_v.noalias() += g[h] * dc.transpose();
                const Vector dg = value(h) * dc;
                const Vector db = mom * dg;  // M is symmetric
                MatrixView g_k(grad.data() + block_offset(h, 1), d_ + 1, head_dim_);
                g_k.noalias() += db * a[h].transpose();
                const Vector da = key(h).transpose() * db;
                MatrixView g_q(grad.data() + block_offset(h, 0), d_ + 1, head_dim_);
                g_q.noalias() += zt * da.transpose();
            }
        }
        return loss;
    }

    double loss(std::span<const ContextSet> batch) const {
        if (batch.empty()) {
            throw InvalidArgument("loss: empty batch");
        }
        double s = 0.0;
        for (const auto& ctx : batch) {
            const double e = predict(ctx) - ctx.y_test;
            s += e * e;
        }
        return s / static_cast<double>(batch.size());
    }

private:
    MatrixView block(int h, int which) {
        require(h >= 0 && h < heads_, "attention: head index out of range");
        return {params_.data() + block_offset(h, which), d_ + 1, head_dim_};
    }
    ConstMatrixView block(int h, int which) const {
        require(h >= 0 && h < heads_, "attention: head index out of range");
        return {params_.data() + block_offset(h, which), d_ + 1, head_dim_};
    }

    void check_tokens(const Matrix& z) const {
        if (z.cols() != d_ + 1 || z.rows() < 2) {
            std::ostringstream os;
            os << "attention: token matrix shape " << z.rows() << "x" << z.cols() << " does not match (N+1)x"
               << d_ + 1;
            throw InvalidArgument(os.str());
        }
    }

    static Matrix moment(const Matrix& z) {
        return (z.transpose() * z) / static_cast<double>(z.rows() - 1);
    }

    Vector head_output(int h, const Matrix& mom, const Vector& zt) const {
        return value(h).transpose() * (mom * (key(h) * (query(h).transpose() * zt)));
    }

    int d_;
    int heads_;
    int m_;
    int head_dim_ = 0;
    Vector params_;
};

inline double forward(const LinearAttentionModel& model, const Matrix& z) { return model.forward(z); }

/// Adam with bias correction.
class AdamOptimizer {
public:
    explicit AdamOptimizer(std::size_t n, double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999,
                           double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(Vector::Zero(static_cast<Eigen::Index>(n))),
          v_(Vector::Zero(static_cast<Eigen::Index>(n))) {}

    void step(Vector& params, const Vector& grad) {
        ++t_;
        m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
        v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseProduct(grad);
        const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        params.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
    }

private:
    double lr_, beta1_, beta2_, eps_;
    Vector m_, v_;
    std::int64_t t_ = 0;
};

struct TrainConfig {
    int tasks_total = 10000;
    int batch_tasks = 32;
    double learning_rate = 1e-3;
    int steps = 5000;
    int validation_tasks = 512;
    int eval_every = 50;
    int patience = 500;
    double tolerance = 1e-5;  // relative validation improvement that resets patience
    double init_std = 0.02;
    int heads = 4;

    void validate() const {
        require(tasks_total > 0 && batch_tasks > 0 && steps > 0 && validation_tasks > 0 && eval_every > 0 &&
                    patience > 0,
                "train config: counts must be positive");
        require(learning_rate > 0.0 && tolerance > 0.0 && init_std > 0.0, "train config: rates must be positive");
        require(heads > 0, "train config: heads must be positive");
    }
};

struct TrainResult {
    LinearAttentionModel model;
    std::vector<double> train_loss;                       // per step
    std::vector<std::pair<int, double>> validation_curve;  // (step, validation MSE)
    double validation_mse = 0.0;
    double ridge_validation_mse = 0.0;
    int steps_run = 0;
    bool stopped_early = false;

    double ridge_gap() const { return validation_mse / ridge_validation_mse - 1.0; }
    /// Convergence gate: validation MSE within 10% of the ridge oracle's.
    bool matches_ridge() const { return ridge_gap() <= 0.10; }
};

/// Trains on tasks from `prior` with N-example prompts. Validation uses
/// `validation_tasks` held-out prompts from a dedicated substream; the
/// returned model is the best one seen on validation.
inline TrainResult train(const TrainConfig& config, const GaussianTaskDistribution& prior, const NoiseConfig& noise,
                         int n, int m, const SeedTree& seeds) {
    config.validate();
    noise.validate();
    require(n >= 1, "empty context");
    const int d = prior.dim();
    const double sigma = std::sqrt(noise.sigma_sq);

    LinearAttentionModel model(d, config.heads, m);
    {
        auto init = seeds.stream("trainer.init");
        model.initialize(init, config.init_std);
    }

    std::vector<Vector> pool;
    pool.reserve(static_cast<std::size_t>(config.tasks_total));
    {
        auto task_rng = seeds.stream("trainer.tasks");
        for (int i = 0; i < config.tasks_total; ++i) {
            pool.push_back(sample_task(prior, task_rng));
        }
    }

    std::vector<ContextSet> validation;
    validation.reserve(static_cast<std::size_t>(config.validation_tasks));
    {
        auto vseeds = seeds.child("trainer.validation");
        auto vtask = vseeds.stream("tasks");
        auto vctx = ContextStreams::from(vseeds);
        for (int i = 0; i < config.validation_tasks; ++i) {
            validation.push_back(sample_context_draw(d, n, vctx).realize(sample_task(prior, vtask), sigma));
        }
    }
    const RidgePredictor ridge = RidgePredictor::from_noise(noise, d);
    double ridge_mse = 0.0;
    for (const auto& ctx : validation) {
        const double e = ridge.predict(ctx) - ctx.y_test;
        ridge_mse += e * e;
    }
    ridge_mse /= static_cast<double>(validation.size());

    AdamOptimizer adam(static_cast<std::size_t>(model.parameters().size()), config.learning_rate);
    auto pick = seeds.stream("trainer.batches");
    auto batch_ctx = ContextStreams::from(seeds.child("trainer.contexts"));

    TrainResult result{model, {}, {}, 0.0, ridge_mse, 0, false};
    result.train_loss.reserve(static_cast<std::size_t>(config.steps));

    std::vector<ContextSet> batch(static_cast<std::size_t>(config.batch_tasks));
    Vector grad;
    double best_val = std::numeric_limits<double>::infinity();
    double last_improving_val = best_val;
    int last_improvement_step = 0;
    double initial_loss = -1.0;
    int above = 0;

    for (int step = 1; step <= config.steps; ++step) {
        for (auto& ctx : batch) {
            const auto& beta = pool[pick.index(pool.size())];
            ctx = sample_context_draw(d, n, batch_ctx).realize(beta, sigma);
        }
        const double loss = model.loss_and_gradients(batch, grad);
        if (!std::isfinite(loss) || !grad.allFinite()) {
            std::ostringstream os;
            os << "training produced a non-finite loss at step " << step;
            throw NumericalError(os.str());
        }
        if (initial_loss < 0.0) {
            initial_loss = loss;
        }
        above = loss > 10.0 * initial_loss ? above + 1 : 0;
        if (above >= 200) {
            std::ostringstream os;
            os << "training diverged: loss " << loss << " exceeded 10x the initial loss " << initial_loss
               << " for 200 consecutive steps (step " << step << ")";
            throw NumericalError(os.str());
        }
        result.train_loss.push_back(loss);
        adam.step(model.parameters(), grad);
        result.steps_run = step;

        if (step % config.eval_every == 0 || step == config.steps) {
            const double val = model.loss(validation);
            result.validation_curve.emplace_back(step, val);
            if (val < best_val) {
                best_val = val;
                result.model = model;
            }
            if (val < last_improving_val * (1.0 - config.tolerance)) {
                last_improving_val = val;
                last_improvement_step = step;
            } else if (step - last_improvement_step >= config.patience) {
                result.stopped_early = true;
                break;
            }
        }
    }
    result.validation_mse = best_val;
    return result;
}

} // namespace robicl
