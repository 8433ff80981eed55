#pragma once

// Experiment configuration and its JSON form. Unknown keys are rejected.

#include "robicl/adversary.hpp"
#include "robicl/fits.hpp"
#include "robicl/linear_attention.hpp"
#include "robicl/task_model.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <vector>

namespace robicl {

enum class PredictorPath { ridge, transformer };

inline std::string to_string(PredictorPath p) { return p == PredictorPath::ridge ? "ridge" : "transformer"; }

inline PredictorPath parse_path(const std::string& s) {
    if (s == "ridge") {
        return PredictorPath::ridge;
    }
    if (s == "transformer") {
        return PredictorPath::transformer;
    }
    throw InvalidArgument("unknown predictor path '" + s + "' (expected ridge or transformer)");
}

inline const std::vector<std::string>& experiment_ids() {
    static const std::vector<std::string> ids{"exp1", "exp2", "exp3", "lambda_sweep", "verify", "train", "attack"};
    return ids;
}

struct Exp2Options {
    double epsilon = 0.5;
    RhoMaxOptions search;        // transformer path
    bool ridge_control = true;
    int ridge_max_widen = 4;     // the ridge oracle tolerates far larger radii
    double flat_tolerance = 0.10;
};

struct Exp3Options {
    int n0 = 5;
    int n_max = 200;
};

struct LambdaSweepOptions {
    double rho = 0.8;
};

struct VerifyOptions {
    int d = 10;
    int m = 16;
    int n = 15;
    double equivalence_tolerance = 0.05;
    int equivalence_prompts = 1000;
};

struct ExperimentConfig {
    std::string experiment = "exp1";
    int d = 20;
    NoiseConfig noise{0.1, 1.0};
    std::vector<int> m_grid{16};
    std::vector<int> n_grid{15};
    std::vector<double> rho_grid{0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0};
    std::vector<double> lambda_grid{0.05, 0.1, 0.2, 0.4};
    PredictorPath path = PredictorPath::ridge;
    std::uint64_t seed = 0;
    std::string out_dir = "results";
    std::string checkpoint_dir;  // empty: <out_dir>/checkpoints
    int workers = 1;
    bool record_timing = false;
    bool quiet = false;
    bool resume = true;  // reuse rows already in the output CSV
    PgaConfig pga;
    TrainConfig train;
    Exp2Options exp2;
    Exp3Options exp3;
    LambdaSweepOptions lambda_sweep;
    VerifyOptions verify;

    /// Defaults for one experiment. `full_scale` restores the full Exp 2 grid.
    static ExperimentConfig defaults(const std::string& experiment, bool full_scale = false) {
        ExperimentConfig c;
        c.experiment = experiment;
        if (experiment == "exp2") {
            c.path = PredictorPath::transformer;
            c.n_grid = {15};
            if (full_scale) {
                c.d = 20;
                c.m_grid = {4, 8, 16, 32, 64};
                c.train.steps = 5000;
            } else {
                c.d = 10;
                c.m_grid = {4, 8, 16, 32};
                c.train.steps = 2000;
            }
        } else if (experiment == "exp3") {
            c.rho_grid = {0.0, 0.5, 1.0, 1.5};
        }
        return c;
    }

    std::string resolved_checkpoint_dir() const {
        return checkpoint_dir.empty() ? out_dir + "/checkpoints" : checkpoint_dir;
    }

    void validate() const {
        require(std::find(experiment_ids().begin(), experiment_ids().end(), experiment) != experiment_ids().end(),
                "unknown experiment '" + experiment + "'");
        require(d >= 1, "config: d must be >= 1");
        noise.validate();
        require(!m_grid.empty() && !n_grid.empty() && !rho_grid.empty() && !lambda_grid.empty(),
                "config: grids must be nonempty");
        for (int m : m_grid) {
            require(m >= train.heads && m % train.heads == 0,
                    "config: every m must be a positive multiple of the head count " + std::to_string(train.heads));
        }
        for (int n : n_grid) {
            require(n >= 1, "config: N values must be >= 1");
        }
        for (double r : rho_grid) {
            require(std::isfinite(r) && r >= 0.0, "config: rho values must be nonnegative");
        }
        for (double l : lambda_grid) {
            require(std::isfinite(l) && l > 0.0, "config: lambda values must be positive");
        }
        require(workers >= 1, "config: workers must be >= 1");
        PgaConfig p = pga;
        p.rho = 0.0;
        p.validate();
        train.validate();
        require(exp2.epsilon > 0.0, "config: exp2.epsilon must be positive");
        require(exp3.n0 >= 1 && exp3.n_max >= exp3.n0, "config: exp3 N range is invalid");
        require(verify.m % train.heads == 0 && verify.m >= train.heads, "config: verify.m must be a multiple of heads");
    }
};

namespace detail {

class KeyChecker {
public:
    KeyChecker(const nlohmann::json& j, std::string section) : j_(j), section_(std::move(section)) {
        if (!j_.is_object()) {
            throw InvalidArgument("config: section '" + section_ + "' must be an object");
        }
    }
    template <class T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (auto it = j_.find(key); it != j_.end()) {
            try {
                out = it->template get<T>();
            } catch (const nlohmann::json::exception& e) {
                throw InvalidArgument("config: bad value for '" + qualified(key) + "': " + e.what());
            }
        }
    }
    const nlohmann::json* section(const char* key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }
    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (!seen_.count(it.key())) {
                throw InvalidArgument("config: unknown key '" + qualified(it.key()) + "'");
            }
        }
    }

private:
    std::string qualified(const std::string& key) const { return section_.empty() ? key : section_ + "." + key; }
    const nlohmann::json& j_;
    std::string section_;
    std::set<std::string> seen_;
};

} // namespace detail

/// Applies a JSON document on top of `base`.
inline ExperimentConfig apply_json(ExperimentConfig base, const nlohmann::json& j) {
    detail::KeyChecker top(j, "");
    std::string exp = base.experiment;
    top.get("experiment", exp);
    if (exp != base.experiment) {
        throw InvalidArgument("config: file is for '" + exp + "' but the command runs '" + base.experiment + "'");
    }
    top.get("d", base.d);
    top.get("m_grid", base.m_grid);
    top.get("n_grid", base.n_grid);
    top.get("rho_grid", base.rho_grid);
    top.get("lambda_grid", base.lambda_grid);
    std::string path = to_string(base.path);
    top.get("path", path);
    base.path = parse_path(path);
    top.get("seed", base.seed);
    top.get("out_dir", base.out_dir);
    top.get("checkpoint_dir", base.checkpoint_dir);
    top.get("workers", base.workers);
    top.get("record_timing", base.record_timing);
    top.get("quiet", base.quiet);
    top.get("resume", base.resume);
    if (const auto* s = top.section("noise")) {
        detail::KeyChecker k(*s, "noise");
        k.get("sigma_sq", base.noise.sigma_sq);
        k.get("sigma_beta_sq", base.noise.sigma_beta_sq);
        k.finish();
    }
    if (const auto* s = top.section("pga")) {
        detail::KeyChecker k(*s, "pga");
        k.get("iterations", base.pga.iterations);
        k.get("step_eta", base.pga.step_eta);
        k.get("decay_factor", base.pga.decay_factor);
        k.get("decay_every", base.pga.decay_every);
        k.get("tasks_per_step", base.pga.tasks_per_step);
        k.get("risk_eval_samples", base.pga.risk_eval_samples);
        k.get("crn_period", base.pga.crn_period);
        k.get("fd_step", base.pga.fd_step);
        k.finish();
    }
    if (const auto* s = top.section("train")) {
        detail::KeyChecker k(*s, "train");
        k.get("tasks_total", base.train.tasks_total);
        k.get("batch_tasks", base.train.batch_tasks);
        k.get("learning_rate", base.train.learning_rate);
        k.get("steps", base.train.steps);
        k.get("validation_tasks", base.train.validation_tasks);
        k.get("eval_every", base.train.eval_every);
        k.get("patience", base.train.patience);
        k.get("tolerance", base.train.tolerance);
        k.get("init_std", base.train.init_std);
        k.get("heads", base.train.heads);
        k.finish();
    }
    if (const auto* s = top.section("exp2")) {
        detail::KeyChecker k(*s, "exp2");
        k.get("epsilon", base.exp2.epsilon);
        k.get("search_lo", base.exp2.search.lo);
        k.get("search_hi", base.exp2.search.hi);
        k.get("search_tol", base.exp2.search.tol);
        k.get("max_widen", base.exp2.search.max_widen);
        k.get("ridge_control", base.exp2.ridge_control);
        k.get("ridge_max_widen", base.exp2.ridge_max_widen);
        k.get("flat_tolerance", base.exp2.flat_tolerance);
        k.finish();
    }
    if (const auto* s = top.section("exp3")) {
        detail::KeyChecker k(*s, "exp3");
        k.get("n0", base.exp3.n0);
        k.get("n_max", base.exp3.n_max);
        k.finish();
    }
    if (const auto* s = top.section("lambda_sweep")) {
        detail::KeyChecker k(*s, "lambda_sweep");
        k.get("rho", base.lambda_sweep.rho);
        k.finish();
    }
    if (const auto* s = top.section("verify")) {
        detail::KeyChecker k(*s, "verify");
        k.get("d", base.verify.d);
        k.get("m", base.verify.m);
        k.get("n", base.verify.n);
        k.get("equivalence_tolerance", base.verify.equivalence_tolerance);
        k.get("equivalence_prompts", base.verify.equivalence_prompts);
        k.finish();
    }
    top.finish();
    return base;
}

/// Settings that determine result values; worker count, output location and
/// verbosity are left out.
inline nlohmann::json fingerprint_json(const ExperimentConfig& c) {
    return {
        {"experiment", c.experiment},
        {"d", c.d},
        {"noise", {{"sigma_sq", c.noise.sigma_sq}, {"sigma_beta_sq", c.noise.sigma_beta_sq}}},
        {"m_grid", c.m_grid},
        {"n_grid", c.n_grid},
        {"rho_grid", c.rho_grid},
        {"lambda_grid", c.lambda_grid},
        {"path", to_string(c.path)},
        {"seed", c.seed},
        {"record_timing", c.record_timing},
        {"pga",
         {{"iterations", c.pga.iterations},
          {"step_eta", c.pga.step_eta},
          {"decay_factor", c.pga.decay_factor},
          {"decay_every", c.pga.decay_every},
          {"tasks_per_step", c.pga.tasks_per_step},
          {"risk_eval_samples", c.pga.risk_eval_samples},
          {"crn_period", c.pga.crn_period},
          {"fd_step", c.pga.fd_step}}},
        {"train",
         {{"tasks_total", c.train.tasks_total},
          {"batch_tasks", c.train.batch_tasks},
          {"learning_rate", c.train.learning_rate},
          {"steps", c.train.steps},
          {"validation_tasks", c.train.validation_tasks},
          {"eval_every", c.train.eval_every},
          {"patience", c.train.patience},
          {"tolerance", c.train.tolerance},
          {"init_std", c.train.init_std},
          {"heads", c.train.heads}}},
        {"exp2",
         {{"epsilon", c.exp2.epsilon},
          {"search_lo", c.exp2.search.lo},
          {"search_hi", c.exp2.search.hi},
          {"search_tol", c.exp2.search.tol},
          {"max_widen", c.exp2.search.max_widen},
          {"ridge_control", c.exp2.ridge_control},
          {"ridge_max_widen", c.exp2.ridge_max_widen},
          {"flat_tolerance", c.exp2.flat_tolerance}}},
        {"exp3", {{"n0", c.exp3.n0}, {"n_max", c.exp3.n_max}}},
        {"lambda_sweep", {{"rho", c.lambda_sweep.rho}}},
    };
}

inline ExperimentConfig load_config(const std::string& file, ExperimentConfig base) {
    std::ifstream in(file);
    if (!in) {
        throw InvalidArgument("cannot open config file " + file);
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw InvalidArgument("config file " + file + " is not valid JSON: " + e.what());
    }
    return apply_json(std::move(base), j);
}

} // namespace robicl
