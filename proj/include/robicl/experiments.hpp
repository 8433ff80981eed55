#pragma once

// Experiment runners: risk-vs-radius curve (exp1), safe radius vs capacity
// (exp2), sample tax vs radius (exp3), the regularization sweep, and verify.

#include "robicl/adversary.hpp"
#include "robicl/checkpoint.hpp"
#include "robicl/config.hpp"
#include "robicl/fits.hpp"
#include "robicl/plot.hpp"
#include "robicl/results.hpp"
#include "robicl/verify.hpp"

#include <atomic>
#include <bit>
#include <chrono>
#include <exception>
#include <filesystem>
#include <future>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>
#include <tuple>

namespace robicl {

// ---------------------------------------------------------------------------
// Plumbing

class Logger {
public:
    explicit Logger(bool quiet, std::ostream& os = std::cerr) : quiet_(quiet), os_(os) {}
    void operator()(const std::string& msg) {
        if (quiet_) {
            return;
        }
        std::lock_guard lock(mu_);
        os_ << msg << '\n';
    }

private:
    bool quiet_;
    std::ostream& os_;
    std::mutex mu_;
};

/// Runs fn(0..count-1) on up to `workers` threads. Exceptions are rethrown
/// after all workers stop, lowest cell index first.
template <class Fn>
void run_cells(std::size_t count, int workers, Fn&& fn) {
    std::vector<std::exception_ptr> errors(count);
    std::atomic<std::size_t> next{0};
    auto body = [&] {
        for (std::size_t i = next++; i < count; i = next++) {
            try {
                fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const auto n = static_cast<std::size_t>(std::max(1, workers));
    if (n == 1 || count <= 1) {
        body();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < std::min(n, count); ++w) {
            pool.emplace_back(body);
        }
        for (auto& t : pool) {
            t.join();
        }
    }
    for (auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
}

inline std::uint64_t bits_of(double v) { return std::bit_cast<std::uint64_t>(v); }

class TrainingFailed : public NumericalError {
public:
    using NumericalError::NumericalError;
};

struct TrainedModel {
    LinearAttentionModel model;
    double validation_mse = 0.0;
    double ridge_validation_mse = 0.0;
    int steps_run = 0;
    bool from_checkpoint = false;
    std::string checkpoint;
};

/// Trains each (d, m, N, noise) cell once and checkpoints it; later requests
/// load the checkpoint if its header and metadata match the current settings.
class ModelCache {
public:
    ModelCache(std::string dir, TrainConfig train, std::uint64_t seed, Logger& log)
        : dir_(std::move(dir)), train_(train), seed_(seed), log_(log) {}

    std::string checkpoint_path(int d, int m, int n, const NoiseConfig& noise) const {
        char buf[256];
        std::snprintf(buf, sizeof buf, "model_d%d_m%d_N%d_s2_%.6g_sb2_%.6g_seed%llu.bin", d, m, n, noise.sigma_sq,
                      noise.sigma_beta_sq, static_cast<unsigned long long>(seed_));
        return (std::filesystem::path(dir_) / buf).string();
    }

    /// `strict`: a checkpoint that exists but cannot be used is an error
    /// instead of being retrained.
    std::shared_ptr<const TrainedModel> get(int d, int m, int n, const NoiseConfig& noise, bool strict = false) {
        const auto key = std::make_tuple(d, m, n, bits_of(noise.sigma_sq), bits_of(noise.sigma_beta_sq));
        std::shared_future<std::shared_ptr<const TrainedModel>> fut;
        std::promise<std::shared_ptr<const TrainedModel>> promise;
        bool owner = false;
        {
            std::lock_guard lock(mu_);
            auto it = cache_.find(key);
            if (it == cache_.end()) {
                fut = promise.get_future().share();
                cache_.emplace(key, fut);
                owner = true;
            } else {
                fut = it->second;
            }
        }
        if (owner) {
            try {
                promise.set_value(load_or_train(d, m, n, noise, strict));
            } catch (...) {
                promise.set_exception(std::current_exception());
            }
        }
        return fut.get();
    }

private:
    std::shared_ptr<const TrainedModel> load_or_train(int d, int m, int n, const NoiseConfig& noise, bool strict) {
        const std::string path = checkpoint_path(d, m, n, noise);
        std::ostringstream cell;
        cell << "cell d=" << d << ",m=" << m << ",N=" << n;
        if (std::filesystem::exists(path)) {
            try {
                auto ck = load_checkpoint(path);
                const auto meta = load_sidecar(path);
                const bool same = ck.header.d == static_cast<std::uint32_t>(d) &&
                                  ck.header.heads == static_cast<std::uint32_t>(train_.heads) &&
                                  ck.model.total_dim() == m && ck.header.n == static_cast<std::uint32_t>(n) &&
                                  ck.header.seed == seed_ && meta.at("train_config") == to_json(train_) &&
                                  meta.at("noise") == to_json(noise);
                if (same) {
                    auto tm = std::make_shared<TrainedModel>(TrainedModel{std::move(ck.model),
                                                                          meta.at("validation_mse").get<double>(),
                                                                          meta.at("ridge_validation_mse").get<double>(),
                                                                          meta.at("steps_run").get<int>(), true, path});
                    log_("loaded " + path);
                    return tm;
                }
                if (strict) {
                    throw CheckpointError("checkpoint settings differ from the current configuration");
                }
                log_("checkpoint " + path + " was made with other settings; retraining");
            } catch (const std::exception& e) {
                if (strict) {
                    throw CheckpointError(cell.str() + ": " + e.what());
                }
                log_(cell.str() + ": unusable checkpoint (" + e.what() + "); retraining");
            }
        }
        log_("training " + cell.str());
        const SeedTree seeds =
            SeedTree(seed_).child("train", {static_cast<std::uint64_t>(d), static_cast<std::uint64_t>(m),
                                            static_cast<std::uint64_t>(n), bits_of(noise.sigma_sq),
                                            bits_of(noise.sigma_beta_sq)});
        const auto prior = GaussianTaskDistribution::centered(d, std::sqrt(noise.sigma_beta_sq));
        TrainResult res = [&] {
            try {
                return train(train_, prior, noise, n, m, seeds);
            } catch (const NumericalError& e) {
                throw TrainingFailed(cell.str() + ": " + e.what());
            }
        }();
        std::filesystem::create_directories(dir_);
        save_checkpoint(path, res.model, n, seed_);
        save_sidecar(path, train_, noise, res, n, seed_);
        std::ostringstream os;
        os << "trained " << cell.str() << ": validation MSE " << res.validation_mse << ", ridge "
           << res.ridge_validation_mse << ", gap " << res.ridge_gap() << (res.matches_ridge() ? "" : " (above the 10% gate)");
        log_(os.str());
        return std::make_shared<TrainedModel>(
            TrainedModel{res.model, res.validation_mse, res.ridge_validation_mse, res.steps_run, false, path});
    }

    std::string dir_;
    TrainConfig train_;
    std::uint64_t seed_;
    Logger& log_;
    std::mutex mu_;
    std::map<std::tuple<int, int, int, std::uint64_t, std::uint64_t>,
             std::shared_future<std::shared_ptr<const TrainedModel>>>
        cache_;
};

/// Shared state for one experiment run.
struct RunContext {
    ExperimentConfig config;
    Logger log;
    ModelCache models;

    explicit RunContext(ExperimentConfig c)
        : config(std::move(c)), log(config.quiet),
          models(config.resolved_checkpoint_dir(), config.train, config.seed, log) {
        config.validate();
        std::filesystem::create_directories(config.out_dir);
    }

    std::string out(const std::string& name) const { return (std::filesystem::path(config.out_dir) / name).string(); }
    std::string fingerprint() const { return fingerprint_json(config).dump(); }
};

/// One PGA run on the configured predictor path.
inline AdversaryResult attack(RunContext& ctx, PredictorPath path, const NoiseConfig& noise, int m, int n, double rho,
                              int sample_multiplier, const SeedTree& seeds) {
    const auto& c = ctx.config;
    PgaConfig pga = c.pga;
    pga.rho = rho;
    pga.tasks_per_step *= sample_multiplier;
    pga.risk_eval_samples *= sample_multiplier;
    const auto nominal = GaussianTaskDistribution::centered(c.d, 1.0);
    if (path == PredictorPath::ridge) {
        return pga_search(pga, nominal, RidgePredictor::from_noise(noise, c.d), noise, n, seeds);
    }
    const auto model = ctx.models.get(c.d, m, n, noise);
    return pga_search(pga, nominal, model->model, noise, n, seeds);
}

inline ResultRecord make_record(const RunContext& ctx, const std::string& exp_id, PredictorPath path,
                                const NoiseConfig& noise, int m, int n, double rho, const AdversaryResult& res,
                                double wall_ms) {
    ResultRecord r;
    r.exp_id = exp_id;
    r.rho = rho;
    r.m = m;
    r.n = n;
    r.lambda = noise.lambda();
    r.path = to_string(path);
    r.seed = ctx.config.seed;
    r.nominal_risk = res.nominal.value;
    r.nominal_se = res.nominal.std_error;
    r.worst_risk = res.worst.value;
    r.worst_se = res.worst.std_error;
    r.adv_mu_norm = res.q_adv.mean().norm();
    r.adv_sigma = res.q_adv.std();
    r.pga_converged = res.converged;
    r.wall_ms = ctx.config.record_timing ? wall_ms : 0.0;
    return r;
}

/// Looks the cell up in the store, otherwise runs PGA and appends the row.
/// Returns the canonical (CSV-rounded) record and its CSV line.
inline std::pair<ResultRecord, std::string> cached_attack(RunContext& ctx, ResultStore& store, ResultRecord key_row,
                                                          PredictorPath path, const NoiseConfig& noise,
                                                          const SeedTree& seeds) {
    key_row.lambda = noise.lambda();
    key_row.path = to_string(path);
    key_row.seed = ctx.config.seed;
    if (auto line = store.find(key_row.key())) {
        return {ResultRecord::parse(*line), *line};
    }
    const auto t0 = std::chrono::steady_clock::now();
    const auto res = attack(ctx, path, noise, key_row.m, key_row.n, key_row.rho, 1, seeds);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    const auto rec = make_record(ctx, key_row.exp_id, path, noise, key_row.m, key_row.n, key_row.rho, res, ms);
    const std::string line = rec.to_csv();
    store.append(rec.key(), line);
    return {rec.canonical(), line};
}

inline ResultRecord key_row(const std::string& exp_id, double rho, int m, int n) {
    ResultRecord r;
    r.exp_id = exp_id;
    r.rho = rho;
    r.m = m;
    r.n = n;
    return r;
}

inline void write_fit_csv(const std::string& file, const std::vector<std::tuple<std::string, std::string, double>>& rows) {
    std::ofstream os(file, std::ios::trunc);
    os << "fit,parameter,value\n";
    for (const auto& [fit, name, value] : rows) {
        os << fit << ',' << name << ',' << format_fixed(value) << '\n';
    }
}

inline void write_text(const std::string& file, const std::string& text) {
    std::ofstream os(file, std::ios::trunc);
    os << text;
}

inline std::string cell_label(const ResultRecord& r) { return r.key(); }

// ---------------------------------------------------------------------------
// Exp 1: worst-case risk increment vs radius

struct Exp1Result {
    std::vector<ResultRecord> records;
    std::optional<ScalingFitReport> fit;
    std::optional<BoundFit> bound;
    std::string fit_error;
    std::string summary;
};

inline Exp1Result run_exp1(const ExperimentConfig& config) {
    RunContext ctx(config);
    const auto& c = ctx.config;
    const int m = c.m_grid.front();
    const int n = c.n_grid.front();
    ResultStore store(ctx.out("exp1.csv"), result_csv_header(), ctx.fingerprint(), c.resume);
    // one seed tree for every radius: common random numbers across the curve
    const SeedTree seeds = SeedTree(c.seed).child("exp1.pga", {static_cast<std::uint64_t>(m),
                                                               static_cast<std::uint64_t>(n), bits_of(c.noise.lambda())});
    std::vector<ResultRecord> recs(c.rho_grid.size());
    std::vector<std::string> lines(c.rho_grid.size());
    run_cells(c.rho_grid.size(), c.workers, [&](std::size_t i) {
        auto [rec, line] = cached_attack(ctx, store, key_row("exp1", c.rho_grid[i], m, n), c.path, c.noise, seeds);
        ctx.log("exp1 rho=" + format_fixed(rec.rho, 3) + " worst " + format_fixed(rec.worst_risk, 5) + " nominal " +
                format_fixed(rec.nominal_risk, 5));
        recs[i] = rec;
        lines[i] = line;
    });
    store.finalize(lines);

    Exp1Result out;
    out.records = recs;
    std::vector<double> rho, delta, se, worst, worst_se;
    for (const auto& r : recs) {
        if (!r.pga_converged) {
            continue;  // flagged cells stay in the CSV but not in the fit
        }
        rho.push_back(r.rho);
        delta.push_back(r.increment());
        se.push_back(r.worst_se);
        worst.push_back(r.worst_risk);
        worst_se.push_back(r.worst_se);
    }
    std::ostringstream sum;
    sum << "exp1: " << to_string(c.path) << " path, d=" << c.d << ", m=" << m << ", N=" << n << ", "
        << recs.size() << " radii\n";
    std::vector<std::tuple<std::string, std::string, double>> fit_rows;
    try {
        out.fit = fit_risk_curve(rho, delta, se);
        sum << "  delta risk = a rho + b rho^2: a=" << out.fit->coefficient("a") << " b=" << out.fit->coefficient("b")
            << " R^2=" << out.fit->r_squared << "\n";
        fit_rows.emplace_back("risk_curve", "a", out.fit->coefficient("a"));
        fit_rows.emplace_back("risk_curve", "b", out.fit->coefficient("b"));
        fit_rows.emplace_back("risk_curve", "r_squared", out.fit->r_squared);
        out.bound = fit_bound(rho, worst, worst_se, c.d, m, n);
        sum << "  bound nominal=" << out.bound->bound.nominal_risk << " C1=" << out.bound->bound.c1
            << " C2=" << out.bound->bound.c2 << " covers all points: " << (out.bound->covers_all ? "yes" : "no")
            << "\n";
        fit_rows.emplace_back("bound", "nominal", out.bound->bound.nominal_risk);
        fit_rows.emplace_back("bound", "c1", out.bound->bound.c1);
        fit_rows.emplace_back("bound", "c2", out.bound->bound.c2);
        fit_rows.emplace_back("bound", "covers_all", out.bound->covers_all ? 1.0 : 0.0);
    } catch (const InvalidArgument& e) {
        out.fit_error = std::string("risk-curve fit rejected: ") + e.what();
        sum << "  " << out.fit_error << "\n";
    }
    int unconverged = 0;
    for (const auto& r : recs) {
        unconverged += r.pga_converged ? 0 : 1;
    }
    if (unconverged) {
        sum << "  " << unconverged
            << " cell(s) flagged and left out of the fit: PGA risk still rising over the last 50 iterations\n";
    }
    write_fit_csv(ctx.out("exp1_fit.csv"), fit_rows);

    PlotSpec plot{"Worst-case risk increment vs radius", "rho", "worst - nominal risk", {}};
    PlotSeries pts{"measured", "#1f77b4", {}, false};
    for (const auto& r : recs) {
        pts.points.push_back({r.rho, r.increment(), r.worst_se, cell_label(r)});
    }
    plot.series.push_back(pts);
    if (out.fit) {
        PlotSeries curve{"a rho + b rho^2", "#d62728", {}, true};
        const double hi = *std::max_element(rho.begin(), rho.end());
        for (int i = 0; i <= 100; ++i) {
            const double r = hi * i / 100.0;
            curve.points.push_back({r, out.fit->coefficient("a") * r + out.fit->coefficient("b") * r * r, 0.0, ""});
        }
        plot.series.push_back(curve);
    }
    write_svg(ctx.out("exp1.svg"), plot);
    out.summary = sum.str();
    write_text(ctx.out("exp1_summary.txt"), out.summary);
    return out;
}

// ---------------------------------------------------------------------------
// Exp 2: safe radius vs capacity

inline const std::string& probe_csv_header() {
    static const std::string h = result_csv_header() + ",increment,increment_se";
    return h;
}

struct Exp2Cell {
    PredictorPath path = PredictorPath::transformer;
    int m = 0;
    bool skipped = false;  // training diverged
    std::string error;
    RhoMaxResult search;
    std::optional<ResultRecord> record;  // PGA at rho_max
    std::vector<std::string> probe_lines;
    std::string record_line;
};

struct Exp2Result {
    std::vector<ResultRecord> records;
    std::vector<Exp2Cell> transformer;
    std::vector<Exp2Cell> ridge;
    std::optional<ScalingFitReport> fit;       // rho_max = slope sqrt(m)
    std::optional<ScalingFitReport> fit_free;  // with intercept, diagnostic
    std::string fit_error;
    bool monotone = false;         // nondecreasing within the search tolerance
    bool strictly_monotone = false;  // nondecreasing with no tolerance
    bool ridge_flat = false;     // every ridge cell binding and spread within flat_tolerance
    bool ridge_binding = false;  // every ridge search found a crossing
    double ridge_spread = 0.0;  // (max - min) / mean of the ridge rho_max values
    std::string summary;
};

inline Exp2Result run_exp2(const ExperimentConfig& config) {
    RunContext ctx(config);
    const auto& c = ctx.config;
    const int n = c.n_grid.front();
    ResultStore store(ctx.out("exp2.csv"), result_csv_header(), ctx.fingerprint(), c.resume);
    ResultStore probes(ctx.out("exp2_probes.csv"), probe_csv_header(), ctx.fingerprint(), c.resume);

    std::vector<Exp2Cell> cells;
    for (int m : c.m_grid) {
        cells.push_back({c.path, m});
    }
    if (c.exp2.ridge_control && c.path != PredictorPath::ridge) {
        for (int m : c.m_grid) {
            cells.push_back({PredictorPath::ridge, m});
        }
    }

    run_cells(cells.size(), c.workers, [&](std::size_t i) {
        Exp2Cell& cell = cells[i];
        const auto path_id = static_cast<std::uint64_t>(cell.path);
        const SeedTree seeds = SeedTree(c.seed).child(
            "exp2.pga", {path_id, static_cast<std::uint64_t>(cell.m), static_cast<std::uint64_t>(n)});
        const IncrementFn increment = [&](double rho, int mult) {
            ResultRecord k = key_row(mult == 1 ? "exp2_probe" : "exp2_probe_x" + std::to_string(mult), rho, cell.m, n);
            k.lambda = c.noise.lambda();
            k.path = to_string(cell.path);
            k.seed = c.seed;
            std::string line;
            if (auto hit = probes.find(k.key())) {
                line = *hit;
            } else {
                const auto t0 = std::chrono::steady_clock::now();
                const auto res = attack(ctx, cell.path, c.noise, cell.m, n, rho, mult, seeds);
                const double ms =
                    std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
                const auto rec = make_record(ctx, k.exp_id, cell.path, c.noise, cell.m, n, rho, res, ms);
                line = rec.to_csv() + "," + format_fixed(res.increment.value) + "," +
                       format_fixed(res.increment.std_error);
                probes.append(rec.key(), line);
            }
            cell.probe_lines.push_back(line);
            const auto f = split_csv_line(line);
            return IncrementProbe{rho, std::stod(f.at(15)), std::stod(f.at(16)), mult};
        };
        try {
            RhoMaxOptions opt = c.exp2.search;
            if (cell.path == PredictorPath::ridge) {
                opt.max_widen = std::max(opt.max_widen, c.exp2.ridge_max_widen);
            }
            cell.search = find_rho_max(c.exp2.epsilon, increment, opt);
            auto [rec, line] =
                cached_attack(ctx, store, key_row("exp2", cell.search.rho_max, cell.m, n), cell.path, c.noise, seeds);
            cell.record = rec;
            cell.record_line = line;
            ctx.log("exp2 " + to_string(cell.path) + " m=" + std::to_string(cell.m) +
                    " rho_max=" + format_fixed(cell.search.rho_max, 4) + (cell.search.binding ? "" : " (not binding)"));
        } catch (const TrainingFailed& e) {
            cell.skipped = true;
            cell.error = e.what();
            ctx.log(std::string("exp2: skipping cell, training failed: ") + e.what());
        }
    });

    Exp2Result out;
    std::vector<std::string> lines, probe_lines;
    for (auto& cell : cells) {
        probe_lines.insert(probe_lines.end(), cell.probe_lines.begin(), cell.probe_lines.end());
        if (cell.record) {
            lines.push_back(cell.record_line);
            out.records.push_back(*cell.record);
        }
        (cell.path == c.path ? out.transformer : out.ridge).push_back(cell);
    }
    store.finalize(lines);
    probes.finalize(probe_lines);

    std::vector<double> sqrt_m, rho_max;
    for (const auto& cell : out.transformer) {
        if (!cell.skipped) {
            sqrt_m.push_back(std::sqrt(double(cell.m)));
            rho_max.push_back(cell.search.rho_max);
        }
    }
    out.monotone = !rho_max.empty();
    out.strictly_monotone = !rho_max.empty();
    for (std::size_t i = 1; i < rho_max.size(); ++i) {
        out.monotone = out.monotone && rho_max[i] >= rho_max[i - 1] - c.exp2.search.tol;
        out.strictly_monotone = out.strictly_monotone && rho_max[i] >= rho_max[i - 1];
    }
    std::ostringstream sum;
    sum << "exp2: " << to_string(c.path) << " path, d=" << c.d << ", N=" << n << ", epsilon=" << c.exp2.epsilon
        << "\n";
    for (const auto& cell : out.transformer) {
        sum << "  m=" << cell.m << ": ";
        if (cell.skipped) {
            sum << "skipped (" << cell.error << ")\n";
        } else {
            sum << "rho_max=" << cell.search.rho_max << (cell.search.binding ? "" : " (not binding)") << ", "
                << cell.search.probes.size() << " probes, " << cell.search.reevaluations << " re-evaluated\n";
        }
    }
    std::vector<std::tuple<std::string, std::string, double>> fit_rows;
    try {
        if (rho_max.size() < 2) {
            throw InvalidArgument("need at least two capacities, got " + std::to_string(rho_max.size()));
        }
        out.fit = fit_through_origin(sqrt_m, rho_max);
        out.fit_free = fit_line(sqrt_m, rho_max);
        sum << "  rho_max = slope sqrt(m): slope=" << out.fit->coefficient("slope") << " R^2=" << out.fit->r_squared
            << "\n  with intercept: intercept=" << out.fit_free->coefficient("intercept")
            << " slope=" << out.fit_free->coefficient("slope") << " R^2=" << out.fit_free->r_squared << "\n";
        fit_rows.emplace_back("through_origin", "slope", out.fit->coefficient("slope"));
        fit_rows.emplace_back("through_origin", "r_squared", out.fit->r_squared);
        fit_rows.emplace_back("free_intercept", "intercept", out.fit_free->coefficient("intercept"));
        fit_rows.emplace_back("free_intercept", "slope", out.fit_free->coefficient("slope"));
        fit_rows.emplace_back("free_intercept", "r_squared", out.fit_free->r_squared);
    } catch (const InvalidArgument& e) {
        out.fit_error = std::string("rho_max fit rejected: ") + e.what();
        sum << "  " << out.fit_error << "\n";
    }
    sum << "  rho_max nondecreasing in m: " << (out.strictly_monotone ? "yes" : "no")
        << "; within search tolerance " << c.exp2.search.tol << ": " << (out.monotone ? "yes" : "no") << "\n";
    fit_rows.emplace_back("monotone", "within_tolerance", out.monotone ? 1.0 : 0.0);

    if (!out.ridge.empty()) {
        std::vector<double> rr;
        out.ridge_binding = true;
        for (const auto& cell : out.ridge) {
            if (!cell.skipped) {
                rr.push_back(cell.search.rho_max);
                out.ridge_binding = out.ridge_binding && cell.search.binding;
            }
        }
        if (!rr.empty()) {
            const double lo = *std::min_element(rr.begin(), rr.end());
            const double hi = *std::max_element(rr.begin(), rr.end());
            const double mean = std::accumulate(rr.begin(), rr.end(), 0.0) / static_cast<double>(rr.size());
            out.ridge_spread = (hi - lo) / mean;
            // a cap reached by every cell is flat for no reason
            out.ridge_flat = out.ridge_binding && out.ridge_spread <= c.exp2.flat_tolerance;
            sum << "  ridge control rho_max:";
            for (const auto& cell : out.ridge) {
                sum << " m=" << cell.m << ":" << cell.search.rho_max << (cell.search.binding ? "" : "*");
            }
            sum << "; spread " << out.ridge_spread << " (flat: " << (out.ridge_flat ? "yes" : "no")
                << (out.ridge_binding ? "" : "; * = increment never reached epsilon, control inconclusive") << ")\n";
            fit_rows.emplace_back("ridge_control", "spread", out.ridge_spread);
        }
    }
    write_fit_csv(ctx.out("exp2_fit.csv"), fit_rows);

    PlotSpec plot{"Safe radius vs capacity", "sqrt(m)", "rho_max", {}};
    const std::vector<std::pair<const std::vector<Exp2Cell>*, std::string>> groups{{&out.transformer, "#1f77b4"},
                                                                                  {&out.ridge, "#2ca02c"}};
    for (const auto& [group, color] : groups) {
        if (group->empty()) {
            continue;
        }
        PlotSeries s{to_string(group->front().path), color, {}, false};
        for (const auto& cell : *group) {
            if (cell.record) {
                s.points.push_back({std::sqrt(double(cell.m)), cell.search.rho_max, 0.0, cell.record->key()});
            }
        }
        plot.series.push_back(s);
    }
    if (out.fit) {
        PlotSeries line{"slope sqrt(m)", "#d62728", {}, true};
        const double hi = *std::max_element(sqrt_m.begin(), sqrt_m.end());
        line.points = {{0.0, 0.0, 0.0, ""}, {hi, out.fit->coefficient("slope") * hi, 0.0, ""}};
        plot.series.push_back(line);
    }
    write_svg(ctx.out("exp2.svg"), plot);
    out.summary = sum.str();
    write_text(ctx.out("exp2_summary.txt"), out.summary);
    return out;
}

// ---------------------------------------------------------------------------
// Exp 3: sample tax vs radius

struct Exp3Cell {
    double rho = 0.0;
    std::optional<int> n_rho;
    std::string error;
    std::vector<ResultRecord> scanned;
    std::vector<std::string> lines;
};

struct Exp3Result {
    std::vector<ResultRecord> records;
    std::vector<Exp3Cell> cells;
    double target = 0.0;
    std::optional<ScalingFitReport> fit;          // N_rho - N0 = intercept + slope rho^2
    std::optional<ScalingFitReport> fit_origin;   // through the origin, diagnostic
    std::string fit_error;
    bool monotone = false;
    bool failed = false;  // some radius never reached the target
    std::string summary;
};

inline Exp3Result run_exp3(const ExperimentConfig& config) {
    RunContext ctx(config);
    const auto& c = ctx.config;
    const int m = c.m_grid.front();
    const int n0 = c.exp3.n0;
    ResultStore store(ctx.out("exp3.csv"), result_csv_header(), ctx.fingerprint(), c.resume);
    auto seeds_for = [&](int n) {
        return SeedTree(c.seed).child("exp3.pga", {static_cast<std::uint64_t>(m), static_cast<std::uint64_t>(n)});
    };

    Exp3Result out;
    const auto [target_rec, target_line] =
        cached_attack(ctx, store, key_row("exp3", 0.0, m, n0), c.path, c.noise, seeds_for(n0));
    out.target = target_rec.nominal_risk;
    ctx.log("exp3 target risk at N0=" + std::to_string(n0) + ": " + format_fixed(out.target, 6));

    out.cells.resize(c.rho_grid.size());
    run_cells(c.rho_grid.size(), c.workers, [&](std::size_t i) {
        Exp3Cell& cell = out.cells[i];
        cell.rho = c.rho_grid[i];
        try {
            const auto tax = find_sample_tax(out.target, n0, c.exp3.n_max, [&](int n) {
                auto [rec, line] = cached_attack(ctx, store, key_row("exp3", cell.rho, m, n), c.path, c.noise,
                                                 seeds_for(n));
                cell.scanned.push_back(rec);
                cell.lines.push_back(line);
                return RiskEstimate{rec.worst_risk, rec.worst_se, 0};
            });
            cell.n_rho = tax.n_rho;
            ctx.log("exp3 rho=" + format_fixed(cell.rho, 3) + " N_rho=" + std::to_string(tax.n_rho));
        } catch (const SearchFailure& e) {
            cell.error = e.what();
            ctx.log(std::string("exp3: ") + e.what());
        }
    });

    std::vector<std::string> lines{target_line};
    std::set<std::string> seen{target_rec.key()};
    out.records.push_back(target_rec);
    for (const auto& cell : out.cells) {
        for (std::size_t j = 0; j < cell.scanned.size(); ++j) {
            if (seen.insert(cell.scanned[j].key()).second) {
                lines.push_back(cell.lines[j]);
                out.records.push_back(cell.scanned[j]);
            }
        }
    }
    store.finalize(lines);

    std::vector<double> rho_sq, tax;
    out.monotone = true;
    std::optional<int> prev;
    std::ostringstream sum;
    sum << "exp3: " << to_string(c.path) << " path, d=" << c.d << ", m=" << m << ", N0=" << n0
        << ", target risk " << out.target << "\n";
    for (const auto& cell : out.cells) {
        sum << "  rho=" << cell.rho << ": ";
        if (!cell.n_rho) {
            out.failed = true;
            out.monotone = false;
            sum << "no N up to " << c.exp3.n_max << " reaches the target\n";
            continue;
        }
        sum << "N_rho=" << *cell.n_rho << " (N_rho - N0 = " << *cell.n_rho - n0 << ")\n";
        if (prev && *cell.n_rho < *prev) {
            out.monotone = false;
        }
        prev = cell.n_rho;
        rho_sq.push_back(cell.rho * cell.rho);
        tax.push_back(double(*cell.n_rho - n0));
    }
    std::vector<std::tuple<std::string, std::string, double>> fit_rows;
    try {
        if (rho_sq.size() < 3) {
            throw InvalidArgument("need at least three radii, got " + std::to_string(rho_sq.size()));
        }
        out.fit = fit_line(rho_sq, tax);
        out.fit_origin = fit_through_origin(rho_sq, tax);
        sum << "  N_rho - N0 = intercept + slope rho^2: intercept=" << out.fit->coefficient("intercept")
            << " slope=" << out.fit->coefficient("slope") << " R^2=" << out.fit->r_squared
            << "\n  through the origin: slope=" << out.fit_origin->coefficient("slope")
            << " R^2=" << out.fit_origin->r_squared << "\n";
        fit_rows.emplace_back("linear_rho_sq", "intercept", out.fit->coefficient("intercept"));
        fit_rows.emplace_back("linear_rho_sq", "slope", out.fit->coefficient("slope"));
        fit_rows.emplace_back("linear_rho_sq", "r_squared", out.fit->r_squared);
        fit_rows.emplace_back("through_origin", "slope", out.fit_origin->coefficient("slope"));
        fit_rows.emplace_back("through_origin", "r_squared", out.fit_origin->r_squared);
    } catch (const InvalidArgument& e) {
        out.fit_error = std::string("sample-tax fit rejected: ") + e.what();
        sum << "  " << out.fit_error << "\n";
    }
    sum << "  N_rho nondecreasing in rho: " << (out.monotone ? "yes" : "no") << "\n";
    fit_rows.emplace_back("monotone", "nondecreasing", out.monotone ? 1.0 : 0.0);
    write_fit_csv(ctx.out("exp3_fit.csv"), fit_rows);

    PlotSpec plot{"Sample tax vs squared radius", "rho^2", "N_rho - N0", {}};
    PlotSeries pts{"measured", "#1f77b4", {}, false};
    for (const auto& cell : out.cells) {
        if (cell.n_rho) {
            pts.points.push_back({cell.rho * cell.rho, double(*cell.n_rho - n0), 0.0, cell.scanned.back().key()});
        }
    }
    plot.series.push_back(pts);
    if (out.fit) {
        const double hi = *std::max_element(rho_sq.begin(), rho_sq.end());
        PlotSeries line{"linear fit", "#d62728", {}, true};
        line.points = {{0.0, out.fit->coefficient("intercept"), 0.0, ""},
                       {hi, out.fit->coefficient("intercept") + out.fit->coefficient("slope") * hi, 0.0, ""}};
        plot.series.push_back(line);
    }
    write_svg(ctx.out("exp3.svg"), plot);
    out.summary = sum.str();
    write_text(ctx.out("exp3_summary.txt"), out.summary);
    return out;
}

// ---------------------------------------------------------------------------
// Regularization sweep

struct LambdaSweepResult {
    std::vector<ResultRecord> records;
    std::vector<double> relative_increase;  // (worst - nominal) / nominal per lambda
    bool verdict = false;                   // nonincreasing in lambda
    bool nominal_nonincreasing = false;
    std::string summary;
};

/// The noise variance carries lambda: sigma^2 = lambda sigma_beta^2.
inline LambdaSweepResult run_lambda_sweep(const ExperimentConfig& config) {
    RunContext ctx(config);
    const auto& c = ctx.config;
    const int m = c.m_grid.front();
    const int n = c.n_grid.front();
    const double rho = c.lambda_sweep.rho;
    ResultStore store(ctx.out("lambda_sweep.csv"), result_csv_header(), ctx.fingerprint(), c.resume);
    std::vector<ResultRecord> recs(c.lambda_grid.size());
    std::vector<std::string> lines(c.lambda_grid.size());
    run_cells(c.lambda_grid.size(), c.workers, [&](std::size_t i) {
        const double lambda = c.lambda_grid[i];
        const NoiseConfig noise(lambda * c.noise.sigma_beta_sq, c.noise.sigma_beta_sq);
        const SeedTree seeds = SeedTree(c.seed).child(
            "lambda.pga", {static_cast<std::uint64_t>(m), static_cast<std::uint64_t>(n), bits_of(lambda)});
        auto [rec, line] = cached_attack(ctx, store, key_row("lambda_sweep", rho, m, n), c.path, noise, seeds);
        recs[i] = rec;
        lines[i] = line;
    });
    store.finalize(lines);

    LambdaSweepResult out;
    out.records = recs;
    out.verdict = true;
    out.nominal_nonincreasing = true;
    std::ostringstream sum;
    sum << "lambda sweep: " << to_string(c.path) << " path, d=" << c.d << ", m=" << m << ", N=" << n
        << ", rho=" << rho << "\n";
    std::vector<std::tuple<std::string, std::string, double>> fit_rows;
    for (std::size_t i = 0; i < recs.size(); ++i) {
        const double rel = recs[i].increment() / recs[i].nominal_risk;
        out.relative_increase.push_back(rel);
        if (i > 0) {
            out.verdict = out.verdict && rel <= out.relative_increase[i - 1];
            out.nominal_nonincreasing = out.nominal_nonincreasing && recs[i].nominal_risk <= recs[i - 1].nominal_risk;
        }
        sum << "  lambda=" << recs[i].lambda << ": nominal " << recs[i].nominal_risk << ", worst " << recs[i].worst_risk
            << ", relative increase " << rel << "\n";
        fit_rows.emplace_back("relative_increase", "lambda=" + format_fixed(recs[i].lambda, 3), rel);
    }
    sum << "  relative increase nonincreasing in lambda: " << (out.verdict ? "yes" : "no") << "\n";
    sum << "  nominal risk nonincreasing in lambda: " << (out.nominal_nonincreasing ? "yes" : "no") << "\n";
    fit_rows.emplace_back("verdict", "relative_nonincreasing", out.verdict ? 1.0 : 0.0);
    fit_rows.emplace_back("verdict", "nominal_nonincreasing", out.nominal_nonincreasing ? 1.0 : 0.0);
    write_fit_csv(ctx.out("lambda_sweep_fit.csv"), fit_rows);

    PlotSpec plot{"Relative worst-case increase vs lambda", "lambda", "(worst - nominal) / nominal", {}};
    PlotSeries pts{"measured", "#1f77b4", {}, false};
    for (std::size_t i = 0; i < recs.size(); ++i) {
        pts.points.push_back({recs[i].lambda, out.relative_increase[i], 0.0, recs[i].key()});
    }
    plot.series.push_back(pts);
    write_svg(ctx.out("lambda_sweep.svg"), plot);
    out.summary = sum.str();
    write_text(ctx.out("lambda_sweep_summary.txt"), out.summary);
    return out;
}

// ---------------------------------------------------------------------------
// verify

struct VerifyReport {
    std::vector<CheckResult> checks;
    bool all_passed() const {
        return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
    }
    std::string table() const {
        std::ostringstream os;
        for (const auto& c : checks) {
            os << (c.passed ? "PASS " : "FAIL ") << c.name << ": " << c.detail << "\n";
        }
        return os.str();
    }
};

inline VerifyReport run_verify(const ExperimentConfig& config) {
    RunContext ctx(config);
    const auto& c = ctx.config;
    const SeedTree seeds(c.seed);
    VerifyReport rep;
    auto add = [&](CheckResult r) {
        ctx.log((r.passed ? "PASS " : "FAIL ") + r.name);
        rep.checks.push_back(std::move(r));
    };
    add(check_gradients(seeds.seed_for("verify.gradients")));
    add(check_w2_identities(seeds.seed_for("verify.w2")));
    add(check_projection(seeds.seed_for("verify.projection")));
    add(check_ridge_closed_form(seeds.seed_for("verify.ridge")));
    add(check_singular_values(seeds.seed_for("verify.singular")));
    add(check_semi_analytic_vs_mc(seeds.seed_for("verify.semi_analytic")));
    add(check_pga_oracle(seeds.seed_for("verify.pga"), {0.5, 1.0, 1.5}));

    const auto& v = c.verify;
    std::ostringstream cell;
    cell << "cell d=" << v.d << ",m=" << v.m << ",N=" << v.n;
    ModelCache models(c.resolved_checkpoint_dir(), c.train, c.seed, ctx.log);
    try {
        const auto tm = models.get(v.d, v.m, v.n, c.noise, /*strict=*/true);
        add(check_ridge_equivalence(tm->model, c.noise, v.n, seeds.seed_for("verify.equivalence"),
                                    v.equivalence_tolerance, v.equivalence_prompts, cell.str()));
    } catch (const std::exception& e) {
        add({"ridge_equivalence", false, e.what()});
    }

    std::ofstream csv(ctx.out("verify.csv"), std::ios::trunc);
    csv << "check,passed,detail\n";
    for (const auto& r : rep.checks) {
        std::string detail = r.detail;
        std::replace(detail.begin(), detail.end(), ',', ';');
        csv << r.name << ',' << (r.passed ? 1 : 0) << ',' << detail << '\n';
    }
    return rep;
}

} // namespace robicl
