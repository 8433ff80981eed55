// Command-line front end for the robust in-context learning experiments.

#include "robicl/experiments.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kVerifyFailed = 2;
constexpr int kNumerical = 3;

struct CommonFlags {
    std::string config_file;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<int> workers;
    bool full_scale = false;
    bool record_timing = false;
    bool no_resume = false;
    bool quiet = false;
    std::optional<std::string> path;
    std::optional<std::string> checkpoint_dir;
};

void add_common(CLI::App* sub, CommonFlags& f) {
    sub->add_option("--config", f.config_file, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", f.seed, "master seed");
    sub->add_option("--out", f.out, "output directory");
    sub->add_option("--workers", f.workers, "worker threads")->check(CLI::PositiveNumber);
    sub->add_flag("--paper-scale", f.full_scale, "full-size grids");
    sub->add_flag("--record-timing", f.record_timing, "fill the wall_ms column");
    sub->add_flag("--no-resume", f.no_resume, "ignore rows already in the output CSV");
    sub->add_flag("--quiet", f.quiet, "no progress output");
    sub->add_option("--path", f.path, "predictor path: ridge or transformer");
    sub->add_option("--checkpoint-dir", f.checkpoint_dir, "where trained models are kept");
}

robicl::ExperimentConfig resolve(const std::string& exp, const CommonFlags& f) {
    auto c = robicl::ExperimentConfig::defaults(exp, f.full_scale);
    if (!f.config_file.empty()) {
        c = robicl::load_config(f.config_file, c);
    }
    if (f.seed) c.seed = *f.seed;
    if (f.out) c.out_dir = *f.out;
    if (f.workers) c.workers = *f.workers;
    if (f.record_timing) c.record_timing = true;
    if (f.no_resume) c.resume = false;
    if (f.quiet) c.quiet = true;
    if (f.path) c.path = robicl::parse_path(*f.path);
    if (f.checkpoint_dir) c.checkpoint_dir = *f.checkpoint_dir;
    c.validate();
    return c;
}

int run_train(const robicl::ExperimentConfig& c, int m, int n) {
    robicl::RunContext ctx(c);
    const auto tm = ctx.models.get(c.d, m, n, c.noise);
    std::printf("checkpoint %s\nvalidation_mse %.9g\nridge_validation_mse %.9g\nsteps_run %d\n", tm->checkpoint.c_str(),
                tm->validation_mse, tm->ridge_validation_mse, tm->steps_run);
    return kOk;
}

int run_attack(const robicl::ExperimentConfig& c, int m, int n, double rho) {
    robicl::RunContext ctx(c);
    const robicl::SeedTree seeds = robicl::SeedTree(c.seed).child(
        "attack.pga", {static_cast<std::uint64_t>(c.path), static_cast<std::uint64_t>(m), static_cast<std::uint64_t>(n)});
    const auto res = robicl::attack(ctx, c.path, c.noise, m, n, rho, 1, seeds);
    const auto rec = robicl::make_record(ctx, "attack", c.path, c.noise, m, n, rho, res, 0.0);
    {
        std::ofstream os(ctx.out("attack.csv"), std::ios::trunc);
        os << robicl::result_csv_header() << '\n' << rec.to_csv() << '\n';
    }
    {
        std::ofstream os(ctx.out("attack_trace.csv"), std::ios::trunc);
        robicl::write_trace_csv(os, res.trace);
    }
    std::cout << robicl::result_csv_header() << '\n' << rec.to_csv() << '\n';
    return kOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Worst-case risk of in-context linear regression under Wasserstein task shift"};
    app.require_subcommand(1);

    CommonFlags flags;
    int m = 16, n = 15;
    double rho = 1.0;
    std::map<std::string, std::string> exp_of{{"train", "train"}, {"attack", "attack"}, {"exp1", "exp1"},
                                              {"exp2", "exp2"},   {"exp3", "exp3"},     {"lambda-sweep", "lambda_sweep"},
                                              {"verify", "verify"}};
    std::map<std::string, CLI::App*> subs;
    const std::map<std::string, std::string> help{
        {"train", "train (or load) one linear-attention model"},
        {"attack", "run one PGA attack and write its trace"},
        {"exp1", "worst-case risk increment vs radius"},
        {"exp2", "safe radius vs capacity"},
        {"exp3", "sample tax vs radius"},
        {"lambda-sweep", "relative worst-case increase vs regularization"},
        {"verify", "property and equivalence checks"}};
    for (const auto& [name, desc] : help) {
        auto* sub = app.add_subcommand(name, desc);
        add_common(sub, flags);
        if (name == "train" || name == "attack") {
            sub->add_option("--m", m, "total head dimension")->check(CLI::PositiveNumber);
            sub->add_option("--n", n, "context length")->check(CLI::PositiveNumber);
        }
        if (name == "attack") {
            sub->add_option("--rho", rho, "Wasserstein radius")->check(CLI::NonNegativeNumber);
        }
        subs[name] = sub;
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    std::string name;
    for (const auto& [k, sub] : subs) {
        if (sub->parsed()) {
            name = k;
        }
    }
    try {
        const auto c = resolve(exp_of.at(name), flags);
        if (name == "train") {
            return run_train(c, m, n);
        }
        if (name == "attack") {
            return run_attack(c, m, n, rho);
        }
        if (name == "exp1") {
            std::cout << robicl::run_exp1(c).summary;
            return kOk;
        }
        if (name == "exp2") {
            std::cout << robicl::run_exp2(c).summary;
            return kOk;
        }
        if (name == "exp3") {
            std::cout << robicl::run_exp3(c).summary;
            return kOk;
        }
        if (name == "lambda-sweep") {
            std::cout << robicl::run_lambda_sweep(c).summary;
            return kOk;
        }
        const auto rep = robicl::run_verify(c);
        std::cout << rep.table();
        return rep.all_passed() ? kOk : kVerifyFailed;
    } catch (const robicl::InvalidArgument& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kUsage;
    } catch (const robicl::NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return kNumerical;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kNumerical;
    }
}
