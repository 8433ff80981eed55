#include "robicl/experiments.hpp"

#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>
#include <set>

using namespace robicl;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "robicl_test_experiments" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

std::vector<std::string> lines_of(const fs::path& p) {
    std::vector<std::string> out;
    std::ifstream is(p);
    for (std::string l; std::getline(is, l);) {
        out.push_back(l);
    }
    return out;
}

// Small ridge-path settings (N < d, so the adversary has a strong gradient)
// that keep each run around a second.
ExperimentConfig small(const std::string& exp, const fs::path& out) {
    auto c = ExperimentConfig::defaults(exp);
    c.d = 8;
    c.n_grid = {6};
    c.rho_grid = {0.0, 0.4, 0.8, 1.2, 1.6, 2.0};
    c.pga.iterations = 120;
    c.pga.tasks_per_step = 32;
    c.pga.risk_eval_samples = 500;
    c.out_dir = out.string();
    c.quiet = true;
    return c;
}

} // namespace

TEST_CASE("config rejects unknown keys", "[config]") {
    const auto base = ExperimentConfig::defaults("exp1");
    CHECK_NOTHROW(apply_json(base, nlohmann::json::parse(R"({"d": 7, "pga": {"iterations": 10}})")));
    CHECK(apply_json(base, nlohmann::json::parse(R"({"d": 7})")).d == 7);
    CHECK_THROWS_WITH(apply_json(base, nlohmann::json::parse(R"({"dd": 7})")), Catch::Matchers::ContainsSubstring("dd"));
    CHECK_THROWS_WITH(apply_json(base, nlohmann::json::parse(R"({"pga": {"iters": 10}})")),
                      Catch::Matchers::ContainsSubstring("pga.iters"));
    CHECK_THROWS_AS(apply_json(base, nlohmann::json::parse(R"({"experiment": "exp2"})")), InvalidArgument);
    CHECK_THROWS_AS(apply_json(base, nlohmann::json::parse(R"({"path": "lasso"})")), InvalidArgument);
}

#ifdef ROBICL_CONFIG_DIR
TEST_CASE("sample configs load", "[config]") {
    int count = 0;
    for (const auto& entry : fs::directory_iterator(ROBICL_CONFIG_DIR)) {
        if (entry.path().extension() != ".json") {
            continue;
        }
        const auto j = nlohmann::json::parse(slurp(entry.path()));
        const auto exp = j.at("experiment").get<std::string>();
        INFO(entry.path().string());
        CHECK_NOTHROW(load_config(entry.path().string(), ExperimentConfig::defaults(exp)).validate());
        ++count;
    }
    CHECK(count >= 5);
}
#endif

TEST_CASE("config defaults", "[config]") {
    const auto c = ExperimentConfig::defaults("exp1");
    CHECK(c.d == 20);
    CHECK(c.noise.sigma_sq == 0.1);
    CHECK(c.noise.sigma_beta_sq == 1.0);
    CHECK(c.noise.lambda() == Catch::Approx(0.1));
    CHECK(c.rho_grid.size() == 9);
    CHECK(c.rho_grid.back() == 2.0);
    const auto e2 = ExperimentConfig::defaults("exp2");
    CHECK(e2.d == 10);
    CHECK(e2.m_grid == std::vector<int>{4, 8, 16, 32});
    CHECK(e2.path == PredictorPath::transformer);
    const auto e2p = ExperimentConfig::defaults("exp2", true);
    CHECK(e2p.d == 20);
    CHECK(e2p.m_grid == std::vector<int>{4, 8, 16, 32, 64});
    auto bad = c;
    bad.rho_grid.clear();
    CHECK_THROWS_AS(bad.validate(), InvalidArgument);
    bad = c;
    bad.m_grid = {6};  // not a multiple of the head count
    CHECK_THROWS_AS(bad.validate(), InvalidArgument);
}

TEST_CASE("fixed-notation formatting keeps nine significant digits", "[results]") {
    CHECK(format_fixed(1.0) == "1.00000000");
    CHECK(format_fixed(0.1) == "0.100000000");
    CHECK(format_fixed(123456.789012) == "123456.789");
    CHECK(format_fixed(-0.00123456789012) == "-0.00123456789");
    CHECK(format_fixed(0.0) == "0.00000000");
    CHECK(format_fixed(0.99999999996) == "1.00000000");
    CHECK(format_fixed(9.9999999999) == "10.0000000");
    CHECK(format_fixed(1e12).find('e') == std::string::npos);
}

TEST_CASE("result rows round trip through CSV", "[results]") {
    ResultRecord r;
    r.exp_id = "exp1";
    r.rho = 0.25;
    r.m = 16;
    r.n = 15;
    r.lambda = 0.1;
    r.path = "ridge";
    r.seed = 42;
    r.nominal_risk = 1.0 / 3.0;
    r.nominal_se = 1e-4;
    r.worst_risk = 2.0 / 3.0;
    r.worst_se = 2e-4;
    r.adv_mu_norm = 0.1;
    r.adv_sigma = 1.2;
    r.pga_converged = true;
    const auto line = r.to_csv();
    CHECK(split_csv_line(line).size() == split_csv_line(result_csv_header()).size());
    CHECK(ResultRecord::parse(line).to_csv() == line);
    CHECK(r.canonical().canonical().to_csv() == line);
    CHECK(r.key() == "exp1,0.250000000,16,15,0.100000000,ridge,42");
    CHECK_THROWS_AS(ResultRecord::parse("exp1,0.1"), InvalidArgument);
    CHECK_THROWS_AS(ResultRecord::parse(std::regex_replace(line, std::regex("^exp1,0.25"), "exp1,abc")),
                    InvalidArgument);
}

TEST_CASE("result store drops torn rows and rows from other settings", "[results]") {
    const auto dir = fresh_dir("store");
    const auto path = dir / "x.csv";
    {
        ResultStore s(path, "a,b,c", "fp1", true, 1);
        s.append("k1", "k1,1,2");
        s.append("k2", "k2,3,4");
    }
    {
        std::ofstream(path, std::ios::app) << "k3,5";  // interrupted mid-row
    }
    {
        ResultStore s(path, "a,b,c", "fp1", true, 1);
        CHECK(s.cached_count() == 2);
        CHECK(s.find("k2") == std::optional<std::string>("k2,3,4"));
        CHECK_FALSE(s.find("k3"));
        CHECK(s.hits() == 1);
    }
    {
        ResultStore s(path, "a,b,c", "fp2", true, 1);
        CHECK(s.cached_count() == 0);
    }
    {
        ResultStore s(path, "a,b,c", "fp2", false, 1);
        CHECK(s.cached_count() == 0);
    }
}

TEST_CASE("run_cells preserves cell order and rethrows", "[harness]") {
    std::vector<int> out(50);
    run_cells(out.size(), 4, [&](std::size_t i) { out[i] = static_cast<int>(i * i); });
    for (std::size_t i = 0; i < out.size(); ++i) {
        CHECK(out[i] == static_cast<int>(i * i));
    }
    CHECK_THROWS_AS(run_cells(5, 3,
                              [](std::size_t i) {
                                  if (i == 3) {
                                      throw NumericalError("boom");
                                  }
                              }),
                    NumericalError);
}

TEST_CASE("exp1 on the ridge path", "[harness][exp1]") {
    const auto dir = fresh_dir("exp1");
    const auto c = small("exp1", dir);
    const auto res = run_exp1(c);
    REQUIRE(res.records.size() == c.rho_grid.size());
    REQUIRE(res.fit);
    CHECK(res.fit->coefficient("a") > 0.0);
    CHECK(res.fit->coefficient("b") > 0.0);
    CHECK(res.fit->r_squared >= 0.9);
    for (const auto& r : res.records) {
        CHECK(r.nominal_se > 0.0);
        CHECK(r.worst_risk >= r.nominal_risk - 2.0 * r.worst_se);
        CHECK(r.wall_ms == 0.0);
    }
    CHECK(res.records.front().increment() == 0.0);
    // worst-case risk grows with the radius
    for (std::size_t i = 1; i < res.records.size(); ++i) {
        CHECK(res.records[i].worst_risk > res.records[i - 1].worst_risk);
    }
    const auto csv = lines_of(dir / "exp1.csv");
    REQUIRE(csv.size() == c.rho_grid.size() + 1);
    CHECK(csv.front() == result_csv_header());
    for (const auto* f : {"exp1_fit.csv", "exp1_summary.txt", "exp1.svg"}) {
        CHECK(fs::exists(dir / f));
    }

    SECTION("every plotted point names exactly one row") {
        std::set<std::string> keys;
        for (std::size_t i = 1; i < csv.size(); ++i) {
            keys.insert(ResultRecord::parse(csv[i]).key());
        }
        const std::string svg = slurp(dir / "exp1.svg");
        const std::regex cell("data-cell=\"([^\"]*)\"");
        std::set<std::string> seen;
        for (auto it = std::sregex_iterator(svg.begin(), svg.end(), cell); it != std::sregex_iterator(); ++it) {
            const std::string k = (*it)[1];
            CHECK(keys.count(k) == 1);
            CHECK(seen.insert(k).second);
        }
        CHECK(seen.size() == keys.size());
    }
}

TEST_CASE("exp1 with a single radius rejects the fit", "[harness][exp1]") {
    const auto dir = fresh_dir("exp1_single");
    auto c = small("exp1", dir);
    c.rho_grid = {0.0};
    const auto res = run_exp1(c);
    REQUIRE(res.records.size() == 1);
    CHECK(res.records[0].increment() == 0.0);
    CHECK_FALSE(res.fit);
    CHECK_THAT(res.fit_error, Catch::Matchers::ContainsSubstring("rejected"));
    CHECK_THAT(res.summary, Catch::Matchers::ContainsSubstring("rejected"));
}

TEST_CASE("results do not depend on the worker count", "[harness][determinism]") {
    const auto d1 = fresh_dir("workers1");
    const auto d3 = fresh_dir("workers3");
    auto c = small("exp1", d1);
    run_exp1(c);
    c.out_dir = d3.string();
    c.workers = 3;
    run_exp1(c);
    CHECK(slurp(d1 / "exp1.csv") == slurp(d3 / "exp1.csv"));
    CHECK(slurp(d1 / "exp1_fit.csv") == slurp(d3 / "exp1_fit.csv"));
}

TEST_CASE("an interrupted grid resumes to the same CSV", "[harness][resume]") {
    const auto full = fresh_dir("resume_full");
    const auto part = fresh_dir("resume_part");
    auto c = small("exp1", full);
    run_exp1(c);
    const std::string expected = slurp(full / "exp1.csv");

    c.out_dir = part.string();
    run_exp1(c);
    // keep the header, three rows and half of the fourth
    auto rows = lines_of(part / "exp1.csv");
    {
        std::ofstream os(part / "exp1.csv", std::ios::trunc);
        for (int i = 0; i < 4; ++i) {
            os << rows[i] << '\n';
        }
        os << rows[4].substr(0, rows[4].size() / 2);
    }
    ResultStore probe(part / "exp1.csv", result_csv_header(), fingerprint_json(c).dump());
    CHECK(probe.cached_count() == 3);
    run_exp1(c);
    CHECK(slurp(part / "exp1.csv") == expected);

    SECTION("cached rows are reused only under the same settings") {
        auto rows2 = lines_of(part / "exp1.csv");
        auto fields = split_csv_line(rows2[2]);
        fields[9] = "99.0000000";
        std::string tampered = fields[0];
        for (std::size_t i = 1; i < fields.size(); ++i) {
            tampered += "," + fields[i];
        }
        rows2[2] = tampered;
        {
            std::ofstream os(part / "exp1.csv", std::ios::trunc);
            for (const auto& l : rows2) {
                os << l << '\n';
            }
        }
        run_exp1(c);
        CHECK(lines_of(part / "exp1.csv")[2] == tampered);
        auto other = c;
        other.pga.iterations = 121;
        run_exp1(other);
        CHECK(slurp(part / "exp1.csv") == expected);
    }
}

TEST_CASE("lambda sweep on the ridge path", "[harness][lambda]") {
    const auto dir = fresh_dir("lambda");
    auto c = small("lambda_sweep", dir);
    SECTION("single lambda is trivially monotone") {
        c.lambda_grid = {0.1};
        const auto res = run_lambda_sweep(c);
        CHECK(res.verdict);
        REQUIRE(res.records.size() == 1);
    }
    SECTION("lambda is carried by the noise variance") {
        const auto res = run_lambda_sweep(c);
        REQUIRE(res.records.size() == 4);
        for (std::size_t i = 0; i < 4; ++i) {
            CHECK(res.records[i].lambda == Catch::Approx(c.lambda_grid[i]));
        }
        CHECK(res.relative_increase.size() == 4);
    }
}

TEST_CASE("exp2 with a single capacity reports rho_max without a fit", "[harness][exp2]") {
    const auto dir = fresh_dir("exp2_single");
    auto c = small("exp2", dir);
    c.path = PredictorPath::ridge;
    c.m_grid = {16};
    c.exp2.epsilon = 0.5;
    c.exp2.search.max_widen = 4;
    const auto res = run_exp2(c);
    REQUIRE(res.transformer.size() == 1);
    CHECK(res.ridge.empty());
    CHECK_FALSE(res.fit);
    CHECK_THAT(res.fit_error, Catch::Matchers::ContainsSubstring("rejected"));
    REQUIRE(res.records.size() == 1);
    const double rho_max = res.transformer[0].search.rho_max;
    CHECK(rho_max > 0.0);
    CHECK(res.records[0].rho == Catch::Approx(rho_max).epsilon(1e-8));
    // the row at rho_max is within the tolerated increment
    CHECK(res.records[0].increment() <= c.exp2.epsilon + 3.0 * res.records[0].worst_se);
    const auto probes = lines_of(dir / "exp2_probes.csv");
    CHECK(probes.front() == probe_csv_header());
    CHECK(probes.size() == res.transformer[0].search.probes.size() + 1);
}

TEST_CASE("exp3 at zero radius needs no extra samples", "[harness][exp3]") {
    const auto dir = fresh_dir("exp3");
    auto c = small("exp3", dir);
    c.rho_grid = {0.0, 0.5};
    c.exp3.n0 = 5;
    c.exp3.n_max = 60;
    const auto res = run_exp3(c);
    REQUIRE(res.cells.size() == 2);
    REQUIRE(res.cells[0].n_rho);
    CHECK(*res.cells[0].n_rho == c.exp3.n0);
    REQUIRE(res.cells[1].n_rho);
    CHECK(*res.cells[1].n_rho >= c.exp3.n0);
    CHECK(res.monotone);
    CHECK_FALSE(res.fit);  // two radii are too few
    // every (rho, N) row appears once
    std::set<std::string> keys;
    for (const auto& r : res.records) {
        CHECK(keys.insert(r.key()).second);
    }
}

TEST_CASE("exp3 reports a radius that never reaches the target", "[harness][exp3]") {
    const auto dir = fresh_dir("exp3_fail");
    auto c = small("exp3", dir);
    c.rho_grid = {0.0, 2.0};
    c.exp3.n_max = 6;
    const auto res = run_exp3(c);
    CHECK(res.failed);
    CHECK_FALSE(res.cells[1].n_rho);
    CHECK_THAT(res.cells[1].error, Catch::Matchers::ContainsSubstring("N=6"));
}

TEST_CASE("model cache trains once, reloads, and names the cell on corruption", "[harness][checkpoint][train]") {
    const auto dir = fresh_dir("cache");
    TrainConfig tc;
    tc.steps = 200;
    tc.tasks_total = 500;
    tc.validation_tasks = 128;
    Logger log(true);
    const NoiseConfig noise(0.1, 1.0);
    ModelCache cache(dir.string(), tc, 7, log);
    const auto a = cache.get(3, 4, 10, noise);
    CHECK_FALSE(a->from_checkpoint);
    CHECK(fs::exists(a->checkpoint));
    CHECK(cache.get(3, 4, 10, noise) == a);  // memoized

    ModelCache again(dir.string(), tc, 7, log);
    const auto b = again.get(3, 4, 10, noise, true);
    CHECK(b->from_checkpoint);
    CHECK(b->model.parameters() == a->model.parameters());

    SECTION("equivalence check is live") {
        const auto loose = check_ridge_equivalence(b->model, noise, 10, 5, 1e6, 200, "cell");
        CHECK(loose.passed);
        const auto tight = check_ridge_equivalence(b->model, noise, 10, 5, 1e-3, 200, "cell");
        CHECK_FALSE(tight.passed);
    }
    SECTION("other training settings force a retrain") {
        auto tc2 = tc;
        tc2.steps = 201;
        ModelCache other(dir.string(), tc2, 7, log);
        CHECK_FALSE(other.get(3, 4, 10, noise)->from_checkpoint);
    }
    SECTION("a corrupted checkpoint is fatal in strict mode") {
        std::string bytes = slurp(a->checkpoint);
        bytes[0] = 'Z';
        std::ofstream(a->checkpoint, std::ios::binary | std::ios::trunc) << bytes;
        ModelCache strict(dir.string(), tc, 7, log);
        CHECK_THROWS_WITH(strict.get(3, 4, 10, noise, true),
                          Catch::Matchers::ContainsSubstring("cell d=3,m=4,N=10"));
        ModelCache lenient(dir.string(), tc, 7, log);
        CHECK_FALSE(lenient.get(3, 4, 10, noise)->from_checkpoint);
    }
}

#ifdef ROBICL_CLI_PATH
namespace {

int run_cli(const std::string& args) {
    const std::string cmd = std::string(ROBICL_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

} // namespace

TEST_CASE("cli exit codes and determinism", "[cli]") {
    const auto dir = fresh_dir("cli");
    const auto cfg = dir / "small.json";
    std::ofstream(cfg) << R"({"d": 8, "n_grid": [6], "rho_grid": [0, 0.5, 1, 1.5, 2],
                            "pga": {"iterations": 80, "tasks_per_step": 16, "risk_eval_samples": 300}})";
    const auto bad = dir / "bad.json";
    std::ofstream(bad) << R"({"d": 5, "colour": "blue"})";

    CHECK(run_cli("") == 1);
    CHECK(run_cli("exp1 --bogus") == 1);
    CHECK(run_cli("exp1 --config " + bad.string() + " --out " + (dir / "x").string()) == 1);
    CHECK(run_cli("exp1 --quiet --config " + cfg.string() + " --out " + (dir / "a").string()) == 0);
    CHECK(run_cli("exp1 --quiet --no-resume --workers 2 --config " + cfg.string() + " --out " +
                  (dir / "b").string()) == 0);
    CHECK(slurp(dir / "a" / "exp1.csv") == slurp(dir / "b" / "exp1.csv"));
    CHECK(run_cli("attack --quiet --rho 0.5 --config " + cfg.string() + " --out " + (dir / "c").string()) == 0);
    CHECK(lines_of(dir / "c" / "attack.csv").size() == 2);
    CHECK(lines_of(dir / "c" / "attack_trace.csv").front() == "iteration,mu_norm,sigma,step,risk,w2");
}
#endif
