#pragma once

// Result rows, their CSV encoding, and an append-only store that lets an
// interrupted grid resume from the rows already on disk.

#include "robicl/common.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace robicl {

/// Fixed-notation decimal with `sig` significant digits.
inline std::string format_fixed(double v, int sig = 9) {
    if (std::isnan(v)) {
        return "nan";
    }
    if (std::isinf(v)) {
        return v > 0 ? "inf" : "-inf";
    }
    if (v == 0.0) {
        return "0." + std::string(static_cast<std::size_t>(sig - 1), '0');
    }
    int exp10 = static_cast<int>(std::floor(std::log10(std::abs(v))));
    char buf[512];
    std::snprintf(buf, sizeof buf, "%.*f", std::max(0, sig - 1 - exp10), v);
    // rounding can carry into the next power of ten
    if (std::abs(std::strtod(buf, nullptr)) >= std::pow(10.0, exp10 + 1)) {
        ++exp10;
        std::snprintf(buf, sizeof buf, "%.*f", std::max(0, sig - 1 - exp10), v);
    }
    return buf;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

inline const std::string& result_csv_header() {
    static const std::string h = "exp_id,rho,m,N,lambda,path,seed,nominal_risk,nominal_se,worst_risk,worst_se,"
                                 "adv_mu_norm,adv_sigma,pga_converged,wall_ms";
    return h;
}

struct ResultRecord {
    std::string exp_id;
    double rho = 0.0;
    int m = 0;
    int n = 0;
    double lambda = 0.0;
    std::string path;
    std::uint64_t seed = 0;
    double nominal_risk = 0.0;
    double nominal_se = 0.0;
    double worst_risk = 0.0;
    double worst_se = 0.0;
    double adv_mu_norm = 0.0;
    double adv_sigma = 1.0;
    bool pga_converged = false;
    double wall_ms = 0.0;

    double increment() const { return worst_risk - nominal_risk; }

    /// Cell identifier: the first seven columns.
    std::string key() const {
        std::ostringstream os;
        os << exp_id << ',' << format_fixed(rho) << ',' << m << ',' << n << ',' << format_fixed(lambda) << ',' << path
           << ',' << seed;
        return os.str();
    }

    std::string to_csv() const {
        std::ostringstream os;
        os << key() << ',' << format_fixed(nominal_risk) << ',' << format_fixed(nominal_se) << ','
           << format_fixed(worst_risk) << ',' << format_fixed(worst_se) << ',' << format_fixed(adv_mu_norm) << ','
           << format_fixed(adv_sigma) << ',' << (pga_converged ? 1 : 0) << ',' << format_fixed(wall_ms);
        return os.str();
    }

    static ResultRecord parse(const std::string& line) {
        const auto f = split_csv_line(line);
        if (f.size() != 15) {
            throw InvalidArgument("result row has " + std::to_string(f.size()) + " fields, expected 15: " + line);
        }
        try {
            ResultRecord r;
            r.exp_id = f[0];
            r.rho = std::stod(f[1]);
            r.m = std::stoi(f[2]);
            r.n = std::stoi(f[3]);
            r.lambda = std::stod(f[4]);
            r.path = f[5];
            r.seed = std::stoull(f[6]);
            r.nominal_risk = std::stod(f[7]);
            r.nominal_se = std::stod(f[8]);
            r.worst_risk = std::stod(f[9]);
            r.worst_se = std::stod(f[10]);
            r.adv_mu_norm = std::stod(f[11]);
            r.adv_sigma = std::stod(f[12]);
            r.pga_converged = f[13] == "1";
            r.wall_ms = std::stod(f[14]);
            return r;
        } catch (const std::logic_error&) {
            throw InvalidArgument("malformed result row: " + line);
        }
    }

    /// Rounds every value to its CSV precision, so fresh and resumed rows
    /// feed identical numbers into later decisions.
    ResultRecord canonical() const { return parse(to_csv()); }
};

/// Rows on disk keyed by their first `key_fields` columns. New rows are
/// appended as they finish; `finalize` rewrites the file in a fixed order.
class ResultStore {
public:
    /// Rows are reused only when the sidecar "<path>.config.json" holds the
    /// same `fingerprint` (the settings that produced them).
    ResultStore(std::filesystem::path path, std::string header, const std::string& fingerprint, bool resume = true,
                std::size_t key_fields = 7)
        : path_(std::move(path)), header_(std::move(header)), key_fields_(key_fields) {
        const std::filesystem::path sidecar = path_.string() + ".config.json";
        bool same_settings = false;
        if (std::ifstream fp(sidecar); fp) {
            const std::string stored((std::istreambuf_iterator<char>(fp)), std::istreambuf_iterator<char>());
            same_settings = stored == fingerprint;
        }
        std::ifstream in(path_);
        std::string line;
        if (resume && same_settings && in && std::getline(in, line) && line == header_) {
            while (std::getline(in, line)) {
                if (line.empty()) {
                    continue;
                }
                const auto fields = split_csv_line(line);
                if (fields.size() != split_csv_line(header_).size()) {
                    continue;  // torn write from an interrupted run
                }
                cached_[key_of(fields)] = line;
            }
        }
        in.close();
        std::filesystem::create_directories(path_.parent_path().empty() ? "." : path_.parent_path());
        std::ofstream(sidecar, std::ios::trunc) << fingerprint;
        // rewrite with only the intact rows, then append
        std::ofstream out(path_, std::ios::trunc);
        out << header_ << '\n';
        for (const auto& [k, l] : cached_) {
            out << l << '\n';
        }
    }

    std::optional<std::string> find(const std::string& key) const {
        std::lock_guard lock(mu_);
        auto it = cached_.find(key);
        if (it == cached_.end()) {
            return std::nullopt;
        }
        ++hits_;
        return it->second;
    }

    void append(const std::string& key, const std::string& line) {
        std::lock_guard lock(mu_);
        cached_[key] = line;
        std::ofstream out(path_, std::ios::app);
        out << line << '\n';
    }

    void finalize(const std::vector<std::string>& ordered_lines) const {
        std::lock_guard lock(mu_);
        std::ofstream out(path_, std::ios::trunc);
        out << header_ << '\n';
        for (const auto& l : ordered_lines) {
            out << l << '\n';
        }
    }

    std::size_t cached_count() const {
        std::lock_guard lock(mu_);
        return cached_.size();
    }
    std::size_t hits() const {
        std::lock_guard lock(mu_);
        return hits_;
    }
    const std::filesystem::path& path() const noexcept { return path_; }

private:
    std::string key_of(const std::vector<std::string>& fields) const {
        std::string k;
        for (std::size_t i = 0; i < key_fields_ && i < fields.size(); ++i) {
            if (i) {
                k += ',';
            }
            k += fields[i];
        }
        return k;
    }

    std::filesystem::path path_;
    std::string header_;
    std::size_t key_fields_;
    std::map<std::string, std::string> cached_;
    mutable std::size_t hits_ = 0;
    mutable std::mutex mu_;
};

} // namespace robicl
