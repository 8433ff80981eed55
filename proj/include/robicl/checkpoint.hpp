#pragma once

// Binary checkpoints for LinearAttentionModel.
//
// Layout (little-endian):
//   char[8]  magic "RICLCKPT"
//   u32      format version
//   u32      d, heads, head_dim, N
//   u64      seed
//   u64      parameter count
//   f64[]    parameters, per head Q, K, V ((d+1) x head_dim, row-major), then O (m x (d+1), row-major)
// A JSON sidecar "<path>.meta.json" records the TrainConfig and final validation MSE.

#include "robicl/linear_attention.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

namespace robicl {

inline constexpr std::array<char, 8> kCheckpointMagic{'R', 'I', 'C', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointHeader {
    std::uint32_t version = kCheckpointVersion;
    std::uint32_t d = 0;
    std::uint32_t heads = 0;
    std::uint32_t head_dim = 0;
    std::uint32_t n = 0;
    std::uint64_t seed = 0;
};

struct Checkpoint {
    CheckpointHeader header;
    LinearAttentionModel model;
};

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

template <class T>
void put_le(std::ostream& os, T v) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    auto u = std::bit_cast<U>(v);
    std::array<char, sizeof(T)> buf{};
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        buf[i] = static_cast<char>((u >> (8 * i)) & 0xFF);
    }
    os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

template <class T>
T get_le(std::istream& is) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    std::array<unsigned char, sizeof(T)> buf{};
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!is) {
        throw CheckpointError("checkpoint truncated");
    }
    U u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        u |= static_cast<U>(buf[i]) << (8 * i);
    }
    return std::bit_cast<T>(u);
}

} // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const LinearAttentionModel& model, int n,
                            std::uint64_t seed) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw CheckpointError("cannot open checkpoint for writing: " + path.string());
    }
    os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
    detail::put_le<std::uint32_t>(os, kCheckpointVersion);
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(model.dim()));
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(model.heads()));
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(model.head_dim()));
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(n));
    detail::put_le<std::uint64_t>(os, seed);
    const auto& p = model.parameters();
    detail::put_le<std::uint64_t>(os, static_cast<std::uint64_t>(p.size()));
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        detail::put_le<double>(os, p[i]);
    }
    if (!os) {
        throw CheckpointError("failed writing checkpoint: " + path.string());
    }
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw CheckpointError("cannot open checkpoint: " + path.string());
    }
    std::array<char, 8> magic{};
    is.read(magic.data(), magic.size());
    if (!is || magic != kCheckpointMagic) {
        throw CheckpointError("not a checkpoint (bad magic): " + path.string());
    }
    CheckpointHeader h;
    h.version = detail::get_le<std::uint32_t>(is);
    if (h.version != kCheckpointVersion) {
        throw CheckpointError("unsupported checkpoint version " + std::to_string(h.version));
    }
    h.d = detail::get_le<std::uint32_t>(is);
    h.heads = detail::get_le<std::uint32_t>(is);
    h.head_dim = detail::get_le<std::uint32_t>(is);
    h.n = detail::get_le<std::uint32_t>(is);
    h.seed = detail::get_le<std::uint64_t>(is);
    const auto count = detail::get_le<std::uint64_t>(is);
    if (h.d == 0 || h.heads == 0 || h.head_dim == 0 || h.d > 4096 || h.heads > 4096 || h.head_dim > 4096) {
        throw CheckpointError("checkpoint header has invalid shape");
    }
    LinearAttentionModel model(static_cast<int>(h.d), static_cast<int>(h.heads),
                               static_cast<int>(h.heads * h.head_dim));
    if (count != static_cast<std::uint64_t>(model.parameters().size())) {
        throw CheckpointError("checkpoint parameter count does not match its header");
    }
    for (Eigen::Index i = 0; i < model.parameters().size(); ++i) {
        model.parameters()[i] = detail::get_le<double>(is);
    }
    if (!model.parameters().allFinite()) {
        throw CheckpointError("checkpoint contains non-finite parameters");
    }
    is.peek();
    if (!is.eof()) {
        throw CheckpointError("checkpoint has trailing bytes");
    }
    return {h, std::move(model)};
}

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"tasks_total", c.tasks_total},       {"batch_tasks", c.batch_tasks}, {"learning_rate", c.learning_rate},
            {"steps", c.steps},                   {"validation_tasks", c.validation_tasks},
            {"eval_every", c.eval_every},         {"patience", c.patience},       {"tolerance", c.tolerance},
            {"init_std", c.init_std},             {"heads", c.heads}};
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint) {
    return std::filesystem::path(checkpoint.string() + ".meta.json");
}

inline nlohmann::json to_json(const NoiseConfig& n) {
    return {{"sigma_sq", n.sigma_sq}, {"sigma_beta_sq", n.sigma_beta_sq}};
}

inline void save_sidecar(const std::filesystem::path& checkpoint, const TrainConfig& config, const NoiseConfig& noise,
                         const TrainResult& result, int n, std::uint64_t seed) {
    nlohmann::json meta{{"train_config", to_json(config)},
                        {"noise", to_json(noise)},
                        {"N", n},
                        {"seed", seed},
                        {"validation_mse", result.validation_mse},
                        {"ridge_validation_mse", result.ridge_validation_mse},
                        {"ridge_gap", result.ridge_gap()},
                        {"matches_ridge", result.matches_ridge()},
                        {"steps_run", result.steps_run},
                        {"stopped_early", result.stopped_early}};
    std::ofstream os(sidecar_path(checkpoint), std::ios::trunc);
    os << meta.dump(2) << '\n';
}

inline nlohmann::json load_sidecar(const std::filesystem::path& checkpoint) {
    std::ifstream in(sidecar_path(checkpoint));
    if (!in) {
        throw CheckpointError("missing checkpoint metadata: " + sidecar_path(checkpoint).string());
    }
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw CheckpointError("unreadable checkpoint metadata: " + std::string(e.what()));
    }
}

} // namespace robicl
