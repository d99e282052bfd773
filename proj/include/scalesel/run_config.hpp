#pragma once

// JSON run configuration for the command-line tool. Every section is optional;
// unknown keys anywhere are rejected.

#include <scalesel/dqn_trainer.hpp>
#include <scalesel/error.hpp>
#include <scalesel/matching_env.hpp>
#include <scalesel/pyramid_io.hpp>
#include <scalesel/q_network.hpp>
#include <scalesel/synthetic.hpp>

#include <nlohmann/json.hpp>

#include <filesystem>
#include <initializer_list>
#include <optional>
#include <string>

namespace scalesel {

struct DataSpec {
    SyntheticSpec pair_spec;  // seed is overwritten per pair
    std::size_t train_pairs = 40;
    std::size_t val_pairs = 10;
};

struct EnvSpec {
    std::optional<std::vector<double>> costs;  // defaults to `cost` for every level
    double cost = 0.4;
    double beta = 20.0;
    double score_alpha = 0.1;
    HoughConfig hough;
    std::size_t max_episode_len = 0;
};

struct NetSpec {
    std::size_t embed_dim = 16;
    Aggregation aggregation = Aggregation::product;
};

struct BaselineSpec {
    std::size_t beam_width = 1;
    std::size_t random_k = 2;
    std::size_t random_trials = 10;
};

struct RunConfig {
    std::uint64_t seed = 1;
    DataSpec data;
    EnvSpec env;
    NetSpec net;
    TrainerConfig trainer;
    BaselineSpec baselines;
    std::string eval_split = "val";      // pairs scored by eval and the baselines
    std::filesystem::path data_dir = "data";
    std::filesystem::path output_dir = "out";
    std::optional<std::filesystem::path> checkpoint;  // defaults to <output_dir>/model.qnet
};

// The planted six-level task: levels 1 and 4 carry the signal.
inline SyntheticSpec default_pair_spec() {
    SyntheticSpec s;
    s.image_height = 64;
    s.image_width = 64;
    s.levels = {{8, 16, 16, 4.0f}, {8, 8, 8, 8.0f}, {8, 8, 8, 8.0f}, {8, 4, 4, 16.0f}, {8, 4, 4, 16.0f}, {8, 2, 2, 32.0f}};
    s.informative_set = {1, 4};
    s.signal_dims = 4;
    s.noise_sigma = 0.3;
    s.num_keypoints = 6;
    s.warp.kind = WarpKind::translation;
    s.warp.dx = 8.0;
    return s;
}

inline RunConfig default_run_config() {
    RunConfig c;
    c.data.pair_spec = default_pair_spec();
    return c;
}

namespace detail {

inline void require_keys(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ValidationError("config " + where + ": expected an object");
    for (const auto& [key, value] : j.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || key == a;
        if (!ok) throw ValidationError("config: unknown key '" + (where.empty() ? key : where + "." + key) + "'");
    }
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ValidationError("config " + where + "." + key + ": wrong type");
    }
}

inline WarpKind warp_kind_from(const std::string& s) {
    if (s == "identity") return WarpKind::identity;
    if (s == "translation") return WarpKind::translation;
    if (s == "similarity") return WarpKind::similarity;
    throw ValidationError("config synthetic.warp.kind: unknown warp '" + s + "'");
}

inline Aggregation aggregation_from(const std::string& s) {
    if (s == "product") return Aggregation::product;
    if (s == "sum") return Aggregation::sum;
    if (s == "mean") return Aggregation::mean;
    throw ValidationError("config net.aggregation: unknown aggregation '" + s + "'");
}

inline TargetMode target_mode_from(const std::string& s) {
    if (s == "standard") return TargetMode::standard;
    if (s == "double") return TargetMode::double_q;
    if (s == "retrace") return TargetMode::retrace;
    throw ValidationError("config trainer.target_mode: unknown mode '" + s + "'");
}

inline void parse_synthetic(const nlohmann::json& j, DataSpec& d) {
    require_keys(j, "synthetic",
                 {"image_height", "image_width", "levels", "informative_set", "signal_dims", "noise_sigma",
                  "num_keypoints", "warp", "global_dims", "with_masks", "train_pairs", "val_pairs"});
    SyntheticSpec& s = d.pair_spec;
    read(j, "image_height", s.image_height, "synthetic");
    read(j, "image_width", s.image_width, "synthetic");
    read(j, "informative_set", s.informative_set, "synthetic");
    read(j, "signal_dims", s.signal_dims, "synthetic");
    read(j, "noise_sigma", s.noise_sigma, "synthetic");
    read(j, "num_keypoints", s.num_keypoints, "synthetic");
    read(j, "global_dims", s.global_dims, "synthetic");
    read(j, "with_masks", s.with_masks, "synthetic");
    read(j, "train_pairs", d.train_pairs, "synthetic");
    read(j, "val_pairs", d.val_pairs, "synthetic");
    if (j.contains("levels")) {
        s.levels.clear();
        if (!j["levels"].is_array()) throw ValidationError("config synthetic.levels: expected an array");
        for (const auto& l : j["levels"]) {
            require_keys(l, "synthetic.levels[]", {"channels", "height", "width", "stride"});
            LevelShape shape;
            read(l, "channels", shape.channels, "synthetic.levels[]");
            read(l, "height", shape.height, "synthetic.levels[]");
            read(l, "width", shape.width, "synthetic.levels[]");
            read(l, "stride", shape.stride, "synthetic.levels[]");
            s.levels.push_back(shape);
        }
    }
    if (j.contains("warp")) {
        const auto& w = j["warp"];
        require_keys(w, "synthetic.warp", {"kind", "dx", "dy", "scale", "rotation"});
        s.warp = {};
        std::string kind = "identity";
        read(w, "kind", kind, "synthetic.warp");
        s.warp.kind = warp_kind_from(kind);
        read(w, "dx", s.warp.dx, "synthetic.warp");
        read(w, "dy", s.warp.dy, "synthetic.warp");
        read(w, "scale", s.warp.scale, "synthetic.warp");
        read(w, "rotation", s.warp.rotation, "synthetic.warp");
    }
}

inline void parse_env(const nlohmann::json& j, EnvSpec& e) {
    require_keys(j, "env",
                 {"cost", "costs", "beta", "score_alpha", "bins_x", "bins_y", "normalize_per_level", "max_episode_len"});
    read(j, "cost", e.cost, "env");
    if (j.contains("costs")) {
        std::vector<double> c;
        read(j, "costs", c, "env");
        e.costs = c;
    }
    read(j, "beta", e.beta, "env");
    read(j, "score_alpha", e.score_alpha, "env");
    read(j, "bins_x", e.hough.bins_x, "env");
    read(j, "bins_y", e.hough.bins_y, "env");
    read(j, "normalize_per_level", e.hough.normalize_per_level, "env");
    read(j, "max_episode_len", e.max_episode_len, "env");
}

inline void parse_trainer(const nlohmann::json& j, TrainerConfig& t) {
    require_keys(j, "trainer",
                 {"gamma", "lr", "beta1", "beta2", "adam_epsilon", "batch_size", "max_iterations", "epsilon_start",
                  "epsilon_end", "epsilon_decay_fraction", "rho", "target_mode", "lr_patience", "stop_patience",
                  "plateau_after_exploration", "lr_decay", "buffer_capacity", "rollouts_per_iteration",
                  "eval_interval", "huber"});
    read(j, "gamma", t.gamma, "trainer");
    read(j, "lr", t.lr, "trainer");
    read(j, "beta1", t.beta1, "trainer");
    read(j, "beta2", t.beta2, "trainer");
    read(j, "adam_epsilon", t.adam_epsilon, "trainer");
    read(j, "batch_size", t.batch_size, "trainer");
    read(j, "max_iterations", t.max_iterations, "trainer");
    read(j, "epsilon_start", t.epsilon_start, "trainer");
    read(j, "epsilon_end", t.epsilon_end, "trainer");
    read(j, "epsilon_decay_fraction", t.epsilon_decay_fraction, "trainer");
    read(j, "rho", t.rho, "trainer");
    if (j.contains("target_mode")) {
        std::string mode;
        read(j, "target_mode", mode, "trainer");
        t.target_mode = target_mode_from(mode);
    }
    read(j, "lr_patience", t.lr_patience, "trainer");
    read(j, "stop_patience", t.stop_patience, "trainer");
    read(j, "plateau_after_exploration", t.plateau_after_exploration, "trainer");
    read(j, "lr_decay", t.lr_decay, "trainer");
    read(j, "buffer_capacity", t.buffer_capacity, "trainer");
    read(j, "rollouts_per_iteration", t.rollouts_per_iteration, "trainer");
    read(j, "eval_interval", t.eval_interval, "trainer");
    read(j, "huber", t.huber, "trainer");
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
    RunConfig c = default_run_config();
    detail::require_keys(j, "",
                         {"seed", "synthetic", "env", "net", "trainer", "baselines", "eval_split", "data_dir",
                          "output_dir", "checkpoint"});
    detail::read(j, "seed", c.seed, "");
    if (j.contains("synthetic")) detail::parse_synthetic(j["synthetic"], c.data);
    if (j.contains("env")) detail::parse_env(j["env"], c.env);
    if (j.contains("net")) {
        detail::require_keys(j["net"], "net", {"embed_dim", "aggregation"});
        detail::read(j["net"], "embed_dim", c.net.embed_dim, "net");
        if (j["net"].contains("aggregation")) {
            std::string agg;
            detail::read(j["net"], "aggregation", agg, "net");
            c.net.aggregation = detail::aggregation_from(agg);
        }
    }
    if (j.contains("trainer")) detail::parse_trainer(j["trainer"], c.trainer);
    if (j.contains("baselines")) {
        detail::require_keys(j["baselines"], "baselines", {"beam_width", "random_k", "random_trials"});
        detail::read(j["baselines"], "beam_width", c.baselines.beam_width, "baselines");
        detail::read(j["baselines"], "random_k", c.baselines.random_k, "baselines");
        detail::read(j["baselines"], "random_trials", c.baselines.random_trials, "baselines");
    }
    detail::read(j, "eval_split", c.eval_split, "");
    if (c.eval_split != "train" && c.eval_split != "val") {
        throw ValidationError("config eval_split: must be \"train\" or \"val\"");
    }
    std::string path;
    if (j.contains("data_dir")) {
        detail::read(j, "data_dir", path, "");
        c.data_dir = path;
    }
    if (j.contains("output_dir")) {
        detail::read(j, "output_dir", path, "");
        c.output_dir = path;
    }
    if (j.contains("checkpoint")) {
        detail::read(j, "checkpoint", path, "");
        c.checkpoint = path;
    }
    return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    const auto bytes = detail::read_file(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError("config " + path.string() + ": " + e.what());
    }
    return parse_run_config(j);
}

// Per-pair generator seed: a splitmix64 step over (run seed, split, index).
inline std::uint64_t pair_seed(std::uint64_t run_seed, std::uint64_t split, std::uint64_t index) {
    std::uint64_t z = run_seed + 0x9E3779B97F4A7C15ull * (1 + index + (split << 32));
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

inline EnvConfig env_config_for(const EnvSpec& e, std::vector<ImagePair> pairs) {
    if (pairs.empty()) throw ValidationError("env: pair set is empty");
    EnvConfig cfg = make_env_config(std::move(pairs), e.cost, e.beta, e.score_alpha, e.hough);
    if (e.costs) {
        if (e.costs->size() != cfg.num_levels()) {
            throw ValidationError("config env.costs: expected " + std::to_string(cfg.num_levels()) + " entries");
        }
        cfg.costs = *e.costs;
    }
    cfg.max_episode_len = e.max_episode_len;
    validate_config(cfg);
    return cfg;
}

}  // namespace scalesel
