#pragma once

// Feature-selection MDP. An episode starts with no levels selected; each
// Select(i) adds level i at cost c_i, and Terminate ends the episode with
// reward beta * V_s, where V_s is the mean PCK of Hough matching with the
// selected levels over a batch of scoring pairs.

#include <scalesel/error.hpp>
#include <scalesel/eval_metrics.hpp>
#include <scalesel/feature_pyramid.hpp>
#include <scalesel/hough_matcher.hpp>
#include <scalesel/parallel.hpp>

#include <algorithm>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <shared_mutex>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace scalesel {

// Sorted level indices.
using Subset = std::vector<std::size_t>;

inline std::string subset_to_string(std::span<const std::size_t> s, char sep = ';') {
    std::string out;
    for (std::size_t k = 0; k < s.size(); ++k) {
        if (k) out += sep;
        out += std::to_string(s[k]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Scoring

inline double pair_pck(const ImagePair& pair, std::span<const std::size_t> selected, double alpha,
                       const HoughConfig& hough = {}) {
    const MatchResult m = match_pair(pair, selected, hough);
    const KeypointSet predicted = transfer_keypoints(m, pair.src_keypoints);
    return pck(predicted, pair.tgt_keypoints, alpha).pck;
}

// Mean PCK@alpha over the pairs; not memoized.
inline double score(std::span<const ImagePair> pairs, std::span<const std::size_t> selected, double alpha,
                    const HoughConfig& hough = {}) {
    if (selected.empty()) {
        throw EmptySelectionError();
    }
    if (pairs.empty()) {
        throw ValidationError("score: empty pair set");
    }
    std::vector<double> per_pair(pairs.size());
    parallel_for(pairs.size(), [&](std::size_t i) { per_pair[i] = pair_pck(pairs[i], selected, alpha, hough); });
    double total = 0.0;
    for (double v : per_pair) total += v;
    return total / static_cast<double>(pairs.size());
}

// Memo table keyed by the sorted index tuple. Concurrent readers, exclusive writers.
class ScoreCache {
public:
    std::optional<double> find(const Subset& key) const {
        std::shared_lock lock(mu_);
        auto it = table_.find(key);
        if (it == table_.end()) return std::nullopt;
        return it->second;
    }
    void insert(const Subset& key, double value) {
        std::unique_lock lock(mu_);
        table_.emplace(key, value);
    }
    std::size_t size() const {
        std::shared_lock lock(mu_);
        return table_.size();
    }

private:
    mutable std::shared_mutex mu_;
    std::map<Subset, double> table_;
};

struct EnvConfig {
    std::vector<double> costs;  // one per level
    double beta = 20.0;
    double score_alpha = 0.1;
    HoughConfig hough;
    std::shared_ptr<const std::vector<ImagePair>> score_pairs;
    std::size_t max_episode_len = 0;  // 0 means N + 1
    std::shared_ptr<ScoreCache> cache = std::make_shared<ScoreCache>();

    std::size_t num_levels() const { return costs.size(); }
    std::size_t episode_limit() const { return max_episode_len == 0 ? num_levels() + 1 : max_episode_len; }
};

inline void validate_config(const EnvConfig& cfg) {
    if (cfg.costs.size() < 2) {
        throw ValidationError("env costs: need one cost per level and at least 2 levels");
    }
    for (double c : cfg.costs) {
        if (!(c > 0.0)) throw ValidationError("env costs: every cost must be positive");
    }
    if (!(cfg.beta > 0.0)) throw ValidationError("env beta: must be positive");
    if (!(cfg.score_alpha > 0.0 && cfg.score_alpha <= 1.0)) throw ValidationError("env score_alpha: must be in (0, 1]");
    if (!cfg.score_pairs || cfg.score_pairs->empty()) throw ValidationError("env score_pairs: must be non-empty");
    for (const ImagePair& p : *cfg.score_pairs) {
        if (p.num_levels() != cfg.num_levels()) {
            throw ValidationError("env score_pairs: pair level count differs from the cost vector length");
        }
    }
    if (cfg.max_episode_len == 1) throw ValidationError("env max_episode_len: must allow at least one selection");
}

inline EnvConfig make_env_config(std::vector<ImagePair> pairs, double cost = 0.4, double beta = 20.0,
                                 double alpha = 0.1, HoughConfig hough = {}) {
    EnvConfig cfg;
    const std::size_t n = pairs.empty() ? 0 : pairs.front().num_levels();
    cfg.costs.assign(n, cost);
    cfg.beta = beta;
    cfg.score_alpha = alpha;
    cfg.hough = hough;
    cfg.score_pairs = std::make_shared<const std::vector<ImagePair>>(std::move(pairs));
    validate_config(cfg);
    return cfg;
}

// Memoized V_s over the config's scoring pairs.
inline double score(const EnvConfig& cfg, std::span<const std::size_t> selected) {
    if (selected.empty()) {
        throw EmptySelectionError();
    }
    const Subset key = canonical_subset(selected);
    if (auto hit = cfg.cache->find(key)) return *hit;
    const double v = score(*cfg.score_pairs, key, cfg.score_alpha, cfg.hough);
    cfg.cache->insert(key, v);
    return v;
}

inline double subset_cost(const EnvConfig& cfg, std::span<const std::size_t> selected) {
    double c = 0.0;
    for (std::size_t i : selected) c += cfg.costs.at(i);
    return c;
}

inline double subset_return(const EnvConfig& cfg, std::span<const std::size_t> selected) {
    return cfg.beta * score(cfg, selected) - subset_cost(cfg, selected);
}

// ---------------------------------------------------------------------------
// States and actions

struct EnvAction {
    enum class Kind { select, terminate };
    Kind kind = Kind::terminate;
    std::size_t level = 0;

    static EnvAction select(std::size_t i) { return {Kind::select, i}; }
    static EnvAction terminate() { return {Kind::terminate, 0}; }
    bool is_terminate() const { return kind == Kind::terminate; }

    // Position in the (N + 1)-way action vector; Terminate is last.
    std::size_t index(std::size_t num_levels) const { return is_terminate() ? num_levels : level; }
    static EnvAction from_index(std::size_t a, std::size_t num_levels) {
        return a == num_levels ? terminate() : select(a);
    }

    bool operator==(const EnvAction&) const = default;
};

struct EnvState {
    std::vector<std::size_t> selected;  // in selection order
    std::size_t step_count = 0;
    bool done = false;
    std::size_t pair_index = 0;

    bool contains(std::size_t i) const { return std::find(selected.begin(), selected.end(), i) != selected.end(); }
    bool operator==(const EnvState&) const = default;
};

inline EnvState reset(const EnvConfig& cfg, std::size_t pair_index = 0) {
    validate_config(cfg);
    EnvState s;
    s.pair_index = pair_index;
    return s;
}

// Initial observation: source and target global descriptors, concatenated.
inline std::vector<double> initial_observation(const ImagePair& pair) {
    std::vector<double> obs(pair.source.global_descriptor.begin(), pair.source.global_descriptor.end());
    obs.insert(obs.end(), pair.target.global_descriptor.begin(), pair.target.global_descriptor.end());
    return obs;
}

inline std::vector<bool> action_mask(const EnvState& state, const EnvConfig& cfg) {
    const std::size_t n = cfg.num_levels();
    std::vector<bool> mask(n + 1, false);
    if (state.done) return mask;
    // Leave room for the closing Terminate when the episode length is capped.
    const bool may_select = state.selected.size() + 2 <= cfg.episode_limit();
    for (std::size_t i = 0; i < n; ++i) mask[i] = may_select && !state.contains(i);
    mask[n] = !state.selected.empty();
    return mask;
}

struct StepResult {
    EnvState state;
    double reward = 0.0;
    bool done = false;
    double score = 0.0;  // V_s, set on Terminate
};

inline StepResult step(const EnvState& state, EnvAction action, const EnvConfig& cfg) {
    if (state.done) {
        throw InvalidActionError("step: episode already terminated");
    }
    const std::size_t n = cfg.num_levels();
    if (!action.is_terminate() && action.level >= n) {
        throw InvalidActionError("step: Select(" + std::to_string(action.level) + ") out of range");
    }
    if (!action.is_terminate() && state.contains(action.level)) {
        throw InvalidActionError("step: level " + std::to_string(action.level) + " is already selected");
    }
    if (action.is_terminate() && state.selected.empty()) {
        throw InvalidActionError("step: Terminate with an empty selection (s != {} required)");
    }
    if (!action_mask(state, cfg)[action.index(n)]) {
        throw InvalidActionError("step: action masked at this state");
    }
    StepResult r;
    r.state = state;
    r.state.step_count += 1;
    if (action.is_terminate()) {
        r.score = score(cfg, state.selected);
        r.reward = cfg.beta * r.score;
        r.done = r.state.done = true;
    } else {
        r.state.selected.push_back(action.level);
        r.reward = -cfg.costs[action.level];
    }
    return r;
}

// What the policy sees: the episode pair's selected levels plus the valid-action mask.
struct Observation {
    const ImagePair* pair = nullptr;
    std::vector<std::size_t> selected;
    std::vector<bool> mask;
};

struct Transition {
    Observation observation;
    EnvAction action;
    double reward = 0.0;
    Observation next_observation;
    bool done = false;
    double behavior_prob = 1.0;  // mu(a|s)
};

struct EpisodeTrace {
    std::vector<Transition> transitions;
    std::size_t pair_index = 0;
    double total_return = 0.0;
    Subset selected;  // sorted
    double score = 0.0;
};

// Binds an EnvConfig to the pairs episodes are played on.
class MatchingEnv {
public:
    MatchingEnv(EnvConfig cfg, std::shared_ptr<const std::vector<ImagePair>> episode_pairs)
        : cfg_(std::move(cfg)), pairs_(std::move(episode_pairs)) {
        validate_config(cfg_);
        if (!pairs_ || pairs_->empty()) throw ValidationError("env: episode pair set is empty");
        for (const ImagePair& p : *pairs_) {
            if (p.num_levels() != cfg_.num_levels()) throw ValidationError("env: episode pair level count mismatch");
        }
    }

    // Episodes over the scoring pairs themselves.
    explicit MatchingEnv(EnvConfig cfg) : MatchingEnv(cfg, cfg.score_pairs) {}

    const EnvConfig& config() const { return cfg_; }
    const std::vector<ImagePair>& pairs() const { return *pairs_; }
    std::size_t num_pairs() const { return pairs_->size(); }
    std::size_t num_levels() const { return cfg_.num_levels(); }

    EnvState reset(std::size_t pair_index) const {
        if (pair_index >= pairs_->size()) throw ValidationError("env: pair index out of range");
        return scalesel::reset(cfg_, pair_index);
    }
    StepResult step(const EnvState& s, EnvAction a) const { return scalesel::step(s, a, cfg_); }
    std::vector<bool> action_mask(const EnvState& s) const { return scalesel::action_mask(s, cfg_); }
    Observation observe(const EnvState& s) const { return {&(*pairs_)[s.pair_index], s.selected, action_mask(s)}; }
    double score(std::span<const std::size_t> selected) const { return scalesel::score(cfg_, selected); }

private:
    EnvConfig cfg_;
    std::shared_ptr<const std::vector<ImagePair>> pairs_;
};

// ---------------------------------------------------------------------------
// Baselines

struct SubsetScore {
    Subset subset;
    double score = 0.0;
};

// Higher score wins; ties go to the smaller subset, then the lexicographically smaller one.
inline bool ranks_before(const SubsetScore& a, const SubsetScore& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.subset.size() != b.subset.size()) return a.subset.size() < b.subset.size();
    return a.subset < b.subset;
}

inline constexpr std::size_t kOracleLevelLimit = 12;

struct OracleResult {
    SubsetScore best;
    std::vector<SubsetScore> table;  // every non-empty subset, by bitmask order
};

template <typename ScoreFn>
OracleResult exhaustive_oracle(std::size_t num_levels, ScoreFn&& score_fn) {
    if (num_levels > kOracleLevelLimit) {
        throw LimitError("exhaustive oracle refuses N=" + std::to_string(num_levels) + " (limit " +
                         std::to_string(kOracleLevelLimit) + ", 2^N - 1 subsets)");
    }
    if (num_levels == 0) throw ValidationError("exhaustive oracle: no levels");
    OracleResult r;
    const std::uint32_t count = 1u << num_levels;
    for (std::uint32_t bits = 1; bits < count; ++bits) {
        SubsetScore s;
        for (std::size_t i = 0; i < num_levels; ++i) {
            if (bits & (1u << i)) s.subset.push_back(i);
        }
        s.score = score_fn(std::span<const std::size_t>(s.subset));
        if (r.table.empty() || ranks_before(s, r.best)) r.best = s;
        r.table.push_back(std::move(s));
    }
    return r;
}

inline OracleResult exhaustive_oracle(const EnvConfig& cfg) {
    return exhaustive_oracle(cfg.num_levels(), [&](std::span<const std::size_t> s) { return score(cfg, s); });
}

// Best achievable episode return beta * V_s - sum(c_i) over an oracle table.
inline SubsetScore best_return(const OracleResult& oracle, const EnvConfig& cfg) {
    SubsetScore best;
    bool first = true;
    for (const SubsetScore& s : oracle.table) {
        const SubsetScore ret{s.subset, cfg.beta * s.score - subset_cost(cfg, s.subset)};
        if (first || ranks_before(ret, best)) best = ret;
        first = false;
    }
    return best;
}

// Prefix-ordered beam search: subsets only grow by indices above their current
// maximum, keeping the beam_width best partial subsets at each depth.
template <typename ScoreFn>
SubsetScore beam_search_baseline(std::size_t num_levels, ScoreFn&& score_fn, std::size_t beam_width) {
    if (beam_width < 1) throw ValidationError("beam_width must be >= 1");
    if (num_levels == 0) throw ValidationError("beam search: no levels");
    std::vector<SubsetScore> frontier{SubsetScore{}};
    SubsetScore best;
    bool have_best = false;
    for (std::size_t depth = 1; depth <= num_levels; ++depth) {
        std::vector<SubsetScore> candidates;
        for (const SubsetScore& f : frontier) {
            const std::size_t start = f.subset.empty() ? 0 : f.subset.back() + 1;
            for (std::size_t j = start; j < num_levels; ++j) {
                SubsetScore c{f.subset, 0.0};
                c.subset.push_back(j);
                c.score = score_fn(std::span<const std::size_t>(c.subset));
                candidates.push_back(std::move(c));
            }
        }
        if (candidates.empty()) break;
        std::sort(candidates.begin(), candidates.end(), ranks_before);
        if (candidates.size() > beam_width) candidates.resize(beam_width);
        if (!have_best || ranks_before(candidates.front(), best)) {
            best = candidates.front();
            have_best = true;
        }
        frontier = std::move(candidates);
    }
    return best;
}

inline SubsetScore beam_search_baseline(const EnvConfig& cfg, std::size_t beam_width) {
    return beam_search_baseline(cfg.num_levels(), [&](std::span<const std::size_t> s) { return score(cfg, s); },
                                beam_width);
}

// Uniform random K-subsets, deterministic per seed.
template <typename ScoreFn>
std::vector<SubsetScore> random_selection_eval(std::size_t num_levels, ScoreFn&& score_fn, std::size_t k,
                                               std::size_t trials, std::uint64_t seed) {
    if (k < 1 || k > num_levels) {
        throw ValidationError("random selection: K=" + std::to_string(k) + " outside 1.." + std::to_string(num_levels));
    }
    std::mt19937_64 rng(seed);
    std::vector<SubsetScore> out;
    out.reserve(trials);
    std::vector<std::size_t> pool(num_levels);
    for (std::size_t t = 0; t < trials; ++t) {
        for (std::size_t i = 0; i < num_levels; ++i) pool[i] = i;
        for (std::size_t i = 0; i < k; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, num_levels - 1);
            std::swap(pool[i], pool[pick(rng)]);
        }
        SubsetScore s{Subset(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k)), 0.0};
        std::sort(s.subset.begin(), s.subset.end());
        s.score = score_fn(std::span<const std::size_t>(s.subset));
        out.push_back(std::move(s));
    }
    return out;
}

inline std::vector<SubsetScore> random_selection_eval(const EnvConfig& cfg, std::size_t k, std::size_t trials,
                                                      std::uint64_t seed) {
    return random_selection_eval(cfg.num_levels(), [&](std::span<const std::size_t> s) { return score(cfg, s); }, k,
                                 trials, seed);
}

// CSV rows: subset (semicolon-joined), K, score.
inline std::string subsets_to_csv(std::span<const SubsetScore> rows) {
    std::ostringstream os;
    os.precision(17);
    os << "subset,K,score\n";
    for (const SubsetScore& r : rows) {
        os << subset_to_string(r.subset) << ',' << r.subset.size() << ',' << r.score << '\n';
    }
    return os.str();
}

}  // namespace scalesel
