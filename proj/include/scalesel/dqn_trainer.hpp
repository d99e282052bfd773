#pragma once

// Off-policy deep Q-learning for the feature-selection MDP: epsilon-greedy
// rollouts into an episode replay buffer, standard / double / retrace
// targets, squared TD loss, Adam with bias correction, soft target updates,
// and a plateau learning-rate schedule with early stopping.

#include <scalesel/error.hpp>
#include <scalesel/matching_env.hpp>
#include <scalesel/q_network.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace scalesel {

enum class TargetMode { standard, double_q, retrace };

struct TrainerConfig {
    double gamma = 0.99;
    double lr = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_epsilon = 1e-8;
    std::size_t batch_size = 16;
    std::size_t max_iterations = 3000;
    double epsilon_start = 1.0;
    double epsilon_end = 0.05;
    double epsilon_decay_fraction = 0.5;  // of max_iterations
    double rho = 0.01;
    TargetMode target_mode = TargetMode::retrace;
    std::size_t lr_patience = 10;
    std::size_t stop_patience = 20;
    // Plateau checks (lr decay and early stopping) only count once epsilon has reached its floor.
    bool plateau_after_exploration = true;
    double lr_decay = 0.5;
    std::size_t buffer_capacity = 1000;
    std::size_t rollouts_per_iteration = 4;
    std::size_t eval_interval = 10;
    bool huber = false;
    std::uint64_t seed = 0;
};

inline void validate_trainer_config(const TrainerConfig& c) {
    if (!(c.lr > 0.0)) throw ValidationError("trainer lr: must be positive");
    if (!(c.gamma >= 0.0 && c.gamma <= 1.0)) throw ValidationError("trainer gamma: must be in [0, 1]");
    if (c.lr_patience < 1 || c.stop_patience < 1) throw ValidationError("trainer patience values must be positive");
    if (c.batch_size < 1) throw ValidationError("trainer batch_size: must be >= 1");
    if (c.buffer_capacity < 1) throw ValidationError("trainer buffer_capacity: must be >= 1");
    if (c.rollouts_per_iteration < 1) throw ValidationError("trainer rollouts_per_iteration: must be >= 1");
    if (c.eval_interval < 1) throw ValidationError("trainer eval_interval: must be >= 1");
    if (!(c.rho > 0.0 && c.rho <= 1.0)) throw ValidationError("trainer rho: must be in (0, 1]");
    if (!(c.epsilon_start >= 0.0 && c.epsilon_start <= 1.0 && c.epsilon_end >= 0.0 && c.epsilon_end <= 1.0)) {
        throw ValidationError("trainer epsilon schedule: values must be in [0, 1]");
    }
    if (!(c.lr_decay > 0.0 && c.lr_decay <= 1.0)) throw ValidationError("trainer lr_decay: must be in (0, 1]");
}

// Linear from epsilon_start to epsilon_end over the first decay fraction of training.
inline double epsilon_at(const TrainerConfig& c, std::size_t iteration) {
    const double span = c.epsilon_decay_fraction * static_cast<double>(c.max_iterations);
    if (span <= 0.0) return c.epsilon_end;
    const double t = static_cast<double>(iteration) / span;
    if (t >= 1.0) return c.epsilon_end;
    return c.epsilon_start + (c.epsilon_end - c.epsilon_start) * t;
}

// ---------------------------------------------------------------------------
// Replay

class ReplayBuffer {
public:
    explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
        if (capacity_ < 1) throw ValidationError("replay buffer capacity must be >= 1");
    }

    void push(EpisodeTrace trace) {
        for (const Transition& t : trace.transitions) {
            if (!(t.behavior_prob > 0.0)) throw ValidationError("replay buffer: transition with mu <= 0");
        }
        if (episodes_.size() == capacity_) {
            transitions_ -= episodes_.front().transitions.size();
            episodes_.pop_front();
        }
        transitions_ += trace.transitions.size();
        episodes_.push_back(std::move(trace));
        ++inserted_;
    }

    std::size_t size() const { return episodes_.size(); }
    std::size_t capacity() const { return capacity_; }
    std::size_t inserted() const { return inserted_; }
    std::size_t transition_count() const { return transitions_; }
    const EpisodeTrace& episode(std::size_t k) const { return episodes_[k]; }

    // Uniform over all stored transitions: (episode, step).
    std::pair<std::size_t, std::size_t> sample(std::mt19937_64& rng) const {
        if (transitions_ == 0) throw ValidationError("replay buffer is empty");
        std::uniform_int_distribution<std::size_t> pick(0, transitions_ - 1);
        std::size_t k = pick(rng);
        for (std::size_t e = 0; e < episodes_.size(); ++e) {
            const std::size_t len = episodes_[e].transitions.size();
            if (k < len) return {e, k};
            k -= len;
        }
        return {episodes_.size() - 1, episodes_.back().transitions.size() - 1};
    }

private:
    std::size_t capacity_;
    std::deque<EpisodeTrace> episodes_;
    std::size_t transitions_ = 0;
    std::size_t inserted_ = 0;
};

// ---------------------------------------------------------------------------
// Rollouts

// Epsilon-greedy episode. mu(a|s) = eps/|valid| + (1 - eps) * [a is the greedy action].
inline EpisodeTrace rollout(const MatchingEnv& env, std::size_t pair_index, const QNetwork& net, double epsilon,
                            std::mt19937_64& rng) {
    if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ValidationError("rollout: epsilon must be in [0, 1]");
    const std::size_t n = env.num_levels();
    EpisodeTrace trace;
    trace.pair_index = pair_index;
    EnvState state = env.reset(pair_index);
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    while (!state.done) {
        Observation obs = env.observe(state);
        std::vector<std::size_t> valid;
        for (std::size_t a = 0; a <= n; ++a) {
            if (obs.mask[a]) valid.push_back(a);
        }
        const std::size_t greedy = forward(net, obs).greedy_action();
        std::size_t action = greedy;
        if (epsilon > 0.0 && coin(rng) < epsilon) {
            std::uniform_int_distribution<std::size_t> pick(0, valid.size() - 1);
            action = valid[pick(rng)];
        }
        const double explore = epsilon / static_cast<double>(valid.size());
        const double mu = action == greedy ? explore + (1.0 - epsilon) : explore;

        const StepResult r = env.step(state, EnvAction::from_index(action, n));
        Transition t;
        t.observation = std::move(obs);
        t.action = EnvAction::from_index(action, n);
        t.reward = r.reward;
        t.done = r.done;
        t.behavior_prob = mu;
        t.next_observation = env.observe(r.state);
        trace.total_return += r.reward;
        if (r.done) trace.score = r.score;
        trace.transitions.push_back(std::move(t));
        state = r.state;
    }
    trace.selected = canonical_subset(state.selected);
    return trace;
}

inline EpisodeTrace greedy_episode(const MatchingEnv& env, std::size_t pair_index, const QNetwork& net) {
    std::mt19937_64 unused(0);
    return rollout(env, pair_index, net, 0.0, unused);
}

// ---------------------------------------------------------------------------
// Targets

// q_t = r_t + gamma * max_a Q_target(s_{t+1}, a)
inline double target_standard(const EpisodeTrace& trace, std::size_t t, const QNetwork& target, double gamma) {
    const Transition& tr = trace.transitions.at(t);
    if (tr.done) return tr.reward;
    const QOutput next = forward(target, tr.next_observation);
    return tr.reward + gamma * next.q_values[next.greedy_action()];
}

// q_t = r_t + gamma * Q_target(s_{t+1}, argmax_a Q_eval(s_{t+1}, a))
inline double target_double(const EpisodeTrace& trace, std::size_t t, const QNetwork& eval, const QNetwork& target,
                            double gamma) {
    const Transition& tr = trace.transitions.at(t);
    if (tr.done) return tr.reward;
    const std::size_t a = forward(eval, tr.next_observation).greedy_action();
    return tr.reward + gamma * forward(target, tr.next_observation).q_values[a];
}

// Retrace targets for every step, computed backward from the terminal step:
//   q_t = r_t + gamma * E_pi[Q_target(s_{t+1}, .)] + gamma * rho_{t+1} * (q_{t+1} - Q_target(s_{t+1}, a_{t+1}))
// with pi greedy in the eval net, so rho_{t+1} = min(pi/mu, 1) is 1 when a_{t+1}
// is the greedy action and 0 otherwise.
inline std::vector<double> target_retrace(const EpisodeTrace& trace, const QNetwork& eval, const QNetwork& target,
                                          double gamma) {
    const auto& tr = trace.transitions;
    if (tr.empty() || !tr.back().done) throw ValidationError("retrace: trace must end with a terminal transition");
    for (const Transition& t : tr) {
        if (!(t.behavior_prob > 0.0) || !std::isfinite(t.behavior_prob)) {
            throw ValidationError("retrace: transition is missing its behaviour probability mu");
        }
    }
    const std::size_t n = eval.config().num_levels;
    std::vector<double> q(tr.size());
    q.back() = tr.back().reward;
    for (std::size_t t = tr.size() - 1; t-- > 0;) {
        const Observation& next = tr[t].next_observation;
        const std::size_t greedy = forward(eval, next).greedy_action();
        const QOutput qt = forward(target, next);
        const std::size_t taken = tr[t + 1].action.index(n);
        const double pi = taken == greedy ? 1.0 : 0.0;
        const double rho = std::min(pi / tr[t + 1].behavior_prob, 1.0);
        q[t] = tr[t].reward + gamma * qt.q_values[greedy] + gamma * rho * (q[t + 1] - qt.q_values[taken]);
    }
    return q;
}

// ---------------------------------------------------------------------------
// Loss and optimizer

struct TdSample {
    Observation observation;
    std::size_t action = 0;
    double target = 0.0;
};

struct LossAndGrad {
    double loss = 0.0;
    std::vector<double> grad;
};

// 0.5 * mean (Q(s_t, a_t) - q_t)^2, or the Huber form (delta = 1). Targets are constants.
inline LossAndGrad td_loss(const QNetwork& net, std::span<const TdSample> batch, bool huber = false) {
    if (batch.empty()) throw ValidationError("td_loss: empty batch");
    const std::size_t A = net.config().action_count();
    LossAndGrad out;
    out.grad.assign(net.size(), 0.0);
    const double inv = 1.0 / static_cast<double>(batch.size());
    for (const TdSample& s : batch) {
        if (s.action >= A || (!s.observation.mask.empty() && !s.observation.mask[s.action])) {
            throw ValidationError("td_loss: batch contains a masked action");
        }
        if (!std::isfinite(s.target)) throw ValidationError("td_loss: non-finite target");
        const double q = forward(net, s.observation).q_values[s.action];
        const double err = q - s.target;
        double dloss;
        if (huber && std::abs(err) > 1.0) {
            out.loss += (std::abs(err) - 0.5) * inv;
            dloss = (err > 0.0 ? 1.0 : -1.0) * inv;
        } else {
            out.loss += 0.5 * err * err * inv;
            dloss = err * inv;
        }
        std::vector<double> dq(A, 0.0);
        dq[s.action] = dloss;
        const auto g = backward(net, s.observation, dq);
        for (std::size_t k = 0; k < g.size(); ++k) out.grad[k] += g[k];
    }
    return out;
}

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    std::size_t step = 0;
};

inline void optimizer_step(std::vector<double>& params, std::span<const double> grad, AdamState& state, double lr,
                           const TrainerConfig& cfg = {}) {
    if (grad.size() != params.size()) throw ShapeError("optimizer_step: gradient length differs from parameters");
    for (std::size_t k = 0; k < grad.size(); ++k) {
        if (!std::isfinite(grad[k])) {
            throw DivergenceError("non-finite gradient at parameter " + std::to_string(k) + " (step " +
                                  std::to_string(state.step + 1) + ")");
        }
    }
    if (state.m.size() != params.size()) {
        state.m.assign(params.size(), 0.0);
        state.v.assign(params.size(), 0.0);
    }
    ++state.step;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t k = 0; k < params.size(); ++k) {
        state.m[k] = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * grad[k];
        state.v[k] = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * grad[k] * grad[k];
        const double mhat = state.m[k] / c1, vhat = state.v[k] / c2;
        params[k] -= lr * mhat / (std::sqrt(vhat) + cfg.adam_epsilon);
    }
}

// ---------------------------------------------------------------------------
// Training loop

struct MetricsRow {
    std::size_t iteration = 0;
    double mean_train_return = 0.0;
    std::optional<double> val_return;
    double lr = 0.0;
    double epsilon = 0.0;
    double loss = 0.0;
    double mean_episode_len = 0.0;
    std::string selected_subset_mode;
};

inline std::string metrics_to_csv(std::span<const MetricsRow> rows) {
    std::ostringstream os;
    os.precision(10);
    os << "iteration,mean_train_return,val_return,lr,epsilon,loss,mean_episode_len,selected_subset_mode\n";
    for (const MetricsRow& r : rows) {
        os << r.iteration << ',' << r.mean_train_return << ',';
        if (r.val_return) os << *r.val_return;
        os << ',' << r.lr << ',' << r.epsilon << ',' << r.loss << ',' << r.mean_episode_len << ','
           << r.selected_subset_mode << '\n';
    }
    return os.str();
}

struct TrainState {
    QNetwork eval;
    QNetwork target;
    AdamState adam;
    std::size_t iteration = 0;
    std::vector<double> train_history;
    std::vector<double> val_history;
    double lr = 0.0;
    double best_val = -std::numeric_limits<double>::infinity();
    double best_train = -std::numeric_limits<double>::infinity();
    std::size_t train_stall = 0;
    std::size_t val_stall = 0;
};

struct ValidationReport {
    double mean_return = 0.0;
    std::vector<EpisodeTrace> episodes;
};

// Greedy episode on every pair of the env.
inline ValidationReport evaluate_greedy(const MatchingEnv& env, const QNetwork& net) {
    ValidationReport r;
    for (std::size_t p = 0; p < env.num_pairs(); ++p) {
        r.episodes.push_back(greedy_episode(env, p, net));
        r.mean_return += r.episodes.back().total_return;
    }
    r.mean_return /= static_cast<double>(env.num_pairs());
    return r;
}

// Most frequent subset among the episodes; ties go to the lexicographically smallest.
inline Subset subset_mode(std::span<const EpisodeTrace> episodes) {
    std::map<Subset, std::size_t> counts;
    for (const EpisodeTrace& e : episodes) ++counts[e.selected];
    Subset best;
    std::size_t best_count = 0;
    for (const auto& [s, c] : counts) {
        if (c > best_count) {
            best = s;
            best_count = c;
        }
    }
    return best;
}

struct TrainResult {
    QNetwork net;  // parameters with the best validation return
    std::vector<MetricsRow> log;
    double best_val_return = -std::numeric_limits<double>::infinity();
    std::size_t best_iteration = 0;
    bool stopped_early = false;
};

using ImproveCallback = std::function<void(const QNetwork&, std::size_t iteration, double val_return)>;

inline TrainResult train(const MatchingEnv& train_env, const MatchingEnv& val_env, const NetConfig& net_cfg,
                         const TrainerConfig& cfg, const ImproveCallback& on_improve = {}) {
    validate_trainer_config(cfg);
    if (net_cfg.num_levels != train_env.num_levels() || net_cfg.num_levels != val_env.num_levels()) {
        throw ValidationError("train: network and environments disagree on the number of levels");
    }
    std::mt19937_64 rng(cfg.seed);
    TrainState st;
    st.eval = init(net_cfg, cfg.seed ^ 0x9E3779B97F4A7C15ull);
    st.target = st.eval;
    st.lr = cfg.lr;

    TrainResult result;
    result.net = st.eval;
    if (cfg.max_iterations == 0) return result;

    ReplayBuffer buffer(cfg.buffer_capacity);
    std::uniform_int_distribution<std::size_t> pick_pair(0, train_env.num_pairs() - 1);
    std::vector<double> window;

    for (st.iteration = 0; st.iteration < cfg.max_iterations; ++st.iteration) {
        const std::size_t it = st.iteration;
        MetricsRow row;
        row.iteration = it;
        row.epsilon = epsilon_at(cfg, it);
        row.lr = st.lr;

        std::vector<EpisodeTrace> fresh;
        double ret = 0.0, len = 0.0;
        for (std::size_t r = 0; r < cfg.rollouts_per_iteration; ++r) {
            fresh.push_back(rollout(train_env, pick_pair(rng), st.eval, row.epsilon, rng));
            ret += fresh.back().total_return;
            len += static_cast<double>(fresh.back().transitions.size());
        }
        row.mean_train_return = ret / static_cast<double>(fresh.size());
        row.mean_episode_len = len / static_cast<double>(fresh.size());
        row.selected_subset_mode = subset_to_string(subset_mode(fresh));
        for (auto& e : fresh) buffer.push(std::move(e));
        st.train_history.push_back(row.mean_train_return);
        window.push_back(row.mean_train_return);

        std::vector<TdSample> batch;
        std::map<std::size_t, std::vector<double>> retrace_cache;
        for (std::size_t b = 0; b < cfg.batch_size; ++b) {
            const auto [e, t] = buffer.sample(rng);
            const EpisodeTrace& trace = buffer.episode(e);
            double q = 0.0;
            switch (cfg.target_mode) {
            case TargetMode::standard:
                q = target_standard(trace, t, st.target, cfg.gamma);
                break;
            case TargetMode::double_q:
                q = target_double(trace, t, st.eval, st.target, cfg.gamma);
                break;
            case TargetMode::retrace: {
                auto it_cache = retrace_cache.find(e);
                if (it_cache == retrace_cache.end()) {
                    it_cache = retrace_cache.emplace(e, target_retrace(trace, st.eval, st.target, cfg.gamma)).first;
                }
                q = it_cache->second[t];
                break;
            }
            }
            const Transition& tr = trace.transitions[t];
            batch.push_back({tr.observation, tr.action.index(net_cfg.num_levels), q});
        }
        LossAndGrad lg = td_loss(st.eval, batch, cfg.huber);
        if (!std::isfinite(lg.loss)) throw DivergenceError("non-finite TD loss at iteration " + std::to_string(it));
        row.loss = lg.loss;
        optimizer_step(st.eval.params(), lg.grad, st.adam, st.lr, cfg);
        soft_update(st.target, st.eval, cfg.rho);

        if ((it + 1) % cfg.eval_interval == 0 || it + 1 == cfg.max_iterations) {
            const double val = evaluate_greedy(val_env, st.eval).mean_return;
            row.val_return = val;
            const bool counting = !cfg.plateau_after_exploration || row.epsilon <= cfg.epsilon_end;
            st.val_history.push_back(val);
            if (val > st.best_val) {
                st.best_val = val;
                st.val_stall = 0;
                result.net = st.eval;
                result.best_val_return = val;
                result.best_iteration = it;
                if (on_improve) on_improve(st.eval, it, val);
            } else if (counting) {
                ++st.val_stall;
            }
            double mean_window = 0.0;
            for (double v : window) mean_window += v;
            mean_window /= static_cast<double>(window.size());
            window.clear();
            if (mean_window > st.best_train) {
                st.best_train = mean_window;
                st.train_stall = 0;
            } else if (counting && ++st.train_stall >= cfg.lr_patience) {
                st.lr *= cfg.lr_decay;
                st.train_stall = 0;
            }
        }
        result.log.push_back(std::move(row));
        if (st.val_stall >= cfg.stop_patience) {
            result.stopped_early = true;
            break;
        }
    }
    return result;
}

}  // namespace scalesel
