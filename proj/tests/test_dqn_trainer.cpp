#include "test_support.hpp"

#include <scalesel/dqn_trainer.hpp>

#include <gtest/gtest.h>

#include <random>

namespace scalesel {
namespace {

using testing::central_difference;
using testing::observe;
using testing::relative_error;
using testing::tiny_config;
using testing::tiny_net;
using testing::tiny_pair;

MatchingEnv tiny_env(std::size_t pairs = 3) {
    std::vector<ImagePair> ps;
    for (std::size_t k = 0; k < pairs; ++k) ps.push_back(tiny_pair(100 + k));
    return MatchingEnv(make_env_config(ps));
}

// Network whose every Q-value is value_b (all other parameters zero), for
// single-level observations.
QNetwork constant_q(double value) {
    QNetwork net(tiny_config());
    net.params()[net.layout().value_b] = value;
    return net;
}

EpisodeTrace hand_trace(const ImagePair& p, double r0, double r1) {
    EpisodeTrace tr;
    Transition a;
    a.observation = observe(p, {});
    a.action = EnvAction::select(2);
    a.reward = r0;
    a.next_observation = observe(p, {2});
    Transition b;
    b.observation = a.next_observation;
    b.action = EnvAction::terminate();
    b.reward = r1;
    b.done = true;
    b.next_observation = observe(p, {2});
    b.next_observation.mask.assign(5, false);
    tr.transitions = {a, b};
    return tr;
}

TEST(Rollout, GreedyHasUnitBehaviourProbability) {
    const MatchingEnv env = tiny_env();
    const QNetwork net = tiny_net(1);
    std::mt19937_64 rng(1);
    const EpisodeTrace tr = rollout(env, 0, net, 0.0, rng);
    for (const Transition& t : tr.transitions) EXPECT_EQ(t.behavior_prob, 1.0);
    EXPECT_TRUE(tr.transitions.back().done);
    EXPECT_NEAR(tr.total_return, subset_return(env.config(), tr.selected), 1e-12);
}

TEST(Rollout, UniformExplorationProbabilities) {
    const MatchingEnv env = tiny_env();
    const QNetwork net = tiny_net(2);
    std::mt19937_64 rng(2);
    for (int e = 0; e < 20; ++e) {
        const EpisodeTrace tr = rollout(env, e % 3, net, 1.0, rng);
        for (const Transition& t : tr.transitions) {
            const auto valid = std::count(t.observation.mask.begin(), t.observation.mask.end(), true);
            EXPECT_DOUBLE_EQ(t.behavior_prob * valid, 1.0);
        }
        EXPECT_NEAR(tr.total_return, subset_return(env.config(), tr.selected), 1e-12);
    }
    // After one Select: three unselected levels plus Terminate.
    EnvState s = env.reset(0);
    s = env.step(s, EnvAction::select(0)).state;
    const std::vector<bool> mask = env.action_mask(s);
    EXPECT_EQ(std::count(mask.begin(), mask.end(), true), 4);
}

TEST(Rollout, BehaviourProbabilityFloor) {
    const MatchingEnv env = tiny_env();
    const QNetwork net = tiny_net(3);
    std::mt19937_64 rng(3);
    for (double eps : {0.05, 0.3, 0.9}) {
        for (int e = 0; e < 10; ++e) {
            for (const Transition& t : rollout(env, 0, net, eps, rng).transitions) {
                EXPECT_GE(t.behavior_prob, 0.05 / 5.0);
            }
        }
    }
}

TEST(Targets, TerminalAndHandArithmetic) {
    const ImagePair p = tiny_pair(1);
    const QNetwork target = constant_q(10.0);
    const EpisodeTrace tr = hand_trace(p, -0.4, 17.2);
    EXPECT_EQ(target_standard(tr, 1, target, 0.99), 17.2);
    EXPECT_NEAR(target_standard(tr, 0, target, 0.9), 8.6, 1e-12);
    EXPECT_EQ(target_standard(tr, 0, target, 0.0), -0.4);
    EXPECT_EQ(target_double(tr, 0, tiny_net(4), target, 0.0), -0.4);
    const auto rt = target_retrace(tr, tiny_net(4), target, 0.0);
    EXPECT_EQ(rt, (std::vector<double>{-0.4, 17.2}));
}

TEST(Targets, DoubleEqualsStandardWithCopiedNetworkAndIsDominated) {
    const MatchingEnv env = tiny_env();
    const QNetwork eval = tiny_net(5), other = tiny_net(6);
    std::mt19937_64 rng(5);
    for (int e = 0; e < 10; ++e) {
        const EpisodeTrace tr = rollout(env, e % 3, eval, 0.5, rng);
        for (std::size_t t = 0; t < tr.transitions.size(); ++t) {
            EXPECT_EQ(target_double(tr, t, eval, eval, 0.99), target_standard(tr, t, eval, 0.99));
            EXPECT_LE(target_double(tr, t, eval, other, 0.99), target_standard(tr, t, other, 0.99));
        }
    }
}

TEST(Targets, RetraceTelescopesOnGreedyEpisodes) {
    const MatchingEnv env = tiny_env();
    const QNetwork eval = tiny_net(7), target = tiny_net(8);
    const double gamma = 0.9;
    for (std::size_t pair = 0; pair < 3; ++pair) {
        const EpisodeTrace tr = greedy_episode(env, pair, eval);
        const auto q = target_retrace(tr, eval, target, gamma);
        double mc = 0.0;
        for (std::size_t t = tr.transitions.size(); t-- > 0;) {
            mc = tr.transitions[t].reward + gamma * mc;
            EXPECT_NEAR(q[t], mc, 1e-9);
        }
    }
}

// Three greedy steps: Select, Select, Terminate. Masks force the length.
TEST(Targets, RetraceThreeStepMonteCarlo) {
    const ImagePair p = tiny_pair(5);
    const QNetwork eval = tiny_net(21), target = tiny_net(22);
    Observation s0 = observe(p, {});
    const std::size_t a0 = forward(eval, s0).greedy_action();
    Observation s1 = observe(p, {a0});
    s1.mask[4] = false;
    const std::size_t a1 = forward(eval, s1).greedy_action();
    Observation s2 = observe(p, {a0, a1});
    std::fill(s2.mask.begin(), s2.mask.end() - 1, false);
    Observation end = s2;
    std::fill(end.mask.begin(), end.mask.end(), false);

    EpisodeTrace tr;
    tr.transitions = {{s0, EnvAction::select(a0), -0.4, s1, false, 1.0},
                      {s1, EnvAction::select(a1), -0.7, s2, false, 1.0},
                      {s2, EnvAction::terminate(), 15.0, end, true, 1.0}};
    const auto q = target_retrace(tr, eval, target, 0.9);
    EXPECT_NEAR(q[2], 15.0, 1e-12);
    EXPECT_NEAR(q[1], -0.7 + 0.9 * 15.0, 1e-9);
    EXPECT_NEAR(q[0], -0.4 + 0.9 * (-0.7) + 0.81 * 15.0, 1e-9);
}

TEST(Targets, RetraceTruncatesAfterExploration) {
    const MatchingEnv env = tiny_env();
    const QNetwork eval = tiny_net(9), target = tiny_net(10);
    std::mt19937_64 rng(9);
    std::size_t checked = 0;
    for (int e = 0; e < 30; ++e) {
        const EpisodeTrace tr = rollout(env, e % 3, eval, 1.0, rng);
        const auto q = target_retrace(tr, eval, target, 0.9);
        for (std::size_t t = 0; t + 1 < tr.transitions.size(); ++t) {
            const std::size_t greedy = forward(eval, tr.transitions[t].next_observation).greedy_action();
            if (tr.transitions[t + 1].action.index(4) != greedy) {
                EXPECT_NEAR(q[t], target_double(tr, t, eval, target, 0.9), 1e-12);
                ++checked;
            }
        }
    }
    EXPECT_GT(checked, 0u);
}

TEST(Targets, RetraceNeedsBehaviourProbabilities) {
    EpisodeTrace tr = hand_trace(tiny_pair(2), -0.4, 5.0);
    tr.transitions[0].behavior_prob = 0.0;
    EXPECT_THROW(target_retrace(tr, tiny_net(1), tiny_net(2), 0.9), ValidationError);
}

TEST(TdLoss, HandArithmeticAndExactFit) {
    const ImagePair p = tiny_pair(3);
    const QNetwork net = constant_q(1.0);
    const TdSample s{observe(p, {2}), 0, 3.0};
    const LossAndGrad lg = td_loss(net, std::span<const TdSample>(&s, 1));
    EXPECT_DOUBLE_EQ(lg.loss, 2.0);
    // Q depends on value_b with unit slope here, so dLoss/dvalue_b = dLoss/dQ.
    EXPECT_DOUBLE_EQ(lg.grad[net.layout().value_b], -2.0);

    const TdSample fit{observe(p, {2}), 0, 1.0};
    const LossAndGrad zero = td_loss(net, std::span<const TdSample>(&fit, 1));
    EXPECT_EQ(zero.loss, 0.0);
    for (double g : zero.grad) EXPECT_EQ(g, 0.0);

    const TdSample masked{observe(p, {2}), 2, 1.0};
    EXPECT_THROW(td_loss(net, std::span<const TdSample>(&masked, 1)), ValidationError);

    const LossAndGrad hub = td_loss(net, std::span<const TdSample>(&s, 1), true);
    EXPECT_DOUBLE_EQ(hub.loss, 1.5);
    EXPECT_DOUBLE_EQ(hub.grad[net.layout().value_b], -1.0);
}

TEST(TdLoss, GradientMatchesFiniteDifferences) {
    QNetwork net = tiny_net(11);
    std::vector<ImagePair> pairs;
    for (int k = 0; k < 5; ++k) pairs.push_back(tiny_pair(200 + k));
    std::vector<TdSample> batch;
    const std::vector<std::vector<std::size_t>> subsets{{}, {0}, {1, 3}, {2, 0, 1}, {3}};
    for (std::size_t k = 0; k < 5; ++k) {
        const Observation o = observe(pairs[k], subsets[k]);
        std::size_t a = 0;
        while (!o.mask[a]) ++a;
        batch.push_back({o, a, 0.5 * static_cast<double>(k) - 1.0});
    }
    const LossAndGrad lg = td_loss(net, batch);
    std::mt19937_64 rng(12);
    std::uniform_int_distribution<std::size_t> pick(0, net.size() - 1);
    for (int probe = 0; probe < 60; ++probe) {
        const std::size_t k = pick(rng);
        const double num = central_difference(net.params(), k, 1e-5, [&] { return td_loss(net, batch).loss; });
        EXPECT_LT(relative_error(lg.grad[k], num), 1e-4) << "param " << k;
    }
}

TEST(Adam, ZeroGradientLeavesParameters) {
    std::vector<double> p{1.0, -2.0}, g{0.0, 0.0};
    AdamState st;
    optimizer_step(p, g, st, 0.001);
    EXPECT_EQ(p, (std::vector<double>{1.0, -2.0}));
}

TEST(Adam, FirstStepIsScaleFree) {
    auto first_step = [](double g) {
        std::vector<double> p{0.0}, grad{g};
        AdamState st;
        optimizer_step(p, grad, st, 0.001);
        return -p[0];
    };
    // Bias-corrected step 1: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps).
    const double small = first_step(0.01), large = first_step(100.0);
    EXPECT_NEAR(small, 0.001 * 0.01 / (0.01 + 1e-8), 1e-15);
    EXPECT_NEAR(small / large, 1.0, 1e-3);
}

TEST(Adam, ConstantGradientStepApproachesLearningRate) {
    std::vector<double> p{0.0}, g{0.37};
    AdamState st;
    double prev = 0.0;
    for (int k = 0; k < 200; ++k) {
        prev = p[0];
        optimizer_step(p, g, st, 0.01);
    }
    EXPECT_NEAR(prev - p[0], 0.01, 1e-6);
}

TEST(Adam, NonFiniteGradientDiverges) {
    std::vector<double> p{0.0, 0.0}, g{1.0, std::nan("")};
    AdamState st;
    EXPECT_THROW(optimizer_step(p, g, st, 0.001), DivergenceError);
}

TEST(Replay, CapacityAndValidation) {
    ReplayBuffer buf(2);
    const MatchingEnv env = tiny_env();
    const QNetwork net = tiny_net(13);
    std::mt19937_64 rng(13);
    for (int e = 0; e < 5; ++e) buf.push(rollout(env, 0, net, 0.5, rng));
    EXPECT_EQ(buf.size(), 2u);
    EXPECT_EQ(buf.inserted(), 5u);
    const auto [ep, t] = buf.sample(rng);
    EXPECT_LT(ep, 2u);
    EXPECT_LT(t, buf.episode(ep).transitions.size());
    EpisodeTrace bad = rollout(env, 0, net, 0.5, rng);
    bad.transitions[0].behavior_prob = 0.0;
    EXPECT_THROW(buf.push(bad), ValidationError);
}

TEST(Schedule, EpsilonIsLinearThenFlat) {
    TrainerConfig c;
    c.max_iterations = 100;
    EXPECT_EQ(epsilon_at(c, 0), 1.0);
    EXPECT_NEAR(epsilon_at(c, 25), 0.525, 1e-12);
    EXPECT_EQ(epsilon_at(c, 50), 0.05);
    EXPECT_EQ(epsilon_at(c, 99), 0.05);
}

TEST(Train, ZeroIterationsReturnsInitialNetwork) {
    const MatchingEnv env = tiny_env();
    TrainerConfig c;
    c.max_iterations = 0;
    const TrainResult r = train(env, env, tiny_config(), c);
    EXPECT_TRUE(r.log.empty());
    EXPECT_EQ(r.net.config(), tiny_config());
    EXPECT_EQ(r.net.size(), parameter_count(tiny_config()));
}

TEST(Train, DeterministicPerSeed) {
    const MatchingEnv env = tiny_env();
    TrainerConfig c;
    c.max_iterations = 25;
    c.batch_size = 4;
    c.rollouts_per_iteration = 2;
    c.seed = 77;
    const TrainResult a = train(env, env, tiny_config(), c);
    const TrainResult b = train(env, env, tiny_config(), c);
    EXPECT_EQ(metrics_to_csv(a.log), metrics_to_csv(b.log));
    EXPECT_EQ(a.net.params(), b.net.params());
    ASSERT_EQ(a.log.size(), 25u);
    EXPECT_TRUE(a.log[9].val_return.has_value());
    EXPECT_FALSE(a.log[10].val_return.has_value());
    EXPECT_TRUE(a.log.back().val_return.has_value());

    const std::string csv = metrics_to_csv(a.log);
    EXPECT_EQ(csv.substr(0, csv.find('\n')),
              "iteration,mean_train_return,val_return,lr,epsilon,loss,mean_episode_len,selected_subset_mode");
}

TEST(Train, ImproveCallbackSeesTheBestNetwork) {
    const MatchingEnv env = tiny_env();
    TrainerConfig c;
    c.max_iterations = 30;
    c.batch_size = 4;
    c.rollouts_per_iteration = 2;
    std::vector<double> seen;
    QNetwork last;
    const TrainResult r = train(env, env, tiny_config(), c, [&](const QNetwork& net, std::size_t, double v) {
        seen.push_back(v);
        last = net;
    });
    ASSERT_FALSE(seen.empty());
    EXPECT_TRUE(std::is_sorted(seen.begin(), seen.end()));
    EXPECT_EQ(seen.back(), r.best_val_return);
    EXPECT_EQ(last.params(), r.net.params());
    EXPECT_NEAR(evaluate_greedy(env, r.net).mean_return, r.best_val_return, 1e-12);
}

TEST(Train, ConfigValidation) {
    TrainerConfig c;
    c.lr = 0.0;
    EXPECT_THROW(validate_trainer_config(c), ValidationError);
    c = {};
    c.gamma = 1.5;
    EXPECT_THROW(validate_trainer_config(c), ValidationError);
    c = {};
    c.stop_patience = 0;
    EXPECT_THROW(validate_trainer_config(c), ValidationError);
}

}  // namespace
}  // namespace scalesel
