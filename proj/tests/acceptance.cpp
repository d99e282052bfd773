// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance --cli <path to scalesel binary> --work <scratch dir> [--only N]

#include <scalesel/dqn_trainer.hpp>
#include <scalesel/eval_metrics.hpp>
#include <scalesel/hough_matcher.hpp>
#include <scalesel/matching_env.hpp>
#include <scalesel/pyramid_io.hpp>
#include <scalesel/q_network.hpp>
#include <scalesel/run_config.hpp>
#include <scalesel/synthetic.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>

namespace fs = std::filesystem;
using namespace scalesel;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int precision = 6) {
    std::ostringstream os;
    os.precision(precision);
    os << v;
    return os.str();
}

struct Outcome {
    bool pass = true;
    std::string detail;
};

// ---------------------------------------------------------------------------
// Shared fixtures

FeatureMap random_map(std::uint32_t c, std::uint32_t h, std::uint32_t w, float stride, std::mt19937_64& rng,
                      std::uint32_t layer) {
    std::normal_distribution<double> g(0.0, 1.0);
    FeatureMap m;
    m.layer_index = layer;
    m.channels = c;
    m.height = h;
    m.width = w;
    m.stride = stride;
    m.data.resize(std::size_t{c} * h * w);
    for (auto& v : m.data) v = static_cast<float>(g(rng));
    return m;
}

ImagePair tiny_pair(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    ImagePair p;
    for (FeaturePyramid* pyr : {&p.source, &p.target}) {
        pyr->image_height = pyr->image_width = 64;
        for (std::uint32_t i = 0; i < 4; ++i) pyr->levels.push_back(random_map(2, 4, 4, 16.0f, rng, i));
        for (int k = 0; k < 3; ++k) pyr->global_descriptor.push_back(static_cast<float>(g(rng)));
    }
    std::uniform_real_distribution<double> u(0.0, 63.0);
    for (KeypointSet* kps : {&p.src_keypoints, &p.tgt_keypoints}) {
        kps->bbox = {0.0, 0.0, 64.0, 64.0};
        for (int k = 0; k < 4; ++k) kps->points.push_back({u(rng), u(rng)});
    }
    return p;
}

QNetwork tiny_net(std::uint64_t seed) {
    NetConfig cfg;
    cfg.num_levels = 4;
    cfg.embed_dim = 8;
    cfg.level_channels = {2, 2, 2, 2};
    cfg.global_dim = 3;
    QNetwork net = init(cfg, seed);
    std::mt19937_64 rng(seed + 1);
    std::uniform_real_distribution<double> u(-0.3, 0.3);
    for (const ParamBlock& b : net.layout().blocks)
        if (b.bias)
            for (std::size_t k = 0; k < b.size; ++k) net.params()[b.offset + k] = u(rng);
    return net;
}

Observation observe(const ImagePair& p, std::vector<std::size_t> selected) {
    Observation o;
    o.pair = &p;
    o.selected = std::move(selected);
    o.mask.assign(5, true);
    for (std::size_t i : o.selected) o.mask[i] = false;
    o.mask[4] = !o.selected.empty();
    return o;
}

std::vector<ImagePair> planted_pairs(std::size_t count, std::uint64_t seed0, double noise, Warp warp) {
    std::vector<ImagePair> out;
    SyntheticSpec spec = default_pair_spec();
    spec.noise_sigma = noise;
    spec.warp = warp;
    for (std::size_t k = 0; k < count; ++k) {
        spec.seed = seed0 + k;
        out.push_back(gen_synthetic_pair(spec));
    }
    return out;
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness

Outcome criterion_gradients() {
    const auto t0 = Clock::now();
    QNetwork net = tiny_net(2024);
    std::vector<ImagePair> pairs;
    for (int k = 0; k < 5; ++k) pairs.push_back(tiny_pair(700 + k));
    const std::vector<std::vector<std::size_t>> subsets{{}, {2}, {0, 3}, {1, 2, 3}, {0, 1, 2, 3}};
    std::mt19937_64 rng(99);
    std::uniform_int_distribution<std::size_t> pick(0, net.size() - 1);
    std::normal_distribution<double> target(0.0, 2.0);

    double worst = 0.0;
    std::size_t probes = 0;
    for (std::size_t o = 0; o < 5; ++o) {
        const Observation obs = observe(pairs[o], subsets[o]);
        std::vector<std::size_t> valid;
        for (std::size_t a = 0; a < 5; ++a)
            if (obs.mask[a]) valid.push_back(a);
        const TdSample sample{obs, valid[o % valid.size()], target(rng)};
        const std::span<const TdSample> batch(&sample, 1);
        const LossAndGrad lg = td_loss(net, batch);
        for (int p = 0; p < 40; ++p) {
            const std::size_t k = pick(rng);
            const double saved = net.params()[k];
            net.params()[k] = saved + 1e-5;
            const double up = td_loss(net, batch).loss;
            net.params()[k] = saved - 1e-5;
            const double down = td_loss(net, batch).loss;
            net.params()[k] = saved;
            const double num = (up - down) / 2e-5, ana = lg.grad[k];
            const double scale = std::max(std::abs(num), std::abs(ana));
            const double rel = scale == 0.0 ? 0.0 : std::abs(num - ana) / scale;
            worst = std::max(worst, rel);
            ++probes;
        }
    }
    const double secs = seconds_since(t0);
    return {worst < 1e-4 && probes >= 200 && secs < 30.0,
            "max rel err " + fmt(worst, 3) + " over " + std::to_string(probes) + " probes, 5 observations, " +
                fmt(secs, 3) + " s"};
}

// ---------------------------------------------------------------------------
// 2. Equation identities

Outcome criterion_identities() {
    constexpr double tol = 1e-9;
    double worst_shift = 0.0, worst_double = 0.0, worst_mc = 0.0, worst_trunc = 0.0, worst_soft = 0.0,
           worst_return = 0.0;
    std::mt19937_64 rng(5);
    std::normal_distribution<double> g(0.0, 3.0);
    for (int t = 0; t < 200; ++t) {
        std::vector<double> a(7), s(7);
        const double v = g(rng), c = g(rng);
        for (std::size_t k = 0; k < 7; ++k) {
            a[k] = g(rng);
            s[k] = a[k] + c;
        }
        const auto q = dueling_combine(v, a), qs = dueling_combine(v, s);
        for (std::size_t k = 0; k < 7; ++k) worst_shift = std::max(worst_shift, std::abs(q[k] - qs[k]));
    }

    std::vector<ImagePair> ps;
    for (int k = 0; k < 3; ++k) ps.push_back(tiny_pair(40 + k));
    const MatchingEnv env(make_env_config(ps));
    const QNetwork eval = tiny_net(8), target = tiny_net(9);
    std::size_t truncated = 0;
    for (int e = 0; e < 40; ++e) {
        const EpisodeTrace tr = rollout(env, e % 3, eval, e < 20 ? 0.6 : 1.0, rng);
        for (std::size_t t = 0; t < tr.transitions.size(); ++t) {
            worst_double =
                std::max(worst_double, std::abs(target_double(tr, t, eval, eval, 0.95) - target_standard(tr, t, eval, 0.95)));
        }
        const auto q = target_retrace(tr, eval, target, 0.95);
        for (std::size_t t = 0; t + 1 < tr.transitions.size(); ++t) {
            const std::size_t greedy = forward(eval, tr.transitions[t].next_observation).greedy_action();
            if (tr.transitions[t + 1].action.index(4) != greedy) {
                worst_trunc = std::max(worst_trunc, std::abs(q[t] - target_double(tr, t, eval, target, 0.95)));
                ++truncated;
            }
        }
        worst_return = std::max(worst_return, std::abs(tr.total_return - subset_return(env.config(), tr.selected)));
    }
    for (std::size_t p = 0; p < 3; ++p) {
        const EpisodeTrace tr = greedy_episode(env, p, eval);
        const auto q = target_retrace(tr, eval, target, 0.95);
        double mc = 0.0;
        for (std::size_t t = tr.transitions.size(); t-- > 0;) {
            mc = tr.transitions[t].reward + 0.95 * mc;
            worst_mc = std::max(worst_mc, std::abs(q[t] - mc));
        }
        worst_return = std::max(worst_return, std::abs(tr.total_return - subset_return(env.config(), tr.selected)));
    }

    QNetwork a = tiny_net(11);
    const QNetwork b = tiny_net(12);
    for (double rho : {0.01, 0.1, 0.5}) {
        double before = 0.0, after = 0.0;
        for (std::size_t k = 0; k < a.size(); ++k) before += std::pow(a.params()[k] - b.params()[k], 2);
        soft_update(a, b, rho);
        for (std::size_t k = 0; k < a.size(); ++k) after += std::pow(a.params()[k] - b.params()[k], 2);
        worst_soft = std::max(worst_soft, std::abs(std::sqrt(after) / std::sqrt(before) - (1.0 - rho)));
    }

    const bool pass = worst_shift <= tol && worst_double <= tol && worst_mc <= tol && worst_trunc <= tol &&
                      worst_soft <= tol && worst_return <= tol && truncated > 0;
    return {pass, "advantage shift " + fmt(worst_shift, 3) + ", double=standard " + fmt(worst_double, 3) +
                      ", retrace MC " + fmt(worst_mc, 3) + ", retrace cut " + fmt(worst_trunc, 3) + " (" +
                      std::to_string(truncated) + " steps), soft-update factor " + fmt(worst_soft, 3) +
                      ", return identity " + fmt(worst_return, 3)};
}

// ---------------------------------------------------------------------------
// 3. Hough oracle equivalence

Outcome criterion_hough_oracle() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(31);
    std::uniform_int_distribution<std::uint32_t> side(2, 8), chans(1, 6);
    std::uniform_int_distribution<std::uint32_t> bins(1, 16);
    double worst_vote = 0.0, worst_rw = 0.0, worst_cons = 0.0;
    std::size_t argmax_mismatch = 0;
    for (int trial = 0; trial < 50; ++trial) {
        // Three levels per image, each at most 8x8, halving from a random base.
        const std::uint32_t h = side(rng), w = side(rng);
        auto pyramid = [&](std::uint32_t hh, std::uint32_t ww) {
            FeaturePyramid p;
            p.image_height = hh * 8;
            p.image_width = ww * 8;
            for (std::uint32_t l = 0; l < 3; ++l) {
                const std::uint32_t f = 1u << l;
                const std::uint32_t lh = std::max(1u, hh / f), lw = std::max(1u, ww / f);
                FeatureMap m = random_map(chans(rng), lh, lw, 8.0f * hh / lh, rng, l);
                p.levels.push_back(std::move(m));
            }
            p.global_descriptor = {1.0f};
            return p;
        };
        const FeaturePyramid src = pyramid(h, w), tgt = pyramid(side(rng), side(rng));
        Subset sel;
        while (sel.empty()) {
            for (std::size_t l = 0; l < 3; ++l)
                if (rng() & 1) sel.push_back(l);
        }
        // Level channel counts differ between the two pyramids; align them.
        FeaturePyramid tgt_aligned = tgt;
        for (std::size_t l = 0; l < 3; ++l) {
            FeatureMap& m = tgt_aligned.levels[l];
            m = random_map(src.levels[l].channels, m.height, m.width, m.stride, rng, static_cast<std::uint32_t>(l));
        }
        const FeatureMap a = build_hyperimage(src, sel, true), b = build_hyperimage(tgt_aligned, sel, true);
        const Correlation corr = compute_correlation(a, b);
        const std::uint32_t bx = bins(rng), by = bins(rng);
        const OffsetBinGrid grid = hough_vote(corr, bx, by);
        const MatchResult m = reweight(corr, grid);

        // Naive reference: offsets from cell centres, quantized directly.
        auto quant = [](double d, double r, std::uint32_t n) {
            const double t = std::floor((d + r) / (2 * r) * n);
            return static_cast<std::size_t>(std::clamp(t, 0.0, double(n - 1)));
        };
        const std::size_t ps = corr.src.positions(), pt = corr.tgt.positions();
        std::vector<double> ref(std::size_t{bx} * by, 0.0);
        std::vector<std::size_t> bin_of(ps * pt);
        for (std::size_t p = 0; p < ps; ++p) {
            for (std::size_t q = 0; q < pt; ++q) {
                double na = 0, nb = 0, dot = 0;
                for (std::size_t c = 0; c < a.channels; ++c) {
                    const double u = a.data[c * ps + p], v = b.data[c * pt + q];
                    dot += u * v;
                    na += u * u;
                    nb += v * v;
                }
                const double cs = na > 0 && nb > 0 ? std::clamp(dot / std::sqrt(na * nb), 0.0, 1.0) : 0.0;
                const double dx = ((q % b.width) + 0.5) * b.stride - ((p % a.width) + 0.5) * a.stride;
                const double dy = ((q / b.width) + 0.5) * b.stride - ((p / a.width) + 0.5) * a.stride;
                const std::size_t bin = quant(dy, corr.range_y, by) * bx + quant(dx, corr.range_x, bx);
                bin_of[p * pt + q] = bin;
                ref[bin] += cs;
            }
        }
        double sum_votes = 0.0, sum_corr = 0.0;
        for (std::size_t k = 0; k < ref.size(); ++k) {
            worst_vote = std::max(worst_vote, std::abs(ref[k] - grid.votes[k]));
            sum_votes += grid.votes[k];
        }
        for (double v : corr.values) sum_corr += v;
        worst_cons = std::max(worst_cons, sum_corr > 0 ? std::abs(sum_votes - sum_corr) / sum_corr : 0.0);
        for (std::size_t p = 0; p < ps; ++p) {
            double best = -1;
            std::size_t best_q = 0;
            for (std::size_t q = 0; q < pt; ++q) {
                const double rw = corr.values[p * pt + q] * ref[bin_of[p * pt + q]];
                worst_rw = std::max(worst_rw, std::abs(rw - m.reweighted[p * pt + q]));
                if (rw > best + 1e-12) {
                    best = rw;
                    best_q = q;
                }
            }
            const double got = m.reweighted[p * pt + m.best_target[p]];
            if (std::abs(got - best) > 1e-6 || (best_q != m.best_target[p] && std::abs(got - best) > 1e-12)) {
                ++argmax_mismatch;
            }
        }
    }
    const double secs = seconds_since(t0);
    const bool pass = worst_vote <= 1e-6 && worst_rw <= 1e-6 && worst_cons <= 1e-5 && argmax_mismatch == 0 && secs < 60;
    return {pass, "50 pairs: votes " + fmt(worst_vote, 3) + ", reweight " + fmt(worst_rw, 3) + ", conservation " +
                      fmt(worst_cons, 3) + ", argmax mismatches " + std::to_string(argmax_mismatch) + ", " +
                      fmt(secs, 3) + " s"};
}

// ---------------------------------------------------------------------------
// 4. Self-match and planted translation

Outcome criterion_self_match() {
    const Subset planted{1, 4};
    const auto same = planted_pairs(20, 4000, 0.0, Warp{});
    const double self_pck = score(same, planted, 0.1);

    // One stride of the coarsest informative level, so every informative grid shifts by whole cells.
    double worst = 0.0;
    std::size_t moved_pairs = 0;
    for (auto [dx, dy] : {std::pair{16.0, 0.0}, {0.0, 16.0}, {-16.0, 0.0}, {16.0, 16.0}}) {
        Warp shift;
        shift.kind = WarpKind::translation;
        shift.dx = dx;
        shift.dy = dy;
        for (const ImagePair& p : planted_pairs(10, 4100 + moved_pairs, 0.0, shift)) {
            const KeypointSet out = transfer_keypoints(match_pair(p, planted), p.src_keypoints);
            for (std::size_t k = 0; k < out.size(); ++k) {
                worst = std::max(worst, std::hypot(out.points[k].x - p.tgt_keypoints.points[k].x,
                                                   out.points[k].y - p.tgt_keypoints.points[k].y));
            }
            ++moved_pairs;
        }
    }
    return {self_pck == 1.0 && worst < 1.0,
            "identity PCK@0.1 " + fmt(self_pck) + " (20 pairs); 16 px shift max error " + fmt(worst, 4) + " px (" +
                std::to_string(moved_pairs) + " pairs)"};
}

// ---------------------------------------------------------------------------
// 5. End-to-end learning

struct SeedRun {
    bool pass = false;
    std::string line;
};

SeedRun learning_run(std::uint64_t seed) {
    RunConfig cfg = default_run_config();
    cfg.seed = seed;
    std::vector<ImagePair> train_pairs, val_pairs;
    for (std::size_t k = 0; k < 40; ++k) {
        SyntheticSpec s = cfg.data.pair_spec;
        s.seed = pair_seed(seed, 0, k);
        train_pairs.push_back(gen_synthetic_pair(s));
    }
    for (std::size_t k = 0; k < 10; ++k) {
        SyntheticSpec s = cfg.data.pair_spec;
        s.seed = pair_seed(seed, 1, k);
        val_pairs.push_back(gen_synthetic_pair(s));
    }
    const auto t0 = Clock::now();
    const MatchingEnv train_env(env_config_for(cfg.env, train_pairs));
    const MatchingEnv val_env(env_config_for(cfg.env, val_pairs));
    TrainerConfig tc = cfg.trainer;
    tc.seed = seed;
    const NetConfig net_cfg = net_config_for(train_pairs.front(), cfg.net.embed_dim, cfg.net.aggregation);
    const TrainResult r = train(train_env, val_env, net_cfg, tc);
    const double secs = seconds_since(t0);

    const ValidationReport rep = evaluate_greedy(val_env, r.net);
    const OracleResult oracle = exhaustive_oracle(val_env.config());
    const SubsetScore best = best_return(oracle, val_env.config());
    double mean_size = 0.0;
    for (const EpisodeTrace& e : rep.episodes) mean_size += static_cast<double>(e.selected.size());
    mean_size /= static_cast<double>(rep.episodes.size());
    const Subset chosen = subset_mode(rep.episodes);
    const double trained_score = val_env.score(chosen);
    const auto randoms = random_selection_eval(val_env.config(), chosen.size(), 10, seed);
    double random_mean = 0.0;
    for (const SubsetScore& s : randoms) random_mean += s.score / static_cast<double>(randoms.size());

    SeedRun out;
    out.pass = rep.mean_return >= 0.95 * best.score && mean_size <= 3.0 && trained_score > random_mean && secs < 600.0;
    out.line = "seed " + std::to_string(seed) + ": val return " + fmt(rep.mean_return, 5) + " vs oracle " +
               fmt(best.score, 5) + " {" + subset_to_string(best.subset, ',') + "} (ratio " +
               fmt(rep.mean_return / best.score, 4) + "), mean |s| " + fmt(mean_size, 3) + ", subset {" +
               subset_to_string(chosen, ',') + "} score " + fmt(trained_score, 4) + " vs random K=" +
               std::to_string(chosen.size()) + " mean " + fmt(random_mean, 4) + ", " +
               std::to_string(r.log.size()) + " iterations, " + fmt(secs, 4) + " s" + (out.pass ? "" : " [miss]");
    return out;
}

Outcome criterion_learning() {
    std::size_t passed = 0;
    std::string detail;
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const SeedRun r = learning_run(seed);
        std::cout << "      " << r.line << std::endl;
        passed += r.pass;
    }
    return {passed >= 2, std::to_string(passed) + "/3 seeds meet return, size, random-baseline and runtime bounds"};
}

// ---------------------------------------------------------------------------
// 6. Baseline order

Outcome criterion_baseline_order() {
    const std::map<Subset, double> table{{{0}, 0.6},      {{1}, 0.5},      {{2}, 0.5},       {{0, 1}, 0.55},
                                         {{0, 2}, 0.55},  {{1, 2}, 0.9},   {{0, 1, 2}, 0.7}};
    auto f = [&](std::span<const std::size_t> s) { return table.at(Subset(s.begin(), s.end())); };
    const SubsetScore beam = beam_search_baseline(3, f, 1);
    const OracleResult oracle = exhaustive_oracle(3, f);
    const bool pass = beam.score < oracle.best.score && oracle.best.subset == Subset{1, 2};
    return {pass, "best singleton {0}; beam(1) {" + subset_to_string(beam.subset, ',') + "} " + fmt(beam.score) +
                      " < oracle {" + subset_to_string(oracle.best.subset, ',') + "} " + fmt(oracle.best.score)};
}

// ---------------------------------------------------------------------------
// 7. Determinism of the command-line tool

int run(const std::string& cmd) { return std::system((cmd + " > /dev/null 2>&1").c_str()); }

std::map<std::string, std::vector<char>> snapshot(const fs::path& root) {
    std::map<std::string, std::vector<char>> files;
    if (!fs::exists(root)) return files;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = detail::read_file(e.path());
    }
    return files;
}

Outcome criterion_determinism(const std::string& cli, const fs::path& work) {
    if (cli.empty() || !fs::exists(cli)) return {false, "scalesel binary not found (pass --cli)"};
    fs::remove_all(work);
    std::size_t identical = 0, compared = 0;
    std::string failed;
    for (int r = 0; r < 2; ++r) {
        const fs::path dir = work / ("run" + std::to_string(r));
        const std::string base = "\"" + cli + "\" ";
        const fs::path cfg_r = dir / "config.json";
        fs::create_directories(dir);
        detail::write_text(cfg_r, R"({
  "seed": 7,
  "synthetic": {"train_pairs": 4, "val_pairs": 3},
  "trainer": {"max_iterations": 20, "batch_size": 8, "rollouts_per_iteration": 2},
  "data_dir": ")" + (dir / "data").string() + R"(",
  "output_dir": ")" + (dir / "out").string() + R"("
}
)");
        const std::string c = " --config \"" + cfg_r.string() + "\" --quiet";
        if (run(base + "synth" + c) != 0) failed += " synth";
        if (run(base + "train" + c) != 0) failed += " train";
        if (run(base + "eval" + c) != 0) failed += " eval";
    }
    if (!failed.empty()) return {false, "command failed:" + failed};
    const auto a = snapshot(work / "run0"), b = snapshot(work / "run1");
    std::string diff;
    for (const auto& [name, bytes] : a) {
        if (name == "config.json") continue;  // holds the run's own paths
        ++compared;
        auto it = b.find(name);
        if (it != b.end() && it->second == bytes) {
            ++identical;
        } else {
            diff += " " + name;
        }
    }
    const bool has_outputs = a.count("out/metrics.csv") && a.count("out/model.qnet") && a.count("out/eval.json") &&
                             a.count("data/manifest.json");
    const bool pass = has_outputs && identical == compared && a.size() == b.size();
    return {pass, std::to_string(identical) + "/" + std::to_string(compared) +
                      " files byte-identical across two synth/train/eval runs" + (diff.empty() ? "" : "; differ:" + diff)};
}

// ---------------------------------------------------------------------------
// 8. Metric examples

Outcome criterion_metrics() {
    std::size_t ok = 0, total = 0;
    auto check = [&](bool c) {
        ++total;
        ok += c;
    };
    auto kp = [](std::vector<Point2> pts) {
        KeypointSet k;
        k.points = std::move(pts);
        return k;
    };
    const KeypointSet gt = kp({{1, 2}, {30, 40}, {99, 0}});
    check(pck(gt, gt, BoundingBox{0, 0, 100, 100}, 0.1).pck == 1.0);
    check(pck(kp({{10, 0}}), kp({{0, 0}}), BoundingBox{0, 0, 100, 50}, 0.1).pck == 1.0);
    std::vector<Point2> pred, truth;
    for (int k = 0; k < 10; ++k) {
        truth.push_back({10.0 * k, 5.0});
        pred.push_back({10.0 * k, 5.0 + (k < 5 ? 3.0 : 30.0)});
    }
    check(pck(kp(pred), kp(truth), BoundingBox{0, 0, 100, 100}, 0.1).pck == 0.5);

    auto blank = [](std::uint32_t h, std::uint32_t w) {
        BinaryMask m;
        m.height = h;
        m.width = w;
        m.pixels.assign(std::size_t{h} * w, 0);
        return m;
    };
    BinaryMask full = blank(8, 8);
    full.pixels[9] = full.pixels[10] = 1;
    const MaskMetrics same = mask_metrics(full, full);
    check(same.lt_acc == 1.0 && same.iou == 1.0);
    BinaryMask a = blank(8, 8), b = blank(8, 8);
    for (int k = 0; k < 16; ++k) {
        a.pixels[k] = 1;
        b.pixels[63 - k] = 1;
    }
    const MaskMetrics disjoint = mask_metrics(a, b);
    check(disjoint.iou == 0.0 && disjoint.lt_acc == 0.5);
    check(mask_metrics(blank(4, 4), blank(4, 4)).iou == 1.0);

    DenseFlow flow;
    flow.grid = {4, 4, 16.0};
    flow.flow.assign(16, Point2{0, 0});
    BinaryMask src = blank(64, 64);
    for (int y = 4; y < 20; ++y)
        for (int x = 40; x < 64; ++x) src.pixels[y * 64 + x] = 1;
    check(warp_mask(flow, src) == src);
    flow.flow.assign(16, Point2{16, 0});
    BinaryMask shifted = blank(64, 64);
    for (int y = 4; y < 20; ++y)
        for (int x = 56; x < 64; ++x) shifted.pixels[y * 64 + x] = 1;
    check(warp_mask(flow, src) == shifted);
    check(warp_mask(flow, blank(64, 64)).count() == 0);
    return {ok == total, std::to_string(ok) + "/" + std::to_string(total) + " metric examples exact"};
}

}  // namespace

int main(int argc, char** argv) {
    std::string cli;
    fs::path work = fs::temp_directory_path() / "scalesel_acceptance";
    int only = 0;
    for (int i = 1; i < argc; ++i) {
        const std::string arg = argv[i];
        if (arg == "--cli" && i + 1 < argc) {
            cli = argv[++i];
        } else if (arg == "--work" && i + 1 < argc) {
            work = argv[++i];
        } else if (arg == "--only" && i + 1 < argc) {
            only = std::atoi(argv[++i]);
        } else {
            std::cerr << "usage: acceptance --cli <scalesel> [--work <dir>] [--only N]\n";
            return 1;
        }
    }

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"gradient correctness", criterion_gradients},
        {"equation identities", criterion_identities},
        {"hough oracle equivalence", criterion_hough_oracle},
        {"self-match and planted translation", criterion_self_match},
        {"end-to-end learning", criterion_learning},
        {"baseline order", criterion_baseline_order},
        {"determinism", [&] { return criterion_determinism(cli, work); }},
        {"metric examples", criterion_metrics},
    };
    int failures = 0;
    for (std::size_t k = 0; k < criteria.size(); ++k) {
        if (only != 0 && static_cast<int>(k + 1) != only) continue;
        Outcome o;
        try {
            o = criteria[k].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failures += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << " [" << k + 1 << "] " << criteria[k].first << ": " << o.detail
                  << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
