// scalesel: synthetic data, training, evaluation, matching and baselines.
//
// Exit codes: 0 success, 1 validation or configuration error, 2 numeric divergence.

#include <scalesel/dqn_trainer.hpp>
#include <scalesel/eval_metrics.hpp>
#include <scalesel/hough_matcher.hpp>
#include <scalesel/matching_env.hpp>
#include <scalesel/pyramid_io.hpp>
#include <scalesel/q_network.hpp>
#include <scalesel/run_config.hpp>
#include <scalesel/synthetic.hpp>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace scalesel;

namespace {

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string checkpoint;
    std::optional<std::string> subset;
    bool quiet = false;
    // match
    std::string source, target, keypoints;
};

struct Context {
    RunConfig cfg;
    Options opt;

    void log(const std::string& msg) const {
        if (!opt.quiet) std::cerr << msg << '\n';
    }
    fs::path out_dir() const { return opt.out.empty() ? cfg.output_dir : fs::path(opt.out); }
    fs::path checkpoint_path() const {
        if (!opt.checkpoint.empty()) return opt.checkpoint;
        if (cfg.checkpoint) return *cfg.checkpoint;
        return out_dir() / "model.qnet";
    }
};

Context make_context(const Options& opt) {
    Context ctx;
    ctx.opt = opt;
    ctx.cfg = opt.config.empty() ? default_run_config() : load_run_config(opt.config);
    if (opt.seed) ctx.cfg.seed = *opt.seed;
    return ctx;
}

Subset parse_subset(const std::string& text) {
    Subset s;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        std::size_t used = 0;
        unsigned long v = 0;
        try {
            v = std::stoul(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != item.size()) throw ValidationError("--subset: '" + item + "' is not a level index");
        s.push_back(v);
    }
    return s;
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

std::string pair_name(std::size_t k) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "pair_%04zu", k);
    return buf;
}

// ---------------------------------------------------------------------------
// Data set on disk: <dir>/manifest.json, <dir>/{train,val}/pair_XXXX/

struct Dataset {
    std::vector<ImagePair> train;
    std::vector<ImagePair> val;
    std::vector<std::string> train_ids;
    std::vector<std::string> val_ids;
};

Dataset load_dataset(const fs::path& dir) {
    const fs::path manifest = dir / "manifest.json";
    if (!fs::exists(manifest)) throw ValidationError("data_dir " + dir.string() + ": manifest.json not found");
    const auto bytes = detail::read_file(manifest);
    json m;
    try {
        m = json::parse(bytes.begin(), bytes.end());
    } catch (const json::parse_error& e) {
        throw FormatError("manifest.json: " + std::string(e.what()));
    }
    Dataset d;
    for (const char* split : {"train", "val"}) {
        auto& pairs = std::string(split) == "train" ? d.train : d.val;
        auto& ids = std::string(split) == "train" ? d.train_ids : d.val_ids;
        for (const auto& name : m.at(split)) {
            ids.push_back(name.get<std::string>());
            pairs.push_back(load_pair(dir / split / ids.back()));
        }
    }
    return d;
}

const std::vector<ImagePair>& eval_pairs(const Context& ctx, const Dataset& d) {
    return ctx.cfg.eval_split == "train" ? d.train : d.val;
}
const std::vector<std::string>& eval_ids(const Context& ctx, const Dataset& d) {
    return ctx.cfg.eval_split == "train" ? d.train_ids : d.val_ids;
}

// ---------------------------------------------------------------------------

int cmd_synth(const Context& ctx) {
    const RunConfig& cfg = ctx.cfg;
    SyntheticSpec probe = cfg.data.pair_spec;
    validate_spec(probe);
    const fs::path dir = ctx.opt.out.empty() ? cfg.data_dir : fs::path(ctx.opt.out);
    ensure_dir(dir);
    json manifest = {{"seed", cfg.seed}, {"train", json::array()}, {"val", json::array()}};
    const std::size_t counts[2] = {cfg.data.train_pairs, cfg.data.val_pairs};
    const char* splits[2] = {"train", "val"};
    for (std::uint64_t s = 0; s < 2; ++s) {
        for (std::size_t k = 0; k < counts[s]; ++k) {
            SyntheticSpec spec = cfg.data.pair_spec;
            spec.seed = pair_seed(cfg.seed, s, k);
            save_pair(gen_synthetic_pair(spec), dir / splits[s] / pair_name(k));
            manifest[splits[s]].push_back(pair_name(k));
        }
    }
    detail::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
    ctx.log("wrote " + std::to_string(counts[0]) + " train and " + std::to_string(counts[1]) + " val pairs to " +
            dir.string());
    return 0;
}

int cmd_train(const Context& ctx) {
    const RunConfig& cfg = ctx.cfg;
    const Dataset data = load_dataset(cfg.data_dir);
    if (data.train.empty() || data.val.empty()) throw ValidationError("train: need at least one train and one val pair");
    const fs::path out = ctx.out_dir();
    const fs::path ckpt = ctx.checkpoint_path();
    ensure_dir(out);
    if (ckpt.has_parent_path()) ensure_dir(ckpt.parent_path());

    const MatchingEnv train_env(env_config_for(cfg.env, data.train));
    const MatchingEnv val_env(env_config_for(cfg.env, data.val));
    const NetConfig net_cfg = net_config_for(data.train.front(), cfg.net.embed_dim, cfg.net.aggregation);
    TrainerConfig tcfg = cfg.trainer;
    tcfg.seed = cfg.seed;

    bool wrote = false;
    const TrainResult result = train(train_env, val_env, net_cfg, tcfg, [&](const QNetwork& net, std::size_t it, double v) {
        save_checkpoint(net, ckpt, {{"iteration", it}, {"val_return", v}, {"seed", cfg.seed}});
        wrote = true;
        ctx.log("iteration " + std::to_string(it) + ": val_return " + std::to_string(v));
    });
    if (!wrote) save_checkpoint(result.net, ckpt, {{"iteration", nullptr}, {"seed", cfg.seed}});
    detail::write_text(out / "metrics.csv", metrics_to_csv(result.log));
    ctx.log("best val_return " + std::to_string(result.best_val_return) + " at iteration " +
            std::to_string(result.best_iteration) + (result.stopped_early ? " (early stop)" : ""));
    return 0;
}

int cmd_eval(const Context& ctx) {
    const RunConfig& cfg = ctx.cfg;
    const Dataset data = load_dataset(cfg.data_dir);
    const auto& pairs = eval_pairs(ctx, data);
    const auto& ids = eval_ids(ctx, data);
    if (pairs.empty()) throw ValidationError("eval: the " + cfg.eval_split + " pair set is empty");
    const MatchingEnv env(env_config_for(cfg.env, pairs));

    json report;
    Subset subset;
    if (ctx.opt.subset) {
        subset = canonical_subset(parse_subset(*ctx.opt.subset));
        if (subset.empty()) throw EmptySelectionError();
        for (std::size_t i : subset) {
            if (i >= env.num_levels()) throw ValidationError("--subset: level " + std::to_string(i) + " out of range");
        }
        report["mode"] = "forced";
    } else {
        const QNetwork net = load_checkpoint(ctx.checkpoint_path());
        const NetConfig expect = net_config_for(pairs.front(), net.config().embed_dim, net.config().aggregation);
        if (!(net.config() == expect)) throw ValidationError("eval: checkpoint does not match the data's pyramid shape");
        const ValidationReport greedy = evaluate_greedy(env, net);
        subset = subset_mode(greedy.episodes);
        double mean_len = 0.0;
        for (const EpisodeTrace& e : greedy.episodes) mean_len += static_cast<double>(e.selected.size());
        report["mode"] = "policy";
        report["policy_mean_return"] = greedy.mean_return;
        report["policy_mean_subset_size"] = mean_len / static_cast<double>(greedy.episodes.size());
    }

    json per_pair = json::object();
    double lt = 0.0, iou = 0.0;
    std::size_t masked = 0;
    for (std::size_t k = 0; k < pairs.size(); ++k) {
        const ImagePair& p = pairs[k];
        const MatchResult m = match_pair(p, subset, cfg.env.hough);
        json rec = {{"pck", pck(transfer_keypoints(m, p.src_keypoints), p.tgt_keypoints, cfg.env.score_alpha).pck}};
        if (p.src_mask && p.tgt_mask) {
            const MaskMetrics mm = mask_metrics(warp_mask(dense_flow(m), *p.src_mask), *p.tgt_mask);
            rec["lt_acc"] = mm.lt_acc;
            rec["iou"] = mm.iou;
            lt += mm.lt_acc;
            iou += mm.iou;
            ++masked;
        }
        per_pair[ids[k]] = rec;
    }
    const double mean_pck = score(env.config(), subset);
    report["subset"] = subset;
    report["split"] = cfg.eval_split;
    report["per_pair"] = per_pair;
    report["mean_pck"] = mean_pck;
    report["episode_cost"] = subset_cost(env.config(), subset);
    report["total_return"] = subset_return(env.config(), subset);
    if (masked > 0) {
        report["mean_lt_acc"] = lt / static_cast<double>(masked);
        report["mean_iou"] = iou / static_cast<double>(masked);
    }
    const fs::path out = ctx.out_dir();
    ensure_dir(out);
    detail::write_text(out / "eval.json", report.dump(2) + "\n");
    ctx.log("subset " + subset_to_string(subset) + ": mean PCK " + std::to_string(mean_pck));
    return 0;
}

int cmd_match(const Context& ctx) {
    if (ctx.opt.source.empty() || ctx.opt.target.empty() || ctx.opt.keypoints.empty()) {
        throw ValidationError("match: --source, --target and --keypoints are required");
    }
    const Subset subset = canonical_subset(parse_subset(ctx.opt.subset.value_or("")));
    if (subset.empty()) throw EmptySelectionError();
    const FeaturePyramid src = load_pyramid(ctx.opt.source);
    const FeaturePyramid tgt = load_pyramid(ctx.opt.target);
    const Annotation ann = load_annotation(ctx.opt.keypoints);
    const MatchResult m = match_pyramids(src, tgt, subset, ctx.cfg.env.hough);
    const KeypointSet moved = transfer_keypoints(m, ann.keypoints);

    json pts = json::array();
    for (std::size_t k = 0; k < moved.size(); ++k) {
        pts.push_back({{"source", {ann.keypoints.points[k].x, ann.keypoints.points[k].y}},
                       {"target", {moved.points[k].x, moved.points[k].y}}});
    }
    const json doc = {{"subset", subset}, {"correspondences", pts}, {"match", match_to_json(m)}};
    const fs::path out = ctx.out_dir();
    ensure_dir(out);
    detail::write_text(out / "correspondences.json", doc.dump(2) + "\n");
    detail::write_text(out / "flow.csv", flow_to_csv(dense_flow(m)));
    ctx.log("matched " + std::to_string(moved.size()) + " keypoints with subset " + subset_to_string(subset));
    return 0;
}

int cmd_baseline(const Context& ctx, const std::string& which) {
    const RunConfig& cfg = ctx.cfg;
    const Dataset data = load_dataset(cfg.data_dir);
    const auto& pairs = eval_pairs(ctx, data);
    if (pairs.empty()) throw ValidationError(which + ": the " + cfg.eval_split + " pair set is empty");
    const EnvConfig env = env_config_for(cfg.env, pairs);
    const fs::path out = ctx.out_dir();
    ensure_dir(out);
    std::vector<SubsetScore> rows;
    if (which == "oracle") {
        const OracleResult r = exhaustive_oracle(env);
        rows = r.table;
        std::cout << "s* = " << subset_to_string(r.best.subset, ',') << "\n";
        std::ostringstream v;
        v.precision(17);
        v << r.best.score;
        std::cout << "f_m(s*) = " << v.str() << "\n";
    } else if (which == "beam") {
        rows.push_back(beam_search_baseline(env, cfg.baselines.beam_width));
    } else {
        rows = random_selection_eval(env, cfg.baselines.random_k, cfg.baselines.random_trials, cfg.seed);
    }
    detail::write_text(out / (which + ".csv"), subsets_to_csv(rows));
    ctx.log("wrote " + (out / (which + ".csv")).string());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Scale selection for multi-scale feature matching"};
    app.require_subcommand(1);
    Options opt;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", opt.config, "JSON run configuration")->check(CLI::ExistingFile);
        sub->add_option("--seed", opt.seed, "overrides the config seed");
        sub->add_option("--out", opt.out, "output directory");
        sub->add_option("--checkpoint", opt.checkpoint, "checkpoint path");
        sub->add_option("--subset", opt.subset, "comma-separated level indices, e.g. 1,4");
        sub->add_flag("--quiet", opt.quiet, "suppress progress output");
        return sub;
    };
    CLI::App* synth = common(app.add_subcommand("synth", "generate synthetic train/val pairs"));
    CLI::App* trainc = common(app.add_subcommand("train", "train the selection policy"));
    CLI::App* evalc = common(app.add_subcommand("eval", "evaluate a checkpoint or a forced subset"));
    CLI::App* match = common(app.add_subcommand("match", "match one pyramid pair with a fixed subset"));
    match->add_option("--source", opt.source, "source .fpyr")->check(CLI::ExistingFile);
    match->add_option("--target", opt.target, "target .fpyr")->check(CLI::ExistingFile);
    match->add_option("--keypoints", opt.keypoints, "source annotation JSON")->check(CLI::ExistingFile);
    CLI::App* oracle = common(app.add_subcommand("oracle", "score every subset"));
    CLI::App* beam = common(app.add_subcommand("beam", "prefix-ordered beam search"));
    CLI::App* random = common(app.add_subcommand("random", "random K-subsets"));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        const Context ctx = make_context(opt);
        if (synth->parsed()) return cmd_synth(ctx);
        if (trainc->parsed()) return cmd_train(ctx);
        if (evalc->parsed()) return cmd_eval(ctx);
        if (match->parsed()) return cmd_match(ctx);
        if (oracle->parsed()) return cmd_baseline(ctx, "oracle");
        if (beam->parsed()) return cmd_baseline(ctx, "beam");
        if (random->parsed()) return cmd_baseline(ctx, "random");
    } catch (const DivergenceError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}
