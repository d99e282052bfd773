#pragma once

// Decision network: per-level conv encoders -> bidirectional LSTM -> shared
// dueling decoder, with per-step Q-vectors aggregated by element-wise product.
//
// Parameters live in one flat vector. Canonical order:
//   for each level i: conv_w[d][c_i][3][3], conv_b[d]
//   adapter_w[2d][2*d_g], adapter_b[2d]
//   for dir in {forward, backward}: lstm_w[4d][2d], lstm_u[4d][d], lstm_b[4d]   (gate order i, f, g, o)
//   value_w[2d], value_b[1], adv_w[N+1][2d], adv_b[N+1]

#include <scalesel/error.hpp>
#include <scalesel/feature_pyramid.hpp>
#include <scalesel/matching_env.hpp>
#include <scalesel/pyramid_io.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace scalesel {

enum class Aggregation : std::uint32_t { product = 0, sum = 1, mean = 2 };

struct NetConfig {
    std::size_t num_levels = 0;
    std::size_t embed_dim = 16;
    std::vector<std::size_t> level_channels;
    std::size_t global_dim = 0;
    Aggregation aggregation = Aggregation::product;

    std::size_t action_count() const { return num_levels + 1; }
    bool operator==(const NetConfig&) const = default;
};

inline void validate_net_config(const NetConfig& cfg) {
    if (cfg.num_levels < 1) throw ValidationError("net: num_levels must be >= 1");
    if (cfg.embed_dim < 2) throw ValidationError("net: embed_dim must be >= 2");
    if (cfg.level_channels.size() != cfg.num_levels) {
        throw ValidationError("net: level_channels must list one channel count per level");
    }
    for (std::size_t c : cfg.level_channels) {
        if (c < 1) throw ValidationError("net: level channel counts must be >= 1");
    }
}

inline NetConfig net_config_for(const ImagePair& pair, std::size_t embed_dim,
                                Aggregation aggregation = Aggregation::product) {
    NetConfig cfg;
    cfg.num_levels = pair.num_levels();
    cfg.embed_dim = embed_dim;
    for (const FeatureMap& m : pair.source.levels) cfg.level_channels.push_back(m.channels);
    cfg.global_dim = pair.source.global_descriptor.size();
    cfg.aggregation = aggregation;
    validate_net_config(cfg);
    return cfg;
}

struct ParamBlock {
    std::string name;
    std::size_t offset = 0;
    std::size_t size = 0;
    std::size_t fan_in = 0;
    bool bias = false;
};

struct ParamLayout {
    std::vector<std::size_t> conv_w;
    std::vector<std::size_t> conv_b;
    std::size_t adapter_w = 0, adapter_b = 0;
    std::size_t lstm_w[2] = {0, 0};
    std::size_t lstm_u[2] = {0, 0};
    std::size_t lstm_b[2] = {0, 0};
    std::size_t value_w = 0, value_b = 0;
    std::size_t adv_w = 0, adv_b = 0;
    std::size_t total = 0;
    std::vector<ParamBlock> blocks;
};

inline ParamLayout make_layout(const NetConfig& cfg) {
    validate_net_config(cfg);
    ParamLayout L;
    const std::size_t d = cfg.embed_dim, a = cfg.action_count();
    auto add = [&](std::string name, std::size_t size, std::size_t fan_in, bool bias) {
        const std::size_t off = L.total;
        L.blocks.push_back({std::move(name), off, size, fan_in, bias});
        L.total += size;
        return off;
    };
    for (std::size_t i = 0; i < cfg.num_levels; ++i) {
        const std::size_t c = cfg.level_channels[i];
        L.conv_w.push_back(add("conv_w" + std::to_string(i), d * c * 9, c * 9, false));
        L.conv_b.push_back(add("conv_b" + std::to_string(i), d, c * 9, true));
    }
    const std::size_t gin = std::max<std::size_t>(1, 2 * cfg.global_dim);
    L.adapter_w = add("adapter_w", 2 * d * 2 * cfg.global_dim, gin, false);
    L.adapter_b = add("adapter_b", 2 * d, gin, true);
    for (int dir = 0; dir < 2; ++dir) {
        const std::string tag = dir == 0 ? "fwd" : "bwd";
        L.lstm_w[dir] = add("lstm_w_" + tag, 4 * d * 2 * d, 2 * d, false);
        L.lstm_u[dir] = add("lstm_u_" + tag, 4 * d * d, d, false);
        L.lstm_b[dir] = add("lstm_b_" + tag, 4 * d, 2 * d, true);
    }
    L.value_w = add("value_w", 2 * d, 2 * d, false);
    L.value_b = add("value_b", 1, 2 * d, true);
    L.adv_w = add("adv_w", a * 2 * d, 2 * d, false);
    L.adv_b = add("adv_b", a, 2 * d, true);
    return L;
}

inline std::size_t parameter_count(const NetConfig& cfg) { return make_layout(cfg).total; }

class QNetwork {
public:
    QNetwork() = default;
    explicit QNetwork(NetConfig cfg) : cfg_(std::move(cfg)), layout_(make_layout(cfg_)), params_(layout_.total, 0.0) {}

    const NetConfig& config() const { return cfg_; }
    const ParamLayout& layout() const { return layout_; }
    std::vector<double>& params() { return params_; }
    const std::vector<double>& params() const { return params_; }
    std::size_t size() const { return params_.size(); }

    const double* at(std::size_t offset) const { return params_.data() + offset; }

private:
    NetConfig cfg_;
    ParamLayout layout_;
    std::vector<double> params_;
};

// Weights uniform in +-1/sqrt(fan_in), biases zero.
inline QNetwork init(const NetConfig& cfg, std::uint64_t seed) {
    QNetwork net(cfg);
    std::mt19937_64 rng(seed);
    for (const ParamBlock& b : net.layout().blocks) {
        if (b.bias) continue;
        const double bound = 1.0 / std::sqrt(static_cast<double>(b.fan_in));
        std::uniform_real_distribution<double> u(-bound, bound);
        for (std::size_t k = 0; k < b.size; ++k) net.params()[b.offset + k] = u(rng);
    }
    return net;
}

// Q(s,a) = V(s) + A(s,a) - mean_a' A(s,a').
inline std::vector<double> dueling_combine(double value, std::span<const double> advantages) {
    double mean = 0.0;
    for (double a : advantages) mean += a;
    mean /= static_cast<double>(advantages.size());
    std::vector<double> q(advantages.size());
    for (std::size_t k = 0; k < q.size(); ++k) q[k] = value + (advantages[k] - mean);
    return q;
}

struct QOutput {
    std::vector<double> q_values;  // masked actions hold -infinity
    std::vector<double> step_values;
    std::vector<std::vector<double>> step_advantages;
    std::vector<std::vector<double>> step_q;

    // Valid argmax; ties go to the smallest action index.
    std::size_t greedy_action() const {
        std::size_t best = 0;
        for (std::size_t a = 1; a < q_values.size(); ++a) {
            if (q_values[a] > q_values[best]) best = a;
        }
        return best;
    }
};

namespace detail {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Conv(3x3, replicate padding) -> ReLU -> global average pool, with what backward needs.
struct EncoderCache {
    std::vector<double> patches;  // positions x (c*9)
    std::vector<double> pre;      // d x positions
    std::size_t positions = 0;
    std::size_t patch_len = 0;
};

inline std::vector<double> encode_map(const QNetwork& net, std::size_t level, const FeatureMap& map,
                                      EncoderCache* cache) {
    const NetConfig& cfg = net.config();
    if (level >= cfg.num_levels) throw ValidationError("encode: level out of range");
    if (map.channels != cfg.level_channels[level]) {
        throw ShapeError("encode: level " + std::to_string(level) + " expects " +
                         std::to_string(cfg.level_channels[level]) + " channels, got " +
                         std::to_string(map.channels));
    }
    const std::size_t d = cfg.embed_dim, c = map.channels, h = map.height, w = map.width;
    const std::size_t positions = h * w, plen = c * 9;
    const double* W = net.at(net.layout().conv_w[level]);
    const double* b = net.at(net.layout().conv_b[level]);

    std::vector<double> patches(positions * plen);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            double* patch = &patches[(y * w + x) * plen];
            for (std::size_t ch = 0; ch < c; ++ch) {
                for (std::size_t ky = 0; ky < 3; ++ky) {
                    const std::size_t yy = std::clamp<long>(static_cast<long>(y + ky) - 1, 0, static_cast<long>(h) - 1);
                    for (std::size_t kx = 0; kx < 3; ++kx) {
                        const std::size_t xx =
                            std::clamp<long>(static_cast<long>(x + kx) - 1, 0, static_cast<long>(w) - 1);
                        patch[ch * 9 + ky * 3 + kx] = map.at(ch, yy, xx);
                    }
                }
            }
        }
    }
    std::vector<double> pre(d * positions);
    std::vector<double> pooled(d, 0.0);
    for (std::size_t k = 0; k < d; ++k) {
        const double* wk = W + k * plen;
        double acc = 0.0;
        for (std::size_t pos = 0; pos < positions; ++pos) {
            const double* patch = &patches[pos * plen];
            double z = b[k];
            for (std::size_t j = 0; j < plen; ++j) z += wk[j] * patch[j];
            pre[k * positions + pos] = z;
            acc += z > 0.0 ? z : 0.0;
        }
        pooled[k] = acc / static_cast<double>(positions);
    }
    if (cache) {
        cache->patches = std::move(patches);
        cache->pre = std::move(pre);
        cache->positions = positions;
        cache->patch_len = plen;
    }
    return pooled;
}

inline void encode_backward(const QNetwork& net, std::size_t level, const EncoderCache& cache,
                            std::span<const double> grad_pooled, std::vector<double>& grad) {
    const std::size_t d = net.config().embed_dim, positions = cache.positions, plen = cache.patch_len;
    double* gW = grad.data() + net.layout().conv_w[level];
    double* gb = grad.data() + net.layout().conv_b[level];
    const double inv = 1.0 / static_cast<double>(positions);
    for (std::size_t k = 0; k < d; ++k) {
        const double g = grad_pooled[k] * inv;
        if (g == 0.0) continue;
        double* gwk = gW + k * plen;
        for (std::size_t pos = 0; pos < positions; ++pos) {
            if (!(cache.pre[k * positions + pos] > 0.0)) continue;
            gb[k] += g;
            const double* patch = &cache.patches[pos * plen];
            for (std::size_t j = 0; j < plen; ++j) gwk[j] += g * patch[j];
        }
    }
}

struct LstmStep {
    std::vector<double> i, f, g, o, c, tc, h;
};

// Runs one LSTM direction over inputs visited in `order`; returns states in that order.
inline std::vector<LstmStep> lstm_run(const QNetwork& net, int dir, const std::vector<std::vector<double>>& xs,
                                      const std::vector<std::size_t>& order) {
    const std::size_t d = net.config().embed_dim, in = 2 * d;
    const double* W = net.at(net.layout().lstm_w[dir]);
    const double* U = net.at(net.layout().lstm_u[dir]);
    const double* b = net.at(net.layout().lstm_b[dir]);
    std::vector<LstmStep> out;
    std::vector<double> h_prev(d, 0.0), c_prev(d, 0.0), z(4 * d);
    for (std::size_t t : order) {
        const std::vector<double>& x = xs[t];
        for (std::size_t r = 0; r < 4 * d; ++r) {
            double acc = b[r];
            const double* wr = W + r * in;
            for (std::size_t j = 0; j < in; ++j) acc += wr[j] * x[j];
            const double* ur = U + r * d;
            for (std::size_t j = 0; j < d; ++j) acc += ur[j] * h_prev[j];
            z[r] = acc;
        }
        LstmStep s;
        s.i.resize(d);
        s.f.resize(d);
        s.g.resize(d);
        s.o.resize(d);
        s.c.resize(d);
        s.tc.resize(d);
        s.h.resize(d);
        for (std::size_t k = 0; k < d; ++k) {
            s.i[k] = sigmoid(z[k]);
            s.f[k] = sigmoid(z[d + k]);
            s.g[k] = std::tanh(z[2 * d + k]);
            s.o[k] = sigmoid(z[3 * d + k]);
            s.c[k] = s.f[k] * c_prev[k] + s.i[k] * s.g[k];
            s.tc[k] = std::tanh(s.c[k]);
            s.h[k] = s.o[k] * s.tc[k];
        }
        h_prev = s.h;
        c_prev = s.c;
        out.push_back(std::move(s));
    }
    return out;
}

// Backprop through time for one direction. dh[k] is the gradient arriving at
// the hidden state of the k-th visited step; dx accumulates into input grads.
inline void lstm_backward(const QNetwork& net, int dir, const std::vector<std::vector<double>>& xs,
                          const std::vector<std::size_t>& order, const std::vector<LstmStep>& steps,
                          const std::vector<std::vector<double>>& dh, std::vector<std::vector<double>>& dx,
                          std::vector<double>& grad) {
    const std::size_t d = net.config().embed_dim, in = 2 * d;
    const double* W = net.at(net.layout().lstm_w[dir]);
    const double* U = net.at(net.layout().lstm_u[dir]);
    double* gW = grad.data() + net.layout().lstm_w[dir];
    double* gU = grad.data() + net.layout().lstm_u[dir];
    double* gb = grad.data() + net.layout().lstm_b[dir];
    std::vector<double> dh_next(d, 0.0), dc_next(d, 0.0), dz(4 * d);
    const std::vector<double> zeros(d, 0.0);
    for (std::size_t k = steps.size(); k-- > 0;) {
        const LstmStep& s = steps[k];
        const std::vector<double>& c_prev = k > 0 ? steps[k - 1].c : zeros;
        const std::vector<double>& h_prev = k > 0 ? steps[k - 1].h : zeros;
        for (std::size_t j = 0; j < d; ++j) {
            const double dhj = dh[k][j] + dh_next[j];
            const double dc = dhj * s.o[j] * (1.0 - s.tc[j] * s.tc[j]) + dc_next[j];
            dz[j] = dc * s.g[j] * s.i[j] * (1.0 - s.i[j]);
            dz[d + j] = dc * c_prev[j] * s.f[j] * (1.0 - s.f[j]);
            dz[2 * d + j] = dc * s.i[j] * (1.0 - s.g[j] * s.g[j]);
            dz[3 * d + j] = dhj * s.tc[j] * s.o[j] * (1.0 - s.o[j]);
            dc_next[j] = dc * s.f[j];
        }
        const std::vector<double>& x = xs[order[k]];
        std::vector<double>& gx = dx[order[k]];
        std::fill(dh_next.begin(), dh_next.end(), 0.0);
        for (std::size_t r = 0; r < 4 * d; ++r) {
            const double g = dz[r];
            gb[r] += g;
            double* gwr = gW + r * in;
            const double* wr = W + r * in;
            for (std::size_t j = 0; j < in; ++j) {
                gwr[j] += g * x[j];
                gx[j] += g * wr[j];
            }
            double* gur = gU + r * d;
            const double* ur = U + r * d;
            for (std::size_t j = 0; j < d; ++j) {
                gur[j] += g * h_prev[j];
                dh_next[j] += g * ur[j];
            }
        }
    }
}

struct ForwardTape {
    std::vector<std::size_t> levels;  // ascending; empty for the global-descriptor step
    std::vector<double> global_input;
    std::vector<std::vector<double>> xs;  // per step, length 2d
    std::vector<EncoderCache> src_cache, tgt_cache;
    std::vector<std::size_t> fwd_order, bwd_order;
    std::vector<LstmStep> fwd, bwd;  // in visiting order
    std::vector<std::vector<double>> latents;
    std::vector<double> q_raw;  // aggregated, before masking
};

inline QOutput forward_impl(const QNetwork& net, const Observation& obs, ForwardTape* tape) {
    const NetConfig& cfg = net.config();
    const std::size_t d = cfg.embed_dim, A = cfg.action_count(), n = cfg.num_levels;
    if (!obs.pair) throw ValidationError("forward: observation has no image pair");
    if (!obs.mask.empty() && obs.mask.size() != A) throw ShapeError("forward: mask length must be N+1");
    if (obs.pair->num_levels() != n) throw ShapeError("forward: pair level count differs from the network");

    ForwardTape local;
    ForwardTape& t = tape ? *tape : local;
    t.levels = canonical_subset(obs.selected);
    if (t.levels.size() != obs.selected.size()) throw ValidationError("forward: duplicate levels in observation");
    for (std::size_t i : t.levels) {
        if (i >= n) throw ValidationError("forward: level index out of range");
    }

    if (t.levels.empty()) {
        t.global_input = initial_observation(*obs.pair);
        if (t.global_input.size() != 2 * cfg.global_dim) {
            throw ShapeError("forward: global descriptor length differs from the network's global_dim");
        }
        const double* W = net.at(net.layout().adapter_w);
        const double* b = net.at(net.layout().adapter_b);
        std::vector<double> x(2 * d);
        for (std::size_t r = 0; r < 2 * d; ++r) {
            double acc = b[r];
            for (std::size_t j = 0; j < t.global_input.size(); ++j) acc += W[r * t.global_input.size() + j] * t.global_input[j];
            x[r] = acc;
        }
        t.xs = {std::move(x)};
    } else {
        t.xs.clear();
        t.src_cache.assign(t.levels.size(), {});
        t.tgt_cache.assign(t.levels.size(), {});
        for (std::size_t k = 0; k < t.levels.size(); ++k) {
            const std::size_t i = t.levels[k];
            auto es = encode_map(net, i, obs.pair->source.levels[i], tape ? &t.src_cache[k] : nullptr);
            auto et = encode_map(net, i, obs.pair->target.levels[i], tape ? &t.tgt_cache[k] : nullptr);
            es.insert(es.end(), et.begin(), et.end());
            t.xs.push_back(std::move(es));
        }
    }

    const std::size_t T = t.xs.size();
    t.fwd_order.resize(T);
    t.bwd_order.resize(T);
    for (std::size_t k = 0; k < T; ++k) {
        t.fwd_order[k] = k;
        t.bwd_order[k] = T - 1 - k;
    }
    t.fwd = lstm_run(net, 0, t.xs, t.fwd_order);
    t.bwd = lstm_run(net, 1, t.xs, t.bwd_order);

    QOutput out;
    t.latents.assign(T, std::vector<double>(2 * d));
    const double* vw = net.at(net.layout().value_w);
    const double vb = *net.at(net.layout().value_b);
    const double* aw = net.at(net.layout().adv_w);
    const double* ab = net.at(net.layout().adv_b);
    t.q_raw.assign(A, cfg.aggregation == Aggregation::product ? 1.0 : 0.0);
    for (std::size_t k = 0; k < T; ++k) {
        std::vector<double>& l = t.latents[k];
        std::copy(t.fwd[k].h.begin(), t.fwd[k].h.end(), l.begin());
        std::copy(t.bwd[T - 1 - k].h.begin(), t.bwd[T - 1 - k].h.end(), l.begin() + static_cast<std::ptrdiff_t>(d));
        double v = vb;
        for (std::size_t j = 0; j < 2 * d; ++j) v += vw[j] * l[j];
        std::vector<double> adv(A);
        for (std::size_t a = 0; a < A; ++a) {
            double acc = ab[a];
            for (std::size_t j = 0; j < 2 * d; ++j) acc += aw[a * 2 * d + j] * l[j];
            adv[a] = acc;
        }
        std::vector<double> q = dueling_combine(v, adv);
        for (std::size_t a = 0; a < A; ++a) {
            if (cfg.aggregation == Aggregation::product) {
                t.q_raw[a] *= q[a];
            } else {
                t.q_raw[a] += q[a];
            }
        }
        out.step_values.push_back(v);
        out.step_advantages.push_back(std::move(adv));
        out.step_q.push_back(std::move(q));
    }
    if (cfg.aggregation == Aggregation::mean) {
        for (double& q : t.q_raw) q /= static_cast<double>(T);
    }
    out.q_values = t.q_raw;
    if (!obs.mask.empty()) {
        for (std::size_t a = 0; a < A; ++a) {
            if (!obs.mask[a]) out.q_values[a] = -std::numeric_limits<double>::infinity();
        }
    }
    return out;
}

}  // namespace detail

// Encoder E_i applied to one feature map: conv -> ReLU -> global average pool.
inline std::vector<double> encode(const QNetwork& net, std::size_t level, const FeatureMap& feature) {
    return detail::encode_map(net, level, feature, nullptr);
}

inline QOutput forward(const QNetwork& net, const Observation& obs) { return detail::forward_impl(net, obs, nullptr); }

// Gradient of <dq, q_values> with respect to every parameter. Entries of dq at
// masked actions are ignored.
inline std::vector<double> backward(const QNetwork& net, const Observation& obs, std::span<const double> dq) {
    const NetConfig& cfg = net.config();
    const std::size_t d = cfg.embed_dim, A = cfg.action_count();
    if (dq.size() != A) throw ShapeError("backward: loss gradient must have N+1 entries");
    std::vector<double> grad(net.size(), 0.0);

    detail::ForwardTape t;
    const QOutput out = detail::forward_impl(net, obs, &t);
    const std::size_t T = t.xs.size();

    std::vector<double> g(A, 0.0);
    for (std::size_t a = 0; a < A; ++a) {
        if (obs.mask.empty() || obs.mask[a]) g[a] = dq[a];
    }

    // Aggregation: dq/dQ_k[a] = prod_{j != k} Q_j[a] for the product form.
    std::vector<std::vector<double>> gQ(T, std::vector<double>(A, 0.0));
    for (std::size_t a = 0; a < A; ++a) {
        if (cfg.aggregation == Aggregation::product) {
            std::vector<double> prefix(T + 1, 1.0), suffix(T + 1, 1.0);
            for (std::size_t k = 0; k < T; ++k) prefix[k + 1] = prefix[k] * out.step_q[k][a];
            for (std::size_t k = T; k-- > 0;) suffix[k] = suffix[k + 1] * out.step_q[k][a];
            for (std::size_t k = 0; k < T; ++k) gQ[k][a] = g[a] * prefix[k] * suffix[k + 1];
        } else {
            const double scale = cfg.aggregation == Aggregation::mean ? 1.0 / static_cast<double>(T) : 1.0;
            for (std::size_t k = 0; k < T; ++k) gQ[k][a] = g[a] * scale;
        }
    }

    const double* vw = net.at(net.layout().value_w);
    const double* aw = net.at(net.layout().adv_w);
    double* gvw = grad.data() + net.layout().value_w;
    double& gvb = grad[net.layout().value_b];
    double* gaw = grad.data() + net.layout().adv_w;
    double* gab = grad.data() + net.layout().adv_b;

    std::vector<std::vector<double>> dh_fwd(T, std::vector<double>(d, 0.0)), dh_bwd(T, std::vector<double>(d, 0.0));
    for (std::size_t k = 0; k < T; ++k) {
        double gv = 0.0;
        for (double x : gQ[k]) gv += x;
        const double mean = gv / static_cast<double>(A);
        const std::vector<double>& l = t.latents[k];
        std::vector<double> gl(2 * d, 0.0);
        gvb += gv;
        for (std::size_t j = 0; j < 2 * d; ++j) {
            gvw[j] += gv * l[j];
            gl[j] += gv * vw[j];
        }
        for (std::size_t a = 0; a < A; ++a) {
            const double ga = gQ[k][a] - mean;
            gab[a] += ga;
            for (std::size_t j = 0; j < 2 * d; ++j) {
                gaw[a * 2 * d + j] += ga * l[j];
                gl[j] += ga * aw[a * 2 * d + j];
            }
        }
        std::copy(gl.begin(), gl.begin() + static_cast<std::ptrdiff_t>(d), dh_fwd[k].begin());
        std::copy(gl.begin() + static_cast<std::ptrdiff_t>(d), gl.end(), dh_bwd[T - 1 - k].begin());
    }

    std::vector<std::vector<double>> dx(T, std::vector<double>(2 * d, 0.0));
    detail::lstm_backward(net, 0, t.xs, t.fwd_order, t.fwd, dh_fwd, dx, grad);
    detail::lstm_backward(net, 1, t.xs, t.bwd_order, t.bwd, dh_bwd, dx, grad);

    if (t.levels.empty()) {
        const std::size_t gin = t.global_input.size();
        double* gW = grad.data() + net.layout().adapter_w;
        double* gb = grad.data() + net.layout().adapter_b;
        for (std::size_t r = 0; r < 2 * d; ++r) {
            gb[r] += dx[0][r];
            for (std::size_t j = 0; j < gin; ++j) gW[r * gin + j] += dx[0][r] * t.global_input[j];
        }
    } else {
        for (std::size_t k = 0; k < T; ++k) {
            const std::span<const double> gx(dx[k]);
            detail::encode_backward(net, t.levels[k], t.src_cache[k], gx.subspan(0, d), grad);
            detail::encode_backward(net, t.levels[k], t.tgt_cache[k], gx.subspan(d, d), grad);
        }
    }
    return grad;
}

// target := (1 - rho) * target + rho * eval
inline void soft_update(QNetwork& target, const QNetwork& eval, double rho) {
    if (!(target.config() == eval.config()) || target.size() != eval.size()) {
        throw ShapeError("soft_update: networks have different configurations");
    }
    if (!(rho > 0.0 && rho <= 1.0)) throw ValidationError("soft_update: rho must be in (0, 1]");
    auto& t = target.params();
    const auto& e = eval.params();
    if (rho == 1.0) {
        t = e;
        return;
    }
    for (std::size_t k = 0; k < t.size(); ++k) t[k] = (1.0 - rho) * t[k] + rho * e[k];
}

// ---------------------------------------------------------------------------
// Checkpoints: "QNET" | u32 version | u32 N | u32 d | u32 d_g | u32 aggregation |
// u32[N] level channels | u32 parameter count | f32[count] parameters (canonical order)

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::vector<char> encode_checkpoint(const QNetwork& net) {
    const NetConfig& cfg = net.config();
    detail::ByteWriter w;
    w.bytes("QNET", 4);
    w.u32(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(cfg.num_levels));
    w.u32(static_cast<std::uint32_t>(cfg.embed_dim));
    w.u32(static_cast<std::uint32_t>(cfg.global_dim));
    w.u32(static_cast<std::uint32_t>(cfg.aggregation));
    for (std::size_t c : cfg.level_channels) w.u32(static_cast<std::uint32_t>(c));
    w.u32(static_cast<std::uint32_t>(net.size()));
    for (double p : net.params()) w.f32(static_cast<float>(p));
    return w.buffer();
}

inline QNetwork decode_checkpoint(std::span<const char> bytes) {
    if (bytes.size() < 4 || std::string(bytes.data(), 4) != "QNET") throw FormatError("not a QNET checkpoint");
    detail::ByteReader r(bytes);
    r.take(4, "magic");
    if (r.u32("version") != kCheckpointVersion) throw FormatError("unsupported QNET version");
    NetConfig cfg;
    cfg.num_levels = r.u32("num_levels");
    cfg.embed_dim = r.u32("embed_dim");
    cfg.global_dim = r.u32("global_dim");
    const std::uint32_t agg = r.u32("aggregation");
    if (agg > 2) throw FormatError("unknown aggregation code " + std::to_string(agg));
    cfg.aggregation = static_cast<Aggregation>(agg);
    for (std::size_t i = 0; i < cfg.num_levels; ++i) cfg.level_channels.push_back(r.u32("level channels"));
    QNetwork net(cfg);
    const std::uint32_t count = r.u32("parameter count");
    if (count != net.size()) {
        throw FormatError("checkpoint holds " + std::to_string(count) + " parameters, config implies " +
                          std::to_string(net.size()));
    }
    r.need(std::size_t{count} * 4, "parameters");
    for (double& p : net.params()) p = r.f32("parameters");
    if (r.remaining() != 0) throw FormatError("QNET checkpoint has trailing bytes");
    return net;
}

inline nlohmann::json net_config_to_json(const NetConfig& cfg) {
    static const char* names[] = {"product", "sum", "mean"};
    return {{"num_levels", cfg.num_levels},
            {"embed_dim", cfg.embed_dim},
            {"level_channels", cfg.level_channels},
            {"global_dim", cfg.global_dim},
            {"aggregation", names[static_cast<std::uint32_t>(cfg.aggregation)]}};
}

// Writes <path> and the JSON sidecar <path>.json.
inline void save_checkpoint(const QNetwork& net, const std::filesystem::path& path, const nlohmann::json& metadata = {}) {
    detail::write_file(path, encode_checkpoint(net));
    nlohmann::json side = {{"config", net_config_to_json(net.config())}, {"parameter_count", net.size()}};
    if (!metadata.is_null()) side["training"] = metadata;
    auto sidecar = path;
    sidecar += ".json";
    detail::write_text(sidecar, side.dump(2) + "\n");
}

inline QNetwork load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(detail::read_file(path)); }

}  // namespace scalesel
