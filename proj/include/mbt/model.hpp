#pragma once

// The super-resolution network: pyramid-pooling self-attention (PPSA),
// channel attention (CAB), the scale-aware layer (SPAL), the context-aware
// block (CPTB), the reconstruction head, and the backprojection-based
// reconstruction module (PRM), plus parameter bookkeeping.

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mbt/common.hpp"
#include "mbt/ops.hpp"
#include "mbt/rng.hpp"
#include "mbt/tensor.hpp"

namespace mbt {

struct ModelConfig {
    int scale = 4;
    int channels = 96;   // C
    int n_cptb = 3;
    int n_spal = 6;      // SPALs per CPTB
    int heads = 4;
    int c1 = 96;         // SPAL internal width
    int c2 = 64;         // CPTB internal width
    std::vector<int> pool_ratios = {2, 4, 8};
    int ffn_ratio = 2;
    int cab_squeeze = 3;
    int prm_hidden = 16;

    int max_pool_ratio() const { return pool_ratios.empty() ? 1 : pool_ratios.back(); }

    void validate() const {
        if (scale < 2 || scale > 4) throw ValueError("config: scale must be 2, 3 or 4");
        if (channels < 1 || n_cptb < 1 || n_spal < 1 || heads < 1 || ffn_ratio < 1 || prm_hidden < 1 ||
            cab_squeeze < 1)
            throw ValueError("config: sizes must be positive");
        if (c1 % 2 != 0) throw ValueError("config: c1 must be even");
        if (c2 % 2 != 0) throw ValueError("config: c2 must be even");
        if (channels % heads != 0) throw ValueError("config: channels must be divisible by heads");
        if ((c1 / 2) % heads != 0) throw ValueError("config: c1/2 must be divisible by heads");
        if (pool_ratios.empty()) throw ValueError("config: pool_ratios must be non-empty");
        int prev = 0;
        for (int r : pool_ratios) {
            if (r < 2 || (r & (r - 1)) != 0) throw ValueError("config: pool ratios must be powers of two >= 2");
            if (r <= prev) throw ValueError("config: pool ratios must be strictly increasing");
            prev = r;
        }
    }
};

/// Named, ordered collection of learnable tensors. Entries share storage with
/// the layers that registered them, so updating through the tree updates the
/// model.
template <typename T>
class ParamTree {
public:
    Tensor<T>& add(const std::string& name, Tensor<T> t) {
        if (index_.count(name)) throw ValueError("param tree: duplicate name " + name);
        index_[name] = items_.size();
        items_.emplace_back(name, std::move(t));
        return items_.back().second;
    }

    Tensor<T>* find(const std::string& name) {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &items_[it->second].second;
    }
    const Tensor<T>* find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &items_[it->second].second;
    }

    std::vector<std::pair<std::string, Tensor<T>>>& items() { return items_; }
    const std::vector<std::pair<std::string, Tensor<T>>>& items() const { return items_; }
    size_t size() const { return items_.size(); }

    i64 total_params() const {
        i64 n = 0;
        for (const auto& [name, t] : items_) n += t.numel();
        return n;
    }

    void zero_grads() {
        for (auto& [name, t] : items_) t.zero_grad();
    }

    void set_all_zero() {
        for (auto& [name, t] : items_) std::fill(t.buffer().begin(), t.buffer().end(), T(0));
    }

    /// Deep copy with fresh storage (used for the EMA shadow).
    ParamTree clone() const {
        ParamTree out;
        for (const auto& [name, t] : items_) out.add(name, t.clone());
        return out;
    }

    /// Copies values from a tree with the identical name set.
    void copy_values_from(const ParamTree& src) {
        if (src.size() != size()) throw ValueError("param tree: name sets differ in size");
        for (size_t i = 0; i < items_.size(); ++i) {
            const auto& [sname, st] = src.items_[i];
            auto& [dname, dt] = items_[i];
            if (sname != dname) throw ValueError("param tree: name mismatch " + sname + " vs " + dname);
            if (st.numel() != dt.numel()) throw ValueError("param tree: shape mismatch for " + sname);
            dt.buffer() = st.buffer();
        }
    }

private:
    std::vector<std::pair<std::string, Tensor<T>>> items_;
    std::map<std::string, size_t> index_;
};

/// Per-module parameter subtotals keyed by the leading name segment
/// ("head", "cptb.0", ..., "rec", "prm").
template <typename T>
std::vector<std::pair<std::string, i64>> param_count_by_module(const ParamTree<T>& tree) {
    std::vector<std::pair<std::string, i64>> out;
    for (const auto& [name, t] : tree.items()) {
        std::string key = name.substr(0, name.find('.'));
        if (key == "cptb") {
            const size_t second = name.find('.', 5);
            key = name.substr(0, second);
        }
        if (out.empty() || out.back().first != key)
            out.emplace_back(key, 0);
        out.back().second += t.numel();
    }
    return out;
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
Tensor<T> init_weight(std::vector<i64> shape, Rng* rng) {
    Tensor<T> t(std::move(shape), true);
    if (rng) {
        T* p = t.data();
        for (i64 i = 0; i < t.numel(); ++i) p[i] = static_cast<T>(rng->truncated_normal(0.02));
    }
    return t;
}

}  // namespace detail

template <typename T>
struct Conv2dLayer {
    Tensor<T> w, b;
    i64 pad = 0;

    Conv2dLayer() = default;
    Conv2dLayer(ParamTree<T>& tree, const std::string& prefix, i64 cin, i64 cout, i64 k, Rng* rng) : pad((k - 1) / 2) {
        w = tree.add(prefix + ".weight", detail::init_weight<T>({cout, cin, k, k}, rng));
        b = tree.add(prefix + ".bias", Tensor<T>({cout}, true));
    }

    Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, w, b, 1, PadMode::Zero, pad); }
};

template <typename T>
struct LinearLayer {
    Tensor<T> w, b;

    LinearLayer() = default;
    LinearLayer(ParamTree<T>& tree, const std::string& prefix, i64 in, i64 out, Rng* rng) {
        w = tree.add(prefix + ".weight", detail::init_weight<T>({out, in}, rng));
        b = tree.add(prefix + ".bias", Tensor<T>({out}, true));
    }

    Tensor<T> forward(const Tensor<T>& x) const { return linear(x, w, b); }
};

template <typename T>
struct LayerNormLayer {
    Tensor<T> scale, shift;

    LayerNormLayer() = default;
    LayerNormLayer(ParamTree<T>& tree, const std::string& prefix, i64 c, bool unit_scale) {
        scale = tree.add(prefix + ".scale", unit_scale ? Tensor<T>::full({c}, T(1), true) : Tensor<T>({c}, true));
        shift = tree.add(prefix + ".shift", Tensor<T>({c}, true));
    }

    Tensor<T> forward(const Tensor<T>& x) const { return layer_norm(x, scale, shift); }
};

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

template <typename T>
struct PpsaProbe {
    i64 kv_tokens = 0;
    Tensor<T> attn_probs;  // [N, heads, H*W, kv_tokens]
};

/// Pyramid pooling self-attention: keys/values come from summed avg+max
/// pooled maps at each ratio; queries from the full-resolution tokens.
template <typename T>
struct Ppsa {
    LinearLayer<T> q_proj, k_proj, v_proj;
    Conv2dLayer<T> out_proj;
    i64 heads = 1;
    std::vector<int> ratios;

    Ppsa() = default;
    Ppsa(ParamTree<T>& tree, const std::string& prefix, i64 c, i64 heads_, std::vector<int> ratios_, Rng* rng)
        : q_proj(tree, prefix + ".q_proj", c, c, rng),
          k_proj(tree, prefix + ".k_proj", c, c, rng),
          v_proj(tree, prefix + ".v_proj", c, c, rng),
          out_proj(tree, prefix + ".out_proj", c, c, 1, rng),
          heads(heads_),
          ratios(std::move(ratios_)) {
        if (c % heads != 0) throw ValueError("ppsa: channels not divisible by heads");
    }

    Tensor<T> forward(const Tensor<T>& x, PpsaProbe<T>* probe = nullptr) const {
        const i64 n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
        const i64 d = c / heads;

        std::vector<Tensor<T>> pooled_tokens;
        pooled_tokens.reserve(ratios.size());
        for (int s : ratios) {
            Tensor<T> p = add(pool2d(x, PoolMode::Avg, s), pool2d(x, PoolMode::Max, s));
            pooled_tokens.push_back(permute(reshape(p, {n, c, (h / s) * (w / s)}), {0, 2, 1}));
        }
        Tensor<T> p_tokens = concat(pooled_tokens, 1);  // [N, Lkv, c]
        Tensor<T> q_tokens = permute(reshape(x, {n, c, h * w}), {0, 2, 1});

        auto to_heads = [&](const Tensor<T>& t) {
            return permute(reshape(t, {n, t.dim(1), heads, d}), {0, 2, 1, 3});
        };
        Tensor<T> q = to_heads(q_proj.forward(q_tokens));
        Tensor<T> k = to_heads(k_proj.forward(p_tokens));
        Tensor<T> v = to_heads(v_proj.forward(p_tokens));

        Tensor<T>* probs = probe ? &probe->attn_probs : nullptr;
        Tensor<T> att = attention(q, k, v, probs);
        if (probe) probe->kv_tokens = p_tokens.dim(1);

        Tensor<T> merged = reshape(permute(att, {0, 2, 1, 3}), {n, h * w, c});
        Tensor<T> spatial = reshape(permute(merged, {0, 2, 1}), {n, c, h, w});
        return out_proj.forward(spatial);
    }
};

/// Channel attention block: two 3x3 convolutions with a GELU between them,
/// gated by a squeeze-style sigmoid over globally pooled statistics.
template <typename T>
struct Cab {
    Conv2dLayer<T> conv1, conv2, ca1, ca2;

    Cab() = default;
    Cab(ParamTree<T>& tree, const std::string& prefix, i64 c, i64 squeeze, Rng* rng) {
        if (c < squeeze) throw ValueError("cab: channels " + std::to_string(c) + " below squeeze " + std::to_string(squeeze));
        const i64 mid = c / squeeze;
        conv1 = Conv2dLayer<T>(tree, prefix + ".conv1", c, mid, 3, rng);
        conv2 = Conv2dLayer<T>(tree, prefix + ".conv2", mid, c, 3, rng);
        ca1 = Conv2dLayer<T>(tree, prefix + ".ca1", c, mid, 1, rng);
        ca2 = Conv2dLayer<T>(tree, prefix + ".ca2", mid, c, 1, rng);
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        Tensor<T> f = conv2.forward(gelu(conv1.forward(x)));
        Tensor<T> gate = sigmoid(ca2.forward(gelu(ca1.forward(global_avg_pool(f)))));
        return mul_channel_gate(f, gate);
    }
};

template <typename T>
struct SpalTrace {
    Tensor<T> f_ln, f_u, f_c, f_p, f_p_bar, f_c_bar, f_e, f_bar, f_hat, h;
};

/// Scale-aware backprojection layer: a PPSA branch corrected by the
/// difference against a parallel CAB branch, plus a per-position FFN.
template <typename T>
struct Spal {
    LayerNormLayer<T> ln1;
    Conv2dLayer<T> up_proj;
    Ppsa<T> ppsa;
    Cab<T> cab;
    Conv2dLayer<T> err_proj, main_proj;
    LayerNormLayer<T> ln2;
    LinearLayer<T> fc1, fc2;
    i64 half = 0;

    Spal() = default;
    Spal(ParamTree<T>& tree, const std::string& prefix, i64 c_in, const ModelConfig& cfg, Rng* rng)
        : ln1(tree, prefix + ".ln1", c_in, rng != nullptr),
          up_proj(tree, prefix + ".up_proj", c_in, cfg.c1, 1, rng),
          ppsa(tree, prefix + ".ppsa", cfg.c1 / 2, cfg.heads, cfg.pool_ratios, rng),
          cab(tree, prefix + ".cab", cfg.c1 / 2, cfg.cab_squeeze, rng),
          err_proj(tree, prefix + ".err_proj", cfg.c1 / 2, c_in, 1, rng),
          main_proj(tree, prefix + ".main_proj", cfg.c1 / 2, c_in, 1, rng),
          ln2(tree, prefix + ".ln2", c_in, rng != nullptr),
          fc1(tree, prefix + ".ffn.fc1", c_in, c_in * cfg.ffn_ratio, rng),
          fc2(tree, prefix + ".ffn.fc2", c_in * cfg.ffn_ratio, c_in, rng),
          half(cfg.c1 / 2) {}

    Tensor<T> forward(const Tensor<T>& f, SpalTrace<T>* trace = nullptr) const {
        const i64 n = f.dim(0), c = f.dim(1), h = f.dim(2), w = f.dim(3);
        Tensor<T> f_ln = ln1.forward(f);
        Tensor<T> f_u = up_proj.forward(f_ln);
        auto halves = split(f_u, 1, {half, half});
        Tensor<T> f_c = halves[0], f_p = halves[1];
        Tensor<T> f_p_bar = ppsa.forward(f_p);
        Tensor<T> f_c_bar = cab.forward(f_c);
        Tensor<T> f_e = err_proj.forward(sub(f_c_bar, f_p_bar));
        Tensor<T> f_bar = add(main_proj.forward(f_p_bar), f_e);
        Tensor<T> f_hat = add(f_bar, f);

        Tensor<T> tokens = permute(reshape(ln2.forward(f_hat), {n, c, h * w}), {0, 2, 1});
        Tensor<T> ffn = fc2.forward(gelu(fc1.forward(tokens)));
        Tensor<T> out = add(reshape(permute(ffn, {0, 2, 1}), {n, c, h, w}), f_hat);

        if (trace) *trace = SpalTrace<T>{f_ln, f_u, f_c, f_p, f_p_bar, f_c_bar, f_e, f_bar, f_hat, out};
        return out;
    }
};

template <typename T>
struct CptbTrace {
    Tensor<T> h_init, h_p, h_c, h_p_bar, h_c_bar, h_e, h_bar, h_out;
};

/// Context-aware block: a cascade of SPALs corrected against a block-level
/// CAB branch through the same backprojection pattern.
template <typename T>
struct Cptb {
    Conv2dLayer<T> init_proj, agg, err_lift, main_lift;
    std::vector<Spal<T>> spals;
    Cab<T> cab;
    i64 half = 0;

    Cptb() = default;
    Cptb(ParamTree<T>& tree, const std::string& prefix, const ModelConfig& cfg, Rng* rng) : half(cfg.c2 / 2) {
        init_proj = Conv2dLayer<T>(tree, prefix + ".init_proj", cfg.channels, cfg.c2, 1, rng);
        spals.reserve(static_cast<size_t>(cfg.n_spal));
        for (int j = 0; j < cfg.n_spal; ++j)
            spals.emplace_back(tree, prefix + ".spal." + std::to_string(j), half, cfg, rng);
        agg = Conv2dLayer<T>(tree, prefix + ".agg", half, half, 3, rng);
        cab = Cab<T>(tree, prefix + ".cab", half, cfg.cab_squeeze, rng);
        err_lift = Conv2dLayer<T>(tree, prefix + ".err_lift", half, cfg.channels, 1, rng);
        main_lift = Conv2dLayer<T>(tree, prefix + ".main_lift", half, cfg.channels, 1, rng);
    }

    Tensor<T> forward(const Tensor<T>& h_prev, CptbTrace<T>* trace = nullptr,
                      std::vector<SpalTrace<T>>* spal_traces = nullptr) const {
        Tensor<T> h_init = init_proj.forward(h_prev);
        auto halves = split(h_init, 1, {half, half});
        Tensor<T> h_p = halves[0], h_c = halves[1];
        Tensor<T> x = h_p;
        for (size_t j = 0; j < spals.size(); ++j) {
            SpalTrace<T>* st = nullptr;
            if (spal_traces) {
                spal_traces->emplace_back();
                st = &spal_traces->back();
            }
            x = spals[j].forward(x, st);
        }
        Tensor<T> h_p_bar = agg.forward(x);
        Tensor<T> h_c_bar = cab.forward(h_c);
        Tensor<T> h_e = sub(h_p_bar, h_c_bar);
        Tensor<T> h_bar = add(err_lift.forward(h_e), main_lift.forward(h_p_bar));
        Tensor<T> h_out = add(h_bar, h_prev);
        if (trace) *trace = CptbTrace<T>{h_init, h_p, h_c, h_p_bar, h_c_bar, h_e, h_bar, h_out};
        return h_out;
    }
};

template <typename T>
struct PrmTrace {
    Tensor<T> i_lr_est, diff, f_lr_hat, i_sr;
};

template <typename T>
struct MbtTrace {
    std::vector<CptbTrace<T>> cptb;
    std::vector<std::vector<SpalTrace<T>>> spal;
    PrmTrace<T> prm;
    Tensor<T> i_sr_initial;
};

/// The assembled network.
template <typename T>
struct MbtModel {
    ModelConfig cfg;
    ParamTree<T> params;
    Conv2dLayer<T> head, tail, rec_pre, rec_post, prm1, prm2;
    std::vector<Cptb<T>> cptbs;

    /// Builds the model with truncated-normal(0.02) weights and zero biases;
    /// the final reconstruction conv and both PRM convs start at zero so a
    /// fresh model reproduces plain bilinear upsampling plus nothing.
    static MbtModel build(const ModelConfig& cfg, u64 seed) {
        Rng rng(Rng::derive(seed, 0));
        return MbtModel(cfg, &rng);
    }

    /// All parameters zero (including LN scales); used by identity tests.
    static MbtModel build_zero(const ModelConfig& cfg) { return MbtModel(cfg, nullptr); }

    /// Initial super-resolved estimate: bilinear skip plus the learned
    /// reconstruction of the deep features.
    Tensor<T> reconstruct(const Tensor<T>& i_lr, MbtTrace<T>* trace = nullptr) const {
        const i64 h = i_lr.dim(2), w = i_lr.dim(3);
        if (i_lr.dim(1) != 3) throw ShapeError("mbt: input must have 3 channels");
        const int ratio = cfg.max_pool_ratio();
        if (h % ratio != 0 || w % ratio != 0)
            throw ShapeError("mbt: input dims " + shape_str(i_lr.shape()) + " not divisible by " +
                             std::to_string(ratio) + " (pad first)");
        Tensor<T> f0 = head.forward(i_lr);
        Tensor<T> x = f0;
        for (const auto& block : cptbs) {
            CptbTrace<T>* ct = nullptr;
            std::vector<SpalTrace<T>>* st = nullptr;
            if (trace) {
                trace->cptb.emplace_back();
                trace->spal.emplace_back();
                ct = &trace->cptb.back();
                st = &trace->spal.back();
            }
            x = block.forward(x, ct, st);
        }
        Tensor<T> hn = tail.forward(x);
        Tensor<T> rec = rec_post.forward(pixel_shuffle(rec_pre.forward(add(hn, f0)), cfg.scale));
        Tensor<T> base = resample_bilinear(i_lr, h * cfg.scale, w * cfg.scale);
        Tensor<T> i_sr_initial = add(base, rec);
        if (trace) trace->i_sr_initial = i_sr_initial;
        return i_sr_initial;
    }

    /// Backprojection correction of the SR estimate against the LR input.
    Tensor<T> prm_forward(const Tensor<T>& i_sr_est, const Tensor<T>& i_lr, PrmTrace<T>* trace = nullptr) const {
        const i64 h = i_lr.dim(2), w = i_lr.dim(3);
        if (i_sr_est.dim(2) != h * cfg.scale || i_sr_est.dim(3) != w * cfg.scale)
            throw ShapeError("prm: SR estimate " + shape_str(i_sr_est.shape()) + " is not scale x LR " +
                             shape_str(i_lr.shape()));
        Tensor<T> i_lr_est = resample_bilinear(i_sr_est, h, w);
        Tensor<T> diff = sub(i_lr_est, i_lr);
        Tensor<T> f_lr_hat = prm2.forward(gelu(prm1.forward(diff)));
        Tensor<T> i_sr = add(resample_bilinear(f_lr_hat, h * cfg.scale, w * cfg.scale), i_sr_est);
        if (trace) *trace = PrmTrace<T>{i_lr_est, diff, f_lr_hat, i_sr};
        return i_sr;
    }

    Tensor<T> forward(const Tensor<T>& i_lr, MbtTrace<T>* trace = nullptr) const {
        Tensor<T> i_sr_initial = reconstruct(i_lr, trace);
        return prm_forward(i_sr_initial, i_lr, trace ? &trace->prm : nullptr);
    }

private:
    MbtModel(const ModelConfig& cfg_, Rng* rng) : cfg(cfg_) {
        cfg.validate();
        head = Conv2dLayer<T>(params, "head", 3, cfg.channels, 3, rng);
        cptbs.reserve(static_cast<size_t>(cfg.n_cptb));
        for (int i = 0; i < cfg.n_cptb; ++i)
            cptbs.emplace_back(params, "cptb." + std::to_string(i), cfg, rng);
        tail = Conv2dLayer<T>(params, "tail", cfg.channels, cfg.channels, 3, rng);
        rec_pre = Conv2dLayer<T>(params, "rec.pre", cfg.channels, 3 * cfg.scale * cfg.scale, 3, rng);
        rec_post = Conv2dLayer<T>(params, "rec.post", 3, 3, 3, nullptr);
        prm1 = Conv2dLayer<T>(params, "prm.conv1", 3, cfg.prm_hidden, 1, nullptr);
        prm2 = Conv2dLayer<T>(params, "prm.conv2", cfg.prm_hidden, 3, 1, nullptr);
    }
};

/// Total learnable parameter count implied by a configuration.
inline i64 param_count(const ModelConfig& cfg) {
    return MbtModel<float>::build_zero(cfg).params.total_params();
}

}  // namespace mbt
