#pragma once

// Adam with bias correction, the EMA shadow, and the LR schedule.

#include <cmath>
#include <string>
#include <vector>

#include "mbt/common.hpp"
#include "mbt/model.hpp"

namespace mbt {

template <typename T>
struct AdamState {
    std::vector<Tensor<T>> m, v;  // aligned with the parameter tree order
    i64 t = 0;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;

    static AdamState init(const ParamTree<T>& params) {
        AdamState st;
        st.m.reserve(params.size());
        st.v.reserve(params.size());
        for (const auto& [name, p] : params.items()) {
            st.m.emplace_back(p.shape());
            st.v.emplace_back(p.shape());
        }
        return st;
    }
};

/// One Adam update: moments in, parameters moved in place. Every parameter
/// must carry a gradient (zero_grads + backward populate them).
template <typename T>
void adam_step(ParamTree<T>& params, AdamState<T>& state, double lr) {
    if (state.m.size() != params.size()) throw ValueError("adam: state does not match the parameter tree");
    state.t += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (size_t i = 0; i < params.size(); ++i) {
        auto& [name, p] = params.items()[i];
        if (!p.has_grad()) throw ValueError("adam: missing gradient for parameter " + name);
        const T* g = p.grad_buffer().data();
        T* pm = state.m[i].data();
        T* pv = state.v[i].data();
        T* px = p.data();
        const i64 n = p.numel();
        for (i64 j = 0; j < n; ++j) {
            const double gj = static_cast<double>(g[j]);
            const double mj = state.beta1 * static_cast<double>(pm[j]) + (1.0 - state.beta1) * gj;
            const double vj = state.beta2 * static_cast<double>(pv[j]) + (1.0 - state.beta2) * gj * gj;
            pm[j] = static_cast<T>(mj);
            pv[j] = static_cast<T>(vj);
            px[j] = static_cast<T>(static_cast<double>(px[j]) - lr * (mj / bc1) / (std::sqrt(vj / bc2) + state.eps));
        }
    }
}

template <typename T>
struct EmaState {
    ParamTree<T> shadow;
    double decay = 0.999;

    static EmaState init(const ParamTree<T>& params, double decay) {
        if (decay < 0.0 || decay >= 1.0) throw ValueError("ema: decay must lie in [0,1)");
        return EmaState{params.clone(), decay};
    }
};

/// shadow <- decay * shadow + (1 - decay) * live, element-wise.
template <typename T>
void ema_update(const ParamTree<T>& live, EmaState<T>& ema) {
    if (live.size() != ema.shadow.size()) throw ValueError("ema: name sets differ");
    for (size_t i = 0; i < live.size(); ++i) {
        const auto& [lname, lt] = live.items()[i];
        auto& [sname, st] = ema.shadow.items()[i];
        if (lname != sname) throw ValueError("ema: name mismatch " + lname + " vs " + sname);
        const T* pl = lt.data();
        T* ps = st.data();
        const i64 n = lt.numel();
        const T d = static_cast<T>(ema.decay);
        const T one_minus = static_cast<T>(1.0 - ema.decay);
        for (i64 j = 0; j < n; ++j) ps[j] = d * ps[j] + one_minus * pl[j];
    }
}

struct TrainConfig {
    int batch_size = 4;
    int epochs = 700;
    double lr = 2e-4;
    int lr_halve_epoch = 600;
    int patch_size = 64;
    u64 seed = 0;
    double ema_decay = 0.999;
    int checkpoint_every = 50;  // epochs between checkpoints; 0 = final only
    int steps_per_epoch = 0;    // 0 = ceil(images / batch)

    void validate() const {
        if (batch_size < 1) throw ValueError("train config: batch_size must be positive");
        if (epochs < 1) throw ValueError("train config: epochs must be positive");
        if (!(lr > 0)) throw ValueError("train config: lr must be > 0");
        if (lr_halve_epoch >= epochs) throw ValueError("train config: lr_halve_epoch must be below epochs");
        if (patch_size < 8 || patch_size % 8 != 0) throw ValueError("train config: patch_size must be divisible by 8");
        if (ema_decay < 0.0 || ema_decay >= 1.0) throw ValueError("train config: ema_decay must lie in [0,1)");
        if (checkpoint_every < 0 || steps_per_epoch < 0) throw ValueError("train config: negative cadence");
    }
};

/// Single halving: the initial rate until lr_halve_epoch, half afterwards.
inline double lr_at(int epoch, const TrainConfig& cfg) {
    if (epoch < 0 || epoch >= cfg.epochs) throw ValueError("lr_at: epoch out of range");
    return epoch < cfg.lr_halve_epoch ? cfg.lr : cfg.lr * 0.5;
}

}  // namespace mbt
