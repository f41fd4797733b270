#include "mbt/gradcheck.hpp"

#include <cmath>
#include <functional>
#include <memory>

#include "mbt/model.hpp"
#include "mbt/ops.hpp"
#include "mbt/rng.hpp"

namespace mbt {

namespace {

constexpr double kEps = 1e-5;

double rel_err(double a, double b) {
    const double denom = std::max({1.0, std::fabs(a), std::fabs(b)});
    return std::fabs(a - b) / denom;
}

Tensor<double> random_input(std::vector<i64> shape, Rng& rng, double scale = 1.0) {
    Tensor<double> t(std::move(shape));
    for (i64 i = 0; i < t.numel(); ++i) t.data()[i] = (rng.uniform() * 2.0 - 1.0) * scale;
    return t;
}

// Gives every tensor a non-trivial value so no rule is checked at a dead
// point; LN scales stay near one.
void randomize(ParamTree<double>& tree, Rng& rng) {
    for (auto& [name, t] : tree.items()) {
        const bool is_scale = name.size() >= 6 && name.compare(name.size() - 6, 6, ".scale") == 0;
        for (i64 i = 0; i < t.numel(); ++i) t.data()[i] = rng.truncated_normal(0.05) + (is_scale ? 1.0 : 0.0);
    }
}

/// Compares analytic gradients of `make_loss` (a pure function of the
/// current tensor values) against central differences for every tensor in
/// `tree` and every named input.
GradCheckResult run_check(const std::string& block, ParamTree<double>& tree,
                          std::vector<std::pair<std::string, Tensor<double>>> inputs,
                          const std::function<Tensor<double>()>& make_loss, double tolerance) {
    GradCheckResult result;
    result.block = block;
    result.tolerance = tolerance;

    for (auto& [name, t] : tree.items()) {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    for (auto& [name, t] : inputs) {
        t.set_requires_grad(true);
        t.zero_grad();
    }

    {
        Tape<double> tape;
        TapeScope<double> scope(tape);
        Tensor<double> loss = make_loss();
        tape.backward(loss);
    }

    auto loss_value = [&make_loss]() { return make_loss().item(); };

    auto check_tensor = [&](const std::string& name, Tensor<double>& t) {
        const std::vector<double> analytic =
            t.has_grad() ? t.grad_buffer() : std::vector<double>(static_cast<size_t>(t.numel()), 0.0);
        double worst = 0.0;
        for (i64 i = 0; i < t.numel(); ++i) {
            const double saved = t.data()[i];
            t.data()[i] = saved + kEps;
            const double fp = loss_value();
            t.data()[i] = saved - kEps;
            const double fm = loss_value();
            t.data()[i] = saved;
            worst = std::max(worst, rel_err(analytic[static_cast<size_t>(i)], (fp - fm) / (2.0 * kEps)));
        }
        result.group_errors.emplace_back(name, worst);
        result.worst = std::max(result.worst, worst);
    };

    for (auto& [name, t] : tree.items()) check_tensor(name, t);
    for (auto& [name, t] : inputs) check_tensor("input:" + name, t);
    result.pass = result.worst < tolerance;
    return result;
}

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.scale = 2;
    cfg.channels = 32;
    cfg.n_cptb = 1;
    cfg.n_spal = 2;
    cfg.heads = 2;
    cfg.c1 = 32;
    cfg.c2 = 32;
    return cfg;
}

}  // namespace

const std::vector<std::string>& gradcheck_blocks() {
    static const std::vector<std::string> blocks = {"ppsa", "cab", "spal", "cptb", "prm", "full"};
    return blocks;
}

GradCheckResult gradcheck_block(const std::string& block, u64 seed, double tolerance) {
    Rng param_rng(Rng::derive(seed, 100));
    Rng data_rng(Rng::derive(seed, 200));

    auto weighted = [](const Tensor<double>& out, const Tensor<double>& r) { return sum_all(mul(out, r)); };

    if (block == "ppsa") {
        auto tree = std::make_shared<ParamTree<double>>();
        auto ppsa = std::make_shared<Ppsa<double>>(*tree, "ppsa", 8, 2, std::vector<int>{2, 4, 8}, &param_rng);
        randomize(*tree, param_rng);
        Tensor<double> x = random_input({1, 8, 8, 8}, data_rng);
        Tensor<double> r = random_input({1, 8, 8, 8}, data_rng);
        return run_check(block, *tree, {{"x", x}},
                         [ppsa, x, r, weighted]() { return weighted(ppsa->forward(x), r); }, tolerance);
    }
    if (block == "cab") {
        auto tree = std::make_shared<ParamTree<double>>();
        auto cab = std::make_shared<Cab<double>>(*tree, "cab", 6, 3, &param_rng);
        randomize(*tree, param_rng);
        Tensor<double> x = random_input({1, 6, 6, 6}, data_rng);
        Tensor<double> r = random_input({1, 6, 6, 6}, data_rng);
        return run_check(block, *tree, {{"x", x}},
                         [cab, x, r, weighted]() { return weighted(cab->forward(x), r); }, tolerance);
    }
    if (block == "spal") {
        ModelConfig cfg;
        cfg.channels = 8;
        cfg.c1 = 16;
        cfg.c2 = 8;
        cfg.heads = 2;
        cfg.n_spal = 1;
        cfg.scale = 2;
        auto tree = std::make_shared<ParamTree<double>>();
        auto spal = std::make_shared<Spal<double>>(*tree, "spal", 8, cfg, &param_rng);
        randomize(*tree, param_rng);
        Tensor<double> x = random_input({1, 8, 8, 8}, data_rng);
        Tensor<double> r = random_input({1, 8, 8, 8}, data_rng);
        return run_check(block, *tree, {{"x", x}},
                         [spal, x, r, weighted]() { return weighted(spal->forward(x), r); }, tolerance);
    }
    if (block == "cptb") {
        ModelConfig cfg;
        cfg.channels = 8;
        cfg.c1 = 8;
        cfg.c2 = 8;
        cfg.heads = 2;
        cfg.n_spal = 2;
        cfg.scale = 2;
        auto tree = std::make_shared<ParamTree<double>>();
        auto cptb = std::make_shared<Cptb<double>>(*tree, "cptb", cfg, &param_rng);
        randomize(*tree, param_rng);
        Tensor<double> x = random_input({1, 8, 8, 8}, data_rng);
        Tensor<double> r = random_input({1, 8, 8, 8}, data_rng);
        return run_check(block, *tree, {{"x", x}},
                         [cptb, x, r, weighted]() { return weighted(cptb->forward(x), r); }, tolerance);
    }
    if (block == "prm") {
        ModelConfig cfg = tiny_config();
        cfg.prm_hidden = 4;
        auto model = std::make_shared<MbtModel<double>>(MbtModel<double>::build(cfg, seed));
        // Only the PRM convolutions are under test here.
        auto sub = std::make_shared<ParamTree<double>>();
        for (const char* name : {"prm.conv1.weight", "prm.conv1.bias", "prm.conv2.weight", "prm.conv2.bias"})
            sub->add(name, *model->params.find(name));
        randomize(*sub, param_rng);
        Tensor<double> sr = random_input({1, 3, 12, 12}, data_rng);
        Tensor<double> lr = random_input({1, 3, 6, 6}, data_rng);
        Tensor<double> r = random_input({1, 3, 12, 12}, data_rng);
        return run_check(block, *sub, {{"i_sr_estimate", sr}, {"i_lr", lr}},
                         [model, sr, lr, r, weighted]() { return weighted(model->prm_forward(sr, lr), r); },
                         tolerance);
    }
    if (block == "full") {
        ModelConfig cfg = tiny_config();
        auto model = std::make_shared<MbtModel<double>>(MbtModel<double>::build(cfg, seed));
        // Wake the zero-initialized layers so their gradients are non-trivial.
        auto zero_init = std::make_shared<ParamTree<double>>();
        for (const char* name : {"rec.post.weight", "rec.post.bias", "prm.conv1.weight", "prm.conv1.bias",
                                 "prm.conv2.weight", "prm.conv2.bias"})
            zero_init->add(name, *model->params.find(name));
        randomize(*zero_init, param_rng);
        Tensor<double> x({1, 3, 8, 8});
        for (i64 i = 0; i < x.numel(); ++i) x.data()[i] = data_rng.uniform();
        Tensor<double> r = random_input({1, 3, 16, 16}, data_rng);
        return run_check(block, model->params, {{"i_lr", x}},
                         [model, x, r, weighted]() { return weighted(model->forward(x), r); }, tolerance);
    }
    throw ValueError("gradcheck: unknown block '" + block + "' (expected ppsa|cab|spal|cptb|prm|full)");
}

}  // namespace mbt
