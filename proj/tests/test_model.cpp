#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>

#include "mbt/model.hpp"
#include "naive_oracle.hpp"
#include "test_util.hpp"

using namespace mbt;
using test::random_tensor;

namespace {

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

template <typename T>
std::vector<double> to_doubles(const Tensor<T>& t) {
    std::vector<double> out(static_cast<size_t>(t.numel()));
    for (i64 i = 0; i < t.numel(); ++i) out[static_cast<size_t>(i)] = static_cast<double>(t.data()[i]);
    return out;
}

template <typename T>
bool bits_equal(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape() == b.shape() &&
           std::memcmp(a.data(), b.data(), sizeof(T) * static_cast<size_t>(a.numel())) == 0;
}

}  // namespace

TEST_CASE("model config validation") {
    ModelConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    ModelConfig bad = cfg;
    bad.c1 = 95;
    CHECK_THROWS_AS(bad.validate(), ValueError);
    bad = cfg;
    bad.heads = 5;  // 96/5
    CHECK_THROWS_AS(bad.validate(), ValueError);
    bad = cfg;
    bad.pool_ratios = {2, 3};
    CHECK_THROWS_AS(bad.validate(), ValueError);
    bad = cfg;
    bad.pool_ratios = {4, 2};
    CHECK_THROWS_AS(bad.validate(), ValueError);
    bad = cfg;
    bad.scale = 5;
    CHECK_THROWS_AS(bad.validate(), ValueError);
}

TEST_CASE("param tree rejects duplicates and mismatched copies") {
    ParamTree<float> tree;
    tree.add("a", Tensor<float>({2}));
    CHECK_THROWS_AS(tree.add("a", Tensor<float>({2})), ValueError);
    ParamTree<float> other;
    other.add("b", Tensor<float>({2}));
    CHECK_THROWS_AS(tree.copy_values_from(other), ValueError);
}

// ---------------------------------------------------------------------------
// PPSA
// ---------------------------------------------------------------------------

TEST_CASE("ppsa: 64x64 with ratios {2,4,8} produces 1344 kv tokens") {
    ParamTree<float> tree;
    Rng rng(1);
    Ppsa<float> ppsa(tree, "ppsa", 8, 2, {2, 4, 8}, &rng);
    Tensor<float> x({1, 8, 64, 64});
    Rng data_rng(2);
    for (i64 i = 0; i < x.numel(); ++i) x.data()[i] = static_cast<float>(data_rng.uniform());
    PpsaProbe<float> probe;
    ppsa.forward(x, &probe);
    CHECK(probe.kv_tokens == 1344);
    CHECK(probe.attn_probs.dim(3) == 1344);

    // Attention rows sum to one.
    const i64 lkv = probe.attn_probs.dim(3);
    const i64 rows = probe.attn_probs.numel() / lkv;
    for (i64 r = 0; r < rows; r += 97) {
        double s = 0;
        for (i64 j = 0; j < lkv; ++j) s += probe.attn_probs.data()[r * lkv + j];
        CHECK(std::fabs(s - 1.0) < 1e-6);
    }
}

TEST_CASE("ppsa: all-zero weights and biases give an all-zero output") {
    ParamTree<float> tree;
    Ppsa<float> ppsa(tree, "ppsa", 8, 2, {2, 4}, nullptr);
    auto x = Tensor<float>::full({1, 8, 8, 8}, 3.0f);
    auto y = ppsa.forward(x);
    for (i64 i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == 0.0f);
}

TEST_CASE("ppsa: indivisible spatial dims are rejected") {
    ParamTree<float> tree;
    Rng rng(1);
    Ppsa<float> ppsa(tree, "ppsa", 8, 2, {2, 4, 8}, &rng);
    Tensor<float> x({1, 8, 12, 12});
    CHECK_THROWS_AS(ppsa.forward(x), ShapeError);
}

TEST_CASE("ppsa matches the straight-line reference") {
    ParamTree<double> tree;
    Rng rng(7);
    Ppsa<double> ppsa(tree, "ppsa", 8, 2, {2, 4, 8}, &rng);
    Rng data_rng(8);
    auto x = random_tensor<double>({1, 8, 16, 16}, data_rng);
    auto y = ppsa.forward(x);
    auto ref = naive::ppsa_ref(to_doubles(x), 8, 16, 16, to_doubles(ppsa.q_proj.w), to_doubles(ppsa.q_proj.b),
                               to_doubles(ppsa.k_proj.w), to_doubles(ppsa.k_proj.b), to_doubles(ppsa.v_proj.w),
                               to_doubles(ppsa.v_proj.b), to_doubles(ppsa.out_proj.w), to_doubles(ppsa.out_proj.b), 2,
                               {2, 4, 8});
    double worst = 0;
    for (i64 i = 0; i < y.numel(); ++i) worst = std::max(worst, std::fabs(y.data()[i] - ref[static_cast<size_t>(i)]));
    CHECK(worst < 1e-10);
}

TEST_CASE("ppsa (float32) matches the double reference within 1e-5") {
    ParamTree<float> tree;
    Rng rng(7);
    Ppsa<float> ppsa(tree, "ppsa", 8, 2, {2, 4, 8}, &rng);
    Rng data_rng(8);
    auto x = random_tensor<float>({1, 8, 16, 16}, data_rng);
    auto y = ppsa.forward(x);
    auto ref = naive::ppsa_ref(to_doubles(x), 8, 16, 16, to_doubles(ppsa.q_proj.w), to_doubles(ppsa.q_proj.b),
                               to_doubles(ppsa.k_proj.w), to_doubles(ppsa.k_proj.b), to_doubles(ppsa.v_proj.w),
                               to_doubles(ppsa.v_proj.b), to_doubles(ppsa.out_proj.w), to_doubles(ppsa.out_proj.b), 2,
                               {2, 4, 8});
    double worst = 0;
    for (i64 i = 0; i < y.numel(); ++i)
        worst = std::max(worst, std::fabs(static_cast<double>(y.data()[i]) - ref[static_cast<size_t>(i)]));
    CHECK(worst < 1e-5);
}

// ---------------------------------------------------------------------------
// CAB
// ---------------------------------------------------------------------------

TEST_CASE("cab: zero input with zero biases gives zero output") {
    ParamTree<double> tree;
    Rng rng(3);
    Cab<double> cab(tree, "cab", 6, 3, &rng);  // weights random, biases zero by init
    Tensor<double> x({1, 6, 8, 8});
    auto y = cab.forward(x);
    for (i64 i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == 0.0);
}

TEST_CASE("cab: rejects channels below squeeze") {
    ParamTree<double> tree;
    Rng rng(3);
    CHECK_THROWS_AS(Cab<double>(tree, "cab", 2, 3, &rng), ValueError);
}

TEST_CASE("cab matches the straight-line reference; gate lies in (0,1)") {
    ParamTree<double> tree;
    Rng rng(9);
    Cab<double> cab(tree, "cab", 6, 3, &rng);
    Rng data_rng(10);
    auto x = random_tensor<double>({1, 6, 8, 8}, data_rng);
    auto y = cab.forward(x);
    std::vector<double> gate;
    auto ref = naive::cab_ref(to_doubles(x), 6, 8, 8, 2, to_doubles(cab.conv1.w), to_doubles(cab.conv1.b),
                              to_doubles(cab.conv2.w), to_doubles(cab.conv2.b), to_doubles(cab.ca1.w),
                              to_doubles(cab.ca1.b), to_doubles(cab.ca2.w), to_doubles(cab.ca2.b), &gate);
    double worst = 0;
    for (i64 i = 0; i < y.numel(); ++i) worst = std::max(worst, std::fabs(y.data()[i] - ref[static_cast<size_t>(i)]));
    CHECK(worst < 1e-10);
    for (double g : gate) {
        CHECK(g > 0.0);
        CHECK(g < 1.0);
    }
}

TEST_CASE("cab (float32) matches the double reference within 1e-5") {
    ParamTree<float> tree;
    Rng rng(9);
    Cab<float> cab(tree, "cab", 6, 3, &rng);
    Rng data_rng(10);
    auto x = random_tensor<float>({1, 6, 8, 8}, data_rng);
    auto y = cab.forward(x);
    auto ref = naive::cab_ref(to_doubles(x), 6, 8, 8, 2, to_doubles(cab.conv1.w), to_doubles(cab.conv1.b),
                              to_doubles(cab.conv2.w), to_doubles(cab.conv2.b), to_doubles(cab.ca1.w),
                              to_doubles(cab.ca1.b), to_doubles(cab.ca2.w), to_doubles(cab.ca2.b));
    double worst = 0;
    for (i64 i = 0; i < y.numel(); ++i)
        worst = std::max(worst, std::fabs(static_cast<double>(y.data()[i]) - ref[static_cast<size_t>(i)]));
    CHECK(worst < 1e-5);
}

// ---------------------------------------------------------------------------
// SPAL
// ---------------------------------------------------------------------------

TEST_CASE("spal: output shape equals input shape across widths") {
    for (i64 c_in : {32, 48, 96}) {
        ModelConfig cfg;
        cfg.c1 = 96;
        cfg.heads = 4;
        ParamTree<float> tree;
        Rng rng(20 + c_in);
        Spal<float> spal(tree, "spal", c_in, cfg, &rng);
        Rng data_rng(21);
        auto x = random_tensor<float>({1, c_in, 8, 8}, data_rng);
        auto y = spal.forward(x);
        CHECK(y.shape() == x.shape());
    }
}

TEST_CASE("spal: all-zero parameters make the layer an exact identity") {
    ModelConfig cfg = tiny_config();
    ParamTree<float> tree;
    Spal<float> spal(tree, "spal", 16, cfg, nullptr);
    Rng data_rng(22);
    auto x = random_tensor<float>({2, 16, 8, 8}, data_rng);
    SpalTrace<float> trace;
    auto y = spal.forward(x, &trace);
    CHECK(bits_equal(y, x));
    for (i64 i = 0; i < trace.f_p_bar.numel(); ++i) CHECK(trace.f_p_bar.data()[i] == 0.0f);
    for (i64 i = 0; i < trace.f_c_bar.numel(); ++i) CHECK(trace.f_c_bar.data()[i] == 0.0f);
    for (i64 i = 0; i < trace.f_e.numel(); ++i) CHECK(trace.f_e.data()[i] == 0.0f);
    for (i64 i = 0; i < trace.f_bar.numel(); ++i) CHECK(trace.f_bar.data()[i] == 0.0f);
    CHECK(bits_equal(trace.f_hat, x));
}

TEST_CASE("spal trace: feedback equations recompute exactly from the trace") {
    ModelConfig cfg = tiny_config();
    for (int seed = 0; seed < 20; ++seed) {
        ParamTree<float> tree;
        Rng rng(100 + seed);
        Spal<float> spal(tree, "spal", 16, cfg, &rng);
        Rng data_rng(200 + seed);
        auto x = random_tensor<float>({1, 16, 8, 8}, data_rng);
        SpalTrace<float> t;
        auto y = spal.forward(x, &t);

        // F_e = conv1x1(F_c_bar - F_p_bar)
        CHECK(bits_equal(t.f_e, spal.err_proj.forward(sub(t.f_c_bar, t.f_p_bar))));
        // F_bar = conv1x1(F_p_bar) + F_e
        CHECK(bits_equal(t.f_bar, add(spal.main_proj.forward(t.f_p_bar), t.f_e)));
        // F_hat = F_bar + F
        CHECK(bits_equal(t.f_hat, add(t.f_bar, x)));
        CHECK(bits_equal(t.h, y));
        // Channel widths of the two branches.
        CHECK(t.f_c.dim(1) == cfg.c1 / 2);
        CHECK(t.f_p.dim(1) == cfg.c1 / 2);
    }
}

// ---------------------------------------------------------------------------
// CPTB
// ---------------------------------------------------------------------------

TEST_CASE("cptb: residual shape contract and zero-parameter identity") {
    ModelConfig cfg = tiny_config();
    ParamTree<float> tree;
    Rng rng(33);
    Cptb<float> cptb(tree, "cptb.0", cfg, &rng);
    Rng data_rng(34);
    auto x = random_tensor<float>({1, cfg.channels, 8, 8}, data_rng);
    CHECK(cptb.forward(x).shape() == x.shape());

    ParamTree<float> ztree;
    Cptb<float> zero(ztree, "cptb.0", cfg, nullptr);
    auto y = zero.forward(x);
    CHECK(bits_equal(y, x));
}

TEST_CASE("cptb trace: block equations recompute exactly from the trace") {
    ModelConfig cfg = tiny_config();
    for (int seed = 0; seed < 20; ++seed) {
        ParamTree<float> tree;
        Rng rng(300 + seed);
        Cptb<float> cptb(tree, "cptb.0", cfg, &rng);
        Rng data_rng(400 + seed);
        auto x = random_tensor<float>({1, cfg.channels, 8, 8}, data_rng);
        CptbTrace<float> t;
        auto y = cptb.forward(x, &t);

        // H_e = H_p_bar - H_c_bar
        CHECK(bits_equal(t.h_e, sub(t.h_p_bar, t.h_c_bar)));
        // H_bar = conv1x1(H_e) + conv1x1(H_p_bar)
        CHECK(bits_equal(t.h_bar, add(cptb.err_lift.forward(t.h_e), cptb.main_lift.forward(t.h_p_bar))));
        // H_out = H_bar + H_prev
        CHECK(bits_equal(t.h_out, add(t.h_bar, x)));
        CHECK(bits_equal(t.h_out, y));
        CHECK(t.h_p.dim(1) == cfg.c2 / 2);
        CHECK(t.h_c.dim(1) == cfg.c2 / 2);
        CHECK(y.dim(1) == cfg.channels);
    }
}

// ---------------------------------------------------------------------------
// Full model
// ---------------------------------------------------------------------------

TEST_CASE("mbt: shape contract for r in {2,3,4} across sizes") {
    for (int r : {2, 3, 4}) {
        ModelConfig cfg = tiny_config();
        cfg.scale = r;
        auto model = MbtModel<float>::build(cfg, 5);
        for (i64 hw : {16, 24}) {
            Tensor<float> x({1, 3, hw, hw});
            auto y = model.forward(x);
            CHECK(y.shape() == std::vector<i64>{1, 3, r * hw, r * hw});
        }
    }
}

TEST_CASE("mbt: 32x32 at r=4 gives 128x128") {
    ModelConfig cfg = tiny_config();
    cfg.scale = 4;
    auto model = MbtModel<float>::build(cfg, 5);
    Tensor<float> x({1, 3, 32, 32});
    CHECK(model.forward(x).shape() == std::vector<i64>{1, 3, 128, 128});
}

TEST_CASE("mbt: indivisible input dims are rejected") {
    auto model = MbtModel<float>::build(tiny_config(), 5);
    Tensor<float> x({1, 3, 20, 20});
    CHECK_THROWS_AS(model.forward(x), ShapeError);
    Tensor<float> bad_channels({1, 4, 16, 16});
    CHECK_THROWS_AS(model.forward(bad_channels), ShapeError);
}

TEST_CASE("mbt: all weights zero collapses to bilinear interpolation, bit-exactly") {
    ModelConfig cfg = tiny_config();
    auto model = MbtModel<float>::build_zero(cfg);
    Rng data_rng(50);
    Tensor<float> x({1, 3, 16, 16});
    for (i64 i = 0; i < x.numel(); ++i) x.data()[i] = static_cast<float>(data_rng.uniform());
    auto y = model.forward(x);
    auto base = resample_bilinear(x, 32, 32);
    CHECK(bits_equal(y, base));
}

TEST_CASE("mbt: fresh init keeps I_SR identical to the pre-PRM estimate") {
    ModelConfig cfg = tiny_config();
    auto model = MbtModel<float>::build(cfg, 77);
    Rng data_rng(51);
    Tensor<float> x({1, 3, 16, 16});
    for (i64 i = 0; i < x.numel(); ++i) x.data()[i] = static_cast<float>(data_rng.uniform());
    MbtTrace<float> trace;
    auto y = model.forward(x, &trace);
    CHECK(bits_equal(y, trace.i_sr_initial));
    CHECK(bits_equal(trace.prm.i_sr, y));
}

TEST_CASE("prm trace: the feedback difference recomputes from the resampler") {
    ModelConfig cfg = tiny_config();
    auto model = MbtModel<float>::build(cfg, 78);
    Rng data_rng(52);
    Tensor<float> lr({1, 3, 16, 16});
    for (i64 i = 0; i < lr.numel(); ++i) lr.data()[i] = static_cast<float>(data_rng.uniform());
    auto est = resample_bilinear(lr, 32, 32);
    PrmTrace<float> t;
    auto y = model.prm_forward(est, lr, &t);
    CHECK(bits_equal(t.diff, sub(resample_bilinear(est, 16, 16), lr)));
    CHECK(y.shape() == est.shape());
    CHECK_THROWS_AS(model.prm_forward(est, Tensor<float>({1, 3, 8, 8})), ShapeError);
}

TEST_CASE("init: same seed gives a bit-identical parameter tree") {
    ModelConfig cfg = tiny_config();
    auto a = MbtModel<float>::build(cfg, 123);
    auto b = MbtModel<float>::build(cfg, 123);
    auto c = MbtModel<float>::build(cfg, 124);
    REQUIRE(a.params.size() == b.params.size());
    bool all_same = true, any_diff_seed = false;
    for (size_t i = 0; i < a.params.size(); ++i) {
        const auto& ta = a.params.items()[i].second;
        const auto& tb = b.params.items()[i].second;
        const auto& tc = c.params.items()[i].second;
        if (!bits_equal(ta, tb)) all_same = false;
        if (!bits_equal(ta, tc)) any_diff_seed = true;
    }
    CHECK(all_same);
    CHECK(any_diff_seed);
}

TEST_CASE("init: zero-started layers are zero, normal layers are bounded by 2 sigma") {
    ModelConfig cfg = tiny_config();
    auto model = MbtModel<float>::build(cfg, 9);
    for (const char* name : {"rec.post.weight", "rec.post.bias", "prm.conv1.weight", "prm.conv2.weight"}) {
        auto* t = model.params.find(name);
        REQUIRE(t != nullptr);
        for (i64 i = 0; i < t->numel(); ++i) CHECK(t->data()[i] == 0.0f);
    }
    auto* head = model.params.find("head.weight");
    REQUIRE(head != nullptr);
    bool any_nonzero = false;
    for (i64 i = 0; i < head->numel(); ++i) {
        CHECK(std::fabs(head->data()[i]) <= 0.04f + 1e-7f);
        any_nonzero = any_nonzero || head->data()[i] != 0.0f;
    }
    CHECK(any_nonzero);
    auto* ln = model.params.find("cptb.0.spal.0.ln1.scale");
    REQUIRE(ln != nullptr);
    for (i64 i = 0; i < ln->numel(); ++i) CHECK(ln->data()[i] == 1.0f);
}

TEST_CASE("param count: tiny config equals the hand-counted total") {
    // Hand-counted layer by layer before the implementation existed:
    //   head 896; cptb: init 1056, 2 spals x 4954, agg 2320, cab 1642,
    //   lifts 2x544; tail 9248; rec 3468+84; prm 64+51.
    CHECK(param_count(tiny_config()) == 29825);
}

TEST_CASE("param count: deterministic per config and consistent with modules") {
    ModelConfig cfg = tiny_config();
    CHECK(param_count(cfg) == param_count(cfg));
    auto model = MbtModel<float>::build(cfg, 1);
    auto modules = param_count_by_module(model.params);
    i64 total = 0;
    for (const auto& [name, count] : modules) total += count;
    CHECK(total == model.params.total_params());
    CHECK(modules.front().first == "head");
}
