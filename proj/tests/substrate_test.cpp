#include <doctest.h>

#include <cmath>

#include "arb/lens.hpp"
#include "arb/substrate.hpp"
#include "fixtures.hpp"
#include "gen.hpp"

using namespace arb;

namespace {

// Hand summation of the schedules, written out independently of the library.
struct Sums {
    std::vector<double> v, p;
};

Sums cumulative(const std::vector<double>& a, const std::vector<double>& b) {
    Sums s;
    double v = 0, p = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        v += a[i];
        p += b[i];
        s.v.push_back(v);
        s.p.push_back(p);
    }
    return s;
}

}  // namespace

TEST_SUITE("substrate") {

TEST_CASE("closed form: a=[0,0,2,2], b=[1,1,0,0]") {
    ModelConfig cfg;
    cfg.layers = 4;
    const std::vector<double> a{0, 0, 2, 2}, b{1, 1, 0, 0};
    const Sums s = cumulative(a, b);
    const ClosedForm cf = closed_form_trajectory(fx::scenario(cfg, a, b));
    CHECK(cf.visual == s.v);
    CHECK(cf.prior == s.p);
    CHECK(cf.visual == Vector{0, 0, 2, 4});
    CHECK(cf.prior == Vector{1, 2, 2, 2});
    REQUIRE(cf.crossover);
    CHECK(*cf.crossover == 4);  // layer 3 ties
}

TEST_CASE("closed form: ties never cross, an immediate lead crosses at 1") {
    ModelConfig cfg;
    cfg.layers = 6;
    const auto same = fx::band(6, 1, 6, 0.7);
    CHECK_FALSE(closed_form_trajectory(fx::scenario(cfg, same, same)).crossover);
    const auto cf = closed_form_trajectory(fx::scenario(cfg, std::vector<double>{3, 0, 0, 0, 0, 0}, fx::band(6, 1, 6, 0.0)));
    REQUIRE(cf.crossover);
    CHECK(*cf.crossover == 1);
}

TEST_CASE("no visual pathway: both inputs answer with the prior") {
    ModelConfig cfg;
    const auto sc = fx::scenario(cfg, fx::band(16, 1, 16, 0.0), fx::band(16, 1, 4, 0.5));
    const Model m = build_toy_vlm(cfg, sc);
    const SamplePair p = generate_pair(m, 1);
    CHECK(classify_answer(m, forward(m, p.cf).answer) == Role::prior);
    CHECK(classify_answer(m, forward(m, p.standard).answer) == Role::prior);
}

TEST_CASE("no prior pathway: cf answers visual, std answers prior") {
    ModelConfig cfg;
    const auto sc = fx::scenario(cfg, fx::band(16, 3, 10, 0.4), fx::band(16, 1, 16, 0.0));
    const Model m = build_toy_vlm(cfg, sc);
    const SamplePair p = generate_pair(m, 2);
    CHECK(classify_answer(m, forward(m, p.cf).answer) == Role::visual);
    CHECK(classify_answer(m, forward(m, p.standard).answer) == Role::prior);
}

TEST_CASE("lens trajectory tracks the closed form on a late ramp") {
    ModelConfig cfg;
    const auto sc = fx::late_ramp(cfg);
    const Model m = build_toy_vlm(cfg, sc);
    const ClosedForm oracle = closed_form_trajectory(sc);
    const Sums s = cumulative(sc.visual_schedule, sc.prior_schedule);
    const ForwardResult r = forward(m, generate_pair(m, 3).cf);
    const Trajectory tr = layer_logits(r.cube, m, sc.visual_set, sc.prior_set);
    for (int l = 0; l < cfg.layers; ++l) {
        const auto k = static_cast<std::size_t>(l);
        CHECK(oracle.visual[k] == s.v[k]);
        CHECK(std::abs(tr.logit_v[k] - s.v[k]) <= 0.05);
        CHECK(std::abs(tr.logit_p[k] - s.p[k]) <= 0.05);
    }
    CHECK(classify_answer(m, r.answer) == Role::visual);
}

TEST_CASE("self-injection and zero additions are identities") {
    ModelConfig cfg;
    const auto sc = fx::late_ramp(cfg);
    const Model m = build_toy_vlm(cfg, sc);
    const SamplePair p = generate_pair(m, 4);
    const ForwardResult base = forward(m, p.cf);
    for (int layer : {1, 5, 9, 16}) {
        const ForwardResult inj = forward(m, p.cf, {Hook::inject(layer, TokenScope::all, base.cube.at(layer))});
        CHECK(fx::same_cube(inj.cube, base.cube));
        CHECK(inj.final_logits == base.final_logits);
        const ForwardResult add = forward(m, p.cf, {Hook::add(layer, TokenScope::all, Vector(64, 0.0))});
        CHECK(fx::same_cube(add.cube, base.cube));
    }
}

TEST_CASE("forward_from resumes bit-identically") {
    ModelConfig cfg;
    const auto sc = fx::late_ramp(cfg);
    const Model m = build_toy_vlm(cfg, sc);
    const SamplePair p = generate_pair(m, 5);
    const ForwardResult base = forward(m, p.cf);
    gen::Source src(5);
    for (int layer : {1, 4, 8, 12, 16}) {
        Vector delta(64);
        for (double& x : delta) x = src.gauss();
        const std::vector<Hook> hooks{Hook::add(layer, TokenScope::image_only, delta)};
        const ForwardResult full = forward(m, p.cf, hooks);
        const ForwardResult resumed = forward_from(m, base.cube, layer, cfg.n_img, hooks);
        CHECK(full.final_logits == resumed.final_logits);
        CHECK(full.answer == resumed.answer);
    }
    CHECK_THROWS(forward_from(m, base.cube, 8, cfg.n_img, {Hook::add(3, TokenScope::all, Vector(64, 0.0))}));
}

TEST_CASE("two injections at one layer are rejected") {
    ModelConfig cfg;
    const Model m = build_toy_vlm(cfg, fx::late_ramp(cfg));
    const SamplePair p = generate_pair(m, 6);
    const ForwardResult base = forward(m, p.cf);
    const Hook h = Hook::inject(3, TokenScope::all, base.cube.at(3));
    CHECK_THROWS(forward(m, p.cf, {h, h}));
    CHECK_THROWS(forward(m, p.cf, {Hook::add(0, TokenScope::all, Vector(64, 0.0))}));
}

TEST_CASE("causality: changing layer k leaves earlier slices untouched") {
    ModelConfig cfg;
    const auto sc = fx::late_ramp(cfg);
    const Model m = build_toy_vlm(cfg, sc);
    const SamplePair p = generate_pair(m, 7);
    const ForwardResult base = forward(m, p.cf);
    gen::Source src(17);
    for (int k : {2, 7, 13}) {
        Model perturbed = m;
        for (double& w : perturbed.layers[static_cast<std::size_t>(k - 1)].mlp.w_out.data()) w += 0.1 * src.gauss();
        const ForwardResult r = forward(perturbed, p.cf);
        for (int l = 0; l < k; ++l) CHECK(r.cube.at(l) == base.cube.at(l));
        CHECK_FALSE(r.cube.at(k) == base.cube.at(k));
    }
}

TEST_CASE("evidence locality: a silenced image token removes its share") {
    ModelConfig cfg;
    auto sc = fx::scenario(cfg, fx::band(16, 2, 16, 0.3), fx::band(16, 1, 2, 0.5));
    sc.evidence_weights = {0.3, 0.05, 0.2, 0.05, 0.1, 0.1, 0.15, 0.05};
    const Model m = build_toy_vlm(cfg, sc);
    const SamplePair p = generate_pair(m, 8);
    const double total_a = 0.3 * 15;
    const double full = layer_logits(forward(m, p.cf).cube, m, sc.visual_set, sc.prior_set).logit_v.back();
    for (int i = 0; i < cfg.n_img; ++i) {
        const double w = sc.evidence_weights[static_cast<std::size_t>(i)];
        InputSequence in = p.cf;
        const Vector silent = image_embedding(m, w, sc.evidence_sign_cf, 0.0);
        std::copy(silent.begin(), silent.end(), in.embeddings.row(static_cast<std::size_t>(i)).begin());
        const double reduced = layer_logits(forward(m, in).cube, m, sc.visual_set, sc.prior_set).logit_v.back();
        const double expected = w * total_a;
        CHECK(full - reduced == doctest::Approx(expected).epsilon(0.10));
    }
}

TEST_CASE("generate_pair: determinism, seed sensitivity, identical text") {
    ModelConfig cfg;
    auto sc = fx::late_ramp(cfg);
    sc.noise_sigma = 0.01;
    sc.prior_noise_sigma = 0.1;
    const Model m = build_toy_vlm(cfg, sc);
    const SamplePair a = generate_pair(m, 9), b = generate_pair(m, 9), c = generate_pair(m, 10);
    CHECK(a.cf.embeddings == b.cf.embeddings);
    CHECK(a.standard.embeddings == b.standard.embeddings);
    CHECK_FALSE(a.cf.embeddings == c.cf.embeddings);
    CHECK(a.cf.ids == c.cf.ids);
    for (int t = cfg.n_img; t < cfg.seq_len(); ++t) {
        const auto row = static_cast<std::size_t>(t);
        const auto x = a.cf.embeddings.row(row), y = a.standard.embeddings.row(row);
        CHECK(std::equal(x.begin(), x.end(), y.begin()));
    }
}

TEST_CASE("strong visual scenario wins at least 95% under small noise") {
    ModelConfig cfg;
    auto sc = fx::scenario(cfg, fx::band(16, 4, 16, 0.5), fx::band(16, 1, 3, 0.5));
    sc.noise_sigma = 0.02;
    const Model m = build_toy_vlm(cfg, sc);
    int wins = 0;
    for (std::uint64_t s = 0; s < 100; ++s) wins += classify_answer(m, forward(m, generate_pair(m, 100 + s, s).cf).answer) == Role::visual;
    CHECK(wins >= 95);
}

TEST_CASE("model config validation") {
    ModelConfig cfg;
    cfg.layers = 2;
    CHECK_THROWS(cfg.validate());
    ModelConfig ok;
    auto sc = fx::late_ramp(ok);
    sc.evidence_weights[0] += 0.5;
    CHECK_THROWS(sc.validate(ok));
}

}
