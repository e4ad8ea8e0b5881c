#include <doctest.h>

#include <cmath>
#include <sstream>

#include "arb/lens.hpp"
#include "arb/patching.hpp"
#include "arb/pipeline.hpp"
#include "fixtures.hpp"

using namespace arb;

namespace {

constexpr int kVisualToken = 2;
constexpr int kPriorToken = 8;

// Outcome rows for one scope: `flips` visual->prior, the rest unchanged.
void add_rows(std::vector<PatchOutcome>& out, TokenScope scope, std::size_t n, std::size_t flips) {
    for (std::size_t i = 0; i < n; ++i) {
        PatchOutcome o;
        o.sample_id = i;
        o.scope = scope;
        o.layer = 5;
        o.baseline_answer = kVisualToken;
        o.patched_answer = i < flips ? kPriorToken : kVisualToken;
        o.changed = i < flips;
        o.flip_v_to_p = i < flips;
        out.push_back(o);
    }
}

int pct(double image, double full) { return static_cast<int>(std::floor(image / full * 100.0 + 0.5)); }

}  // namespace

TEST_SUITE("patching") {

TEST_CASE("capture then self-inject reproduces the run") {
    ModelConfig cfg;
    const Model m = build_toy_vlm(cfg, fx::late_ramp(cfg));
    const SamplePair p = generate_pair(m, 1);
    const ForwardResult base = forward(m, p.cf);
    for (int layer : {1, 8, 16}) {
        const DonorStates d = capture_states(m, p.cf, layer);
        CHECK(d.states == base.cube.at(layer));
        const ForwardResult again = forward(m, p.cf, {Hook::inject(layer, TokenScope::all, d.states)});
        CHECK(fx::same_cube(again.cube, base.cube));
        const PatchOutcome o = patch_run(m, p.cf, d, TokenScope::all, 0);
        CHECK_FALSE(o.changed);
    }
    CHECK_THROWS(capture_states(m, p.cf, 0));
    CHECK_THROWS(capture_states(m, p.cf, 17));
}

TEST_CASE("snapshots at different layers differ when evidence arrives between them") {
    ModelConfig cfg;
    const Model m = build_toy_vlm(cfg, fx::scenario(cfg, fx::band(16, 6, 6, 1.0), fx::band(16, 1, 1, 0.5)));
    const SamplePair p = generate_pair(m, 2);
    CHECK_FALSE(capture_states(m, p.cf, 4).states == capture_states(m, p.cf, 7).states);
}

TEST_CASE("std donor differs from the cf run on image payload") {
    ModelConfig cfg;
    const Model m = build_toy_vlm(cfg, fx::late_ramp(cfg));
    const SamplePair p = generate_pair(m, 3);
    const DonorStates cf = capture_states(m, p.cf, 1), st = capture_states(m, p.standard, 1);
    const Vector& payload = m.basis[Basis::payload_visual];
    for (int t = 0; t < cfg.n_img; ++t) {
        const auto row = static_cast<std::size_t>(t);
        CHECK(dot(cf.states.row(row), payload) != doctest::Approx(dot(st.states.row(row), payload)));
    }
}

TEST_CASE("patch battery: full and image scopes flip, last and text do not") {
    for (const BatteryEntry& e : patch_battery()) {
        const Model m = build_toy_vlm(e.model, e.scenario);
        const int layer = *closed_form_trajectory(e.scenario).crossover;
        std::vector<PatchOutcome> outcomes;
        for (std::uint64_t s = 0; s < 10; ++s) {
            const SamplePair p = generate_pair(m, s, s);
            const DonorStates donor = capture_states(m, p.standard, layer);
            for (TokenScope scope : {TokenScope::all, TokenScope::last, TokenScope::image_only, TokenScope::text_only})
                outcomes.push_back(patch_run(m, p.cf, donor, scope, s));
        }
        const PatchSummary sum = summarize_patches(m, outcomes);
        CAPTURE(e.scenario.name);
        CHECK(sum.full.flips == 10);
        CHECK(sum.image.flips == 10);
        CHECK(sum.last.flips == 0);
        CHECK(sum.text.flips == 0);
        CHECK(sum.reverse_flips == 0);
        CHECK(*sum.retention == 1.0);
        CHECK(sum.image.flips + sum.text.flips >= sum.full.flips);
    }
}

TEST_CASE("baseline shortcut gives the same outcome") {
    const BatteryEntry e = patch_battery()[0];
    const Model m = build_toy_vlm(e.model, e.scenario);
    const SamplePair p = generate_pair(m, 4);
    const ForwardResult base = forward(m, p.cf);
    const DonorStates donor = capture_states(m, p.standard, 6);
    for (TokenScope scope : {TokenScope::all, TokenScope::last, TokenScope::image_only, TokenScope::text_only}) {
        const PatchOutcome a = patch_run(m, p.cf, donor, scope, 4);
        const PatchOutcome b = patch_run(m, p.cf, donor, scope, 4, &base);
        CHECK(a.patched_answer == b.patched_answer);
        CHECK(a.baseline_answer == b.baseline_answer);
        const PatchOutcome c = patch_run(m, p.cf, donor, scope, 4);
        CHECK(c.patched_answer == a.patched_answer);
    }
}

TEST_CASE("retention examples") {
    const Model m = build_toy_vlm(ModelConfig{}, fx::late_ramp(ModelConfig{}));
    std::vector<PatchOutcome> q;
    add_rows(q, TokenScope::all, 100, 82);
    add_rows(q, TokenScope::image_only, 100, 57);
    const PatchSummary a = summarize_patches(m, q);
    CHECK(pct(57, 82) == 70);
    CHECK(round_percent(*a.retention) == 70);

    std::vector<PatchOutcome> l;
    add_rows(l, TokenScope::all, 100, 78);
    add_rows(l, TokenScope::image_only, 100, 77);
    CHECK(pct(77, 78) == 99);
    CHECK(round_percent(*summarize_patches(m, l).retention) == 99);

    std::vector<PatchOutcome> none;
    add_rows(none, TokenScope::all, 20, 0);
    add_rows(none, TokenScope::image_only, 20, 0);
    const PatchSummary z = summarize_patches(m, none);
    CHECK(z.chg_pct == 0.0);
    CHECK(z.flip_pct == 0.0);
    CHECK_FALSE(z.retention);
    CHECK_THROWS(summarize_patches(m, {}));
}

TEST_CASE("conditional flip rate counts baseline-visual samples only") {
    const Model m = build_toy_vlm(ModelConfig{}, fx::late_ramp(ModelConfig{}));
    std::vector<PatchOutcome> rows;
    add_rows(rows, TokenScope::all, 6, 3);
    for (int i = 0; i < 4; ++i) {
        PatchOutcome o;
        o.scope = TokenScope::all;
        o.baseline_answer = kPriorToken;
        o.patched_answer = kPriorToken;
        rows.push_back(o);
    }
    const PatchSummary s = summarize_patches(m, rows);
    CHECK(s.baseline_visual == 6);
    CHECK(s.flip_pct == doctest::Approx(30.0));
    CHECK(*s.cond_pct == doctest::Approx(50.0));
    CHECK(*s.cond_pct >= s.flip_pct);
}

TEST_CASE("flags: a flip implies a change, directions are exclusive") {
    const BatteryEntry e = patch_battery()[2];
    const Model m = build_toy_vlm(e.model, e.scenario);
    for (std::uint64_t s = 0; s < 4; ++s) {
        const SamplePair p = generate_pair(m, s);
        for (int layer : {2, 8, 12}) {
            const DonorStates d = capture_states(m, p.standard, layer);
            for (TokenScope scope : {TokenScope::all, TokenScope::image_only}) {
                const PatchOutcome o = patch_run(m, p.cf, d, scope);
                if (o.flip_v_to_p || o.flip_p_to_v) CHECK(o.changed);
                CHECK_FALSE((o.flip_v_to_p && o.flip_p_to_v));
            }
        }
    }
}

TEST_CASE("patch csv") {
    std::vector<PatchOutcome> rows;
    add_rows(rows, TokenScope::last, 2, 1);
    std::ostringstream os;
    write_patch_csv(os, rows);
    const std::string text = os.str();
    CHECK(text.rfind(kPatchCsvHeader, 0) == 0);
    CHECK(std::count(text.begin(), text.end(), '\n') == 3);
}

}
