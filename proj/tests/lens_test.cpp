#include <doctest.h>

#include <cmath>
#include <sstream>

#include "arb/lens.hpp"
#include "fixtures.hpp"
#include "gen.hpp"

using namespace arb;

namespace {

// Persistence rule written out directly: first layer with v > p that is the
// last layer or is followed by another v > p.
std::optional<int> oracle_mac(const Vector& v, const Vector& p) {
    for (std::size_t l = 0; l < v.size(); ++l) {
        if (!(v[l] > p[l])) continue;
        if (l + 1 == v.size() || v[l + 1] > p[l + 1]) return static_cast<int>(l) + 1;
    }
    return std::nullopt;
}

Trajectory make_traj(Vector v, Vector p) {
    Trajectory t;
    t.v_variant.assign(v.size(), 0);
    t.p_variant.assign(v.size(), 0);
    t.logit_v = std::move(v);
    t.logit_p = std::move(p);
    return t;
}

MacResult crossing_at(int layer) {
    MacResult r;
    r.mac_layer = layer;
    r.final_winner = Role::visual;
    return r;
}

}  // namespace

TEST_SUITE("lens") {

TEST_CASE("variant max picks the best variant") {
    const VariantSet visual{Role::visual, {2, 3, 4, 5, 6, 7}};
    Vector logits(16, -3.0);
    const double values[6] = {1.44, 1.70, 0.93, 0.5, 1.1, 0.2};
    for (std::size_t i = 0; i < 6; ++i) logits[static_cast<std::size_t>(visual.ids[i])] = values[i];
    const VariantMax m = variant_max(logits, visual);
    CHECK(m.value == 1.70);
    CHECK(m.slot == 1);

    Vector flat(16, 0.25);
    const VariantMax tie = variant_max(flat, visual);
    CHECK(tie.value == 0.25);
    CHECK(tie.slot == 0);
}

TEST_CASE("detect_mac: first stable crossover at 12") {
    Vector v(16), p(16);
    for (int l = 0; l < 16; ++l) {
        v[static_cast<std::size_t>(l)] = 0.1 * l;
        p[static_cast<std::size_t>(l)] = 0.1 * l + 0.5;
    }
    v[11] = 1.70;
    p[11] = 1.55;
    v[12] = 1.88;
    p[12] = 1.42;
    for (int l = 13; l < 16; ++l) {
        v[static_cast<std::size_t>(l)] = 2.0 + 0.1 * l;
        p[static_cast<std::size_t>(l)] = 1.4;
    }
    const MacResult r = detect_mac(make_traj(v, p));
    REQUIRE(r.mac_layer);
    CHECK(*r.mac_layer == 12);
    CHECK(r.final_winner == Role::visual);
}

TEST_CASE("detect_mac: a transient lead is rejected") {
    Vector v(16, 0.0), p(16, 1.0);
    v[4] = 2.0;  // layer 5 only
    for (int l = 8; l < 16; ++l) v[static_cast<std::size_t>(l)] = 3.0;
    const MacResult r = detect_mac(make_traj(v, p));
    REQUIRE(r.mac_layer);
    CHECK(*r.mac_layer == 9);
    CHECK(*r.depth_pct == doctest::Approx(9.0 / 16.0));
}

TEST_CASE("detect_mac: never crossing, ties and final-layer-only") {
    const MacResult none = detect_mac(make_traj(Vector(8, 1.0), Vector(8, 1.0)));
    CHECK_FALSE(none.mac_layer);
    CHECK(none.final_winner == Role::prior);
    CHECK(none.final_gap == 0.0);

    Vector v(8, 0.0), p(8, 1.0);
    v[7] = 2.0;
    const MacResult last = detect_mac(make_traj(v, p));
    REQUIRE(last.mac_layer);
    CHECK(*last.mac_layer == 8);
    CHECK(last.final_gap == 1.0);
}

TEST_CASE("property: detect_mac matches the persistence oracle and only sees signs") {
    gen::Source src(31);
    for (int trial = 0; trial < 1000; ++trial) {
        const auto L = static_cast<std::size_t>(src.integer(2, 24));
        Vector v(L), p(L);
        for (std::size_t l = 0; l < L; ++l) {
            v[l] = src.real(-2, 2);
            p[l] = src.integer(0, 5) == 0 ? v[l] : src.real(-2, 2);
        }
        const MacResult r = detect_mac(make_traj(v, p));
        REQUIRE(r.mac_layer == oracle_mac(v, p));

        // Per-layer positive rescaling of the gap plus a common shift.
        Vector v2(L), p2(L);
        for (std::size_t l = 0; l < L; ++l) {
            const double c = src.real(-10, 10);
            p2[l] = p[l] + c;
            v2[l] = p2[l] + (v[l] - p[l]) * src.real(0.1, 10.0);
        }
        REQUIRE(detect_mac(make_traj(v2, p2)).mac_layer == r.mac_layer);
        REQUIRE(detect_mac(make_traj(v, p)).mac_layer == r.mac_layer);
    }
}

TEST_CASE("property: variant max dominance and shift invariance") {
    gen::Source src(41);
    const VariantSet visual{Role::visual, {2, 3, 4, 5, 6, 7}};
    const VariantSet prior{Role::prior, {8, 9, 10, 11, 12, 13}};
    for (int trial = 0; trial < 500; ++trial) {
        Vector logits = src.reals(20);
        const VariantMax m = variant_max(logits, visual);
        for (int id : visual.ids) REQUIRE(m.value >= logits[static_cast<std::size_t>(id)]);
        const bool lead = m.value > variant_max(logits, prior).value;
        const double c = src.real(-50, 50);
        for (double& x : logits) x += c;
        REQUIRE((variant_max(logits, visual).value > variant_max(logits, prior).value) == lead);
    }
}

TEST_CASE("aggregate_mac depth percentages") {
    auto pct = [](double mean, int L) { return static_cast<int>(std::floor(mean / L * 100.0 + 0.5)); };

    const MacAggregate a = aggregate_mac({crossing_at(13), crossing_at(14)}, 32);
    CHECK(*a.mean_mac == 13.5);
    CHECK(pct(13.5, 32) == 42);
    CHECK(round_percent(*a.depth_pct) == 42);

    const MacAggregate b = aggregate_mac({crossing_at(19), crossing_at(20), crossing_at(20), crossing_at(20), crossing_at(20)}, 28);
    CHECK(*b.mean_mac == doctest::Approx(19.8));
    CHECK(pct(19.8, 28) == 71);
    CHECK(round_percent(*b.depth_pct) == 71);

    const MacAggregate c = aggregate_mac({crossing_at(21), crossing_at(21), crossing_at(21), crossing_at(21), crossing_at(22)}, 32);
    CHECK(*c.mean_mac == doctest::Approx(21.2));
    CHECK(pct(21.2, 32) == 66);
    CHECK(round_percent(*c.depth_pct) == 66);

    const MacAggregate k = aggregate_mac({crossing_at(7), crossing_at(7), crossing_at(7)}, 16);
    CHECK(*k.mean_mac == 7.0);
    CHECK(k.win_rate == 1.0);

    MacResult never;
    const MacAggregate mixed = aggregate_mac({crossing_at(4), never}, 16);
    CHECK(*mixed.mean_mac == 4.0);
    CHECK(mixed.crossed == 1);
    CHECK(mixed.win_rate == 0.5);
    CHECK_FALSE(aggregate_mac({never}, 16).mean_mac);
}

TEST_CASE("round_percent halves go up") {
    CHECK(round_percent(0.425) == 43);
    CHECK(round_percent(0.4249) == 42);
    CHECK(round_percent(1.0) == 100);
}

TEST_CASE("visual rank") {
    const VariantSet visual{Role::visual, {2, 3, 4, 5, 6, 7}};
    Vector logits(20, 0.0);
    logits[3] = 5.0;
    CHECK(visual_rank(logits, visual) == 1);

    // prior ahead, then three unrelated tokens, then the visual variant
    Vector l2(20, 0.0);
    l2[8] = 9.0;
    l2[15] = 8.0;
    l2[16] = 7.0;
    l2[17] = 6.0;
    l2[4] = 5.0;
    CHECK(visual_rank(l2, visual) == 5);
}

TEST_CASE("substrate trajectories follow the oracle and rank the visual answer first") {
    ModelConfig cfg;
    const ScenarioSpec sc = fx::late_ramp(cfg);
    const Model m = build_toy_vlm(cfg, sc);
    const ClosedForm oracle = closed_form_trajectory(sc);
    for (std::uint64_t s = 0; s < 5; ++s) {
        const ForwardResult r = forward(m, generate_pair(m, s, s).cf);
        const Trajectory tr = layer_logits(r.cube, m, sc.visual_set, sc.prior_set);
        for (int l = 0; l < cfg.layers; ++l) {
            CHECK(std::abs(tr.logit_v[static_cast<std::size_t>(l)] - oracle.visual[static_cast<std::size_t>(l)]) <= 0.05);
            CHECK(std::abs(tr.logit_p[static_cast<std::size_t>(l)] - oracle.prior[static_cast<std::size_t>(l)]) <= 0.05);
        }
        CHECK(detect_mac(tr).mac_layer == oracle.crossover);
        CHECK(final_rank(r.cube, m, sc.visual_set) == 1);
    }
}

TEST_CASE("trajectory csv layout") {
    std::ostringstream os;
    write_trajectory_csv(os, {{7, make_traj({0.5, 1.0}, {0.75, 0.25})}});
    std::istringstream is(os.str());
    std::string line;
    std::getline(is, line);
    CHECK(line == kTrajectoryCsvHeader);
    int rows = 0;
    while (std::getline(is, line)) ++rows;
    CHECK(rows == 2);
}

}
