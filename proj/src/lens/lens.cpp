#include "arb/lens.hpp"

#include <cmath>
#include <ostream>
#include <stdexcept>

#include "arb/format.hpp"

namespace arb {

VariantMax variant_max(std::span<const double> logits, const VariantSet& set) {
    VariantMax best;
    best.value = -INFINITY;
    int best_id = -1;
    for (std::size_t j = 0; j < kVariantCount; ++j) {
        const int id = set.ids[j];
        const double v = logits[static_cast<std::size_t>(id)];
        if (v > best.value || (v == best.value && id < best_id)) {
            best.value = v;
            best.slot = static_cast<int>(j);
            best_id = id;
        }
    }
    return best;
}

Trajectory layer_logits(const HiddenStateCube& cube, const Model& model,
                        const VariantSet& visual, const VariantSet& prior) {
    if (cube.layers() != model.layer_count() || cube.dim() != model.d_model())
        throw std::invalid_argument("layer_logits: cube does not belong to this model");
    Trajectory traj;
    for (int l = 1; l <= cube.layers(); ++l) {
        const Vector logits = readout_logits(model, cube.last_token(l));
        const VariantMax v = variant_max(logits, visual);
        const VariantMax p = variant_max(logits, prior);
        traj.logit_v.push_back(v.value);
        traj.logit_p.push_back(p.value);
        traj.v_variant.push_back(v.slot);
        traj.p_variant.push_back(p.slot);
    }
    return traj;
}

MacResult detect_mac(const Trajectory& traj) {
    const int L = traj.layers();
    if (L < 2 || traj.logit_p.size() != traj.logit_v.size())
        throw std::invalid_argument("detect_mac: need at least two layers");
    auto wins = [&](int i) { return traj.logit_v[static_cast<std::size_t>(i)] > traj.logit_p[static_cast<std::size_t>(i)]; };
    MacResult r;
    for (int i = 0; i < L; ++i) {
        if (!wins(i)) continue;
        // Persistence: the next layer must agree; the final layer stands alone.
        if (i + 1 == L || wins(i + 1)) {
            r.mac_layer = i + 1;
            r.depth_pct = static_cast<double>(i + 1) / static_cast<double>(L);
            break;
        }
    }
    r.final_gap = traj.logit_v.back() - traj.logit_p.back();
    r.final_winner = r.final_gap > 0.0 ? Role::visual : Role::prior;
    return r;
}

MacAggregate aggregate_mac(const std::vector<MacResult>& results, int layers) {
    if (results.empty()) throw std::invalid_argument("aggregate_mac: empty result list");
    if (layers < 1) throw std::invalid_argument("aggregate_mac: layer count must be positive");
    MacAggregate agg;
    agg.samples = results.size();
    double sum = 0.0;
    std::size_t wins = 0;
    for (const MacResult& r : results) {
        if (r.mac_layer) {
            sum += *r.mac_layer;
            ++agg.crossed;
        }
        if (r.final_winner == Role::visual) ++wins;
    }
    agg.win_rate = static_cast<double>(wins) / static_cast<double>(results.size());
    if (agg.crossed > 0) {
        agg.mean_mac = sum / static_cast<double>(agg.crossed);
        agg.depth_pct = *agg.mean_mac / layers;
    }
    return agg;
}

int round_percent(double fraction) { return static_cast<int>(std::floor(fraction * 100.0 + 0.5)); }

int visual_rank(std::span<const double> logits, const VariantSet& visual) {
    const double best = variant_max(logits, visual).value;
    int above = 0;
    for (double v : logits)
        if (v > best) ++above;
    return above + 1;
}

int final_rank(const HiddenStateCube& cube, const Model& model, const VariantSet& visual) {
    const Vector logits = readout_logits(model, cube.last_token(cube.layers()));
    return visual_rank(logits, visual);
}

void write_trajectory_csv(std::ostream& os, const std::vector<std::pair<std::uint64_t, Trajectory>>& rows) {
    os << kTrajectoryCsvHeader << '\n';
    for (const auto& [id, traj] : rows) {
        for (int i = 0; i < traj.layers(); ++i) {
            const auto k = static_cast<std::size_t>(i);
            os << id << ',' << i + 1 << ',' << fmt_num(traj.logit_v[k]) << ',' << fmt_num(traj.logit_p[k]) << ','
               << traj.v_variant[k] << ',' << traj.p_variant[k] << '\n';
        }
    }
}

}  // namespace arb
