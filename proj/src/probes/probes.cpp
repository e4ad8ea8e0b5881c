#include "arb/probes.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace arb {

const char* to_string(DepthAnchor a) { return a == DepthAnchor::mean_mac ? "mean_mac" : "total_layers"; }

DepthPoint resolve_depth(double fraction, double reference, int layers) {
    if (!(fraction > 0.0) || fraction > 1.0) throw std::invalid_argument("depth fraction must be in (0, 1]");
    if (layers < 1) throw std::invalid_argument("resolve_depth: no layers");
    DepthPoint p;
    p.fraction = fraction;
    const int raw = static_cast<int>(std::floor(fraction * reference + 0.5));
    p.layer = std::clamp(raw, 1, layers);
    return p;
}

LatentDistance latent_distance(const HiddenStateCube& cf, const HiddenStateCube& standard, const DepthPoint& depth) {
    if (cf.layers() != standard.layers() || cf.tokens() != standard.tokens() || cf.dim() != standard.dim())
        throw std::invalid_argument("latent_distance: cube shapes differ");
    if (depth.layer < 0 || depth.layer > cf.layers()) throw std::invalid_argument("latent_distance: layer out of range");
    const auto a = cf.last_token(depth.layer);
    const auto b = standard.last_token(depth.layer);
    return {l2_distance(a, b), cosine_sim(a, b)};
}

std::vector<GridPoint> depth_grid(const HiddenStateCube& cf, const HiddenStateCube& standard, int k) {
    if (k < 2) throw std::invalid_argument("depth_grid: need k >= 2");
    std::vector<GridPoint> grid;
    const int L = cf.layers();
    for (int i = 1; i <= k; ++i) {
        const double f = static_cast<double>(i) / static_cast<double>(k);
        const DepthPoint dp = resolve_depth(f, L, L);
        const LatentDistance ld = latent_distance(cf, standard, dp);
        grid.push_back({f, dp.layer, ld.l2, ld.cosine});
    }
    return grid;
}

GroupStats group_compare(const std::vector<GroupSample>& samples) {
    Vector vis, pri;
    for (const GroupSample& s : samples) (s.success ? vis : pri).push_back(s.l2);
    GroupStats g;
    g.n_visual = vis.size();
    g.n_prior = pri.size();
    auto mean = [](const Vector& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); };
    if (!vis.empty()) g.mean_l2_visual = mean(vis);
    if (!pri.empty()) g.mean_l2_prior = mean(pri);
    if (vis.empty() || pri.empty()) {
        g.degenerate = true;
        return g;
    }
    if (*g.mean_l2_prior > 0.0) g.ratio = *g.mean_l2_visual / *g.mean_l2_prior;
    g.p_mw = mann_whitney_u(vis, pri).p;
    return g;
}

std::vector<int> stratified_folds(std::span<const int> labels, int folds, std::uint64_t seed) {
    if (folds < 2) throw std::invalid_argument("stratified_folds: need at least 2 folds");
    std::vector<int> assignment(labels.size(), -1);
    Rng rng(seed);
    for (int cls : {0, 1}) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == cls) idx.push_back(i);
        if (idx.size() < static_cast<std::size_t>(folds))
            throw std::invalid_argument("stratified_folds: degenerate fold (class smaller than fold count)");
        rng.shuffle(idx);
        for (std::size_t k = 0; k < idx.size(); ++k) assignment[idx[k]] = static_cast<int>(k % static_cast<std::size_t>(folds));
    }
    for (int a : assignment)
        if (a < 0) throw std::invalid_argument("stratified_folds: labels must be 0 or 1");
    return assignment;
}

ProbeResult probe_auc(const Matrix& states, std::span<const int> labels, std::span<const int> groups, int folds,
                      std::uint64_t seed, const LogisticOptions& opts) {
    if (states.rows() != labels.size() || (!groups.empty() && groups.size() != labels.size()))
        throw std::invalid_argument("probe_auc: row counts differ");
    const std::vector<int> fold_of = stratified_folds(labels, folds, seed);
    const std::size_t n = states.rows();
    const std::size_t d = states.cols();
    Vector oof(n, 0.0);

    for (int f = 0; f < folds; ++f) {
        std::vector<std::size_t> train, test;
        for (std::size_t i = 0; i < n; ++i) (fold_of[i] == f ? test : train).push_back(i);
        // Standardize with training-fold statistics; constant features drop out.
        Vector mean(d, 0.0), scale(d, 0.0);
        for (std::size_t i : train)
            for (std::size_t c = 0; c < d; ++c) mean[c] += states(i, c);
        for (double& m : mean) m /= static_cast<double>(train.size());
        for (std::size_t i : train)
            for (std::size_t c = 0; c < d; ++c) scale[c] += (states(i, c) - mean[c]) * (states(i, c) - mean[c]);
        for (double& s : scale) {
            s = std::sqrt(s / static_cast<double>(train.size()));
            s = s > 1e-9 ? 1.0 / s : 0.0;
        }
        auto standardize = [&](std::size_t i, std::span<double> out) {
            for (std::size_t c = 0; c < d; ++c) out[c] = (states(i, c) - mean[c]) * scale[c];
        };
        Matrix xtr(train.size(), d);
        std::vector<int> ytr;
        for (std::size_t r = 0; r < train.size(); ++r) {
            standardize(train[r], xtr.row(r));
            ytr.push_back(labels[train[r]]);
        }
        const LogisticModel model = logistic_fit(xtr, ytr, opts);
        Vector row(d);
        for (std::size_t i : test) {
            standardize(i, row);
            oof[i] = model.predict(row);
        }
    }

    ProbeResult res;
    res.auc = roc_auc(oof, labels);
    double s_sum = 0.0, f_sum = 0.0;
    std::size_t s_n = 0, f_n = 0;
    for (std::size_t i = 0; i < groups.size(); ++i) {
        if (groups[i] == 1) {
            s_sum += oof[i];
            ++s_n;
        } else if (groups[i] == 0) {
            f_sum += oof[i];
            ++f_n;
        }
    }
    if (s_n > 0) res.confidence_success = s_sum / static_cast<double>(s_n);
    if (f_n > 0) res.confidence_failure = f_sum / static_cast<double>(f_n);
    if (s_n > 0 && f_n > 0) res.confidence_delta = *res.confidence_success - *res.confidence_failure;
    return res;
}

CrossStageResult cross_stage(const std::vector<ModelRow>& rows, const std::vector<GroupSample>& samples, bool lenient) {
    CrossStageResult out;
    if (rows.size() >= 3) {
        Vector success;
        for (const ModelRow& r : rows) success.push_back(r.success_rate);
        const std::pair<const char*, double ModelRow::*> metrics[] = {
            {"l2_75", &ModelRow::l2_75}, {"final_gap", &ModelRow::final_gap}, {"visual_rank", &ModelRow::visual_rank}};
        for (const auto& [name, field] : metrics) {
            Vector col;
            for (const ModelRow& r : rows) col.push_back(r.*field);
            CrossStageRow row;
            row.metric = name;
            try {
                row.rho = spearman_rho(col, success);
                row.p = spearman_p(*row.rho, col.size());
            } catch (const std::domain_error& e) {
                if (!lenient) throw std::domain_error(std::string("cross_stage: constant column '") + name + "'");
                row.error = "constant column";
            }
            out.rows.push_back(row);
        }
    } else if (!lenient) {
        throw std::invalid_argument("cross_stage: need at least 3 model rows");
    }
    Vector scores;
    std::vector<int> labels;
    bool has0 = false, has1 = false;
    for (const GroupSample& s : samples) {
        scores.push_back(s.l2);
        labels.push_back(s.success ? 1 : 0);
        (s.success ? has1 : has0) = true;
    }
    if (has0 && has1) out.encoding_predictor_auc = roc_auc(scores, labels);
    return out;
}

}  // namespace arb
