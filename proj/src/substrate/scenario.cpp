#include <cmath>

#include "arb/substrate.hpp"

namespace arb {

ClosedForm closed_form_trajectory(const ScenarioSpec& scenario) {
    ClosedForm out;
    const std::size_t L = scenario.visual_schedule.size();
    const bool cf_visual = scenario.evidence_sign_cf > 0;
    double v = 0.0, p = 0.0;
    for (std::size_t l = 0; l < L; ++l) {
        const double a = scenario.visual_schedule[l];
        (cf_visual ? v : p) += a;
        p += scenario.prior_schedule[l];
        out.visual.push_back(v);
        out.prior.push_back(p);
    }
    for (std::size_t l = 0; l < L; ++l) {
        if (!(out.visual[l] > out.prior[l])) continue;
        if (l + 1 == L || out.visual[l + 1] > out.prior[l + 1]) {
            out.crossover = static_cast<int>(l) + 1;
            break;
        }
    }
    return out;
}

SamplePair generate_pair(const Model& model, std::uint64_t seed, std::uint64_t sample_id) {
    const ScenarioSpec& sc = model.scenario;
    const ModelConfig& cfg = model.config;
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const int T = cfg.seq_len();
    Rng rng(seed);
    Rng noise_rng = rng.split("noise");
    Rng prior_rng = rng.split("prior_noise");
    Rng cf_rng = rng.split("payload_cf");
    Rng std_rng = rng.split("payload_std");

    SamplePair pair;
    pair.sample_id = sample_id;
    pair.seed = seed;

    auto build = [&](double sign, Rng& payload_rng) {
        InputSequence seq;
        seq.n_img = cfg.n_img;
        seq.embeddings = Matrix(static_cast<std::size_t>(T), d);
        for (int i = 0; i < cfg.n_img; ++i) {
            const double magnitude = 1.0 + sc.payload_jitter * payload_rng.normal();
            const Vector e = image_embedding(model, sc.evidence_weights[static_cast<std::size_t>(i)], sign, magnitude);
            std::copy(e.begin(), e.end(), seq.embeddings.row(static_cast<std::size_t>(i)).begin());
            seq.ids.push_back(kImageTokenId);
        }
        for (int t = 0; t < cfg.n_txt; ++t) {
            const int id = model.question_ids[static_cast<std::size_t>(t)];
            const auto src = model.token_embed.row(static_cast<std::size_t>(id));
            std::copy(src.begin(), src.end(), seq.embeddings.row(static_cast<std::size_t>(cfg.n_img + t)).begin());
            seq.ids.push_back(id);
        }
        return seq;
    };
    pair.cf = build(sc.evidence_sign_cf, cf_rng);
    pair.standard = build(sc.evidence_sign_std, std_rng);

    // Shared jitter: both images see the same draws, so the pair differs only
    // in payload.
    const Vector& question = model.basis[Basis::question];
    for (int t = 0; t < T; ++t) {
        const auto row = static_cast<std::size_t>(t);
        const double q_shift = t >= cfg.n_img ? Circuit::question_scale * sc.prior_noise_sigma * prior_rng.normal() : 0.0;
        for (std::size_t k = 0; k < d; ++k) {
            const double shift = sc.noise_sigma * noise_rng.normal() + q_shift * question[k];
            pair.cf.embeddings(row, k) += shift;
            pair.standard.embeddings(row, k) += shift;
        }
    }

    const ClosedForm oracle = closed_form_trajectory(sc);
    pair.truth.crossover_layer = oracle.crossover;
    pair.truth.final_winner = oracle.visual.back() > oracle.prior.back() ? Role::visual : Role::prior;
    pair.truth.causal_shares = sc.evidence_weights;
    pair.truth.visual_pred = oracle.visual;
    pair.truth.prior_pred = oracle.prior;
    return pair;
}

}  // namespace arb
