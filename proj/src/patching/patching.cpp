#include "arb/patching.hpp"

#include <ostream>
#include <stdexcept>

namespace arb {

DonorStates capture_states(const Model& model, const InputSequence& input, int layer) {
    if (layer < 1 || layer > model.layer_count()) throw std::invalid_argument("capture_states: layer out of range");
    ForwardResult run = forward(model, input);
    return {layer, std::move(run.cube.states[static_cast<std::size_t>(layer)])};
}

PatchOutcome patch_run(const Model& model, const InputSequence& cf, const DonorStates& donor, TokenScope scope,
                       std::uint64_t sample_id, const ForwardResult* baseline) {
    if (donor.layer < 1 || donor.layer > model.layer_count())
        throw std::invalid_argument("patch_run: donor layer out of range");
    if (donor.states.rows() != cf.embeddings.rows() || donor.states.cols() != cf.embeddings.cols())
        throw std::invalid_argument("patch_run: donor shape does not match the input");
    const std::vector<int> tokens = scope_tokens(scope, cf.n_img, cf.length());
    Matrix rows(tokens.size(), donor.states.cols());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        auto src = donor.states.row(static_cast<std::size_t>(tokens[i]));
        std::copy(src.begin(), src.end(), rows.row(i).begin());
    }

    PatchOutcome out;
    out.sample_id = sample_id;
    out.scope = scope;
    out.layer = donor.layer;
    const std::vector<Hook> hooks{Hook::inject(donor.layer, TokenScope::explicit_set, std::move(rows), tokens)};
    if (baseline) {
        out.baseline_answer = baseline->answer;
        out.patched_answer = forward_from(model, baseline->cube, donor.layer, cf.n_img, hooks).answer;
    } else {
        out.baseline_answer = forward(model, cf).answer;
        out.patched_answer = forward(model, cf, hooks).answer;
    }
    out.changed = out.patched_answer != out.baseline_answer;
    const auto before = classify_answer(model, out.baseline_answer);
    const auto after = classify_answer(model, out.patched_answer);
    // Moves to a third token count as changes, not flips.
    out.flip_v_to_p = before == Role::visual && after == Role::prior;
    out.flip_p_to_v = before == Role::prior && after == Role::visual;
    return out;
}

std::optional<double> retention_ratio(std::size_t image_flips, std::size_t full_flips) {
    if (full_flips == 0) return std::nullopt;
    return static_cast<double>(image_flips) / static_cast<double>(full_flips);
}

PatchSummary summarize_patches(const Model& model, const std::vector<PatchOutcome>& outcomes) {
    if (outcomes.empty()) throw std::invalid_argument("summarize_patches: no outcomes");
    PatchSummary s;
    std::size_t cond_flips = 0;
    for (const PatchOutcome& o : outcomes) {
        ScopeCounts* c = nullptr;
        switch (o.scope) {
            case TokenScope::all: c = &s.full; break;
            case TokenScope::last: c = &s.last; break;
            case TokenScope::image_only: c = &s.image; break;
            case TokenScope::text_only: c = &s.text; break;
            case TokenScope::explicit_set: break;
        }
        if (o.flip_p_to_v) ++s.reverse_flips;
        if (!c) continue;
        ++c->samples;
        c->changed += o.changed;
        c->flips += o.flip_v_to_p;
        c->reverse_flips += o.flip_p_to_v;
        if (o.scope == TokenScope::all && classify_answer(model, o.baseline_answer) == Role::visual) {
            ++s.baseline_visual;
            cond_flips += o.flip_v_to_p;
        }
    }
    s.samples = s.full.samples;
    if (s.samples > 0) {
        s.chg_pct = 100.0 * static_cast<double>(s.full.changed) / static_cast<double>(s.samples);
        s.flip_pct = 100.0 * static_cast<double>(s.full.flips) / static_cast<double>(s.samples);
    }
    if (s.baseline_visual > 0)
        s.cond_pct = 100.0 * static_cast<double>(cond_flips) / static_cast<double>(s.baseline_visual);
    if (s.image.samples > 0) s.retention = retention_ratio(s.image.flips, s.full.flips);
    return s;
}

void write_patch_csv(std::ostream& os, const std::vector<PatchOutcome>& outcomes) {
    os << kPatchCsvHeader << '\n';
    for (const PatchOutcome& o : outcomes) {
        os << o.sample_id << ',' << to_string(o.scope) << ',' << o.layer << ',' << o.baseline_answer << ','
           << o.patched_answer << ',' << o.changed << ',' << o.flip_v_to_p << ',' << o.flip_p_to_v << '\n';
    }
}

}  // namespace arb
