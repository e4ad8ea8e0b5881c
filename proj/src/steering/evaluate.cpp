#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>
#include <string>
#include <unordered_set>

#include "arb/steering.hpp"

namespace arb {

TrainEvalSplit train_eval_split(std::vector<SamplePair> pairs, std::uint64_t seed, double train_fraction) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        throw std::invalid_argument("train_eval_split: fraction must be in (0, 1)");
    Rng rng(seed);
    rng.shuffle(pairs);
    const auto n_train = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(pairs.size()) + 0.5));
    TrainEvalSplit split;
    for (std::size_t i = 0; i < pairs.size(); ++i) (i < n_train ? split.train : split.eval).push_back(std::move(pairs[i]));
    return split;
}

SteerOutcome score_transitions(std::vector<Transition> transitions) {
    SteerOutcome out;
    if (transitions.empty()) return out;
    std::size_t base = 0, steered = 0;
    for (const Transition& t : transitions) {
        base += t.baseline_visual;
        steered += t.steered_visual;
        out.improved += !t.baseline_visual && t.steered_visual;
        out.degraded += t.baseline_visual && !t.steered_visual;
    }
    const double n = static_cast<double>(transitions.size());
    out.baseline_acc = 100.0 * static_cast<double>(base) / n;
    out.steered_acc = 100.0 * static_cast<double>(steered) / n;
    out.delta_acc = out.steered_acc - out.baseline_acc;
    out.transitions = std::move(transitions);
    return out;
}

std::vector<ForwardResult> steering_baseline(const Model& model, const std::vector<SamplePair>& eval) {
    std::vector<ForwardResult> runs;
    runs.reserve(eval.size());
    for (const SamplePair& p : eval) runs.push_back(forward(model, p.cf));
    return runs;
}

SteerOutcome evaluate_steering(const Model& model, const std::vector<SamplePair>& eval, const std::vector<Hook>& hooks,
                               const std::vector<std::uint64_t>& train_ids,
                               const std::vector<ForwardResult>* baseline) {
    const std::unordered_set<std::uint64_t> train(train_ids.begin(), train_ids.end());
    for (const SamplePair& p : eval)
        if (train.count(p.sample_id))
            throw std::invalid_argument("evaluate_steering: sample " + std::to_string(p.sample_id) +
                                        " appears in both train and eval splits");
    if (baseline && baseline->size() != eval.size())
        throw std::invalid_argument("evaluate_steering: baseline does not match the eval set");
    int first = model.layer_count() + 1;
    for (const Hook& h : hooks)
        if (h.active) first = std::min(first, h.layer);

    std::vector<Transition> transitions;
    transitions.reserve(eval.size());
    for (std::size_t i = 0; i < eval.size(); ++i) {
        const SamplePair& p = eval[i];
        Transition t;
        t.sample_id = p.sample_id;
        if (baseline) {
            const ForwardResult& base = (*baseline)[i];
            t.baseline_answer = base.answer;
            const bool resumable = first >= 1 && first <= model.layer_count();
            t.steered_answer = !resumable ? (hooks.empty() ? t.baseline_answer : forward(model, p.cf, hooks).answer)
                                          : forward_from(model, base.cube, first, p.cf.n_img, hooks).answer;
        } else {
            t.baseline_answer = forward(model, p.cf).answer;
            t.steered_answer = hooks.empty() ? t.baseline_answer : forward(model, p.cf, hooks).answer;
        }
        t.baseline_visual = model.scenario.visual_set.contains(t.baseline_answer);
        t.steered_visual = model.scenario.visual_set.contains(t.steered_answer);
        transitions.push_back(t);
    }
    return score_transitions(std::move(transitions));
}

void write_transition_csv(std::ostream& os, const std::vector<Transition>& transitions) {
    os << kTransitionCsvHeader << '\n';
    for (const Transition& t : transitions)
        os << t.sample_id << ',' << t.baseline_answer << ',' << t.steered_answer << ',' << t.baseline_visual << ','
           << t.steered_visual << '\n';
}

}  // namespace arb
