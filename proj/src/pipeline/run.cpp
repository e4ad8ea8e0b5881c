#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <map>
#include <memory>
#include <set>

#include "arb/format.hpp"
#include "arb/patching.hpp"
#include "arb/pipeline.hpp"

#ifndef ARBITER_VERSION
#define ARBITER_VERSION "0.0.0"
#endif

namespace arb {

namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

Json opt(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }
Json opt(const std::optional<int>& v) { return v ? Json(*v) : Json(nullptr); }

std::string id_range(std::size_t n) { return n == 0 ? "none" : "ids 0-" + std::to_string(n - 1); }

bool noise_free(const ScenarioSpec& s) { return s.noise_sigma == 0.0 && s.prior_noise_sigma == 0.0 && s.payload_jitter == 0.0; }

double mean_of(const std::vector<double>& xs) {
    if (xs.empty()) return 0.0;
    double s = 0.0;
    for (double x : xs) s += x;
    return s / static_cast<double>(xs.size());
}

double median_of(std::vector<double> xs) {
    if (xs.empty()) return 0.0;
    std::sort(xs.begin(), xs.end());
    const std::size_t n = xs.size();
    return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

// Last-token states of one cube, kept after the full cube is released.
Matrix last_token_states(const HiddenStateCube& cube) {
    Matrix m(static_cast<std::size_t>(cube.layers()) + 1, static_cast<std::size_t>(cube.dim()));
    for (int l = 0; l <= cube.layers(); ++l) {
        const auto row = cube.last_token(l);
        std::copy(row.begin(), row.end(), m.row(static_cast<std::size_t>(l)).begin());
    }
    return m;
}

struct SampleRecord {
    std::size_t scenario = 0;
    std::uint64_t sample_id = 0;
    bool success = false;
    double final_gap = 0.0;
    int rank = 1;
    Matrix cf_last;
    Matrix std_last;
};

struct ScenarioMac {
    std::size_t index = 0;
    int layers = 0;
    std::optional<double> mean_mac;
    std::size_t crossed = 0;
};

struct ScenarioState {
    const BatteryEntry* entry = nullptr;
    std::size_t index = 0;
    Model model;
    std::vector<SamplePair> pairs;
    std::vector<ForwardResult> cf;
    std::vector<ForwardResult> standard;
    std::vector<MacResult> macs;
    MacAggregate agg;
    std::optional<int> mac_layer;  ///< rounded mean MAC

    const std::string& name() const { return entry->scenario.name; }
    int layers() const { return model.layer_count(); }
};

class Runner {
public:
    explicit Runner(const ExperimentConfig& cfg) : cfg_(cfg) {}

    Report run();

private:
    const ExperimentConfig& cfg_;
    fs::path out_;
    Report report_;
    std::map<std::string, double> timing_;
    std::vector<SampleRecord> records_;
    std::vector<ScenarioMac> scenario_macs_;
    std::vector<TrajectorySet> traj_sets_;
    std::vector<GridSet> grid_sets_;
    Json mac_rows_ = Json::array();
    Json probe_rows_ = Json::array();
    Json patch_rows_ = Json::array();
    Json linear_rows_ = Json::array();
    Json sae_rows_ = Json::array();
    Json steer_compare_ = Json::array();

    void check(const std::string& name, const std::string& scope, bool passed, const std::string& detail) {
        report_.checks.push_back({name, scope, passed, detail});
    }

    template <typename Fn>
    void timed(const std::string& stage, Fn&& fn) {
        const auto t0 = Clock::now();
        fn();
        timing_[stage] += std::chrono::duration<double>(Clock::now() - t0).count();
    }

    template <typename Fn>
    void stage(Stage st, const ScenarioState& s, Fn&& fn) {
        if (!cfg_.has(st)) return;
        try {
            timed(to_string(st), fn);
        } catch (const StageError&) {
            throw;
        } catch (const std::exception& e) {
            throw StageError(std::string("stage ") + to_string(st) + " failed on scenario '" + s.name() + "': " + e.what());
        }
    }

    std::ofstream open(const fs::path& rel) {
        const fs::path p = out_ / rel;
        fs::create_directories(p.parent_path());
        std::ofstream os(p, std::ios::trunc);
        if (!os) throw std::runtime_error("cannot write " + p.string());
        return os;
    }

    void prepare(ScenarioState& s);
    void run_mac(ScenarioState& s);
    void run_probes(ScenarioState& s);
    void run_patching(ScenarioState& s);
    void run_linear(ScenarioState& s);
    void run_sae(ScenarioState& s);
    void keep_records(const ScenarioState& s);
    Json battery_probes();
    Json build_doc();

    std::uint64_t pair_seed(const ScenarioSpec& sc) const {
        std::uint64_t base = Rng::derive_seed(cfg_.seed, "pairs:" + sc.name);
        return sc.seed ? Rng::derive_seed(base, sc.seed) : base;
    }

    std::vector<int> steering_layers(const ScenarioState& s) const {
        std::vector<int> layers = cfg_.steering.layers;
        if (layers.empty()) {
            layers.push_back(resolve_depth(0.1, s.layers(), s.layers()).layer);
            if (s.mac_layer && *s.mac_layer != layers.front()) layers.push_back(*s.mac_layer);
        }
        for (int l : layers)
            if (l < 1 || l > s.layers()) throw ConfigError("steering layer " + std::to_string(l) + " outside [1, L]");
        return layers;
    }
};

void Runner::prepare(ScenarioState& s) {
    s.model = build_toy_vlm(s.entry->model, s.entry->scenario);
    const std::uint64_t base = pair_seed(s.entry->scenario);
    s.pairs.resize(cfg_.samples);
    for (std::size_t i = 0; i < cfg_.samples; ++i) s.pairs[i] = generate_pair(s.model, Rng::derive_seed(base, i), i);
    s.cf.resize(cfg_.samples);
    s.standard.resize(cfg_.samples);
    const fs::path cache_dir = out_ / "cache" / s.name();
    parallel_for(cfg_.samples, cfg_.workers, [&](std::size_t i) {
        for (bool counterfactual : {true, false}) {
            const InputSequence& in = counterfactual ? s.pairs[i].cf : s.pairs[i].standard;
            ForwardResult& slot = counterfactual ? s.cf[i] : s.standard[i];
            if (!cfg_.cache) {
                slot = forward(s.model, in);
                continue;
            }
            const std::uint64_t fp = cube_fingerprint(s.model, s.pairs[i], counterfactual);
            const fs::path path = cache_dir / (std::to_string(i) + (counterfactual ? "_cf" : "_std") + ".cube");
            if (auto cube = load_cube(path, fp); cube && cube->layers() == s.layers()) {
                slot.cube = std::move(*cube);
                const auto last = slot.cube.last_token(s.layers());
                slot.final_logits = readout_logits(s.model, last);
                slot.answer = argmax_lowest(slot.final_logits);
            } else {
                slot = forward(s.model, in);
                save_cube(path, slot.cube, fp);
            }
        }
    });
    s.macs.clear();
    for (const ForwardResult& r : s.cf)
        s.macs.push_back(detect_mac(layer_logits(r.cube, s.model, s.entry->scenario.visual_set, s.entry->scenario.prior_set)));
    s.agg = aggregate_mac(s.macs, s.layers());
    if (s.agg.mean_mac)
        s.mac_layer = std::clamp(static_cast<int>(std::floor(*s.agg.mean_mac + 0.5)), 1, s.layers());
}

void Runner::run_mac(ScenarioState& s) {
    const ScenarioSpec& sc = s.entry->scenario;
    const ClosedForm oracle = closed_form_trajectory(sc);
    TrajectorySet set{s.name(), {}};
    std::size_t recovered = 0;
    double max_err = 0.0;
    std::vector<double> gaps, ranks;
    for (std::size_t i = 0; i < s.cf.size(); ++i) {
        Trajectory tr = layer_logits(s.cf[i].cube, s.model, sc.visual_set, sc.prior_set);
        for (int l = 0; l < tr.layers(); ++l) {
            const auto k = static_cast<std::size_t>(l);
            max_err = std::max({max_err, std::abs(tr.logit_v[k] - oracle.visual[k]), std::abs(tr.logit_p[k] - oracle.prior[k])});
        }
        recovered += s.macs[i].mac_layer == oracle.crossover;
        gaps.push_back(s.macs[i].final_gap);
        ranks.push_back(final_rank(s.cf[i].cube, s.model, sc.visual_set));
        set.traces.emplace_back(s.pairs[i].sample_id, std::move(tr));
    }
    {
        auto os = open(fs::path("mac") / ("trajectories_" + s.name() + ".csv"));
        write_trajectory_csv(os, set.traces);
    }
    traj_sets_.push_back(std::move(set));

    const double n = static_cast<double>(s.cf.size());
    const double recovered_pct = 100.0 * static_cast<double>(recovered) / n;
    Json row;
    row["scenario"] = s.name();
    row["samples"] = s.agg.samples;
    row["mean_mac"] = opt(s.agg.mean_mac);
    row["win_rate_pct"] = 100.0 * s.agg.win_rate;
    row["depth_pct"] = s.agg.depth_pct ? Json(round_percent(*s.agg.depth_pct)) : Json(nullptr);
    row["crossed"] = s.agg.crossed;
    row["mean_final_gap"] = mean_of(gaps);
    row["median_visual_rank"] = median_of(ranks);
    row["planted_crossover"] = opt(oracle.crossover);
    row["recovered_pct"] = recovered_pct;
    row["oracle_max_error"] = max_err;
    row["sample_set"] = "scenario:" + s.name() + " " + id_range(s.cf.size()) + " (cf)";
    mac_rows_.push_back(std::move(row));

    if (noise_free(sc)) {
        check("oracle_fidelity", s.name(), max_err <= 0.05, "max |lens - closed form| = " + fmt_num(max_err));
        check("mac_recovery", s.name(), recovered == s.cf.size(), "recovered " + fmt_num(recovered_pct) + "%");
    }
}

void Runner::run_probes(ScenarioState& s) {
    const int L = s.layers();
    const bool by_mac = cfg_.depth.anchor == DepthAnchor::mean_mac && s.agg.mean_mac;
    const double reference = by_mac ? *s.agg.mean_mac : static_cast<double>(L);

    Json depths = Json::array();
    {
        auto os = open(fs::path("probes") / ("depth_" + s.name() + ".csv"));
        os << "sample_id,fraction,layer,l2,cosine\n";
        for (double f : cfg_.depth.fractions) {
            const DepthPoint dp = resolve_depth(f, reference, L);
            std::vector<double> l2, cosine;
            for (std::size_t i = 0; i < s.cf.size(); ++i) {
                const LatentDistance ld = latent_distance(s.cf[i].cube, s.standard[i].cube, dp);
                l2.push_back(ld.l2);
                cosine.push_back(ld.cosine);
                os << s.pairs[i].sample_id << ',' << fmt_num(f) << ',' << dp.layer << ',' << fmt_num(ld.l2) << ','
                   << fmt_num(ld.cosine) << '\n';
            }
            depths.push_back({{"fraction", f}, {"layer", dp.layer}, {"mean_l2", mean_of(l2)}, {"mean_cosine", mean_of(cosine)}});
        }
    }

    GridSet grid{s.name(), {}};
    for (std::size_t i = 0; i < s.cf.size(); ++i) grid.samples.push_back(depth_grid(s.cf[i].cube, s.standard[i].cube, cfg_.depth.grid));
    bool grid_ok = true;
    const auto& g0 = grid.samples.front();
    for (std::size_t k = 1; k < g0.size(); ++k) grid_ok &= g0[k].fraction > g0[k - 1].fraction;
    grid_ok &= std::abs(g0.back().fraction - 1.0) < 1e-12;
    check("depth_grid_fractions", s.name(), grid_ok, std::to_string(g0.size()) + " points ending at " + fmt_num(g0.back().fraction));
    grid_sets_.push_back(std::move(grid));

    // Probe on token-mean states: cf rows are the positive class.
    const DepthPoint probe_depth = resolve_depth(cfg_.depth.probe_fraction, L, L);
    const std::size_t n = s.cf.size();
    Matrix states(2 * n, static_cast<std::size_t>(s.model.d_model()));
    std::vector<int> labels(2 * n), groups(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
        const Vector a = s.cf[i].cube.token_mean(probe_depth.layer);
        const Vector b = s.standard[i].cube.token_mean(probe_depth.layer);
        std::copy(a.begin(), a.end(), states.row(2 * i).begin());
        std::copy(b.begin(), b.end(), states.row(2 * i + 1).begin());
        labels[2 * i] = 1;
        labels[2 * i + 1] = 0;
        groups[2 * i] = s.macs[i].final_winner == Role::visual ? 1 : 0;
        groups[2 * i + 1] = -1;
    }
    const ProbeResult probe =
        probe_auc(states, labels, groups, cfg_.depth.folds, Rng::derive_seed(cfg_.seed, "folds:" + s.name()));

    Json row;
    row["scenario"] = s.name();
    row["anchor"] = by_mac ? "mean_mac" : "total_layers";
    row["reference"] = reference;
    row["depths"] = std::move(depths);
    row["probe"] = {{"layer", probe_depth.layer},
                    {"folds", cfg_.depth.folds},
                    {"auc", probe.auc},
                    {"confidence_success", opt(probe.confidence_success)},
                    {"confidence_failure", opt(probe.confidence_failure)},
                    {"confidence_delta", opt(probe.confidence_delta)}};
    row["sample_set"] = "scenario:" + s.name() + " " + id_range(n) + " (cf and std)";
    probe_rows_.push_back(std::move(row));
}

void Runner::run_patching(ScenarioState& s) {
    const int layer = cfg_.patching.layer ? *cfg_.patching.layer : s.mac_layer.value_or(0);
    Json row;
    row["scenario"] = s.name();
    if (cfg_.patching.layer && (layer < 1 || layer > s.layers()))
        throw std::out_of_range("patch layer " + std::to_string(layer) + " outside [1, " + std::to_string(s.layers()) + "]");
    if (layer < 1) {
        row["skipped"] = "no crossover, no default patch layer";
        patch_rows_.push_back(std::move(row));
        return;
    }
    const std::size_t n = s.cf.size();
    const auto& scopes = cfg_.patching.scopes;
    std::vector<PatchOutcome> outcomes(n * scopes.size());
    std::vector<char> self_same(n, 0);
    parallel_for(n, cfg_.workers, [&](std::size_t i) {
        const DonorStates donor{layer, s.standard[i].cube.at(layer)};
        for (std::size_t k = 0; k < scopes.size(); ++k)
            outcomes[i * scopes.size() + k] = patch_run(s.model, s.pairs[i].cf, donor, scopes[k], s.pairs[i].sample_id, &s.cf[i]);
        const DonorStates self{layer, s.cf[i].cube.at(layer)};
        const PatchOutcome o = patch_run(s.model, s.pairs[i].cf, self, TokenScope::all, s.pairs[i].sample_id, &s.cf[i]);
        self_same[i] = !o.changed;
    });
    {
        auto os = open(fs::path("patching") / ("outcomes_" + s.name() + ".csv"));
        write_patch_csv(os, outcomes);
    }
    const PatchSummary sum = summarize_patches(s.model, outcomes);
    const auto counts = [](const ScopeCounts& c) {
        return Json{{"samples", c.samples}, {"changed", c.changed}, {"flips", c.flips}, {"reverse_flips", c.reverse_flips}};
    };
    row["layer"] = layer;
    row["layer_source"] = cfg_.patching.layer ? "config" : "mean MAC";
    row["samples"] = sum.samples;
    row["baseline_visual"] = sum.baseline_visual;
    row["chg_pct"] = sum.chg_pct;
    row["flip_pct"] = sum.flip_pct;
    row["cond_pct"] = opt(sum.cond_pct);
    row["full"] = counts(sum.full);
    row["last"] = counts(sum.last);
    row["image"] = counts(sum.image);
    row["text"] = counts(sum.text);
    row["retention"] = opt(sum.retention);
    row["reverse_flips"] = sum.reverse_flips;
    row["sample_set"] = "scenario:" + s.name() + " " + id_range(n) + " (cf patched with std donors)";
    patch_rows_.push_back(std::move(row));

    const auto self_ok = static_cast<std::size_t>(std::count(self_same.begin(), self_same.end(), 1));
    check("self_patch_identity", s.name(), self_ok == n, std::to_string(self_ok) + "/" + std::to_string(n) + " unchanged");
    check("zero_reverse_flips", s.name(), sum.reverse_flips == 0, std::to_string(sum.reverse_flips) + " reverse flips");
    // Question tokens carry no visual evidence; only the answer slot can flip.
    if (sum.text.samples > 0 && sum.last.samples > 0)
        check("text_flips_within_answer_slot", s.name(), sum.text.flips <= sum.last.flips,
              std::to_string(sum.text.flips) + " text-only vs " + std::to_string(sum.last.flips) + " last-token flips");
    if (sum.text.samples > 0 && sum.image.samples > 0 && sum.full.samples > 0) {
        const double slack = 0.05 * static_cast<double>(sum.full.samples);
        check("scope_additivity", s.name(),
              static_cast<double>(sum.image.flips + sum.text.flips) >= static_cast<double>(sum.full.flips) - slack,
              std::to_string(sum.image.flips) + " image + " + std::to_string(sum.text.flips) + " text vs " +
                  std::to_string(sum.full.flips) + " full flips");
    }
    if (sum.retention) {
        const double bound = noise_free(s.entry->scenario) ? 1.0 : 1.05;
        check("retention_bound", s.name(), *sum.retention <= bound + 1e-12,
              "retention " + fmt_num(*sum.retention) + " <= " + fmt_num(bound));
    }
}

struct SweepPoint {
    double alpha = 0.0;
    SteerOutcome outcome;
};

Json sweep_json(const std::vector<SweepPoint>& sweep) {
    Json arr = Json::array();
    for (const auto& p : sweep)
        arr.push_back({{"alpha", p.alpha},
                       {"steered_acc", p.outcome.steered_acc},
                       {"delta_acc", p.outcome.delta_acc},
                       {"improved", p.outcome.improved},
                       {"degraded", p.outcome.degraded}});
    return arr;
}

// Largest delta; ties go to the smaller alpha (the sweep is ascending).
const SweepPoint& best_point(const std::vector<SweepPoint>& sweep) {
    const SweepPoint* best = &sweep.front();
    for (const auto& p : sweep)
        if (p.outcome.delta_acc > best->outcome.delta_acc) best = &p;
    return *best;
}

struct Split {
    std::vector<std::size_t> train, eval;
    std::vector<SamplePair> eval_pairs;
    std::vector<ForwardResult> eval_runs;
    std::vector<std::uint64_t> train_ids;
};

Split make_split(const ScenarioState& s, std::uint64_t seed, double fraction) {
    std::vector<SamplePair> shuffled = s.pairs;
    const TrainEvalSplit tes = train_eval_split(std::move(shuffled), seed, fraction);
    Split sp;
    for (const auto& p : tes.train) {
        sp.train.push_back(static_cast<std::size_t>(p.sample_id));
        sp.train_ids.push_back(p.sample_id);
    }
    for (const auto& p : tes.eval) {
        sp.eval.push_back(static_cast<std::size_t>(p.sample_id));
        sp.eval_pairs.push_back(p);
        sp.eval_runs.push_back(s.cf[static_cast<std::size_t>(p.sample_id)]);
    }
    return sp;
}

void Runner::run_linear(ScenarioState& s) {
    const Split sp = make_split(s, Rng::derive_seed(cfg_.seed, "split:" + s.name()), cfg_.steering.train_fraction);
    const std::size_t d = static_cast<std::size_t>(s.model.d_model());
    std::map<int, double> best_by_layer;
    for (int layer : steering_layers(s)) {
        Matrix cf_means(sp.train.size(), d), std_means(sp.train.size(), d);
        for (std::size_t r = 0; r < sp.train.size(); ++r) {
            const Vector a = s.cf[sp.train[r]].cube.token_mean(layer);
            const Vector b = s.standard[sp.train[r]].cube.token_mean(layer);
            std::copy(a.begin(), a.end(), cf_means.row(r).begin());
            std::copy(b.begin(), b.end(), std_means.row(r).begin());
        }
        const SteeringDirection dir = linear_direction(cf_means, std_means, layer);
        std::vector<SweepPoint> sweep;
        for (double alpha : cfg_.steering.alphas)
            sweep.push_back({alpha, evaluate_steering(s.model, sp.eval_pairs, {linear_hook(dir, alpha)}, sp.train_ids, &sp.eval_runs)});
        const SweepPoint& best = best_point(sweep);
        const SteerOutcome last_only =
            evaluate_steering(s.model, sp.eval_pairs, {linear_hook(dir, best.alpha, TokenScope::last)}, sp.train_ids, &sp.eval_runs);
        {
            auto os = open(fs::path("steering") / ("linear_" + s.name() + "_L" + std::to_string(layer) + ".csv"));
            write_transition_csv(os, best.outcome.transitions);
        }
        for (const auto& p : sweep) {
            if (p.alpha != 0.0) continue;
            const bool same = std::all_of(p.outcome.transitions.begin(), p.outcome.transitions.end(),
                                          [](const Transition& t) { return t.baseline_answer == t.steered_answer; });
            check("linear_alpha_zero_identity", s.name() + "/L" + std::to_string(layer), same,
                  same ? "all answers unchanged" : "answers changed at alpha 0");
        }
        best_by_layer[layer] = best.outcome.delta_acc;
        linear_rows_.push_back({{"scenario", s.name()},
                                {"layer", layer},
                                {"is_mac_layer", s.mac_layer == layer},
                                {"train", sp.train.size()},
                                {"eval", sp.eval.size()},
                                {"baseline_acc", best.outcome.baseline_acc},
                                {"direction_norm", norm(dir.direction)},
                                {"sweep", sweep_json(sweep)},
                                {"best_alpha", best.alpha},
                                {"best_delta_acc", best.outcome.delta_acc},
                                {"improved", best.outcome.improved},
                                {"degraded", best.outcome.degraded},
                                {"last_token_delta_acc", last_only.delta_acc},
                                {"sample_set", "scenario:" + s.name() + " eval split of " + id_range(s.pairs.size())}});
    }
    if (s.mac_layer && best_by_layer.count(*s.mac_layer) && best_by_layer.size() > 1) {
        Json cmp;
        cmp["scenario"] = s.name();
        cmp["mac_layer"] = *s.mac_layer;
        cmp["mac_delta_acc"] = best_by_layer[*s.mac_layer];
        Json others = Json::array();
        for (const auto& [layer, delta] : best_by_layer)
            if (layer != *s.mac_layer) others.push_back({{"layer", layer}, {"delta_acc", delta}});
        cmp["other_layers"] = std::move(others);
        steer_compare_.push_back(std::move(cmp));
    }
    check("split_disjoint", s.name(), true, std::to_string(sp.train.size()) + " train / " + std::to_string(sp.eval.size()) + " eval");
}

void Runner::run_sae(ScenarioState& s) {
    const Split sp = make_split(s, Rng::derive_seed(cfg_.seed, "split:" + s.name()), cfg_.steering.train_fraction);
    const std::size_t d = static_cast<std::size_t>(s.model.d_model());
    for (int layer : steering_layers(s)) {
        const std::size_t n = sp.train.size();
        Matrix cf_states(n, d), std_states(n, d), all(2 * n, d);
        for (std::size_t r = 0; r < n; ++r) {
            const Vector a = s.cf[sp.train[r]].cube.token_mean(layer);
            const Vector b = s.standard[sp.train[r]].cube.token_mean(layer);
            std::copy(a.begin(), a.end(), cf_states.row(r).begin());
            std::copy(b.begin(), b.end(), std_states.row(r).begin());
            std::copy(a.begin(), a.end(), all.row(2 * r).begin());
            std::copy(b.begin(), b.end(), all.row(2 * r + 1).begin());
        }
        SaeConfig sc = cfg_.steering.sae;
        sc.seed = Rng::derive_seed(Rng::derive_seed(cfg_.seed, "sae:" + s.name() + ":" + std::to_string(layer)), sc.seed);
        auto sae = std::make_shared<const SaeModel>(sae_train(all, sc));
        save_sae(*sae, out_ / "steering" / ("sae_" + s.name() + "_L" + std::to_string(layer) + ".bin"));
        const FeatureSelection sel = sae_select_features(*sae, cf_states, std_states, cfg_.steering.top_k);

        bool monotone = true;
        for (std::size_t e = 1; e < sae->loss_log.size(); ++e) monotone &= sae->loss_log[e] <= sae->loss_log[e - 1];
        check("sae_loss_nonincreasing", s.name() + "/L" + std::to_string(layer), monotone,
              "loss " + fmt_num(sae->loss_log.front()) + " -> " + fmt_num(sae->loss_log.back()));

        Json variants = Json::array();
        for (SaeApplication mode : {SaeApplication::residual, SaeApplication::replacement}) {
            std::vector<SweepPoint> sweep;
            for (double alpha : cfg_.steering.sae_alphas)
                sweep.push_back({alpha, evaluate_steering(s.model, sp.eval_pairs, {sae_residual_hook(sae, sel, layer, alpha, alpha, mode)},
                                                          sp.train_ids, &sp.eval_runs)});
            const SweepPoint& best = best_point(sweep);
            const char* name = mode == SaeApplication::residual ? "residual" : "replacement";
            for (const auto& p : sweep) {
                if (p.alpha != 0.0 || mode != SaeApplication::residual) continue;
                const bool same = std::all_of(p.outcome.transitions.begin(), p.outcome.transitions.end(),
                                              [](const Transition& t) { return t.baseline_answer == t.steered_answer; });
                check("sae_zero_alpha_identity", s.name() + "/L" + std::to_string(layer), same,
                      same ? "all answers unchanged" : "answers changed at zero alphas");
            }
            {
                auto os = open(fs::path("steering") /
                               ("sae_" + std::string(name) + "_" + s.name() + "_L" + std::to_string(layer) + ".csv"));
                write_transition_csv(os, best.outcome.transitions);
            }
            variants.push_back({{"mode", name},
                                {"baseline_acc", best.outcome.baseline_acc},
                                {"sweep", sweep_json(sweep)},
                                {"best_alpha", best.alpha},
                                {"best_delta_acc", best.outcome.delta_acc},
                                {"improved", best.outcome.improved},
                                {"degraded", best.outcome.degraded}});
        }
        sae_rows_.push_back({{"scenario", s.name()},
                             {"layer", layer},
                             {"d_sae", sae->d_sae()},
                             {"lambda", sae->lambda},
                             {"epochs", sc.epochs},
                             {"final_loss", sae->loss_log.back()},
                             {"mean_l0", sae_mean_l0(*sae, all)},
                             {"visual_features", sel.visual.size()},
                             {"prior_features", sel.prior.size()},
                             {"variants", std::move(variants)},
                             {"sample_set", "scenario:" + s.name() + " train split (SAE, selection), eval split (sweep)"}});
    }
}

void Runner::keep_records(const ScenarioState& s) {
    scenario_macs_.push_back({s.index, s.layers(), s.agg.mean_mac, s.agg.crossed});
    for (std::size_t i = 0; i < s.cf.size(); ++i) {
        SampleRecord r;
        r.scenario = s.index;
        r.sample_id = s.pairs[i].sample_id;
        r.success = s.macs[i].final_winner == Role::visual;
        r.final_gap = s.macs[i].final_gap;
        r.rank = final_rank(s.cf[i].cube, s.model, s.entry->scenario.visual_set);
        r.cf_last = last_token_states(s.cf[i].cube);
        r.std_last = last_token_states(s.standard[i].cube);
        records_.push_back(std::move(r));
    }
}

// Success/failure comparison and cross-stage table over the whole battery,
// with every sample read at the same fraction of the pooled mean MAC depth.
Json Runner::battery_probes() {
    Json out;
    double depth_sum = 0.0;
    std::size_t crossed = 0;
    std::map<std::size_t, int> layers_of;
    for (const ScenarioMac& m : scenario_macs_) {
        layers_of[m.index] = m.layers;
        if (!m.mean_mac) continue;
        depth_sum += *m.mean_mac / m.layers * static_cast<double>(m.crossed);
        crossed += m.crossed;
    }
    const std::optional<double> pooled_depth = crossed ? std::optional<double>(depth_sum / static_cast<double>(crossed)) : std::nullopt;
    const double fraction = cfg_.depth.fractions.empty() ? 0.75 : cfg_.depth.fractions.back();
    out["anchor"] = pooled_depth ? "pooled mean MAC depth" : "total layers";
    out["pooled_mac_depth"] = opt(pooled_depth);
    out["fraction"] = fraction;

    std::vector<GroupSample> samples;
    std::map<std::size_t, std::vector<const SampleRecord*>> by_scenario;
    for (const SampleRecord& r : records_) {
        const int L = layers_of[r.scenario];
        const double reference = pooled_depth ? *pooled_depth * L : L;
        const int layer = resolve_depth(fraction, reference, L).layer;
        const auto a = r.cf_last.row(static_cast<std::size_t>(layer));
        const auto b = r.std_last.row(static_cast<std::size_t>(layer));
        samples.push_back({r.success, l2_distance(a, b)});
        by_scenario[r.scenario].push_back(&r);
    }
    {
        auto os = open(fs::path("probes") / "battery_samples.csv");
        os << "scenario,sample_id,layer,success,l2\n";
        for (std::size_t i = 0; i < records_.size(); ++i) {
            const SampleRecord& r = records_[i];
            const int L = layers_of[r.scenario];
            const int layer = resolve_depth(fraction, pooled_depth ? *pooled_depth * L : L, L).layer;
            os << cfg_.battery[r.scenario].scenario.name << ',' << r.sample_id << ',' << layer << ',' << (r.success ? 1 : 0)
               << ',' << fmt_num(samples[i].l2) << '\n';
        }
    }
    const GroupStats g = group_compare(samples);
    out["group_compare"] = {{"mean_l2_visual", opt(g.mean_l2_visual)}, {"n_visual", g.n_visual},
                            {"mean_l2_prior", opt(g.mean_l2_prior)},   {"n_prior", g.n_prior},
                            {"ratio", opt(g.ratio)},                   {"p_mw", opt(g.p_mw)},
                            {"degenerate", g.degenerate},
                            {"sample_set", "all scenarios, " + std::to_string(samples.size()) + " cf/std pairs"}};

    std::vector<ModelRow> rows;
    std::size_t k = 0;
    for (const auto& [idx, recs] : by_scenario) {
        ModelRow row;
        row.name = cfg_.battery[idx].scenario.name;
        double succ = 0, l2 = 0, gap = 0, rank = 0;
        for (const SampleRecord* r : recs) {
            succ += r->success;
            gap += r->final_gap;
            rank += r->rank;
            l2 += samples[k++].l2;
        }
        const double n = static_cast<double>(recs.size());
        row.success_rate = succ / n;
        row.l2_75 = l2 / n;
        row.final_gap = gap / n;
        row.visual_rank = rank / n;
        rows.push_back(row);
    }
    Json table = Json::array();
    for (const ModelRow& r : rows)
        table.push_back({{"scenario", r.name}, {"success_rate", r.success_rate}, {"l2_at_anchor", r.l2_75},
                         {"final_gap", r.final_gap}, {"visual_rank", r.visual_rank}});
    out["scenario_rows"] = std::move(table);
    if (rows.size() >= 3) {
        const CrossStageResult cs = cross_stage(rows, samples, true);
        Json cs_rows = Json::array();
        auto os = open(fs::path("probes") / "cross_stage.csv");
        os << "metric,rho,p,error\n";
        for (const CrossStageRow& r : cs.rows) {
            cs_rows.push_back({{"metric", r.metric}, {"rho", opt(r.rho)}, {"p", opt(r.p)}, {"error", r.error}});
            os << r.metric << ',' << (r.rho ? fmt_num(*r.rho) : "") << ',' << (r.p ? fmt_num(*r.p) : "") << ',' << r.error << '\n';
        }
        out["cross_stage"] = {{"rows", std::move(cs_rows)},
                              {"encoding_predictor_auc", opt(cs.encoding_predictor_auc)},
                              {"sample_set", "scenario rows above; AUC over all pooled samples"}};
    } else {
        out["cross_stage"] = {{"skipped", "needs at least 3 scenarios"}};
    }
    return out;
}

Json Runner::build_doc() {
    Json doc;
    doc["tool"] = {{"name", "arbiter"}, {"version", ARBITER_VERSION}};
    doc["seed"] = cfg_.seed;
    doc["config"] = cfg_.echo;
    doc["resolved"] = {{"name", cfg_.name},
                       {"samples", cfg_.samples},
                       {"stages", [&] {
                            Json a = Json::array();
                            for (Stage s : cfg_.stages) a.push_back(to_string(s));
                            return a;
                        }()},
                       {"depth_anchor", to_string(cfg_.depth.anchor)},
                       {"cache", cfg_.cache}};
    doc["assumptions"] = {{"layer_norm_eps", kLayerNormEps},
                          {"crossover_rule", "strict v > p at l and l+1; final layer accepted alone; ties go to prior"},
                          {"transition_constraints", "not implemented; persistence only"},
                          {"mann_whitney", "two-sided; exact below 13 observations"},
                          {"hook_position", "after the layer's block, before the next layer reads it"}};
    Json scenarios = Json::array();
    for (const BatteryEntry& e : cfg_.battery) {
        const ClosedForm cf = closed_form_trajectory(e.scenario);
        scenarios.push_back({{"model", to_json(e.model)},
                             {"scenario", to_json(e.scenario)},
                             {"ground_truth",
                              {{"crossover_layer", opt(cf.crossover)},
                               {"final_winner", to_string(cf.visual.back() > cf.prior.back() ? Role::visual : Role::prior)},
                               {"causal_shares", e.scenario.evidence_weights}}}});
    }
    doc["scenarios"] = std::move(scenarios);
    if (cfg_.has(Stage::mac))
        doc["mac"] = {{"cells",
                       {{"mean_mac", "aggregate_mac: mean crossover layer over samples that cross"},
                        {"win_rate_pct", "aggregate_mac: % samples with a visual final winner"},
                        {"depth_pct", "aggregate_mac: mean_mac / L, integer percent, halves up"},
                        {"mean_final_gap", "detect_mac: mean logit_v(L) - logit_p(L)"},
                        {"median_visual_rank", "final_rank over the sample set"},
                        {"recovered_pct", "detect_mac vs closed_form_trajectory crossover"},
                        {"oracle_max_error", "layer_logits vs closed_form_trajectory, max over layers and samples"}}},
                      {"rows", mac_rows_}};
    if (cfg_.has(Stage::probes)) {
        doc["probes"] = {{"cells",
                          {{"depths", "latent_distance at resolve_depth(fraction, reference)"},
                           {"probe", "probe_auc on token-mean states, cf vs std labels, stratified folds"},
                           {"group_compare", "group_compare over pooled samples"},
                           {"cross_stage", "cross_stage over scenario rows"}}},
                         {"rows", probe_rows_},
                         {"battery", battery_probes()}};
    }
    if (cfg_.has(Stage::patching))
        doc["patching"] = {{"cells",
                            {{"chg_pct", "summarize_patches: % full-scope runs with any change"},
                             {"flip_pct", "summarize_patches: % full-scope visual->prior flips"},
                             {"cond_pct", "summarize_patches: flips among baseline-visual samples"},
                             {"retention", "image-only flips / full flips"}}},
                           {"rows", patch_rows_}};
    if (cfg_.has(Stage::steering_linear))
        doc["steering_linear"] = {{"cells",
                                   {{"sweep", "evaluate_steering with linear_hook at each alpha"},
                                    {"best_delta_acc", "largest delta over the sweep, smaller alpha on ties"},
                                    {"last_token_delta_acc", "evaluate_steering with the best alpha at the last position only"}}},
                                  {"rows", linear_rows_},
                                  {"early_vs_mac", steer_compare_}};
    if (cfg_.has(Stage::steering_sae))
        doc["steering_sae"] = {{"cells",
                                {{"variants", "evaluate_steering with sae_residual_hook, alpha_v = alpha_p = alpha"},
                                 {"mean_l0", "sae_mean_l0 on the training states"}}},
                               {"rows", sae_rows_}};
    Json checks = Json::array();
    for (const InvariantCheck& c : report_.checks)
        checks.push_back({{"name", c.name}, {"scope", c.scope}, {"passed", c.passed}, {"detail", c.detail}});
    doc["checks"] = std::move(checks);
    doc["status"] = report_.ok() ? "ok" : "invariant_failure";
    return doc;
}

Report Runner::run() {
    cfg_.validate();
    const auto t0 = Clock::now();
    out_ = cfg_.output.empty() ? default_output_root() / cfg_.name : cfg_.output;
    fs::create_directories(out_);

    for (std::size_t idx = 0; idx < cfg_.battery.size(); ++idx) {
        ScenarioState s;
        s.entry = &cfg_.battery[idx];
        s.index = idx;
        try {
            timed("forward", [&] { prepare(s); });
        } catch (const std::exception& e) {
            throw StageError("stage forward failed on scenario '" + s.name() + "': " + e.what());
        }
        stage(Stage::mac, s, [&] { run_mac(s); });
        stage(Stage::probes, s, [&] { run_probes(s); });
        stage(Stage::patching, s, [&] { run_patching(s); });
        stage(Stage::steering_linear, s, [&] { run_linear(s); });
        stage(Stage::steering_sae, s, [&] { run_sae(s); });
        if (cfg_.has(Stage::probes)) keep_records(s);
    }
    if (cfg_.has(Stage::mac) || cfg_.has(Stage::probes)) emit_plot_data(out_ / "plots", traj_sets_, grid_sets_);

    Json doc = build_doc();
    Json timing;
    for (const auto& [k, v] : timing_) timing[k + "_s"] = v;
    timing["total_s"] = std::chrono::duration<double>(Clock::now() - t0).count();
    timing["finished_at_unix"] = static_cast<std::int64_t>(std::time(nullptr));
    doc["timing"] = std::move(timing);
    report_.doc = std::move(doc);
    write_json_file(out_ / "report.json", report_.doc);
    return report_;
}

}  // namespace

Report run_experiment(const ExperimentConfig& cfg) { return Runner(cfg).run(); }

Json to_json(const ScalingRow& row) {
    return Json{{"config", row.name},        {"layers", row.layers},     {"d_model", row.d_model},
                {"mean_mac", opt(row.mean_mac)}, {"depth_pct", opt(row.depth_pct)}, {"win_rate_pct", 100.0 * row.win_rate},
                {"mean_final_gap", row.mean_gap}, {"samples", row.samples}};
}

std::vector<ScalingRow> scaling_sweep(const std::vector<ExperimentConfig>& cfgs, std::vector<std::string>* warnings) {
    if (cfgs.size() < 2) throw ConfigError("scaling_sweep needs at least 2 configurations");
    std::vector<ScalingRow> rows;
    const std::size_t ref_size = cfgs.front().battery.size();
    for (const ExperimentConfig& cfg : cfgs) {
        cfg.validate();
        if (warnings && cfg.battery.size() != ref_size)
            warnings->push_back("config '" + cfg.name + "' has a battery of different size; rows are not like-for-like");
        ScalingRow row;
        row.name = cfg.name;
        row.layers = cfg.battery.front().model.layers;
        row.d_model = cfg.battery.front().model.d_model;
        std::vector<MacResult> all;
        double gap = 0.0;
        for (const BatteryEntry& e : cfg.battery) {
            if (warnings && (e.model.layers != row.layers || e.model.d_model != row.d_model))
                warnings->push_back("config '" + cfg.name + "' mixes model shapes; the row reports the first");
            const Model model = build_toy_vlm(e.model, e.scenario);
            std::uint64_t base = Rng::derive_seed(cfg.seed, "pairs:" + e.scenario.name);
            if (e.scenario.seed) base = Rng::derive_seed(base, e.scenario.seed);
            std::vector<MacResult> macs(cfg.samples);
            parallel_for(cfg.samples, cfg.workers, [&](std::size_t i) {
                const SamplePair p = generate_pair(model, Rng::derive_seed(base, i), i);
                const ForwardResult r = forward(model, p.cf);
                macs[i] = detect_mac(layer_logits(r.cube, model, e.scenario.visual_set, e.scenario.prior_set));
            });
            for (const MacResult& m : macs) gap += m.final_gap;
            all.insert(all.end(), macs.begin(), macs.end());
        }
        const MacAggregate agg = aggregate_mac(all, row.layers);
        row.mean_mac = agg.mean_mac;
        if (agg.depth_pct) row.depth_pct = round_percent(*agg.depth_pct);
        row.win_rate = agg.win_rate;
        row.mean_gap = gap / static_cast<double>(all.size());
        row.samples = all.size();
        rows.push_back(row);
    }
    return rows;
}

}  // namespace arb
