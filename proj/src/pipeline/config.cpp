#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>

#include "arb/pipeline.hpp"

namespace arb {

namespace fs = std::filesystem;

const char* to_string(Stage s) {
    switch (s) {
        case Stage::mac: return "mac";
        case Stage::probes: return "probes";
        case Stage::patching: return "patching";
        case Stage::steering_linear: return "steering_linear";
        case Stage::steering_sae: return "steering_sae";
    }
    return "?";
}

Stage stage_from_string(const std::string& s) {
    for (Stage st : {Stage::mac, Stage::probes, Stage::patching, Stage::steering_linear, Stage::steering_sae})
        if (s == to_string(st)) return st;
    throw ConfigError("unknown stage '" + s + "'");
}

bool ExperimentConfig::has(Stage s) const { return std::find(stages.begin(), stages.end(), s) != stages.end(); }

void ExperimentConfig::validate() const {
    if (battery.empty()) throw ConfigError("battery is empty");
    if (stages.empty()) throw ConfigError("no stages selected");
    if (samples < 2) throw ConfigError("samples must be >= 2");
    std::set<std::string> names;
    for (const BatteryEntry& e : battery) {
        try {
            e.model.validate();
            e.scenario.validate(e.model);
        } catch (const std::invalid_argument& ex) {
            throw ConfigError(ex.what());
        }
        if (!names.insert(e.scenario.name).second)
            throw ConfigError("duplicate scenario name '" + e.scenario.name + "'");
    }
    for (double f : depth.fractions)
        if (!(f > 0.0 && f <= 1.0)) throw ConfigError("depth fractions must lie in (0, 1]");
    if (!(depth.probe_fraction > 0.0 && depth.probe_fraction <= 1.0))
        throw ConfigError("probe_fraction must lie in (0, 1]");
    if (depth.grid < 2) throw ConfigError("depth grid needs k >= 2");
    if (depth.folds < 2) throw ConfigError("probe folds must be >= 2");
    if (!(steering.train_fraction > 0.0 && steering.train_fraction < 1.0))
        throw ConfigError("train_fraction must lie in (0, 1)");
    for (double a : steering.alphas)
        if (!std::isfinite(a)) throw ConfigError("steering alphas must be finite");
    for (double a : steering.sae_alphas)
        if (!(a >= 0.0)) throw ConfigError("SAE alphas must be >= 0");
    if (steering.sae.expansion < 1 || steering.sae.epochs < 0 || !(steering.sae.step > 0.0) ||
        !(steering.sae.lambda >= 0.0))
        throw ConfigError("invalid SAE settings");
}

namespace {

template <typename T>
T get_or(const Json& j, const char* key, T fallback) {
    if (!j.contains(key) || j.at(key).is_null()) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const Json::exception& e) {
        throw ConfigError(std::string("field '") + key + "': " + e.what());
    }
}

void check_keys(const Json& j, const std::set<std::string>& allowed, const std::string& what) {
    if (!j.is_object()) throw ConfigError(what + " must be an object");
    for (const auto& [key, value] : j.items())
        if (!allowed.count(key)) throw ConfigError("unknown field '" + key + "' in " + what);
}

Json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open " + path.string());
    try {
        return Json::parse(in, nullptr, true, true);
    } catch (const Json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

fs::path resolve(const fs::path& base, const std::string& ref) {
    fs::path p(ref);
    return p.is_relative() && !base.empty() ? base / p : p;
}

// An object or a path to a file holding one.
Json object_or_file(const Json& j, const fs::path& base, const std::string& what) {
    if (j.is_string()) return read_json(resolve(base, j.get<std::string>()));
    if (!j.is_object()) throw ConfigError(what + " must be an object or a file path");
    return j;
}

VariantSet variant_set_from_json(const Json& j, Role role) {
    VariantSet set{role, {}};
    if (!j.is_array() || j.size() != kVariantCount) throw ConfigError("variant sets need exactly 6 ids");
    for (std::size_t i = 0; i < kVariantCount; ++i) set.ids[i] = j[i].get<int>();
    return set;
}

}  // namespace

ModelConfig model_config_from_json(const Json& j, ModelConfig cfg) {
    check_keys(j, {"layers", "d_model", "vocab", "n_img", "n_txt", "seed"}, "model");
    cfg.layers = get_or(j, "layers", cfg.layers);
    cfg.d_model = get_or(j, "d_model", cfg.d_model);
    cfg.vocab = get_or(j, "vocab", cfg.vocab);
    cfg.n_img = get_or(j, "n_img", cfg.n_img);
    cfg.n_txt = get_or(j, "n_txt", cfg.n_txt);
    cfg.seed = get_or(j, "seed", cfg.seed);
    return cfg;
}

Json to_json(const ModelConfig& cfg) {
    return Json{{"layers", cfg.layers}, {"d_model", cfg.d_model}, {"vocab", cfg.vocab},
                {"n_img", cfg.n_img},   {"n_txt", cfg.n_txt},     {"seed", cfg.seed}};
}

ScenarioSpec scenario_from_json(const Json& j, const ModelConfig& cfg) {
    check_keys(j,
               {"name", "visual_schedule", "prior_schedule", "evidence_weights", "evidence_sign_cf",
                "evidence_sign_std", "visual_set", "prior_set", "noise_sigma", "prior_noise_sigma", "payload_jitter",
                "seed"},
               "scenario");
    ScenarioSpec sc;
    sc.name = get_or<std::string>(j, "name", sc.name);
    if (!j.contains("visual_schedule") || !j.contains("prior_schedule"))
        throw ConfigError("scenario '" + sc.name + "' needs visual_schedule and prior_schedule");
    sc.visual_schedule = get_or<Vector>(j, "visual_schedule", {});
    sc.prior_schedule = get_or<Vector>(j, "prior_schedule", {});
    sc.evidence_weights = get_or<Vector>(j, "evidence_weights", Vector(static_cast<std::size_t>(cfg.n_img), 1.0 / cfg.n_img));
    sc.evidence_sign_cf = get_or(j, "evidence_sign_cf", sc.evidence_sign_cf);
    sc.evidence_sign_std = get_or(j, "evidence_sign_std", sc.evidence_sign_std);
    if (j.contains("visual_set")) sc.visual_set = variant_set_from_json(j.at("visual_set"), Role::visual);
    if (j.contains("prior_set")) sc.prior_set = variant_set_from_json(j.at("prior_set"), Role::prior);
    sc.noise_sigma = get_or(j, "noise_sigma", sc.noise_sigma);
    sc.prior_noise_sigma = get_or(j, "prior_noise_sigma", sc.prior_noise_sigma);
    sc.payload_jitter = get_or(j, "payload_jitter", sc.payload_jitter);
    sc.seed = get_or(j, "seed", sc.seed);
    return sc;
}

Json to_json(const ScenarioSpec& sc) {
    return Json{{"name", sc.name},
                {"visual_schedule", sc.visual_schedule},
                {"prior_schedule", sc.prior_schedule},
                {"evidence_weights", sc.evidence_weights},
                {"evidence_sign_cf", sc.evidence_sign_cf},
                {"evidence_sign_std", sc.evidence_sign_std},
                {"visual_set", sc.visual_set.ids},
                {"prior_set", sc.prior_set.ids},
                {"noise_sigma", sc.noise_sigma},
                {"prior_noise_sigma", sc.prior_noise_sigma},
                {"payload_jitter", sc.payload_jitter},
                {"seed", sc.seed}};
}

namespace {

void add_entries(const Json& item, const ModelConfig& model, const fs::path& base, std::vector<BatteryEntry>& out) {
    if (item.is_string()) {
        const std::string ref = item.get<std::string>();
        if (ref.rfind("builtin:", 0) == 0) {
            const auto entries = builtin_battery(ref.substr(8));
            out.insert(out.end(), entries.begin(), entries.end());
            return;
        }
        const fs::path path = resolve(base, ref);
        const Json doc = read_json(path);
        if (doc.is_array()) {
            for (const Json& sub : doc) add_entries(sub, model, path.parent_path(), out);
        } else {
            add_entries(doc, model, path.parent_path(), out);
        }
        return;
    }
    if (!item.is_object()) throw ConfigError("battery entries must be objects, file paths or builtin:<name>");
    if (item.contains("scenario")) {
        check_keys(item, {"scenario", "model"}, "battery entry");
        BatteryEntry e;
        e.model = item.contains("model") ? model_config_from_json(object_or_file(item.at("model"), base, "model"), model)
                                         : model;
        e.scenario = scenario_from_json(object_or_file(item.at("scenario"), base, "scenario"), e.model);
        out.push_back(std::move(e));
    } else {
        out.push_back({model, scenario_from_json(item, model)});
    }
}

}  // namespace

ExperimentConfig parse_config(const Json& doc, const fs::path& base) {
    check_keys(doc,
               {"name", "seed", "samples", "stages", "model", "battery", "depth", "patching", "steering", "output",
                "cache", "workers"},
               "experiment config");
    ExperimentConfig cfg;
    cfg.echo = doc;
    try {
        cfg.name = get_or<std::string>(doc, "name", cfg.name);
        cfg.seed = get_or(doc, "seed", cfg.seed);
        cfg.samples = get_or(doc, "samples", cfg.samples);
        cfg.cache = get_or(doc, "cache", cfg.cache);
        cfg.workers = get_or(doc, "workers", cfg.workers);
        if (doc.contains("output")) cfg.output = resolve(base, doc.at("output").get<std::string>());

        ModelConfig model;
        if (doc.contains("model")) model = model_config_from_json(object_or_file(doc.at("model"), base, "model"));

        if (doc.contains("stages")) {
            cfg.stages.clear();
            for (const Json& s : doc.at("stages")) {
                const Stage st = stage_from_string(s.get<std::string>());
                if (!cfg.has(st)) cfg.stages.push_back(st);
            }
        }

        if (!doc.contains("battery")) throw ConfigError("config needs a battery");
        const Json& battery = doc.at("battery");
        if (battery.is_array()) {
            for (const Json& item : battery) add_entries(item, model, base, cfg.battery);
        } else {
            add_entries(battery, model, base, cfg.battery);
        }

        if (doc.contains("depth")) {
            const Json& d = doc.at("depth");
            check_keys(d, {"anchor", "fractions", "grid", "probe_fraction", "folds"}, "depth");
            const std::string anchor = get_or<std::string>(d, "anchor", to_string(cfg.depth.anchor));
            if (anchor == "mean_mac") cfg.depth.anchor = DepthAnchor::mean_mac;
            else if (anchor == "total_layers") cfg.depth.anchor = DepthAnchor::total_layers;
            else throw ConfigError("depth anchor must be mean_mac or total_layers");
            cfg.depth.fractions = get_or(d, "fractions", cfg.depth.fractions);
            cfg.depth.grid = get_or(d, "grid", cfg.depth.grid);
            cfg.depth.probe_fraction = get_or(d, "probe_fraction", cfg.depth.probe_fraction);
            cfg.depth.folds = get_or(d, "folds", cfg.depth.folds);
        }
        if (doc.contains("patching")) {
            const Json& p = doc.at("patching");
            check_keys(p, {"layer", "scopes"}, "patching");
            if (p.contains("layer") && !p.at("layer").is_null()) cfg.patching.layer = p.at("layer").get<int>();
            if (p.contains("scopes")) {
                cfg.patching.scopes.clear();
                for (const Json& s : p.at("scopes")) {
                    const std::string name = s.get<std::string>();
                    if (name == "all" || name == "full") cfg.patching.scopes.push_back(TokenScope::all);
                    else if (name == "last") cfg.patching.scopes.push_back(TokenScope::last);
                    else if (name == "image_only") cfg.patching.scopes.push_back(TokenScope::image_only);
                    else if (name == "text_only") cfg.patching.scopes.push_back(TokenScope::text_only);
                    else throw ConfigError("unknown patch scope '" + name + "'");
                }
            }
        }
        if (doc.contains("steering")) {
            const Json& s = doc.at("steering");
            check_keys(s, {"layers", "alphas", "sae_alphas", "train_fraction", "top_k", "sae"}, "steering");
            cfg.steering.layers = get_or(s, "layers", cfg.steering.layers);
            cfg.steering.alphas = get_or(s, "alphas", cfg.steering.alphas);
            cfg.steering.sae_alphas = get_or(s, "sae_alphas", cfg.steering.sae_alphas);
            cfg.steering.train_fraction = get_or(s, "train_fraction", cfg.steering.train_fraction);
            cfg.steering.top_k = get_or(s, "top_k", cfg.steering.top_k);
            if (s.contains("sae")) {
                const Json& a = s.at("sae");
                check_keys(a, {"expansion", "lambda", "epochs", "step", "seed"}, "steering.sae");
                SaeConfig& c = cfg.steering.sae;
                c.expansion = get_or(a, "expansion", c.expansion);
                c.lambda = get_or(a, "lambda", c.lambda);
                c.epochs = get_or(a, "epochs", c.epochs);
                c.step = get_or(a, "step", c.step);
                c.seed = get_or(a, "seed", c.seed);
            }
        }
    } catch (const Json::exception& e) {
        throw ConfigError(e.what());
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    cfg.validate();
    return cfg;
}

ExperimentConfig load_config(const fs::path& path) { return parse_config(read_json(path), path.parent_path()); }

fs::path default_output_root() {
    if (const char* env = std::getenv(kOutputEnvVar); env && *env) return fs::path(env);
    return fs::path("arbiter-out");
}

}  // namespace arb
