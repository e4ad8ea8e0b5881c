#include <array>
#include <bit>
#include <cstring>
#include <fstream>

#include "arb/pipeline.hpp"

namespace arb {

namespace fs = std::filesystem;

namespace {

constexpr std::array<char, 8> kCubeMagic{'A', 'R', 'B', 'C', 'U', 'B', 'E', '1'};

static_assert(std::endian::native == std::endian::little, "cube cache assumes a little-endian host");

void put_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }

bool get_u64(std::istream& is, std::uint64_t& v) { return static_cast<bool>(is.read(reinterpret_cast<char*>(&v), sizeof v)); }

std::uint64_t mix(std::uint64_t h, std::uint64_t v) { return splitmix64(h ^ v); }

std::uint64_t mix(std::uint64_t h, double v) { return mix(h, std::bit_cast<std::uint64_t>(v)); }

std::uint64_t mix(std::uint64_t h, const Vector& v) {
    h = mix(h, static_cast<std::uint64_t>(v.size()));
    for (double x : v) h = mix(h, x);
    return h;
}

}  // namespace

std::uint64_t cube_fingerprint(const Model& model, const SamplePair& pair, bool counterfactual) {
    const ModelConfig& c = model.config;
    const ScenarioSpec& s = model.scenario;
    std::uint64_t h = fnv1a64("arbiter-cube");
    for (int v : {c.layers, c.d_model, c.vocab, c.n_img, c.n_txt}) h = mix(h, static_cast<std::uint64_t>(v));
    h = mix(h, c.seed);
    h = mix(h, fnv1a64(s.name));
    h = mix(h, s.visual_schedule);
    h = mix(h, s.prior_schedule);
    h = mix(h, s.evidence_weights);
    for (double v : {s.evidence_sign_cf, s.evidence_sign_std, s.noise_sigma, s.prior_noise_sigma, s.payload_jitter})
        h = mix(h, v);
    for (const VariantSet* set : {&s.visual_set, &s.prior_set})
        for (int id : set->ids) h = mix(h, static_cast<std::uint64_t>(id));
    h = mix(h, pair.seed);
    h = mix(h, pair.sample_id);
    return mix(h, static_cast<std::uint64_t>(counterfactual));
}

void save_cube(const fs::path& path, const HiddenStateCube& cube, std::uint64_t fingerprint) {
    fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out.write(kCubeMagic.data(), kCubeMagic.size());
        put_u64(out, fingerprint);
        put_u64(out, cube.states.size());
        put_u64(out, static_cast<std::uint64_t>(cube.tokens()));
        put_u64(out, static_cast<std::uint64_t>(cube.dim()));
        for (const Matrix& m : cube.states)
            out.write(reinterpret_cast<const char*>(m.data().data()),
                      static_cast<std::streamsize>(m.data().size() * sizeof(double)));
        if (!out) throw std::runtime_error("short write to " + tmp.string());
    }
    fs::rename(tmp, path);
}

std::optional<HiddenStateCube> load_cube(const fs::path& path, std::uint64_t fingerprint) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return std::nullopt;
    std::array<char, 8> magic{};
    if (!in.read(magic.data(), magic.size()) || magic != kCubeMagic) return std::nullopt;
    std::uint64_t fp = 0, layers = 0, tokens = 0, dim = 0;
    if (!get_u64(in, fp) || !get_u64(in, layers) || !get_u64(in, tokens) || !get_u64(in, dim)) return std::nullopt;
    if (fp != fingerprint || layers == 0 || layers > 4096 || tokens > (1u << 20) || dim > (1u << 20)) return std::nullopt;
    HiddenStateCube cube;
    cube.states.reserve(layers);
    for (std::uint64_t l = 0; l < layers; ++l) {
        Matrix m(tokens, dim);
        if (!in.read(reinterpret_cast<char*>(m.data().data()), static_cast<std::streamsize>(tokens * dim * sizeof(double))))
            return std::nullopt;
        cube.states.push_back(std::move(m));
    }
    return cube;
}

}  // namespace arb
