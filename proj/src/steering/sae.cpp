#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>

#include "arb/steering.hpp"

namespace arb {

Vector SaeModel::encode(std::span<const double> h) const {
    Vector x(h.begin(), h.end());
    for (std::size_t i = 0; i < x.size(); ++i) x[i] -= center[i];
    Vector z = matvec(w_enc, x);
    for (std::size_t j = 0; j < z.size(); ++j) z[j] = std::max(0.0, z[j] + b_enc[j]);
    return z;
}

Vector SaeModel::decode(std::span<const double> z) const {
    Vector h = matvec(w_dec, z);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += b_dec[i];
    return h;
}

namespace {

void check_data(const SaeModel& sae, const Matrix& data) {
    if (data.cols() != sae.d()) throw std::invalid_argument("sae: data width does not match the model");
    if (data.rows() == 0) throw std::invalid_argument("sae: no data rows");
}

// Rows of the pre-activation W_enc (h - center) + b_enc.
Matrix preactivations(const SaeModel& sae, const Matrix& data) {
    Matrix x = data;
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto row = x.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) row[c] -= sae.center[c];
    }
    Matrix pre = matmul(x, sae.w_enc.transpose());
    for (std::size_t r = 0; r < pre.rows(); ++r) {
        auto row = pre.row(r);
        for (std::size_t j = 0; j < row.size(); ++j) row[j] += sae.b_enc[j];
    }
    return pre;
}

Matrix relu(Matrix m) {
    for (double& v : m.data()) v = std::max(0.0, v);
    return m;
}

}  // namespace

double sae_loss(const SaeModel& sae, const Matrix& data) {
    check_data(sae, data);
    const Matrix z = relu(preactivations(sae, data));
    const Matrix recon = matmul(z, sae.w_dec.transpose());
    double total = 0.0;
    for (std::size_t r = 0; r < data.rows(); ++r) {
        auto zr = z.row(r);
        auto hr = data.row(r);
        auto rr = recon.row(r);
        for (std::size_t c = 0; c < hr.size(); ++c) {
            const double e = rr[c] + sae.b_dec[c] - hr[c];
            total += e * e;
        }
        for (double v : zr) total += sae.lambda * v;
    }
    return total / static_cast<double>(data.rows());
}

SaeGradients sae_gradients(const SaeModel& sae, const Matrix& data) {
    check_data(sae, data);
    const std::size_t n = data.rows();
    const std::size_t d = sae.d();
    const std::size_t m = sae.d_sae();
    const double scale = 1.0 / static_cast<double>(n);

    Matrix x = data;
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) x(r, c) -= sae.center[c];
    const Matrix pre = preactivations(sae, data);
    const Matrix z = relu(pre);
    Matrix resid = matmul(z, sae.w_dec.transpose());  // n x d
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) resid(r, c) = 2.0 * scale * (resid(r, c) + sae.b_dec[c] - data(r, c));

    SaeGradients g;
    g.w_dec = matmul(resid.transpose(), z);  // d x m
    g.b_dec = Vector(d, 0.0);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) g.b_dec[c] += resid(r, c);

    Matrix dpre = matmul(resid, sae.w_dec);  // n x m
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < m; ++j) {
            if (pre(r, j) > 0.0) dpre(r, j) += sae.lambda * scale;
            else dpre(r, j) = 0.0;
        }
    }
    g.w_enc = matmul(dpre.transpose(), x);  // m x d
    g.b_enc = Vector(m, 0.0);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < m; ++j) g.b_enc[j] += dpre(r, j);
    return g;
}

SaeModel sae_init(const Matrix& data, const SaeConfig& cfg) {
    if (cfg.expansion < 1) throw std::invalid_argument("sae: expansion must be >= 1");
    if (data.rows() == 0) throw std::invalid_argument("sae: no data rows");
    if (!data.all_finite()) throw std::invalid_argument("sae: non-finite training data");
    const std::size_t d = data.cols();
    const std::size_t m = d * static_cast<std::size_t>(cfg.expansion);
    SaeModel sae;
    sae.lambda = cfg.lambda;
    sae.center = column_mean(data);
    sae.b_dec = sae.center;
    sae.b_enc = Vector(m, 0.0);
    sae.w_dec = Matrix(d, m);
    // Unit-norm decoder columns, encoder tied to the decoder transpose.
    Rng rng(Rng::derive_seed(cfg.seed, "sae_init"));
    for (std::size_t j = 0; j < m; ++j) {
        Vector col(d);
        for (double& v : col) v = rng.normal();
        const double len = norm(col);
        for (std::size_t i = 0; i < d; ++i) sae.w_dec(i, j) = col[i] / len;
    }
    sae.w_enc = sae.w_dec.transpose();
    return sae;
}

SaeModel sae_train(const Matrix& states, const SaeConfig& cfg) {
    SaeModel sae = sae_init(states, cfg);
    double loss = sae_loss(sae, states);
    sae.loss_log.push_back(loss);
    double step = cfg.step;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const SaeGradients g = sae_gradients(sae, states);
        bool accepted = false;
        for (int halving = 0; halving < 40 && !accepted; ++halving) {
            SaeModel trial = sae;
            trial.loss_log.clear();
            auto descend = [step](std::span<double> w, std::span<const double> grad) {
                for (std::size_t i = 0; i < w.size(); ++i) w[i] -= step * grad[i];
            };
            descend(trial.w_enc.data(), g.w_enc.data());
            descend(trial.b_enc, g.b_enc);
            descend(trial.w_dec.data(), g.w_dec.data());
            descend(trial.b_dec, g.b_dec);
            const double trial_loss = sae_loss(trial, states);
            if (!std::isfinite(trial_loss))
                throw std::runtime_error("sae_train: non-finite loss at epoch " + std::to_string(epoch + 1));
            if (trial_loss <= loss) {
                trial.loss_log = std::move(sae.loss_log);
                sae = std::move(trial);
                loss = trial_loss;
                accepted = true;
            } else {
                step *= 0.5;
            }
        }
        sae.loss_log.push_back(loss);
    }
    return sae;
}

double sae_mean_l0(const SaeModel& sae, const Matrix& data) {
    check_data(sae, data);
    const Matrix pre = preactivations(sae, data);
    std::size_t active = 0;
    for (double v : pre.data()) active += v > 0.0;
    return static_cast<double>(active) / static_cast<double>(data.rows());
}

double sae_reconstruction_mse(const SaeModel& sae, const Matrix& data) {
    check_data(sae, data);
    double total = 0.0;
    for (std::size_t r = 0; r < data.rows(); ++r) {
        const Vector recon = sae.decode(sae.encode(data.row(r)));
        for (std::size_t c = 0; c < recon.size(); ++c) total += (recon[c] - data(r, c)) * (recon[c] - data(r, c));
    }
    return total / static_cast<double>(data.rows() * data.cols());
}

namespace {

constexpr char kSaeMagic[8] = {'A', 'R', 'B', 'S', 'A', 'E', '0', '1'};

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }
void write_f64s(std::ostream& os, std::span<const double> v) {
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}
std::uint64_t read_u64(std::istream& is) {
    std::uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
}
void read_f64s(std::istream& is, std::span<double> v) {
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

}  // namespace

void save_sae(const SaeModel& sae, const std::filesystem::path& path) {
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("save_sae: cannot open " + tmp);
        os.write(kSaeMagic, sizeof kSaeMagic);
        write_u64(os, sae.d());
        write_u64(os, sae.d_sae());
        write_f64s(os, std::span<const double>(&sae.lambda, 1));
        write_f64s(os, sae.w_enc.data());
        write_f64s(os, sae.b_enc);
        write_f64s(os, sae.w_dec.data());
        write_f64s(os, sae.b_dec);
        write_f64s(os, sae.center);
        if (!os) throw std::runtime_error("save_sae: write failed");
    }
    std::filesystem::rename(tmp, path);
}

SaeModel load_sae(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_sae: cannot open " + path.string());
    char magic[8];
    is.read(magic, sizeof magic);
    if (!is || std::memcmp(magic, kSaeMagic, sizeof magic) != 0) throw std::runtime_error("load_sae: bad magic");
    const std::uint64_t d = read_u64(is);
    const std::uint64_t m = read_u64(is);
    if (d == 0 || m == 0 || d > (1u << 20) || m > (1u << 22)) throw std::runtime_error("load_sae: implausible shape");
    SaeModel sae;
    read_f64s(is, std::span<double>(&sae.lambda, 1));
    sae.w_enc = Matrix(m, d);
    sae.b_enc = Vector(m);
    sae.w_dec = Matrix(d, m);
    sae.b_dec = Vector(d);
    sae.center = Vector(d);
    read_f64s(is, sae.w_enc.data());
    read_f64s(is, sae.b_enc);
    read_f64s(is, sae.w_dec.data());
    read_f64s(is, sae.b_dec);
    read_f64s(is, sae.center);
    if (!is) throw std::runtime_error("load_sae: truncated file");
    return sae;
}

FeatureSelection sae_select_features(const SaeModel& sae, const Matrix& cf_states, const Matrix& std_states,
                                     std::size_t k) {
    if (cf_states.rows() == 0 || std_states.rows() == 0)
        throw std::invalid_argument("sae_select_features: empty state set");
    const std::size_t m = sae.d_sae();
    auto mean_code = [&](const Matrix& states) {
        const Matrix z = relu(preactivations(sae, states));
        return column_mean(z);
    };
    const Vector zc = mean_code(cf_states);
    const Vector zs = mean_code(std_states);
    FeatureSelection sel;
    sel.delta.resize(m);
    sel.scores.resize(m);
    for (std::size_t j = 0; j < m; ++j) {
        sel.delta[j] = zc[j] - zs[j];
        double col = 0.0;
        for (std::size_t i = 0; i < sae.d(); ++i) col += sae.w_dec(i, j) * sae.w_dec(i, j);
        sel.scores[j] = std::abs(sel.delta[j]) * std::sqrt(col);
    }
    std::vector<int> pos, neg;
    for (std::size_t j = 0; j < m; ++j) {
        if (sel.delta[j] > 0.0) pos.push_back(static_cast<int>(j));
        else if (sel.delta[j] < 0.0) neg.push_back(static_cast<int>(j));
    }
    auto by_score = [&](int a, int b) {
        const double sa = sel.scores[static_cast<std::size_t>(a)];
        const double sb = sel.scores[static_cast<std::size_t>(b)];
        return sa != sb ? sa > sb : a < b;
    };
    std::sort(pos.begin(), pos.end(), by_score);
    std::sort(neg.begin(), neg.end(), by_score);
    if (pos.size() > k) pos.resize(k);
    if (neg.size() > k) neg.resize(k);
    sel.visual = std::move(pos);
    sel.prior = std::move(neg);
    return sel;
}

Hook sae_residual_hook(std::shared_ptr<const SaeModel> sae, const FeatureSelection& selection, int layer,
                       double alpha_v, double alpha_p, SaeApplication mode) {
    if (!sae) throw std::invalid_argument("sae_residual_hook: no SAE");
    if (alpha_v < 0.0 || alpha_p < 0.0) throw std::invalid_argument("sae_residual_hook: alphas must be >= 0");
    for (const auto* ids : {&selection.visual, &selection.prior})
        for (int j : *ids)
            if (j < 0 || static_cast<std::size_t>(j) >= sae->d_sae())
                throw std::invalid_argument("sae_residual_hook: selection does not match the SAE");
    return Hook::make_edit(layer, [sae, visual = selection.visual, prior = selection.prior, alpha_v, alpha_p,
                                   mode](Matrix& states) {
        const Vector pooled = column_mean(states);
        const Vector z = sae->encode(pooled);
        Vector z_edit = z;
        for (int j : visual) z_edit[static_cast<std::size_t>(j)] += alpha_v;
        for (int j : prior) z_edit[static_cast<std::size_t>(j)] -= alpha_p;
        for (double& v : z_edit) v = std::max(0.0, v);
        const Vector edited = sae->decode(z_edit);
        if (mode == SaeApplication::replacement) {
            for (std::size_t r = 0; r < states.rows(); ++r) std::copy(edited.begin(), edited.end(), states.row(r).begin());
            return;
        }
        const Vector original = sae->decode(z);
        Vector delta(edited.size());
        for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = edited[i] - original[i];
        for (std::size_t r = 0; r < states.rows(); ++r) {
            auto row = states.row(r);
            for (std::size_t c = 0; c < row.size(); ++c) row[c] += delta[c];
        }
    });
}

}  // namespace arb
