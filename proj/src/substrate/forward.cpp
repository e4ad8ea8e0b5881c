#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "arb/substrate.hpp"

namespace arb {

const char* to_string(TokenScope s) {
    switch (s) {
        case TokenScope::all: return "all";
        case TokenScope::last: return "last";
        case TokenScope::image_only: return "image_only";
        case TokenScope::text_only: return "text_only";
        case TokenScope::explicit_set: return "explicit";
    }
    return "?";
}

std::vector<int> scope_tokens(TokenScope scope, int n_img, int length,
                              const std::vector<int>& explicit_tokens) {
    std::vector<int> out;
    switch (scope) {
        case TokenScope::all:
            for (int t = 0; t < length; ++t) out.push_back(t);
            break;
        case TokenScope::last:
            out.push_back(length - 1);
            break;
        case TokenScope::image_only:
            for (int t = 0; t < n_img; ++t) out.push_back(t);
            break;
        case TokenScope::text_only:
            for (int t = n_img; t < length; ++t) out.push_back(t);
            break;
        case TokenScope::explicit_set:
            for (int t : explicit_tokens) {
                if (t < 0 || t >= length) throw std::invalid_argument("explicit token scope out of range");
                out.push_back(t);
            }
            break;
    }
    return out;
}

Hook Hook::inject(int layer, TokenScope scope, Matrix rows, std::vector<int> tokens) {
    Hook h;
    h.kind = HookKind::inject;
    h.layer = layer;
    h.scope = scope;
    h.tokens = std::move(tokens);
    h.payload = std::move(rows);
    return h;
}

Hook Hook::add(int layer, TokenScope scope, const Vector& delta, std::vector<int> tokens) {
    Hook h;
    h.kind = HookKind::add;
    h.layer = layer;
    h.scope = scope;
    h.tokens = std::move(tokens);
    h.payload = Matrix::from_rows({delta});
    return h;
}

Hook Hook::make_edit(int layer, std::function<void(Matrix&)> fn) {
    Hook h;
    h.kind = HookKind::edit;
    h.layer = layer;
    h.edit = std::move(fn);
    return h;
}

int argmax_lowest(std::span<const double> values) {
    int best = 0;
    for (std::size_t i = 1; i < values.size(); ++i)
        if (values[i] > values[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
    return best;
}

Vector readout_logits(const Model& model, std::span<const double> state) {
    const Vector normed = layer_norm(state, model.final_gain, model.final_bias);
    return matvec(model.unembed, normed);
}

namespace {

double dot4(const double* a, const double* b, std::size_t n) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return (s0 + s1) + (s2 + s3);
}

// Projection of every row of x onto the columns of w, given as wt = w^T (h x d).
void project(const Matrix& x, const Matrix& wt, std::vector<double>& out) {
    const std::size_t T = x.rows(), d = x.cols(), h = wt.rows();
    out.resize(T * h);
    for (std::size_t t = 0; t < T; ++t) {
        const double* xt = x.data().data() + t * d;
        for (std::size_t j = 0; j < h; ++j) out[t * h + j] = dot4(xt, wt.data().data() + j * d, d);
    }
}

// x += a (T x h) * w (h x d)
void accumulate(const std::vector<double>& a, const Matrix& w, Matrix& x) {
    const std::size_t T = x.rows(), d = x.cols(), h = w.rows();
    for (std::size_t t = 0; t < T; ++t) {
        double* xt = x.data().data() + t * d;
        for (std::size_t j = 0; j < h; ++j) {
            const double s = a[t * h + j];
            if (s == 0.0) continue;
            const double* wj = w.data().data() + j * d;
            for (std::size_t c = 0; c < d; ++c) xt[c] += s * wj[c];
        }
    }
}

struct Scratch {
    std::vector<double> q, k, v, mixed, hidden, scores;
};

struct LayerT {
    Matrix query, key, value, w_in;
};

LayerT transposed(const Layer& layer) {
    return {layer.attn.query.transpose(), layer.attn.key.transpose(), layer.attn.value.transpose(),
            layer.mlp.w_in.transpose()};
}

void attention_block(const AttentionHead& head, const LayerT& wt, Matrix& x, Scratch& s) {
    project(x, wt.query, s.q);
    project(x, wt.key, s.k);
    project(x, wt.value, s.v);
    const std::size_t T = x.rows();
    const std::size_t h = head.query.cols();
    s.mixed.assign(T * h, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        const double* qt = s.q.data() + t * h;
        // slot 0 is the sink; slots 1..t+1 are causal keys
        s.scores.assign(t + 2, 0.0);
        for (std::size_t j = 0; j < h; ++j) s.scores[0] += qt[j] * head.sink_key[j];
        for (std::size_t u = 0; u <= t; ++u) {
            const double* ku = s.k.data() + u * h;
            double sc = 0.0;
            for (std::size_t j = 0; j < h; ++j) sc += qt[j] * ku[j];
            s.scores[u + 1] = sc;
        }
        const double mx = *std::max_element(s.scores.begin(), s.scores.end());
        double z = 0.0;
        for (double& sc : s.scores) {
            sc = std::exp(sc - mx);
            z += sc;
        }
        double* out = s.mixed.data() + t * h;
        for (std::size_t u = 0; u <= t; ++u) {
            const double w = s.scores[u + 1] / z;
            if (w == 0.0) continue;
            const double* vu = s.v.data() + u * h;
            for (std::size_t j = 0; j < h; ++j) out[j] += w * vu[j];
        }
    }
    accumulate(s.mixed, head.output, x);
}

void mlp_block(const Mlp& mlp, const LayerT& wt, Matrix& x, Scratch& s) {
    project(x, wt.w_in, s.hidden);
    const std::size_t f = mlp.w_in.cols();
    for (std::size_t i = 0; i < s.hidden.size(); ++i)
        s.hidden[i] = std::max(0.0, s.hidden[i] + mlp.b_in[i % f]);
    accumulate(s.hidden, mlp.w_out, x);
}

void apply_hooks(const std::vector<const Hook*>& hooks, int n_img, Matrix& x) {
    const int T = static_cast<int>(x.rows());
    for (HookKind kind : {HookKind::inject, HookKind::add, HookKind::edit}) {
        for (const Hook* hook : hooks) {
            if (hook->kind != kind) continue;
            if (kind == HookKind::edit) {
                if (!hook->edit) throw std::invalid_argument("edit hook without a callback");
                hook->edit(x);
                if (x.rows() != static_cast<std::size_t>(T)) throw std::invalid_argument("edit hook changed the state shape");
                continue;
            }
            const std::vector<int> tokens = scope_tokens(hook->scope, n_img, T, hook->tokens);
            const Matrix& p = hook->payload;
            if (p.cols() != x.cols())
                throw std::invalid_argument("hook payload width does not match d_model");
            if (kind == HookKind::inject) {
                if (p.rows() != tokens.size())
                    throw std::invalid_argument("inject payload rows do not match the token scope");
                for (std::size_t i = 0; i < tokens.size(); ++i) {
                    auto src = p.row(i);
                    std::copy(src.begin(), src.end(), x.row(static_cast<std::size_t>(tokens[i])).begin());
                }
            } else {
                if (p.rows() != 1 && p.rows() != tokens.size())
                    throw std::invalid_argument("add payload rows do not match the token scope");
                for (std::size_t i = 0; i < tokens.size(); ++i) {
                    auto src = p.row(p.rows() == 1 ? 0 : i);
                    auto dst = x.row(static_cast<std::size_t>(tokens[i]));
                    for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
                }
            }
        }
    }
}

}  // namespace

namespace {

std::vector<std::vector<const Hook*>> hooks_by_layer(const std::vector<Hook>& hooks, int L) {
    std::vector<std::vector<const Hook*>> by_layer(static_cast<std::size_t>(L) + 1);
    for (const Hook& hook : hooks) {
        if (!hook.active) continue;
        if (hook.layer < 1 || hook.layer > L)
            throw std::invalid_argument("hook layer " + std::to_string(hook.layer) + " outside [1, L]");
        by_layer[static_cast<std::size_t>(hook.layer)].push_back(&hook);
    }
    for (const auto& group : by_layer) {
        const auto injects = std::count_if(group.begin(), group.end(),
                                           [](const Hook* h) { return h->kind == HookKind::inject; });
        if (injects > 1) throw std::invalid_argument("at most one inject hook per layer");
    }
    return by_layer;
}

// Runs layers start+1..L on x, which already holds the state after layer `start`
// (hooks at `start` not yet applied).
void run_layers(const Model& model, Matrix& x, int n_img, int start,
                const std::vector<std::vector<const Hook*>>& by_layer, HiddenStateCube* cube) {
    const int L = model.layer_count();
    Scratch scratch;
    if (start >= 1) {
        apply_hooks(by_layer[static_cast<std::size_t>(start)], n_img, x);
        if (cube) cube->states.push_back(x);
    }
    for (int l = start + 1; l <= L; ++l) {
        const Layer& layer = model.layers[static_cast<std::size_t>(l - 1)];
        const LayerT wt = transposed(layer);
        attention_block(layer.attn, wt, x, scratch);
        mlp_block(layer.mlp, wt, x, scratch);
        apply_hooks(by_layer[static_cast<std::size_t>(l)], n_img, x);
        if (!x.all_finite()) throw std::runtime_error("forward: non-finite residual stream at layer " + std::to_string(l));
        if (cube) cube->states.push_back(x);
    }
}

}  // namespace

ForwardResult forward(const Model& model, const InputSequence& input, const std::vector<Hook>& hooks) {
    const int L = model.layer_count();
    const auto d = static_cast<std::size_t>(model.d_model());
    if (input.embeddings.cols() != d || input.embeddings.rows() != input.ids.size() || input.ids.empty())
        throw std::invalid_argument("forward: input embeddings do not match ids/d_model");
    for (int id : input.ids)
        if (id < 0 || id >= model.config.vocab) throw std::invalid_argument("forward: token id out of vocabulary");
    const auto by_layer = hooks_by_layer(hooks, L);

    ForwardResult out;
    out.cube.states.reserve(static_cast<std::size_t>(L) + 1);
    out.cube.states.push_back(input.embeddings);
    Matrix x = input.embeddings;
    run_layers(model, x, input.n_img, 0, by_layer, &out.cube);
    out.final_logits = readout_logits(model, x.row(x.rows() - 1));
    out.answer = argmax_lowest(out.final_logits);
    return out;
}

ForwardResult forward_from(const Model& model, const HiddenStateCube& base, int layer, int n_img,
                           const std::vector<Hook>& hooks) {
    const int L = model.layer_count();
    if (base.layers() != L) throw std::invalid_argument("forward_from: cube depth does not match the model");
    if (layer < 1 || layer > L) throw std::invalid_argument("forward_from: layer outside [1, L]");
    for (const Hook& hook : hooks)
        if (hook.active && hook.layer < layer)
            throw std::invalid_argument("forward_from: hook at layer " + std::to_string(hook.layer) +
                                        " precedes the resume layer");
    const auto by_layer = hooks_by_layer(hooks, L);
    ForwardResult out;
    Matrix x = base.at(layer);
    run_layers(model, x, n_img, layer, by_layer, nullptr);
    out.final_logits = readout_logits(model, x.row(x.rows() - 1));
    out.answer = argmax_lowest(out.final_logits);
    return out;
}

}  // namespace arb
