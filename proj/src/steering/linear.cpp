#include <stdexcept>

#include "arb/steering.hpp"

namespace arb {

SteeringDirection linear_direction(const Matrix& cf_means, const Matrix& std_means, int layer) {
    if (cf_means.rows() == 0 || std_means.rows() == 0)
        throw std::invalid_argument("linear_direction: empty training set");
    if (cf_means.cols() != std_means.cols()) throw std::invalid_argument("linear_direction: width mismatch");
    const Vector mcf = column_mean(cf_means);
    const Vector mstd = column_mean(std_means);
    SteeringDirection dir;
    dir.layer = layer;
    dir.n_cf = cf_means.rows();
    dir.n_std = std_means.rows();
    dir.direction.resize(mcf.size());
    for (std::size_t i = 0; i < mcf.size(); ++i) dir.direction[i] = mcf[i] - mstd[i];
    return dir;
}

SteeringDirection linear_direction(const Model& model, const std::vector<SamplePair>& train, int layer) {
    if (train.empty()) throw std::invalid_argument("linear_direction: empty training set");
    if (layer < 1 || layer > model.layer_count()) throw std::invalid_argument("linear_direction: layer out of range");
    const auto d = static_cast<std::size_t>(model.d_model());
    Matrix cf(train.size(), d), st(train.size(), d);
    for (std::size_t i = 0; i < train.size(); ++i) {
        const Vector a = forward(model, train[i].cf).cube.token_mean(layer);
        const Vector b = forward(model, train[i].standard).cube.token_mean(layer);
        std::copy(a.begin(), a.end(), cf.row(i).begin());
        std::copy(b.begin(), b.end(), st.row(i).begin());
    }
    return linear_direction(cf, st, layer);
}

Hook linear_hook(const SteeringDirection& dir, double alpha, TokenScope scope) {
    Vector delta(dir.direction.size());
    for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = alpha * dir.direction[i];
    return Hook::add(dir.layer, scope, delta);
}

int apply_linear(const Model& model, const InputSequence& input, const SteeringDirection& dir, double alpha,
                 TokenScope scope) {
    if (dir.direction.size() != static_cast<std::size_t>(model.d_model()))
        throw std::invalid_argument("apply_linear: direction width mismatch");
    return forward(model, input, {linear_hook(dir, alpha, scope)}).answer;
}

}  // namespace arb
