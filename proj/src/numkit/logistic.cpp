#include "arb/numkit.hpp"

#include <cmath>

namespace arb {

namespace {

double log1p_exp(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

void check_inputs(const Matrix& x, std::span<const int> y) {
    if (x.rows() != y.size()) throw std::invalid_argument("logistic_fit: rows(X) != len(y)");
    if (!x.all_finite()) throw std::invalid_argument("logistic_fit: non-finite features");
    bool has0 = false, has1 = false;
    for (int v : y) {
        if (v == 0) has0 = true;
        else if (v == 1) has1 = true;
        else throw std::invalid_argument("logistic_fit: labels must be 0 or 1");
    }
    if (!has0 || !has1) throw std::invalid_argument("logistic_fit: both classes required");
}

}  // namespace

double LogisticModel::decision(std::span<const double> x) const { return dot(weights, x) + bias; }

double LogisticModel::predict(std::span<const double> x) const { return sigmoid(decision(x)); }

double logistic_loss(const Matrix& x, std::span<const int> y, std::span<const double> w,
                     double bias, double l2) {
    double loss = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const double z = dot(x.row(i), w) + bias;
        // -[y log s(z) + (1-y) log(1-s(z))] = log(1+e^z) - y z
        loss += log1p_exp(z) - (y[i] == 1 ? z : 0.0);
    }
    loss /= static_cast<double>(x.rows());
    return loss + 0.5 * l2 * dot(w, w);
}

LogisticModel logistic_fit(const Matrix& x, std::span<const int> y, const LogisticOptions& opts) {
    check_inputs(x, y);
    const std::size_t n = x.rows();
    const std::size_t d = x.cols();
    LogisticModel model;
    model.weights.assign(d, 0.0);
    double loss = logistic_loss(x, y, model.weights, model.bias, opts.l2);
    model.loss_log.push_back(loss);

    double step = opts.step;
    Vector grad_w(d);
    Vector trial_w(d);
    for (int it = 0; it < opts.iters; ++it) {
        std::fill(grad_w.begin(), grad_w.end(), 0.0);
        double grad_b = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            auto row = x.row(i);
            const double r = sigmoid(dot(row, model.weights) + model.bias) - (y[i] == 1 ? 1.0 : 0.0);
            for (std::size_t j = 0; j < d; ++j) grad_w[j] += r * row[j];
            grad_b += r;
        }
        for (std::size_t j = 0; j < d; ++j)
            grad_w[j] = grad_w[j] / static_cast<double>(n) + opts.l2 * model.weights[j];
        grad_b /= static_cast<double>(n);

        bool accepted = false;
        for (int halving = 0; halving < 40; ++halving) {
            for (std::size_t j = 0; j < d; ++j) trial_w[j] = model.weights[j] - step * grad_w[j];
            const double trial_b = model.bias - step * grad_b;
            const double trial_loss = logistic_loss(x, y, trial_w, trial_b, opts.l2);
            if (trial_loss <= loss) {
                model.weights = trial_w;
                model.bias = trial_b;
                loss = trial_loss;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) break;  // converged to numerical precision
        model.loss_log.push_back(loss);
    }
    return model;
}

}  // namespace arb
