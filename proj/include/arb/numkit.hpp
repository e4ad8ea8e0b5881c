#pragma once

// Dense linear algebra, seeded randomness and rank statistics shared by every
// analysis stage. Everything here is a pure function of its inputs.

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

namespace arb {

using Vector = std::vector<double>;

/// Row-major dense matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    static Matrix from_rows(const std::vector<Vector>& rows);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }

    Matrix transpose() const;
    bool all_finite() const;

    friend bool operator==(const Matrix& a, const Matrix& b) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
/// y = M x
Vector matvec(const Matrix& m, std::span<const double> x);
/// y = x^T M  (x has m.rows() entries)
Vector vecmat(std::span<const double> x, const Matrix& m);

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> v);
Vector column_mean(const Matrix& m);

/// Reproducible generator. The mt19937_64 engine output is fixed by the
/// standard; the uniform/normal transforms are hand-rolled because the
/// std distributions are implementation-defined.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t seed() const { return seed_; }
    std::uint64_t next_u64();
    /// Uniform in [0, 1) with 53 bits of resolution.
    double uniform();
    /// Standard normal via Box-Muller.
    double normal();
    /// Uniform integer in [0, n).
    std::size_t below(std::size_t n);

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::swap(items[i - 1], items[below(i)]);
        }
    }

    /// Child generator for a named sub-stream. See derive_seed.
    Rng split(std::string_view tag) const { return Rng(derive_seed(seed_, tag)); }
    Rng split(std::uint64_t index) const { return Rng(derive_seed(seed_, index)); }

    /// splitmix64(seed ^ fnv1a64(tag)); the documented way to fork seeds.
    static std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag);
    static std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view bytes);

inline constexpr double kLayerNormEps = 1e-5;

/// (v - mean) / sqrt(var + eps) * gain + bias, population variance.
Vector layer_norm(std::span<const double> v, std::span<const double> gain,
                  std::span<const double> bias, double eps = kLayerNormEps);

/// Midranks (1-based), ties share the average rank.
Vector midranks(std::span<const double> values);

struct MannWhitney {
    double u = 0.0;  ///< U statistic of group a vs b (pairs a > b, ties count 1/2)
    double p = 1.0;  ///< two-sided
};

/// Exact enumeration when |a|+|b| <= 12, tie-corrected normal approximation
/// with continuity correction above.
MannWhitney mann_whitney_u(std::span<const double> a, std::span<const double> b);

inline constexpr std::size_t kMannWhitneyExactLimit = 12;

double spearman_rho(std::span<const double> x, std::span<const double> y);
/// Two-sided p for a Spearman rho via the t approximation with n-2 dof.
double spearman_p(double rho, std::size_t n);

double roc_auc(std::span<const double> scores, std::span<const int> labels);

double l2_distance(std::span<const double> a, std::span<const double> b);
double cosine_sim(std::span<const double> a, std::span<const double> b);

struct LogisticOptions {
    double l2 = 1e-3;
    int iters = 500;
    double step = 0.1;
};

struct LogisticModel {
    Vector weights;
    double bias = 0.0;
    /// Objective after each accepted iteration (index 0 = initial).
    std::vector<double> loss_log;

    double decision(std::span<const double> x) const;
    double predict(std::span<const double> x) const;
};

/// Regularized logistic regression by full-batch gradient descent, halving
/// the step whenever a step would increase the objective.
LogisticModel logistic_fit(const Matrix& x, std::span<const int> y,
                           const LogisticOptions& opts = {});

/// Objective used by logistic_fit: mean log-loss + l2/2 * |w|^2 (bias unpenalized).
double logistic_loss(const Matrix& x, std::span<const int> y, std::span<const double> w,
                     double bias, double l2);

}  // namespace arb
