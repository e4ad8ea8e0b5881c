#include "arb/numkit.hpp"

#include <algorithm>
#include <cmath>

namespace arb {

Matrix Matrix::from_rows(const std::vector<Vector>& rows) {
    if (rows.empty()) return {};
    Matrix m(rows.size(), rows.front().size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != m.cols()) throw std::invalid_argument("from_rows: ragged rows");
        std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
    }
    return m;
}

Matrix Matrix::transpose() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
}

bool Matrix::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
    Matrix out(a.rows(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* o = out.data().data() + i * n;
        const double* ai = a.data().data() + i * a.cols();
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double s = ai[k];
            if (s == 0.0) continue;
            const double* bk = b.data().data() + k * n;
            for (std::size_t j = 0; j < n; ++j) o[j] += s * bk[j];
        }
    }
    return out;
}

Vector matvec(const Matrix& m, std::span<const double> x) {
    if (m.cols() != x.size()) throw std::invalid_argument("matvec: shape mismatch");
    Vector y(m.rows());
    for (std::size_t r = 0; r < m.rows(); ++r) y[r] = dot(m.row(r), x);
    return y;
}

Vector vecmat(std::span<const double> x, const Matrix& m) {
    if (m.rows() != x.size()) throw std::invalid_argument("vecmat: shape mismatch");
    Vector y(m.cols(), 0.0);
    for (std::size_t r = 0; r < m.rows(); ++r) {
        if (x[r] == 0.0) continue;
        auto mr = m.row(r);
        for (std::size_t c = 0; c < m.cols(); ++c) y[c] += x[r] * mr[c];
    }
    return y;
}

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("dot: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

Vector column_mean(const Matrix& m) {
    Vector mean(m.cols(), 0.0);
    if (m.rows() == 0) return mean;
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto row = m.row(r);
        for (std::size_t c = 0; c < m.cols(); ++c) mean[c] += row[c];
    }
    for (double& v : mean) v /= static_cast<double>(m.rows());
    return mean;
}

double l2_distance(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("l2_distance: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

double cosine_sim(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("cosine_sim: length mismatch");
    const double na = norm(a);
    const double nb = norm(b);
    if (na == 0.0 || nb == 0.0) throw std::invalid_argument("cosine_sim: zero vector");
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

Vector layer_norm(std::span<const double> v, std::span<const double> gain,
                  std::span<const double> bias, double eps) {
    if (v.empty()) throw std::invalid_argument("layer_norm: empty input");
    if (v.size() != gain.size() || v.size() != bias.size())
        throw std::invalid_argument("layer_norm: length mismatch");
    const double n = static_cast<double>(v.size());
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= n;
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    Vector out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - mean) * inv * gain[i] + bias[i];
    return out;
}

}  // namespace arb
