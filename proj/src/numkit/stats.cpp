#include "arb/numkit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <boost/math/distributions/students_t.hpp>

namespace arb {

Vector midranks(std::span<const double> values) {
    const std::size_t n = values.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t i, std::size_t j) { return values[i] < values[j]; });
    Vector ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
        const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
        i = j + 1;
    }
    return ranks;
}

namespace {

double tie_term(const Vector& pooled_sorted) {
    double sum = 0.0;
    std::size_t i = 0;
    while (i < pooled_sorted.size()) {
        std::size_t j = i;
        while (j + 1 < pooled_sorted.size() && pooled_sorted[j + 1] == pooled_sorted[i]) ++j;
        const double t = static_cast<double>(j - i + 1);
        sum += t * t * t - t;
        i = j + 1;
    }
    return sum;
}

// Two-sided exact p: enumerate every assignment of the pooled midranks to
// group a and count statistics at least as far from the null mean.
double exact_p(const Vector& ranks, std::size_t na, double u_obs) {
    const std::size_t n = ranks.size();
    const double na_d = static_cast<double>(na);
    const double mean = na_d * static_cast<double>(n - na) / 2.0;
    const double observed = std::abs(u_obs - mean);
    std::vector<bool> pick(n, false);
    std::fill(pick.begin(), pick.begin() + static_cast<std::ptrdiff_t>(na), true);
    std::size_t total = 0;
    std::size_t extreme = 0;
    // prev_permutation over a sorted-descending mask visits each subset once.
    do {
        double rank_sum = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            if (pick[i]) rank_sum += ranks[i];
        const double u = rank_sum - na_d * (na_d + 1.0) / 2.0;
        ++total;
        if (std::abs(u - mean) >= observed - 1e-9) ++extreme;
    } while (std::prev_permutation(pick.begin(), pick.end()));
    return std::min(1.0, static_cast<double>(extreme) / static_cast<double>(total));
}

}  // namespace

MannWhitney mann_whitney_u(std::span<const double> a, std::span<const double> b) {
    if (a.empty() || b.empty()) throw std::invalid_argument("mann_whitney_u: empty group");
    Vector pooled(a.begin(), a.end());
    pooled.insert(pooled.end(), b.begin(), b.end());
    const Vector ranks = midranks(pooled);
    const double na = static_cast<double>(a.size());
    const double nb = static_cast<double>(b.size());
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) rank_sum += ranks[i];

    MannWhitney out;
    out.u = rank_sum - na * (na + 1.0) / 2.0;

    if (pooled.size() <= kMannWhitneyExactLimit) {
        out.p = exact_p(ranks, a.size(), out.u);
        return out;
    }
    const double n = na + nb;
    Vector sorted = pooled;
    std::sort(sorted.begin(), sorted.end());
    const double var = na * nb / 12.0 * ((n + 1.0) - tie_term(sorted) / (n * (n - 1.0)));
    if (var <= 0.0) {
        out.p = 1.0;
        return out;
    }
    const double z = std::max(0.0, std::abs(out.u - na * nb / 2.0) - 0.5) / std::sqrt(var);
    out.p = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
    return out;
}

double spearman_rho(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw std::invalid_argument("spearman_rho: length mismatch");
    if (x.size() < 2) throw std::invalid_argument("spearman_rho: need at least 2 points");
    const Vector rx = midranks(x);
    const Vector ry = midranks(y);
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
    const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) throw std::domain_error("spearman_rho: zero rank variance");
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double spearman_p(double rho, std::size_t n) {
    if (n < 3) return 1.0;
    const double dof = static_cast<double>(n) - 2.0;
    if (std::abs(rho) >= 1.0) return 0.0;
    const double t = rho * std::sqrt(dof / (1.0 - rho * rho));
    boost::math::students_t dist(dof);
    return std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t))));
}

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw std::invalid_argument("roc_auc: length mismatch");
    const Vector ranks = midranks(scores);
    double pos = 0.0, neg = 0.0, rank_sum = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == 1) {
            pos += 1.0;
            rank_sum += ranks[i];
        } else if (labels[i] == 0) {
            neg += 1.0;
        } else {
            throw std::invalid_argument("roc_auc: labels must be 0 or 1");
        }
    }
    if (pos == 0.0 || neg == 0.0) throw std::invalid_argument("roc_auc: single-class labels");
    return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

}  // namespace arb
