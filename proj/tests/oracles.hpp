#pragma once

// Test-only reference implementations, independent of the library code paths
// they check: extended-precision softmax, finite differences, brute-force
// simplex grid search for the EM objective, and simple random instances.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "metashift/core.hpp"
#include "metashift/rng.hpp"

namespace oracles {

// Direct softmax evaluation in long double on max-shifted inputs.
inline std::vector<double> softmax_reference(std::span<const double> logits) {
    long double hi = logits[0];
    for (double v : logits) hi = std::max<long double>(hi, v);
    std::vector<long double> terms(logits.size());
    long double total = 0.0L;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        terms[i] = expl(static_cast<long double>(logits[i]) - hi);
        total += terms[i];
    }
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = static_cast<double>(terms[i] / total);
    }
    return out;
}

inline double central_difference(const std::function<double(double)>& f, double x,
                                 double step = 1e-5) {
    return (f(x + step) - f(x - step)) / (2.0 * step);
}

// The EM objective: sum_i log(sum_m pi_m * ratio_im) + sum_m (alpha_m - 1) log pi_m,
// with ratio_im = max(posterior_im, floor) / max(source_m, floor). Written
// from the definition, not via the library EM path.
struct EmInstance {
    std::vector<std::vector<double>> posterior;  // N rows of M probabilities
    std::vector<double> source_prior;            // M
    std::vector<double> alpha;                   // M, entries >= 1
};

inline double em_objective(const EmInstance& instance, std::span<const double> pi) {
    constexpr double kFloor = 1e-12;
    const std::size_t m_count = instance.source_prior.size();
    double value = 0.0;
    for (const auto& row : instance.posterior) {
        double mix = 0.0;
        for (std::size_t m = 0; m < m_count; ++m) {
            mix += pi[m] * std::max(row[m], kFloor) / std::max(instance.source_prior[m], kFloor);
        }
        value += std::log(mix);
    }
    for (std::size_t m = 0; m < m_count; ++m) {
        if (instance.alpha[m] != 1.0) {
            value += (instance.alpha[m] - 1.0) * std::log(std::max(pi[m], kFloor));
        }
    }
    return value;
}

// Exhaustive grid search over the simplex at `step`, then local refinement
// around the best cell down to `final_step`. Valid for the concave EM
// objective: the grid argmax cell neighbours the continuous optimum.
inline std::vector<double> em_grid_search(const EmInstance& instance, double step = 1e-3,
                                          double final_step = 1e-5) {
    const std::size_t m_count = instance.source_prior.size();
    std::vector<double> best;
    double best_value = -std::numeric_limits<double>::infinity();

    auto consider = [&](std::span<const double> pi) {
        const double value = em_objective(instance, pi);
        if (value > best_value) {
            best_value = value;
            best.assign(pi.begin(), pi.end());
        }
    };

    auto scan = [&](double lo0, double hi0, double lo1, double hi1, double grid_step) {
        if (m_count == 2) {
            std::vector<double> pi(2);
            const long steps = std::lround((hi0 - lo0) / grid_step);
            for (long i = 0; i <= steps; ++i) {
                pi[0] = std::clamp(lo0 + grid_step * static_cast<double>(i), 0.0, 1.0);
                pi[1] = 1.0 - pi[0];
                consider(pi);
            }
        } else {
            std::vector<double> pi(3);
            const long steps0 = std::lround((hi0 - lo0) / grid_step);
            const long steps1 = std::lround((hi1 - lo1) / grid_step);
            for (long i = 0; i <= steps0; ++i) {
                pi[0] = std::clamp(lo0 + grid_step * static_cast<double>(i), 0.0, 1.0);
                for (long j = 0; j <= steps1; ++j) {
                    pi[1] = std::clamp(lo1 + grid_step * static_cast<double>(j), 0.0, 1.0);
                    if (pi[0] + pi[1] > 1.0) break;
                    pi[2] = 1.0 - pi[0] - pi[1];
                    consider(pi);
                }
            }
        }
    };

    scan(0.0, 1.0, 0.0, 1.0, step);
    double current = step;
    while (current > final_step) {
        const double next = current / 10.0;
        const double lo0 = std::max(0.0, best[0] - 2.0 * current);
        const double hi0 = std::min(1.0, best[0] + 2.0 * current);
        const double lo1 = m_count == 3 ? std::max(0.0, best[1] - 2.0 * current) : 0.0;
        const double hi1 = m_count == 3 ? std::min(1.0, best[1] + 2.0 * current) : 1.0;
        scan(lo0, hi0, lo1, hi1, next);
        current = next;
    }
    return best;
}

// Random point on the simplex: normalized exponentials (uniform Dirichlet).
inline std::vector<double> random_simplex(metashift::Rng& rng, std::size_t m_count,
                                          double sharpness = 1.0) {
    std::vector<double> out(m_count);
    double sum = 0.0;
    for (double& v : out) {
        v = std::pow(-std::log(1.0 - rng.next_double()), sharpness);
        sum += v;
    }
    for (double& v : out) v /= sum;
    return out;
}

inline std::vector<std::vector<double>> random_row_stochastic(metashift::Rng& rng, std::size_t n,
                                                              std::size_t m_count,
                                                              double sharpness = 1.0) {
    std::vector<std::vector<double>> rows(n);
    for (auto& row : rows) row = random_simplex(rng, m_count, sharpness);
    return rows;
}

}  // namespace oracles
