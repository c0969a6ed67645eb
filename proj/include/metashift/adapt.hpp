#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "metashift/core.hpp"
#include "metashift/errors.hpp"

namespace metashift {

struct EmConfig {
    // Dirichlet concentration per meta-label; empty means all-ones (MLE).
    // alpha_m - 1 acts as a pseudo-count, so alpha_m >= 1 keeps the
    // objective concave and the M-step nonnegative.
    std::vector<double> dirichlet_alpha;
    double tolerance = 1e-8;  // L1 movement of the prior per iteration
    int max_iterations = 500;
};

inline std::vector<double> resolve_alpha(const EmConfig& config, int m_count) {
    std::vector<double> alpha = config.dirichlet_alpha;
    if (alpha.empty()) alpha.assign(m_count, 1.0);
    if (static_cast<int>(alpha.size()) != m_count) {
        throw InvalidInputError("dirichlet_alpha length does not match meta-label count");
    }
    for (double a : alpha) {
        if (!std::isfinite(a) || a < 1.0) {
            throw InvalidInputError("dirichlet_alpha entries must be >= 1");
        }
    }
    return alpha;
}

inline void validate(const EmConfig& config) {
    if (config.tolerance <= 0.0) throw InvalidInputError("EM tolerance must be positive");
    if (config.max_iterations < 1) throw InvalidInputError("EM max_iterations must be positive");
}

struct EmResult {
    JointPrior target_prior;
    int iterations = 0;
    std::vector<double> log_likelihood_trace;
    std::vector<double> expected_counts;
};

// w[m] = target[m] / max(source[m], floor).
inline std::vector<double> importance_weights(const JointPrior& source_prior,
                                              const JointPrior& target_prior) {
    if (!(source_prior.space == target_prior.space)) {
        throw InvalidInputError("importance_weights: priors live on different spaces");
    }
    const int m_count = source_prior.space.size();
    std::vector<double> weights(m_count);
    for (int m = 0; m < m_count; ++m) {
        if (target_prior.probs[m] > kProbFloor && source_prior.probs[m] < kProbFloor) {
            throw SupportViolationError("target places mass " +
                                        std::to_string(target_prior.probs[m]) +
                                        " on meta-label " + std::to_string(m) +
                                        " where the source prior is zero");
        }
        weights[m] = target_prior.probs[m] / std::max(source_prior.probs[m], kProbFloor);
    }
    return weights;
}

// Scales each row entrywise by `weights` and renormalizes. The weights need
// not be normalized; a positive constant factor cancels per row.
inline PosteriorMatrix reweight_rows(const PosteriorMatrix& posterior,
                                     std::span<const double> weights) {
    if (weights.size() != static_cast<std::size_t>(posterior.space.size())) {
        throw InvalidInputError("reweight_rows: weight length does not match meta-label count");
    }
    Matrix out = posterior.values;
    for (std::size_t i = 0; i < out.rows(); ++i) {
        auto row = out.row(i);
        double sum = 0.0;
        for (std::size_t m = 0; m < row.size(); ++m) {
            row[m] *= weights[m];
            sum += row[m];
        }
        if (sum <= 0.0) {
            throw DegenerateInputError("reweight_rows: row " + std::to_string(i) +
                                       " has no mass after reweighting");
        }
        for (double& v : row) v /= sum;
    }
    return {posterior.space, std::move(out)};
}

// Turns source posteriors into target posteriors by prior-ratio reweighting.
inline PosteriorMatrix reweight_posterior(const PosteriorMatrix& source_posterior,
                                          const JointPrior& source_prior,
                                          const JointPrior& target_prior) {
    if (!(source_posterior.space == source_prior.space)) {
        throw InvalidInputError("reweight_posterior: posterior and prior spaces differ");
    }
    return reweight_rows(source_posterior, importance_weights(source_prior, target_prior));
}

// MAP-EM for the target meta-label prior from unlabeled-data posteriors.
//
// Responsibilities use the scaled likelihood p(x|m) ~ p_s(m|x)/p_s(m); the
// M-step adds the Dirichlet pseudo-counts alpha_m - 1 to the expected counts.
// Initialization is the source prior; convergence is declared on the L1
// movement of the prior estimate.
inline EmResult em_estimate_prior(const PosteriorMatrix& source_posterior,
                                  const JointPrior& source_prior,
                                  const EmConfig& config = {}) {
    validate(config);
    if (!(source_posterior.space == source_prior.space)) {
        throw InvalidInputError("em_estimate_prior: posterior and prior spaces differ");
    }
    const std::size_t n = source_posterior.values.rows();
    const int m_count = source_prior.space.size();
    if (n == 0) throw InvalidInputError("em_estimate_prior: empty posterior matrix");
    const std::vector<double> alpha = resolve_alpha(config, m_count);

    // ratio[i][m] = max(posterior, floor) / max(source prior, floor); with the
    // floors applied the ratios are bounded and linear-space E steps are safe.
    Matrix ratio(n, m_count);
    for (std::size_t i = 0; i < n; ++i) {
        auto post = source_posterior.values.row(i);
        auto out = ratio.row(i);
        for (int m = 0; m < m_count; ++m) {
            out[m] = std::max(post[m], kProbFloor) / std::max(source_prior.probs[m], kProbFloor);
        }
    }

    const double pseudo_total =
        std::accumulate(alpha.begin(), alpha.end(), 0.0) - static_cast<double>(m_count);

    auto objective = [&](const std::vector<double>& pi) {
        double value = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            auto r = ratio.row(i);
            double mix = 0.0;
            for (int m = 0; m < m_count; ++m) mix += pi[m] * r[m];
            value += std::log(mix);
        }
        for (int m = 0; m < m_count; ++m) {
            if (alpha[m] != 1.0) value += (alpha[m] - 1.0) * std::log(std::max(pi[m], kProbFloor));
        }
        return value;
    };

    std::vector<double> pi = source_prior.probs;
    for (double& p : pi) p = std::max(p, kProbFloor);
    double scale = std::accumulate(pi.begin(), pi.end(), 0.0);
    for (double& p : pi) p /= scale;

    EmResult result;
    result.log_likelihood_trace.push_back(objective(pi));
    std::vector<double> counts(m_count, 0.0);
    std::vector<double> weighted(m_count, 0.0);

    int iteration = 0;
    for (; iteration < config.max_iterations; ++iteration) {
        // E step: responsibilities r_i(m) ~ pi_m * ratio_im, accumulated into
        // expected counts in fixed row order.
        std::fill(counts.begin(), counts.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            auto r = ratio.row(i);
            double hi = 0.0;
            for (int m = 0; m < m_count; ++m) {
                weighted[m] = pi[m] * r[m];
                hi = std::max(hi, weighted[m]);
            }
            double sum = 0.0;
            for (int m = 0; m < m_count; ++m) {
                weighted[m] /= hi;
                sum += weighted[m];
            }
            for (int m = 0; m < m_count; ++m) counts[m] += weighted[m] / sum;
        }

        // M step: normalized pseudo-counts.
        const double total = static_cast<double>(n) + pseudo_total;
        double movement = 0.0;
        for (int m = 0; m < m_count; ++m) {
            const double next = (counts[m] + alpha[m] - 1.0) / total;
            if (!std::isfinite(next)) {
                throw NumericalError("em_estimate_prior: non-finite prior estimate", iteration);
            }
            movement += std::abs(next - pi[m]);
            pi[m] = next;
        }
        result.log_likelihood_trace.push_back(objective(pi));
        if (movement < config.tolerance) {
            ++iteration;
            break;
        }
    }

    // Expected counts at the returned estimate.
    std::fill(counts.begin(), counts.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        auto r = ratio.row(i);
        double sum = 0.0;
        for (int m = 0; m < m_count; ++m) {
            weighted[m] = pi[m] * r[m];
            sum += weighted[m];
        }
        for (int m = 0; m < m_count; ++m) counts[m] += weighted[m] / sum;
    }

    result.iterations = iteration;
    result.expected_counts = counts;
    result.target_prior = normalized_prior(source_prior.space, std::move(pi));
    return result;
}

// Projects an estimated joint prior onto a fixed class marginal:
// out[y, z] = marginal[y] * p(z | y).
inline JointPrior fix_class_marginal(const JointPrior& estimated_prior,
                                     std::span<const double> source_class_marginal) {
    const auto& space = estimated_prior.space;
    if (source_class_marginal.size() != static_cast<std::size_t>(space.num_classes)) {
        throw InvalidInputError("fix_class_marginal: marginal length does not match class count");
    }
    double marginal_sum = 0.0;
    for (double p : source_class_marginal) {
        if (!std::isfinite(p) || p < 0.0) {
            throw InvalidInputError("fix_class_marginal: marginal entries must be nonnegative");
        }
        marginal_sum += p;
    }
    if (std::abs(marginal_sum - 1.0) > 1e-9) {
        throw InvalidInputError("fix_class_marginal: class marginal must sum to 1");
    }

    std::vector<double> out(space.size());
    for (int y = 0; y < space.num_classes; ++y) {
        double row_mass = 0.0;
        for (int z = 0; z < space.num_groups; ++z) row_mass += estimated_prior.probs[space.encode(y, z)];
        if (row_mass <= 0.0) {
            throw DegenerateInputError("fix_class_marginal: class " + std::to_string(y) +
                                       " has zero estimated mass");
        }
        for (int z = 0; z < space.num_groups; ++z) {
            const int m = space.encode(y, z);
            out[m] = source_class_marginal[y] * estimated_prior.probs[m] / row_mass;
        }
    }
    return normalized_prior(space, std::move(out));
}

}  // namespace metashift
