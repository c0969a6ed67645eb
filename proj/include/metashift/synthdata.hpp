#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "metashift/core.hpp"
#include "metashift/errors.hpp"
#include "metashift/rng.hpp"

namespace metashift {

// The two extreme joint priors: perfect positive and perfect negative
// coupling between the class label and the group label.
struct AnchorPair {
    JointPrior p0;
    JointPrior p1;
};

inline AnchorPair default_anchors() {
    const MetaLabelSpace space{2, 2};
    return {make_joint_prior(space, {0.5, 0.0, 0.0, 0.5}),
            make_joint_prior(space, {0.0, 0.5, 0.5, 0.0})};
}

// Mixture family p_lambda = (1 - lambda) * p0 + lambda * p1, lambda in [0, 1].
inline JointPrior lambda_prior(const AnchorPair& anchors, double lambda) {
    if (!std::isfinite(lambda) || lambda < 0.0 || lambda > 1.0) {
        throw InvalidInputError("lambda must lie in [0, 1], got " + std::to_string(lambda));
    }
    if (!(anchors.p0.space == anchors.p1.space)) {
        throw InvalidInputError("anchor priors live on different spaces");
    }
    std::vector<double> probs(anchors.p0.probs.size());
    for (std::size_t m = 0; m < probs.size(); ++m) {
        probs[m] = (1.0 - lambda) * anchors.p0.probs[m] + lambda * anchors.p1.probs[m];
    }
    return normalized_prior(anchors.p0.space, std::move(probs));
}

// Lower-triangular Cholesky factor; fails on asymmetry or non-PD input.
inline Matrix cholesky_factor(const Matrix& covariance) {
    const std::size_t d = covariance.rows();
    if (covariance.cols() != d) throw SpecValidationError("covariance must be square");
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < i; ++j) {
            if (std::abs(covariance(i, j) - covariance(j, i)) > 1e-12) {
                throw SpecValidationError("covariance is not symmetric within 1e-12");
            }
        }
    }
    Matrix lower(d, d, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double sum = covariance(i, j);
            for (std::size_t k = 0; k < j; ++k) sum -= lower(i, k) * lower(j, k);
            if (i == j) {
                if (sum <= 0.0 || !std::isfinite(sum)) {
                    throw SpecValidationError("covariance is not positive definite");
                }
                lower(i, i) = std::sqrt(sum);
            } else {
                lower(i, j) = sum / lower(j, j);
            }
        }
    }
    return lower;
}

// Gaussian generative model p(x | y, z): one mean and covariance per
// meta-label. This conditional is shared by every prior in the family, so
// the expanded label-shift assumption holds by construction.
struct GaussianGenerativeSpec {
    MetaLabelSpace space;
    int dim = 0;
    std::vector<std::vector<double>> means;   // size M, each of length dim
    std::vector<Matrix> covariances;          // size M, each dim x dim
};

inline GaussianGenerativeSpec make_gaussian_spec(const MetaLabelSpace& space, int dim,
                                                 std::vector<std::vector<double>> means,
                                                 std::vector<Matrix> covariances) {
    if (dim < 1) throw SpecValidationError("feature dimension must be positive");
    if (static_cast<int>(means.size()) != space.size() ||
        static_cast<int>(covariances.size()) != space.size()) {
        throw SpecValidationError("spec needs one mean and covariance per meta-label");
    }
    for (const auto& mean : means) {
        if (static_cast<int>(mean.size()) != dim) {
            throw SpecValidationError("mean dimension mismatch");
        }
        for (double v : mean) {
            if (!std::isfinite(v)) throw SpecValidationError("means must be finite");
        }
    }
    for (const auto& cov : covariances) {
        if (static_cast<int>(cov.rows()) != dim) throw SpecValidationError("covariance dimension mismatch");
        cholesky_factor(cov);  // validates symmetry and positive definiteness
    }
    return {space, dim, std::move(means), std::move(covariances)};
}

// Built-in benchmark spec: a weak class-aligned direction and a strong
// group-aligned direction, so the group feature acts as a shortcut.
inline GaussianGenerativeSpec gauss_cmnist_spec() {
    const MetaLabelSpace space{2, 2};
    std::vector<std::vector<double>> means;
    for (int m = 0; m < space.size(); ++m) {
        auto [y, z] = space.decode(m);
        means.push_back({1.0 * (2 * y - 1), 3.0 * (2 * z - 1)});
    }
    Matrix identity(2, 2, 0.0);
    identity(0, 0) = identity(1, 1) = 1.0;
    return make_gaussian_spec(space, 2, std::move(means), {identity, identity, identity, identity});
}

struct DatasetProvenance {
    JointPrior prior;
    std::uint64_t seed = 0;
};

struct LabeledDataset {
    Matrix features;      // N x D
    std::vector<int> y;   // class labels
    std::vector<int> z;   // group labels
    DatasetProvenance provenance;
};

inline std::vector<int> meta_labels_of(const LabeledDataset& dataset, const MetaLabelSpace& space) {
    std::vector<int> labels(dataset.y.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        labels[i] = space.encode(dataset.y[i], dataset.z[i]);
    }
    return labels;
}

// Draws m ~ Categorical(prior), then x ~ N(mean_m, cov_m) via the Cholesky
// factor. Deterministic per seed.
inline LabeledDataset sample_dataset(const JointPrior& prior, const GaussianGenerativeSpec& spec,
                                     int n, std::uint64_t seed) {
    if (!(prior.space == spec.space)) {
        throw InvalidInputError("sample_dataset: prior and spec spaces differ");
    }
    if (n < 0) throw InvalidInputError("sample_dataset: n must be nonnegative");

    std::vector<Matrix> factors;
    factors.reserve(spec.covariances.size());
    for (const auto& cov : spec.covariances) factors.push_back(cholesky_factor(cov));

    std::vector<double> cumulative(prior.probs.size());
    std::partial_sum(prior.probs.begin(), prior.probs.end(), cumulative.begin());
    cumulative.back() = 1.0;

    LabeledDataset dataset;
    dataset.features = Matrix(static_cast<std::size_t>(n), spec.dim);
    dataset.y.resize(n);
    dataset.z.resize(n);
    dataset.provenance = {prior, seed};

    Rng rng(seed);
    std::vector<double> standard(spec.dim);
    for (int i = 0; i < n; ++i) {
        const double u = rng.next_double();
        const int m = static_cast<int>(
            std::lower_bound(cumulative.begin(), cumulative.end(), u) - cumulative.begin());
        auto [y, z] = spec.space.decode(m);
        dataset.y[i] = y;
        dataset.z[i] = z;
        for (int d = 0; d < spec.dim; ++d) standard[d] = rng.next_gaussian();
        auto row = dataset.features.row(i);
        const auto& lower = factors[m];
        for (int r = 0; r < spec.dim; ++r) {
            double value = spec.means[m][r];
            for (int c = 0; c <= r; ++c) value += lower(r, c) * standard[c];
            row[r] = value;
        }
    }
    return dataset;
}

// Exact Bayes posterior over meta-labels under the generative spec:
// p(m | x) ~ prior[m] * N(x; mean_m, cov_m), evaluated in log space.
// Zero-prior cells stay exactly zero.
inline PosteriorMatrix oracle_posterior(const Matrix& features, const GaussianGenerativeSpec& spec,
                                        const JointPrior& prior) {
    if (!(prior.space == spec.space)) {
        throw InvalidInputError("oracle_posterior: prior and spec spaces differ");
    }
    if (static_cast<int>(features.cols()) != spec.dim) {
        throw InvalidInputError("oracle_posterior: feature dimension mismatch");
    }
    const int m_count = spec.space.size();
    std::vector<Matrix> factors;
    std::vector<double> log_norm(m_count);
    for (int m = 0; m < m_count; ++m) {
        factors.push_back(cholesky_factor(spec.covariances[m]));
        double log_det = 0.0;
        for (int d = 0; d < spec.dim; ++d) log_det += 2.0 * std::log(factors[m](d, d));
        log_norm[m] = -0.5 * (spec.dim * std::log(2.0 * std::numbers::pi) + log_det);
    }

    Matrix out(features.rows(), m_count);
    std::vector<double> diff(spec.dim), solved(spec.dim);
    std::vector<double> log_terms(m_count);
    for (std::size_t i = 0; i < features.rows(); ++i) {
        auto x = features.row(i);
        for (int m = 0; m < m_count; ++m) {
            if (prior.probs[m] <= 0.0) {
                log_terms[m] = -std::numeric_limits<double>::infinity();
                continue;
            }
            for (int d = 0; d < spec.dim; ++d) diff[d] = x[d] - spec.means[m][d];
            // Forward substitution L * s = diff; quadratic form is |s|^2.
            const auto& lower = factors[m];
            double quad = 0.0;
            for (int r = 0; r < spec.dim; ++r) {
                double value = diff[r];
                for (int c = 0; c < r; ++c) value -= lower(r, c) * solved[c];
                solved[r] = value / lower(r, r);
                quad += solved[r] * solved[r];
            }
            log_terms[m] = std::log(prior.probs[m]) + log_norm[m] - 0.5 * quad;
        }
        const double lse = log_sum_exp(log_terms);
        auto row = out.row(i);
        for (int m = 0; m < m_count; ++m) {
            row[m] = std::isfinite(log_terms[m]) ? std::exp(log_terms[m] - lse) : 0.0;
        }
    }
    return {spec.space, std::move(out)};
}

}  // namespace metashift
