#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "metashift/errors.hpp"

namespace metashift {

// Floor used whenever a possibly-zero probability enters a log or a
// denominator. Small enough to stay below every test tolerance.
inline constexpr double kProbFloor = 1e-12;

// Dense row-major matrix of doubles. Just the shapes the pipeline needs.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
    std::span<const double> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(),
                           [](double v) { return std::isfinite(v); });
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

// Index set over (class y, group z) pairs, flattened as m = y*K + z.
struct MetaLabelSpace {
    int num_classes = 0;
    int num_groups = 0;

    int size() const { return num_classes * num_groups; }

    int encode(int y, int z) const { return y * num_groups + z; }

    std::pair<int, int> decode(int m) const {
        return {m / num_groups, m % num_groups};
    }

    bool operator==(const MetaLabelSpace&) const = default;
};

inline MetaLabelSpace make_space(int num_classes, int num_groups) {
    if (num_classes < 1 || num_groups < 1) {
        throw InvalidInputError("meta-label space requires num_classes >= 1 and num_groups >= 1");
    }
    return {num_classes, num_groups};
}

// Probability vector over meta-labels.
struct JointPrior {
    MetaLabelSpace space;
    std::vector<double> probs;
};

inline JointPrior make_joint_prior(const MetaLabelSpace& space, std::vector<double> probs) {
    if (static_cast<int>(probs.size()) != space.size()) {
        throw InvalidInputError("prior length " + std::to_string(probs.size()) +
                                " does not match meta-label count " + std::to_string(space.size()));
    }
    double sum = 0.0;
    for (double p : probs) {
        if (!std::isfinite(p) || p < 0.0) {
            throw InvalidInputError("prior entries must be finite and nonnegative");
        }
        sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-12) {
        throw InvalidInputError("prior must sum to 1 within 1e-12, got " + std::to_string(sum));
    }
    return {space, std::move(probs)};
}

// Normalizes a nonnegative weight vector onto the simplex.
inline JointPrior normalized_prior(const MetaLabelSpace& space, std::vector<double> raw) {
    if (static_cast<int>(raw.size()) != space.size()) {
        throw InvalidInputError("weight length does not match meta-label count");
    }
    double sum = 0.0;
    for (double v : raw) {
        if (!std::isfinite(v) || v < 0.0) {
            throw InvalidInputError("weights must be finite and nonnegative");
        }
        sum += v;
    }
    if (sum <= 0.0) throw DegenerateInputError("cannot normalize an all-zero weight vector");
    for (double& v : raw) v /= sum;
    // One renormalization pass is not always exact; nudge the largest entry.
    double resum = 0.0;
    for (double v : raw) resum += v;
    auto largest = std::max_element(raw.begin(), raw.end());
    *largest += 1.0 - resum;
    return {space, std::move(raw)};
}

inline JointPrior uniform_prior(const MetaLabelSpace& space) {
    return {space, std::vector<double>(space.size(), 1.0 / space.size())};
}

inline std::vector<double> class_marginal(const JointPrior& prior) {
    std::vector<double> out(prior.space.num_classes, 0.0);
    for (int m = 0; m < prior.space.size(); ++m) {
        out[prior.space.decode(m).first] += prior.probs[m];
    }
    return out;
}

inline std::vector<double> group_marginal(const JointPrior& prior) {
    std::vector<double> out(prior.space.num_groups, 0.0);
    for (int m = 0; m < prior.space.size(); ++m) {
        out[prior.space.decode(m).second] += prior.probs[m];
    }
    return out;
}

// N x M logits, one row per example.
struct LogitsMatrix {
    MetaLabelSpace space;
    Matrix values;
};

inline LogitsMatrix make_logits(const MetaLabelSpace& space, Matrix values) {
    if (static_cast<int>(values.cols()) != space.size()) {
        throw InvalidInputError("logits width " + std::to_string(values.cols()) +
                                " does not match meta-label count " + std::to_string(space.size()));
    }
    if (!values.all_finite()) throw InvalidInputError("logits must be finite");
    return {space, std::move(values)};
}

// N x M row-stochastic matrix of meta-label probabilities.
struct PosteriorMatrix {
    MetaLabelSpace space;
    Matrix values;
};

inline PosteriorMatrix make_posterior(const MetaLabelSpace& space, Matrix values) {
    if (static_cast<int>(values.cols()) != space.size()) {
        throw InvalidInputError("posterior width does not match meta-label count");
    }
    for (std::size_t i = 0; i < values.rows(); ++i) {
        double sum = 0.0;
        for (double p : values.row(i)) {
            if (!std::isfinite(p) || p < 0.0 || p > 1.0) {
                throw InvalidInputError("posterior entries must lie in [0, 1]");
            }
            sum += p;
        }
        if (std::abs(sum - 1.0) > 1e-9) {
            throw InvalidInputError("posterior row " + std::to_string(i) +
                                    " sums to " + std::to_string(sum));
        }
    }
    return {space, std::move(values)};
}

inline double log_sum_exp(std::span<const double> values) {
    double hi = -std::numeric_limits<double>::infinity();
    for (double v : values) hi = std::max(hi, v);
    if (!std::isfinite(hi)) return hi;
    double sum = 0.0;
    for (double v : values) sum += std::exp(v - hi);
    return hi + std::log(sum);
}

// In-place stabilized softmax of one row.
inline void softmax_in_place(std::span<double> row) {
    double hi = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double& v : row) {
        v = std::exp(v - hi);
        sum += v;
    }
    for (double& v : row) v /= sum;
}

inline PosteriorMatrix softmax_rows(const LogitsMatrix& logits) {
    if (!logits.values.all_finite()) throw InvalidInputError("softmax_rows: logits must be finite");
    Matrix out = logits.values;
    for (std::size_t i = 0; i < out.rows(); ++i) softmax_in_place(out.row(i));
    return {logits.space, std::move(out)};
}

// Sums posterior mass over groups: entry (i, y) = sum_z p(i, (y, z)).
inline Matrix marginalize_classes(const PosteriorMatrix& posterior) {
    const auto& space = posterior.space;
    Matrix out(posterior.values.rows(), space.num_classes, 0.0);
    for (std::size_t i = 0; i < posterior.values.rows(); ++i) {
        auto row = posterior.values.row(i);
        for (int m = 0; m < space.size(); ++m) {
            out(i, m / space.num_groups) += row[m];
        }
    }
    return out;
}

// Argmax over the class marginal, ties broken by the lowest class index.
inline std::vector<int> predict_class(const PosteriorMatrix& posterior) {
    Matrix marginals = marginalize_classes(posterior);
    std::vector<int> out(marginals.rows());
    for (std::size_t i = 0; i < marginals.rows(); ++i) {
        auto row = marginals.row(i);
        int best = 0;
        for (int y = 1; y < static_cast<int>(row.size()); ++y) {
            if (row[y] > row[best]) best = y;
        }
        out[i] = best;
    }
    return out;
}

}  // namespace metashift
