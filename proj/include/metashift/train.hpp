#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "metashift/core.hpp"
#include "metashift/errors.hpp"
#include "metashift/rng.hpp"

namespace metashift {

enum class TrainingMode { kErm, kLogitAdjusted };

inline std::string to_string(TrainingMode mode) {
    return mode == TrainingMode::kErm ? "erm" : "logit_adjusted";
}

inline TrainingMode training_mode_from_string(const std::string& name) {
    if (name == "erm") return TrainingMode::kErm;
    if (name == "logit_adjusted") return TrainingMode::kLogitAdjusted;
    throw InvalidInputError("unknown training mode '" + name + "' (erm | logit_adjusted)");
}

// Linear softmax classifier over the meta-label space. Features are
// standardized with statistics frozen at training time. In logit-adjusted
// mode the raw head g(x) approximates the balanced posterior; predict_logits
// adds log(training_prior) back so callers always see source-posterior logits.
struct LinearSoftmaxModel {
    MetaLabelSpace space;
    int dim = 0;
    Matrix weights;                    // M x D
    std::vector<double> bias;          // M
    TrainingMode mode = TrainingMode::kErm;
    JointPrior training_prior;
    std::vector<double> feature_mean;  // D
    std::vector<double> feature_scale; // D
};

struct TrainConfig {
    double learning_rate = 1e-3;
    int batch_size = 64;
    int max_epochs = 5000;
    double ema_decay = 0.1;  // weight kept from the previous smoothed loss
    int patience = 5;
    double l2 = 0.0;
    std::uint64_t seed = 0;
};

inline void validate(const TrainConfig& config) {
    if (config.learning_rate <= 0.0) throw InvalidInputError("learning_rate must be positive");
    if (config.batch_size < 1) throw InvalidInputError("batch_size must be positive");
    if (config.max_epochs < 1) throw InvalidInputError("max_epochs must be positive");
    if (config.ema_decay <= 0.0 || config.ema_decay >= 1.0)
        throw InvalidInputError("ema_decay must lie in (0, 1)");
    if (config.patience < 1) throw InvalidInputError("patience must be positive");
    if (config.l2 < 0.0) throw InvalidInputError("l2 must be nonnegative");
}

struct SoftmaxLossGrad {
    double loss = 0.0;
    Matrix d_weights;            // M x D
    std::vector<double> d_bias;  // M
};

// Mean cross-entropy and gradient of softmax(W x + b + offset) over the
// given rows. `offsets` is the per-meta-label logit adjustment (empty = 0).
inline SoftmaxLossGrad softmax_xent_loss_grad(const Matrix& features,
                                              std::span<const int> labels,
                                              std::span<const std::size_t> rows,
                                              const Matrix& weights,
                                              std::span<const double> bias,
                                              std::span<const double> offsets,
                                              double l2 = 0.0) {
    const int m_count = static_cast<int>(weights.rows());
    const int dim = static_cast<int>(weights.cols());
    SoftmaxLossGrad grad;
    grad.d_weights = Matrix(m_count, dim, 0.0);
    grad.d_bias.assign(m_count, 0.0);
    if (rows.empty()) throw InvalidInputError("softmax_xent_loss_grad: empty batch");

    std::vector<double> logits(m_count);
    for (std::size_t row_index : rows) {
        auto x = features.row(row_index);
        for (int m = 0; m < m_count; ++m) {
            double value = bias[m] + (offsets.empty() ? 0.0 : offsets[m]);
            for (int d = 0; d < dim; ++d) value += weights(m, d) * x[d];
            logits[m] = value;
        }
        const double lse = log_sum_exp(logits);
        const int label = labels[row_index];
        grad.loss += lse - logits[label];
        for (int m = 0; m < m_count; ++m) {
            const double residual = std::exp(logits[m] - lse) - (m == label ? 1.0 : 0.0);
            grad.d_bias[m] += residual;
            for (int d = 0; d < dim; ++d) grad.d_weights(m, d) += residual * x[d];
        }
    }
    const double inv_n = 1.0 / static_cast<double>(rows.size());
    grad.loss *= inv_n;
    for (double& g : grad.d_bias) g *= inv_n;
    for (double& g : grad.d_weights.data()) g *= inv_n;
    if (l2 > 0.0) {
        double penalty = 0.0;
        for (std::size_t k = 0; k < weights.data().size(); ++k) {
            penalty += weights.data()[k] * weights.data()[k];
            grad.d_weights.data()[k] += l2 * weights.data()[k];
        }
        grad.loss += 0.5 * l2 * penalty;
    }
    return grad;
}

namespace detail {

inline double dataset_nll(const Matrix& features, std::span<const int> labels,
                          std::span<const std::size_t> rows, const Matrix& weights,
                          std::span<const double> bias, std::span<const double> offsets) {
    const int m_count = static_cast<int>(weights.rows());
    const int dim = static_cast<int>(weights.cols());
    std::vector<double> logits(m_count);
    double total = 0.0;
    for (std::size_t row_index : rows) {
        auto x = features.row(row_index);
        for (int m = 0; m < m_count; ++m) {
            double value = bias[m] + (offsets.empty() ? 0.0 : offsets[m]);
            for (int d = 0; d < dim; ++d) value += weights(m, d) * x[d];
            logits[m] = value;
        }
        total += log_sum_exp(logits) - logits[labels[row_index]];
    }
    return total / static_cast<double>(rows.size());
}

}  // namespace detail

// Minibatch gradient descent on the softmax cross-entropy, with the logit
// adjustment baked into the loss in kLogitAdjusted mode. Early stopping
// watches the EMA of the validation loss (10% split, derived from the seed).
inline LinearSoftmaxModel train_softmax(const Matrix& features, const std::vector<int>& meta_labels,
                                        TrainingMode mode, const TrainConfig& config,
                                        const JointPrior& prior) {
    validate(config);
    const std::size_t n = features.rows();
    const int dim = static_cast<int>(features.cols());
    const int m_count = prior.space.size();
    if (n == 0 || dim == 0) throw InvalidInputError("train_softmax: empty feature matrix");
    if (meta_labels.size() != n) throw InvalidInputError("train_softmax: feature/label count mismatch");
    if (!features.all_finite()) throw InvalidInputError("train_softmax: features must be finite");
    std::vector<std::size_t> class_counts(m_count, 0);
    for (int label : meta_labels) {
        if (label < 0 || label >= m_count) throw InvalidInputError("train_softmax: label out of range");
        ++class_counts[label];
    }
    for (int m = 0; m < m_count; ++m) {
        if (class_counts[m] > 0 && prior.probs[m] <= 0.0) {
            throw InvalidInputError("train_softmax: prior must be positive on observed labels");
        }
    }

    Rng rng(config.seed);

    // Deterministic shuffle, then 90/10 train/validation split.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = n; i > 1; --i) {
        std::swap(order[i - 1], order[rng.next_below(i)]);
    }
    const std::size_t val_count = n / 10;
    const std::size_t train_count = n - val_count;
    std::vector<std::size_t> train_rows(order.begin(), order.begin() + train_count);
    std::vector<std::size_t> val_rows(order.begin() + train_count, order.end());

    // Standardization statistics from the training split.
    std::vector<double> mean(dim, 0.0), scale(dim, 0.0);
    for (std::size_t row : train_rows) {
        auto x = features.row(row);
        for (int d = 0; d < dim; ++d) mean[d] += x[d];
    }
    for (double& v : mean) v /= static_cast<double>(train_count);
    for (std::size_t row : train_rows) {
        auto x = features.row(row);
        for (int d = 0; d < dim; ++d) scale[d] += (x[d] - mean[d]) * (x[d] - mean[d]);
    }
    for (double& v : scale) {
        v = std::sqrt(v / static_cast<double>(train_count));
        if (v < 1e-12) v = 1.0;  // constant feature
    }
    Matrix standardized(n, dim);
    for (std::size_t i = 0; i < n; ++i) {
        auto src = features.row(i);
        auto dst = standardized.row(i);
        for (int d = 0; d < dim; ++d) dst[d] = (src[d] - mean[d]) / scale[d];
    }

    std::vector<double> offsets;
    if (mode == TrainingMode::kLogitAdjusted) {
        offsets.resize(m_count);
        for (int m = 0; m < m_count; ++m) offsets[m] = std::log(std::max(prior.probs[m], kProbFloor));
    }

    Matrix weights(m_count, dim, 0.0);
    std::vector<double> bias(m_count, 0.0);
    const auto& stop_rows = val_rows.empty() ? train_rows : val_rows;

    double ema = 0.0;
    double best_ema = std::numeric_limits<double>::infinity();
    int stall = 0;
    std::vector<std::size_t> batch;
    for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
        for (std::size_t i = train_count; i > 1; --i) {
            std::swap(train_rows[i - 1], train_rows[rng.next_below(i)]);
        }
        for (std::size_t start = 0; start < train_count;
             start += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t stop =
                std::min(train_count, start + static_cast<std::size_t>(config.batch_size));
            batch.assign(train_rows.begin() + start, train_rows.begin() + stop);
            SoftmaxLossGrad grad = softmax_xent_loss_grad(standardized, meta_labels, batch,
                                                          weights, bias, offsets, config.l2);
            if (!std::isfinite(grad.loss)) {
                throw NumericalError("train_softmax: non-finite loss", epoch);
            }
            for (std::size_t k = 0; k < weights.data().size(); ++k) {
                weights.data()[k] -= config.learning_rate * grad.d_weights.data()[k];
            }
            for (int m = 0; m < m_count; ++m) bias[m] -= config.learning_rate * grad.d_bias[m];
        }

        const double val_loss =
            detail::dataset_nll(standardized, meta_labels, stop_rows, weights, bias, offsets);
        if (!std::isfinite(val_loss)) throw NumericalError("train_softmax: non-finite loss", epoch);
        ema = epoch == 0 ? val_loss : config.ema_decay * ema + (1.0 - config.ema_decay) * val_loss;
        if (ema < best_ema - 1e-15) {
            best_ema = ema;
            stall = 0;
        } else if (++stall >= config.patience) {
            break;
        }
    }

    return {prior.space, dim,       std::move(weights), std::move(bias),
            mode,        prior,     std::move(mean),    std::move(scale)};
}

// Source-posterior logits: W x~ + b, plus log(training_prior) in
// logit-adjusted mode so downstream always consumes p_s(m | x) logits.
inline LogitsMatrix predict_logits(const LinearSoftmaxModel& model, const Matrix& features) {
    if (static_cast<int>(features.cols()) != model.dim) {
        throw InvalidInputError("predict_logits: expected feature dimension " +
                                std::to_string(model.dim) + ", got " +
                                std::to_string(features.cols()));
    }
    const int m_count = model.space.size();
    Matrix out(features.rows(), m_count);
    std::vector<double> x(model.dim);
    for (std::size_t i = 0; i < features.rows(); ++i) {
        auto src = features.row(i);
        for (int d = 0; d < model.dim; ++d) {
            x[d] = (src[d] - model.feature_mean[d]) / model.feature_scale[d];
        }
        auto row = out.row(i);
        for (int m = 0; m < m_count; ++m) {
            double value = model.bias[m];
            for (int d = 0; d < model.dim; ++d) value += model.weights(m, d) * x[d];
            if (model.mode == TrainingMode::kLogitAdjusted) {
                value += std::log(std::max(model.training_prior.probs[m], kProbFloor));
            }
            row[m] = value;
        }
    }
    return make_logits(model.space, std::move(out));
}

struct SubsampleResult {
    Matrix features;
    std::vector<int> meta_labels;
    std::vector<std::string> warnings;
};

// Group-balanced subsampling: min-count examples drawn uniformly without
// replacement from every nonempty group. Empty groups are skipped with a
// recorded warning.
inline SubsampleResult subsample_balanced(const Matrix& features,
                                          const std::vector<int>& meta_labels,
                                          const MetaLabelSpace& space, std::uint64_t seed) {
    if (features.rows() != meta_labels.size()) {
        throw InvalidInputError("subsample_balanced: feature/label count mismatch");
    }
    const int m_count = space.size();
    std::vector<std::vector<std::size_t>> by_group(m_count);
    for (std::size_t i = 0; i < meta_labels.size(); ++i) {
        if (meta_labels[i] < 0 || meta_labels[i] >= m_count) {
            throw InvalidInputError("subsample_balanced: label out of range");
        }
        by_group[meta_labels[i]].push_back(i);
    }

    std::size_t min_count = std::numeric_limits<std::size_t>::max();
    SubsampleResult result;
    for (int m = 0; m < m_count; ++m) {
        if (by_group[m].empty()) {
            result.warnings.push_back("group " + std::to_string(m) + " is empty; skipped");
        } else {
            min_count = std::min(min_count, by_group[m].size());
        }
    }
    if (min_count == std::numeric_limits<std::size_t>::max()) {
        throw InvalidInputError("subsample_balanced: all groups are empty");
    }

    Rng rng(seed);
    std::vector<std::size_t> kept;
    for (int m = 0; m < m_count; ++m) {
        auto& rows = by_group[m];
        if (rows.empty()) continue;
        // Partial Fisher-Yates: the first min_count entries are a uniform
        // without-replacement sample.
        for (std::size_t i = 0; i < min_count; ++i) {
            std::swap(rows[i], rows[i + rng.next_below(rows.size() - i)]);
        }
        kept.insert(kept.end(), rows.begin(), rows.begin() + min_count);
    }

    result.features = Matrix(kept.size(), features.cols());
    result.meta_labels.resize(kept.size());
    for (std::size_t i = 0; i < kept.size(); ++i) {
        auto src = features.row(kept[i]);
        auto dst = result.features.row(i);
        std::copy(src.begin(), src.end(), dst.begin());
        result.meta_labels[i] = meta_labels[kept[i]];
    }
    return result;
}

// Removes the class-group correlation from logits by subtracting
// log(prior[m] / (p(y) * p(z))). Identity when the prior factorizes.
inline LogitsMatrix adjust_nonuniform_marginals(const LogitsMatrix& logits,
                                                const JointPrior& prior) {
    if (!(logits.space == prior.space)) {
        throw InvalidInputError("adjust_nonuniform_marginals: spaces differ");
    }
    const auto y_marginal = class_marginal(prior);
    const auto z_marginal = group_marginal(prior);
    const int m_count = prior.space.size();
    std::vector<double> offset(m_count);
    for (int m = 0; m < m_count; ++m) {
        if (prior.probs[m] <= 0.0) {
            throw SupportViolationError("adjust_nonuniform_marginals: prior cell " +
                                        std::to_string(m) + " is zero");
        }
        auto [y, z] = prior.space.decode(m);
        offset[m] = std::log(prior.probs[m] / (y_marginal[y] * z_marginal[z]));
    }
    Matrix out = logits.values;
    for (std::size_t i = 0; i < out.rows(); ++i) {
        auto row = out.row(i);
        for (int m = 0; m < m_count; ++m) row[m] -= offset[m];
    }
    return {logits.space, std::move(out)};
}

}  // namespace metashift
