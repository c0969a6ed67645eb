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

// Bias-corrected temperature scaling: p(m|x) ~ exp(l_m / T + b_m).
// The bias is stored mean-centered; a common offset cancels in the softmax.
struct CalibrationParams {
    double temperature = 1.0;
    std::vector<double> bias;
};

inline CalibrationParams make_calibration_params(double temperature, std::vector<double> bias) {
    if (!std::isfinite(temperature) || temperature <= 0.0) {
        throw InvalidInputError("calibration temperature must be positive and finite");
    }
    double mean = 0.0;
    for (double b : bias) {
        if (!std::isfinite(b)) throw InvalidInputError("calibration bias must be finite");
        mean += b;
    }
    if (!bias.empty()) {
        mean /= static_cast<double>(bias.size());
        for (double& b : bias) b -= mean;
    }
    return {temperature, std::move(bias)};
}

inline CalibrationParams identity_calibration(const MetaLabelSpace& space) {
    return {1.0, std::vector<double>(space.size(), 0.0)};
}

struct CalibrationFitConfig {
    double learning_rate = 1e-3;
    int max_epochs = 1000;
    // Weight kept from the previous smoothed loss: ema' = decay*ema + (1-decay)*loss.
    double ema_decay = 0.1;
    int patience = 5;
    double holdout_fraction = 0.1;
};

inline void validate(const CalibrationFitConfig& config) {
    if (config.learning_rate <= 0.0) throw InvalidInputError("learning_rate must be positive");
    if (config.max_epochs < 1) throw InvalidInputError("max_epochs must be positive");
    if (config.ema_decay <= 0.0 || config.ema_decay >= 1.0)
        throw InvalidInputError("ema_decay must lie in (0, 1)");
    if (config.patience < 1) throw InvalidInputError("patience must be positive");
    if (config.holdout_fraction <= 0.0 || config.holdout_fraction >= 1.0)
        throw InvalidInputError("holdout_fraction must lie in (0, 1)");
}

inline PosteriorMatrix apply_bcts(const LogitsMatrix& logits, const CalibrationParams& params) {
    if (!std::isfinite(params.temperature) || params.temperature <= 0.0) {
        throw InvalidInputError("apply_bcts: temperature must be positive");
    }
    if (static_cast<int>(params.bias.size()) != logits.space.size()) {
        throw InvalidInputError("apply_bcts: bias length does not match meta-label count");
    }
    Matrix scaled = logits.values;
    for (std::size_t i = 0; i < scaled.rows(); ++i) {
        auto row = scaled.row(i);
        for (std::size_t m = 0; m < row.size(); ++m) {
            row[m] = row[m] / params.temperature + params.bias[m];
        }
    }
    return softmax_rows({logits.space, std::move(scaled)});
}

inline double negative_log_likelihood(const PosteriorMatrix& posterior,
                                      std::span<const int> meta_labels) {
    if (posterior.values.rows() != meta_labels.size()) {
        throw InvalidInputError("negative_log_likelihood: posterior rows and label count differ");
    }
    if (meta_labels.empty()) throw InvalidInputError("negative_log_likelihood: empty input");
    double total = 0.0;
    for (std::size_t i = 0; i < meta_labels.size(); ++i) {
        const int label = meta_labels[i];
        if (label < 0 || label >= posterior.space.size()) {
            throw InvalidInputError("negative_log_likelihood: label out of range");
        }
        total -= std::log(std::max(posterior.values(i, label), kProbFloor));
    }
    return total / static_cast<double>(meta_labels.size());
}

struct BctsGradient {
    double nll = 0.0;
    double d_log_temperature = 0.0;
    std::vector<double> d_bias;
};

// NLL and its gradient in (u, b) with u = ln T; unconstrained in u keeps T positive.
inline BctsGradient bcts_nll_gradient(const LogitsMatrix& logits,
                                      std::span<const int> meta_labels,
                                      double log_temperature,
                                      std::span<const double> bias) {
    const std::size_t n = logits.values.rows();
    const int m_count = logits.space.size();
    const double inv_t = std::exp(-log_temperature);

    BctsGradient grad;
    grad.d_bias.assign(m_count, 0.0);
    std::vector<double> row(m_count);
    for (std::size_t i = 0; i < n; ++i) {
        auto l = logits.values.row(i);
        for (int m = 0; m < m_count; ++m) row[m] = l[m] * inv_t + bias[m];
        const double lse = log_sum_exp(row);
        const int label = meta_labels[i];
        grad.nll += lse - row[label];
        for (int m = 0; m < m_count; ++m) {
            const double p = std::exp(row[m] - lse);
            const double residual = p - (m == label ? 1.0 : 0.0);
            grad.d_bias[m] += residual;
            grad.d_log_temperature += residual * (-l[m] * inv_t);
        }
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    grad.nll *= inv_n;
    grad.d_log_temperature *= inv_n;
    for (double& g : grad.d_bias) g *= inv_n;
    return grad;
}

// Full-batch gradient descent on (ln T, b) from the identity, with EMA early
// stopping. Returns the best iterate seen, so the fitted NLL never exceeds
// the identity NLL.
inline CalibrationParams fit_bcts(const LogitsMatrix& logits,
                                  const std::vector<int>& meta_labels,
                                  const CalibrationFitConfig& config = {}) {
    validate(config);
    const std::size_t n = logits.values.rows();
    const int m_count = logits.space.size();
    if (n != meta_labels.size()) {
        throw InvalidInputError("fit_bcts: logits rows and label count differ");
    }
    if (n < static_cast<std::size_t>(m_count)) {
        throw InsufficientDataError("fit_bcts: need at least " + std::to_string(m_count) +
                                    " samples, got " + std::to_string(n));
    }
    for (int label : meta_labels) {
        if (label < 0 || label >= m_count) {
            throw InvalidInputError("fit_bcts: label out of range [0, " +
                                    std::to_string(m_count) + ")");
        }
    }

    double u = 0.0;
    std::vector<double> bias(m_count, 0.0);
    double best_nll = std::numeric_limits<double>::infinity();
    double best_u = u;
    std::vector<double> best_bias = bias;

    double ema = 0.0;
    double best_ema = std::numeric_limits<double>::infinity();
    int stall = 0;
    for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
        BctsGradient grad = bcts_nll_gradient(logits, meta_labels, u, bias);
        if (!std::isfinite(grad.nll)) {
            throw NumericalError("fit_bcts: non-finite loss", epoch);
        }
        if (grad.nll < best_nll) {
            best_nll = grad.nll;
            best_u = u;
            best_bias = bias;
        }

        ema = epoch == 0 ? grad.nll : config.ema_decay * ema + (1.0 - config.ema_decay) * grad.nll;
        if (ema < best_ema - 1e-15) {
            best_ema = ema;
            stall = 0;
        } else if (++stall >= config.patience) {
            break;
        }

        u -= config.learning_rate * grad.d_log_temperature;
        for (int m = 0; m < m_count; ++m) bias[m] -= config.learning_rate * grad.d_bias[m];
    }
    return make_calibration_params(std::exp(best_u), std::move(best_bias));
}

}  // namespace metashift
