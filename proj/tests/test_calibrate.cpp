#include "metashift/calibrate.hpp"

#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "metashift/core.hpp"
#include "metashift/rng.hpp"
#include "oracles.hpp"

using namespace metashift;

namespace {

LogitsMatrix random_logits(Rng& rng, const MetaLabelSpace& space, std::size_t n,
                           double scale = 2.0) {
    Matrix values(n, space.size());
    for (double& v : values.data()) v = scale * rng.next_gaussian();
    return {space, std::move(values)};
}

// Labels sampled from softmax(truth); `logits` handed to the fitter may be a
// distorted version of `truth`.
std::vector<int> sample_labels(Rng& rng, const LogitsMatrix& truth) {
    const PosteriorMatrix posterior = softmax_rows(truth);
    std::vector<int> labels(truth.values.rows());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const double u = rng.next_double();
        double cumulative = 0.0;
        int chosen = truth.space.size() - 1;
        for (int m = 0; m < truth.space.size(); ++m) {
            cumulative += posterior.values(i, m);
            if (u < cumulative) {
                chosen = m;
                break;
            }
        }
        labels[i] = chosen;
    }
    return labels;
}

LogitsMatrix scale_logits(const LogitsMatrix& logits, double factor) {
    Matrix scaled = logits.values;
    for (double& v : scaled.data()) v *= factor;
    return {logits.space, std::move(scaled)};
}

CalibrationFitConfig fit_config() {
    // Full-batch steps, so the rate sits well above the minibatch default.
    return {.learning_rate = 0.1, .max_epochs = 1000, .ema_decay = 0.1, .patience = 5,
            .holdout_fraction = 0.1};
}

}  // namespace

TEST(ApplyBcts, IdentityParamsMatchSoftmax) {
    Rng rng(3);
    const MetaLabelSpace space{2, 2};
    const LogitsMatrix logits = random_logits(rng, space, 32);
    const PosteriorMatrix direct = softmax_rows(logits);
    const PosteriorMatrix calibrated = apply_bcts(logits, identity_calibration(space));
    for (std::size_t i = 0; i < direct.values.rows(); ++i) {
        for (int m = 0; m < space.size(); ++m) {
            EXPECT_NEAR(calibrated.values(i, m), direct.values(i, m), 1e-15);
        }
    }
}

TEST(ApplyBcts, InfiniteTemperatureLimit) {
    const MetaLabelSpace space{1, 2};
    Matrix values(1, 2);
    values(0, 0) = 5.0;
    values(0, 1) = -5.0;
    const PosteriorMatrix out =
        apply_bcts({space, values}, make_calibration_params(1e9, {0.0, 0.0}));
    EXPECT_NEAR(out.values(0, 0), 0.5, 1e-8);
    EXPECT_NEAR(out.values(0, 1), 0.5, 1e-8);
}

TEST(ApplyBcts, TemperatureAndBias) {
    const MetaLabelSpace space{1, 2};
    Matrix values(1, 2, 0.0);
    const PosteriorMatrix out =
        apply_bcts({space, values}, make_calibration_params(2.0, {std::log(2.0), 0.0}));
    EXPECT_NEAR(out.values(0, 0), 2.0 / 3.0, 1e-12);
    EXPECT_NEAR(out.values(0, 1), 1.0 / 3.0, 1e-12);
}

TEST(ApplyBcts, RejectsNonPositiveTemperature) {
    const MetaLabelSpace space{1, 2};
    Matrix values(1, 2, 0.0);
    EXPECT_THROW(apply_bcts({space, values}, CalibrationParams{0.0, {0.0, 0.0}}),
                 InvalidInputError);
    EXPECT_THROW(apply_bcts({space, values}, CalibrationParams{-1.0, {0.0, 0.0}}),
                 InvalidInputError);
    EXPECT_THROW(make_calibration_params(0.0, {0.0, 0.0}), InvalidInputError);
}

TEST(ApplyBcts, BiasShiftInvariance) {
    Rng rng(5);
    const MetaLabelSpace space{2, 2};
    const LogitsMatrix logits = random_logits(rng, space, 16);
    const std::vector<double> bias{0.3, -0.1, 0.7, 0.2};
    std::vector<double> shifted = bias;
    for (double& b : shifted) b += 4.2;
    const PosteriorMatrix a = apply_bcts(logits, make_calibration_params(1.5, bias));
    const PosteriorMatrix b = apply_bcts(logits, make_calibration_params(1.5, shifted));
    for (std::size_t i = 0; i < a.values.rows(); ++i) {
        for (int m = 0; m < space.size(); ++m) {
            EXPECT_NEAR(a.values(i, m), b.values(i, m), 1e-12);
        }
    }
}

TEST(CalibrationParams, BiasStoredMeanCentered) {
    const CalibrationParams params = make_calibration_params(2.0, {1.0, 2.0, 3.0, 6.0});
    double sum = 0.0;
    for (double b : params.bias) sum += b;
    EXPECT_NEAR(sum, 0.0, 1e-12);
    EXPECT_NEAR(params.bias[1] - params.bias[0], 1.0, 1e-12);
}

TEST(NegativeLogLikelihood, KnownValues) {
    const MetaLabelSpace space{2, 2};
    Matrix one_hot(2, 4, 0.0);
    one_hot(0, 1) = 1.0;
    one_hot(1, 3) = 1.0;
    const std::vector<int> labels{1, 3};
    EXPECT_NEAR(negative_log_likelihood(make_posterior(space, one_hot), labels), 0.0, 1e-12);

    Matrix uniform(3, 4, 0.25);
    const std::vector<int> any{0, 2, 3};
    EXPECT_NEAR(negative_log_likelihood(make_posterior(space, uniform), any), std::log(4.0),
                1e-12);
}

TEST(NegativeLogLikelihood, HandComputedAverage) {
    const MetaLabelSpace space{1, 2};
    Matrix values(2, 2);
    values(0, 0) = 0.9;
    values(0, 1) = 0.1;
    values(1, 0) = 0.2;
    values(1, 1) = 0.8;
    const std::vector<int> labels{0, 1};
    // Independent scalar evaluation of -(ln 0.9 + ln 0.8) / 2.
    const double expected = -(std::log(0.9) + std::log(0.8)) / 2.0;
    EXPECT_NEAR(expected, 0.16425203348601803, 1e-15);
    EXPECT_NEAR(negative_log_likelihood(make_posterior(space, values), labels), expected, 1e-15);
}

TEST(NegativeLogLikelihood, RejectsLengthMismatch) {
    const MetaLabelSpace space{1, 2};
    Matrix values(2, 2, 0.5);
    const std::vector<int> labels{0};
    EXPECT_THROW(negative_log_likelihood(make_posterior(space, values), labels),
                 InvalidInputError);
}

TEST(FitBcts, GradientMatchesCentralDifferences) {
    Rng rng(17);
    const MetaLabelSpace space{2, 2};
    for (int trial = 0; trial < 20; ++trial) {
        const LogitsMatrix logits = random_logits(rng, space, 50);
        LogitsMatrix truth = logits;
        const std::vector<int> labels = sample_labels(rng, truth);
        const double u0 = 0.4 * rng.next_gaussian();
        std::vector<double> bias(space.size());
        for (double& b : bias) b = 0.5 * rng.next_gaussian();

        const BctsGradient grad = bcts_nll_gradient(logits, labels, u0, bias);

        auto nll_at = [&](double u, const std::vector<double>& b) {
            return bcts_nll_gradient(logits, labels, u, b).nll;
        };
        const double du = oracles::central_difference(
            [&](double u) { return nll_at(u, bias); }, u0);
        EXPECT_NEAR(grad.d_log_temperature, du,
                    1e-4 * std::max(1.0, std::abs(du)));
        for (int m = 0; m < space.size(); ++m) {
            std::vector<double> perturbed = bias;
            const double db = oracles::central_difference(
                [&](double b) {
                    perturbed[m] = b;
                    return nll_at(u0, perturbed);
                },
                bias[m]);
            perturbed[m] = bias[m];
            EXPECT_NEAR(grad.d_bias[m], db, 1e-4 * std::max(1.0, std::abs(db)));
        }
    }
}

TEST(FitBcts, RecoversIdentityWhenAlreadyCalibrated) {
    Rng rng(23);
    const MetaLabelSpace space{2, 2};
    const LogitsMatrix logits = random_logits(rng, space, 4000);
    const std::vector<int> labels = sample_labels(rng, logits);
    const CalibrationParams params = fit_bcts(logits, labels, fit_config());
    EXPECT_GE(params.temperature, 0.9);
    EXPECT_LE(params.temperature, 1.1);
    for (double b : params.bias) EXPECT_LE(std::abs(b), 0.1);

    const double fitted_nll = negative_log_likelihood(apply_bcts(logits, params), labels);
    const double identity_nll =
        negative_log_likelihood(softmax_rows(logits), labels);
    EXPECT_LE(fitted_nll, identity_nll + 1e-9);
}

TEST(FitBcts, RecoversTemperatureOfScaledLogits) {
    Rng rng(29);
    const MetaLabelSpace space{2, 2};
    const LogitsMatrix truth = random_logits(rng, space, 5000);
    const std::vector<int> labels = sample_labels(rng, truth);
    const LogitsMatrix scaled = scale_logits(truth, 3.0);

    const CalibrationParams params = fit_bcts(scaled, labels, fit_config());
    EXPECT_GE(params.temperature, 2.5);
    EXPECT_LE(params.temperature, 3.5);

    // Independent 1-D grid search over T with b = 0.
    double best_t = 1.0;
    double best_nll = std::numeric_limits<double>::infinity();
    for (double t = 0.5; t <= 6.0; t += 0.01) {
        Matrix tempered = scaled.values;
        for (double& v : tempered.data()) v /= t;
        const double nll =
            negative_log_likelihood(softmax_rows({space, tempered}), labels);
        if (nll < best_nll) {
            best_nll = nll;
            best_t = t;
        }
    }
    EXPECT_GE(best_t, 2.5);
    EXPECT_LE(best_t, 3.5);
    EXPECT_NEAR(params.temperature, best_t, 0.25);
}

TEST(FitBcts, NeverWorseThanIdentityProperty) {
    Rng rng(31);
    const MetaLabelSpace space{2, 3};
    for (int trial = 0; trial < 10; ++trial) {
        const LogitsMatrix truth = random_logits(rng, space, 200);
        const std::vector<int> labels = sample_labels(rng, truth);
        const LogitsMatrix distorted = scale_logits(truth, 0.5 + 3.0 * rng.next_double());
        const CalibrationParams params = fit_bcts(distorted, labels, fit_config());
        const double fitted = negative_log_likelihood(apply_bcts(distorted, params), labels);
        const double identity = negative_log_likelihood(softmax_rows(distorted), labels);
        EXPECT_LE(fitted, identity + 1e-9);
    }
}

TEST(FitBcts, InputValidation) {
    const MetaLabelSpace space{2, 2};
    Matrix empty(0, 4);
    EXPECT_THROW(fit_bcts({space, empty}, {}), InsufficientDataError);

    Matrix two_rows(2, 4, 0.0);
    EXPECT_THROW(fit_bcts({space, two_rows}, {0, 1}), InsufficientDataError);

    Matrix enough(6, 4, 0.0);
    EXPECT_THROW(fit_bcts({space, enough}, {0, 1, 2, 3, 4, 0}), InvalidInputError);
    EXPECT_THROW(fit_bcts({space, enough}, {0, 1}), InvalidInputError);
}
