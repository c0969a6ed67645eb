#include "metashift/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "metashift/calibrate.hpp"
#include "metashift/core.hpp"
#include "metashift/rng.hpp"
#include "metashift/synthdata.hpp"
#include "oracles.hpp"

using namespace metashift;

namespace {

TrainConfig quick_config(std::uint64_t seed) {
    TrainConfig config;
    config.learning_rate = 0.1;
    config.batch_size = 16;
    config.max_epochs = 2000;
    config.seed = seed;
    return config;
}

LinearSoftmaxModel passthrough_model(const MetaLabelSpace& space, int dim, Matrix weights,
                                     std::vector<double> bias, TrainingMode mode,
                                     const JointPrior& prior) {
    return {space,
            dim,
            std::move(weights),
            std::move(bias),
            mode,
            prior,
            std::vector<double>(dim, 0.0),
            std::vector<double>(dim, 1.0)};
}

// Meta-label argmax accuracy (predict_class marginalizes over groups).
int count_correct(const LinearSoftmaxModel& model, const Matrix& features,
                  const std::vector<int>& labels) {
    const LogitsMatrix logits = predict_logits(model, features);
    int correct = 0;
    for (std::size_t i = 0; i < features.rows(); ++i) {
        auto row = logits.values.row(i);
        int best = 0;
        for (int m = 1; m < model.space.size(); ++m) {
            if (row[m] > row[best]) best = m;
        }
        correct += best == labels[i];
    }
    return correct;
}

}  // namespace

TEST(TrainSoftmax, SeparableDataReachesPerfectAccuracy) {
    const MetaLabelSpace space{1, 2};
    Rng rng(3);
    const std::size_t n = 60;
    Matrix features(n, 2);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int label = static_cast<int>(i % 2);
        labels[i] = label;
        features(i, 0) = (label == 0 ? -2.0 : 2.0) + 0.3 * rng.next_gaussian();
        features(i, 1) = rng.next_gaussian();
    }
    const LinearSoftmaxModel model = train_softmax(
        features, labels, TrainingMode::kErm, quick_config(5), uniform_prior(space));
    EXPECT_EQ(count_correct(model, features, labels), static_cast<int>(n));

    const double final_loss =
        negative_log_likelihood(softmax_rows(predict_logits(model, features)), labels);
    EXPECT_LT(final_loss, 0.1);
    EXPECT_LE(final_loss, std::log(2.0) + 1e-9);  // never worse than initialization
}

TEST(TrainSoftmax, GradientMatchesCentralDifferences) {
    Rng rng(9);
    const int n = 20, dim = 3, m_count = 4;
    for (int trial = 0; trial < 20; ++trial) {
        Rng inner = rng.child(trial);
        Matrix features(n, dim);
        for (double& v : features.data()) v = inner.next_gaussian();
        std::vector<int> labels(n);
        for (int& label : labels) label = static_cast<int>(inner.next_below(m_count));
        Matrix weights(m_count, dim);
        for (double& v : weights.data()) v = 0.5 * inner.next_gaussian();
        std::vector<double> bias(m_count);
        for (double& b : bias) b = 0.5 * inner.next_gaussian();
        std::vector<double> offsets(m_count);
        for (double& o : offsets) o = 0.5 * inner.next_gaussian();
        std::vector<std::size_t> rows(n);
        std::iota(rows.begin(), rows.end(), 0);
        const double l2 = 0.01;

        const SoftmaxLossGrad grad =
            softmax_xent_loss_grad(features, labels, rows, weights, bias, offsets, l2);

        for (int m = 0; m < m_count; ++m) {
            for (int d = 0; d < dim; ++d) {
                const double reference = oracles::central_difference(
                    [&](double w) {
                        Matrix perturbed = weights;
                        perturbed(m, d) = w;
                        return softmax_xent_loss_grad(features, labels, rows, perturbed, bias,
                                                      offsets, l2)
                            .loss;
                    },
                    weights(m, d));
                EXPECT_NEAR(grad.d_weights(m, d), reference,
                            1e-4 * std::max(1.0, std::abs(reference)));
            }
            const double reference = oracles::central_difference(
                [&](double b) {
                    std::vector<double> perturbed = bias;
                    perturbed[m] = b;
                    return softmax_xent_loss_grad(features, labels, rows, weights, perturbed,
                                                  offsets, l2)
                        .loss;
                },
                bias[m]);
            EXPECT_NEAR(grad.d_bias[m], reference, 1e-4 * std::max(1.0, std::abs(reference)));
        }
    }
}

TEST(PredictLogits, ZeroModelVariants) {
    const MetaLabelSpace space{2, 2};
    Matrix features(1, 3);
    features(0, 0) = 1.0;
    features(0, 1) = -2.0;
    features(0, 2) = 0.5;

    const LinearSoftmaxModel erm = passthrough_model(
        space, 3, Matrix(4, 3, 0.0), std::vector<double>(4, 0.0), TrainingMode::kErm,
        uniform_prior(space));
    const LogitsMatrix erm_logits = predict_logits(erm, features);
    for (int m = 0; m < 4; ++m) EXPECT_DOUBLE_EQ(erm_logits.values(0, m), 0.0);

    const JointPrior prior = make_joint_prior(space, {0.4, 0.3, 0.2, 0.1});
    const LinearSoftmaxModel adjusted = passthrough_model(
        space, 3, Matrix(4, 3, 0.0), std::vector<double>(4, 0.0), TrainingMode::kLogitAdjusted,
        prior);
    const LogitsMatrix adjusted_logits = predict_logits(adjusted, features);
    const PosteriorMatrix recovered = softmax_rows(adjusted_logits);
    for (int m = 0; m < 4; ++m) {
        EXPECT_NEAR(adjusted_logits.values(0, m), std::log(prior.probs[m]), 1e-12);
        EXPECT_NEAR(recovered.values(0, m), prior.probs[m], 1e-12);
    }
}

TEST(PredictLogits, OneDimensionalContrast) {
    const MetaLabelSpace space{1, 2};
    Matrix weights(2, 1);
    weights(0, 0) = 1.0;
    weights(1, 0) = -1.0;
    const LinearSoftmaxModel model = passthrough_model(
        space, 1, std::move(weights), std::vector<double>(2, 0.0), TrainingMode::kErm,
        uniform_prior(space));
    Matrix features(1, 1);
    features(0, 0) = 2.0;
    const LogitsMatrix logits = predict_logits(model, features);
    EXPECT_DOUBLE_EQ(logits.values(0, 0), 2.0);
    EXPECT_DOUBLE_EQ(logits.values(0, 1), -2.0);
}

TEST(PredictLogits, RejectsDimensionMismatch) {
    const MetaLabelSpace space{1, 2};
    const LinearSoftmaxModel model = passthrough_model(
        space, 2, Matrix(2, 2, 0.0), std::vector<double>(2, 0.0), TrainingMode::kErm,
        uniform_prior(space));
    Matrix features(1, 3, 0.0);
    EXPECT_THROW(predict_logits(model, features), InvalidInputError);
}

TEST(TrainSoftmax, ErmAndAdjustedAgreeUnderUniformPrior) {
    const GaussianGenerativeSpec spec = gauss_cmnist_spec();
    const LabeledDataset data = sample_dataset(uniform_prior(spec.space), spec, 400, 17);
    const std::vector<int> labels = meta_labels_of(data, spec.space);
    TrainConfig config = quick_config(23);
    config.max_epochs = 300;

    const LinearSoftmaxModel erm = train_softmax(data.features, labels, TrainingMode::kErm,
                                                 config, uniform_prior(spec.space));
    const LinearSoftmaxModel adjusted = train_softmax(
        data.features, labels, TrainingMode::kLogitAdjusted, config, uniform_prior(spec.space));

    const LogitsMatrix erm_logits = predict_logits(erm, data.features);
    const LogitsMatrix adj_logits = predict_logits(adjusted, data.features);
    // The adjustment term is constant under a uniform prior, so the logits
    // agree after removing the per-row mean.
    for (std::size_t i = 0; i < data.features.rows(); ++i) {
        double erm_mean = 0.0, adj_mean = 0.0;
        for (int m = 0; m < 4; ++m) {
            erm_mean += erm_logits.values(i, m) / 4.0;
            adj_mean += adj_logits.values(i, m) / 4.0;
        }
        for (int m = 0; m < 4; ++m) {
            EXPECT_NEAR(erm_logits.values(i, m) - erm_mean,
                        adj_logits.values(i, m) - adj_mean, 1e-9);
        }
    }
}

TEST(TrainSoftmax, LogitAdjustedBalancedPosteriorIsMoreUniform) {
    const GaussianGenerativeSpec spec = gauss_cmnist_spec();
    const JointPrior skewed = make_joint_prior(spec.space, {0.45, 0.45, 0.05, 0.05});
    const LabeledDataset train_data = sample_dataset(skewed, spec, 4000, 29);
    const std::vector<int> labels = meta_labels_of(train_data, spec.space);
    TrainConfig config = quick_config(31);
    config.learning_rate = 0.05;
    config.max_epochs = 400;

    const LinearSoftmaxModel erm =
        train_softmax(train_data.features, labels, TrainingMode::kErm, config, skewed);
    const LinearSoftmaxModel adjusted = train_softmax(
        train_data.features, labels, TrainingMode::kLogitAdjusted, config, skewed);

    const LabeledDataset balanced = sample_dataset(uniform_prior(spec.space), spec, 4000, 37);

    // Balanced posterior of the adjusted model: softmax of the raw head,
    // i.e. source-posterior logits minus the training prior.
    LogitsMatrix adj_logits = predict_logits(adjusted, balanced.features);
    for (std::size_t i = 0; i < adj_logits.values.rows(); ++i) {
        for (int m = 0; m < 4; ++m) {
            adj_logits.values(i, m) -= std::log(std::max(skewed.probs[m], kProbFloor));
        }
    }
    const PosteriorMatrix adj_balanced = softmax_rows(adj_logits);
    const PosteriorMatrix erm_posterior =
        softmax_rows(predict_logits(erm, balanced.features));

    auto l1_to_uniform = [](const PosteriorMatrix& posterior) {
        std::vector<double> mean(4, 0.0);
        for (std::size_t i = 0; i < posterior.values.rows(); ++i) {
            for (int m = 0; m < 4; ++m) mean[m] += posterior.values(i, m);
        }
        double distance = 0.0;
        for (int m = 0; m < 4; ++m) {
            distance += std::abs(mean[m] / posterior.values.rows() - 0.25);
        }
        return distance;
    };
    EXPECT_LE(l1_to_uniform(adj_balanced), l1_to_uniform(erm_posterior));
}

TEST(TrainSoftmax, InputValidation) {
    const MetaLabelSpace space{1, 2};
    Matrix empty(0, 2);
    EXPECT_THROW(
        train_softmax(empty, {}, TrainingMode::kErm, quick_config(1), uniform_prior(space)),
        InvalidInputError);

    Matrix bad(2, 2, 0.0);
    bad(0, 0) = std::nan("");
    EXPECT_THROW(train_softmax(bad, {0, 1}, TrainingMode::kErm, quick_config(1),
                               uniform_prior(space)),
                 InvalidInputError);

    Matrix fine(2, 2, 0.0);
    EXPECT_THROW(train_softmax(fine, {0, 5}, TrainingMode::kErm, quick_config(1),
                               uniform_prior(space)),
                 InvalidInputError);
}

TEST(SubsampleBalanced, EqualCountsStayEqual) {
    const MetaLabelSpace space{2, 2};
    const std::size_t per_group = 10;
    Matrix features(4 * per_group, 1);
    std::vector<int> labels(4 * per_group);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        labels[i] = static_cast<int>(i % 4);
        features(i, 0) = static_cast<double>(i);
    }
    const SubsampleResult result = subsample_balanced(features, labels, space, 5);
    EXPECT_EQ(result.meta_labels.size(), labels.size());
    EXPECT_TRUE(result.warnings.empty());
    std::vector<int> counts(4, 0);
    for (int label : result.meta_labels) ++counts[label];
    for (int m = 0; m < 4; ++m) EXPECT_EQ(counts[m], static_cast<int>(per_group));
}

TEST(SubsampleBalanced, MinCountRule) {
    const MetaLabelSpace space{2, 2};
    const std::vector<int> group_sizes{100, 50, 20, 20};
    std::vector<int> labels;
    for (int m = 0; m < 4; ++m) {
        labels.insert(labels.end(), group_sizes[m], m);
    }
    Matrix features(labels.size(), 1);
    for (std::size_t i = 0; i < labels.size(); ++i) features(i, 0) = static_cast<double>(i);
    const SubsampleResult result = subsample_balanced(features, labels, space, 11);
    std::vector<int> counts(4, 0);
    for (int label : result.meta_labels) ++counts[label];
    for (int m = 0; m < 4; ++m) EXPECT_EQ(counts[m], 20);

    // Sampled without replacement: all row payloads distinct.
    std::vector<double> values;
    for (std::size_t i = 0; i < result.features.rows(); ++i) {
        values.push_back(result.features(i, 0));
    }
    std::sort(values.begin(), values.end());
    EXPECT_TRUE(std::adjacent_find(values.begin(), values.end()) == values.end());
}

TEST(SubsampleBalanced, EmptyGroupSkippedWithWarning) {
    const MetaLabelSpace space{2, 2};
    std::vector<int> labels;
    for (int m : {0, 2, 3}) labels.insert(labels.end(), 5, m);
    Matrix features(labels.size(), 1, 0.0);
    const SubsampleResult result = subsample_balanced(features, labels, space, 13);
    std::vector<int> counts(4, 0);
    for (int label : result.meta_labels) ++counts[label];
    EXPECT_EQ(counts[0], 5);
    EXPECT_EQ(counts[1], 0);
    EXPECT_EQ(counts[2], 5);
    EXPECT_EQ(counts[3], 5);
    ASSERT_EQ(result.warnings.size(), 1u);
    EXPECT_NE(result.warnings[0].find("group 1"), std::string::npos);

    Matrix no_rows(0, 1);
    EXPECT_THROW(subsample_balanced(no_rows, {}, space, 1), InvalidInputError);
}

TEST(SubsampleBalanced, DeterministicAndBalancedProperty) {
    Rng rng(101);
    const MetaLabelSpace space{2, 2};
    for (int trial = 0; trial < 20; ++trial) {
        Rng inner = rng.child(trial);
        std::vector<int> labels;
        for (int m = 0; m < 4; ++m) {
            const std::size_t count = inner.next_below(30);
            labels.insert(labels.end(), count, m);
        }
        if (labels.empty()) continue;
        Matrix features(labels.size(), 1);
        for (std::size_t i = 0; i < labels.size(); ++i) {
            features(i, 0) = static_cast<double>(i);
        }
        const SubsampleResult a = subsample_balanced(features, labels, space, 1234);
        const SubsampleResult b = subsample_balanced(features, labels, space, 1234);
        EXPECT_EQ(a.meta_labels, b.meta_labels);

        std::vector<int> counts(4, 0);
        for (int label : a.meta_labels) ++counts[label];
        int expected = 0;
        for (int m = 0; m < 4; ++m) {
            if (counts[m] > 0) {
                if (expected == 0) expected = counts[m];
                EXPECT_EQ(counts[m], expected);
            }
        }
    }
}

TEST(AdjustNonuniformMarginals, FactorizedPriorIsIdentity) {
    const MetaLabelSpace space{2, 2};
    // p(y,z) = p(y) p(z) with p(y) = (0.3, 0.7), p(z) = (0.6, 0.4).
    const JointPrior factorized =
        make_joint_prior(space, {0.18, 0.12, 0.42, 0.28});
    Matrix values(1, 4);
    for (int m = 0; m < 4; ++m) values(0, m) = 0.5 * m;
    const LogitsMatrix out = adjust_nonuniform_marginals({space, values}, factorized);
    for (int m = 0; m < 4; ++m) EXPECT_NEAR(out.values(0, m), values(0, m), 1e-12);

    const LogitsMatrix uniform_out =
        adjust_nonuniform_marginals({space, values}, uniform_prior(space));
    for (int m = 0; m < 4; ++m) EXPECT_NEAR(uniform_out.values(0, m), values(0, m), 1e-12);
}

TEST(AdjustNonuniformMarginals, CorrelatedPriorOffsets) {
    const MetaLabelSpace space{2, 2};
    const JointPrior correlated = make_joint_prior(space, {0.45, 0.05, 0.05, 0.45});
    Matrix values(1, 4, 1.0);
    const LogitsMatrix out = adjust_nonuniform_marginals({space, values}, correlated);
    // Marginals are (0.5, 0.5) x (0.5, 0.5), so the offsets are
    // log(0.45/0.25) = log 1.8 on the diagonal and log 0.2 off it.
    EXPECT_NEAR(out.values(0, 0), 1.0 - std::log(1.8), 1e-12);
    EXPECT_NEAR(out.values(0, 1), 1.0 - std::log(0.2), 1e-12);
    EXPECT_NEAR(out.values(0, 2), 1.0 - std::log(0.2), 1e-12);
    EXPECT_NEAR(out.values(0, 3), 1.0 - std::log(1.8), 1e-12);
}

TEST(AdjustNonuniformMarginals, RejectsZeroCells) {
    const MetaLabelSpace space{2, 2};
    const JointPrior with_zero = make_joint_prior(space, {0.5, 0.0, 0.25, 0.25});
    Matrix values(1, 4, 0.0);
    EXPECT_THROW(adjust_nonuniform_marginals({space, values}, with_zero),
                 SupportViolationError);
}
