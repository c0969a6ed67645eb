#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "metashift/core.hpp"
#include "metashift/errors.hpp"

namespace metashift {

// ROC AUC by the Mann-Whitney statistic with midrank tie handling:
// (wins + 0.5 * ties) / (positives * negatives), computed from the rank sum
// of the positives in O(N log N). Equals the pairwise definition exactly.
inline double roc_auc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) {
        throw InvalidInputError("roc_auc: score and label counts differ");
    }
    std::size_t positives = 0;
    for (int label : labels) {
        if (label != 0 && label != 1) throw InvalidInputError("roc_auc: labels must be 0 or 1");
        positives += static_cast<std::size_t>(label);
    }
    const std::size_t negatives = scores.size() - positives;
    if (positives == 0 || negatives == 0) {
        throw UndefinedMetricError("roc_auc: needs at least one positive and one negative label");
    }
    for (double s : scores) {
        if (!std::isfinite(s)) throw InvalidInputError("roc_auc: scores must be finite");
    }

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // Midranks in halves so every value stays exactly representable.
    double positive_rank_sum = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        std::size_t tied_positives = 0;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            tied_positives += static_cast<std::size_t>(labels[order[j]]);
            ++j;
        }
        const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // 1-based average rank
        positive_rank_sum += midrank * static_cast<double>(tied_positives);
        i = j;
    }

    const double p = static_cast<double>(positives);
    const double u = positive_rank_sum - p * (p + 1.0) / 2.0;
    return u / (p * static_cast<double>(negatives));
}

// Reference O(N^2) pairwise AUC; kept for oracles and cross-checks.
inline double roc_auc_pairwise(std::span<const double> scores, std::span<const int> labels) {
    std::size_t wins = 0, ties = 0, positives = 0, negatives = 0;
    for (std::size_t a = 0; a < scores.size(); ++a) {
        if (labels[a] != 1) continue;
        ++positives;
        for (std::size_t b = 0; b < scores.size(); ++b) {
            if (labels[b] != 0) continue;
            if (scores[a] > scores[b]) ++wins;
            else if (scores[a] == scores[b]) ++ties;
        }
    }
    for (int label : labels) negatives += static_cast<std::size_t>(label == 0);
    if (positives == 0 || negatives == 0) {
        throw UndefinedMetricError("roc_auc_pairwise: needs both label values");
    }
    return (static_cast<double>(wins) + 0.5 * static_cast<double>(ties)) /
           (static_cast<double>(positives) * static_cast<double>(negatives));
}

struct GroupAccuracyReport {
    std::vector<double> per_group;       // indexed by meta-label; 0 for empty groups
    std::vector<int> counts;             // examples per meta-label
    double worst = 0.0;                  // min over nonempty groups
    double average = 0.0;                // unweighted mean over nonempty groups
    double example_weighted = 0.0;       // plain accuracy over all examples
};

inline GroupAccuracyReport group_accuracy(std::span<const int> predicted_classes,
                                          std::span<const int> y,
                                          std::span<const int> z,
                                          const MetaLabelSpace& space) {
    if (predicted_classes.size() != y.size() || y.size() != z.size()) {
        throw InvalidInputError("group_accuracy: input lengths differ");
    }
    GroupAccuracyReport report;
    report.per_group.assign(space.size(), 0.0);
    report.counts.assign(space.size(), 0);
    std::vector<int> correct(space.size(), 0);
    std::size_t total_correct = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (y[i] < 0 || y[i] >= space.num_classes || z[i] < 0 || z[i] >= space.num_groups) {
            throw InvalidInputError("group_accuracy: label out of range");
        }
        const int m = space.encode(y[i], z[i]);
        ++report.counts[m];
        if (predicted_classes[i] == y[i]) {
            ++correct[m];
            ++total_correct;
        }
    }
    double worst = 1.0;
    double sum = 0.0;
    int nonempty = 0;
    for (int m = 0; m < space.size(); ++m) {
        if (report.counts[m] == 0) continue;
        report.per_group[m] = static_cast<double>(correct[m]) / report.counts[m];
        worst = std::min(worst, report.per_group[m]);
        sum += report.per_group[m];
        ++nonempty;
    }
    if (nonempty == 0) throw DegenerateInputError("group_accuracy: no examples");
    report.worst = worst;
    report.average = sum / nonempty;
    report.example_weighted = static_cast<double>(total_correct) / y.size();
    return report;
}

inline double max_group_prob(const JointPrior& prior) {
    return *std::max_element(prior.probs.begin(), prior.probs.end());
}

// The class-1 marginal probability used as the AUC score (binary class label).
inline std::vector<double> positive_class_scores(const PosteriorMatrix& posterior) {
    if (posterior.space.num_classes != 2) {
        throw UndefinedMetricError("positive_class_scores: requires exactly two classes");
    }
    Matrix marginals = marginalize_classes(posterior);
    std::vector<double> scores(marginals.rows());
    for (std::size_t i = 0; i < marginals.rows(); ++i) scores[i] = marginals(i, 1);
    return scores;
}

// One sweep measurement.
struct SweepRecord {
    double lambda = 0.0;
    std::string method;
    std::int64_t seed = 0;
    double auc = 0.0;
    std::optional<JointPrior> target_prior_estimate;
};

}  // namespace metashift
