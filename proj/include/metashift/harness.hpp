#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "metashift/adapt.hpp"
#include "metashift/calibrate.hpp"
#include "metashift/core.hpp"
#include "metashift/errors.hpp"
#include "metashift/metrics.hpp"
#include "metashift/rng.hpp"
#include "metashift/synthdata.hpp"
#include "metashift/train.hpp"

namespace metashift {

inline std::vector<double> default_lambda_grid() {
    std::vector<double> grid(21);
    for (int i = 0; i <= 20; ++i) grid[i] = static_cast<double>(i) / 20.0;
    return grid;
}

enum class SourcePriorEstimate { kCounts, kPosteriorMean };

// One distribution-shift sweep: train on the source mixture, score every
// method on each target mixture, aggregate over replicate seeds.
struct SweepConfig {
    std::vector<double> lambdas = default_lambda_grid();
    double source_lambda = 0.05;
    std::vector<int> adaptation_batch_sizes{64, 512};
    int n_train = 20000;
    int n_test_per_target = 512;
    int replicates = 4;
    bool calibration_enabled = true;
    std::vector<std::string> methods{"erm", "subg", "la", "ttlsa", "oracle"};
    std::int64_t base_seed = 0;
    // Multiplies every model logit before calibration/adaptation; values far
    // from 1 induce miscalibration for the calibration ablation.
    double logit_scale = 1.0;
    SourcePriorEstimate source_prior_estimate = SourcePriorEstimate::kCounts;
    bool write_priors = true;

    TrainConfig train{};
    // Calibration runs full batch, so the per-epoch step is scaled up to
    // roughly match the per-epoch movement of a batch-64 loop.
    CalibrationFitConfig calibration{.learning_rate = 0.1};
    EmConfig em{};
};

inline void validate(const SweepConfig& config) {
    if (config.lambdas.empty()) throw InvalidInputError("sweep needs at least one lambda");
    for (double lambda : config.lambdas) {
        if (!std::isfinite(lambda) || lambda < 0.0 || lambda > 1.0) {
            throw InvalidInputError("sweep lambdas must lie in [0, 1]");
        }
    }
    if (config.source_lambda < 0.0 || config.source_lambda > 1.0) {
        throw InvalidInputError("source_lambda must lie in [0, 1]");
    }
    if (config.methods.empty()) throw InvalidInputError("methods must not be empty");
    static const std::vector<std::string> known{"erm", "subg", "la", "ttlsa", "oracle"};
    for (const auto& method : config.methods) {
        if (std::find(known.begin(), known.end(), method) == known.end()) {
            throw InvalidInputError("unknown method '" + method +
                                    "' (erm | subg | la | ttlsa | oracle)");
        }
    }
    if (config.n_train < 1 || config.n_test_per_target < 1 || config.replicates < 1) {
        throw InvalidInputError("n_train, n_test_per_target and replicates must be positive");
    }
    for (int size : config.adaptation_batch_sizes) {
        if (size < 1) throw InvalidInputError("adaptation batch sizes must be positive");
    }
    if (std::find(config.methods.begin(), config.methods.end(), "ttlsa") != config.methods.end() &&
        config.adaptation_batch_sizes.empty()) {
        throw InvalidInputError("ttlsa requires at least one adaptation batch size");
    }
    if (!std::isfinite(config.logit_scale) || config.logit_scale <= 0.0) {
        throw InvalidInputError("logit_scale must be positive");
    }
    validate(config.train);
    validate(config.calibration);
    validate(config.em);
}

inline bool has_method(const SweepConfig& config, const std::string& name) {
    return std::find(config.methods.begin(), config.methods.end(), name) != config.methods.end();
}

// Canonical expanded method order; ttlsa appears once per batch size.
inline std::vector<std::string> expand_methods(const SweepConfig& config) {
    std::vector<std::string> out;
    if (has_method(config, "erm")) out.push_back("erm");
    if (has_method(config, "subg")) out.push_back("subg");
    if (has_method(config, "la")) out.push_back("la");
    if (has_method(config, "ttlsa")) {
        for (int size : config.adaptation_batch_sizes) {
            out.push_back("ttlsa-" + std::to_string(size));
        }
    }
    if (has_method(config, "oracle")) out.push_back("oracle");
    return out;
}

struct SummaryRow {
    double lambda = 0.0;
    std::string method;
    double mean_auc = 0.0;
    double sem = 0.0;
    int n = 0;
};

struct PriorRecord {
    double lambda = 0.0;
    std::string method;
    std::int64_t seed = 0;
    int batch = 0;
    JointPrior prior;
};

struct SweepOutput {
    std::vector<SweepRecord> records;
    std::vector<SummaryRow> summary;
    std::vector<PriorRecord> priors;
};

// Everything trained once per replicate seed and shared by all targets.
struct ReplicateModels {
    std::int64_t seed = 0;
    JointPrior train_prior;          // counted on the full source draw
    JointPrior adapt_prior_counts;   // source prior for adaptation, by counting
    JointPrior adapt_prior_posterior_mean_calibrated;
    JointPrior adapt_prior_posterior_mean_uncalibrated;
    LinearSoftmaxModel erm;
    LinearSoftmaxModel subg;
    LinearSoftmaxModel la;
    CalibrationParams calib_erm;
    CalibrationParams calib_subg;
    CalibrationParams calib_la;
};

namespace detail {

// Stream-derivation tags for the per-replicate generator.
inline constexpr std::uint64_t kTagSourceData = 1;
inline constexpr std::uint64_t kTagSubsample = 2;
inline constexpr std::uint64_t kTagTrainErm = 3;
inline constexpr std::uint64_t kTagTrainSubg = 4;
inline constexpr std::uint64_t kTagTrainLa = 5;
inline constexpr std::uint64_t kTagTarget = 6;
inline constexpr std::uint64_t kTagSubgCalibration = 7;

template <typename Fn>
auto with_context(const std::string& context, Fn&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const NumericalError& e) {
        throw NumericalError(context + ": " + e.what(), e.iteration);
    } catch (const ValidationError& e) {
        throw ValidationError(context + ": " + e.what());
    }
}

inline Matrix scaled_logits(const LinearSoftmaxModel& model, const Matrix& features,
                            double logit_scale) {
    Matrix logits = predict_logits(model, features).values;
    if (logit_scale != 1.0) {
        for (double& v : logits.data()) v *= logit_scale;
    }
    return logits;
}

inline PosteriorMatrix model_posterior(const LinearSoftmaxModel& model,
                                       const CalibrationParams& calibration,
                                       const Matrix& features, double logit_scale,
                                       bool calibrated) {
    LogitsMatrix logits{model.space, scaled_logits(model, features, logit_scale)};
    return calibrated ? apply_bcts(logits, calibration) : softmax_rows(logits);
}

inline Matrix take_rows(const Matrix& source, std::size_t begin, std::size_t end) {
    Matrix out(end - begin, source.cols());
    for (std::size_t i = begin; i < end; ++i) {
        auto src = source.row(i);
        auto dst = out.row(i - begin);
        std::copy(src.begin(), src.end(), dst.begin());
    }
    return out;
}

inline JointPrior counted_prior(const MetaLabelSpace& space, std::span<const int> meta_labels) {
    std::vector<double> counts(space.size(), 0.0);
    for (int label : meta_labels) counts[label] += 1.0;
    return normalized_prior(space, std::move(counts));
}

inline JointPrior posterior_mean_prior(const PosteriorMatrix& posterior) {
    std::vector<double> mean(posterior.space.size(), 0.0);
    for (std::size_t i = 0; i < posterior.values.rows(); ++i) {
        auto row = posterior.values.row(i);
        for (std::size_t m = 0; m < row.size(); ++m) mean[m] += row[m];
    }
    return normalized_prior(posterior.space, std::move(mean));
}

}  // namespace detail

inline ReplicateModels train_replicate(const SweepConfig& config,
                                       const GaussianGenerativeSpec& spec, int replicate) {
    const std::int64_t seed = config.base_seed + replicate;
    const Rng rep_rng(static_cast<std::uint64_t>(seed));
    const AnchorPair anchors = default_anchors();
    const JointPrior source_prior_true = lambda_prior(anchors, config.source_lambda);

    const LabeledDataset source = sample_dataset(
        source_prior_true, spec, config.n_train,
        rep_rng.child(detail::kTagSourceData).seed());
    const std::vector<int> labels = meta_labels_of(source, spec.space);

    // Source draws are iid, so the leading 90% trains and the tail 10% is the
    // held-out calibration split.
    const std::size_t holdout =
        std::max<std::size_t>(1, static_cast<std::size_t>(config.n_train) / 10);
    const std::size_t fit_count = static_cast<std::size_t>(config.n_train) - holdout;
    if (fit_count == 0) throw InsufficientDataError("n_train too small for a 90/10 split");

    Matrix fit_features = detail::take_rows(source.features, 0, fit_count);
    std::vector<int> fit_labels(labels.begin(), labels.begin() + fit_count);
    Matrix holdout_features =
        detail::take_rows(source.features, fit_count, source.features.rows());
    std::vector<int> holdout_labels(labels.begin() + fit_count, labels.end());

    ReplicateModels models;
    models.seed = seed;
    models.train_prior = detail::counted_prior(spec.space, labels);
    models.adapt_prior_counts = models.train_prior;

    TrainConfig train_config = config.train;
    train_config.seed = rep_rng.child(detail::kTagTrainErm).seed();
    models.erm = train_softmax(fit_features, fit_labels, TrainingMode::kErm, train_config,
                               models.train_prior);

    const SubsampleResult balanced = subsample_balanced(
        fit_features, fit_labels, spec.space, rep_rng.child(detail::kTagSubsample).seed());
    train_config.seed = rep_rng.child(detail::kTagTrainSubg).seed();
    models.subg = train_softmax(balanced.features, balanced.meta_labels, TrainingMode::kErm,
                                train_config,
                                detail::counted_prior(spec.space, balanced.meta_labels));

    train_config.seed = rep_rng.child(detail::kTagTrainLa).seed();
    models.la = train_softmax(fit_features, fit_labels, TrainingMode::kLogitAdjusted,
                              train_config, models.train_prior);

    // BCTS per model on the holdout. The subg model is calibrated on a
    // group-balanced subsample of the holdout so calibration does not bake the
    // confounded source prior back into its invariant posterior.
    auto fit_calibration = [&](const LinearSoftmaxModel& model, const Matrix& features,
                               const std::vector<int>& target_labels) {
        LogitsMatrix logits{model.space,
                            detail::scaled_logits(model, features, config.logit_scale)};
        return fit_bcts(logits, target_labels, config.calibration);
    };
    models.calib_erm = fit_calibration(models.erm, holdout_features, holdout_labels);
    models.calib_la = fit_calibration(models.la, holdout_features, holdout_labels);
    const SubsampleResult balanced_holdout =
        subsample_balanced(holdout_features, holdout_labels, spec.space,
                           rep_rng.child(detail::kTagSubgCalibration).seed());
    models.calib_subg =
        fit_calibration(models.subg, balanced_holdout.features, balanced_holdout.meta_labels);

    const PosteriorMatrix la_posterior_cal = detail::model_posterior(
        models.la, models.calib_la, source.features, config.logit_scale, true);
    const PosteriorMatrix la_posterior_raw = detail::model_posterior(
        models.la, models.calib_la, source.features, config.logit_scale, false);
    models.adapt_prior_posterior_mean_calibrated = detail::posterior_mean_prior(la_posterior_cal);
    models.adapt_prior_posterior_mean_uncalibrated = detail::posterior_mean_prior(la_posterior_raw);
    return models;
}

namespace detail {

inline const JointPrior& adaptation_source_prior(const SweepConfig& config,
                                                 const ReplicateModels& models) {
    if (config.source_prior_estimate == SourcePriorEstimate::kCounts) {
        return models.adapt_prior_counts;
    }
    return config.calibration_enabled ? models.adapt_prior_posterior_mean_calibrated
                                      : models.adapt_prior_posterior_mean_uncalibrated;
}

struct CellResult {
    std::vector<SweepRecord> records;
    std::vector<PriorRecord> priors;
};

// Scores every requested method on one (replicate, lambda) target draw.
inline CellResult evaluate_cell(const SweepConfig& config, const GaussianGenerativeSpec& spec,
                                const ReplicateModels& models, int lambda_index) {
    const double lambda = config.lambdas[lambda_index];
    const std::string context =
        "lambda=" + std::to_string(lambda) + " seed=" + std::to_string(models.seed);
    return with_context(context, [&] {
        const AnchorPair anchors = default_anchors();
        const JointPrior target_prior_true = lambda_prior(anchors, lambda);
        const Rng rep_rng(static_cast<std::uint64_t>(models.seed));
        const LabeledDataset test = sample_dataset(
            target_prior_true, spec, config.n_test_per_target,
            rep_rng.child(kTagTarget).child(static_cast<std::uint64_t>(lambda_index)).seed());

        const JointPrior& source_prior = adaptation_source_prior(config, models);
        const bool calibrated = config.calibration_enabled;

        std::optional<PosteriorMatrix> la_posterior;
        auto la = [&]() -> const PosteriorMatrix& {
            if (!la_posterior) {
                la_posterior = model_posterior(models.la, models.calib_la, test.features,
                                               config.logit_scale, calibrated);
            }
            return *la_posterior;
        };

        CellResult cell;
        auto add_record = [&](const std::string& method, std::span<const double> scores,
                              std::optional<JointPrior> prior_estimate) {
            cell.records.push_back(with_context(
                "method=" + method, [&] {
                    return SweepRecord{lambda, method, models.seed,
                                       roc_auc(scores, test.y), std::move(prior_estimate)};
                }));
        };

        for (const std::string& method : expand_methods(config)) {
            if (method == "erm") {
                const PosteriorMatrix posterior = model_posterior(
                    models.erm, models.calib_erm, test.features, config.logit_scale, calibrated);
                add_record(method, positive_class_scores(posterior), std::nullopt);
            } else if (method == "subg") {
                const PosteriorMatrix posterior = model_posterior(
                    models.subg, models.calib_subg, test.features, config.logit_scale, calibrated);
                add_record(method, positive_class_scores(posterior), std::nullopt);
            } else if (method == "la") {
                const PosteriorMatrix balanced =
                    reweight_posterior(la(), source_prior, uniform_prior(spec.space));
                add_record(method, positive_class_scores(balanced), std::nullopt);
            } else if (method.rfind("ttlsa-", 0) == 0) {
                const int batch_size = std::stoi(method.substr(6));
                const std::size_t n = test.features.rows();
                Matrix adapted(n, spec.space.size());
                std::vector<double> mean_prior(spec.space.size(), 0.0);
                int batches = 0;
                for (std::size_t begin = 0; begin < n;
                     begin += static_cast<std::size_t>(batch_size)) {
                    const std::size_t end =
                        std::min(n, begin + static_cast<std::size_t>(batch_size));
                    PosteriorMatrix batch{spec.space,
                                          take_rows(la().values, begin, end)};
                    const EmResult em = with_context(
                        "method=" + method + " batch=" + std::to_string(batches),
                        [&] { return em_estimate_prior(batch, source_prior, config.em); });
                    const PosteriorMatrix reweighted =
                        reweight_posterior(batch, source_prior, em.target_prior);
                    for (std::size_t i = begin; i < end; ++i) {
                        auto src = reweighted.values.row(i - begin);
                        auto dst = adapted.row(i);
                        std::copy(src.begin(), src.end(), dst.begin());
                    }
                    cell.priors.push_back(
                        {lambda, method, models.seed, batches, em.target_prior});
                    for (int m = 0; m < spec.space.size(); ++m) {
                        mean_prior[m] += em.target_prior.probs[m];
                    }
                    ++batches;
                }
                add_record(method,
                           positive_class_scores({spec.space, std::move(adapted)}),
                           normalized_prior(spec.space, std::move(mean_prior)));
            } else if (method == "oracle") {
                const PosteriorMatrix reweighted =
                    reweight_posterior(la(), source_prior, target_prior_true);
                add_record(method, positive_class_scores(reweighted), target_prior_true);
            }
        }
        return cell;
    });
}

inline void parallel_for(std::size_t count, int threads, const std::function<void(std::size_t)>& fn) {
    if (threads <= 1 || count <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= count) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(failure_mutex);
                if (!failure) failure = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    const int spawned = std::min<std::size_t>(threads, count);
    pool.reserve(spawned);
    for (int t = 0; t < spawned; ++t) pool.emplace_back(worker);
    for (auto& thread : pool) thread.join();
    if (failure) std::rethrow_exception(failure);
}

}  // namespace detail

// Worker cap from METASHIFT_THREADS; 0 or unset means auto.
inline int harness_thread_cap() {
    const char* raw = std::getenv("METASHIFT_THREADS");
    if (raw != nullptr) {
        char* end = nullptr;
        const long value = std::strtol(raw, &end, 10);
        if (end != raw && *end == '\0' && value > 0) return static_cast<int>(value);
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

inline std::vector<SummaryRow> summarize(const SweepConfig& config,
                                         const std::vector<SweepRecord>& records) {
    std::vector<SummaryRow> summary;
    for (double lambda : config.lambdas) {
        for (const std::string& method : expand_methods(config)) {
            std::vector<double> values;
            for (const auto& record : records) {
                if (record.lambda == lambda && record.method == method) {
                    values.push_back(record.auc);
                }
            }
            if (values.empty()) continue;
            double mean = 0.0;
            for (double v : values) mean += v;
            mean /= static_cast<double>(values.size());
            double sem = 0.0;
            if (values.size() > 1) {
                double ss = 0.0;
                for (double v : values) ss += (v - mean) * (v - mean);
                sem = std::sqrt(ss / static_cast<double>(values.size() - 1)) /
                      std::sqrt(static_cast<double>(values.size()));
            }
            summary.push_back({lambda, method, mean, sem, static_cast<int>(values.size())});
        }
    }
    return summary;
}

namespace detail {

inline SweepOutput evaluate_sweep(const SweepConfig& config, const GaussianGenerativeSpec& spec,
                                  const std::vector<ReplicateModels>& stacks) {
    const std::size_t lambda_count = config.lambdas.size();
    const std::size_t cells = lambda_count * static_cast<std::size_t>(config.replicates);
    std::vector<CellResult> results(cells);
    parallel_for(cells, std::min<int>(harness_thread_cap(), static_cast<int>(cells)),
                 [&](std::size_t index) {
                     const int replicate = static_cast<int>(index / lambda_count);
                     const int lambda_index = static_cast<int>(index % lambda_count);
                     results[index] = evaluate_cell(config, spec, stacks[replicate], lambda_index);
                 });

    // Canonical order: lambda-major, then method, then replicate seed.
    SweepOutput output;
    const auto methods = expand_methods(config);
    for (std::size_t li = 0; li < lambda_count; ++li) {
        for (std::size_t mi = 0; mi < methods.size(); ++mi) {
            for (int r = 0; r < config.replicates; ++r) {
                const auto& cell = results[static_cast<std::size_t>(r) * lambda_count + li];
                output.records.push_back(cell.records[mi]);
            }
        }
        for (int r = 0; r < config.replicates; ++r) {
            const auto& cell = results[static_cast<std::size_t>(r) * lambda_count + li];
            output.priors.insert(output.priors.end(), cell.priors.begin(), cell.priors.end());
        }
    }
    std::stable_sort(output.priors.begin(), output.priors.end(),
                     [&](const PriorRecord& a, const PriorRecord& b) {
                         if (a.lambda != b.lambda) return a.lambda < b.lambda;
                         if (a.method != b.method) return a.method < b.method;
                         if (a.seed != b.seed) return a.seed < b.seed;
                         return a.batch < b.batch;
                     });
    output.summary = summarize(config, output.records);
    return output;
}

inline std::vector<ReplicateModels> train_all(const SweepConfig& config,
                                              const GaussianGenerativeSpec& spec) {
    std::vector<ReplicateModels> stacks(config.replicates);
    parallel_for(static_cast<std::size_t>(config.replicates),
                 std::min<int>(harness_thread_cap(), config.replicates), [&](std::size_t r) {
                     stacks[r] = with_context(
                         "replicate seed=" + std::to_string(config.base_seed +
                                                            static_cast<std::int64_t>(r)),
                         [&] { return train_replicate(config, spec, static_cast<int>(r)); });
                 });
    return stacks;
}

}  // namespace detail

inline SweepOutput run_sweep(const SweepConfig& config, const GaussianGenerativeSpec& spec) {
    validate(config);
    if (!(spec.space == MetaLabelSpace{2, 2})) {
        throw InvalidInputError("run_sweep requires the 2-class / 2-group benchmark space");
    }
    const auto stacks = detail::train_all(config, spec);
    return detail::evaluate_sweep(config, spec, stacks);
}

struct AblationOutput {
    SweepOutput calibrated;
    SweepOutput uncalibrated;
};

// Identical sweep twice, differing only in whether BCTS is applied; both
// arms share the same trained weights and target draws per seed.
inline AblationOutput run_calibration_ablation(const SweepConfig& config,
                                               const GaussianGenerativeSpec& spec) {
    SweepConfig base = config;
    base.calibration_enabled = true;
    validate(base);
    if (!(spec.space == MetaLabelSpace{2, 2})) {
        throw InvalidInputError("run_calibration_ablation requires the 2-class / 2-group space");
    }
    const auto stacks = detail::train_all(base, spec);
    AblationOutput output;
    output.calibrated = detail::evaluate_sweep(base, spec, stacks);
    base.calibration_enabled = false;
    output.uncalibrated = detail::evaluate_sweep(base, spec, stacks);
    return output;
}

}  // namespace metashift
