// metashift: test-time label-shift adaptation over CSV files.
//
// Subcommands: gen, train, calibrate, adapt, sweep, eval.
// Exit codes: 0 success, 2 usage/validation error, 3 numerical failure.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "metashift/metashift.hpp"

namespace {

using namespace metashift;

std::optional<MetaLabelSpace> declared_space(int classes, int groups) {
    if (classes > 0 && groups > 0) return make_space(classes, groups);
    if (classes > 0 || groups > 0) {
        throw InvalidInputError("--classes and --groups must be given together");
    }
    return std::nullopt;
}

int run_gen(const std::string& spec_name, double prior_lambda, int n, std::int64_t seed,
            const std::string& out) {
    const GaussianGenerativeSpec spec = resolve_generative_spec(spec_name);
    if (!(spec.space == MetaLabelSpace{2, 2})) {
        throw InvalidInputError(
            "--prior-lambda mixes the 2-class/2-group anchor priors; spec '" + spec_name +
            "' has a different label space");
    }
    const JointPrior prior = lambda_prior(default_anchors(), prior_lambda);
    const LabeledDataset dataset =
        sample_dataset(prior, spec, n, static_cast<std::uint64_t>(seed));
    write_dataset_csv(out, dataset, spec.space);
    return 0;
}

int run_train(const std::string& data_path, const std::string& mode_name,
              const std::string& prior_path, const std::string& out, const TrainConfig& config) {
    const DatasetFile data = read_dataset_csv(data_path);
    const std::vector<int> labels = meta_labels_of(data.dataset, data.space);
    JointPrior prior = prior_path.empty()
                           ? detail::counted_prior(data.space, labels)
                           : read_prior_csv(prior_path);
    if (!(prior.space == data.space)) {
        throw InvalidInputError("--prior space does not match the dataset's C/K header");
    }
    const LinearSoftmaxModel model = train_softmax(
        data.dataset.features, labels, training_mode_from_string(mode_name), config, prior);
    write_model(out, model);
    return 0;
}

LogitsMatrix logits_for(const std::string& logits_path, const std::string& model_path,
                        const std::string& data_path, std::optional<MetaLabelSpace> declared,
                        const DatasetFile* data) {
    if (!logits_path.empty()) return read_logits_csv(logits_path, declared);
    const LinearSoftmaxModel model = read_model(model_path);
    if (data == nullptr) throw InvalidInputError("--model requires --data with features");
    return predict_logits(model, data->dataset.features);
}

int run_calibrate(const std::string& model_path, const std::string& logits_path,
                  const std::string& data_path, const std::string& out,
                  const CalibrationFitConfig& config, int classes, int groups) {
    const DatasetFile data = read_dataset_csv(data_path);
    const LogitsMatrix logits =
        logits_for(logits_path, model_path, data_path, declared_space(classes, groups), &data);
    if (logits.values.rows() != data.dataset.y.size()) {
        throw InvalidInputError("logits rows (" + std::to_string(logits.values.rows()) +
                                ") and labeled rows (" + std::to_string(data.dataset.y.size()) +
                                ") differ");
    }
    const std::vector<int> labels = meta_labels_of(data.dataset, logits.space);
    const CalibrationParams params = fit_bcts(logits, labels, config);
    write_calibration_json(out, params, logits.space);
    return 0;
}

int run_adapt(const std::string& model_path, const std::string& logits_path,
              const std::string& data_path, const std::string& source_prior_path,
              const std::string& calibration_path, const EmConfig& em_config,
              const std::string& out_prior, const std::string& out_posterior,
              const std::string& out_result, int classes, int groups) {
    std::optional<DatasetFile> data;
    if (!data_path.empty()) data = read_dataset_csv(data_path);

    LogitsMatrix logits = logits_for(logits_path, model_path, data_path,
                                     declared_space(classes, groups),
                                     data ? &*data : nullptr);

    JointPrior source_prior = [&] {
        if (!source_prior_path.empty()) return read_prior_csv(source_prior_path);
        if (!model_path.empty()) return read_model(model_path).training_prior;
        throw InvalidInputError("--logits needs --source-prior (no model to take it from)");
    }();
    if (!(source_prior.space == logits.space)) {
        throw InvalidInputError("source prior C/K does not match the logits space");
    }

    PosteriorMatrix posterior = [&] {
        if (calibration_path.empty()) return softmax_rows(logits);
        auto [params, space] = read_calibration_json(calibration_path);
        if (!(space == logits.space)) {
            throw InvalidInputError("calibration C/K does not match the logits space");
        }
        return apply_bcts(logits, params);
    }();

    const EmResult result = em_estimate_prior(posterior, source_prior, em_config);
    write_prior_csv(out_prior, result.target_prior);
    if (!out_posterior.empty()) {
        write_posterior_csv(out_posterior,
                            reweight_posterior(posterior, source_prior, result.target_prior));
    }
    if (!out_result.empty()) write_em_result(out_result, result);
    return 0;
}

int run_eval(const std::string& posterior_path, const std::string& data_path,
             const std::string& out) {
    const DatasetFile data = read_dataset_csv(data_path);
    const PosteriorMatrix posterior = read_posterior_csv(posterior_path);
    if (!(posterior.space == data.space)) {
        throw InvalidInputError("posterior C/K does not match the dataset's C/K header");
    }
    if (posterior.values.rows() != data.dataset.y.size()) {
        throw InvalidInputError("posterior rows and dataset rows differ");
    }
    const std::vector<int> predicted = predict_class(posterior);
    const GroupAccuracyReport report =
        group_accuracy(predicted, data.dataset.y, data.dataset.z, data.space);
    const double auc = roc_auc(positive_class_scores(posterior), data.dataset.y);

    std::ostringstream csv;
    csv << "metric,value\n";
    csv << "auc," << format_double(auc) << '\n';
    csv << "worst_group_accuracy," << format_double(report.worst) << '\n';
    csv << "average_group_accuracy," << format_double(report.average) << '\n';
    csv << "overall_accuracy," << format_double(report.example_weighted) << '\n';
    for (int m = 0; m < data.space.size(); ++m) {
        csv << "group_accuracy_" << m << ',' << format_double(report.per_group[m]) << '\n';
        csv << "group_count_" << m << ',' << report.counts[m] << '\n';
    }
    write_file(out, csv.str());
    return 0;
}

int run_sweep(const std::string& config_path, const std::string& out_dir) {
    const SweepConfigFile file = parse_sweep_config(config_path);
    const GaussianGenerativeSpec spec = resolve_generative_spec(file.spec_source);
    std::filesystem::create_directories(out_dir);

    const SweepOutput output = run_sweep(file.config, spec);
    const std::filesystem::path dir(out_dir);
    write_sweep_csv((dir / "sweep.csv").string(), output.records);
    write_summary_csv((dir / "summary.csv").string(), output.summary);
    if (file.config.write_priors) {
        write_priors_csv((dir / "priors.csv").string(), spec.space, output.priors);
    }
    write_manifest((dir / "manifest.txt").string(), file);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Test-time label-shift adaptation over (class, group) meta-labels"};
    app.require_subcommand(1);

    // gen
    auto* gen = app.add_subcommand("gen", "Sample a labeled dataset from a lambda-mixture prior");
    std::string gen_spec = "gauss-cmnist";
    double gen_lambda = 0.0;
    int gen_n = 0;
    std::int64_t gen_seed = 0;
    std::string gen_out;
    gen->add_option("--spec", gen_spec, "Builtin spec name or spec file path");
    gen->add_option("--prior-lambda", gen_lambda, "Mixture weight in [0,1]")
        ->required()
        ->check(CLI::Range(0.0, 1.0));
    gen->add_option("--n", gen_n, "Number of samples")->required()->check(CLI::PositiveNumber);
    gen->add_option("--seed", gen_seed, "Generator seed");
    gen->add_option("--out", gen_out, "Output dataset CSV")->required();

    // train
    auto* train = app.add_subcommand("train", "Fit a linear softmax source classifier");
    std::string train_data, train_mode = "erm", train_prior, train_out;
    TrainConfig train_config;
    std::int64_t train_seed = 0;
    train->add_option("--data", train_data, "Labeled dataset CSV")->required();
    train->add_option("--mode", train_mode, "erm | logit_adjusted");
    train->add_option("--prior", train_prior, "Training prior CSV (default: counted)");
    train->add_option("--out", train_out, "Output model file")->required();
    train->add_option("--lr", train_config.learning_rate, "Learning rate");
    train->add_option("--batch-size", train_config.batch_size, "Minibatch size");
    train->add_option("--max-epochs", train_config.max_epochs, "Epoch cap");
    train->add_option("--ema-decay", train_config.ema_decay, "Early-stop EMA decay");
    train->add_option("--patience", train_config.patience, "Early-stop patience");
    train->add_option("--l2", train_config.l2, "L2 penalty");
    train->add_option("--seed", train_seed, "Shuffle/split seed");

    // calibrate
    auto* calibrate = app.add_subcommand("calibrate", "Fit BCTS on held-out labeled data");
    std::string cal_model, cal_logits, cal_data, cal_out;
    CalibrationFitConfig cal_config;
    cal_config.learning_rate = 0.1;  // full-batch fit
    int cal_classes = 0, cal_groups = 0;
    calibrate->add_option("--model", cal_model, "Model file (computes logits from --data)");
    calibrate->add_option("--logits", cal_logits, "Precomputed logits CSV");
    calibrate->add_option("--data", cal_data, "Labeled holdout CSV")->required();
    calibrate->add_option("--out", cal_out, "Output calibration JSON")->required();
    calibrate->add_option("--lr", cal_config.learning_rate, "Learning rate");
    calibrate->add_option("--max-epochs", cal_config.max_epochs, "Epoch cap");
    calibrate->add_option("--ema-decay", cal_config.ema_decay, "Early-stop EMA decay");
    calibrate->add_option("--patience", cal_config.patience, "Early-stop patience");
    calibrate->add_option("--classes", cal_classes, "Class count for headerless logits files");
    calibrate->add_option("--groups", cal_groups, "Group count for headerless logits files");

    // adapt
    auto* adapt = app.add_subcommand(
        "adapt", "Estimate the target prior by EM and reweight the posterior");
    std::string adapt_model, adapt_logits, adapt_data, adapt_source_prior, adapt_calibration;
    std::string adapt_out_prior, adapt_out_posterior, adapt_out_result;
    EmConfig em_config;
    std::vector<double> adapt_alpha;
    int adapt_classes = 0, adapt_groups = 0;
    adapt->add_option("--model", adapt_model, "Model file (computes logits from --data)");
    adapt->add_option("--logits", adapt_logits, "Precomputed source-posterior logits CSV");
    adapt->add_option("--data", adapt_data, "Unlabeled target features CSV");
    adapt->add_option("--source-prior", adapt_source_prior,
                      "Source prior CSV (default: the model's training prior)");
    adapt->add_option("--calibration", adapt_calibration, "BCTS calibration JSON");
    adapt->add_option("--alpha", adapt_alpha,
                      "Dirichlet concentration(s); one value broadcasts")
        ->delimiter(',');
    adapt->add_option("--tolerance", em_config.tolerance, "EM L1 convergence tolerance");
    adapt->add_option("--max-iterations", em_config.max_iterations, "EM iteration cap");
    adapt->add_option("--out-prior", adapt_out_prior, "Output estimated target prior CSV")
        ->required();
    adapt->add_option("--out-posterior", adapt_out_posterior, "Output adapted posterior CSV");
    adapt->add_option("--out-result", adapt_out_result, "Output EM result record");
    adapt->add_option("--classes", adapt_classes, "Class count for headerless logits files");
    adapt->add_option("--groups", adapt_groups, "Group count for headerless logits files");

    // sweep
    auto* sweep = app.add_subcommand("sweep", "Run the distribution-shift benchmark sweep");
    std::string sweep_config, sweep_out_dir;
    sweep->add_option("--config", sweep_config, "key=value sweep config file")->required();
    sweep->add_option("--out-dir", sweep_out_dir, "Output directory")->required();

    // eval
    auto* eval = app.add_subcommand("eval", "Score a posterior CSV against labeled data");
    std::string eval_posterior, eval_data, eval_out;
    eval->add_option("--posterior", eval_posterior, "Posterior CSV")->required();
    eval->add_option("--data", eval_data, "Labeled dataset CSV")->required();
    eval->add_option("--out", eval_out, "Output metrics CSV")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (gen->parsed()) return run_gen(gen_spec, gen_lambda, gen_n, gen_seed, gen_out);
        if (train->parsed()) {
            train_config.seed = static_cast<std::uint64_t>(train_seed);
            return run_train(train_data, train_mode, train_prior, train_out, train_config);
        }
        if (calibrate->parsed()) {
            if (cal_model.empty() == cal_logits.empty()) {
                throw InvalidInputError("calibrate needs exactly one of --model or --logits");
            }
            return run_calibrate(cal_model, cal_logits, cal_data, cal_out, cal_config,
                                 cal_classes, cal_groups);
        }
        if (adapt->parsed()) {
            if (adapt_model.empty() == adapt_logits.empty()) {
                throw InvalidInputError("adapt needs exactly one of --model or --logits");
            }
            if (!adapt_alpha.empty()) em_config.dirichlet_alpha = adapt_alpha;
            return run_adapt(adapt_model, adapt_logits, adapt_data, adapt_source_prior,
                             adapt_calibration, em_config, adapt_out_prior, adapt_out_posterior,
                             adapt_out_result, adapt_classes, adapt_groups);
        }
        if (sweep->parsed()) return run_sweep(sweep_config, sweep_out_dir);
        if (eval->parsed()) return run_eval(eval_posterior, eval_data, eval_out);
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    }
    return 0;
}
