#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include <json.hpp>

#include "metashift/calibrate.hpp"
#include "metashift/core.hpp"
#include "metashift/errors.hpp"
#include "metashift/harness.hpp"
#include "metashift/synthdata.hpp"
#include "metashift/train.hpp"

namespace metashift {

// Shortest round-trip decimal formatting; reading the text back recovers the
// exact double, so files written by one subcommand reload losslessly.
inline std::string format_double(double value) {
    char buffer[64];
    auto result = std::to_chars(buffer, buffer + sizeof(buffer), value);
    return std::string(buffer, result.ptr);
}

inline double parse_double(std::string_view text, const std::string& what) {
    double value = 0.0;
    auto result = std::from_chars(text.data(), text.data() + text.size(), value);
    if (result.ec != std::errc{} || result.ptr != text.data() + text.size()) {
        throw InvalidInputError("could not parse " + what + " from '" + std::string(text) + "'");
    }
    return value;
}

inline std::int64_t parse_int(std::string_view text, const std::string& what) {
    std::int64_t value = 0;
    auto result = std::from_chars(text.data(), text.data() + text.size(), value);
    if (result.ec != std::errc{} || result.ptr != text.data() + text.size()) {
        throw InvalidInputError("could not parse " + what + " from '" + std::string(text) + "'");
    }
    return value;
}

inline bool parse_bool(std::string_view text, const std::string& what) {
    if (text == "true" || text == "1" || text == "yes") return true;
    if (text == "false" || text == "0" || text == "no") return false;
    throw InvalidInputError("could not parse " + what + " from '" + std::string(text) +
                            "' (expected true/false)");
}

inline std::string trim(std::string_view text) {
    std::size_t begin = text.find_first_not_of(" \t\r\n");
    if (begin == std::string_view::npos) return {};
    std::size_t end = text.find_last_not_of(" \t\r\n");
    return std::string(text.substr(begin, end - begin + 1));
}

inline std::vector<std::string> split_fields(std::string_view line, char sep = ',') {
    std::vector<std::string> fields;
    std::size_t begin = 0;
    for (;;) {
        std::size_t end = line.find(sep, begin);
        if (end == std::string_view::npos) {
            fields.push_back(trim(line.substr(begin)));
            return fields;
        }
        fields.push_back(trim(line.substr(begin, end - begin)));
        begin = end + 1;
    }
}

inline std::vector<double> parse_double_list(std::string_view text, const std::string& what) {
    std::vector<double> values;
    for (const auto& field : split_fields(text)) values.push_back(parse_double(field, what));
    return values;
}

// FNV-1a 64-bit, used for run-manifest config hashes.
inline std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t hash = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        hash ^= c;
        hash *= 0x100000001b3ULL;
    }
    return hash;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InvalidInputError("cannot open '" + path + "' for reading");
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

inline void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InvalidInputError("cannot open '" + path + "' for writing");
    out << content;
    if (!out) throw InvalidInputError("failed writing '" + path + "'");
}

// ---------------------------------------------------------------------------
// key=value files (# starts a comment). Used for configs, models, EM results.
// ---------------------------------------------------------------------------

struct KvFile {
    std::vector<std::pair<std::string, std::string>> entries;

    bool has(const std::string& key) const {
        for (const auto& [k, v] : entries) {
            if (k == key) return true;
        }
        return false;
    }
    const std::string& get(const std::string& key) const {
        for (const auto& [k, v] : entries) {
            if (k == key) return v;
        }
        throw InvalidInputError("missing required key '" + key + "'");
    }
    std::optional<std::string> get_optional(const std::string& key) const {
        for (const auto& [k, v] : entries) {
            if (k == key) return v;
        }
        return std::nullopt;
    }
};

inline KvFile parse_kv_text(const std::string& text, const std::string& origin) {
    KvFile kv;
    std::istringstream in(text);
    std::string line;
    int line_number = 0;
    while (std::getline(in, line)) {
        ++line_number;
        const std::string stripped = trim(line.substr(0, line.find('#')));
        if (stripped.empty()) continue;
        const std::size_t eq = stripped.find('=');
        if (eq == std::string::npos) {
            throw InvalidInputError(origin + ":" + std::to_string(line_number) +
                                    ": expected key=value, got '" + stripped + "'");
        }
        const std::string key = trim(stripped.substr(0, eq));
        if (kv.has(key)) {
            throw InvalidInputError(origin + ":" + std::to_string(line_number) +
                                    ": duplicate key '" + key + "'");
        }
        kv.entries.emplace_back(key, trim(stripped.substr(eq + 1)));
    }
    return kv;
}

inline KvFile parse_kv_file(const std::string& path) {
    return parse_kv_text(read_file(path), path);
}

// ---------------------------------------------------------------------------
// CSV files. Every meta-label vector file starts with "# C=<c> K=<k>" and
// lists entries in the canonical m = y*K + z order.
// ---------------------------------------------------------------------------

inline std::string space_comment(const MetaLabelSpace& space) {
    return "# C=" + std::to_string(space.num_classes) + " K=" + std::to_string(space.num_groups) +
           "\n";
}

inline std::optional<MetaLabelSpace> parse_space_comment(std::string_view line) {
    if (line.rfind("# C=", 0) != 0) return std::nullopt;
    const std::size_t k_pos = line.find(" K=");
    if (k_pos == std::string_view::npos) return std::nullopt;
    const int classes =
        static_cast<int>(parse_int(trim(line.substr(4, k_pos - 4)), "class count"));
    const int groups = static_cast<int>(parse_int(trim(line.substr(k_pos + 3)), "group count"));
    return make_space(classes, groups);
}

struct CsvTable {
    std::optional<MetaLabelSpace> space;
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

inline CsvTable read_csv(const std::string& path) {
    const std::string text = read_file(path);
    CsvTable table;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        const std::string stripped = trim(line);
        if (stripped.empty()) continue;
        if (stripped.front() == '#') {
            if (auto space = parse_space_comment(stripped)) table.space = *space;
            continue;
        }
        auto fields = split_fields(stripped);
        if (table.header.empty()) {
            table.header = std::move(fields);
        } else {
            if (fields.size() != table.header.size()) {
                throw InvalidInputError(path + ": row has " + std::to_string(fields.size()) +
                                        " fields, header has " +
                                        std::to_string(table.header.size()));
            }
            table.rows.push_back(std::move(fields));
        }
    }
    if (table.header.empty()) throw InvalidInputError(path + ": no header row found");
    return table;
}

// Dataset CSV: header x0,...,x{D-1},y,z.
inline void write_dataset_csv(const std::string& path, const LabeledDataset& dataset,
                              const MetaLabelSpace& space) {
    std::ostringstream out;
    out << space_comment(space);
    const std::size_t dim = dataset.features.cols();
    for (std::size_t d = 0; d < dim; ++d) out << 'x' << d << ',';
    out << "y,z\n";
    for (std::size_t i = 0; i < dataset.features.rows(); ++i) {
        auto row = dataset.features.row(i);
        for (std::size_t d = 0; d < dim; ++d) out << format_double(row[d]) << ',';
        out << dataset.y[i] << ',' << dataset.z[i] << '\n';
    }
    write_file(path, out.str());
}

struct DatasetFile {
    LabeledDataset dataset;
    MetaLabelSpace space;
};

inline DatasetFile read_dataset_csv(const std::string& path) {
    const CsvTable table = read_csv(path);
    if (table.header.size() < 3 || table.header[table.header.size() - 2] != "y" ||
        table.header.back() != "z") {
        throw InvalidInputError(path + ": expected header x0,...,y,z");
    }
    const std::size_t dim = table.header.size() - 2;
    DatasetFile file;
    file.dataset.features = Matrix(table.rows.size(), dim);
    file.dataset.y.resize(table.rows.size());
    file.dataset.z.resize(table.rows.size());
    int max_y = 0, max_z = 0;
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
        const auto& row = table.rows[i];
        for (std::size_t d = 0; d < dim; ++d) {
            file.dataset.features(i, d) = parse_double(row[d], path + " feature");
        }
        file.dataset.y[i] = static_cast<int>(parse_int(row[dim], path + " y"));
        file.dataset.z[i] = static_cast<int>(parse_int(row[dim + 1], path + " z"));
        if (file.dataset.y[i] < 0 || file.dataset.z[i] < 0) {
            throw InvalidInputError(path + ": labels must be nonnegative");
        }
        max_y = std::max(max_y, file.dataset.y[i]);
        max_z = std::max(max_z, file.dataset.z[i]);
    }
    file.space = table.space ? *table.space : make_space(max_y + 1, max_z + 1);
    if (max_y >= file.space.num_classes || max_z >= file.space.num_groups) {
        throw InvalidInputError(path + ": labels exceed the declared C/K header");
    }
    return file;
}

// Prior CSV: single row p0..p{M-1} in canonical order.
inline void write_prior_csv(const std::string& path, const JointPrior& prior) {
    std::ostringstream out;
    out << space_comment(prior.space);
    for (int m = 0; m < prior.space.size(); ++m) out << (m ? "," : "") << 'p' << m;
    out << '\n';
    for (int m = 0; m < prior.space.size(); ++m) {
        out << (m ? "," : "") << format_double(prior.probs[m]);
    }
    out << '\n';
    write_file(path, out.str());
}

inline JointPrior read_prior_csv(const std::string& path) {
    const CsvTable table = read_csv(path);
    if (!table.space) {
        throw InvalidInputError(path + ": prior files need a '# C=<c> K=<k>' header comment");
    }
    if (table.rows.size() != 1) {
        throw InvalidInputError(path + ": expected exactly one row of probabilities");
    }
    const int m_count = table.space->size();
    if (static_cast<int>(table.rows[0].size()) != m_count) {
        throw InvalidInputError(path + ": expected " + std::to_string(m_count) +
                                " columns for C=" + std::to_string(table.space->num_classes) +
                                " K=" + std::to_string(table.space->num_groups) + ", found " +
                                std::to_string(table.rows[0].size()));
    }
    std::vector<double> probs(m_count);
    for (int m = 0; m < m_count; ++m) probs[m] = parse_double(table.rows[0][m], path + " prior");
    return make_joint_prior(*table.space, std::move(probs));
}

namespace detail {

inline void write_matrix_csv(const std::string& path, const MetaLabelSpace& space,
                             const Matrix& values, char column_prefix) {
    std::ostringstream out;
    out << space_comment(space);
    for (std::size_t m = 0; m < values.cols(); ++m) out << (m ? "," : "") << column_prefix << m;
    out << '\n';
    for (std::size_t i = 0; i < values.rows(); ++i) {
        auto row = values.row(i);
        for (std::size_t m = 0; m < row.size(); ++m) {
            out << (m ? "," : "") << format_double(row[m]);
        }
        out << '\n';
    }
    write_file(path, out.str());
}

inline std::pair<MetaLabelSpace, Matrix> read_matrix_csv(
    const std::string& path, std::optional<MetaLabelSpace> declared) {
    const CsvTable table = read_csv(path);
    std::optional<MetaLabelSpace> space = table.space ? table.space : declared;
    if (!space) {
        throw InvalidInputError(path +
                                ": needs a '# C=<c> K=<k>' header comment (or pass --classes/--groups)");
    }
    const int m_count = space->size();
    if (static_cast<int>(table.header.size()) != m_count) {
        throw InvalidInputError(path + ": expected " + std::to_string(m_count) +
                                " columns for C=" + std::to_string(space->num_classes) + " K=" +
                                std::to_string(space->num_groups) + ", found " +
                                std::to_string(table.header.size()));
    }
    Matrix values(table.rows.size(), m_count);
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
        for (int m = 0; m < m_count; ++m) {
            values(i, m) = parse_double(table.rows[i][m], path + " value");
        }
    }
    return {*space, std::move(values)};
}

}  // namespace detail

inline void write_logits_csv(const std::string& path, const LogitsMatrix& logits) {
    detail::write_matrix_csv(path, logits.space, logits.values, 'l');
}

inline LogitsMatrix read_logits_csv(const std::string& path,
                                    std::optional<MetaLabelSpace> declared = std::nullopt) {
    auto [space, values] = detail::read_matrix_csv(path, declared);
    return make_logits(space, std::move(values));
}

inline void write_posterior_csv(const std::string& path, const PosteriorMatrix& posterior) {
    detail::write_matrix_csv(path, posterior.space, posterior.values, 'p');
}

inline PosteriorMatrix read_posterior_csv(const std::string& path,
                                          std::optional<MetaLabelSpace> declared = std::nullopt) {
    auto [space, values] = detail::read_matrix_csv(path, declared);
    return make_posterior(space, std::move(values));
}

// ---------------------------------------------------------------------------
// Model / calibration / EM-result records.
// ---------------------------------------------------------------------------

inline std::string join_doubles(std::span<const double> values) {
    std::string out;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (i) out += ',';
        out += format_double(values[i]);
    }
    return out;
}

inline void write_model(const std::string& path, const LinearSoftmaxModel& model) {
    std::ostringstream out;
    out << "format=metashift-model-v1\n";
    out << "classes=" << model.space.num_classes << '\n';
    out << "groups=" << model.space.num_groups << '\n';
    out << "dim=" << model.dim << '\n';
    out << "mode=" << to_string(model.mode) << '\n';
    out << "training_prior=" << join_doubles(model.training_prior.probs) << '\n';
    out << "feature_mean=" << join_doubles(model.feature_mean) << '\n';
    out << "feature_scale=" << join_doubles(model.feature_scale) << '\n';
    out << "weights=" << join_doubles(model.weights.data()) << '\n';
    out << "bias=" << join_doubles(model.bias) << '\n';
    write_file(path, out.str());
}

inline LinearSoftmaxModel read_model(const std::string& path) {
    const KvFile kv = parse_kv_file(path);
    if (kv.get("format") != "metashift-model-v1") {
        throw InvalidInputError(path + ": unknown model format '" + kv.get("format") + "'");
    }
    const MetaLabelSpace space =
        make_space(static_cast<int>(parse_int(kv.get("classes"), "classes")),
                   static_cast<int>(parse_int(kv.get("groups"), "groups")));
    const int dim = static_cast<int>(parse_int(kv.get("dim"), "dim"));
    if (dim < 1) throw InvalidInputError(path + ": dim must be positive");

    LinearSoftmaxModel model;
    model.space = space;
    model.dim = dim;
    model.mode = training_mode_from_string(kv.get("mode"));
    model.training_prior =
        make_joint_prior(space, parse_double_list(kv.get("training_prior"), "training_prior"));
    model.feature_mean = parse_double_list(kv.get("feature_mean"), "feature_mean");
    model.feature_scale = parse_double_list(kv.get("feature_scale"), "feature_scale");
    const auto weights = parse_double_list(kv.get("weights"), "weights");
    model.bias = parse_double_list(kv.get("bias"), "bias");
    if (static_cast<int>(model.feature_mean.size()) != dim ||
        static_cast<int>(model.feature_scale.size()) != dim ||
        static_cast<int>(model.bias.size()) != space.size() ||
        static_cast<int>(weights.size()) != space.size() * dim) {
        throw InvalidInputError(path + ": model field lengths are inconsistent with dim/classes/groups");
    }
    model.weights = Matrix(space.size(), dim);
    model.weights.data() = weights;
    return model;
}

inline void write_calibration_json(const std::string& path, const CalibrationParams& params,
                                   const MetaLabelSpace& space) {
    nlohmann::json j;
    j["format"] = "metashift-bcts-v1";
    j["classes"] = space.num_classes;
    j["groups"] = space.num_groups;
    j["temperature"] = params.temperature;
    j["bias"] = params.bias;
    write_file(path, j.dump(2) + "\n");
}

inline std::pair<CalibrationParams, MetaLabelSpace> read_calibration_json(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInputError(path + ": " + e.what());
    }
    try {
        if (j.at("format") != "metashift-bcts-v1") {
            throw InvalidInputError(path + ": unknown calibration format");
        }
        const MetaLabelSpace space =
            make_space(j.at("classes").get<int>(), j.at("groups").get<int>());
        CalibrationParams params = make_calibration_params(
            j.at("temperature").get<double>(), j.at("bias").get<std::vector<double>>());
        if (static_cast<int>(params.bias.size()) != space.size()) {
            throw InvalidInputError(path + ": bias length does not match classes*groups");
        }
        return {std::move(params), space};
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInputError(path + ": " + e.what());
    }
}

inline void write_em_result(const std::string& path, const EmResult& result) {
    std::ostringstream out;
    out << "format=metashift-em-v1\n";
    out << "classes=" << result.target_prior.space.num_classes << '\n';
    out << "groups=" << result.target_prior.space.num_groups << '\n';
    out << "prior=" << join_doubles(result.target_prior.probs) << '\n';
    out << "iterations=" << result.iterations << '\n';
    out << "log_likelihood_trace=" << join_doubles(result.log_likelihood_trace) << '\n';
    out << "expected_counts=" << join_doubles(result.expected_counts) << '\n';
    write_file(path, out.str());
}

// ---------------------------------------------------------------------------
// Generative spec files.
// ---------------------------------------------------------------------------

inline void write_generative_spec(const std::string& path, const GaussianGenerativeSpec& spec) {
    std::ostringstream out;
    out << "format=metashift-spec-v1\n";
    out << "classes=" << spec.space.num_classes << '\n';
    out << "groups=" << spec.space.num_groups << '\n';
    out << "dim=" << spec.dim << '\n';
    for (int m = 0; m < spec.space.size(); ++m) {
        out << "mean_" << m << '=' << join_doubles(spec.means[m]) << '\n';
        out << "cov_" << m << '=' << join_doubles(spec.covariances[m].data()) << '\n';
    }
    write_file(path, out.str());
}

inline GaussianGenerativeSpec read_generative_spec(const std::string& path) {
    const KvFile kv = parse_kv_file(path);
    if (kv.get("format") != "metashift-spec-v1") {
        throw SpecValidationError(path + ": unknown spec format '" + kv.get("format") + "'");
    }
    const MetaLabelSpace space =
        make_space(static_cast<int>(parse_int(kv.get("classes"), "classes")),
                   static_cast<int>(parse_int(kv.get("groups"), "groups")));
    const int dim = static_cast<int>(parse_int(kv.get("dim"), "dim"));
    std::vector<std::vector<double>> means;
    std::vector<Matrix> covariances;
    for (int m = 0; m < space.size(); ++m) {
        means.push_back(parse_double_list(kv.get("mean_" + std::to_string(m)), "mean"));
        const auto cov_values = parse_double_list(kv.get("cov_" + std::to_string(m)), "cov");
        if (static_cast<int>(cov_values.size()) != dim * dim) {
            throw SpecValidationError(path + ": cov_" + std::to_string(m) + " needs " +
                                      std::to_string(dim * dim) + " entries");
        }
        Matrix cov(dim, dim);
        cov.data() = cov_values;
        covariances.push_back(std::move(cov));
    }
    return make_gaussian_spec(space, dim, std::move(means), std::move(covariances));
}

// Builtin name or a spec file path.
inline GaussianGenerativeSpec resolve_generative_spec(const std::string& name_or_path) {
    if (name_or_path == "gauss-cmnist") return gauss_cmnist_spec();
    if (!std::filesystem::exists(name_or_path)) {
        throw InvalidInputError("unknown spec '" + name_or_path +
                                "': not a builtin name (gauss-cmnist) and no such file");
    }
    return read_generative_spec(name_or_path);
}

// ---------------------------------------------------------------------------
// Sweep config and sweep outputs.
// ---------------------------------------------------------------------------

struct SweepConfigFile {
    SweepConfig config;
    std::string spec_source = "gauss-cmnist";
    std::string raw_text;  // for the manifest hash
};

inline SweepConfigFile parse_sweep_config_text(const std::string& text, const std::string& origin) {
    const KvFile kv = parse_kv_text(text, origin);
    SweepConfigFile file;
    file.raw_text = text;
    std::vector<std::string> unknown;
    for (const auto& [key, value] : kv.entries) {
        if (key == "lambdas") {
            file.config.lambdas = parse_double_list(value, key);
        } else if (key == "source_lambda") {
            file.config.source_lambda = parse_double(value, key);
        } else if (key == "adaptation_batch_sizes") {
            file.config.adaptation_batch_sizes.clear();
            for (const auto& field : split_fields(value)) {
                file.config.adaptation_batch_sizes.push_back(
                    static_cast<int>(parse_int(field, key)));
            }
        } else if (key == "n_train") {
            file.config.n_train = static_cast<int>(parse_int(value, key));
        } else if (key == "n_test_per_target") {
            file.config.n_test_per_target = static_cast<int>(parse_int(value, key));
        } else if (key == "replicates") {
            file.config.replicates = static_cast<int>(parse_int(value, key));
        } else if (key == "calibration_enabled") {
            file.config.calibration_enabled = parse_bool(value, key);
        } else if (key == "methods") {
            file.config.methods = split_fields(value);
            if (file.config.methods.size() == 1 && file.config.methods[0].empty()) {
                file.config.methods.clear();
            }
        } else if (key == "base_seed") {
            file.config.base_seed = parse_int(value, key);
        } else if (key == "spec") {
            file.spec_source = value;
        } else if (key == "logit_scale") {
            file.config.logit_scale = parse_double(value, key);
        } else if (key == "source_prior") {
            if (value == "counts") {
                file.config.source_prior_estimate = SourcePriorEstimate::kCounts;
            } else if (value == "posterior_mean") {
                file.config.source_prior_estimate = SourcePriorEstimate::kPosteriorMean;
            } else {
                throw InvalidInputError(origin + ": source_prior must be counts or posterior_mean");
            }
        } else if (key == "write_priors") {
            file.config.write_priors = parse_bool(value, key);
        } else if (key == "train_learning_rate") {
            file.config.train.learning_rate = parse_double(value, key);
        } else if (key == "train_batch_size") {
            file.config.train.batch_size = static_cast<int>(parse_int(value, key));
        } else if (key == "train_max_epochs") {
            file.config.train.max_epochs = static_cast<int>(parse_int(value, key));
        } else if (key == "train_ema_decay") {
            file.config.train.ema_decay = parse_double(value, key);
        } else if (key == "train_patience") {
            file.config.train.patience = static_cast<int>(parse_int(value, key));
        } else if (key == "train_l2") {
            file.config.train.l2 = parse_double(value, key);
        } else if (key == "calibration_learning_rate") {
            file.config.calibration.learning_rate = parse_double(value, key);
        } else if (key == "calibration_max_epochs") {
            file.config.calibration.max_epochs = static_cast<int>(parse_int(value, key));
        } else if (key == "calibration_ema_decay") {
            file.config.calibration.ema_decay = parse_double(value, key);
        } else if (key == "calibration_patience") {
            file.config.calibration.patience = static_cast<int>(parse_int(value, key));
        } else if (key == "em_tolerance") {
            file.config.em.tolerance = parse_double(value, key);
        } else if (key == "em_max_iterations") {
            file.config.em.max_iterations = static_cast<int>(parse_int(value, key));
        } else if (key == "em_alpha") {
            file.config.em.dirichlet_alpha = parse_double_list(value, key);
        } else {
            unknown.push_back(key);
        }
    }
    if (!unknown.empty()) {
        std::string joined;
        for (const auto& key : unknown) joined += (joined.empty() ? "" : ", ") + key;
        throw InvalidInputError(origin + ": unknown config keys: " + joined);
    }
    validate(file.config);
    return file;
}

inline SweepConfigFile parse_sweep_config(const std::string& path) {
    return parse_sweep_config_text(read_file(path), path);
}

inline void write_sweep_csv(const std::string& path, const std::vector<SweepRecord>& records) {
    std::ostringstream out;
    out << "lambda,method,seed,auc\n";
    for (const auto& record : records) {
        out << format_double(record.lambda) << ',' << record.method << ',' << record.seed << ','
            << format_double(record.auc) << '\n';
    }
    write_file(path, out.str());
}

inline void write_summary_csv(const std::string& path, const std::vector<SummaryRow>& summary) {
    std::ostringstream out;
    out << "lambda,method,mean_auc,sem,n\n";
    for (const auto& row : summary) {
        out << format_double(row.lambda) << ',' << row.method << ',' << format_double(row.mean_auc)
            << ',' << format_double(row.sem) << ',' << row.n << '\n';
    }
    write_file(path, out.str());
}

inline void write_priors_csv(const std::string& path, const MetaLabelSpace& space,
                             const std::vector<PriorRecord>& priors) {
    std::ostringstream out;
    out << space_comment(space);
    out << "lambda,method,seed,batch";
    for (int m = 0; m < space.size(); ++m) out << ",p" << m;
    out << '\n';
    for (const auto& record : priors) {
        out << format_double(record.lambda) << ',' << record.method << ',' << record.seed << ','
            << record.batch;
        for (int m = 0; m < space.size(); ++m) out << ',' << format_double(record.prior.probs[m]);
        out << '\n';
    }
    write_file(path, out.str());
}

inline void write_manifest(const std::string& path, const SweepConfigFile& file) {
    const SweepConfig& config = file.config;
    std::ostringstream out;
    out << "format=metashift-manifest-v1\n";
    char hash[32];
    std::snprintf(hash, sizeof(hash), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(file.raw_text)));
    out << "config_hash=" << hash << '\n';
    out << "spec=" << file.spec_source << '\n';
    out << "base_seed=" << config.base_seed << '\n';
    out << "replicate_seeds=";
    for (int r = 0; r < config.replicates; ++r) {
        out << (r ? "," : "") << (config.base_seed + r);
    }
    out << '\n';
    out << "lambdas=" << join_doubles(config.lambdas) << '\n';
    std::string methods;
    for (const auto& method : expand_methods(config)) {
        methods += (methods.empty() ? "" : ",") + method;
    }
    out << "methods=" << methods << '\n';
    out << "n_train=" << config.n_train << '\n';
    out << "n_test_per_target=" << config.n_test_per_target << '\n';
    out << "calibration_enabled=" << (config.calibration_enabled ? "true" : "false") << '\n';
    out << "logit_scale=" << format_double(config.logit_scale) << '\n';
    out << "source_prior="
        << (config.source_prior_estimate == SourcePriorEstimate::kCounts ? "counts"
                                                                         : "posterior_mean")
        << '\n';
    write_file(path, out.str());
}

}  // namespace metashift
