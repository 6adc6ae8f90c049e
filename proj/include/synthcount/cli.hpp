#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "synthcount/dcgp.hpp"
#include "synthcount/genclient.hpp"
#include "synthcount/models.hpp"
#include "synthcount/train.hpp"

namespace synthcount::cli {

using json = nlohmann::json;

struct SortingDataConfig {
    int refs = 500;
    int min_count = 1;
    int max_count = 50;
    int n_minus = 1;
    int n_plus = 1;
    double band_fraction = 1.0 / 3.0;
    double strength = 0.75;
};

struct CountDataConfig {
    // Prompted counts; empty means the default schedule.
    std::vector<int> categories;
    int per_category = 150;
    int zero_count = 800;
    // Fraction of non-zero rows relabelled to a far category when the manifest is written.
    double label_noise = 0.0;
    bool filter = true;
};

struct DensityDataConfig {
    int per_class = 200;
    int sparse_max = 25;
    int dense_min = 60;
    int dense_max = 400;
};

// Held-out images with exact counts, used by infer and ablate.
struct TestDataConfig {
    int n = 100;
    int min_count = 1;
    int max_count = 400;
    int height = 256;
    int width = 256;
};

struct DataConfig {
    // Relative paths resolve against $SYNTHCOUNT_DATA or the working directory.
    std::string root = "data";
    std::string backend = "oracle";  // oracle | remote
    genclient::RemoteOptions remote;
    genclient::OracleOptions oracle;
    std::uint64_t seed = 0;
    SortingDataConfig sorting;
    CountDataConfig count;
    DensityDataConfig density;
    TestDataConfig test;
};

struct ModelConfig {
    std::string checkpoint = "runs/model";
    models::EncoderConfig encoder;
    std::uint64_t seed = 1;
};

struct InferSection {
    std::string strategy = "dcgp";  // dcgp | fixed | gated
    dcgp::InferConfig dcgp;
    bool overlay = false;
};

struct Config {
    DataConfig data;
    ModelConfig model;
    train::TrainConfig train;
    InferSection infer;
};

// Reads a YAML config, then applies "section.key=value" overrides. Unknown keys and
// malformed values raise ConfigError with the line number when one is known.
Config load_config(const std::optional<std::filesystem::path>& path,
                   const std::vector<std::string>& overrides = {});
Config parse_config(const std::string& yaml_text, const std::vector<std::string>& overrides = {});

json to_json(const Config& config);

std::filesystem::path data_dir(const Config& config);
std::filesystem::path checkpoint_dir(const Config& config);
std::filesystem::path manifest_path(const Config& config, const std::string& kind);

struct EvalReport {
    int n = 0;
    double mae = 0.0;
    // Root mean squared error.
    double mse = 0.0;
    struct Entry {
        std::string path;
        double truth = 0.0;
        double predicted = 0.0;
    };
    std::vector<Entry> per_image;
};

json to_json(const EvalReport& report);

EvalReport evaluate(std::span<const double> truth, std::span<const double> predicted);

// Matches predictions to truth rows by path; every truth row needs a prediction.
EvalReport evaluate(const std::vector<std::pair<std::string, double>>& truth,
                    const std::map<std::string, double>& predictions);

// Truth rows come from a manifest (true_count, else prompt_count); predictions from an
// infer report file (final_count).
EvalReport evaluate_files(const std::filesystem::path& truth_manifest,
                          const std::filesystem::path& predictions);

struct AblationRow {
    std::string variant;
    double mae = 0.0;
    double mse = 0.0;
};

struct AblationTable {
    std::string name;
    int n = 0;
    std::vector<AblationRow> rows;
};

json to_json(const AblationTable& table);
std::string format_table(const AblationTable& table);

// Entry point of the command-line tool. Errors are printed to stderr as a JSON record
// {"error": code, "message": text} and give a nonzero exit status.
int run(int argc, char** argv);

}  // namespace synthcount::cli
