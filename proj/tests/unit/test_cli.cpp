#include <cmath>
#include <fstream>

#include <gtest/gtest.h>

#include "support.hpp"
#include "synthcount/cli.hpp"

namespace synthcount::cli {
namespace {

using testing::expect_error;
using testing::TempDir;

TEST(Config, DefaultsAndOverrides) {
    const auto cfg = parse_config("", {"train.epochs=3", "infer.M=4", "data.count.categories=[1, 2]"});
    EXPECT_EQ(cfg.train.epochs, 3);
    EXPECT_EQ(cfg.infer.dcgp.M, 4);
    EXPECT_EQ(cfg.data.count.categories, (std::vector<int>{1, 2}));
    EXPECT_EQ(cfg.infer.strategy, "dcgp");
}

TEST(Config, YamlValues) {
    const auto cfg = parse_config("model:\n  feature_dim: 16\ninfer:\n  tau: 0.25\n  hybrid_resolution: false\n");
    EXPECT_EQ(cfg.model.encoder.feature_dim, 16);
    EXPECT_DOUBLE_EQ(cfg.infer.dcgp.tau, 0.25);
    EXPECT_FALSE(cfg.infer.dcgp.hybrid_resolution);
}

TEST(Config, UnknownKeyNamesTheLine) {
    try {
        parse_config("data:\n  root: x\n  bogus: 1\n");
        ADD_FAILURE() << "expected ConfigError";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::ConfigError);
        const std::string msg = e.what();
        EXPECT_NE(msg.find("line 3"), std::string::npos) << msg;
        EXPECT_NE(msg.find("data.bogus"), std::string::npos) << msg;
    }
}

TEST(Config, InvalidValues) {
    expect_error(ErrorCode::ConfigError, [] { parse_config("train:\n  epochs: many\n"); });
    expect_error(ErrorCode::ConfigError, [] { parse_config("", {"train.nope=1"}); });
    expect_error(ErrorCode::ConfigError, [] { parse_config("", {"no_equals_sign"}); });
    expect_error(ErrorCode::ConfigError, [] { parse_config("", {"infer.strategy=magic"}); });
    expect_error(ErrorCode::ConfigError, [] { parse_config("", {"train.lr_head=-1"}); });
}

TEST(Config, EffectiveConfigRoundTrips) {
    const auto cfg = parse_config("", {"train.seed=7", "data.seed=9"});
    const auto j = to_json(cfg);
    EXPECT_EQ(j.at("train").at("seed"), 7);
    EXPECT_EQ(j.at("data").at("seed"), 9);
    EXPECT_EQ(to_json(parse_config(j.dump())), j);
}

TEST(Evaluate, WorkedExample) {
    const std::vector<double> truth{10.0, 20.0};
    const std::vector<double> pred{12.0, 16.0};
    const auto report = evaluate(truth, pred);
    EXPECT_EQ(report.n, 2);
    EXPECT_DOUBLE_EQ(report.mae, 3.0);
    EXPECT_DOUBLE_EQ(report.mse, std::sqrt(10.0));
}

TEST(Evaluate, MissingPrediction) {
    const std::vector<double> truth{1.0, 2.0};
    const std::vector<double> pred{1.0};
    expect_error(ErrorCode::MissingPrediction, [&] { evaluate(truth, pred); });
    const std::vector<std::pair<std::string, double>> rows{{"a", 1.0}, {"b", 2.0}};
    const std::map<std::string, double> preds{{"a", 1.5}};
    expect_error(ErrorCode::MissingPrediction, [&] { evaluate(rows, preds); });
}

TEST(Ablation, TableFormatting) {
    AblationTable table{"partition", 4, {{"fixed-1x1", 3.5, 4.0}, {"dcgp-3x3", 1.25, 2.0}}};
    const auto text = format_table(table);
    EXPECT_NE(text.find("fixed-1x1"), std::string::npos);
    EXPECT_NE(text.find("dcgp-3x3"), std::string::npos);
    EXPECT_EQ(to_json(table).at("rows").size(), 2U);
}

int run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "synthcount");
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    return run(static_cast<int>(argv.size()), argv.data());
}

// Smallest configuration that exercises every verb.
std::string tiny_yaml(const std::filesystem::path& root) {
    return "data:\n"
           "  root: " + (root / "data").string() + "\n"
           "  oracle: {height: 64, width: 64}\n"
           "  sorting: {refs: 4, min_count: 2, max_count: 8}\n"
           "  count: {categories: [1, 3], per_category: 3, zero_count: 2}\n"
           "  density: {per_class: 2, sparse_max: 4, dense_min: 20, dense_max: 30}\n"
           "  test: {n: 3, min_count: 1, max_count: 30, height: 64, width: 64}\n"
           "model:\n"
           "  checkpoint: " + (root / "ckpt").string() + "\n"
           "  input_size: 32\n  downsample_factor: 4\n  depth: 3\n  feature_dim: 8\n  base_width: 4\n"
           "train: {epochs: 1, probe_epochs: 5, batch_size: 2}\n"
           "infer: {M: 2}\n";
}

TEST(Cli, EndToEndOnATinyConfig) {
    TempDir dir("cli");
    const auto cfg_file = (dir.path() / "tiny.yaml").string();
    std::ofstream(cfg_file) << tiny_yaml(dir.path());

    EXPECT_EQ(run_cli({"-q", "-c", cfg_file, "infer", "x.png"}), 1);  // no checkpoint yet
    ASSERT_EQ(run_cli({"-q", "-c", cfg_file, "generate"}), 0);
    EXPECT_TRUE(std::filesystem::exists(dir.path() / "data" / "test" / "test.jsonl"));
    ASSERT_EQ(run_cli({"-q", "-c", cfg_file, "train", "--stage", "all"}), 0);
    EXPECT_TRUE(std::filesystem::exists(dir.path() / "ckpt" / "checkpoint.json"));

    const auto test_manifest = (dir.path() / "data" / "test" / "test.jsonl").string();
    const auto reports = (dir.path() / "reports.jsonl").string();
    ASSERT_EQ(run_cli({"-q", "-c", cfg_file, "infer", "--manifest", test_manifest, "-o", reports}), 0);
    const auto rows = manifest::read_jsonl(reports);
    ASSERT_EQ(rows.size(), 3U);
    EXPECT_EQ(rows[0].at("M"), 2);
    EXPECT_EQ(rows[0].at("cells").size(), 4U);

    const auto eval = (dir.path() / "eval.json").string();
    ASSERT_EQ(run_cli({"-q", "-c", cfg_file, "evaluate", "--truth", test_manifest, "--predictions", reports, "-o", eval}), 0);
    json report;
    std::ifstream(eval) >> report;
    EXPECT_EQ(report.at("n"), 3);
    EXPECT_EQ(evaluate_files(test_manifest, reports).mae, report.at("mae").get<double>());

    ASSERT_EQ(run_cli({"-q", "-c", cfg_file, "ablate", "--table", "partition"}), 0);
    EXPECT_TRUE(std::filesystem::exists(dir.path() / "data" / "ablation_partition.json"));
}

TEST(Cli, BadArgumentsFail) {
    EXPECT_NE(run_cli({"generate", "--kind", "nonsense"}), 0);
    EXPECT_NE(run_cli({}), 0);
}

}  // namespace
}  // namespace synthcount::cli
