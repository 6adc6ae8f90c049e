// End-to-end acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "synthcount/cli.hpp"
#include "synthcount/dcgp.hpp"
#include "synthcount/genclient.hpp"
#include "synthcount/manifest.hpp"
#include "synthcount/models.hpp"
#include "synthcount/random.hpp"
#include "synthcount/ranking.hpp"
#include "synthcount/scene_lab.hpp"
#include "synthcount/train.hpp"

namespace fs = std::filesystem;
using namespace synthcount;
using json = nlohmann::json;

namespace {

// Tolerances and thresholds.
constexpr double kRkGradTolerance = 1e-9;
constexpr double kRankingSeconds = 10.0;
constexpr double kSumIdentityRelative = 1e-5;
constexpr double kSumIdentitySeconds = 60.0;
constexpr double kBaselineRatio = 0.5;
constexpr double kMinSpearman = 0.9;
constexpr double kMinCorruptedDropped = 0.70;
constexpr double kMaxCleanDropped = 0.10;
constexpr double kNoiseFraction = 0.20;

// Test-set sizes.
constexpr int kRankingInstances = 1000;
constexpr int kSumIdentityImages = 100;
constexpr int kOrderingTriplets = 1000;
constexpr int kHeldOut = 150;
constexpr int kFilterPerCategory = 20;
constexpr int kPartitionImages = 40;

int failures = 0;

void report(int id, const char* name, bool pass, const std::string& detail) {
    std::printf("%s criterion %d (%s): %s\n", pass ? "PASS" : "FAIL", id, name, detail.c_str());
    std::fflush(stdout);
    if (!pass) ++failures;
}

std::string fmt(const char* pattern, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, pattern, args...);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

// ---- ranking core ---------------------------------------------------------------------

Eigen::VectorXd brute_rank(const Eigen::VectorXd& v) {
    Eigen::VectorXd r(v.size());
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        int rank = 1;
        for (Eigen::Index j = 0; j < v.size(); ++j) rank += v(j) > v(i) || (v(j) == v(i) && j < i);
        r(i) = rank;
    }
    return r;
}

bool rows_agree(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        if (brute_rank(a.row(i).transpose()) != brute_rank(b.row(i).transpose())) return false;
    }
    return true;
}

void ranking_core() {
    const auto start = std::chrono::steady_clock::now();
    int cases = 0;
    int mismatched = 0;
    std::array<int, 3> labels{0, 1, 2};
    do {
        const auto s_y = ranking::label_similarity(std::vector<int>(labels.begin(), labels.end()));
        std::array<double, 3> preds{0.0, 1.0, 2.0};
        do {
            Eigen::VectorXd p(3);
            p << preds[0], preds[1], preds[2];
            const auto s_hat = ranking::pred_similarity(p);
            const auto loss = ranking::sort_loss(s_y, s_hat, s_y, 5.0);
            mismatched += (loss.total == 0.0) != rows_agree(s_y.values, s_hat.values);
            ++cases;
        } while (std::next_permutation(preds.begin(), preds.end()));
    } while (std::next_permutation(labels.begin(), labels.end()));

    Rng rng(0x5EED);
    double worst = 0.0;
    for (int trial = 0; trial < kRankingInstances; ++trial) {
        const int n = rng.uniform_int(2, 8);
        Eigen::VectorXd v(n), up(n);
        for (int i = 0; i < n; ++i) {
            v(i) = rng.normal();
            up(i) = rng.normal() * 3.0;
        }
        const double lambda_bb = rng.uniform(0.05, 3.0);
        const Eigen::VectorXd expect = -(brute_rank(v) - brute_rank(v + lambda_bb * up)) / lambda_bb;
        worst = std::max(worst, (ranking::rk_grad(v, up, lambda_bb) - expect).cwiseAbs().maxCoeff());
    }
    const double elapsed = seconds_since(start);
    report(1, "ranking core", cases == 36 && mismatched == 0 && worst <= kRkGradTolerance && elapsed < kRankingSeconds,
           fmt("%d orderings, %d disagreements; rk_grad max error %.2e over %d instances; %.2f s", cases, mismatched,
               worst, kRankingInstances, elapsed));
}

// ---- count-map sum identity -----------------------------------------------------------

void sum_identity(const models::EncoderConfig& encoder) {
    const auto start = std::chrono::steady_clock::now();
    auto model = models::CountingModel::create(encoder, 0xC0FFEE);
    Rng rng(0x51);
    for (Eigen::Index k = 0; k < model.count_head.weight.size(); ++k) {
        model.count_head.weight(k) = static_cast<float>(rng.normal());
    }
    model.count_head.bias = static_cast<float>(rng.normal());
    double worst = 0.0;
    for (int i = 0; i < kSumIdentityImages; ++i) {
        const int h = rng.uniform_int(64, 320);
        const int w = rng.uniform_int(64, 320);
        cv::Mat image(h, w, CV_8UC3);
        cv::randu(image, cv::Scalar::all(0), cv::Scalar::all(256));
        const double whole = model.predict_count(image);
        const double total = dcgp::count_map(image, model).total();
        worst = std::max(worst, std::abs(total - whole) / std::max(std::abs(whole), 1e-12));
    }
    const double elapsed = seconds_since(start);
    report(2, "count-map sum identity", worst <= kSumIdentityRelative && elapsed < kSumIdentitySeconds,
           fmt("max relative error %.2e over %d images; %.1f s", worst, kSumIdentityImages, elapsed));
}

// ---- oracle triplet ordering ----------------------------------------------------------

void ordering_soundness() {
    Rng rng(0x0DE5);
    int total = 0;
    int ordered = 0;
    while (total < kOrderingTriplets) {
        scene_lab::SceneSpec spec;
        spec.count = rng.uniform_int(1, 50);
        spec.seed = rng.next();
        const auto ref = scene_lab::render_scene(spec);
        scene_lab::TripletOptions options;
        options.seed = rng.next();
        for (const auto& t : scene_lab::make_triplets(ref, 2, 2, options)) {
            const int fewer = *t.images[0]->true_count;
            const int mid = *t.images[1]->true_count;
            const int more = *t.images[2]->true_count;
            ordered += fewer <= mid && mid <= more;
            ++total;
        }
    }
    report(3, "oracle ordering soundness", ordered == total, fmt("%d of %d triplets ordered", ordered, total));
}

// ---- CLI pipeline ---------------------------------------------------------------------

int run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "synthcount");
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    // Keep stdout to the criterion lines.
    std::ostringstream sink;
    auto* saved = std::cout.rdbuf(sink.rdbuf());
    const int status = cli::run(static_cast<int>(argv.size()), argv.data());
    std::cout.rdbuf(saved);
    return status;
}

struct Pipeline {
    fs::path root;
    std::vector<std::string> base;  // config and path overrides
    cli::Config config;
    std::array<std::uint64_t, 3> checksums{};  // after sort, count, density
    json eval;
    bool ok = true;
};

std::uint64_t checkpoint_checksum(const fs::path& dir) { return models::load_checkpoint(dir).encoder.checksum(); }

Pipeline run_pipeline(const fs::path& config_file, const fs::path& root) {
    Pipeline p;
    p.root = root;
    fs::remove_all(root);
    fs::create_directories(root);
    const std::vector<std::string> overrides{"data.root=" + (root / "data").string(),
                                             "model.checkpoint=" + (root / "ckpt").string()};
    p.base = {"-q", "-c", config_file.string()};
    for (const auto& o : overrides) {
        p.base.push_back("--set");
        p.base.push_back(o);
    }
    p.config = cli::load_config(config_file, overrides);
    auto step = [&](std::vector<std::string> args) {
        std::vector<std::string> full = p.base;
        full.insert(full.end(), args.begin(), args.end());
        if (p.ok && run_cli(full) != 0) {
            std::fprintf(stderr, "pipeline step failed:");
            for (const auto& a : args) std::fprintf(stderr, " %s", a.c_str());
            std::fprintf(stderr, "\n");
            p.ok = false;
        }
    };
    const auto ckpt = root / "ckpt";
    step({"generate"});
    step({"train", "--stage", "sort"});
    if (p.ok) {
        p.checksums[0] = checkpoint_checksum(ckpt);
        fs::copy(ckpt, root / "ckpt_sort", fs::copy_options::recursive);
    }
    step({"train", "--stage", "count"});
    if (p.ok) p.checksums[1] = checkpoint_checksum(ckpt);
    step({"train", "--stage", "density"});
    if (p.ok) p.checksums[2] = checkpoint_checksum(ckpt);
    const auto test_manifest = (root / "data" / "test" / "test.jsonl").string();
    const auto reports = (root / "reports.jsonl").string();
    const auto eval = (root / "eval.json").string();
    step({"infer", "--manifest", test_manifest, "-o", reports});
    step({"evaluate", "--truth", test_manifest, "--predictions", reports, "-o", eval});
    if (p.ok) {
        std::ifstream in(eval);
        in >> p.eval;
    }
    return p;
}

std::string read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream out;
    out << in.rdbuf();
    return out.str();
}

// Report text with the run's root directory masked out.
std::string without_root(const json& j, const fs::path& root) {
    std::string text = j.dump();
    const std::string needle = root.string();
    for (auto pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos)) {
        text.replace(pos, needle.size(), "<root>");
    }
    return text;
}

void stage_isolation(const Pipeline& a, const Pipeline& b) {
    const bool frozen = a.checksums[0] == a.checksums[1] && a.checksums[1] == a.checksums[2];
    int files = 0;
    int identical = 0;
    for (const char* rel : {"sorting/sorting.jsonl", "count/count.jsonl", "density/density.jsonl", "test/test.jsonl"}) {
        ++files;
        const auto pa = a.root / "data" / rel;
        const auto pb = b.root / "data" / rel;
        identical += fs::exists(pa) && read_bytes(pa) == read_bytes(pb);
    }
    int images = 0;
    int same_images = 0;
    for (const auto& entry : fs::recursive_directory_iterator(a.root / "data")) {
        if (entry.path().extension() != ".png") continue;
        ++images;
        const auto other = b.root / "data" / fs::relative(entry.path(), a.root / "data");
        same_images += fs::exists(other) && read_bytes(entry.path()) == read_bytes(other);
    }
    const bool same_eval = without_root(a.eval, a.root) == without_root(b.eval, b.root);
    report(9, "stage isolation and reruns",
           frozen && identical == files && same_images == images && images > 0 && same_eval,
           fmt("encoder checksum %016llx/%016llx/%016llx; %d/%d manifests and %d/%d images identical; eval reports %s",
               static_cast<unsigned long long>(a.checksums[0]), static_cast<unsigned long long>(a.checksums[1]),
               static_cast<unsigned long long>(a.checksums[2]), identical, files, same_images, images,
               same_eval ? "identical" : "differ"));
}

// ---- trained-model criteria -----------------------------------------------------------

struct Labelled {
    std::vector<cv::Mat> images;
    std::vector<double> counts;
};

Labelled render_set(const genclient::OracleOptions& options, int n, int lo, int hi, std::uint64_t seed) {
    genclient::OracleBackend oracle(options);
    Rng rng(seed);
    Labelled out;
    for (int i = 0; i < n; ++i) {
        genclient::TextRequest request;
        request.count = rng.uniform_int(lo, hi);
        request.seed = rng.next();
        out.images.push_back(oracle.text_to_image(request).image);
        out.counts.push_back(request.count);
    }
    return out;
}

double mae(const Labelled& set, const std::function<double(const cv::Mat&)>& predict) {
    double sum = 0.0;
    for (size_t i = 0; i < set.images.size(); ++i) sum += std::abs(predict(set.images[i]) - set.counts[i]);
    return sum / static_cast<double>(set.images.size());
}

void end_to_end(const Pipeline& a, const Labelled& held_out) {
    const auto model = models::load_checkpoint(a.root / "ckpt");
    const auto rows = manifest::read_count(cli::manifest_path(a.config, "count_filtered"));
    double sum = 0.0;
    int kept = 0;
    for (const auto& row : rows) {
        if (!row.kept) continue;
        sum += row.prompt_count;
        ++kept;
    }
    const double mean = sum / kept;
    const double baseline = mae(held_out, [mean](const cv::Mat&) { return mean; });
    const double model_mae = mae(held_out, [&](const cv::Mat& im) { return model.predict_count(im); });
    std::vector<double> sort_scores;
    for (const auto& im : held_out.images) sort_scores.push_back(model.sort_head(models::pool(model.encode(im))));
    const double rho = ranking::spearman(held_out.counts, sort_scores);
    report(4, "end-to-end toy pipeline", model_mae < kBaselineRatio * baseline && rho >= kMinSpearman,
           fmt("held-out MAE %.2f vs mean-predictor %.2f (ratio %.3f); sort-head Spearman %.3f; %d of %zu rows kept",
               model_mae, baseline, model_mae / baseline, rho, kept, rows.size()));
}

void filter_efficacy(const Pipeline& a) {
    const auto model = models::load_checkpoint(a.root / "ckpt_sort");
    genclient::OracleBackend oracle(a.config.data.oracle);
    Rng rng(0xF117);
    std::vector<manifest::CountRow> rows;
    std::vector<cv::Mat> images;
    auto add = [&](int count) {
        genclient::TextRequest request;
        request.count = count;
        request.seed = rng.next();
        images.push_back(oracle.text_to_image(request).image);
        rows.push_back({"", count, count, true});
    };
    for (const auto& category : genclient::default_count_schedule(kFilterPerCategory)) {
        for (int i = 0; i < category.n_images; ++i) add(category.prompt_count);
    }
    for (int i = 0; i < kFilterPerCategory; ++i) add(0);
    const auto corrupted = genclient::inject_label_noise(rows, kNoiseFraction, 0xBAD);
    std::vector<int> categories;
    for (const auto& r : rows) categories.push_back(r.prompt_count);
    const auto features = train::pooled_features(model, images);
    const auto filtered = train::filter_outliers(categories, features, train::compute_prototypes(categories, features));
    int n_bad = 0, bad_dropped = 0, n_clean = 0, clean_dropped = 0;
    for (size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].prompt_count == 0) continue;
        const bool dropped = !filtered.kept[i];
        if (corrupted[i]) {
            ++n_bad;
            bad_dropped += dropped;
        } else {
            ++n_clean;
            clean_dropped += dropped;
        }
    }
    const double bad_rate = static_cast<double>(bad_dropped) / n_bad;
    const double clean_rate = static_cast<double>(clean_dropped) / n_clean;
    report(5, "prototype filter efficacy", bad_rate >= kMinCorruptedDropped && clean_rate <= kMaxCleanDropped,
           fmt("dropped %d/%d corrupted (%.1f%%, need >= %.0f%%) and %d/%d clean (%.1f%%, need <= %.0f%%)", bad_dropped,
               n_bad, 100.0 * bad_rate, 100.0 * kMinCorruptedDropped, clean_dropped, n_clean, 100.0 * clean_rate,
               100.0 * kMaxCleanDropped));
}

struct HybridScores {
    double dense_hybrid = 0.0, dense_plain = 0.0, sparse_hybrid = 0.0, sparse_plain = 0.0;
};

// Reports the partition-strategy criterion and returns the scores for the resolution one.
HybridScores partition_criteria(const Pipeline& a) {
    const auto model = models::load_checkpoint(a.root / "ckpt");
    auto native = a.config.data.oracle;
    native.height = 2 * model.input_size();
    native.width = 2 * model.input_size();
    const auto dense = render_set(native, kPartitionImages, 100, 400, 0xDE45E);
    const auto sparse = render_set(native, kPartitionImages, 1, 25, 0x5FA45E);
    const int M = a.config.infer.dcgp.M;
    auto fixed = [&](int m) { return [&, m](const cv::Mat& im) { return dcgp::fixed_partition_count(im, model, m); }; };
    auto guided = [&](bool hybrid) {
        auto ic = a.config.infer.dcgp;
        ic.hybrid_resolution = hybrid;
        return [&model, ic](const cv::Mat& im) { return dcgp::infer_count(im, model, ic).final_count; };
    };

    HybridScores h;
    h.dense_hybrid = mae(dense, guided(true));
    h.sparse_hybrid = mae(sparse, guided(true));
    const double d1 = mae(dense, fixed(1)), dM = mae(dense, fixed(M));
    const double s1 = mae(sparse, fixed(1)), sM = mae(sparse, fixed(M));
    report(6, "partition strategy direction", h.dense_hybrid < d1 && h.dense_hybrid <= dM && sM > s1,
           fmt("dense: guided %.1f, fixed 1x1 %.1f, fixed %dx%d %.1f; sparse: fixed %dx%d %.1f vs 1x1 %.1f (guided %.1f)",
               h.dense_hybrid, d1, M, M, dM, M, M, sM, s1, h.sparse_hybrid));
    h.dense_plain = mae(dense, guided(false));
    h.sparse_plain = mae(sparse, guided(false));
    return h;
}

void hybrid_resolution(const HybridScores& h) {
    const double all_hybrid = (h.dense_hybrid + h.sparse_hybrid) / 2.0;
    const double all_plain = (h.dense_plain + h.sparse_plain) / 2.0;
    report(8, "hybrid resolution direction", all_hybrid <= all_plain && h.dense_hybrid < h.dense_plain,
           fmt("overall %.2f with native patches vs %.2f without; dense %.1f vs %.1f; sparse %.2f vs %.2f", all_hybrid,
               all_plain, h.dense_hybrid, h.dense_plain, h.sparse_hybrid, h.sparse_plain));
}

void probe_vs_finetune(const Pipeline& a, const Labelled& held_out) {
    const auto sorted = models::load_checkpoint(a.root / "ckpt_sort");
    const auto path = cli::manifest_path(a.config, "count");
    auto rows = manifest::read_count(path);
    genclient::inject_label_noise(rows, kNoiseFraction, 0x7015E);
    std::vector<cv::Mat> images;
    std::vector<double> targets;
    for (const auto& row : rows) {
        images.push_back(read_image(manifest::resolve(path, row.path)));
        targets.push_back(row.prompt_count);
    }
    auto probe = sorted;
    auto probe_cfg = a.config.train;
    probe_cfg.freeze_encoder = true;
    train::train_count(probe, images, targets, probe_cfg);
    auto finetune = sorted;
    auto ft_cfg = a.config.train;
    ft_cfg.freeze_encoder = false;
    train::train_count(finetune, images, targets, ft_cfg);
    const double p = mae(held_out, [&](const cv::Mat& im) { return probe.predict_count(im); });
    const double f = mae(held_out, [&](const cv::Mat& im) { return finetune.predict_count(im); });
    report(7, "linear probe vs full finetune", p <= f,
           fmt("held-out MAE %.2f probe vs %.2f finetune, %.0f%% of %zu training labels corrupted", p, f,
               100.0 * kNoiseFraction, rows.size()));
}

}  // namespace

int main(int argc, char** argv) {
    const fs::path config_file = argc > 1 ? fs::path(argv[1]) : fs::path(SYNTHCOUNT_TOY_CONFIG);
    const fs::path work = fs::temp_directory_path() / "synthcount_acceptance";
    const auto start = std::chrono::steady_clock::now();
    try {
        const auto config = cli::load_config(config_file, {});
        ranking_core();
        sum_identity(config.model.encoder);
        ordering_soundness();

        const auto a = run_pipeline(config_file, work / "a");
        const auto b = run_pipeline(config_file, work / "b");
        if (!a.ok || !b.ok) {
            for (int id = 4; id <= 9; ++id) report(id, "pipeline", false, "the CLI pipeline did not complete");
        } else {
            const auto held_out = render_set(a.config.data.oracle, kHeldOut, a.config.data.sorting.min_count,
                                             a.config.data.sorting.max_count, 0x4E1D);
            end_to_end(a, held_out);
            filter_efficacy(a);
            const auto hybrid = partition_criteria(a);
            probe_vs_finetune(a, held_out);
            hybrid_resolution(hybrid);
            stage_isolation(a, b);
        }
    } catch (const std::exception& e) {
        std::printf("FAIL acceptance run aborted: %s\n", e.what());
        return 1;
    }
    std::error_code ec;
    fs::remove_all(work, ec);
    std::printf("%d criteria failed; %.0f s\n", failures, seconds_since(start));
    return failures == 0 ? 0 : 1;
}
