#include "synthcount/cli.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>
#include <yaml-cpp/yaml.h>

#include "synthcount/errors.hpp"
#include "synthcount/image.hpp"
#include "synthcount/manifest.hpp"
#include "synthcount/random.hpp"
#include "synthcount/scene_lab.hpp"

namespace synthcount::cli {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- config

namespace {

Error config_error(const YAML::Mark& mark, const std::string& message) {
    if (mark.is_null() || mark.line < 0) return Error(ErrorCode::ConfigError, message);
    return Error(ErrorCode::ConfigError, "line " + std::to_string(mark.line + 1) + ": " + message);
}

// Typed reads from one YAML mapping; finish() rejects keys that were never read.
class Section {
public:
    Section(YAML::Node node, std::string name) : node_(std::move(node)), name_(std::move(name)) {
        if (node_ && !node_.IsNull() && !node_.IsMap()) {
            throw config_error(node_.Mark(), "'" + name_ + "' must be a mapping");
        }
    }

    template <class T>
    Section& get(const char* key, T& out) {
        used_.insert(key);
        if (!node_ || !node_.IsMap()) return *this;
        const YAML::Node value = node_[key];
        if (!value) return *this;
        try {
            out = value.as<T>();
        } catch (const YAML::Exception&) {
            throw config_error(value.Mark(), "bad value for '" + path(key) + "'");
        }
        return *this;
    }

    Section& get_u64(const char* key, std::uint64_t& out) {
        long long v = static_cast<long long>(out);
        get(key, v);
        if (v < 0) throw config_error(node_[key].Mark(), "'" + path(key) + "' must be non-negative");
        out = static_cast<std::uint64_t>(v);
        return *this;
    }

    Section sub(const char* key) {
        used_.insert(key);
        if (!node_ || !node_.IsMap()) return Section(YAML::Node(), path(key));
        return Section(node_[key], path(key));
    }

    void finish() const {
        if (!node_ || !node_.IsMap()) return;
        for (const auto& kv : node_) {
            const auto key = kv.first.as<std::string>();
            if (!used_.count(key)) throw config_error(kv.first.Mark(), "unknown key '" + path(key.c_str()) + "'");
        }
    }

private:
    std::string path(const char* key) const { return name_.empty() ? key : name_ + "." + key; }

    YAML::Node node_;
    std::string name_;
    std::set<std::string> used_;
};

void apply_override(YAML::Node& root, const std::string& text) {
    const auto eq = text.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw Error(ErrorCode::ConfigError, "override '" + text + "' is not key=value");
    }
    std::vector<std::string> keys;
    std::stringstream ss(text.substr(0, eq));
    for (std::string part; std::getline(ss, part, '.');) {
        if (part.empty()) throw Error(ErrorCode::ConfigError, "override '" + text + "' has an empty key");
        keys.push_back(part);
    }
    YAML::Node value;
    try {
        value = YAML::Load(text.substr(eq + 1));
    } catch (const YAML::Exception& e) {
        throw Error(ErrorCode::ConfigError, "override '" + text + "': " + e.msg);
    }
    YAML::Node cur = root;
    for (size_t i = 0; i + 1 < keys.size(); ++i) {
        YAML::Node next = cur[keys[i]];
        if (!next.IsMap()) {
            cur[keys[i]] = YAML::Node(YAML::NodeType::Map);
            next.reset(cur[keys[i]]);
        }
        cur.reset(next);
    }
    cur[keys.back()] = value;
}

Config from_yaml(const YAML::Node& root) {
    Config cfg;
    Section top(root, "");

    auto data = top.sub("data");
    auto& d = cfg.data;
    data.get("root", d.root).get("backend", d.backend).get_u64("seed", d.seed);
    {
        auto remote = data.sub("remote");
        long long backoff_ms = d.remote.backoff.count();
        long long timeout_s = d.remote.timeout.count();
        remote.get("url", d.remote.base_url)
            .get("endpoint", d.remote.endpoint)
            .get("attempts", d.remote.attempts)
            .get("backoff_ms", backoff_ms)
            .get("timeout_s", timeout_s);
        d.remote.backoff = std::chrono::milliseconds(backoff_ms);
        d.remote.timeout = std::chrono::seconds(timeout_s);
        remote.finish();
    }
    {
        auto oracle = data.sub("oracle");
        std::string style(scene_lab::to_string(d.oracle.object_style));
        oracle.get("height", d.oracle.height)
            .get("width", d.oracle.width)
            .get("size_gradient", d.oracle.size_gradient)
            .get("object_style", style);
        try {
            d.oracle.object_style = scene_lab::parse_object_style(style);
        } catch (const Error& e) {
            throw Error(ErrorCode::ConfigError, "data.oracle.object_style: " + e.message());
        }
        oracle.finish();
    }
    {
        auto s = data.sub("sorting");
        s.get("refs", d.sorting.refs)
            .get("min_count", d.sorting.min_count)
            .get("max_count", d.sorting.max_count)
            .get("n_minus", d.sorting.n_minus)
            .get("n_plus", d.sorting.n_plus)
            .get("band_fraction", d.sorting.band_fraction)
            .get("strength", d.sorting.strength);
        s.finish();
    }
    {
        auto c = data.sub("count");
        c.get("categories", d.count.categories)
            .get("per_category", d.count.per_category)
            .get("zero_count", d.count.zero_count)
            .get("label_noise", d.count.label_noise)
            .get("filter", d.count.filter);
        c.finish();
    }
    {
        auto s = data.sub("density");
        s.get("per_class", d.density.per_class)
            .get("sparse_max", d.density.sparse_max)
            .get("dense_min", d.density.dense_min)
            .get("dense_max", d.density.dense_max);
        s.finish();
    }
    {
        auto t = data.sub("test");
        t.get("n", d.test.n)
            .get("min_count", d.test.min_count)
            .get("max_count", d.test.max_count)
            .get("height", d.test.height)
            .get("width", d.test.width);
        t.finish();
    }
    data.finish();

    auto model = top.sub("model");
    auto& e = cfg.model.encoder;
    model.get("checkpoint", cfg.model.checkpoint)
        .get_u64("seed", cfg.model.seed)
        .get("feature_dim", e.feature_dim)
        .get("downsample_factor", e.downsample_factor)
        .get("depth", e.depth)
        .get("base_width", e.base_width)
        .get("center_inputs", e.center_inputs)
        .get("input_size", e.input_size)
        .get("weights_id", e.weights_id);
    model.finish();

    auto tr = top.sub("train");
    auto& t = cfg.train;
    tr.get("lr_head", t.lr_head)
        .get("lr_encoder", t.lr_encoder)
        .get("epochs", t.epochs)
        .get("probe_epochs", t.probe_epochs)
        .get("batch_size", t.batch_size)
        .get_u64("seed", t.seed)
        .get("lambda", t.lambda_weight)
        .get("lambda_bb", t.lambda_bb)
        .get("freeze_encoder", t.freeze_encoder)
        .get("density_regions", t.density_regions);
    tr.finish();

    auto inf = top.sub("infer");
    inf.get("strategy", cfg.infer.strategy)
        .get("M", cfg.infer.dcgp.M)
        .get("tau", cfg.infer.dcgp.tau)
        .get("hybrid_resolution", cfg.infer.dcgp.hybrid_resolution)
        .get("overlay", cfg.infer.overlay);
    inf.finish();

    top.finish();
    return cfg;
}

void validate(const Config& cfg) {
    auto fail = [](const std::string& m) { throw Error(ErrorCode::ConfigError, m); };
    if (cfg.data.backend != "oracle" && cfg.data.backend != "remote") {
        fail("data.backend must be oracle or remote, got '" + cfg.data.backend + "'");
    }
    const auto& s = cfg.data.sorting;
    if (s.refs < 1 || s.n_minus < 1 || s.n_plus < 1) fail("data.sorting sizes must be positive");
    if (s.min_count < 1 || s.max_count < s.min_count) fail("data.sorting count range is empty");
    const auto& c = cfg.data.count;
    if (c.per_category < 1 || c.zero_count < 0) fail("data.count sizes must be positive");
    for (int k : c.categories) {
        if (k < 1 || k > 1000) fail("data.count.categories entries must be in [1, 1000]");
    }
    if (c.label_noise < 0.0 || c.label_noise >= 1.0) fail("data.count.label_noise must be in [0, 1)");
    const auto& t = cfg.data.test;
    if (t.n < 1 || t.min_count < 0 || t.max_count < t.min_count) fail("data.test range is empty");
    if (cfg.data.density.per_class < 1) fail("data.density.per_class must be positive");
    const auto& strat = cfg.infer.strategy;
    if (strat != "dcgp" && strat != "fixed" && strat != "gated") {
        fail("infer.strategy must be dcgp, fixed or gated, got '" + strat + "'");
    }
    if (cfg.infer.dcgp.M < 1) fail("infer.M must be at least 1");
    try {
        cfg.model.encoder.validate();
        cfg.train.validate();
        genclient::DensityThresholds{cfg.data.density.sparse_max, cfg.data.density.dense_min,
                                     cfg.data.density.dense_max}
            .validate();
    } catch (const Error& e) {
        throw Error(ErrorCode::ConfigError, e.message());
    }
}

Config parse_root(YAML::Node root, const std::vector<std::string>& overrides) {
    if (!root || root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
    if (!root.IsMap()) throw config_error(root.Mark(), "config must be a mapping");
    for (const auto& o : overrides) apply_override(root, o);
    Config cfg = from_yaml(root);
    validate(cfg);
    return cfg;
}

}  // namespace

Config parse_config(const std::string& yaml_text, const std::vector<std::string>& overrides) {
    YAML::Node root;
    try {
        root = YAML::Load(yaml_text);
    } catch (const YAML::Exception& e) {
        throw config_error(e.mark, e.msg);
    }
    return parse_root(root, overrides);
}

Config load_config(const std::optional<fs::path>& path, const std::vector<std::string>& overrides) {
    if (!path) return parse_root(YAML::Node(), overrides);
    std::ifstream in(*path);
    if (!in) throw Error(ErrorCode::IoError, "cannot read config " + path->string());
    std::stringstream text;
    text << in.rdbuf();
    try {
        return parse_config(text.str(), overrides);
    } catch (const Error& e) {
        throw Error(e.code(), path->string() + ": " + e.message());
    }
}

json to_json(const Config& cfg) {
    const auto& d = cfg.data;
    const auto& e = cfg.model.encoder;
    const auto& t = cfg.train;
    return {
        {"data",
         {{"root", d.root},
          {"backend", d.backend},
          {"seed", d.seed},
          {"remote",
           {{"url", d.remote.base_url},
            {"endpoint", d.remote.endpoint},
            {"attempts", d.remote.attempts},
            {"backoff_ms", d.remote.backoff.count()},
            {"timeout_s", d.remote.timeout.count()}}},
          {"oracle",
           {{"height", d.oracle.height},
            {"width", d.oracle.width},
            {"size_gradient", d.oracle.size_gradient},
            {"object_style", std::string(scene_lab::to_string(d.oracle.object_style))}}},
          {"sorting",
           {{"refs", d.sorting.refs},
            {"min_count", d.sorting.min_count},
            {"max_count", d.sorting.max_count},
            {"n_minus", d.sorting.n_minus},
            {"n_plus", d.sorting.n_plus},
            {"band_fraction", d.sorting.band_fraction},
            {"strength", d.sorting.strength}}},
          {"count",
           {{"categories", d.count.categories},
            {"per_category", d.count.per_category},
            {"zero_count", d.count.zero_count},
            {"label_noise", d.count.label_noise},
            {"filter", d.count.filter}}},
          {"density",
           {{"per_class", d.density.per_class},
            {"sparse_max", d.density.sparse_max},
            {"dense_min", d.density.dense_min},
            {"dense_max", d.density.dense_max}}},
          {"test",
           {{"n", d.test.n},
            {"min_count", d.test.min_count},
            {"max_count", d.test.max_count},
            {"height", d.test.height},
            {"width", d.test.width}}}}},
        {"model",
         {{"checkpoint", cfg.model.checkpoint},
          {"seed", cfg.model.seed},
          {"feature_dim", e.feature_dim},
          {"downsample_factor", e.downsample_factor},
          {"depth", e.depth},
          {"base_width", e.base_width},
          {"center_inputs", e.center_inputs},
          {"input_size", e.input_size},
          {"weights_id", e.weights_id}}},
        {"train",
         {{"lr_head", t.lr_head},
          {"lr_encoder", t.lr_encoder},
          {"epochs", t.epochs},
          {"probe_epochs", t.probe_epochs},
          {"batch_size", t.batch_size},
          {"seed", t.seed},
          {"lambda", t.lambda_weight},
          {"lambda_bb", t.lambda_bb},
          {"freeze_encoder", t.freeze_encoder},
          {"density_regions", t.density_regions}}},
        {"infer",
         {{"strategy", cfg.infer.strategy},
          {"M", cfg.infer.dcgp.M},
          {"tau", cfg.infer.dcgp.tau},
          {"hybrid_resolution", cfg.infer.dcgp.hybrid_resolution},
          {"overlay", cfg.infer.overlay}}},
    };
}

namespace {

fs::path under_root(const std::string& path) {
    const fs::path p(path);
    return p.is_absolute() ? p : manifest::data_root() / p;
}

}  // namespace

fs::path data_dir(const Config& config) { return under_root(config.data.root); }

fs::path checkpoint_dir(const Config& config) { return under_root(config.model.checkpoint); }

fs::path manifest_path(const Config& config, const std::string& kind) {
    if (kind == "count_filtered") return data_dir(config) / "count" / "count_filtered.jsonl";
    return data_dir(config) / kind / (kind + ".jsonl");
}

// ---------------------------------------------------------------- evaluation

json to_json(const EvalReport& report) {
    json rows = json::array();
    for (const auto& e : report.per_image) {
        rows.push_back({{"path", e.path}, {"truth", e.truth}, {"predicted", e.predicted}});
    }
    return {{"n", report.n}, {"mae", report.mae}, {"mse", report.mse}, {"per_image", rows}};
}

EvalReport evaluate(std::span<const double> truth, std::span<const double> predicted) {
    if (truth.size() != predicted.size()) {
        throw Error(ErrorCode::MissingPrediction, std::to_string(truth.size()) + " truth values but " +
                                                      std::to_string(predicted.size()) + " predictions");
    }
    if (truth.empty()) throw Error(ErrorCode::ManifestEmpty, "nothing to evaluate");
    EvalReport report;
    report.n = static_cast<int>(truth.size());
    double abs_sum = 0.0;
    double sq_sum = 0.0;
    for (size_t i = 0; i < truth.size(); ++i) {
        const double err = predicted[i] - truth[i];
        abs_sum += std::abs(err);
        sq_sum += err * err;
        report.per_image.push_back({"", truth[i], predicted[i]});
    }
    report.mae = abs_sum / report.n;
    report.mse = std::sqrt(sq_sum / report.n);
    return report;
}

EvalReport evaluate(const std::vector<std::pair<std::string, double>>& truth,
                    const std::map<std::string, double>& predictions) {
    std::set<std::string> truth_paths;
    std::vector<double> t;
    std::vector<double> p;
    for (const auto& [path, value] : truth) {
        const auto it = predictions.find(path);
        if (it == predictions.end()) throw Error(ErrorCode::MissingPrediction, "no prediction for " + path);
        truth_paths.insert(path);
        t.push_back(value);
        p.push_back(it->second);
    }
    for (const auto& [path, value] : predictions) {
        if (!truth_paths.count(path)) throw Error(ErrorCode::InvalidArgument, "no truth row for prediction " + path);
    }
    EvalReport report = evaluate(t, p);
    for (size_t i = 0; i < truth.size(); ++i) report.per_image[i].path = truth[i].first;
    return report;
}

namespace {

std::string canonical_key(const fs::path& p) { return fs::weakly_canonical(p).lexically_normal().string(); }

}  // namespace

EvalReport evaluate_files(const fs::path& truth_manifest, const fs::path& predictions) {
    std::vector<std::pair<std::string, double>> truth;
    int record = 0;
    for (const auto& j : manifest::read_jsonl(truth_manifest)) {
        ++record;
        if (!j.contains("path")) {
            throw Error(ErrorCode::ConfigError,
                        truth_manifest.string() + ": record " + std::to_string(record) + ": missing field 'path'");
        }
        double value = 0.0;
        if (j.contains("true_count") && !j["true_count"].is_null()) {
            value = j["true_count"].get<double>();
        } else if (j.contains("prompt_count")) {
            value = j["prompt_count"].get<double>();
        } else {
            throw Error(ErrorCode::ConfigError, truth_manifest.string() + ": record " + std::to_string(record) +
                                                    ": needs true_count or prompt_count");
        }
        truth.emplace_back(canonical_key(manifest::resolve(truth_manifest, j["path"].get<std::string>())), value);
    }
    std::map<std::string, double> predicted;
    for (const auto& j : manifest::read_jsonl(predictions)) {
        if (!j.contains("final_count") || !j.contains("path")) continue;  // skipped inputs
        predicted[canonical_key(manifest::resolve(predictions, j["path"].get<std::string>()))] =
            j["final_count"].get<double>();
    }
    return evaluate(truth, predicted);
}

json to_json(const AblationTable& table) {
    json rows = json::array();
    for (const auto& r : table.rows) rows.push_back({{"variant", r.variant}, {"mae", r.mae}, {"mse", r.mse}});
    return {{"table", table.name}, {"n", table.n}, {"rows", rows}};
}

std::string format_table(const AblationTable& table) {
    std::ostringstream out;
    out << table.name << " (n=" << table.n << ")\n";
    char line[128];
    std::snprintf(line, sizeof line, "%-20s %10s %10s\n", "variant", "MAE", "RMSE");
    out << line;
    for (const auto& r : table.rows) {
        std::snprintf(line, sizeof line, "%-20s %10.2f %10.2f\n", r.variant.c_str(), r.mae, r.mse);
        out << line;
    }
    return out.str();
}

// ---------------------------------------------------------------- commands

namespace {

struct Images {
    std::vector<cv::Mat> images;
    std::vector<size_t> rows;  // manifest row index of each image
};

// Reads every row image, skipping unreadable ones with a log entry.
template <class Row>
Images load_rows(const fs::path& manifest_file, const std::vector<Row>& rows) {
    Images out;
    for (size_t i = 0; i < rows.size(); ++i) {
        try {
            out.images.push_back(read_image(manifest::resolve(manifest_file, rows[i].path)));
            out.rows.push_back(i);
        } catch (const Error& e) {
            spdlog::warn("skipping {}: {}", rows[i].path, e.what());
        }
    }
    if (out.images.empty()) throw Error(ErrorCode::ManifestEmpty, "no readable images in " + manifest_file.string());
    return out;
}

std::unique_ptr<genclient::Backend> make_backend(const DataConfig& data, std::optional<int> height = {},
                                                 std::optional<int> width = {}) {
    if (data.backend == "remote") return std::make_unique<genclient::RemoteBackend>(data.remote);
    genclient::OracleOptions opts = data.oracle;
    if (height) opts.height = *height;
    if (width) opts.width = *width;
    return std::make_unique<genclient::OracleBackend>(opts);
}

json stats_json(const genclient::BuildStats& s) {
    return {{"attempted", s.attempted}, {"written", s.written}, {"failed", s.failed},
            {"manifest", s.manifest.string()}};
}

json generate_sorting(const Config& cfg) {
    auto backend = make_backend(cfg.data);
    const auto& s = cfg.data.sorting;
    genclient::ReferenceOptions ro;
    ro.n = s.refs;
    ro.min_count = s.min_count;
    ro.max_count = s.max_count;
    ro.seed = mix_seed(cfg.data.seed, 1);
    const auto refs = genclient::make_references(*backend, ro);
    genclient::SortingBuildOptions so;
    so.n_minus = s.n_minus;
    so.n_plus = s.n_plus;
    so.edit.band_fraction = s.band_fraction;
    so.edit.strength = s.strength;
    so.seed = mix_seed(cfg.data.seed, 2);
    return stats_json(genclient::build_sorting_dataset(*backend, refs, data_dir(cfg) / "sorting", so));
}

json generate_count(const Config& cfg) {
    auto backend = make_backend(cfg.data);
    const auto& c = cfg.data.count;
    genclient::CountBuildOptions co;
    if (c.categories.empty()) {
        co.schedule = genclient::default_count_schedule(c.per_category);
    } else {
        co.schedule.clear();
        for (int k : c.categories) co.schedule.push_back({k, "a photo of {count} people", c.per_category});
    }
    co.zero_count = c.zero_count;
    co.seed = mix_seed(cfg.data.seed, 3);
    const auto stats = genclient::build_count_dataset(*backend, data_dir(cfg) / "count", co);
    json out = stats_json(stats);
    if (c.label_noise > 0.0) {
        auto rows = manifest::read_count(stats.manifest);
        const auto corrupted = genclient::inject_label_noise(rows, c.label_noise, mix_seed(cfg.data.seed, 4));
        manifest::write_rows(stats.manifest, rows);
        out["relabelled"] = std::count(corrupted.begin(), corrupted.end(), true);
    }
    return out;
}

json generate_density(const Config& cfg) {
    auto backend = make_backend(cfg.data);
    const auto& d = cfg.data.density;
    genclient::DensityBuildOptions dopt;
    dopt.per_class = d.per_class;
    dopt.thresholds = {d.sparse_max, d.dense_min, d.dense_max};
    dopt.seed = mix_seed(cfg.data.seed, 5);
    const auto count_manifest = manifest_path(cfg, "count");
    if (fs::exists(count_manifest)) {
        dopt.zero_pool = genclient::zero_pool(count_manifest);
    } else {
        spdlog::info("no count manifest; every no_crowd image is generated");
    }
    return stats_json(genclient::build_density_dataset(*backend, data_dir(cfg) / "density", dopt));
}

json generate_test(const Config& cfg) {
    const auto& t = cfg.data.test;
    auto backend = make_backend(cfg.data, t.height, t.width);
    const fs::path dir = data_dir(cfg) / "test";
    fs::create_directories(dir / "images");
    manifest::Writer writer(dir / "test.jsonl");
    Rng rng(mix_seed(cfg.data.seed, 6));
    genclient::BuildStats stats;
    stats.manifest = dir / "test.jsonl";
    for (int i = 0; i < t.n; ++i) {
        genclient::TextRequest req;
        req.count = rng.uniform_int(t.min_count, t.max_count);
        req.prompt = genclient::fill_template("a photo of {count} people", req.count);
        req.seed = rng.next();
        ++stats.attempted;
        try {
            const auto sample = backend->text_to_image(req);
            char name[32];
            std::snprintf(name, sizeof name, "images/test_%05d.png", i);
            write_png(dir / name, sample.image);
            manifest::CountRow row;
            row.path = name;
            row.prompt_count = req.count;
            row.true_count = sample.true_count;
            writer.append(manifest::to_json(row));
            ++stats.written;
        } catch (const Error& e) {
            if (e.code() == ErrorCode::BackendUnavailable) throw;
            spdlog::warn("test image {} failed: {}", i, e.what());
            ++stats.failed;
        }
    }
    writer.commit();
    return stats_json(stats);
}

// Effective config plus the command line, stored with every checkpoint.
std::string provenance(const Config& cfg, const std::vector<std::string>& argv) {
    return json{{"config", to_json(cfg)}, {"argv", argv}}.dump();
}

class TrainLog {
public:
    explicit TrainLog(const fs::path& path) : out_(path, std::ios::app) {
        if (!out_) throw Error(ErrorCode::IoError, "cannot write " + path.string());
    }

    train::LogSink sink() {
        return [this](const train::LogRecord& r) {
            out_ << json{{"stage", r.stage}, {"epoch", r.epoch}, {"loss", r.loss}, {"metric", r.metric}}.dump()
                 << '\n';
            out_.flush();
            spdlog::info("{} epoch {}: loss {:.4f} metric {:.4f}", r.stage, r.epoch, r.loss, r.metric);
        };
    }

private:
    std::ofstream out_;
};

models::CountingModel load_trained(const Config& cfg, std::initializer_list<const char*> stages) {
    const fs::path dir = checkpoint_dir(cfg);
    if (!fs::exists(dir / "checkpoint.json")) {
        throw Error(ErrorCode::MissingDependency,
                    "no checkpoint at " + dir.string() + "; run the sort stage first");
    }
    auto model = models::load_checkpoint(dir);
    for (const char* stage : stages) {
        if (!model.has_stage(stage)) {
            throw Error(ErrorCode::MissingDependency,
                        "checkpoint " + dir.string() + " has no '" + stage + "' stage");
        }
    }
    return model;
}

std::vector<scene_lab::RankedTriplet> load_triplets(const fs::path& path) {
    const auto rows = manifest::read_sorting(path);
    if (rows.empty()) throw Error(ErrorCode::ManifestEmpty, path.string() + " has no triplets");
    std::map<std::string, std::shared_ptr<const scene_lab::ImageSample>> cache;
    std::vector<scene_lab::RankedTriplet> triplets;
    for (const auto& row : rows) {
        scene_lab::RankedTriplet t;
        t.ranks = row.ranks;
        bool ok = true;
        for (int k = 0; k < 3 && ok; ++k) {
            auto& slot = cache[row.paths[k]];
            if (!slot) {
                try {
                    scene_lab::ImageSample sample;
                    sample.path = manifest::resolve(path, row.paths[k]).string();
                    sample.image = read_image(sample.path);
                    if (row.true_counts) sample.true_count = (*row.true_counts)[k];
                    slot = std::make_shared<const scene_lab::ImageSample>(std::move(sample));
                } catch (const Error& e) {
                    spdlog::warn("skipping triplet {}: {}", row.triplet_id, e.what());
                    cache.erase(row.paths[k]);
                    ok = false;
                    break;
                }
            }
            t.images[k] = slot;
        }
        if (ok) triplets.push_back(std::move(t));
    }
    if (triplets.empty()) throw Error(ErrorCode::ManifestEmpty, "no readable triplets in " + path.string());
    return triplets;
}

void train_sort(const Config& cfg, models::CountingModel& model, TrainLog& log) {
    const auto triplets = load_triplets(manifest_path(cfg, "sorting"));
    spdlog::info("sorting pretraining on {} triplets", triplets.size());
    const auto report = train::pretrain_sorting(model, triplets, cfg.train, log.sink());
    spdlog::info("sorting loss {:.4f} -> {:.4f}", report.initial_loss, report.final_loss);
}

struct CountData {
    std::vector<cv::Mat> images;
    std::vector<double> targets;
};

// Count rows after the prototype filter (when enabled); writes count_filtered.jsonl.
CountData count_data(const Config& cfg, const models::CountingModel& model) {
    const fs::path path = manifest_path(cfg, "count");
    auto rows = manifest::read_count(path);
    auto loaded = load_rows(path, rows);
    std::vector<bool> kept(loaded.images.size(), true);
    if (cfg.data.count.filter) {
        std::vector<int> categories;
        for (size_t i : loaded.rows) categories.push_back(rows[i].prompt_count);
        const auto features = train::pooled_features(model, loaded.images);
        const auto prototypes = train::compute_prototypes(categories, features);
        const auto report = train::filter_outliers(categories, features, prototypes);
        kept = report.kept;
        spdlog::info("prototype filter kept {} and dropped {} rows", report.kept_total, report.dropped_total);
        for (size_t k = 0; k < loaded.rows.size(); ++k) rows[loaded.rows[k]].kept = kept[k];
        manifest::Writer writer(manifest_path(cfg, "count_filtered"));
        for (auto row : rows) {
            row.path = manifest::resolve(path, row.path).string();
            writer.append(manifest::to_json(row));
        }
        writer.commit();
    }
    CountData data;
    for (size_t k = 0; k < loaded.rows.size(); ++k) {
        if (!kept[k]) continue;
        data.images.push_back(loaded.images[k]);
        data.targets.push_back(rows[loaded.rows[k]].prompt_count);
    }
    return data;
}

void train_count_stage(const Config& cfg, models::CountingModel& model, TrainLog& log) {
    const auto data = count_data(cfg, model);
    const auto report = train::train_count(model, data.images, data.targets, cfg.train, log.sink());
    spdlog::info("count head: train MSE {:.3f}, MAE {:.3f}", report.train_loss, report.train_metric);
}

void train_density_stage(const Config& cfg, models::CountingModel& model, TrainLog& log) {
    const fs::path path = manifest_path(cfg, "density");
    const auto rows = manifest::read_density(path);
    const auto loaded = load_rows(path, rows);
    std::vector<int> labels;
    for (size_t i : loaded.rows) labels.push_back(rows[i].density_label);
    const auto report = train::train_density(model, loaded.images, labels, cfg.train, log.sink());
    spdlog::info("density head: train CE {:.4f}, accuracy {:.3f}", report.train_loss, report.train_metric);
}

void run_train(const Config& cfg, const std::string& stage, const std::vector<std::string>& argv) {
    const fs::path dir = checkpoint_dir(cfg);
    const std::vector<std::string> order = stage == "all" ? std::vector<std::string>{"sort", "count", "density"}
                                                          : std::vector<std::string>{stage};
    models::CountingModel model;
    if (order.front() == "sort") {
        model = models::CountingModel::create(cfg.model.encoder, cfg.model.seed);
    } else {
        model = load_trained(cfg, {"sort"});
    }
    fs::create_directories(dir);
    TrainLog log(dir / "train_log.jsonl");
    model.provenance = provenance(cfg, argv);
    for (const auto& s : order) {
        if (s == "sort") train_sort(cfg, model, log);
        if (s == "count") train_count_stage(cfg, model, log);
        if (s == "density") train_density_stage(cfg, model, log);
        models::save_checkpoint(dir, model);
        spdlog::info("saved {} after stage {}", dir.string(), s);
    }
    std::ofstream(dir / "run_config.json") << json::parse(model.provenance).dump(2) << '\n';
}

dcgp::InferResult infer_one(const cv::Mat& image, const models::CountingModel& model, const InferSection& inf) {
    if (inf.strategy == "fixed") return dcgp::fixed_partition(image, model, inf.dcgp.M, inf.dcgp.hybrid_resolution);
    if (inf.strategy == "gated") return dcgp::gated_partition(image, model, inf.dcgp.M, inf.dcgp.hybrid_resolution);
    return dcgp::infer_count(image, model, inf.dcgp);
}

void check_infer_stages(const models::CountingModel& model, const std::string& strategy) {
    std::vector<const char*> needed{"count"};
    if (strategy != "fixed") needed.push_back("density");
    for (const char* stage : needed) {
        if (!model.has_stage(stage)) {
            throw Error(ErrorCode::MissingDependency,
                        std::string("strategy ") + strategy + " needs the '" + stage + "' stage");
        }
    }
}

std::vector<fs::path> manifest_images(const fs::path& path) {
    std::vector<fs::path> out;
    for (const auto& j : manifest::read_jsonl(path)) {
        if (!j.contains("path")) throw Error(ErrorCode::ConfigError, path.string() + ": row without 'path'");
        out.push_back(manifest::resolve(path, j["path"].get<std::string>()));
    }
    return out;
}

json run_infer(const Config& cfg, std::vector<fs::path> inputs, const std::optional<fs::path>& manifest_file,
               const fs::path& out_file, const std::optional<fs::path>& overlay_dir) {
    auto model = load_trained(cfg, {"sort"});
    check_infer_stages(model, cfg.infer.strategy);
    if (manifest_file) {
        auto more = manifest_images(*manifest_file);
        inputs.insert(inputs.end(), more.begin(), more.end());
    }
    if (inputs.empty()) throw Error(ErrorCode::InvalidArgument, "no input images");
    if (overlay_dir) fs::create_directories(*overlay_dir);
    manifest::Writer writer(out_file);
    int done = 0;
    int skipped = 0;
    for (const auto& input : inputs) {
        const std::string path = fs::absolute(input).lexically_normal().string();
        cv::Mat image;
        try {
            image = read_image(input);
        } catch (const Error& e) {
            spdlog::warn("skipping {}: {}", path, e.what());
            writer.append({{"path", path}, {"skipped", true}, {"error", e.what()}});
            ++skipped;
            continue;
        }
        const auto result = infer_one(image, model, cfg.infer);
        json row = dcgp::to_json(result);
        row["path"] = path;
        row["strategy"] = cfg.infer.strategy;
        writer.append(row);
        if (overlay_dir && cfg.infer.strategy == "dcgp") {
            write_png(*overlay_dir / (input.stem().string() + "_overlay.png"), dcgp::overlay(image, result));
        }
        ++done;
    }
    writer.commit();
    return {{"reports", out_file.string()}, {"counted", done}, {"skipped", skipped}};
}

struct TestSet {
    std::vector<cv::Mat> images;
    std::vector<double> truth;
};

TestSet load_test_set(const Config& cfg) {
    const fs::path path = manifest_path(cfg, "test");
    if (!fs::exists(path)) {
        throw Error(ErrorCode::MissingDependency, "no test manifest at " + path.string() + "; run generate --kind test");
    }
    const auto rows = manifest::read_count(path);
    const auto loaded = load_rows(path, rows);
    TestSet set;
    set.images = loaded.images;
    for (size_t i : loaded.rows) set.truth.push_back(rows[i].true_count.value_or(rows[i].prompt_count));
    return set;
}

AblationRow score(const std::string& variant, const TestSet& test, const std::function<double(const cv::Mat&)>& f) {
    std::vector<double> predicted;
    for (const auto& image : test.images) predicted.push_back(f(image));
    const auto report = evaluate(test.truth, predicted);
    spdlog::info("{}: MAE {:.2f}", variant, report.mae);
    return {variant, report.mae, report.mse};
}

AblationTable ablate_partition(const Config& cfg) {
    const auto model = load_trained(cfg, {"sort", "count", "density"});
    const auto test = load_test_set(cfg);
    const int M = cfg.infer.dcgp.M;
    const bool hybrid = cfg.infer.dcgp.hybrid_resolution;
    const std::string grid = std::to_string(M) + "x" + std::to_string(M);
    AblationTable table{"partition", static_cast<int>(test.images.size()), {}};
    for (int m : {1, 2, M}) {
        if (m == M && m <= 2) continue;
        table.rows.push_back(score("fixed-" + std::to_string(m) + "x" + std::to_string(m), test,
                                   [&](const cv::Mat& im) { return dcgp::fixed_partition_count(im, model, m, hybrid); }));
    }
    table.rows.push_back(score("gated-" + grid, test,
                               [&](const cv::Mat& im) { return dcgp::gated_partition_count(im, model, M, hybrid); }));
    table.rows.push_back(score("dcgp-" + grid, test, [&](const cv::Mat& im) {
        return dcgp::infer_count(im, model, cfg.infer.dcgp).final_count;
    }));
    return table;
}

AblationTable ablate_resolution(const Config& cfg) {
    const auto model = load_trained(cfg, {"sort", "count", "density"});
    const auto test = load_test_set(cfg);
    AblationTable table{"resolution", static_cast<int>(test.images.size()), {}};
    for (bool hybrid : {true, false}) {
        auto ic = cfg.infer.dcgp;
        ic.hybrid_resolution = hybrid;
        table.rows.push_back(score(hybrid ? "hybrid" : "inference-only", test,
                                   [&](const cv::Mat& im) { return dcgp::infer_count(im, model, ic).final_count; }));
    }
    return table;
}

AblationTable ablate_count_train(const Config& cfg) {
    const auto sorted = load_trained(cfg, {"sort"});
    const auto test = load_test_set(cfg);
    const auto data = count_data(cfg, sorted);
    AblationTable table{"count_train", static_cast<int>(test.images.size()), {}};
    auto whole = [](const models::CountingModel& m) {
        return [&m](const cv::Mat& im) { return m.predict_count(im); };
    };

    auto probe = sorted;
    auto probe_cfg = cfg.train;
    probe_cfg.freeze_encoder = true;
    train::train_count(probe, data.images, data.targets, probe_cfg);
    table.rows.push_back(score("linear-probe", test, whole(probe)));

    auto finetune = sorted;
    auto ft_cfg = cfg.train;
    ft_cfg.freeze_encoder = false;
    train::train_count(finetune, data.images, data.targets, ft_cfg);
    table.rows.push_back(score("full-finetune", test, whole(finetune)));

    auto scratch = models::CountingModel::create(cfg.model.encoder, mix_seed(cfg.model.seed, 7));
    train::train_count(scratch, data.images, data.targets, ft_cfg);
    table.rows.push_back(score("scratch", test, whole(scratch)));
    return table;
}

void print_json(const json& j) { std::cout << j.dump(2) << std::endl; }

}  // namespace

int run(int argc, char** argv) {
    CLI::App app{"Counting from synthetic data: generation, training, inference and evaluation"};
    app.require_subcommand(1);
    std::optional<std::string> config_path;
    std::vector<std::string> overrides;
    bool quiet = false;
    app.add_option("-c,--config", config_path, "YAML config file");
    app.add_option("--set", overrides, "Config override, section.key=value (repeatable)");
    app.add_flag("-q,--quiet", quiet, "Only log warnings and errors");

    auto* gen = app.add_subcommand("generate", "Build a dataset with the configured backend");
    std::string kind = "all";
    gen->add_option("--kind", kind, "sorting | count | density | test | all")
        ->check(CLI::IsMember({"sorting", "count", "density", "test", "all"}));

    auto* tr = app.add_subcommand("train", "Run one training stage or all of them");
    std::string stage = "all";
    tr->add_option("--stage", stage, "sort | count | density | all")
        ->check(CLI::IsMember({"sort", "count", "density", "all"}));

    auto* inf = app.add_subcommand("infer", "Count objects in images");
    std::vector<std::string> inputs;
    std::optional<std::string> infer_manifest;
    std::string reports = "reports.jsonl";
    std::optional<std::string> overlay_dir;
    std::optional<std::string> strategy;
    std::optional<int> grid;
    std::optional<double> tau;
    bool no_hybrid = false;
    inf->add_option("images", inputs, "Image files");
    inf->add_option("--manifest", infer_manifest, "Manifest whose rows name the images");
    inf->add_option("-o,--out", reports, "Report file (JSON lines)");
    inf->add_option("--overlay-dir", overlay_dir, "Write count-map overlays here");
    inf->add_option("--strategy", strategy, "dcgp | fixed | gated");
    inf->add_option("-M,--grid", grid, "Partition rate M");
    inf->add_option("--tau", tau, "Dense-fraction threshold");
    inf->add_flag("--no-hybrid", no_hybrid, "Crop recount patches from the inference image");

    auto* ev = app.add_subcommand("evaluate", "MAE and RMSE of predictions against a manifest");
    std::string truth_file;
    std::string predictions_file;
    std::optional<std::string> eval_out;
    ev->add_option("--truth", truth_file, "Manifest with true_count or prompt_count")->required();
    ev->add_option("--predictions", predictions_file, "Report file written by infer")->required();
    ev->add_option("-o,--out", eval_out, "Also write the report here");

    auto* ab = app.add_subcommand("ablate", "Run an ablation table on the test set");
    std::string table_name;
    std::optional<std::string> ablate_out;
    ab->add_option("--table", table_name, "partition | count_train | resolution")
        ->required()
        ->check(CLI::IsMember({"partition", "count_train", "resolution"}));
    ab->add_option("-o,--out", ablate_out, "Output JSON (default <data.root>/ablation_<table>.json)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    auto logger = spdlog::get("synthcount");
    if (!logger) logger = spdlog::stderr_color_st("synthcount");
    spdlog::set_default_logger(logger);
    spdlog::set_pattern("[%H:%M:%S] %l: %v");
    spdlog::set_level(quiet ? spdlog::level::warn : spdlog::level::info);

    const std::vector<std::string> args(argv, argv + argc);
    try {
        // Command-line flags of infer are recorded as overrides so they show up in the
        // effective config.
        if (strategy) overrides.push_back("infer.strategy=" + *strategy);
        if (grid) overrides.push_back("infer.M=" + std::to_string(*grid));
        if (tau) overrides.push_back("infer.tau=" + std::to_string(*tau));
        if (no_hybrid) overrides.push_back("infer.hybrid_resolution=false");
        if (overlay_dir) overrides.push_back("infer.overlay=true");
        std::optional<fs::path> cfg_file;
        if (config_path) cfg_file = *config_path;
        const Config cfg = load_config(cfg_file, overrides);

        if (gen->parsed()) {
            json out;
            if (kind == "sorting" || kind == "all") out["sorting"] = generate_sorting(cfg);
            if (kind == "count" || kind == "all") out["count"] = generate_count(cfg);
            if (kind == "density" || kind == "all") out["density"] = generate_density(cfg);
            if (kind == "test" || kind == "all") out["test"] = generate_test(cfg);
            print_json(out);
        } else if (tr->parsed()) {
            run_train(cfg, stage, args);
            print_json({{"checkpoint", checkpoint_dir(cfg).string()}, {"stage", stage}});
        } else if (inf->parsed()) {
            std::vector<fs::path> paths(inputs.begin(), inputs.end());
            std::optional<fs::path> mf;
            if (infer_manifest) mf = *infer_manifest;
            std::optional<fs::path> od;
            if (overlay_dir) od = *overlay_dir;
            print_json(run_infer(cfg, paths, mf, reports, od));
        } else if (ev->parsed()) {
            const auto report = evaluate_files(truth_file, predictions_file);
            const json j = to_json(report);
            if (eval_out) std::ofstream(*eval_out) << j.dump(2) << '\n';
            print_json({{"n", report.n}, {"mae", report.mae}, {"mse", report.mse}});
        } else if (ab->parsed()) {
            AblationTable table;
            if (table_name == "partition") table = ablate_partition(cfg);
            if (table_name == "count_train") table = ablate_count_train(cfg);
            if (table_name == "resolution") table = ablate_resolution(cfg);
            const fs::path out = ablate_out ? fs::path(*ablate_out) : data_dir(cfg) / ("ablation_" + table_name + ".json");
            if (out.has_parent_path()) fs::create_directories(out.parent_path());
            std::ofstream(out) << to_json(table).dump(2) << '\n';
            std::cout << format_table(table);
        }
        return 0;
    } catch (const Error& e) {
        std::cerr << json{{"error", std::string(to_string(e.code()))}, {"message", e.message()}}.dump() << std::endl;
        return 1;
    } catch (const std::exception& e) {
        std::cerr << json{{"error", "Internal"}, {"message", e.what()}}.dump() << std::endl;
        return 1;
    }
}

}  // namespace synthcount::cli
