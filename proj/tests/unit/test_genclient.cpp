#include <atomic>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <gtest/gtest.h>
#include <httplib.h>

#include "support.hpp"
#include "synthcount/genclient.hpp"
#include "synthcount/image.hpp"
#include "synthcount/manifest.hpp"

namespace synthcount::genclient {
namespace {

namespace fs = std::filesystem;
using testing::expect_error;
using testing::same_pixels;
using testing::TempDir;

// Local HTTP stand-in for the generation service.
class FakeService {
public:
    using Handler = std::function<void(const json& body, httplib::Response& res)>;

    explicit FakeService(Handler handler) : handler_(std::move(handler)) {
        server_.Post("/generate", [this](const httplib::Request& req, httplib::Response& res) {
            ++calls_;
            json body;
            try {
                body = json::parse(req.body);
            } catch (const json::exception&) {
                res.status = 400;
                return;
            }
            {
                std::lock_guard<std::mutex> lock(mutex_);
                last_ = body;
            }
            handler_(body, res);
        });
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }

    ~FakeService() {
        server_.stop();
        thread_.join();
    }

    RemoteOptions options() const {
        RemoteOptions o;
        o.base_url = "http://127.0.0.1:" + std::to_string(port_);
        o.backoff = std::chrono::milliseconds(1);
        o.timeout = std::chrono::seconds(5);
        return o;
    }

    int calls() const { return calls_; }

    json last() {
        std::lock_guard<std::mutex> lock(mutex_);
        return last_;
    }

private:
    Handler handler_;
    httplib::Server server_;
    std::thread thread_;
    int port_ = 0;
    std::atomic<int> calls_{0};
    std::mutex mutex_;
    json last_;
};

void reply_image(httplib::Response& res, const cv::Mat& image) {
    GenResponse response{image, "fake-1"};
    res.set_content(to_wire(response).dump(), "application/json");
}

cv::Mat gray_image(int side = 48) { return cv::Mat(side, side, CV_8UC3, cv::Scalar(90, 120, 150)); }

TEST(PerimeterMask, InteriorBlockOf300Square) {
    const cv::Mat mask = perimeter_mask(300, 300, 1.0 / 3.0);
    EXPECT_EQ(cv::countNonZero(mask(cv::Rect(100, 100, 100, 100))), 0);
    EXPECT_EQ(cv::countNonZero(mask), 300 * 300 - 100 * 100);
    EXPECT_EQ(cv::countNonZero(mask), 80000);
}

TEST(PerimeterMask, BandThicknessOf90Square) {
    const cv::Mat mask = perimeter_mask(90, 90, 1.0 / 3.0);
    for (int i = 0; i < 90; ++i) {
        EXPECT_EQ(mask.at<std::uint8_t>(45, i), (i < 30 || i >= 60) ? 1 : 0) << i;
        EXPECT_EQ(mask.at<std::uint8_t>(i, 45), (i < 30 || i >= 60) ? 1 : 0) << i;
    }
}

// Property: the ones-count equals the direct area formula for random shapes and bands.
TEST(PerimeterMask, OnesCountMatchesAreaFormula) {
    Rng rng(12);
    for (int trial = 0; trial < 200; ++trial) {
        const int h = rng.uniform_int(4, 200);
        const int w = rng.uniform_int(4, 200);
        const double f = rng.uniform(0.01, 0.49);
        const int bh = static_cast<int>(std::floor(h * f));
        const int bw = static_cast<int>(std::floor(w * f));
        const cv::Mat mask = perimeter_mask(h, w, f);
        ASSERT_EQ(cv::countNonZero(mask), h * w - (h - 2 * bh) * (w - 2 * bw));
    }
}

TEST(PerimeterMask, RejectsBadFractions) {
    expect_error(ErrorCode::BadFraction, [] { perimeter_mask(10, 10, 0.0); });
    expect_error(ErrorCode::BadFraction, [] { perimeter_mask(10, 10, 0.5); });
    expect_error(ErrorCode::BadFraction, [] { perimeter_mask(10, 10, -0.1); });
}

TEST(GenRequest, Validation) {
    GenRequest r;
    r.strength = 0.0;
    expect_error(ErrorCode::InvalidArgument, [&] { r.validate(); });
    r.strength = 1.0;
    r.validate();
    r.mask = cv::Mat::ones(8, 8, CV_8UC1);
    expect_error(ErrorCode::InvalidArgument, [&] { r.validate(); });
    r.init_image = gray_image(16);
    expect_error(ErrorCode::ShapeMismatch, [&] { r.validate(); });
    r.mask = cv::Mat::ones(16, 16, CV_8UC1);
    r.validate();
}

TEST(GenRequest, WireRoundTrip) {
    Rng rng(3);
    GenRequest r;
    r.prompt = "a crowd of people";
    r.negative_prompt = "cars";
    r.seed = 123456789012345ULL;
    r.strength = 0.6;
    r.init_image = testing::random_image(rng, 40, 56);
    r.mask = perimeter_mask(40, 56, 0.25);
    const json wire = to_wire(r);
    EXPECT_TRUE(wire.contains("init_image_b64"));
    EXPECT_TRUE(wire.contains("mask_b64"));
    const GenRequest back = from_wire(json::parse(wire.dump()));
    EXPECT_EQ(back.prompt, r.prompt);
    EXPECT_EQ(back.negative_prompt, r.negative_prompt);
    EXPECT_EQ(back.seed, r.seed);
    EXPECT_DOUBLE_EQ(back.strength, r.strength);
    ASSERT_TRUE(back.init_image && back.mask);
    EXPECT_TRUE(same_pixels(*back.init_image, *r.init_image));
    EXPECT_TRUE(same_pixels(*back.mask, *r.mask));
}

TEST(GenResponse, WireRoundTrip) {
    Rng rng(4);
    const GenResponse r{testing::random_image(rng, 20, 30), "sd-test"};
    const GenResponse back = response_from_wire(json::parse(to_wire(r).dump()));
    EXPECT_TRUE(same_pixels(back.image, r.image));
    EXPECT_EQ(back.backend_info, "sd-test");
    expect_error(ErrorCode::GenerationRejected, [] { response_from_wire(json{{"backend_info", "x"}}); });
}

TEST(RemoteBackend, ReturnsGeneratedImage) {
    FakeService service([](const json&, httplib::Response& res) { reply_image(res, gray_image()); });
    RemoteBackend backend(service.options());
    TextRequest req;
    req.prompt = "a photo of 3 people";
    req.seed = 5;
    const auto sample = backend.text_to_image(req);
    EXPECT_EQ(sample.source, scene_lab::Source::generated);
    EXPECT_FALSE(sample.true_count.has_value());
    EXPECT_TRUE(same_pixels(sample.image, gray_image()));
    EXPECT_EQ(sample.meta.at("backend_info"), "fake-1");
    EXPECT_EQ(service.last()["prompt"], "a photo of 3 people");
    EXPECT_EQ(service.calls(), 1);
}

TEST(RemoteBackend, RetriesServerErrors) {
    std::atomic<int> seen{0};
    FakeService service([&](const json&, httplib::Response& res) {
        if (++seen < 3) {
            res.status = 503;
            return;
        }
        reply_image(res, gray_image());
    });
    RemoteBackend backend(service.options());
    GenRequest req;
    req.prompt = "x";
    EXPECT_NO_THROW(backend.generate(req));
    EXPECT_EQ(service.calls(), 3);
}

TEST(RemoteBackend, GivesUpAfterThreeAttempts) {
    FakeService service([](const json&, httplib::Response& res) { res.status = 500; });
    RemoteBackend backend(service.options());
    GenRequest req;
    req.prompt = "x";
    expect_error(ErrorCode::BackendUnavailable, [&] { backend.generate(req); });
    EXPECT_EQ(service.calls(), 3);
}

TEST(RemoteBackend, UnreachableServiceIsUnavailable) {
    int port = 0;
    {
        httplib::Server probe;
        port = probe.bind_to_any_port("127.0.0.1");
    }
    RemoteOptions o;
    o.base_url = "http://127.0.0.1:" + std::to_string(port);
    o.backoff = std::chrono::milliseconds(1);
    o.timeout = std::chrono::seconds(1);
    RemoteBackend backend(o);
    GenRequest req;
    req.prompt = "x";
    expect_error(ErrorCode::BackendUnavailable, [&] { backend.generate(req); });
}

TEST(RemoteBackend, ClientErrorsAreRejectedWithoutRetry) {
    FakeService service([](const json&, httplib::Response& res) {
        res.status = 422;
        res.set_content(R"({"detail": "bad prompt"})", "application/json");
    });
    RemoteBackend backend(service.options());
    GenRequest req;
    req.prompt = "x";
    expect_error(ErrorCode::GenerationRejected, [&] { backend.generate(req); });
    EXPECT_EQ(service.calls(), 1);
}

TEST(RemoteBackend, ErrorPayloadIsRejected) {
    FakeService service([](const json&, httplib::Response& res) {
        res.set_content(R"({"error": "NSFW content detected"})", "application/json");
    });
    RemoteBackend backend(service.options());
    GenRequest req;
    req.prompt = "x";
    expect_error(ErrorCode::GenerationRejected, [&] { backend.generate(req); });
    EXPECT_EQ(service.calls(), 1);
}

TEST(RemoteBackend, NonJsonBodyIsRejected) {
    FakeService service([](const json&, httplib::Response& res) { res.set_content("<html>", "text/html"); });
    RemoteBackend backend(service.options());
    GenRequest req;
    req.prompt = "x";
    expect_error(ErrorCode::GenerationRejected, [&] { backend.generate(req); });
}

TEST(RemoteBackend, FewerRequestCarriesEmptyPlacePrompts) {
    FakeService service([](const json&, httplib::Response& res) { reply_image(res, gray_image()); });
    RemoteBackend backend(service.options());
    ImageSample ref;
    ref.image = gray_image();
    const auto out = generate_fewer(backend, ref, EditConfig{}, 77);
    const json body = service.last();
    EXPECT_EQ(body["prompt"], "an empty place");
    EXPECT_EQ(body["negative_prompt"], "pedestrians, humans, people, crowds");
    EXPECT_EQ(body["seed"], 77);
    EXPECT_TRUE(body.contains("init_image_b64"));
    EXPECT_FALSE(body.contains("mask_b64"));
    EXPECT_EQ(out.meta.at("seed"), "77");
    EXPECT_EQ(out.meta.at("edit"), "fewer");
}

TEST(RemoteBackend, MoreRequestCarriesThePerimeterMask) {
    FakeService service([](const json&, httplib::Response& res) { reply_image(res, gray_image(90)); });
    RemoteBackend backend(service.options());
    ImageSample ref;
    ref.image = gray_image(90);
    generate_more(backend, ref, EditConfig{}, 8);
    const GenRequest sent = from_wire(service.last());
    ASSERT_TRUE(sent.mask.has_value());
    EXPECT_TRUE(same_pixels(*sent.mask, perimeter_mask(90, 90, 1.0 / 3.0)));
    EXPECT_EQ(sent.prompt, "a crowd of people");
}

OracleBackend small_oracle() {
    OracleOptions o;
    o.height = 64;
    o.width = 64;
    return OracleBackend(o);
}

TEST(OracleBackend, FewerAndMoreChangeTheCountStrictly) {
    auto oracle = small_oracle();
    TextRequest req;
    req.count = 12;
    req.seed = 3;
    const auto ref = oracle.text_to_image(req);
    const auto fewer = generate_fewer(oracle, ref, EditConfig{}, 1);
    const auto more = generate_more(oracle, ref, EditConfig{}, 2);
    EXPECT_LT(*fewer.true_count, 12);
    EXPECT_GT(*more.true_count, 12);
    EXPECT_EQ(more.meta.at("band_fraction"), std::to_string(1.0 / 3.0));
    EXPECT_EQ(more.meta.at("seed"), "2");
    EXPECT_EQ(more.meta.at("backend"), "oracle");
}

// Property: 1000 oracle edits keep the ordering relation in every case.
TEST(OracleBackend, OrderingHoldsOverThousandEdits) {
    auto oracle = small_oracle();
    Rng rng(21);
    for (int trial = 0; trial < 500; ++trial) {
        TextRequest req;
        req.count = rng.uniform_int(1, 40);
        req.seed = rng.next();
        const auto ref = oracle.text_to_image(req);
        const auto fewer = generate_fewer(oracle, ref, EditConfig{}, rng.next());
        const auto more = generate_more(oracle, ref, EditConfig{}, rng.next());
        ASSERT_LE(*fewer.true_count, *ref.true_count);
        ASSERT_LE(*ref.true_count, *more.true_count);
    }
}

TEST(OracleBackend, EditsNeedARenderedReference) {
    auto oracle = small_oracle();
    ImageSample ref;
    ref.image = gray_image(64);
    expect_error(ErrorCode::InvalidArgument, [&] { generate_fewer(oracle, ref, EditConfig{}, 0); });
}

TEST(Schedule, DefaultCategories) {
    const auto schedule = default_count_schedule();
    const std::vector<int> expected{1, 2, 3, 5, 8, 12, 18, 27, 40, 60, 90, 135, 200, 300, 450, 675, 1000};
    ASSERT_EQ(schedule.size(), expected.size());
    for (size_t i = 0; i < expected.size(); ++i) {
        EXPECT_EQ(schedule[i].prompt_count, expected[i]);
        EXPECT_EQ(schedule[i].n_images, 150);
    }
    EXPECT_EQ(CountBuildOptions{}.zero_count, 800);
}

TEST(Schedule, TemplatesAndScenes) {
    EXPECT_EQ(fill_template("a photo of {count} people", 12), "a photo of 12 people");
    EXPECT_EQ(fill_template("a photo of a {scene}", 0, "harbor"), "a photo of a harbor");
    EXPECT_EQ(fill_template("{count}/{count}", 3), "3/3");
    EXPECT_EQ(scene_names().size(), 121U);
    EXPECT_EQ(density_categories().size(), 3U);
    const DensityThresholds t;
    EXPECT_EQ(t.classify(0), DensityLabel::no_crowd);
    EXPECT_EQ(t.classify(25), DensityLabel::sparse);
    EXPECT_EQ(t.classify(40), DensityLabel::sparse);
    EXPECT_EQ(t.classify(60), DensityLabel::dense);
    expect_error(ErrorCode::ConfigError, [] { DensityThresholds{30, 20, 400}.validate(); });
}

std::string file_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<ImageSample> some_refs(Backend& backend, int n, std::uint64_t seed) {
    ReferenceOptions ro;
    ro.n = n;
    ro.min_count = 4;
    ro.max_count = 30;
    ro.seed = seed;
    return make_references(backend, ro);
}

TEST(SortingBuild, SixteenTripletsPerReference) {
    TempDir dir("sorting");
    auto oracle = small_oracle();
    const auto refs = some_refs(oracle, 10, 1);
    const auto stats = build_sorting_dataset(oracle, refs, dir.path());
    EXPECT_EQ(stats.written, 160);
    EXPECT_EQ(stats.failed, 0);
    EXPECT_EQ(stats.attempted, stats.written + stats.failed);
    const auto rows = manifest::read_sorting(stats.manifest);
    ASSERT_EQ(rows.size(), 160U);
    std::set<std::string> ids;
    for (const auto& row : rows) {
        ids.insert(row.triplet_id);
        EXPECT_EQ(row.ranks, (std::array<int, 3>{0, 1, 2}));
        ASSERT_TRUE(row.true_counts.has_value());
        const auto& c = *row.true_counts;
        EXPECT_LE(c[0], c[1]);
        EXPECT_LE(c[1], c[2]);
        for (const auto& p : row.paths) EXPECT_TRUE(fs::exists(manifest::resolve(stats.manifest, p))) << p;
    }
    EXPECT_EQ(ids.size(), 160U);
}

// The middle path of each row is the reference image, stored with its own count.
TEST(SortingBuild, ImagesMatchTheirRecordedCounts) {
    TempDir dir("sorting_audit");
    auto oracle = small_oracle();
    const auto refs = some_refs(oracle, 2, 5);
    SortingBuildOptions opts;
    opts.n_minus = 1;
    opts.n_plus = 1;
    const auto stats = build_sorting_dataset(oracle, refs, dir.path(), opts);
    const auto rows = manifest::read_sorting(stats.manifest);
    ASSERT_EQ(rows.size(), 2U);
    for (size_t i = 0; i < rows.size(); ++i) {
        EXPECT_EQ((*rows[i].true_counts)[1], *refs[i].true_count);
        EXPECT_TRUE(same_pixels(read_image(manifest::resolve(stats.manifest, rows[i].paths[1])), refs[i].image));
    }
}

TEST(SortingBuild, ReproducibleBytes) {
    TempDir a("repro_a");
    TempDir b("repro_b");
    auto oracle = small_oracle();
    SortingBuildOptions opts;
    opts.n_minus = 2;
    opts.n_plus = 2;
    opts.seed = 9;
    const auto sa = build_sorting_dataset(oracle, some_refs(oracle, 3, 2), a.path(), opts);
    const auto sb = build_sorting_dataset(oracle, some_refs(oracle, 3, 2), b.path(), opts);
    EXPECT_EQ(file_bytes(sa.manifest), file_bytes(sb.manifest));
    for (const auto& row : manifest::read_sorting(sa.manifest)) {
        for (const auto& p : row.paths) EXPECT_EQ(file_bytes(a.path() / p), file_bytes(b.path() / p));
    }
}

// Rejects every third "more" edit so the failure path is exercised.
class FlakyOracle final : public Backend {
public:
    std::string name() const override { return "flaky"; }
    ImageSample text_to_image(const TextRequest& r) override { return inner_.text_to_image(r); }
    ImageSample fewer(const ImageSample& ref, const GenRequest& r) override { return inner_.fewer(ref, r); }
    ImageSample more(const ImageSample& ref, const GenRequest& r, double band) override {
        if (++calls_ % 3 == 0) throw Error(ErrorCode::GenerationRejected, "refused");
        return inner_.more(ref, r, band);
    }

private:
    OracleBackend inner_ = small_oracle();
    int calls_ = 0;
};

TEST(SortingBuild, FailuresAreLoggedNotDropped) {
    TempDir dir("flaky");
    FlakyOracle backend;
    const auto refs = some_refs(backend, 3, 4);
    const auto stats = build_sorting_dataset(backend, refs, dir.path());
    EXPECT_GT(stats.failed, 0);
    EXPECT_EQ(stats.attempted, 48);
    EXPECT_EQ(stats.attempted, stats.written + stats.failed);
    EXPECT_EQ(manifest::read_jsonl(dir.path() / "failures.jsonl").size(), static_cast<size_t>(stats.failed));
    EXPECT_EQ(manifest::read_sorting(stats.manifest).size(), static_cast<size_t>(stats.written));
}

TEST(CountBuild, RowsAndZeroPrompts) {
    TempDir dir("count");
    auto oracle = small_oracle();
    CountBuildOptions opts;
    opts.schedule = {{1, "a photo of {count} people", 3}, {5, "a photo of {count} people", 3}};
    opts.zero_count = 4;
    const auto stats = build_count_dataset(oracle, dir.path(), opts);
    EXPECT_EQ(stats.written, 10);
    const auto rows = manifest::read_count(stats.manifest);
    ASSERT_EQ(rows.size(), 10U);
    int zeros = 0;
    for (const auto& row : rows) {
        EXPECT_EQ(row.true_count, row.prompt_count);
        zeros += row.prompt_count == 0;
    }
    EXPECT_EQ(zeros, 4);
    const auto pool = zero_pool(stats.manifest);
    ASSERT_EQ(pool.size(), 4U);
    for (const auto& row : pool) EXPECT_TRUE(fs::path(row.path).is_absolute());
}

TEST(CountBuild, RejectsOutOfRangeCounts) {
    TempDir dir("count_bad");
    auto oracle = small_oracle();
    CountBuildOptions opts;
    opts.schedule = {{1001, "x", 1}};
    expect_error(ErrorCode::ConfigError, [&] { build_count_dataset(oracle, dir.path(), opts); });
    opts.schedule = {{0, "x", 1}};
    expect_error(ErrorCode::ConfigError, [&] { build_count_dataset(oracle, dir.path(), opts); });
}

TEST(DensityBuild, ReusesZeroPoolAndAuditsClasses) {
    TempDir dir("density");
    auto oracle = small_oracle();
    CountBuildOptions co;
    co.schedule = {{2, "a photo of {count} people", 1}};
    co.zero_count = 3;
    const auto count_stats = build_count_dataset(oracle, dir.path() / "count", co);

    DensityBuildOptions opts;
    opts.per_class = 5;
    opts.thresholds = {10, 30, 60};
    opts.zero_pool = zero_pool(count_stats.manifest);
    const auto stats = build_density_dataset(oracle, dir.path() / "density", opts);
    EXPECT_EQ(stats.written, 15);
    const auto rows = manifest::read_density(stats.manifest);
    ASSERT_EQ(rows.size(), 15U);
    int reused = 0;
    std::array<int, 3> per_label{};
    for (const auto& row : rows) {
        ++per_label[static_cast<size_t>(row.density_label)];
        const fs::path resolved = fs::weakly_canonical(manifest::resolve(stats.manifest, row.path));
        EXPECT_TRUE(fs::exists(resolved));
        if (resolved.string().find("/count/") != std::string::npos) ++reused;
        ASSERT_TRUE(row.true_count.has_value());
        const int c = *row.true_count;
        switch (row.density_label) {
            case 0: EXPECT_EQ(c, 0); break;
            case 1: EXPECT_TRUE(c >= 1 && c <= 10) << c; break;
            case 2: EXPECT_TRUE(c >= 30 && c <= 60) << c; break;
            default: ADD_FAILURE();
        }
    }
    EXPECT_EQ(reused, 3);
    EXPECT_EQ(per_label, (std::array<int, 3>{5, 5, 5}));
}

std::vector<manifest::CountRow> category_rows(const std::vector<int>& categories, int per, int zeros) {
    std::vector<manifest::CountRow> rows;
    for (int c : categories) {
        for (int j = 0; j < per; ++j) rows.push_back({"x.png", c, c, true});
    }
    for (int j = 0; j < zeros; ++j) rows.push_back({"z.png", 0, 0, true});
    return rows;
}

// Property: the relabelled rows are exactly round(f * non-zero rows), each now carries a
// category at least half the list away, and nothing else changes.
TEST(LabelNoise, RelabelsFarCategoriesOnly) {
    const std::vector<int> categories{1, 2, 3, 5, 8, 12, 18, 27, 40, 50};
    Rng rng(31);
    for (int trial = 0; trial < 20; ++trial) {
        const double f = rng.uniform(0.05, 0.6);
        auto rows = category_rows(categories, 10, 7);
        const auto original = rows;
        const auto corrupted = inject_label_noise(rows, f, rng.next());
        int n = 0;
        for (size_t i = 0; i < rows.size(); ++i) {
            ASSERT_EQ(rows[i].true_count, original[i].true_count);
            if (!corrupted[i]) {
                ASSERT_EQ(rows[i].prompt_count, original[i].prompt_count);
                continue;
            }
            ++n;
            ASSERT_NE(original[i].prompt_count, 0);
            const auto pos = [&](int c) {
                return static_cast<int>(std::find(categories.begin(), categories.end(), c) - categories.begin());
            };
            ASSERT_GE(std::abs(pos(rows[i].prompt_count) - pos(original[i].prompt_count)), 5);
        }
        ASSERT_EQ(n, static_cast<int>(std::lround(f * 100)));
    }
}

TEST(LabelNoise, IsDeterministic) {
    auto a = category_rows({1, 5, 20, 40}, 5, 2);
    auto b = a;
    EXPECT_EQ(inject_label_noise(a, 0.3, 4), inject_label_noise(b, 0.3, 4));
    for (size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].prompt_count, b[i].prompt_count);
    expect_error(ErrorCode::BadFraction, [&] { inject_label_noise(a, 1.5, 0); });
}

}  // namespace
}  // namespace synthcount::genclient
