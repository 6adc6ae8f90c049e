#include "synthcount/genclient.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <opencv2/imgproc.hpp>

#include "synthcount/errors.hpp"
#include "synthcount/image.hpp"
#include "synthcount/random.hpp"

namespace synthcount::genclient {

namespace detail {
extern const std::string_view kSceneNames;
}

namespace fs = std::filesystem;

void GenRequest::validate() const {
    if (!(strength > 0.0 && strength <= 1.0)) {
        throw Error(ErrorCode::InvalidArgument, "strength must lie in (0, 1]");
    }
    if (init_image && init_image->empty()) throw Error(ErrorCode::InvalidArgument, "empty init image");
    if (mask) {
        if (!init_image) throw Error(ErrorCode::InvalidArgument, "a mask needs an init image");
        if (mask->type() != CV_8UC1) throw Error(ErrorCode::InvalidArgument, "mask must be CV_8UC1");
        if (mask->size() != init_image->size()) {
            throw Error(ErrorCode::ShapeMismatch, "mask and init image differ in size");
        }
    }
}

namespace {

std::string png_b64(const cv::Mat& image) { return base64_encode(encode_png(image)); }

cv::Mat decode_b64(const json& body, const char* field) {
    try {
        return decode_image(base64_decode(body.at(field).get<std::string>()));
    } catch (const json::exception&) {
        throw Error(ErrorCode::GenerationRejected, std::string("bad or missing '") + field + "'");
    }
}

}  // namespace

// Masks travel as grayscale PNG with 255 marking the paint region.
json to_wire(const GenRequest& request) {
    request.validate();
    json j = {{"prompt", request.prompt},
              {"negative_prompt", request.negative_prompt},
              {"seed", request.seed},
              {"strength", request.strength}};
    if (request.init_image) j["init_image_b64"] = png_b64(*request.init_image);
    if (request.mask) j["mask_b64"] = png_b64(*request.mask * 255);
    return j;
}

GenRequest from_wire(const json& body) {
    GenRequest request;
    try {
        request.prompt = body.at("prompt").get<std::string>();
        request.negative_prompt = body.value("negative_prompt", "");
        request.seed = body.value("seed", std::uint64_t{0});
        request.strength = body.value("strength", 0.75);
    } catch (const json::exception& e) {
        throw Error(ErrorCode::InvalidArgument, std::string("bad request: ") + e.what());
    }
    if (body.contains("init_image_b64")) request.init_image = decode_b64(body, "init_image_b64");
    if (body.contains("mask_b64")) {
        cv::Mat gray;
        cv::cvtColor(decode_b64(body, "mask_b64"), gray, cv::COLOR_BGR2GRAY);
        cv::Mat mask = gray > 127;
        request.mask = mask / 255;
    }
    request.validate();
    return request;
}

json to_wire(const GenResponse& response) {
    return {{"image_b64", png_b64(response.image)}, {"backend_info", response.backend_info}};
}

GenResponse response_from_wire(const json& body) {
    GenResponse response;
    response.image = decode_b64(body, "image_b64");
    response.backend_info = body.value("backend_info", "");
    return response;
}

cv::Mat perimeter_mask(int height, int width, double band_fraction) {
    if (!(band_fraction > 0.0 && band_fraction < 0.5)) {
        throw Error(ErrorCode::BadFraction, "band_fraction must lie in (0, 0.5)");
    }
    if (height < 1 || width < 1) throw Error(ErrorCode::InvalidArgument, "mask dims must be positive");
    const int band_h = static_cast<int>(std::floor(height * band_fraction));
    const int band_w = static_cast<int>(std::floor(width * band_fraction));
    cv::Mat mask(height, width, CV_8UC1, cv::Scalar(1));
    mask(cv::Rect(band_w, band_h, width - 2 * band_w, height - 2 * band_h)).setTo(0);
    return mask;
}

std::string_view to_string(DensityLabel label) noexcept {
    switch (label) {
        case DensityLabel::no_crowd: return "no_crowd";
        case DensityLabel::sparse: return "sparse";
        case DensityLabel::dense: return "dense";
    }
    return "?";
}

const std::array<DensityCategory, 3>& density_categories() {
    static const std::array<DensityCategory, 3> categories{{
        {DensityLabel::no_crowd, "a photo of a {scene}"},
        {DensityLabel::sparse, "a photo of {count} people"},
        {DensityLabel::dense, "a photo of a dense crowd of {count} people"},
    }};
    return categories;
}

DensityLabel DensityThresholds::classify(int count) const {
    if (count <= 0) return DensityLabel::no_crowd;
    return count >= dense_min ? DensityLabel::dense : DensityLabel::sparse;
}

void DensityThresholds::validate() const {
    if (!(sparse_max >= 1 && sparse_max < dense_min && dense_min <= dense_max)) {
        throw Error(ErrorCode::ConfigError, "density thresholds need 1 <= sparse_max < dense_min <= dense_max");
    }
}

std::vector<CountPromptCategory> default_count_schedule(int n_images) {
    std::vector<CountPromptCategory> schedule;
    for (int c : {1, 2, 3, 5, 8, 12, 18, 27, 40, 60, 90, 135, 200, 300, 450, 675, 1000}) {
        schedule.push_back({c, "a photo of {count} people", n_images});
    }
    return schedule;
}

std::string fill_template(std::string_view text, int count, std::string_view scene) {
    std::string out(text);
    auto replace_all = [&out](std::string_view key, const std::string& value) {
        for (auto pos = out.find(key); pos != std::string::npos; pos = out.find(key, pos + value.size())) {
            out.replace(pos, key.size(), value);
        }
    };
    replace_all("{count}", std::to_string(count));
    replace_all("{scene}", std::string(scene));
    return out;
}

const std::vector<std::string>& scene_names() {
    static const std::vector<std::string> names = [] {
        std::vector<std::string> out;
        std::istringstream in{std::string(detail::kSceneNames)};
        for (std::string line; std::getline(in, line);) {
            if (!line.empty()) out.push_back(line);
        }
        return out;
    }();
    return names;
}

OracleBackend::OracleBackend(OracleOptions options) : options_(options) {
    scene_lab::SceneSpec probe;
    probe.height = options_.height;
    probe.width = options_.width;
    probe.size_gradient = options_.size_gradient;
    scene_lab::validate(probe);
}

ImageSample OracleBackend::text_to_image(const TextRequest& request) {
    scene_lab::SceneSpec spec;
    spec.seed = request.seed;
    spec.count = request.count;
    spec.height = options_.height;
    spec.width = options_.width;
    spec.object_style = options_.object_style;
    spec.size_gradient = options_.size_gradient;
    Rng rng(mix_seed(request.seed, 0xB9ULL));
    spec.background_id = rng.uniform_int(0, 1 << 20);
    ImageSample sample = scene_lab::render_scene(spec);
    sample.meta["backend"] = name();
    sample.meta["prompt"] = request.prompt;
    sample.meta["negative_prompt"] = request.negative_prompt;
    if (!request.scene.empty()) sample.meta["scene"] = request.scene;
    return sample;
}

namespace {

int object_count(const ImageSample& ref) {
    if (!ref.scene) {
        throw Error(ErrorCode::InvalidArgument, "oracle edits need a rendered reference");
    }
    return static_cast<int>(ref.scene->objects.size());
}

}  // namespace

ImageSample OracleBackend::fewer(const ImageSample& ref, const GenRequest& request) {
    request.validate();
    const int count = object_count(ref);
    auto [lo, hi] = options_.remove.bounds(count);
    hi = std::min(hi, count);
    if (hi < lo) throw Error(ErrorCode::TooFewObjects, "reference holds " + std::to_string(count) + " objects");
    Rng rng(mix_seed(request.seed, 0xF3ULL));
    const int k = rng.uniform_int(lo, hi);
    return scene_lab::remove_objects(ref, k, rng.next());
}

ImageSample OracleBackend::more(const ImageSample& ref, const GenRequest& request,
                                double band_fraction) {
    request.validate();
    const int count = object_count(ref);
    const auto [lo, hi] = options_.add.bounds(count);
    Rng rng(mix_seed(request.seed, 0xA7ULL));
    const int k = rng.uniform_int(lo, hi);
    return scene_lab::add_objects(ref, k, band_fraction, rng.next());
}

RemoteBackend::RemoteBackend(RemoteOptions options) : options_(std::move(options)) {
    if (options_.attempts < 1) throw Error(ErrorCode::ConfigError, "remote attempts must be at least 1");
}

GenResponse RemoteBackend::generate(const GenRequest& request) const {
    const std::string body = to_wire(request).dump();
    httplib::Client client(options_.base_url);
    client.set_connection_timeout(options_.timeout);
    client.set_read_timeout(options_.timeout);
    std::string last_error;
    for (int attempt = 0; attempt < options_.attempts; ++attempt) {
        if (attempt > 0) std::this_thread::sleep_for(options_.backoff * (1 << (attempt - 1)));
        auto result = client.Post(options_.endpoint, body, "application/json");
        if (!result) {
            last_error = httplib::to_string(result.error());
            continue;
        }
        if (result->status >= 500) {
            last_error = "HTTP " + std::to_string(result->status);
            continue;
        }
        json reply;
        try {
            reply = json::parse(result->body);
        } catch (const json::exception&) {
            throw Error(ErrorCode::GenerationRejected,
                        "HTTP " + std::to_string(result->status) + " with a non-JSON body");
        }
        if (result->status >= 400 || reply.contains("error")) {
            const std::string detail =
                reply.contains("error") ? reply["error"].dump() : "HTTP " + std::to_string(result->status);
            throw Error(ErrorCode::GenerationRejected, detail);
        }
        return response_from_wire(reply);
    }
    throw Error(ErrorCode::BackendUnavailable,
                options_.base_url + options_.endpoint + " after " + std::to_string(options_.attempts) +
                    " attempts: " + last_error);
}

ImageSample RemoteBackend::to_sample(GenResponse response) const {
    ImageSample sample;
    sample.image = std::move(response.image);
    sample.source = scene_lab::Source::generated;
    sample.meta["backend"] = name();
    sample.meta["backend_info"] = response.backend_info;
    return sample;
}

ImageSample RemoteBackend::text_to_image(const TextRequest& request) {
    GenRequest gen;
    gen.prompt = request.prompt;
    gen.negative_prompt = request.negative_prompt;
    gen.seed = request.seed;
    gen.strength = 1.0;
    auto sample = to_sample(generate(gen));
    sample.meta["prompt"] = request.prompt;
    sample.meta["negative_prompt"] = request.negative_prompt;
    return sample;
}

ImageSample RemoteBackend::fewer(const ImageSample&, const GenRequest& request) {
    return to_sample(generate(request));
}

ImageSample RemoteBackend::more(const ImageSample&, const GenRequest& request, double) {
    return to_sample(generate(request));
}

namespace {

void record_edit(ImageSample& out, const Backend& backend, const GenRequest& request,
                 std::string_view edit) {
    out.meta["backend"] = backend.name();
    out.meta["edit"] = std::string(edit);
    out.meta["prompt"] = request.prompt;
    out.meta["negative_prompt"] = request.negative_prompt;
    out.meta["seed"] = std::to_string(request.seed);
    out.meta["strength"] = std::to_string(request.strength);
}

}  // namespace

ImageSample generate_fewer(Backend& backend, const ImageSample& ref, const EditConfig& config,
                           std::uint64_t seed) {
    GenRequest request;
    request.prompt = config.fewer_prompt;
    request.negative_prompt = config.fewer_negative_prompt;
    request.init_image = ref.image;
    request.seed = seed;
    request.strength = config.strength;
    auto out = backend.fewer(ref, request);
    record_edit(out, backend, request, "fewer");
    return out;
}

ImageSample generate_more(Backend& backend, const ImageSample& ref, const EditConfig& config,
                          std::uint64_t seed) {
    GenRequest request;
    request.prompt = config.more_prompt;
    request.negative_prompt = config.more_negative_prompt;
    request.init_image = ref.image;
    request.mask = perimeter_mask(ref.image.rows, ref.image.cols, config.band_fraction);
    request.seed = seed;
    request.strength = config.strength;
    auto out = backend.more(ref, request, config.band_fraction);
    record_edit(out, backend, request, "more");
    out.meta["band_fraction"] = std::to_string(config.band_fraction);
    return out;
}

std::vector<ImageSample> make_references(Backend& backend, const ReferenceOptions& options) {
    if (options.n < 1) throw Error(ErrorCode::InvalidArgument, "need at least one reference");
    if (options.min_count < 1 || options.max_count < options.min_count) {
        throw Error(ErrorCode::InvalidArgument, "reference counts need 1 <= min_count <= max_count");
    }
    Rng rng(mix_seed(options.seed, 0x5EFULL));
    std::vector<ImageSample> refs;
    for (int i = 0; i < options.n; ++i) {
        TextRequest request;
        request.count = rng.uniform_int(options.min_count, options.max_count);
        request.prompt = fill_template(options.prompt_template, request.count);
        request.seed = rng.next();
        refs.push_back(backend.text_to_image(request));
    }
    return refs;
}

namespace {

std::string numbered(std::string_view stem, int a, int width = 5) {
    std::string digits = std::to_string(a);
    if (static_cast<int>(digits.size()) < width) digits.insert(0, width - digits.size(), '0');
    return std::string(stem) + digits;
}

// Images and the failure log of one build. Manifest rows go through a single appender.
class BuildOutput {
public:
    BuildOutput(const fs::path& out_dir, const std::string& manifest_name)
        : dir_(out_dir), rows_(out_dir / manifest_name), failures_(out_dir / "failures.jsonl") {
        fs::create_directories(dir_ / "images");
        stats_.manifest = dir_ / manifest_name;
    }

    std::string save(const ImageSample& sample, const std::string& stem) {
        const std::string rel = "images/" + stem + ".png";
        write_png(dir_ / rel, sample.image);
        return rel;
    }

    void row(const json& record) {
        rows_.append(record);
        ++stats_.attempted;
        ++stats_.written;
    }

    void failure(const std::string& row_id, const Error& error) {
        failures_.append({{"row", row_id},
                          {"code", std::string(to_string(error.code()))},
                          {"message", error.what()}});
        ++stats_.attempted;
        ++stats_.failed;
    }

    BuildStats finish() {
        rows_.commit();
        failures_.commit();
        return stats_;
    }

    const fs::path& dir() const { return dir_; }

private:
    fs::path dir_;
    manifest::Writer rows_;
    manifest::Writer failures_;
    BuildStats stats_;
};

}  // namespace

BuildStats build_sorting_dataset(Backend& backend, const std::vector<ImageSample>& refs,
                                 const fs::path& out_dir, const SortingBuildOptions& options) {
    if (refs.empty()) throw Error(ErrorCode::ManifestEmpty, "no reference images");
    if (options.n_minus < 1 || options.n_plus < 1) {
        throw Error(ErrorCode::InvalidArgument, "n_minus and n_plus must be at least 1");
    }
    BuildOutput out(out_dir, "sorting.jsonl");
    for (int i = 0; i < static_cast<int>(refs.size()); ++i) {
        const ImageSample& ref = refs[static_cast<size_t>(i)];
        const std::uint64_t ref_seed = mix_seed(options.seed, static_cast<std::uint64_t>(i));
        const std::string ref_path = out.save(ref, numbered("ref_", i));

        struct Variant {
            std::optional<ImageSample> sample;
            std::string path;
            std::optional<Error> error;
        };
        auto make = [&](bool more, int j) {
            Variant v;
            const std::uint64_t seed = mix_seed(ref_seed, (more ? 0x1000ULL : 0ULL) + static_cast<std::uint64_t>(j));
            try {
                v.sample = more ? generate_more(backend, ref, options.edit, seed)
                                : generate_fewer(backend, ref, options.edit, seed);
                v.path = out.save(*v.sample, numbered("ref_", i) + (more ? "_plus_" : "_minus_") + std::to_string(j));
            } catch (const Error& e) {
                v.error = e;
            }
            return v;
        };
        std::vector<Variant> fewer, more;
        for (int j = 0; j < options.n_minus; ++j) fewer.push_back(make(false, j));
        for (int j = 0; j < options.n_plus; ++j) more.push_back(make(true, j));

        for (int a = 0; a < options.n_minus; ++a) {
            for (int b = 0; b < options.n_plus; ++b) {
                const std::string id = numbered("r", i) + "_m" + std::to_string(a) + "_p" + std::to_string(b);
                const Variant& lo = fewer[static_cast<size_t>(a)];
                const Variant& hi = more[static_cast<size_t>(b)];
                if (lo.error || hi.error) {
                    out.failure(id, lo.error ? *lo.error : *hi.error);
                    continue;
                }
                manifest::SortingRow row;
                row.triplet_id = id;
                row.paths = {lo.path, ref_path, hi.path};
                if (lo.sample->true_count && ref.true_count && hi.sample->true_count) {
                    row.true_counts = std::array<int, 3>{*lo.sample->true_count, *ref.true_count,
                                                         *hi.sample->true_count};
                }
                out.row(manifest::to_json(row));
            }
        }
    }
    return out.finish();
}

namespace {

TextRequest zero_request(Rng& rng, const std::string& prompt_template, const std::string& negative) {
    const auto& names = scene_names();
    TextRequest request;
    request.scene = names[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(names.size()) - 1))];
    request.prompt = fill_template(prompt_template, 0, request.scene);
    request.negative_prompt = negative;
    request.count = 0;
    request.seed = rng.next();
    return request;
}

}  // namespace

BuildStats build_count_dataset(Backend& backend, const fs::path& out_dir,
                               const CountBuildOptions& options) {
    if (options.zero_count < 0) throw Error(ErrorCode::ConfigError, "zero_count must be non-negative");
    for (const auto& category : options.schedule) {
        if (category.prompt_count < 1 || category.prompt_count > 1000) {
            throw Error(ErrorCode::ConfigError,
                        "prompt count " + std::to_string(category.prompt_count) + " outside [1, 1000]");
        }
        if (category.n_images < 1) throw Error(ErrorCode::ConfigError, "n_images must be positive");
    }
    BuildOutput out(out_dir, "count.jsonl");
    auto emit = [&](const TextRequest& request, const std::string& stem) {
        try {
            const ImageSample sample = backend.text_to_image(request);
            manifest::CountRow row;
            row.path = out.save(sample, stem);
            row.prompt_count = request.count;
            row.true_count = sample.true_count;
            out.row(manifest::to_json(row));
        } catch (const Error& e) {
            out.failure(stem, e);
        }
    };
    for (const auto& category : options.schedule) {
        Rng rng(mix_seed(options.seed, static_cast<std::uint64_t>(category.prompt_count)));
        for (int j = 0; j < category.n_images; ++j) {
            TextRequest request;
            request.count = category.prompt_count;
            request.prompt = fill_template(category.prompt_template, category.prompt_count);
            request.seed = rng.next();
            emit(request, numbered("count_", category.prompt_count, 4) + "_" + numbered("", j, 4));
        }
    }
    Rng rng(mix_seed(options.seed, 0x2E50ULL));
    for (int j = 0; j < options.zero_count; ++j) {
        emit(zero_request(rng, options.zero_prompt_template, options.zero_negative_prompt),
             numbered("zero_", j));
    }
    return out.finish();
}

std::vector<manifest::CountRow> zero_pool(const fs::path& count_manifest) {
    std::vector<manifest::CountRow> pool;
    for (auto row : manifest::read_count(count_manifest)) {
        if (row.prompt_count != 0) continue;
        row.path = fs::absolute(manifest::resolve(count_manifest, row.path)).lexically_normal().string();
        pool.push_back(std::move(row));
    }
    return pool;
}

BuildStats build_density_dataset(Backend& backend, const fs::path& out_dir,
                                 const DensityBuildOptions& options) {
    if (options.per_class < 1) throw Error(ErrorCode::ConfigError, "per_class must be at least 1");
    options.thresholds.validate();
    BuildOutput out(out_dir, "density.jsonl");
    const fs::path abs_dir = fs::absolute(out_dir).lexically_normal();
    const auto& categories = density_categories();

    auto emit = [&](const TextRequest& request, DensityLabel label, const std::string& stem) {
        try {
            const ImageSample sample = backend.text_to_image(request);
            manifest::DensityRow row;
            row.path = out.save(sample, stem);
            row.density_label = static_cast<int>(label);
            row.true_count = sample.true_count;
            out.row(manifest::to_json(row));
        } catch (const Error& e) {
            out.failure(stem, e);
        }
    };

    const int reused = std::min(options.per_class, static_cast<int>(options.zero_pool.size()));
    for (int j = 0; j < reused; ++j) {
        const auto& pooled = options.zero_pool[static_cast<size_t>(j)];
        manifest::DensityRow row;
        row.path = fs::path(pooled.path).lexically_relative(abs_dir).string();
        row.density_label = static_cast<int>(DensityLabel::no_crowd);
        row.true_count = pooled.true_count;
        out.row(manifest::to_json(row));
    }
    Rng zero_rng(mix_seed(options.seed, 0xD0ULL));
    for (int j = reused; j < options.per_class; ++j) {
        emit(zero_request(zero_rng, categories[0].prompt_template, options.zero_negative_prompt),
             DensityLabel::no_crowd, numbered("none_", j));
    }
    const DensityThresholds& t = options.thresholds;
    for (const auto label : {DensityLabel::sparse, DensityLabel::dense}) {
        const bool dense = label == DensityLabel::dense;
        Rng rng(mix_seed(options.seed, dense ? 0xD2ULL : 0xD1ULL));
        for (int j = 0; j < options.per_class; ++j) {
            TextRequest request;
            request.count = dense ? rng.uniform_int(t.dense_min, t.dense_max) : rng.uniform_int(1, t.sparse_max);
            request.prompt = fill_template(categories[static_cast<size_t>(label)].prompt_template, request.count);
            request.seed = rng.next();
            emit(request, label, numbered(dense ? "dense_" : "sparse_", j));
        }
    }
    return out.finish();
}

std::vector<bool> inject_label_noise(std::vector<manifest::CountRow>& rows, double fraction,
                                     std::uint64_t seed) {
    if (!(fraction >= 0.0 && fraction <= 1.0)) {
        throw Error(ErrorCode::BadFraction, "noise fraction must lie in [0, 1]");
    }
    std::vector<int> categories;
    std::vector<size_t> candidates;
    for (size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].prompt_count == 0) continue;
        categories.push_back(rows[i].prompt_count);
        candidates.push_back(i);
    }
    std::sort(categories.begin(), categories.end());
    categories.erase(std::unique(categories.begin(), categories.end()), categories.end());
    std::vector<bool> corrupted(rows.size(), false);
    const auto n = static_cast<size_t>(std::lround(fraction * static_cast<double>(candidates.size())));
    if (n == 0) return corrupted;
    if (categories.size() < 2) {
        throw Error(ErrorCode::InvalidArgument, "label noise needs at least two non-zero categories");
    }
    const int k = static_cast<int>(categories.size());
    const int min_gap = k / 2;
    Rng rng(mix_seed(seed, 0x401CULL));
    rng.shuffle(candidates.begin(), candidates.end());
    for (size_t m = 0; m < n; ++m) {
        auto& row = rows[candidates[m]];
        const int own = static_cast<int>(
            std::lower_bound(categories.begin(), categories.end(), row.prompt_count) - categories.begin());
        std::vector<int> far;
        for (int c = 0; c < k; ++c) {
            if (std::abs(c - own) >= min_gap) far.push_back(categories[static_cast<size_t>(c)]);
        }
        row.prompt_count = far[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(far.size()) - 1))];
        corrupted[candidates[m]] = true;
    }
    return corrupted;
}

}  // namespace synthcount::genclient
