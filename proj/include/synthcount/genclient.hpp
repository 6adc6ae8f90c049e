#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>
#include <opencv2/core.hpp>

#include "synthcount/manifest.hpp"
#include "synthcount/scene_lab.hpp"

namespace synthcount::genclient {

using json = nlohmann::json;
using scene_lab::ImageSample;

struct GenRequest {
    std::string prompt;
    std::string negative_prompt;
    std::optional<cv::Mat> init_image;
    // CV_8UC1, 1 where the service may paint.
    std::optional<cv::Mat> mask;
    std::uint64_t seed = 0;
    double strength = 0.75;

    void validate() const;
};

// Wire format of the remote generation service.
json to_wire(const GenRequest& request);
GenRequest from_wire(const json& body);

struct GenResponse {
    cv::Mat image;
    std::string backend_info;
};

json to_wire(const GenResponse& response);
GenResponse response_from_wire(const json& body);

// 1 on a band of thickness floor(side * band_fraction) along every edge, 0 inside.
cv::Mat perimeter_mask(int height, int width, double band_fraction);

enum class DensityLabel { no_crowd = 0, sparse = 1, dense = 2 };

std::string_view to_string(DensityLabel label) noexcept;

struct DensityCategory {
    DensityLabel label;
    std::string prompt_template;
};

const std::array<DensityCategory, 3>& density_categories();

// Count classes used by the oracle: 0 is no_crowd, [1, dense_min) is sparse and
// [dense_min, dense_max] is dense. Sparse images are drawn from [1, sparse_max] only,
// which leaves a margin between the classes.
struct DensityThresholds {
    int sparse_max = 25;
    int dense_min = 60;
    int dense_max = 400;

    DensityLabel classify(int count) const;
    void validate() const;
};

struct CountPromptCategory {
    int prompt_count = 1;
    std::string prompt_template = "a photo of {count} people";
    int n_images = 150;
};

std::vector<CountPromptCategory> default_count_schedule(int n_images = 150);

// Replaces every "{count}" and "{scene}" placeholder.
std::string fill_template(std::string_view text, int count, std::string_view scene = {});

const std::vector<std::string>& scene_names();

// Text-to-image request. count is the prompted count; the oracle renders it exactly and the
// remote backend only sees the prompt.
struct TextRequest {
    std::string prompt;
    std::string negative_prompt;
    int count = 0;
    std::uint64_t seed = 0;
    // Scene-name hint for object-free images.
    std::string scene;
};

class Backend {
public:
    virtual ~Backend() = default;
    virtual std::string name() const = 0;
    virtual ImageSample text_to_image(const TextRequest& request) = 0;
    // Image-to-image edit that should remove objects.
    virtual ImageSample fewer(const ImageSample& ref, const GenRequest& request) = 0;
    // Outpainting edit inside request.mask that should add objects.
    virtual ImageSample more(const ImageSample& ref, const GenRequest& request,
                             double band_fraction) = 0;
};

struct OracleOptions {
    int height = 128;
    int width = 128;
    scene_lab::ObjectStyle object_style = scene_lab::ObjectStyle::figure;
    double size_gradient = 0.5;
    scene_lab::ChangeRange remove = scene_lab::TripletOptions{}.remove;
    scene_lab::ChangeRange add = scene_lab::TripletOptions{}.add;
};

// Deterministic stand-in for a diffusion service, backed by the scene renderer.
class OracleBackend final : public Backend {
public:
    explicit OracleBackend(OracleOptions options = {});
    std::string name() const override { return "oracle"; }
    ImageSample text_to_image(const TextRequest& request) override;
    ImageSample fewer(const ImageSample& ref, const GenRequest& request) override;
    ImageSample more(const ImageSample& ref, const GenRequest& request,
                     double band_fraction) override;
    const OracleOptions& options() const { return options_; }

private:
    OracleOptions options_;
};

struct RemoteOptions {
    // scheme://host:port
    std::string base_url = "http://127.0.0.1:7860";
    std::string endpoint = "/generate";
    int attempts = 3;
    std::chrono::milliseconds backoff{250};
    std::chrono::seconds timeout{120};
};

// HTTP client for a text/image-to-image service. Connection failures and 5xx responses are
// retried with exponential backoff and end in BackendUnavailable; 4xx responses and error
// payloads raise GenerationRejected.
class RemoteBackend final : public Backend {
public:
    explicit RemoteBackend(RemoteOptions options);
    std::string name() const override { return "remote"; }
    GenResponse generate(const GenRequest& request) const;
    ImageSample text_to_image(const TextRequest& request) override;
    ImageSample fewer(const ImageSample& ref, const GenRequest& request) override;
    ImageSample more(const ImageSample& ref, const GenRequest& request,
                     double band_fraction) override;

private:
    ImageSample to_sample(GenResponse response) const;
    RemoteOptions options_;
};

// Prompts and edit settings for triplet synthesis.
struct EditConfig {
    std::string fewer_prompt = "an empty place";
    std::string fewer_negative_prompt = "pedestrians, humans, people, crowds";
    std::string more_prompt = "a crowd of people";
    std::string more_negative_prompt;
    double band_fraction = 1.0 / 3.0;
    double strength = 0.75;
};

ImageSample generate_fewer(Backend& backend, const ImageSample& ref, const EditConfig& config,
                           std::uint64_t seed);
ImageSample generate_more(Backend& backend, const ImageSample& ref, const EditConfig& config,
                          std::uint64_t seed);

// rows_attempted = rows_written + rows_failed; every failure is logged to failures.jsonl.
struct BuildStats {
    int attempted = 0;
    int written = 0;
    int failed = 0;
    std::filesystem::path manifest;
};

struct ReferenceOptions {
    int n = 10;
    int min_count = 1;
    int max_count = 50;
    std::string prompt_template = "a photo of {count} people";
    std::uint64_t seed = 0;
};

// Reference images with counts uniform in [min_count, max_count].
std::vector<ImageSample> make_references(Backend& backend, const ReferenceOptions& options);

struct SortingBuildOptions {
    int n_minus = 4;
    int n_plus = 4;
    EditConfig edit;
    std::uint64_t seed = 0;
};

// Writes <out_dir>/sorting.jsonl with n_minus * n_plus triplets per reference.
BuildStats build_sorting_dataset(Backend& backend, const std::vector<ImageSample>& refs,
                                 const std::filesystem::path& out_dir,
                                 const SortingBuildOptions& options = {});

struct CountBuildOptions {
    std::vector<CountPromptCategory> schedule = default_count_schedule();
    int zero_count = 800;
    std::string zero_prompt_template = "a photo of a {scene}";
    std::string zero_negative_prompt = "pedestrians, humans, people, crowds";
    std::uint64_t seed = 0;
};

// Writes <out_dir>/count.jsonl.
BuildStats build_count_dataset(Backend& backend, const std::filesystem::path& out_dir,
                               const CountBuildOptions& options = {});

struct DensityBuildOptions {
    int per_class = 200;
    DensityThresholds thresholds;
    // Zero-object rows (absolute paths) reused for the no_crowd class before new images are
    // generated.
    std::vector<manifest::CountRow> zero_pool;
    std::string zero_prompt_template = "a photo of a {scene}";
    std::string zero_negative_prompt = "pedestrians, humans, people, crowds";
    std::uint64_t seed = 0;
};

// Writes <out_dir>/density.jsonl.
BuildStats build_density_dataset(Backend& backend, const std::filesystem::path& out_dir,
                                 const DensityBuildOptions& options = {});

// Zero-count rows of a count manifest, with absolute paths.
std::vector<manifest::CountRow> zero_pool(const std::filesystem::path& count_manifest);

// Relabels a fraction of the non-zero rows with a far category: one at least half the
// category list away in sorted order. Returns a per-row corrupted flag.
std::vector<bool> inject_label_noise(std::vector<manifest::CountRow>& rows, double fraction,
                                     std::uint64_t seed);

}  // namespace synthcount::genclient
