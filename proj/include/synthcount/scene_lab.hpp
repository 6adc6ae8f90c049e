#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <opencv2/core.hpp>

namespace synthcount::scene_lab {

enum class ObjectStyle { disc, ellipse, figure };

std::string_view to_string(ObjectStyle style) noexcept;
ObjectStyle parse_object_style(std::string_view text);

// A procedurally rendered scene with a known object count.
struct SceneSpec {
    std::uint64_t seed = 0;
    int count = 0;
    int height = 128;
    int width = 128;
    int background_id = 0;
    ObjectStyle object_style = ObjectStyle::figure;
    // 0 keeps every object at full size; 1 shrinks objects to zero at the top edge.
    double size_gradient = 0.5;
    // Object radius at the bottom edge in px. 0 derives it from canvas area and count so
    // that denser scenes hold smaller objects.
    double base_radius = 0.0;
    // Largest tolerated overlap between two objects, as a fraction of the smaller diameter.
    double max_overlap = 0.2;
};

void validate(const SceneSpec& spec);

struct SceneObject {
    double cx = 0.0;
    double cy = 0.0;
    double radius = 0.0;  // bounding circle
    double aspect = 1.0;  // minor/major axis ratio
    double angle = 0.0;
    std::array<std::uint8_t, 3> color{};
    std::uint32_t texture = 0;
};

// Full description of a rendered scene; re-rendering it is deterministic.
struct SceneState {
    SceneSpec spec;
    double base_radius = 0.0;
    std::vector<SceneObject> objects;
};

enum class Source { rendered, generated, real };

std::string_view to_string(Source source) noexcept;
Source parse_source(std::string_view text);

struct ImageSample {
    cv::Mat image;
    std::optional<int> true_count;
    Source source = Source::real;
    std::string path;
    std::map<std::string, std::string> meta;
    // Present for rendered samples; enables exact add/remove edits.
    std::shared_ptr<const SceneState> scene;
};

// Triplet of images ordered (fewer, reference, more) with rank labels {0, 1, 2}.
struct RankedTriplet {
    std::array<std::shared_ptr<const ImageSample>, 3> images;
    std::array<int, 3> ranks{0, 1, 2};
};

ImageSample render_scene(const SceneSpec& spec);

// Draws an already placed scene.
ImageSample render_state(std::shared_ptr<const SceneState> state);

// Binary object mask (1 inside any object) of the renderer's own rasterisation.
cv::Mat object_mask(const SceneState& state);

ImageSample remove_objects(const ImageSample& sample, int k, std::uint64_t seed);

// New objects are placed with their centres inside the perimeter band of thickness
// floor(side * band_fraction) on each edge.
ImageSample add_objects(const ImageSample& sample, int k, double band_fraction,
                        std::uint64_t seed);

// Number of objects changed by one edit: uniform in [lo, hi] with
// lo = max(min_k, ceil(min_fraction * count)) and hi = max_k when positive, otherwise
// round(max_fraction * count) (at least lo).
struct ChangeRange {
    int min_k = 1;
    int max_k = 0;
    double min_fraction = 0.0;
    double max_fraction = 0.4;

    std::pair<int, int> bounds(int count) const;
};

// The defaults keep every addition larger than every removal, so the reference is always
// closer in count to its decreased variant than to its increased one.
struct TripletOptions {
    ChangeRange remove{1, 0, 0.0, 0.25};
    ChangeRange add{2, 0, 0.35, 0.8};
    double band_fraction = 1.0 / 3.0;
    std::uint64_t seed = 0;
};

struct TripletSet {
    std::vector<std::shared_ptr<const ImageSample>> fewer;
    std::vector<std::shared_ptr<const ImageSample>> more;
    std::vector<RankedTriplet> triplets;
};

// n_minus decreased and n_plus increased variants of ref, crossed into n_minus * n_plus
// triplets.
TripletSet make_triplet_set(std::shared_ptr<const ImageSample> ref, int n_minus, int n_plus,
                            const TripletOptions& options = {});

std::vector<RankedTriplet> make_triplets(const ImageSample& ref, int n_minus, int n_plus,
                                         const TripletOptions& options = {});

}  // namespace synthcount::scene_lab
