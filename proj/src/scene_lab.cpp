#include "synthcount/scene_lab.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "synthcount/errors.hpp"
#include "synthcount/random.hpp"

namespace synthcount::scene_lab {

namespace {

constexpr int kStrictAttempts = 60;
constexpr int kRelaxedAttempts = 400;
constexpr double kStrictGap = 2.0;
constexpr double kMinRadius = 1.0;

constexpr std::array<std::array<std::uint8_t, 3>, 8> kObjectPalette{{
    {40, 40, 160},
    {30, 110, 40},
    {150, 40, 40},
    {20, 20, 20},
    {120, 30, 120},
    {20, 90, 150},
    {160, 90, 20},
    {60, 60, 90},
}};

constexpr double kCrowdKnee = 50.0;

// Muted light backgrounds; objects are darker and saturated.
constexpr std::array<std::array<int, 3>, 6> kBackgroundPalette{{
    {200, 205, 210},
    {170, 200, 185},
    {210, 195, 170},
    {185, 185, 200},
    {215, 215, 190},
    {180, 195, 205},
}};

double auto_base_radius(const SceneSpec& spec) {
    // Constant relative size up to kCrowdKnee objects per frame; denser frames shrink
    // objects so that total coverage stays flat.
    const double area = static_cast<double>(spec.height) * spec.width;
    const double crowding = std::min(1.0, std::sqrt(kCrowdKnee / std::max(spec.count, 1)));
    const double cap = 0.08 * std::min(spec.height, spec.width);
    return std::clamp(0.045 * std::sqrt(area) * crowding, kMinRadius, cap);
}

double radius_at(const SceneState& state, double cy, double jitter) {
    const double depth = 1.0 - state.spec.size_gradient * (1.0 - cy / state.spec.height);
    return std::max(kMinRadius, state.base_radius * depth * jitter);
}

double overlap_fraction(const SceneObject& a, const SceneObject& b) {
    const double d = std::hypot(a.cx - b.cx, a.cy - b.cy);
    const double pen = a.radius + b.radius - d;
    if (pen <= 0.0) return 0.0;
    return pen / (2.0 * std::min(a.radius, b.radius));
}

bool fits(const SceneObject& candidate, const std::vector<SceneObject>& placed, bool strict,
          double max_overlap) {
    for (const auto& other : placed) {
        if (strict) {
            const double d = std::hypot(candidate.cx - other.cx, candidate.cy - other.cy);
            if (d < candidate.radius + other.radius + kStrictGap) return false;
        } else if (overlap_fraction(candidate, other) > max_overlap) {
            return false;
        }
    }
    return true;
}

// Samples one object that fits the canvas and the overlap budget, preferring fully
// separated placements. Returns false when no placement is found.
template <class Accept>
bool place_object(const SceneState& state, Rng& rng, Accept accept_center, SceneObject& out) {
    const auto& spec = state.spec;
    for (int attempt = 0; attempt < kStrictAttempts + kRelaxedAttempts; ++attempt) {
        const bool strict = attempt < kStrictAttempts;
        SceneObject obj;
        obj.cy = rng.uniform(0.0, spec.height);
        obj.radius = radius_at(state, obj.cy, rng.uniform(0.85, 1.15));
        const double r = obj.radius;
        if (2.0 * r >= spec.width || 2.0 * r >= spec.height) continue;
        if (obj.cy < r || obj.cy > spec.height - r) continue;
        obj.cx = rng.uniform(r, spec.width - r);
        if (!accept_center(obj.cx, obj.cy)) continue;
        obj.aspect = spec.object_style == ObjectStyle::disc ? 1.0 : rng.uniform(0.6, 1.0);
        obj.angle = rng.uniform(0.0, std::numbers::pi);
        obj.color = kObjectPalette[static_cast<size_t>(rng.uniform_int(0, kObjectPalette.size() - 1))];
        obj.texture = static_cast<std::uint32_t>(rng.next());
        if (fits(obj, state.objects, strict, spec.max_overlap)) {
            out = obj;
            return true;
        }
    }
    return false;
}

std::uint32_t hash32(std::uint32_t x) {
    x ^= x >> 16;
    x *= 0x7feb352dU;
    x ^= x >> 15;
    x *= 0x846ca68bU;
    x ^= x >> 16;
    return x;
}

void draw_background(cv::Mat& image, const SceneSpec& spec) {
    const auto& base = kBackgroundPalette[static_cast<size_t>(spec.background_id) %
                                          kBackgroundPalette.size()];
    Rng rng(mix_seed(spec.seed, 0xB6ULL + static_cast<std::uint64_t>(spec.background_id)));
    const double tilt = rng.uniform(-18.0, 18.0);
    const double fx = rng.uniform(1.0, 3.0) * 2.0 * std::numbers::pi / spec.width;
    const double fy = rng.uniform(1.0, 3.0) * 2.0 * std::numbers::pi / spec.height;
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const auto noise_seed = static_cast<std::uint32_t>(rng.next());
    for (int y = 0; y < image.rows; ++y) {
        auto* row = image.ptr<cv::Vec3b>(y);
        const double vertical = tilt * (static_cast<double>(y) / image.rows - 0.5);
        for (int x = 0; x < image.cols; ++x) {
            const double wave = 8.0 * std::sin(fx * x + phase) * std::cos(fy * y);
            const auto n = hash32(noise_seed ^ static_cast<std::uint32_t>(y * 73856093) ^
                                  static_cast<std::uint32_t>(x * 19349663));
            const double grain = static_cast<double>(n & 0xFF) / 255.0 * 8.0 - 4.0;
            for (int c = 0; c < 3; ++c) {
                const double v = base[static_cast<size_t>(c)] + vertical + wave + grain;
                row[x][c] = cv::saturate_cast<std::uint8_t>(v);
            }
        }
    }
}

// Shape test in the object's local frame; returns a shading weight in (0, 1] when
// (dx, dy) falls inside the object, 0 otherwise.
double shape_weight(const SceneObject& obj, ObjectStyle style, double dx, double dy) {
    const double ca = std::cos(obj.angle);
    const double sa = std::sin(obj.angle);
    const double r = obj.radius;
    if (style == ObjectStyle::figure) {
        // Upright: a body ellipse with a head disc, both inside the bounding circle.
        const double bx = dx / (0.45 * r * (0.7 + 0.3 * obj.aspect));
        const double by = (dy - 0.25 * r) / (0.7 * r);
        const double body = bx * bx + by * by;
        if (body <= 1.0) return 1.0 - 0.35 * body;
        const double hx = dx / (0.3 * r);
        const double hy = (dy + 0.6 * r) / (0.3 * r);
        const double head = hx * hx + hy * hy;
        if (head <= 1.0) return 1.0 - 0.25 * head;
        return 0.0;
    }
    const double u = (ca * dx + sa * dy) / r;
    const double v = (-sa * dx + ca * dy) / (r * obj.aspect);
    const double d2 = u * u + v * v;
    if (d2 > 1.0) return 0.0;
    return 1.0 - 0.35 * d2;
}

template <class Visit>
void rasterise(const SceneState& state, const SceneObject& obj, Visit visit) {
    const int x0 = std::max(0, static_cast<int>(std::floor(obj.cx - obj.radius)));
    const int x1 = std::min(state.spec.width - 1, static_cast<int>(std::ceil(obj.cx + obj.radius)));
    const int y0 = std::max(0, static_cast<int>(std::floor(obj.cy - obj.radius)));
    const int y1 = std::min(state.spec.height - 1, static_cast<int>(std::ceil(obj.cy + obj.radius)));
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            const double dx = x + 0.5 - obj.cx;
            const double dy = y + 0.5 - obj.cy;
            const double w = shape_weight(obj, state.spec.object_style, dx, dy);
            if (w > 0.0) visit(x, y, w, dx, dy);
        }
    }
}

std::pair<int, int> band_thickness(int height, int width, double band_fraction) {
    return {static_cast<int>(std::floor(height * band_fraction)),
            static_cast<int>(std::floor(width * band_fraction))};
}

}  // namespace

std::string_view to_string(ObjectStyle style) noexcept {
    switch (style) {
        case ObjectStyle::disc: return "disc";
        case ObjectStyle::ellipse: return "ellipse";
        case ObjectStyle::figure: return "figure";
    }
    return "figure";
}

ObjectStyle parse_object_style(std::string_view text) {
    if (text == "disc") return ObjectStyle::disc;
    if (text == "ellipse") return ObjectStyle::ellipse;
    if (text == "figure") return ObjectStyle::figure;
    throw Error(ErrorCode::InvalidArgument, "unknown object style '" + std::string(text) + "'");
}

std::string_view to_string(Source source) noexcept {
    switch (source) {
        case Source::rendered: return "rendered";
        case Source::generated: return "generated";
        case Source::real: return "real";
    }
    return "real";
}

Source parse_source(std::string_view text) {
    if (text == "rendered") return Source::rendered;
    if (text == "generated") return Source::generated;
    if (text == "real") return Source::real;
    throw Error(ErrorCode::InvalidArgument, "unknown source '" + std::string(text) + "'");
}

void validate(const SceneSpec& spec) {
    if (spec.count < 0) throw Error(ErrorCode::InvalidArgument, "count must be non-negative");
    if (spec.height < 32 || spec.width < 32) {
        throw Error(ErrorCode::InvalidArgument, "canvas dimensions must be at least 32 px");
    }
    if (spec.size_gradient < 0.0 || spec.size_gradient > 1.0) {
        throw Error(ErrorCode::InvalidArgument, "size_gradient must lie in [0, 1]");
    }
    if (spec.max_overlap < 0.0 || spec.max_overlap >= 1.0) {
        throw Error(ErrorCode::InvalidArgument, "max_overlap must lie in [0, 1)");
    }
    if (spec.base_radius < 0.0) {
        throw Error(ErrorCode::InvalidArgument, "base_radius must be non-negative");
    }
}

ImageSample render_state(std::shared_ptr<const SceneState> state) {
    const auto& spec = state->spec;
    cv::Mat image(spec.height, spec.width, CV_8UC3);
    draw_background(image, spec);
    for (const auto& obj : state->objects) {
        rasterise(*state, obj, [&](int x, int y, double w, double dx, double dy) {
            const double stripe =
                std::sin((dx * 0.9 + dy * 0.4) * 6.0 / std::max(obj.radius, 1.0) +
                         static_cast<double>(obj.texture % 628U) / 100.0) > 0.55
                    ? 0.75
                    : 1.0;
            auto& px = image.at<cv::Vec3b>(y, x);
            for (int c = 0; c < 3; ++c) {
                px[c] = cv::saturate_cast<std::uint8_t>(obj.color[static_cast<size_t>(c)] *
                                                        (0.55 + 0.45 * w) * stripe + 15.0);
            }
        });
    }
    ImageSample sample;
    sample.image = image;
    sample.true_count = static_cast<int>(state->objects.size());
    sample.source = Source::rendered;
    sample.meta["backend"] = "oracle";
    sample.meta["seed"] = std::to_string(spec.seed);
    sample.meta["background_id"] = std::to_string(spec.background_id);
    sample.meta["object_style"] = std::string(to_string(spec.object_style));
    sample.scene = std::move(state);
    return sample;
}

ImageSample render_scene(const SceneSpec& spec) {
    validate(spec);
    auto state = std::make_shared<SceneState>();
    state->spec = spec;
    state->base_radius = spec.base_radius > 0.0 ? spec.base_radius : auto_base_radius(spec);
    Rng rng(mix_seed(spec.seed, 0x5CE9EULL));
    state->objects.reserve(static_cast<size_t>(spec.count));
    for (int i = 0; i < spec.count; ++i) {
        SceneObject obj;
        if (!place_object(*state, rng, [](double, double) { return true; }, obj)) {
            throw Error(ErrorCode::CanvasTooSmall,
                        "placed " + std::to_string(i) + " of " + std::to_string(spec.count) +
                            " objects within the overlap budget");
        }
        state->objects.push_back(obj);
    }
    return render_state(std::move(state));
}

cv::Mat object_mask(const SceneState& state) {
    cv::Mat mask = cv::Mat::zeros(state.spec.height, state.spec.width, CV_8UC1);
    for (const auto& obj : state.objects) {
        rasterise(state, obj, [&](int x, int y, double, double, double) {
            mask.at<std::uint8_t>(y, x) = 1;
        });
    }
    return mask;
}

namespace {

const SceneState& require_scene(const ImageSample& sample) {
    if (sample.source != Source::rendered || !sample.scene) {
        throw Error(ErrorCode::InvalidArgument, "exact edits need a rendered sample");
    }
    return *sample.scene;
}

ImageSample edited(const ImageSample& original, std::shared_ptr<SceneState> state) {
    ImageSample out = render_state(std::move(state));
    for (const auto& [key, value] : original.meta) out.meta.emplace(key, value);
    return out;
}

}  // namespace

ImageSample remove_objects(const ImageSample& sample, int k, std::uint64_t seed) {
    const auto& scene = require_scene(sample);
    if (k <= 0) throw Error(ErrorCode::InvalidArgument, "k must be positive");
    const int have = static_cast<int>(scene.objects.size());
    if (k > have) {
        throw Error(ErrorCode::TooFewObjects,
                    "cannot remove " + std::to_string(k) + " of " + std::to_string(have));
    }
    std::vector<int> order(static_cast<size_t>(have));
    for (int i = 0; i < have; ++i) order[static_cast<size_t>(i)] = i;
    Rng rng(mix_seed(seed, 0x2E30EULL));
    rng.shuffle(order.begin(), order.end());
    std::vector<bool> drop(static_cast<size_t>(have), false);
    for (int i = 0; i < k; ++i) drop[static_cast<size_t>(order[static_cast<size_t>(i)])] = true;

    auto state = std::make_shared<SceneState>(scene);
    state->objects.clear();
    for (int i = 0; i < have; ++i) {
        if (!drop[static_cast<size_t>(i)]) state->objects.push_back(scene.objects[static_cast<size_t>(i)]);
    }
    state->spec.count = static_cast<int>(state->objects.size());
    ImageSample out = edited(sample, std::move(state));
    out.meta["edit"] = "remove";
    out.meta["edit_k"] = std::to_string(k);
    out.meta["edit_seed"] = std::to_string(seed);
    return out;
}

ImageSample add_objects(const ImageSample& sample, int k, double band_fraction,
                        std::uint64_t seed) {
    const auto& scene = require_scene(sample);
    if (k <= 0) throw Error(ErrorCode::InvalidArgument, "k must be positive");
    if (!(band_fraction > 0.0 && band_fraction < 0.5)) {
        throw Error(ErrorCode::BadFraction, "band_fraction must lie in (0, 0.5)");
    }
    auto state = std::make_shared<SceneState>(scene);
    const auto [band_h, band_w] = band_thickness(scene.spec.height, scene.spec.width, band_fraction);
    const int H = scene.spec.height;
    const int W = scene.spec.width;
    auto in_band = [=](double cx, double cy) {
        const int x = static_cast<int>(cx);
        const int y = static_cast<int>(cy);
        return x < band_w || x >= W - band_w || y < band_h || y >= H - band_h;
    };
    Rng rng(mix_seed(seed, 0xADD0ULL));
    for (int i = 0; i < k; ++i) {
        SceneObject obj;
        if (!place_object(*state, rng, in_band, obj)) {
            throw Error(ErrorCode::BandFull, "perimeter band cannot host " + std::to_string(k) +
                                                 " more objects (placed " + std::to_string(i) + ")");
        }
        state->objects.push_back(obj);
    }
    state->spec.count = static_cast<int>(state->objects.size());
    ImageSample out = edited(sample, std::move(state));
    out.meta["edit"] = "add";
    out.meta["edit_k"] = std::to_string(k);
    out.meta["edit_seed"] = std::to_string(seed);
    out.meta["band_fraction"] = std::to_string(band_fraction);
    return out;
}

std::pair<int, int> ChangeRange::bounds(int count) const {
    const int lo = std::max({1, min_k, static_cast<int>(std::ceil(min_fraction * count))});
    const int hi = max_k > 0 ? std::max(lo, max_k)
                             : std::max(lo, static_cast<int>(std::lround(max_fraction * count)));
    return {lo, hi};
}

TripletSet make_triplet_set(std::shared_ptr<const ImageSample> ref, int n_minus, int n_plus,
                            const TripletOptions& options) {
    if (n_minus < 1 || n_plus < 1) {
        throw Error(ErrorCode::InvalidArgument, "n_minus and n_plus must be at least 1");
    }
    const auto& scene = require_scene(*ref);
    const int count = static_cast<int>(scene.objects.size());
    TripletSet set;
    Rng rng(mix_seed(options.seed, 0x7819ULL));
    for (int j = 0; j < n_minus; ++j) {
        auto [lo, hi] = options.remove.bounds(count);
        hi = std::min(hi, count);
        if (hi < lo) {
            throw Error(ErrorCode::TooFewObjects,
                        "reference holds " + std::to_string(count) + " objects");
        }
        const int k = rng.uniform_int(lo, hi);
        set.fewer.push_back(std::make_shared<const ImageSample>(remove_objects(*ref, k, rng.next())));
    }
    for (int j = 0; j < n_plus; ++j) {
        const auto [lo, hi] = options.add.bounds(count);
        const int k = rng.uniform_int(lo, hi);
        set.more.push_back(std::make_shared<const ImageSample>(
            add_objects(*ref, k, options.band_fraction, rng.next())));
    }
    for (const auto& fewer : set.fewer) {
        for (const auto& more : set.more) {
            RankedTriplet t;
            t.images = {fewer, ref, more};
            set.triplets.push_back(std::move(t));
        }
    }
    return set;
}

std::vector<RankedTriplet> make_triplets(const ImageSample& ref, int n_minus, int n_plus,
                                         const TripletOptions& options) {
    return make_triplet_set(std::make_shared<const ImageSample>(ref), n_minus, n_plus, options)
        .triplets;
}

}  // namespace synthcount::scene_lab
