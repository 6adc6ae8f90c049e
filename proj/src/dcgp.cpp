#include "synthcount/dcgp.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

#include <opencv2/imgproc.hpp>

#include "synthcount/errors.hpp"

namespace synthcount::dcgp {

CountMap count_map(const models::FeatureMap& z, const models::LinearHead& head) {
    if (z.channels() != head.weight.size()) {
        throw Error(ErrorCode::BadShape, "count head and feature map differ in dimension");
    }
    CountMap map;
    map.values.resize(z.height, z.width);
    const Eigen::VectorXd w = head.weight.cast<double>();
    const double cells = static_cast<double>(z.height) * z.width;
    for (int y = 0; y < z.height; ++y) {
        for (int x = 0; x < z.width; ++x) map.values(y, x) = w.dot(z.cell(y, x).cast<double>()) / cells;
    }
    map.bias = head.bias;
    return map;
}

CountMap count_map(const cv::Mat& image, const models::CountingModel& model) {
    return count_map(model.encode(image), model.count_head);
}

DensityMap density_map(const models::FeatureMap& z, const models::DensityHead& head) {
    if (z.channels() != head.weight.cols()) {
        throw Error(ErrorCode::BadShape, "density head and feature map differ in dimension");
    }
    DensityMap map;
    map.height = z.height;
    map.width = z.width;
    for (int y = 0; y < z.height; ++y) {
        for (int x = 0; x < z.width; ++x) map.classes.push_back(head.classify(z.cell(y, x)));
    }
    return map;
}

DensityMap density_map(const cv::Mat& image, const models::CountingModel& model) {
    return density_map(model.encode(image), model.density_head);
}

namespace {

void check_m(int M) {
    if (M < 1) throw Error(ErrorCode::BadM, "partition rate must be at least 1, got " + std::to_string(M));
}

}  // namespace

std::vector<Box> grid_boxes(int height, int width, int M) {
    check_m(M);
    if (M > height || M > width) {
        throw Error(ErrorCode::BadM, "partition rate " + std::to_string(M) + " exceeds the image size");
    }
    std::vector<Box> boxes;
    for (int r = 0; r < M; ++r) {
        const int y0 = r * height / M;
        const int y1 = (r + 1) * height / M;
        for (int c = 0; c < M; ++c) {
            const int x0 = c * width / M;
            const int x1 = (c + 1) * width / M;
            boxes.push_back({x0, y0, x1 - x0, y1 - y0});
        }
    }
    return boxes;
}

Eigen::MatrixXd cell_overlap(int H, int W, int M, int row, int col) {
    check_m(M);
    auto span = [M](int n, int i, int k) {
        const double a = static_cast<double>(i) * n / M;
        const double b = static_cast<double>(i + 1) * n / M;
        return std::max(0.0, std::min<double>(k + 1, b) - std::max<double>(k, a));
    };
    Eigen::MatrixXd overlap(H, W);
    for (int y = 0; y < H; ++y) {
        const double fy = span(H, row, y);
        for (int x = 0; x < W; ++x) overlap(y, x) = fy * span(W, col, x);
    }
    return overlap;
}

std::string_view to_string(CellMode mode) noexcept {
    return mode == CellMode::recount ? "recount" : "use_map";
}

int PartitionPlan::recount_cells() const {
    return static_cast<int>(std::count_if(cells.begin(), cells.end(),
                                          [](const PlanCell& c) { return c.mode == CellMode::recount; }));
}

PartitionPlan partition_plan(const DensityMap& dmap, int M, double tau) {
    check_m(M);
    if (dmap.height < 1 || dmap.width < 1) throw Error(ErrorCode::BadShape, "empty density map");
    PartitionPlan plan;
    plan.M = M;
    plan.tau = tau;
    Eigen::MatrixXd dense(dmap.height, dmap.width);
    for (int y = 0; y < dmap.height; ++y) {
        for (int x = 0; x < dmap.width; ++x) dense(y, x) = dmap.at(y, x) == models::DensityClass::dense;
    }
    for (int r = 0; r < M; ++r) {
        for (int c = 0; c < M; ++c) {
            const Eigen::MatrixXd overlap = cell_overlap(dmap.height, dmap.width, M, r, c);
            PlanCell cell;
            cell.dense_fraction = overlap.cwiseProduct(dense).sum() / overlap.sum();
            cell.mode = cell.dense_fraction > tau ? CellMode::recount : CellMode::use_map;
            plan.cells.push_back(cell);
        }
    }
    return plan;
}

namespace {

struct PatchSource {
    cv::Mat image;
    std::string label;
    bool fallback = false;
};

PatchSource patch_source(const cv::Mat& image, const models::CountingModel& model, bool hybrid) {
    const int side = model.input_size();
    const bool native_larger = image.rows > side && image.cols > side;
    if (hybrid && native_larger) return {image, "native", false};
    return {resize_image(image, side, side), "inference", hybrid};
}

}  // namespace

InferResult infer_count(const cv::Mat& image, const models::CountingModel& model,
                        const InferConfig& config) {
    check_m(config.M);
    InferResult result;
    result.M = config.M;
    const models::FeatureMap z = model.encode(image);
    result.count_map = count_map(z, model.count_head);
    result.density_map = density_map(z, model.density_head);
    result.plan = partition_plan(result.density_map, config.M, config.tau);

    const int M = config.M;
    const double bias_share = result.count_map.bias / (static_cast<double>(M) * M);
    std::optional<PatchSource> source;
    std::vector<Box> boxes;
    for (int idx = 0; idx < M * M; ++idx) {
        CellReport cell;
        cell.idx = idx;
        cell.mode = result.plan.cells[static_cast<size_t>(idx)].mode;
        if (cell.mode == CellMode::use_map) {
            const Eigen::MatrixXd overlap = cell_overlap(z.height, z.width, M, idx / M, idx % M);
            cell.contribution = overlap.cwiseProduct(result.count_map.values).sum() + bias_share;
            cell.source_res = "map";
        } else {
            if (!source) {
                source = patch_source(image, model, config.hybrid_resolution);
                boxes = grid_boxes(source->image.rows, source->image.cols, M);
                result.hires_fallback = source->fallback;
            }
            cell.box = boxes[static_cast<size_t>(idx)];
            cell.contribution = model.predict_count(crop(source->image, cell.box));
            cell.source_res = source->label;
        }
        result.cells.push_back(cell);
    }
    for (const auto& cell : result.cells) result.final_count += cell.contribution;
    return result;
}

InferResult fixed_partition(const cv::Mat& image, const models::CountingModel& model, int M,
                            bool hybrid_resolution) {
    check_m(M);
    InferResult result;
    result.M = M;
    const PatchSource source = patch_source(image, model, hybrid_resolution);
    result.hires_fallback = source.fallback;
    result.plan.M = M;
    result.plan.cells.assign(static_cast<size_t>(M) * M, PlanCell{CellMode::recount, 1.0});
    const auto boxes = grid_boxes(source.image.rows, source.image.cols, M);
    for (int idx = 0; idx < M * M; ++idx) {
        CellReport cell;
        cell.idx = idx;
        cell.mode = CellMode::recount;
        cell.box = boxes[static_cast<size_t>(idx)];
        // One cell is the whole image, so no crop or second resize is involved.
        cell.contribution = M == 1 ? model.predict_count(image)
                                   : model.predict_count(crop(source.image, cell.box));
        cell.source_res = source.label;
        result.final_count += cell.contribution;
        result.cells.push_back(cell);
    }
    return result;
}

double fixed_partition_count(const cv::Mat& image, const models::CountingModel& model, int M,
                             bool hybrid_resolution) {
    return fixed_partition(image, model, M, hybrid_resolution).final_count;
}

InferResult gated_partition(const cv::Mat& image, const models::CountingModel& model, int M,
                            bool hybrid_resolution) {
    check_m(M);
    const auto verdict = model.density_head.classify(models::pool(model.encode(image)));
    return fixed_partition(image, model, verdict == models::DensityClass::dense ? M : 1,
                           hybrid_resolution);
}

double gated_partition_count(const cv::Mat& image, const models::CountingModel& model, int M,
                             bool hybrid_resolution) {
    return gated_partition(image, model, M, hybrid_resolution).final_count;
}

json to_json(const InferResult& result) {
    json cells = json::array();
    for (const auto& cell : result.cells) {
        cells.push_back({{"idx", cell.idx},
                         {"mode", std::string(to_string(cell.mode))},
                         {"contribution", cell.contribution},
                         {"source_res", cell.source_res}});
    }
    return {{"final_count", result.final_count},
            {"M", result.M},
            {"cells", cells},
            {"hires_fallback", result.hires_fallback}};
}

cv::Mat overlay(const cv::Mat& image, const InferResult& result) {
    const CountMap& map = result.count_map;
    cv::Mat values(map.height(), map.width(), CV_64F);
    for (int y = 0; y < map.height(); ++y) {
        for (int x = 0; x < map.width(); ++x) values.at<double>(y, x) = map.values(y, x);
    }
    cv::Mat scaled;
    cv::normalize(values, scaled, 0, 255, cv::NORM_MINMAX, CV_8U);
    cv::Mat heat;
    cv::applyColorMap(scaled, heat, cv::COLORMAP_JET);
    cv::resize(heat, heat, image.size(), 0, 0, cv::INTER_NEAREST);
    cv::Mat out;
    cv::addWeighted(image, 0.6, heat, 0.4, 0.0, out);
    const auto boxes = grid_boxes(image.rows, image.cols, result.M);
    for (const auto& cell : result.cells) {
        if (cell.mode != CellMode::recount) continue;
        const Box& b = boxes[static_cast<size_t>(cell.idx)];
        cv::rectangle(out, cv::Rect(b.x, b.y, b.width, b.height), cv::Scalar(255, 255, 255), 2);
    }
    return out;
}

}  // namespace synthcount::dcgp
