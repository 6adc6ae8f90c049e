#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>
#include <opencv2/core.hpp>

#include "synthcount/image.hpp"
#include "synthcount/models.hpp"

namespace synthcount::dcgp {

using json = nlohmann::json;

// Per-cell count contributions c_ij = w . z_ij / (H*W). The head bias is kept apart and
// added once, so values.sum() + bias equals the pooled whole-image prediction.
struct CountMap {
    Eigen::MatrixXd values;  // H x W
    double bias = 0.0;

    int height() const { return static_cast<int>(values.rows()); }
    int width() const { return static_cast<int>(values.cols()); }
    double total() const { return values.sum() + bias; }
};

CountMap count_map(const models::FeatureMap& z, const models::LinearHead& head);
CountMap count_map(const cv::Mat& image, const models::CountingModel& model);

struct DensityMap {
    int height = 0;
    int width = 0;
    std::vector<models::DensityClass> classes;  // row-major

    models::DensityClass at(int y, int x) const { return classes[static_cast<size_t>(y * width + x)]; }
};

DensityMap density_map(const models::FeatureMap& z, const models::DensityHead& head);
DensityMap density_map(const cv::Mat& image, const models::CountingModel& model);

// Tiles a height x width pixel grid into M x M boxes with edges at floor(i * side / M).
std::vector<Box> grid_boxes(int height, int width, int M);

// Overlap area of every feature cell with grid cell (row, col) of an M x M grid laid over an
// H x W feature grid, in feature-cell units. Entries over a feature cell's M*M grid cells sum to 1.
Eigen::MatrixXd cell_overlap(int H, int W, int M, int row, int col);

enum class CellMode { use_map, recount };

std::string_view to_string(CellMode mode) noexcept;

struct PlanCell {
    CellMode mode = CellMode::use_map;
    double dense_fraction = 0.0;
};

// Row-major M x M grid. A cell is recounted iff the area-weighted share of dense density
// cells under it exceeds tau.
struct PartitionPlan {
    int M = 1;
    double tau = 0.5;
    std::vector<PlanCell> cells;

    int recount_cells() const;
};

PartitionPlan partition_plan(const DensityMap& dmap, int M, double tau = 0.5);

struct InferConfig {
    int M = 3;
    double tau = 0.5;
    // Crop recount patches from the native image instead of the resized inference input.
    bool hybrid_resolution = true;
};

struct CellReport {
    int idx = 0;
    CellMode mode = CellMode::use_map;
    double contribution = 0.0;
    // "map", "native" or "inference"
    std::string source_res;
    Box box;  // in the patch source image; empty for map cells
};

struct InferResult {
    double final_count = 0.0;
    int M = 1;
    CountMap count_map;
    DensityMap density_map;
    PartitionPlan plan;
    std::vector<CellReport> cells;
    // Hybrid resolution was requested but the image is no larger than the inference input,
    // so patches were cropped from the inference image.
    bool hires_fallback = false;
};

// Density-guided partitioning. `image` is the native-resolution input.
InferResult infer_count(const cv::Mat& image, const models::CountingModel& model,
                        const InferConfig& config = {});

// Every one of the M x M patches is recounted with the count head and summed.
InferResult fixed_partition(const cv::Mat& image, const models::CountingModel& model, int M,
                            bool hybrid_resolution = true);
double fixed_partition_count(const cv::Mat& image, const models::CountingModel& model, int M,
                             bool hybrid_resolution = true);

// M x M when the whole image is classified dense, otherwise 1 x 1.
InferResult gated_partition(const cv::Mat& image, const models::CountingModel& model, int M,
                            bool hybrid_resolution = true);
double gated_partition_count(const cv::Mat& image, const models::CountingModel& model, int M,
                             bool hybrid_resolution = true);

// {final_count, M, cells: [{idx, mode, contribution, source_res}], hires_fallback}
json to_json(const InferResult& result);

// Count-map heat overlay with recount cells outlined.
cv::Mat overlay(const cv::Mat& image, const InferResult& result);

}  // namespace synthcount::dcgp
