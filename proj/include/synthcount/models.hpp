#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <opencv2/core.hpp>

namespace synthcount::models {

struct EncoderConfig {
    int feature_dim = 32;
    // Input pixels per feature cell; the first log2(downsample_factor) stages have stride 2.
    int downsample_factor = 16;
    // Number of 3x3 conv stages; must be at least log2(downsample_factor).
    int depth = 4;
    // Width of the first stage; widths double per stage up to feature_dim.
    int base_width = 8;
    // Subtract each image's own channel means before the dataset normalisation.
    bool center_inputs = true;
    // Square side every image is resized to before encoding.
    int input_size = 384;
    std::string weights_id;

    int strided_stages() const;
    std::vector<int> widths() const;
    void validate() const;
};

// Per-channel input normalisation, in the channel order of the stored images.
struct Normalization {
    std::array<float, 3> mean{127.5f, 127.5f, 127.5f};
    std::array<float, 3> stddev{64.0f, 64.0f, 64.0f};
};

// Channel statistics over a set of images, after per-image centring when `center` is set.
Normalization compute_normalization(std::span<const cv::Mat> images, bool center);

using FeatureVector = Eigen::VectorXf;

// Flat parameter and gradient storage. Eigen maps over it need the same alignment on every
// run for vectorised sums to add up in the same order.
using FloatBuffer = std::vector<float, Eigen::aligned_allocator<float>>;

// Spatial encoder output. Column y * width + x holds the C features of cell (y, x).
struct FeatureMap {
    int height = 0;
    int width = 0;
    Eigen::MatrixXf values;

    int channels() const { return static_cast<int>(values.rows()); }
    Eigen::Ref<const Eigen::VectorXf> cell(int y, int x) const { return values.col(y * width + x); }
};

FeatureVector pool(const FeatureMap& z);

// Activations kept from a forward pass for backpropagation.
struct EncoderTrace {
    std::vector<Eigen::MatrixXf> columns;  // im2col input of each stage
    std::vector<Eigen::MatrixXf> outputs;  // post-ReLU output of each stage
    std::vector<std::array<int, 2>> in_shapes;
};

// 3x3 convolution stages with ReLU and replicate padding.
class Encoder {
public:
    Encoder() = default;
    Encoder(const EncoderConfig& config, std::uint64_t seed);

    const EncoderConfig& config() const { return config_; }
    const Normalization& normalization() const { return norm_; }
    void set_normalization(const Normalization& norm) { norm_ = norm; }

    // Converts an 8-bit image (any size divisible by downsample_factor) into the
    // normalised C x (H*W) input layout.
    Eigen::MatrixXf prepare(const cv::Mat& image) const;

    FeatureMap encode(const cv::Mat& image) const;
    FeatureMap forward(const Eigen::MatrixXf& input, int height, int width,
                       EncoderTrace* trace = nullptr) const;

    // Accumulates d loss / d params into grad (same layout as parameters()).
    void backward(const EncoderTrace& trace, const Eigen::MatrixXf& grad_map,
                  std::span<float> grad) const;

    std::span<float> parameters() { return params_; }
    std::span<const float> parameters() const { return params_; }
    std::uint64_t checksum() const;

private:
    struct Layer {
        int in_channels = 0;
        int out_channels = 0;
        int stride = 1;
        size_t weight_offset = 0;
        size_t bias_offset = 0;
    };

    EncoderConfig config_;
    Normalization norm_;
    std::vector<Layer> layers_;
    FloatBuffer params_;
};

// Single affine map to a scalar (sorting and counting heads).
struct LinearHead {
    Eigen::VectorXf weight;
    float bias = 0.0f;

    static LinearHead zeros(int dim);
    float operator()(const FeatureVector& z) const { return weight.dot(z) + bias; }
    // Linear part only, without the bias.
    float linear(const FeatureVector& z) const { return weight.dot(z); }
};

enum class DensityClass : int { no_crowd = 0, sparse = 1, dense = 2 };

std::string_view to_string(DensityClass c) noexcept;

struct DensityHead {
    Eigen::Matrix<float, 3, Eigen::Dynamic> weight;
    Eigen::Vector3f bias = Eigen::Vector3f::Zero();

    static DensityHead zeros(int dim);
    Eigen::Vector3f logits(const FeatureVector& z) const { return weight * z + bias; }
    DensityClass classify(const FeatureVector& z) const;
};

Eigen::Vector3f softmax(const Eigen::Vector3f& logits);
double cross_entropy(const Eigen::Vector3f& logits, int label);

// Encoder plus every head, as persisted in a checkpoint directory.
struct CountingModel {
    Encoder encoder;
    LinearHead sort_head;
    LinearHead count_head;
    DensityHead density_head;
    std::vector<std::string> stages;  // completed training stages
    std::string provenance;           // JSON text echoed from the training config

    static CountingModel create(const EncoderConfig& config, std::uint64_t seed);

    bool has_stage(std::string_view stage) const;
    int input_size() const { return encoder.config().input_size; }

    // Resizes to the inference resolution and encodes.
    FeatureMap encode(const cv::Mat& image) const;
    // count_head(pool(encode(image)))
    double predict_count(const cv::Mat& image) const;
};

void save_checkpoint(const std::filesystem::path& dir, const CountingModel& model);
CountingModel load_checkpoint(const std::filesystem::path& dir);

// Raw float tensors: "SCW1" magic, uint64 length, float32 little-endian payload.
void write_weights(const std::filesystem::path& path, std::span<const float> values);
std::vector<float> read_weights(const std::filesystem::path& path);

// Adaptive-moment optimiser over a flat parameter span.
class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(std::span<float> params, std::span<const float> grads);
    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }

private:
    double lr_;
    double beta1_;
    double beta2_;
    double eps_;
    long step_ = 0;
    std::vector<double> m_;
    std::vector<double> v_;
};

std::uint64_t fnv1a(std::span<const float> values);

}  // namespace synthcount::models
