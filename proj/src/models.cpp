#include "synthcount/models.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "synthcount/errors.hpp"
#include "synthcount/image.hpp"
#include "synthcount/random.hpp"

namespace synthcount::models {

using json = nlohmann::json;

int EncoderConfig::strided_stages() const {
    return std::countr_zero(static_cast<unsigned>(downsample_factor));
}

std::vector<int> EncoderConfig::widths() const {
    std::vector<int> w;
    const int n = depth;
    for (int s = 0; s < n; ++s) {
        w.push_back(s + 1 == n ? feature_dim : std::min(feature_dim, base_width << s));
    }
    return w;
}

void EncoderConfig::validate() const {
    if (feature_dim < 8) throw Error(ErrorCode::InvalidArgument, "feature_dim must be at least 8");
    if (downsample_factor < 2 || !std::has_single_bit(static_cast<unsigned>(downsample_factor))) {
        throw Error(ErrorCode::InvalidArgument, "downsample_factor must be a power of two >= 2");
    }
    if (depth < strided_stages()) {
        throw Error(ErrorCode::InvalidArgument, "depth must be at least log2(downsample_factor)");
    }
    if (base_width < 1) throw Error(ErrorCode::InvalidArgument, "base_width must be positive");
    if (input_size < downsample_factor || input_size % downsample_factor != 0) {
        throw Error(ErrorCode::InvalidArgument,
                    "input_size must be a positive multiple of downsample_factor");
    }
}

Normalization compute_normalization(std::span<const cv::Mat> images, bool center) {
    std::array<double, 3> sum{};
    std::array<double, 3> sq{};
    double n = 0.0;
    for (const auto& image : images) {
        const cv::Scalar own = center ? cv::mean(image) : cv::Scalar::all(0.0);
        for (int y = 0; y < image.rows; ++y) {
            const auto* row = image.ptr<cv::Vec3b>(y);
            for (int x = 0; x < image.cols; ++x) {
                for (int c = 0; c < 3; ++c) {
                    const double v = row[x][c] - own[c];
                    sum[static_cast<size_t>(c)] += v;
                    sq[static_cast<size_t>(c)] += v * v;
                }
            }
        }
        n += static_cast<double>(image.rows) * image.cols;
    }
    Normalization norm;
    if (n == 0.0) return norm;
    for (size_t c = 0; c < 3; ++c) {
        const double mean = sum[c] / n;
        const double var = std::max(sq[c] / n - mean * mean, 1.0);
        norm.mean[c] = static_cast<float>(mean);
        norm.stddev[c] = static_cast<float>(std::sqrt(var));
    }
    return norm;
}

FeatureVector pool(const FeatureMap& z) {
    return z.values.rowwise().mean();
}

namespace {

int conv_out(int n, int stride) { return (n - 1) / stride + 1; }

// 3x3 patches with replicate padding; rows ordered (ky, kx, channel).
Eigen::MatrixXf im2col(const Eigen::MatrixXf& in, int h, int w, int stride) {
    const auto c = in.rows();
    const int oh = conv_out(h, stride);
    const int ow = conv_out(w, stride);
    Eigen::MatrixXf cols(c * 9, static_cast<Eigen::Index>(oh) * ow);
    for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
            const Eigen::Index p = static_cast<Eigen::Index>(oy) * ow + ox;
            for (int ky = 0; ky < 3; ++ky) {
                const int iy = std::clamp(stride * oy + ky - 1, 0, h - 1);
                for (int kx = 0; kx < 3; ++kx) {
                    const int ix = std::clamp(stride * ox + kx - 1, 0, w - 1);
                    cols.block((ky * 3 + kx) * c, p, c, 1) = in.col(static_cast<Eigen::Index>(iy) * w + ix);
                }
            }
        }
    }
    return cols;
}

void col2im(const Eigen::MatrixXf& cols, int h, int w, int stride, Eigen::MatrixXf& out) {
    const auto c = cols.rows() / 9;
    const int oh = conv_out(h, stride);
    const int ow = conv_out(w, stride);
    out.setZero(c, static_cast<Eigen::Index>(h) * w);
    for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
            const Eigen::Index p = static_cast<Eigen::Index>(oy) * ow + ox;
            for (int ky = 0; ky < 3; ++ky) {
                const int iy = std::clamp(stride * oy + ky - 1, 0, h - 1);
                for (int kx = 0; kx < 3; ++kx) {
                    const int ix = std::clamp(stride * ox + kx - 1, 0, w - 1);
                    out.col(static_cast<Eigen::Index>(iy) * w + ix) += cols.block((ky * 3 + kx) * c, p, c, 1);
                }
            }
        }
    }
}

}  // namespace

Encoder::Encoder(const EncoderConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    int in = 3;
    size_t offset = 0;
    const auto widths = config_.widths();
    for (size_t s = 0; s < widths.size(); ++s) {
        const int out = widths[s];
        const int stride = static_cast<int>(s) < config_.strided_stages() ? 2 : 1;
        Layer layer{in, out, stride, offset, offset + static_cast<size_t>(out) * in * 9};
        offset = layer.bias_offset + static_cast<size_t>(out);
        layers_.push_back(layer);
        in = out;
    }
    params_.assign(offset, 0.0f);
    Rng rng(mix_seed(seed, 0xE9C0DEULL));
    for (const auto& layer : layers_) {
        const double scale = std::sqrt(2.0 / (9.0 * layer.in_channels));
        const size_t n = static_cast<size_t>(layer.out_channels) * layer.in_channels * 9;
        for (size_t i = 0; i < n; ++i) {
            params_[layer.weight_offset + i] = static_cast<float>(rng.normal() * scale);
        }
    }
}

Eigen::MatrixXf Encoder::prepare(const cv::Mat& image) const {
    if (image.empty() || image.type() != CV_8UC3) {
        throw Error(ErrorCode::BadShape, "encoder expects a non-empty 8-bit 3-channel image");
    }
    const int f = config_.downsample_factor;
    if (image.rows % f != 0 || image.cols % f != 0) {
        throw Error(ErrorCode::BadShape, "image " + std::to_string(image.rows) + "x" +
                                             std::to_string(image.cols) +
                                             " is not divisible by " + std::to_string(f));
    }
    const cv::Scalar own = config_.center_inputs ? cv::mean(image) : cv::Scalar::all(0.0);
    std::array<float, 3> shift{};
    for (size_t c = 0; c < 3; ++c) shift[c] = static_cast<float>(own[static_cast<int>(c)]) + norm_.mean[c];
    Eigen::MatrixXf input(3, static_cast<Eigen::Index>(image.rows) * image.cols);
    for (int y = 0; y < image.rows; ++y) {
        const auto* row = image.ptr<cv::Vec3b>(y);
        for (int x = 0; x < image.cols; ++x) {
            const Eigen::Index p = static_cast<Eigen::Index>(y) * image.cols + x;
            for (int c = 0; c < 3; ++c) {
                input(c, p) = (static_cast<float>(row[x][c]) - shift[static_cast<size_t>(c)]) /
                              norm_.stddev[static_cast<size_t>(c)];
            }
        }
    }
    return input;
}

FeatureMap Encoder::encode(const cv::Mat& image) const {
    return forward(prepare(image), image.rows, image.cols);
}

FeatureMap Encoder::forward(const Eigen::MatrixXf& input, int height, int width,
                            EncoderTrace* trace) const {
    if (input.rows() != 3 || input.cols() != static_cast<Eigen::Index>(height) * width) {
        throw Error(ErrorCode::BadShape, "input tensor does not match its stated dimensions");
    }
    if (trace) *trace = EncoderTrace{};
    Eigen::MatrixXf act = input;
    int h = height;
    int w = width;
    for (const auto& layer : layers_) {
        Eigen::MatrixXf cols = im2col(act, h, w, layer.stride);
        const Eigen::Map<const Eigen::MatrixXf> weight(params_.data() + layer.weight_offset,
                                                       layer.out_channels, layer.in_channels * 9);
        const Eigen::Map<const Eigen::VectorXf> bias(params_.data() + layer.bias_offset,
                                                     layer.out_channels);
        Eigen::MatrixXf out = weight * cols;
        out.colwise() += bias;
        out = out.cwiseMax(0.0f);
        if (trace) {
            trace->in_shapes.push_back({h, w});
            trace->columns.push_back(std::move(cols));
            trace->outputs.push_back(out);
        }
        act = std::move(out);
        h = conv_out(h, layer.stride);
        w = conv_out(w, layer.stride);
    }
    return FeatureMap{h, w, std::move(act)};
}

void Encoder::backward(const EncoderTrace& trace, const Eigen::MatrixXf& grad_map,
                       std::span<float> grad) const {
    if (grad.size() != params_.size()) {
        throw Error(ErrorCode::ShapeMismatch, "gradient buffer size differs from parameters");
    }
    Eigen::MatrixXf upstream = grad_map;
    for (size_t li = layers_.size(); li-- > 0;) {
        const auto& layer = layers_[li];
        const auto& out = trace.outputs[li];
        const auto& cols = trace.columns[li];
        const Eigen::MatrixXf pre_grad =
            upstream.cwiseProduct((out.array() > 0.0f).cast<float>().matrix());
        Eigen::Map<Eigen::MatrixXf> dweight(grad.data() + layer.weight_offset, layer.out_channels,
                                            layer.in_channels * 9);
        Eigen::Map<Eigen::VectorXf> dbias(grad.data() + layer.bias_offset, layer.out_channels);
        dweight.noalias() += pre_grad * cols.transpose();
        dbias += pre_grad.rowwise().sum();
        if (li == 0) break;
        const Eigen::Map<const Eigen::MatrixXf> weight(params_.data() + layer.weight_offset,
                                                       layer.out_channels, layer.in_channels * 9);
        const Eigen::MatrixXf dcols = weight.transpose() * pre_grad;
        const auto [h, w] = trace.in_shapes[li];
        col2im(dcols, h, w, layer.stride, upstream);
    }
}

std::uint64_t Encoder::checksum() const { return fnv1a(params_); }

LinearHead LinearHead::zeros(int dim) { return LinearHead{Eigen::VectorXf::Zero(dim), 0.0f}; }

std::string_view to_string(DensityClass c) noexcept {
    switch (c) {
        case DensityClass::no_crowd: return "no_crowd";
        case DensityClass::sparse: return "sparse";
        case DensityClass::dense: return "dense";
    }
    return "no_crowd";
}

DensityHead DensityHead::zeros(int dim) {
    DensityHead head;
    head.weight = Eigen::Matrix<float, 3, Eigen::Dynamic>::Zero(3, dim);
    return head;
}

DensityClass DensityHead::classify(const FeatureVector& z) const {
    Eigen::Index best = 0;
    logits(z).maxCoeff(&best);
    return static_cast<DensityClass>(best);
}

Eigen::Vector3f softmax(const Eigen::Vector3f& logits) {
    const Eigen::Vector3f e = (logits.array() - logits.maxCoeff()).exp();
    return e / e.sum();
}

double cross_entropy(const Eigen::Vector3f& logits, int label) {
    const double m = logits.maxCoeff();
    double s = 0.0;
    for (int i = 0; i < 3; ++i) s += std::exp(static_cast<double>(logits(i)) - m);
    return -(static_cast<double>(logits(label)) - m - std::log(s));
}

CountingModel CountingModel::create(const EncoderConfig& config, std::uint64_t seed) {
    CountingModel model;
    model.encoder = Encoder(config, seed);
    model.sort_head = LinearHead::zeros(config.feature_dim);
    Rng rng(mix_seed(seed, 0x50127ULL));
    for (Eigen::Index i = 0; i < model.sort_head.weight.size(); ++i) {
        model.sort_head.weight(i) = static_cast<float>(0.01 * rng.normal() / std::sqrt(config.feature_dim));
    }
    model.count_head = LinearHead::zeros(config.feature_dim);
    model.density_head = DensityHead::zeros(config.feature_dim);
    return model;
}

bool CountingModel::has_stage(std::string_view stage) const {
    return std::find(stages.begin(), stages.end(), stage) != stages.end();
}

FeatureMap CountingModel::encode(const cv::Mat& image) const {
    const int s = input_size();
    return encoder.encode(resize_image(image, s, s));
}

double CountingModel::predict_count(const cv::Mat& image) const {
    return count_head(pool(encode(image)));
}

void write_weights(const std::filesystem::path& path, std::span<const float> values) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
    const char magic[4] = {'S', 'C', 'W', '1'};
    out.write(magic, 4);
    const auto n = static_cast<std::uint64_t>(values.size());
    out.write(reinterpret_cast<const char*>(&n), sizeof n);
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(float)));
    if (!out) throw Error(ErrorCode::IoError, "short write to " + path.string());
}

std::vector<float> read_weights(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::IoError, "cannot read " + path.string());
    char magic[4] = {};
    std::uint64_t n = 0;
    in.read(magic, 4);
    in.read(reinterpret_cast<char*>(&n), sizeof n);
    if (!in || std::string_view(magic, 4) != "SCW1") {
        throw Error(ErrorCode::IoError, path.string() + " is not a weight file");
    }
    std::vector<float> values(n);
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(n * sizeof(float)));
    if (!in) throw Error(ErrorCode::IoError, "truncated weight file " + path.string());
    return values;
}

namespace {

std::vector<float> flatten(const LinearHead& head) {
    std::vector<float> v(head.weight.data(), head.weight.data() + head.weight.size());
    v.push_back(head.bias);
    return v;
}

LinearHead unflatten_linear(const std::vector<float>& v, int dim) {
    if (static_cast<int>(v.size()) != dim + 1) {
        throw Error(ErrorCode::IoError, "linear head size does not match feature_dim");
    }
    LinearHead head = LinearHead::zeros(dim);
    for (int i = 0; i < dim; ++i) head.weight(i) = v[static_cast<size_t>(i)];
    head.bias = v.back();
    return head;
}

std::vector<float> flatten(const DensityHead& head) {
    std::vector<float> v(head.weight.data(), head.weight.data() + head.weight.size());
    v.insert(v.end(), head.bias.data(), head.bias.data() + 3);
    return v;
}

DensityHead unflatten_density(const std::vector<float>& v, int dim) {
    if (static_cast<int>(v.size()) != 3 * dim + 3) {
        throw Error(ErrorCode::IoError, "density head size does not match feature_dim");
    }
    DensityHead head = DensityHead::zeros(dim);
    std::copy(v.begin(), v.begin() + 3 * dim, head.weight.data());
    std::copy(v.begin() + 3 * dim, v.end(), head.bias.data());
    return head;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const CountingModel& model) {
    std::filesystem::create_directories(dir);
    const auto& cfg = model.encoder.config();
    const auto& norm = model.encoder.normalization();
    write_weights(dir / "encoder.bin", model.encoder.parameters());
    write_weights(dir / "sort_head.bin", flatten(model.sort_head));
    write_weights(dir / "count_head.bin", flatten(model.count_head));
    write_weights(dir / "density_head.bin", flatten(model.density_head));
    json manifest = {
        {"format", "synthcount-checkpoint/1"},
        {"encoder",
         {{"feature_dim", cfg.feature_dim},
          {"downsample_factor", cfg.downsample_factor},
          {"depth", cfg.depth},
          {"base_width", cfg.base_width},
          {"center_inputs", cfg.center_inputs},
          {"input_size", cfg.input_size},
          {"weights_id", cfg.weights_id}}},
        {"normalization", {{"mean", norm.mean}, {"std", norm.stddev}}},
        {"stages", model.stages},
        {"encoder_checksum", model.encoder.checksum()},
        {"files",
         {{"encoder", "encoder.bin"},
          {"sort_head", "sort_head.bin"},
          {"count_head", "count_head.bin"},
          {"density_head", "density_head.bin"}}},
    };
    if (!model.provenance.empty()) manifest["provenance"] = json::parse(model.provenance);
    std::ofstream out(dir / "checkpoint.json");
    out << manifest.dump(2) << '\n';
    if (!out) throw Error(ErrorCode::IoError, "cannot write checkpoint manifest");
}

CountingModel load_checkpoint(const std::filesystem::path& dir) {
    std::ifstream in(dir / "checkpoint.json");
    if (!in) throw Error(ErrorCode::IoError, "no checkpoint.json in " + dir.string());
    json manifest;
    try {
        manifest = json::parse(in);
    } catch (const json::exception& e) {
        throw Error(ErrorCode::IoError, std::string("corrupt checkpoint manifest: ") + e.what());
    }
    EncoderConfig cfg;
    const auto& enc = manifest.at("encoder");
    cfg.feature_dim = enc.at("feature_dim").get<int>();
    cfg.downsample_factor = enc.at("downsample_factor").get<int>();
    cfg.depth = enc.at("depth").get<int>();
    cfg.base_width = enc.at("base_width").get<int>();
    cfg.center_inputs = enc.at("center_inputs").get<bool>();
    cfg.input_size = enc.at("input_size").get<int>();
    cfg.weights_id = enc.value("weights_id", std::string{});

    CountingModel model;
    model.encoder = Encoder(cfg, 0);
    Normalization norm;
    norm.mean = manifest.at("normalization").at("mean").get<std::array<float, 3>>();
    norm.stddev = manifest.at("normalization").at("std").get<std::array<float, 3>>();
    model.encoder.set_normalization(norm);
    const auto weights = read_weights(dir / "encoder.bin");
    auto params = model.encoder.parameters();
    if (weights.size() != params.size()) {
        throw Error(ErrorCode::IoError, "encoder weights do not match the stored configuration");
    }
    std::copy(weights.begin(), weights.end(), params.begin());
    model.sort_head = unflatten_linear(read_weights(dir / "sort_head.bin"), cfg.feature_dim);
    model.count_head = unflatten_linear(read_weights(dir / "count_head.bin"), cfg.feature_dim);
    model.density_head = unflatten_density(read_weights(dir / "density_head.bin"), cfg.feature_dim);
    model.stages = manifest.value("stages", std::vector<std::string>{});
    if (manifest.contains("provenance")) model.provenance = manifest["provenance"].dump();
    return model;
}

void Adam::step(std::span<float> params, std::span<const float> grads) {
    if (m_.empty()) {
        m_.assign(params.size(), 0.0);
        v_.assign(params.size(), 0.0);
    }
    if (params.size() != grads.size() || params.size() != m_.size()) {
        throw Error(ErrorCode::ShapeMismatch, "optimizer state does not match parameter count");
    }
    ++step_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
    for (size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
        v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g * g;
        const double mhat = m_[i] / c1;
        const double vhat = v_[i] / c2;
        params[i] -= static_cast<float>(lr_ * mhat / (std::sqrt(vhat) + eps_));
    }
}

std::uint64_t fnv1a(std::span<const float> values) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (float f : values) {
        const auto bits = std::bit_cast<std::uint32_t>(f);
        for (int s = 0; s < 32; s += 8) {
            h ^= static_cast<std::uint8_t>(bits >> s);
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

}  // namespace synthcount::models
