#include "synthcount/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <unordered_map>

#include "synthcount/errors.hpp"
#include "synthcount/image.hpp"
#include "synthcount/random.hpp"
#include "synthcount/ranking.hpp"

namespace synthcount::train {

using models::FeatureVector;

void TrainConfig::validate() const {
    if (!(lr_head > 0.0) || !(lr_encoder > 0.0)) {
        throw Error(ErrorCode::InvalidArgument, "learning rates must be positive");
    }
    if (epochs < 1 || probe_epochs < 1 || batch_size < 1) {
        throw Error(ErrorCode::InvalidArgument, "epochs and batch_size must be positive");
    }
    if (lambda_weight < 0.0) throw Error(ErrorCode::InvalidArgument, "lambda must be >= 0");
    if (!(lambda_bb > 0.0)) throw Error(ErrorCode::BadLambda, "lambda_bb must be positive");
}

namespace {

void emit(std::vector<LogRecord>& log, const LogSink& sink, LogRecord record) {
    if (sink) sink(record);
    log.push_back(std::move(record));
}

double cosine_lr(double base, long step, long total) {
    if (total <= 1) return base;
    return base * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / total));
}

bool all_finite(std::span<const float> v) {
    return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
}

// Unique images behind a triplet list, resized to the inference resolution.
struct TripletImages {
    std::vector<cv::Mat> resized;
    std::vector<std::array<size_t, 3>> index;
    std::vector<std::array<int, 3>> ranks;
};

TripletImages collect(std::span<const scene_lab::RankedTriplet> triplets, int size) {
    TripletImages out;
    std::unordered_map<const scene_lab::ImageSample*, size_t> seen;
    for (const auto& t : triplets) {
        std::array<size_t, 3> idx{};
        for (size_t k = 0; k < 3; ++k) {
            const auto* ptr = t.images[k].get();
            if (!ptr) throw Error(ErrorCode::InvalidArgument, "triplet holds a null image");
            auto [it, inserted] = seen.emplace(ptr, out.resized.size());
            if (inserted) out.resized.push_back(resize_image(ptr->image, size, size));
            idx[k] = it->second;
        }
        out.index.push_back(idx);
        out.ranks.push_back(t.ranks);
    }
    return out;
}

struct TripletTerms {
    ranking::SortLoss loss;
    Eigen::Vector3d predictions;
    Eigen::MatrixXd pooled;  // 3 x C
};

TripletTerms triplet_terms(const std::array<const FeatureVector*, 3>& z,
                           const models::LinearHead& head, const std::array<int, 3>& ranks,
                           const TrainConfig& cfg) {
    TripletTerms t;
    t.pooled.resize(3, z[0]->size());
    for (int k = 0; k < 3; ++k) {
        t.pooled.row(k) = z[static_cast<size_t>(k)]->cast<double>().transpose();
        t.predictions(k) = head(*z[static_cast<size_t>(k)]);
    }
    const auto s_y = ranking::label_similarity(ranks);
    const auto s_pred = ranking::pred_similarity(t.predictions);
    const auto s_feat = ranking::feature_similarity(t.pooled);
    t.loss = ranking::sort_loss(s_y, s_pred, s_feat, cfg.lambda_weight, cfg.lambda_bb);
    return t;
}

bool strictly_ordered(const Eigen::Vector3d& p) {
    return (p(0) < p(1) && p(1) < p(2)) || (p(0) > p(1) && p(1) > p(2));
}

std::vector<FeatureVector> pooled_from_inputs(const models::Encoder& encoder,
                                              const std::vector<Eigen::MatrixXf>& inputs,
                                              int size) {
    std::vector<FeatureVector> out;
    out.reserve(inputs.size());
    for (const auto& input : inputs) out.push_back(models::pool(encoder.forward(input, size, size)));
    return out;
}

double mean_triplet_loss(const models::CountingModel& model, const TripletImages& data,
                         const std::vector<Eigen::MatrixXf>& inputs, const TrainConfig& cfg,
                         double* mean_gap = nullptr) {
    const int size = model.input_size();
    const auto pooled = pooled_from_inputs(model.encoder, inputs, size);
    double total = 0.0;
    double gap = 0.0;
    for (size_t t = 0; t < data.index.size(); ++t) {
        const auto& idx = data.index[t];
        const auto terms = triplet_terms({&pooled[idx[0]], &pooled[idx[1]], &pooled[idx[2]]},
                                         model.sort_head, data.ranks[t], cfg);
        total += terms.loss.total;
        gap += terms.predictions(2) - terms.predictions(0);
    }
    const auto n = static_cast<double>(data.index.size());
    if (mean_gap) *mean_gap = gap / n;
    return total / n;
}

models::FloatBuffer head_params(const models::LinearHead& head) {
    models::FloatBuffer p(head.weight.data(), head.weight.data() + head.weight.size());
    p.push_back(head.bias);
    return p;
}

void set_head_params(models::LinearHead& head, std::span<const float> p) {
    std::copy(p.begin(), p.end() - 1, head.weight.data());
    head.bias = p.back();
}

struct Standardizer {
    Eigen::VectorXd mean;
    Eigen::VectorXd scale;

    static Standardizer fit(std::span<const FeatureVector> features) {
        const auto c = features.front().size();
        Standardizer s{Eigen::VectorXd::Zero(c), Eigen::VectorXd::Zero(c)};
        for (const auto& f : features) s.mean += f.cast<double>();
        s.mean /= static_cast<double>(features.size());
        for (const auto& f : features) s.scale += (f.cast<double>() - s.mean).array().square().matrix();
        s.scale = (s.scale / static_cast<double>(features.size())).cwiseSqrt();
        for (Eigen::Index i = 0; i < c; ++i) {
            if (s.scale(i) < 1e-8) s.scale(i) = 1.0;
        }
        return s;
    }

    Eigen::VectorXd apply(const FeatureVector& f) const {
        return (f.cast<double>() - mean).cwiseQuotient(scale);
    }
};

void require_features(std::span<const FeatureVector> features, size_t n_labels) {
    if (features.empty()) throw Error(ErrorCode::ManifestEmpty, "no training rows");
    if (features.size() != n_labels) {
        throw Error(ErrorCode::ShapeMismatch, "feature and label counts differ");
    }
}

void add_stage(models::CountingModel& model, const std::string& stage) {
    if (!model.has_stage(stage)) model.stages.push_back(stage);
}

}  // namespace

double evaluate_sorting_loss(const models::CountingModel& model,
                             std::span<const scene_lab::RankedTriplet> triplets,
                             const TrainConfig& cfg) {
    if (triplets.empty()) throw Error(ErrorCode::ManifestEmpty, "no triplets");
    const auto data = collect(triplets, model.input_size());
    std::vector<Eigen::MatrixXf> inputs;
    for (const auto& img : data.resized) inputs.push_back(model.encoder.prepare(img));
    return mean_triplet_loss(model, data, inputs, cfg);
}

SortingReport pretrain_sorting(models::CountingModel& model,
                               std::span<const scene_lab::RankedTriplet> triplets,
                               const TrainConfig& cfg, const LogSink& sink) {
    cfg.validate();
    if (triplets.empty()) throw Error(ErrorCode::ManifestEmpty, "sorting manifest has no triplets");
    const int size = model.input_size();
    const auto data = collect(triplets, size);
    if (model.stages.empty()) {
        model.encoder.set_normalization(
            models::compute_normalization(data.resized, model.encoder.config().center_inputs));
    }
    std::vector<Eigen::MatrixXf> inputs;
    inputs.reserve(data.resized.size());
    for (const auto& img : data.resized) inputs.push_back(model.encoder.prepare(img));

    SortingReport report;
    report.initial_loss = mean_triplet_loss(model, data, inputs, cfg);
    // Parameters with the lowest full training loss seen at an epoch boundary, the
    // starting point included.
    struct Snapshot {
        double loss;
        models::FloatBuffer encoder;
        models::LinearHead head;
    };
    Snapshot best{report.initial_loss,
                  models::FloatBuffer(model.encoder.parameters().begin(), model.encoder.parameters().end()),
                  model.sort_head};

    Rng rng(mix_seed(cfg.seed, 0x5027ULL));
    models::Adam encoder_opt(cfg.lr_encoder);
    models::Adam head_opt(cfg.lr_head);
    std::vector<size_t> order(data.index.size());
    std::iota(order.begin(), order.end(), size_t{0});
    const auto n_params = model.encoder.parameters().size();
    const auto dim = model.sort_head.weight.size();
    const auto batch = static_cast<size_t>(cfg.batch_size);
    const long total_steps = static_cast<long>(cfg.epochs) * static_cast<long>((order.size() + batch - 1) / batch);
    long step = 0;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        rng.shuffle(order.begin(), order.end());
        double epoch_loss = 0.0;
        int ordered = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
            const size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
            const double inv_batch = 1.0 / static_cast<double>(stop - start);

            std::unordered_map<size_t, size_t> slot;
            std::vector<size_t> images;
            for (size_t b = start; b < stop; ++b) {
                for (size_t id : data.index[order[b]]) {
                    if (slot.emplace(id, images.size()).second) images.push_back(id);
                }
            }
            std::vector<models::EncoderTrace> traces(images.size());
            std::vector<FeatureVector> pooled(images.size());
            int grid = 1;
            for (size_t u = 0; u < images.size(); ++u) {
                const auto map = model.encoder.forward(inputs[images[u]], size, size, &traces[u]);
                grid = map.height * map.width;
                pooled[u] = models::pool(map);
            }

            std::vector<Eigen::VectorXd> grad_z(images.size(), Eigen::VectorXd::Zero(dim));
            Eigen::VectorXd grad_w = Eigen::VectorXd::Zero(dim);
            double grad_b = 0.0;
            const Eigen::VectorXd w = model.sort_head.weight.cast<double>();
            for (size_t b = start; b < stop; ++b) {
                const auto& idx = data.index[order[b]];
                const std::array<size_t, 3> u{slot[idx[0]], slot[idx[1]], slot[idx[2]]};
                const auto terms = triplet_terms({&pooled[u[0]], &pooled[u[1]], &pooled[u[2]]},
                                                 model.sort_head, data.ranks[order[b]], cfg);
                epoch_loss += terms.loss.total;
                ordered += strictly_ordered(terms.predictions) ? 1 : 0;
                const Eigen::VectorXd d_pred =
                    ranking::pred_similarity_backward(terms.predictions, terms.loss.grad_pred) * inv_batch;
                const Eigen::MatrixXd d_feat =
                    ranking::feature_similarity_backward(terms.pooled, terms.loss.grad_feat) * inv_batch;
                for (int k = 0; k < 3; ++k) {
                    grad_z[u[static_cast<size_t>(k)]] += d_feat.row(k).transpose() + d_pred(k) * w;
                    grad_w += d_pred(k) * terms.pooled.row(k).transpose();
                    grad_b += d_pred(k);
                }
            }

            models::FloatBuffer encoder_grad(n_params, 0.0f);
            for (size_t u = 0; u < images.size(); ++u) {
                if (grad_z[u].isZero(0.0)) continue;
                const Eigen::VectorXf g = (grad_z[u] / static_cast<double>(grid)).cast<float>();
                const Eigen::MatrixXf grad_map = g.replicate(1, grid);
                model.encoder.backward(traces[u], grad_map, encoder_grad);
            }
            models::FloatBuffer head_grad(grad_w.data(), grad_w.data() + dim);
            head_grad.push_back(static_cast<float>(grad_b));

            encoder_opt.set_lr(cosine_lr(cfg.lr_encoder, step, total_steps));
            head_opt.set_lr(cosine_lr(cfg.lr_head, step, total_steps));
            ++step;
            encoder_opt.step(model.encoder.parameters(), encoder_grad);
            auto hp = head_params(model.sort_head);
            head_opt.step(hp, head_grad);
            set_head_params(model.sort_head, hp);
            if (!all_finite(model.encoder.parameters()) || !all_finite(hp)) {
                throw Error(ErrorCode::NonFiniteLoss, "non-finite parameters at sorting epoch " +
                                                          std::to_string(epoch));
            }
        }
        const double mean_loss = epoch_loss / static_cast<double>(order.size());
        emit(report.log, sink,
             {"sort", epoch, mean_loss, static_cast<double>(ordered) / static_cast<double>(order.size())});
        const double full = mean_triplet_loss(model, data, inputs, cfg);
        if (!std::isfinite(full)) {
            throw Error(ErrorCode::NonFiniteLoss, "sorting loss is not finite at epoch " + std::to_string(epoch));
        }
        if (full < best.loss) {
            best = Snapshot{full, models::FloatBuffer(model.encoder.parameters().begin(),
                                                     model.encoder.parameters().end()),
                            model.sort_head};
        }
        if (full == 0.0) break;
    }

    std::copy(best.encoder.begin(), best.encoder.end(), model.encoder.parameters().begin());
    model.sort_head = best.head;
    double gap = 0.0;
    report.final_loss = mean_triplet_loss(model, data, inputs, cfg, &gap);
    if (gap < 0.0) {
        model.sort_head.weight = -model.sort_head.weight;
        model.sort_head.bias = -model.sort_head.bias;
        report.flipped = true;
    }
    add_stage(model, "sort");
    return report;
}

std::vector<FeatureVector> pooled_features(const models::CountingModel& model,
                                           std::span<const cv::Mat> images) {
    std::vector<FeatureVector> out;
    out.reserve(images.size());
    for (const auto& image : images) out.push_back(models::pool(model.encode(image)));
    return out;
}

PrototypeTable compute_prototypes(std::span<const int> categories,
                                  std::span<const FeatureVector> features,
                                  std::span<const int> required) {
    if (categories.size() != features.size()) {
        throw Error(ErrorCode::ShapeMismatch, "category and feature counts differ");
    }
    std::map<int, Eigen::VectorXd> sums;
    std::map<int, int> counts;
    for (size_t i = 0; i < categories.size(); ++i) {
        const int c = categories[i];
        if (c == 0) continue;
        auto [it, inserted] = sums.try_emplace(c, Eigen::VectorXd::Zero(features[i].size()));
        it->second += features[i].cast<double>();
        ++counts[c];
    }
    for (int c : required) {
        if (c != 0 && !counts.contains(c)) {
            throw Error(ErrorCode::EmptyCategory, "category " + std::to_string(c) + " has no rows");
        }
    }
    PrototypeTable table;
    for (const auto& [c, sum] : sums) {
        table[c] = Prototype{(sum / counts[c]).cast<float>(), counts[c]};
    }
    return table;
}

double cosine(const FeatureVector& a, const FeatureVector& b) {
    const double na = a.cast<double>().norm();
    const double nb = b.cast<double>().norm();
    if (na == 0.0 || nb == 0.0) return 0.0;
    return a.cast<double>().dot(b.cast<double>()) / (na * nb);
}

FilterReport filter_outliers(std::span<const int> categories,
                             std::span<const FeatureVector> features,
                             const PrototypeTable& prototypes) {
    if (categories.size() != features.size()) {
        throw Error(ErrorCode::ShapeMismatch, "category and feature counts differ");
    }
    FilterReport report;
    report.kept.resize(categories.size(), true);
    for (size_t i = 0; i < categories.size(); ++i) {
        const int c = categories[i];
        bool keep = true;
        if (c != 0) {
            const auto own = prototypes.find(c);
            if (own == prototypes.end()) {
                throw Error(ErrorCode::EmptyCategory, "no prototype for category " + std::to_string(c));
            }
            const double own_sim = cosine(features[i], own->second.mean);
            for (const auto& [other, proto] : prototypes) {
                if (other != c && cosine(features[i], proto.mean) > own_sim) {
                    keep = false;
                    break;
                }
            }
        }
        report.kept[i] = keep;
        auto& tally = report.per_category[c];
        if (keep) {
            ++tally.kept;
            ++report.kept_total;
        } else {
            ++tally.dropped;
            ++report.dropped_total;
        }
    }
    return report;
}

models::LinearHead fit_linear_probe(std::span<const FeatureVector> features,
                                    std::span<const double> targets, const TrainConfig& cfg,
                                    std::vector<LogRecord>* log) {
    cfg.validate();
    require_features(features, targets.size());
    const auto n = features.size();
    const auto dim = features.front().size();
    const auto standard = Standardizer::fit(features);
    std::vector<Eigen::VectorXd> xs;
    xs.reserve(n);
    for (const auto& f : features) xs.push_back(standard.apply(f));
    const double t_mean = std::accumulate(targets.begin(), targets.end(), 0.0) / static_cast<double>(n);
    double t_var = 0.0;
    for (double t : targets) t_var += (t - t_mean) * (t - t_mean);
    const double t_scale = std::max(std::sqrt(t_var / static_cast<double>(n)), 1e-8);

    models::FloatBuffer params(static_cast<size_t>(dim) + 1, 0.0f);
    models::Adam opt(cfg.lr_head);
    Rng rng(mix_seed(cfg.seed, 0xC0427ULL));
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    const auto batch = static_cast<size_t>(cfg.batch_size);
    const long total_steps = static_cast<long>(cfg.probe_epochs) * static_cast<long>((n + batch - 1) / batch);
    long step = 0;
    for (int epoch = 1; epoch <= cfg.probe_epochs; ++epoch) {
        rng.shuffle(order.begin(), order.end());
        double epoch_loss = 0.0;
        for (size_t start = 0; start < n; start += batch) {
            const size_t stop = std::min(n, start + batch);
            models::FloatBuffer grad(params.size(), 0.0f);
            const Eigen::Map<const Eigen::VectorXf> w(params.data(), dim);
            const Eigen::VectorXd wd = w.cast<double>();
            Eigen::VectorXd gw = Eigen::VectorXd::Zero(dim);
            double gb = 0.0;
            for (size_t b = start; b < stop; ++b) {
                const size_t i = order[b];
                const double r = wd.dot(xs[i]) + params.back() - (targets[i] - t_mean) / t_scale;
                epoch_loss += r * r;
                gw += 2.0 * r * xs[i];
                gb += 2.0 * r;
            }
            const double inv = 1.0 / static_cast<double>(stop - start);
            for (Eigen::Index k = 0; k < dim; ++k) grad[static_cast<size_t>(k)] = static_cast<float>(gw(k) * inv);
            grad.back() = static_cast<float>(gb * inv);
            opt.set_lr(cosine_lr(cfg.lr_head, step++, total_steps));
            opt.step(params, grad);
        }
        if (!all_finite(params)) throw Error(ErrorCode::NonFiniteLoss, "count probe diverged");
        if (log && (epoch % 10 == 0 || epoch == cfg.probe_epochs)) {
            log->push_back({"count", epoch, epoch_loss / static_cast<double>(n) * t_scale * t_scale, 0.0});
        }
    }
    models::LinearHead head = models::LinearHead::zeros(static_cast<int>(dim));
    double bias = t_mean + t_scale * params.back();
    for (Eigen::Index k = 0; k < dim; ++k) {
        const double wk = params[static_cast<size_t>(k)] * t_scale / standard.scale(k);
        head.weight(k) = static_cast<float>(wk);
        bias -= wk * standard.mean(k);
    }
    head.bias = static_cast<float>(bias);
    return head;
}

namespace {

double mean_squared_error(const models::LinearHead& head, std::span<const FeatureVector> features,
                          std::span<const double> targets) {
    double s = 0.0;
    for (size_t i = 0; i < features.size(); ++i) {
        const double r = head(features[i]) - targets[i];
        s += r * r;
    }
    return s / static_cast<double>(features.size());
}

// Joint encoder + head training on the count regression.
void finetune_count(models::CountingModel& model, std::span<const cv::Mat> images,
                    std::span<const double> targets, const TrainConfig& cfg,
                    std::vector<LogRecord>& log, const LogSink& sink) {
    const int size = model.input_size();
    std::vector<Eigen::MatrixXf> inputs;
    std::vector<cv::Mat> resized;
    for (const auto& image : images) resized.push_back(resize_image(image, size, size));
    if (model.stages.empty()) {
        model.encoder.set_normalization(
            models::compute_normalization(resized, model.encoder.config().center_inputs));
    }
    for (const auto& image : resized) inputs.push_back(model.encoder.prepare(image));
    const auto initial = pooled_from_inputs(model.encoder, inputs, size);
    const auto standard = Standardizer::fit(initial);
    const auto n = images.size();
    const double t_mean = std::accumulate(targets.begin(), targets.end(), 0.0) / static_cast<double>(n);
    double t_var = 0.0;
    for (double t : targets) t_var += (t - t_mean) * (t - t_mean);
    const double t_scale = std::max(std::sqrt(t_var / static_cast<double>(n)), 1e-8);
    const auto dim = initial.front().size();

    models::FloatBuffer head(static_cast<size_t>(dim) + 1, 0.0f);
    models::Adam head_opt(cfg.lr_head);
    models::Adam encoder_opt(cfg.lr_encoder);
    Rng rng(mix_seed(cfg.seed, 0xF17EULL));
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    const auto n_params = model.encoder.parameters().size();
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        rng.shuffle(order.begin(), order.end());
        double epoch_loss = 0.0;
        for (size_t start = 0; start < n; start += static_cast<size_t>(cfg.batch_size)) {
            const size_t stop = std::min(n, start + static_cast<size_t>(cfg.batch_size));
            const double inv = 1.0 / static_cast<double>(stop - start);
            models::FloatBuffer encoder_grad(n_params, 0.0f);
            models::FloatBuffer head_grad(head.size(), 0.0f);
            const Eigen::Map<const Eigen::VectorXf> w(head.data(), dim);
            const Eigen::VectorXd wd = w.cast<double>();
            for (size_t b = start; b < stop; ++b) {
                const size_t i = order[b];
                models::EncoderTrace trace;
                const auto map = model.encoder.forward(inputs[i], size, size, &trace);
                const Eigen::VectorXd x = standard.apply(models::pool(map));
                const double r = wd.dot(x) + head.back() - (targets[i] - t_mean) / t_scale;
                epoch_loss += r * r;
                const double d = 2.0 * r * inv;
                for (Eigen::Index k = 0; k < dim; ++k) head_grad[static_cast<size_t>(k)] += static_cast<float>(d * x(k));
                head_grad.back() += static_cast<float>(d);
                const int grid = map.height * map.width;
                const Eigen::VectorXf g =
                    (d * wd.cwiseQuotient(standard.scale) / static_cast<double>(grid)).cast<float>();
                model.encoder.backward(trace, g.replicate(1, grid), encoder_grad);
            }
            head_opt.step(head, head_grad);
            encoder_opt.step(model.encoder.parameters(), encoder_grad);
        }
        if (!all_finite(head) || !all_finite(model.encoder.parameters())) {
            throw Error(ErrorCode::NonFiniteLoss, "count fine-tuning diverged at epoch " + std::to_string(epoch));
        }
        emit(log, sink, {"count", epoch, epoch_loss / static_cast<double>(n) * t_scale * t_scale, 0.0});
    }
    models::LinearHead out = models::LinearHead::zeros(static_cast<int>(dim));
    double bias = t_mean + t_scale * head.back();
    for (Eigen::Index k = 0; k < dim; ++k) {
        const double wk = head[static_cast<size_t>(k)] * t_scale / standard.scale(k);
        out.weight(k) = static_cast<float>(wk);
        bias -= wk * standard.mean(k);
    }
    out.bias = static_cast<float>(bias);
    model.count_head = out;
}

}  // namespace

HeadReport train_count(models::CountingModel& model, std::span<const cv::Mat> images,
                       std::span<const double> targets, const TrainConfig& cfg,
                       const LogSink& sink) {
    cfg.validate();
    if (images.empty()) throw Error(ErrorCode::ManifestEmpty, "count manifest has no rows");
    if (images.size() != targets.size()) {
        throw Error(ErrorCode::ShapeMismatch, "image and target counts differ");
    }
    HeadReport report;
    report.encoder_checksum_before = model.encoder.checksum();
    if (cfg.freeze_encoder) {
        const auto features = pooled_features(model, images);
        std::vector<LogRecord> log;
        model.count_head = fit_linear_probe(features, targets, cfg, &log);
        for (auto& r : log) emit(report.log, sink, r);
        report.train_loss = mean_squared_error(model.count_head, features, targets);
    } else {
        finetune_count(model, images, targets, cfg, report.log, sink);
        report.train_loss = mean_squared_error(model.count_head, pooled_features(model, images), targets);
    }
    if (!std::isfinite(report.train_loss)) {
        throw Error(ErrorCode::NonFiniteLoss, "count training produced a non-finite loss");
    }
    report.encoder_checksum_after = model.encoder.checksum();
    add_stage(model, "count");
    return report;
}

namespace {

// groups[i] holds the samples of image i, all labelled labels[i]. A minibatch is batch_size
// images and its loss is the mean over their samples.
models::DensityHead fit_density_groups(std::span<const std::vector<FeatureVector>> groups,
                                       std::span<const int> labels, const TrainConfig& cfg,
                                       std::vector<LogRecord>* log) {
    cfg.validate();
    if (groups.empty()) throw Error(ErrorCode::ManifestEmpty, "no training rows");
    if (groups.size() != labels.size()) {
        throw Error(ErrorCode::ShapeMismatch, "feature and label counts differ");
    }
    for (int l : labels) {
        if (l < 0 || l > 2) throw Error(ErrorCode::InvalidArgument, "density label out of range");
    }
    std::vector<FeatureVector> flat;
    for (const auto& g : groups) {
        if (g.empty()) throw Error(ErrorCode::ShapeMismatch, "image without features");
        flat.insert(flat.end(), g.begin(), g.end());
    }
    const auto n = groups.size();
    const auto dim = flat.front().size();
    const auto standard = Standardizer::fit(flat);
    std::vector<std::vector<Eigen::VectorXd>> xs;
    for (const auto& g : groups) {
        auto& out = xs.emplace_back();
        for (const auto& f : g) out.push_back(standard.apply(f));
    }

    // Row-major 3 x dim weights followed by 3 biases.
    models::FloatBuffer params(static_cast<size_t>(3 * dim + 3), 0.0f);
    models::Adam opt(cfg.lr_head);
    Rng rng(mix_seed(cfg.seed, 0xDE45ULL));
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    const auto batch = static_cast<size_t>(cfg.batch_size);
    const long total_steps = static_cast<long>(cfg.probe_epochs) * static_cast<long>((n + batch - 1) / batch);
    long step = 0;
    auto logits_of = [&](const Eigen::VectorXd& x) {
        Eigen::Vector3d l;
        for (int c = 0; c < 3; ++c) {
            const Eigen::Map<const Eigen::VectorXf> w(params.data() + c * dim, dim);
            l(c) = w.cast<double>().dot(x) + params[static_cast<size_t>(3 * dim + c)];
        }
        return l;
    };
    for (int epoch = 1; epoch <= cfg.probe_epochs; ++epoch) {
        rng.shuffle(order.begin(), order.end());
        double epoch_loss = 0.0;
        long correct = 0;
        for (size_t start = 0; start < n; start += batch) {
            const size_t stop = std::min(n, start + batch);
            size_t samples = 0;
            for (size_t b = start; b < stop; ++b) samples += xs[order[b]].size();
            const double inv = 1.0 / static_cast<double>(samples);
            std::vector<double> grad(params.size(), 0.0);
            for (size_t b = start; b < stop; ++b) {
                const size_t i = order[b];
                for (const auto& x : xs[i]) {
                    const Eigen::Vector3d l = logits_of(x);
                    Eigen::Vector3d prob = (l.array() - l.maxCoeff()).exp();
                    prob /= prob.sum();
                    epoch_loss += -std::log(std::max(prob(labels[i]), 1e-300));
                    Eigen::Index arg = 0;
                    l.maxCoeff(&arg);
                    correct += arg == labels[i] ? 1 : 0;
                    for (int c = 0; c < 3; ++c) {
                        const double d = (prob(c) - (c == labels[i] ? 1.0 : 0.0)) * inv;
                        for (Eigen::Index k = 0; k < dim; ++k) grad[static_cast<size_t>(c * dim + k)] += d * x(k);
                        grad[static_cast<size_t>(3 * dim + c)] += d;
                    }
                }
            }
            models::FloatBuffer g(grad.begin(), grad.end());
            opt.set_lr(cosine_lr(cfg.lr_head, step++, total_steps));
            opt.step(params, g);
        }
        if (!all_finite(params)) throw Error(ErrorCode::NonFiniteLoss, "density probe diverged");
        if (log && (epoch % 10 == 0 || epoch == cfg.probe_epochs)) {
            const auto total = static_cast<double>(flat.size());
            log->push_back({"density", epoch, epoch_loss / total, static_cast<double>(correct) / total});
        }
    }
    models::DensityHead head = models::DensityHead::zeros(static_cast<int>(dim));
    for (int c = 0; c < 3; ++c) {
        double bias = params[static_cast<size_t>(3 * dim + c)];
        for (Eigen::Index k = 0; k < dim; ++k) {
            const double wk = params[static_cast<size_t>(c * dim + k)] / standard.scale(k);
            head.weight(c, k) = static_cast<float>(wk);
            bias -= wk * standard.mean(k);
        }
        head.bias(c) = static_cast<float>(bias);
    }
    return head;
}

std::vector<FeatureVector> cells_of(const models::FeatureMap& z) {
    std::vector<FeatureVector> cells;
    for (Eigen::Index c = 0; c < z.values.cols(); ++c) cells.push_back(z.values.col(c));
    return cells;
}

}  // namespace

models::DensityHead fit_density_probe(std::span<const FeatureVector> features,
                                      std::span<const int> labels, const TrainConfig& cfg,
                                      std::vector<LogRecord>* log) {
    std::vector<std::vector<FeatureVector>> groups;
    for (const auto& f : features) groups.push_back({f});
    return fit_density_groups(groups, labels, cfg, log);
}

models::DensityHead fit_region_density_probe(std::span<const models::FeatureMap> maps,
                                             std::span<const int> labels, const TrainConfig& cfg,
                                             std::vector<LogRecord>* log) {
    std::vector<std::vector<FeatureVector>> groups;
    for (const auto& z : maps) groups.push_back(cells_of(z));
    return fit_density_groups(groups, labels, cfg, log);
}

HeadReport train_density(models::CountingModel& model, std::span<const cv::Mat> images,
                         std::span<const int> labels, const TrainConfig& cfg, const LogSink& sink) {
    cfg.validate();
    if (images.empty()) throw Error(ErrorCode::ManifestEmpty, "density manifest has no rows");
    if (images.size() != labels.size()) {
        throw Error(ErrorCode::ShapeMismatch, "image and label counts differ");
    }
    HeadReport report;
    report.encoder_checksum_before = model.encoder.checksum();
    std::vector<std::vector<FeatureVector>> groups;
    for (const auto& image : images) {
        const auto z = model.encode(image);
        if (cfg.density_regions) {
            groups.push_back(cells_of(z));
        } else {
            groups.push_back({models::pool(z)});
        }
    }
    std::vector<LogRecord> log;
    model.density_head = fit_density_groups(groups, labels, cfg, &log);
    for (auto& r : log) emit(report.log, sink, r);
    double loss = 0.0;
    long correct = 0;
    long total = 0;
    for (size_t i = 0; i < groups.size(); ++i) {
        for (const auto& f : groups[i]) {
            loss += models::cross_entropy(model.density_head.logits(f), labels[i]);
            correct += static_cast<int>(model.density_head.classify(f)) == labels[i] ? 1 : 0;
            ++total;
        }
    }
    report.train_loss = loss / static_cast<double>(total);
    report.train_metric = static_cast<double>(correct) / static_cast<double>(total);
    report.encoder_checksum_after = model.encoder.checksum();
    add_stage(model, "density");
    return report;
}

}  // namespace synthcount::train
