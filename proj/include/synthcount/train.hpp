#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "synthcount/models.hpp"
#include "synthcount/scene_lab.hpp"

namespace synthcount::train {

struct TrainConfig {
    double lr_head = 1e-3;
    double lr_encoder = 1e-4;
    int epochs = 10;
    // Passes over cached features when only a head is trained.
    int probe_epochs = 300;
    int batch_size = 8;
    std::uint64_t seed = 0;
    double lambda_weight = 5.0;
    double lambda_bb = 0.5;
    bool freeze_encoder = true;
    // Fit the density head on every feature-map cell, labelled with its image's class,
    // instead of on pooled image features.
    bool density_regions = true;

    void validate() const;
};

// One line of the training-curve log.
struct LogRecord {
    std::string stage;
    int epoch = 0;
    double loss = 0.0;
    double metric = 0.0;
};

using LogSink = std::function<void(const LogRecord&)>;

struct SortingReport {
    std::vector<LogRecord> log;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    // The sorting loss is reflection-symmetric; the head is flipped when needed so that
    // larger outputs mean more objects.
    bool flipped = false;
};

// Minimises l_y + lambda * l_z averaged over triplet batches. Sets the input
// normalisation from the triplet images when the model has no completed stage. Returns
// the parameters with the lowest full training loss seen at an epoch boundary (the
// initial ones included) and stops once that loss is exactly 0.
SortingReport pretrain_sorting(models::CountingModel& model,
                               std::span<const scene_lab::RankedTriplet> triplets,
                               const TrainConfig& cfg, const LogSink& sink = {});

// Mean sorting loss over triplets, no parameter updates.
double evaluate_sorting_loss(const models::CountingModel& model,
                             std::span<const scene_lab::RankedTriplet> triplets,
                             const TrainConfig& cfg);

std::vector<models::FeatureVector> pooled_features(const models::CountingModel& model,
                                                   std::span<const cv::Mat> images);

struct Prototype {
    models::FeatureVector mean;
    int n = 0;
};

using PrototypeTable = std::map<int, Prototype>;

// Exact per-category means. Category 0 (zero-object rows) is exempt and gets no
// prototype. Throws EmptyCategory when a category listed in `required` has no rows.
PrototypeTable compute_prototypes(std::span<const int> categories,
                                  std::span<const models::FeatureVector> features,
                                  std::span<const int> required = {});

struct CategoryTally {
    int kept = 0;
    int dropped = 0;
};

struct FilterReport {
    std::vector<bool> kept;
    std::map<int, CategoryTally> per_category;
    int kept_total = 0;
    int dropped_total = 0;
};

double cosine(const models::FeatureVector& a, const models::FeatureVector& b);

// Keeps a row iff the cosine similarity to its own category prototype is at least its
// similarity to every other prototype. Category 0 rows are always kept.
FilterReport filter_outliers(std::span<const int> categories,
                             std::span<const models::FeatureVector> features,
                             const PrototypeTable& prototypes);

struct HeadReport {
    std::vector<LogRecord> log;
    double train_loss = 0.0;
    double train_metric = 0.0;
    std::uint64_t encoder_checksum_before = 0;
    std::uint64_t encoder_checksum_after = 0;
};

// Least squares through Adam on standardised features, folded back into a head over
// raw pooled features.
models::LinearHead fit_linear_probe(std::span<const models::FeatureVector> features,
                                    std::span<const double> targets, const TrainConfig& cfg,
                                    std::vector<LogRecord>* log = nullptr);

// Mean squared error of the count head. With cfg.freeze_encoder the encoder is untouched
// (linear probe); otherwise encoder and head are trained jointly.
HeadReport train_count(models::CountingModel& model, std::span<const cv::Mat> images,
                       std::span<const double> targets, const TrainConfig& cfg,
                       const LogSink& sink = {});

models::DensityHead fit_density_probe(std::span<const models::FeatureVector> features,
                                      std::span<const int> labels, const TrainConfig& cfg,
                                      std::vector<LogRecord>* log = nullptr);

// Same objective over the cells of each feature map; a minibatch holds every cell of
// batch_size images.
models::DensityHead fit_region_density_probe(std::span<const models::FeatureMap> maps,
                                             std::span<const int> labels, const TrainConfig& cfg,
                                             std::vector<LogRecord>* log = nullptr);

// Three-class cross-entropy with the encoder frozen, over cells or pooled features as set
// by cfg.density_regions. train_loss and train_metric are over the same samples.
HeadReport train_density(models::CountingModel& model, std::span<const cv::Mat> images,
                         std::span<const int> labels, const TrainConfig& cfg,
                         const LogSink& sink = {});

}  // namespace synthcount::train
