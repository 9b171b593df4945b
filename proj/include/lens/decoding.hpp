#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lens/grammar.hpp"
#include "lens/lstm.hpp"

namespace lens {

// Area under the ROC curve via midranks: P(score_pos > score_neg) +
// 0.5 P(tie), computed exactly by rank statistics. Throws if either class is
// missing.
double auc(std::span<const double> scores, std::span<const int> labels);

// ---------------------------------------------------------------------------
// Linear decoders
// ---------------------------------------------------------------------------

enum class DecoderBackend { Logistic, Ridge };

struct DecoderOptions {
  DecoderBackend backend = DecoderBackend::Logistic;
  std::vector<double> lambda_grid;  // empty -> default_lambda_grid()
  int inner_folds = 4;
  int max_iter = 50;
};

// Logarithmic grid 1e-4..1e3, 8 points.
std::vector<double> default_lambda_grid();

struct LinearDecoder {
  std::vector<double> weights;  // in standardized feature units
  double intercept = 0.0;
  std::vector<double> feat_mean, feat_sd;  // training standardization
  double lambda = 0.0;
  DecoderBackend backend = DecoderBackend::Logistic;

  double score(std::span<const double> x) const;  // decision value
};

// Fit with a fixed regularization strength (features standardized internally).
LinearDecoder fit_decoder(std::span<const double> x, int rows, int cols,
                          std::span<const int> labels, double lambda,
                          DecoderBackend backend, int max_iter = 50);

// L2-regularized linear classifier with the strength selected on inner folds
// by held-out AUC. Warns (via return field) on strong class imbalance.
struct NumberDecoder {
  LinearDecoder decoder;
  double inner_auc = 0.0;
  bool imbalance_warning = false;
};
NumberDecoder train_number_decoder(std::span<const double> x, int rows, int cols,
                                   std::span<const int> labels,
                                   const DecoderOptions& opts, uint64_t seed);

// Plain ridge solve without intercept or standardization:
// w = argmin ||y - Xw||^2 + lambda ||w||^2. Exposed for closed-form checks.
std::vector<double> ridge_raw(std::span<const double> x, int rows, int cols,
                              std::span<const double> y, double lambda);

// ---------------------------------------------------------------------------
// Generalization across time
// ---------------------------------------------------------------------------

// Per-stimulus, per-timestep feature tensor with binary labels.
struct TraceFeatures {
  int n = 0;  // stimuli
  int T = 0;  // timesteps
  int d = 0;  // features
  std::vector<double> x;   // [n][T][d]
  std::vector<int> labels; // 1 = singular subject
  std::vector<std::string> feature_names;

  double* at(int i, int t) { return x.data() + (static_cast<size_t>(i) * T + t) * d; }
  const double* at(int i, int t) const {
    return x.data() + (static_cast<size_t>(i) * T + t) * d;
  }
};

// Which units feed the decoder. Empty `units` means all units minus
// `exclude`.
struct UnitSelection {
  std::string name;
  std::vector<UnitRef> units;
  std::vector<UnitRef> exclude;
};

enum class TraceFeature { CellState, Hidden };

// Extract decoder features from activation traces of template-aligned
// stimuli (all sequences must share one length).
TraceFeatures trace_features(const Model& m, const StimulusSet& set,
                             const UnitSelection& sel, TraceFeature feat);

struct GatSeries {
  std::string name;
  int train_time = 0;
  std::vector<double> mean_auc;  // per test timestep
  std::vector<double> sd_auc;    // sample SD across CV splits
  std::vector<int> fold_of;      // fold assignment per stimulus
};

// Train at train_time within each CV split, test the frozen decoder at every
// timestep on the held-out stimuli; mean +- SD across splits.
GatSeries gat_from_features(const TraceFeatures& tf, int train_time, int folds,
                            const DecoderOptions& opts, uint64_t seed);

GatSeries gat_analysis(const Model& m, const StimulusSet& set,
                       const UnitSelection& sel, TraceFeature feat,
                       int train_time, int folds, const DecoderOptions& opts,
                       uint64_t seed);

// ---------------------------------------------------------------------------
// Short-range number units
// ---------------------------------------------------------------------------

struct SrUnitInfo {
  UnitRef unit;
  double auc_subject = 0.5;  // orientation-corrected single-feature AUC at the subject
  double auc_after_intervener = 0.5;  // same orientation, last pre-verb step
  bool swap = false;     // decodes the last noun, not the subject
  bool flagged = false;  // auc_subject > threshold and swap
};

// Single-unit cell-state decoding at subject time plus the swap check after
// the intervening noun. The stimulus set must have interveners.
std::vector<SrUnitInfo> identify_sr_units(const Model& m, const StimulusSet& set,
                                          double auc_threshold = 0.9);

// ---------------------------------------------------------------------------
// Syntactic-depth regression
// ---------------------------------------------------------------------------

struct DepthRegressionOptions {
  int outer_folds = 5;
  int inner_folds = 4;
  std::vector<double> lambda_grid;  // empty -> default grid
  double outlier_sd = 3.0;
  bool frequency_covariate = true;
  TraceFeature feature = TraceFeature::Hidden;
};

struct DepthRegressionResult {
  std::vector<double> unit_weights;  // standardized units, flat unit order
  double covariate_weight = 0.0;
  bool covariate_used = false;
  double r2_mean = 0.0;
  double r2_sd = 0.0;
  std::vector<double> fold_r2;
  std::vector<double> fold_lambda;
  double r2_covariate_only = 0.0;  // mean over the same folds
  double delta_r2 = 0.0;           // r2_mean - r2_covariate_only
  double final_lambda = 0.0;
  std::vector<UnitRef> outliers;          // |w - mean| > k SD of unit weights
  std::vector<double> outlier_weights;
  std::vector<int> fold_of;  // fold assignment per sample
  std::vector<double> lambda_grid;
};

// Nested-CV ridge from hidden-state activity at annotated positions to
// open-node depth; optional log word-frequency covariate.
// token_log_freq[v] = log(1 + count of vocab id v in the training corpus).
DepthRegressionResult depth_regression(const Model& m, const DepthDataset& ds,
                                       std::span<const double> token_log_freq,
                                       const DepthRegressionOptions& opts,
                                       uint64_t seed);

// Generic nested-CV ridge on a prepared matrix (exposed for oracle tests).
struct RidgeCvResult {
  double r2_mean = 0.0, r2_sd = 0.0;
  std::vector<double> fold_r2, fold_lambda;
  std::vector<double> weights;  // final fit on all data (standardized)
  double intercept = 0.0;
  double final_lambda = 0.0;
  std::vector<int> fold_of;
};
RidgeCvResult nested_cv_ridge(std::span<const double> x, int rows, int cols,
                              std::span<const double> y, int outer_folds,
                              int inner_folds, std::span<const double> grid,
                              uint64_t seed);

void write_gat_json(const std::vector<GatSeries>& series, uint64_t seed,
                    const std::filesystem::path& p);
void write_gat_csv(const std::vector<GatSeries>& series,
                   const std::filesystem::path& p);
void write_depth_regression_json(const DepthRegressionResult& r, int hidden,
                                 uint64_t seed, const std::filesystem::path& p);

}  // namespace lens
