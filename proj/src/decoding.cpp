#include "lens/decoding.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "lens/rng.hpp"
#include "lens/stats.hpp"
#include "lens/util.hpp"

namespace lens {

using nlohmann::json;

double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size())
    throw std::invalid_argument("auc: size mismatch");
  long n_pos = 0, n_neg = 0;
  for (int l : labels) (l ? n_pos : n_neg)++;
  if (n_pos == 0 || n_neg == 0)
    throw std::invalid_argument("auc: both classes must be present");

  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return scores[a] < scores[b]; });

  double rank_sum_pos = 0.0;
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (size_t k = i; k < j; ++k)
      if (labels[order[k]]) rank_sum_pos += midrank;
    i = j;
  }
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

std::vector<double> default_lambda_grid() {
  // 1e-4 .. 1e3, logarithmic, 8 points
  std::vector<double> grid;
  for (int i = 0; i < 8; ++i) grid.push_back(std::pow(10.0, -4.0 + i));
  return grid;
}

// ---------------------------------------------------------------------------
// Decoder fitting
// ---------------------------------------------------------------------------

namespace {

struct Standardized {
  Eigen::MatrixXd x;
  std::vector<double> mean, sd;
};

Standardized standardize(std::span<const double> x, int rows, int cols) {
  Standardized s;
  s.x.resize(rows, cols);
  s.mean.assign(cols, 0.0);
  s.sd.assign(cols, 0.0);
  for (int c = 0; c < cols; ++c) {
    double m = 0.0;
    for (int r = 0; r < rows; ++r) m += x[static_cast<size_t>(r) * cols + c];
    m /= rows;
    double v = 0.0;
    for (int r = 0; r < rows; ++r) {
      const double d = x[static_cast<size_t>(r) * cols + c] - m;
      v += d * d;
    }
    double sd = std::sqrt(v / rows);
    if (sd == 0.0) sd = 1.0;  // constant feature; keep it harmless
    s.mean[c] = m;
    s.sd[c] = sd;
    for (int r = 0; r < rows; ++r)
      s.x(r, c) = (x[static_cast<size_t>(r) * cols + c] - m) / sd;
  }
  return s;
}

// Ridge on standardized features with unpenalized intercept.
void ridge_std(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double lambda,
               Eigen::VectorXd& w, double& b) {
  const int d = static_cast<int>(X.cols());
  const double ym = y.mean();
  Eigen::VectorXd yc = y.array() - ym;
  Eigen::MatrixXd gram = X.transpose() * X;
  gram.diagonal().array() += lambda;
  w = gram.ldlt().solve(X.transpose() * yc);
  b = ym;  // columns are centered by standardization
  (void)d;
}

// IRLS logistic regression with L2 penalty on the weights (not the
// intercept). Features pre-standardized.
void logistic_std(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                  double lambda, int max_iter, Eigen::VectorXd& w, double& b) {
  const int n = static_cast<int>(X.rows());
  const int d = static_cast<int>(X.cols());
  w = Eigen::VectorXd::Zero(d);
  b = 0.0;
  Eigen::VectorXd eta(n), p(n), s(n), z(n);
  for (int iter = 0; iter < max_iter; ++iter) {
    eta = X * w;
    eta.array() += b;
    p = (1.0 / (1.0 + (-eta.array()).exp()));
    s = p.array() * (1.0 - p.array());
    // guard against exactly-saturated probabilities
    for (int i = 0; i < n; ++i) s[i] = std::max(s[i], 1e-10);
    // Newton step on [w; b]
    Eigen::MatrixXd Xw = X.array().colwise() * s.array();
    Eigen::MatrixXd H(d + 1, d + 1);
    H.topLeftCorner(d, d) = X.transpose() * Xw;
    H.topLeftCorner(d, d).diagonal().array() += lambda;
    Eigen::VectorXd xs = Xw.colwise().sum();
    H.topRightCorner(d, 1) = xs;
    H.bottomLeftCorner(1, d) = xs.transpose();
    H(d, d) = s.sum();
    Eigen::VectorXd g(d + 1);
    g.head(d) = X.transpose() * (p - y) + lambda * w;
    g(d) = (p - y).sum();
    Eigen::VectorXd step = H.ldlt().solve(g);
    w -= step.head(d);
    b -= step(d);
    if (step.lpNorm<Eigen::Infinity>() < 1e-10) break;
  }
}

std::vector<int> stratified_folds(std::span<const int> labels, int k, Rng& rng) {
  std::vector<int> pos, neg;
  for (size_t i = 0; i < labels.size(); ++i)
    (labels[i] ? pos : neg).push_back(static_cast<int>(i));
  rng.shuffle(pos);
  rng.shuffle(neg);
  std::vector<int> fold(labels.size(), 0);
  for (size_t i = 0; i < pos.size(); ++i) fold[pos[i]] = static_cast<int>(i % k);
  for (size_t i = 0; i < neg.size(); ++i) fold[neg[i]] = static_cast<int>(i % k);
  return fold;
}

std::vector<int> plain_folds(size_t n, int k, Rng& rng) {
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  rng.shuffle(idx);
  std::vector<int> fold(n, 0);
  for (size_t i = 0; i < n; ++i) fold[idx[i]] = static_cast<int>(i % k);
  return fold;
}

double r2_score(const Eigen::VectorXd& y, const Eigen::VectorXd& yhat) {
  const double ym = y.mean();
  const double ss_res = (y - yhat).squaredNorm();
  const double ss_tot = (y.array() - ym).square().sum();
  if (ss_tot == 0.0) return ss_res == 0.0 ? 1.0 : 0.0;
  return 1.0 - ss_res / ss_tot;
}

}  // namespace

double LinearDecoder::score(std::span<const double> x) const {
  double acc = intercept;
  for (size_t c = 0; c < weights.size(); ++c)
    acc += weights[c] * ((x[c] - feat_mean[c]) / feat_sd[c]);
  return acc;
}

LinearDecoder fit_decoder(std::span<const double> x, int rows, int cols,
                          std::span<const int> labels, double lambda,
                          DecoderBackend backend, int max_iter) {
  if (rows <= 0 || cols <= 0 || static_cast<int>(labels.size()) != rows)
    throw std::invalid_argument("fit_decoder: bad shapes");
  bool any_var = false;
  for (int c = 0; c < cols && !any_var; ++c) {
    const double first = x[c];
    for (int r = 1; r < rows; ++r)
      if (x[static_cast<size_t>(r) * cols + c] != first) {
        any_var = true;
        break;
      }
  }
  if (!any_var)
    throw std::invalid_argument("fit_decoder: all features are constant");

  Standardized s = standardize(x, rows, cols);
  Eigen::VectorXd y(rows);
  for (int r = 0; r < rows; ++r) y(r) = labels[r] ? 1.0 : 0.0;

  LinearDecoder dec;
  dec.feat_mean = s.mean;
  dec.feat_sd = s.sd;
  dec.lambda = lambda;
  dec.backend = backend;
  Eigen::VectorXd w;
  double b = 0.0;
  if (backend == DecoderBackend::Ridge)
    ridge_std(s.x, y, lambda, w, b);
  else
    logistic_std(s.x, y, lambda, max_iter, w, b);
  dec.weights.assign(w.data(), w.data() + w.size());
  dec.intercept = b;
  return dec;
}

NumberDecoder train_number_decoder(std::span<const double> x, int rows, int cols,
                                   std::span<const int> labels,
                                   const DecoderOptions& opts, uint64_t seed) {
  NumberDecoder out;
  long n_pos = 0, n_neg = 0;
  for (int l : labels) (l ? n_pos : n_neg)++;
  if (n_pos == 0 || n_neg == 0)
    throw std::invalid_argument("train_number_decoder: both classes required");
  out.imbalance_warning =
      n_pos > 4 * n_neg || n_neg > 4 * n_pos;  // warn past 4:1

  std::vector<double> grid =
      opts.lambda_grid.empty() ? default_lambda_grid() : opts.lambda_grid;
  Rng rng = Rng::derive(seed, "number-decoder");
  const int k = std::max(2, opts.inner_folds);
  std::vector<int> fold = stratified_folds(labels, k, rng);

  double best_auc = -1.0;
  double best_lambda = grid.front();
  for (double lambda : grid) {
    std::vector<double> fold_auc;
    for (int f = 0; f < k; ++f) {
      std::vector<double> xtr, xte;
      std::vector<int> ytr, yte;
      for (int r = 0; r < rows; ++r) {
        auto* dst_x = fold[r] == f ? &xte : &xtr;
        auto* dst_y = fold[r] == f ? &yte : &ytr;
        dst_x->insert(dst_x->end(), x.begin() + static_cast<size_t>(r) * cols,
                      x.begin() + static_cast<size_t>(r + 1) * cols);
        dst_y->push_back(labels[r]);
      }
      bool tr_both = false, te_both = false;
      for (size_t i = 1; i < ytr.size(); ++i) tr_both |= ytr[i] != ytr[0];
      for (size_t i = 1; i < yte.size(); ++i) te_both |= yte[i] != yte[0];
      if (!tr_both || !te_both) continue;
      LinearDecoder dec =
          fit_decoder(xtr, static_cast<int>(ytr.size()), cols, ytr, lambda,
                      opts.backend, opts.max_iter);
      std::vector<double> scores(yte.size());
      for (size_t r = 0; r < yte.size(); ++r)
        scores[r] = dec.score(std::span<const double>(
            xte.data() + r * cols, static_cast<size_t>(cols)));
      fold_auc.push_back(auc(scores, yte));
    }
    const double m = fold_auc.empty() ? 0.0 : mean(fold_auc);
    if (m > best_auc) {
      best_auc = m;
      best_lambda = lambda;
    }
  }
  out.inner_auc = best_auc;
  out.decoder = fit_decoder(x, rows, cols, labels, best_lambda, opts.backend,
                            opts.max_iter);
  return out;
}

std::vector<double> ridge_raw(std::span<const double> x, int rows, int cols,
                              std::span<const double> y, double lambda) {
  Eigen::MatrixXd X(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) X(r, c) = x[static_cast<size_t>(r) * cols + c];
  Eigen::VectorXd yv(rows);
  for (int r = 0; r < rows; ++r) yv(r) = y[r];
  Eigen::MatrixXd gram = X.transpose() * X;
  gram.diagonal().array() += lambda;
  Eigen::VectorXd w = gram.ldlt().solve(X.transpose() * yv);
  return std::vector<double>(w.data(), w.data() + w.size());
}

// ---------------------------------------------------------------------------
// GAT
// ---------------------------------------------------------------------------

TraceFeatures trace_features(const Model& m, const StimulusSet& set,
                             const UnitSelection& sel, TraceFeature feat) {
  if (set.stimuli.empty()) throw std::invalid_argument("trace_features: empty set");
  const int T = static_cast<int>(set.stimuli.front().tokens.size());
  for (const auto& st : set.stimuli)
    if (static_cast<int>(st.tokens.size()) != T)
      throw std::invalid_argument(
          "trace_features: stimuli are not length-aligned");

  std::vector<UnitRef> units = sel.units;
  if (units.empty()) {
    for (int l = 0; l < m.dims.layers; ++l)
      for (int u = 0; u < m.dims.hidden; ++u) units.push_back({l, u});
  }
  for (const UnitRef& e : sel.exclude)
    units.erase(std::remove(units.begin(), units.end(), e), units.end());
  if (units.empty()) throw std::invalid_argument("trace_features: no units left");

  std::vector<std::vector<int>> seqs;
  seqs.reserve(set.stimuli.size());
  for (const auto& st : set.stimuli) {
    std::vector<int> ids;
    for (const auto& tok : st.tokens) ids.push_back(m.vocab.id(tok));
    seqs.push_back(std::move(ids));
  }
  auto traces = collect_traces(m, seqs, AblationMask{}, false, true);

  TraceFeatures tf;
  tf.n = static_cast<int>(set.stimuli.size());
  tf.T = T;
  tf.d = static_cast<int>(units.size());
  tf.x.assign(static_cast<size_t>(tf.n) * tf.T * tf.d, 0.0);
  for (const UnitRef& u : units) tf.feature_names.push_back(u.display());
  tf.labels.resize(tf.n);
  for (int i = 0; i < tf.n; ++i) {
    tf.labels[i] =
        set.stimuli[i].condition.subject == Number::Singular ? 1 : 0;
    const ActivationTrace& tr = traces[i];
    for (int t = 0; t < T; ++t) {
      double* row = tf.at(i, t);
      for (size_t c = 0; c < units.size(); ++c) {
        row[c] = feat == TraceFeature::CellState
                     ? tr.c_at(t, units[c].layer, units[c].unit)
                     : tr.h_at(t, units[c].layer, units[c].unit);
      }
    }
  }
  return tf;
}

GatSeries gat_from_features(const TraceFeatures& tf, int train_time, int folds,
                            const DecoderOptions& opts, uint64_t seed) {
  if (train_time < 0 || train_time >= tf.T)
    throw std::invalid_argument("gat: train_time outside the trace");
  GatSeries out;
  out.train_time = train_time;
  Rng rng = Rng::derive(seed, "gat-folds");
  const int k = std::max(2, folds);
  out.fold_of = stratified_folds(tf.labels, k, rng);

  std::vector<std::vector<double>> auc_per_fold(tf.T);
  for (int f = 0; f < k; ++f) {
    std::vector<double> xtr;
    std::vector<int> ytr, test_rows;
    for (int i = 0; i < tf.n; ++i) {
      if (out.fold_of[i] == f) {
        test_rows.push_back(i);
      } else {
        const double* row = tf.at(i, train_time);
        xtr.insert(xtr.end(), row, row + tf.d);
        ytr.push_back(tf.labels[i]);
      }
    }
    bool tr_both = false, te_both = false;
    for (size_t i = 1; i < ytr.size(); ++i) tr_both |= ytr[i] != ytr[0];
    for (size_t i = 1; i < test_rows.size(); ++i)
      te_both |= tf.labels[test_rows[i]] != tf.labels[test_rows[0]];
    if (!tr_both || !te_both || test_rows.empty()) continue;

    NumberDecoder nd = train_number_decoder(
        xtr, static_cast<int>(ytr.size()), tf.d, ytr, opts,
        seed ^ (0x9E37ULL * (f + 1)));
    for (int t = 0; t < tf.T; ++t) {
      std::vector<double> scores;
      std::vector<int> labels;
      for (int i : test_rows) {
        scores.push_back(nd.decoder.score(
            std::span<const double>(tf.at(i, t), static_cast<size_t>(tf.d))));
        labels.push_back(tf.labels[i]);
      }
      auc_per_fold[t].push_back(auc(scores, labels));
    }
  }

  out.mean_auc.resize(tf.T);
  out.sd_auc.resize(tf.T);
  for (int t = 0; t < tf.T; ++t) {
    out.mean_auc[t] = mean(auc_per_fold[t]);
    out.sd_auc[t] = sd_sample(auc_per_fold[t]);
  }
  return out;
}

GatSeries gat_analysis(const Model& m, const StimulusSet& set,
                       const UnitSelection& sel, TraceFeature feat,
                       int train_time, int folds, const DecoderOptions& opts,
                       uint64_t seed) {
  TraceFeatures tf = trace_features(m, set, sel, feat);
  GatSeries series = gat_from_features(tf, train_time, folds, opts, seed);
  series.name = sel.name;
  return series;
}

// ---------------------------------------------------------------------------
// SR units
// ---------------------------------------------------------------------------

std::vector<SrUnitInfo> identify_sr_units(const Model& m, const StimulusSet& set,
                                          double auc_threshold) {
  if (set.stimuli.empty()) throw std::invalid_argument("identify_sr_units: empty set");
  const Stimulus& first = set.stimuli.front();
  if (!first.intervening_pos)
    throw std::invalid_argument("identify_sr_units: set has no intervening noun");
  const int subj_t = first.subject_pos;
  const int probe_t = first.verb_pos - 1;  // last step before the verb

  UnitSelection all;
  all.name = "all-units";
  TraceFeatures tf = trace_features(m, set, all, TraceFeature::CellState);

  std::vector<SrUnitInfo> out;
  const int n_units = m.dims.layers * m.dims.hidden;
  for (int flat = 0; flat < n_units; ++flat) {
    SrUnitInfo info;
    info.unit = unit_from_flat(flat, m.dims.hidden);
    std::vector<double> at_subj(tf.n), at_probe(tf.n);
    for (int i = 0; i < tf.n; ++i) {
      at_subj[i] = tf.at(i, subj_t)[flat];
      at_probe[i] = tf.at(i, probe_t)[flat];
    }
    double a_subj = auc(at_subj, tf.labels);
    const bool flipped = a_subj < 0.5;
    if (flipped) {
      for (double& v : at_subj) v = -v;
      for (double& v : at_probe) v = -v;
      a_subj = auc(at_subj, tf.labels);
    }
    info.auc_subject = a_subj;
    info.auc_after_intervener = auc(at_probe, tf.labels);
    info.swap = info.auc_after_intervener < 0.5;
    info.flagged = info.auc_subject > auc_threshold && info.swap;
    out.push_back(info);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Nested-CV ridge and depth regression
// ---------------------------------------------------------------------------

RidgeCvResult nested_cv_ridge(std::span<const double> x, int rows, int cols,
                              std::span<const double> y, int outer_folds,
                              int inner_folds, std::span<const double> grid,
                              uint64_t seed) {
  if (rows < outer_folds)
    throw std::invalid_argument("nested_cv_ridge: fewer samples than folds");
  RidgeCvResult res;
  Rng rng = Rng::derive(seed, "ridge-cv");
  res.fold_of = plain_folds(rows, outer_folds, rng);

  auto fit_eval = [&](const std::vector<int>& train_rows,
                      const std::vector<int>& test_rows, double lambda,
                      Eigen::VectorXd* w_out, double* b_out) {
    Standardized s = [&] {
      std::vector<double> xt;
      xt.reserve(train_rows.size() * cols);
      for (int r : train_rows)
        xt.insert(xt.end(), x.begin() + static_cast<size_t>(r) * cols,
                  x.begin() + static_cast<size_t>(r + 1) * cols);
      return standardize(xt, static_cast<int>(train_rows.size()), cols);
    }();
    Eigen::VectorXd yt(train_rows.size());
    for (size_t i = 0; i < train_rows.size(); ++i) yt(i) = y[train_rows[i]];
    Eigen::VectorXd w;
    double b;
    ridge_std(s.x, yt, lambda, w, b);
    if (w_out) *w_out = w;
    if (b_out) *b_out = b;
    if (test_rows.empty()) return 0.0;
    Eigen::VectorXd yte(test_rows.size()), yhat(test_rows.size());
    for (size_t i = 0; i < test_rows.size(); ++i) {
      yte(i) = y[test_rows[i]];
      double acc = b;
      for (int c = 0; c < cols; ++c)
        acc += w(c) * ((x[static_cast<size_t>(test_rows[i]) * cols + c] - s.mean[c]) /
                       s.sd[c]);
      yhat(i) = acc;
    }
    return r2_score(yte, yhat);
  };

  auto select_lambda = [&](const std::vector<int>& rows_in, uint64_t sub_seed) {
    Rng sub = Rng::derive(sub_seed, "ridge-inner");
    std::vector<int> inner_fold = plain_folds(rows_in.size(), inner_folds, sub);
    double best = -HUGE_VAL, best_lambda = grid.front();
    for (double lambda : grid) {
      std::vector<double> scores;
      for (int f = 0; f < inner_folds; ++f) {
        std::vector<int> tr, te;
        for (size_t i = 0; i < rows_in.size(); ++i)
          (inner_fold[i] == f ? te : tr).push_back(rows_in[i]);
        if (tr.size() < 2 || te.empty()) continue;
        scores.push_back(fit_eval(tr, te, lambda, nullptr, nullptr));
      }
      const double ms = scores.empty() ? -HUGE_VAL : mean(scores);
      if (ms > best) {
        best = ms;
        best_lambda = lambda;
      }
    }
    return best_lambda;
  };

  for (int f = 0; f < outer_folds; ++f) {
    std::vector<int> tr, te;
    for (int r = 0; r < rows; ++r) (res.fold_of[r] == f ? te : tr).push_back(r);
    if (tr.empty() || te.empty())
      throw std::invalid_argument("nested_cv_ridge: empty fold");
    const double lambda = select_lambda(tr, seed + 101 * (f + 1));
    res.fold_lambda.push_back(lambda);
    res.fold_r2.push_back(fit_eval(tr, te, lambda, nullptr, nullptr));
  }
  res.r2_mean = mean(res.fold_r2);
  res.r2_sd = sd_sample(res.fold_r2);

  std::vector<int> all_rows(rows);
  std::iota(all_rows.begin(), all_rows.end(), 0);
  res.final_lambda = select_lambda(all_rows, seed + 977);
  Eigen::VectorXd w;
  double b;
  fit_eval(all_rows, {}, res.final_lambda, &w, &b);
  res.weights.assign(w.data(), w.data() + w.size());
  res.intercept = b;
  return res;
}

DepthRegressionResult depth_regression(const Model& m, const DepthDataset& ds,
                                       std::span<const double> token_log_freq,
                                       const DepthRegressionOptions& opts,
                                       uint64_t seed) {
  // Collect hidden activity at every retained position.
  std::vector<std::vector<int>> seqs;
  std::vector<const DepthSentence*> with_points;
  for (const auto& s : ds.sentences) {
    if (s.retained.empty()) continue;
    std::vector<int> ids;
    for (const auto& tok : s.tokens) ids.push_back(m.vocab.id(tok));
    seqs.push_back(std::move(ids));
    with_points.push_back(&s);
  }
  if (seqs.empty()) throw std::invalid_argument("depth_regression: no retained points");
  auto traces = collect_traces(m, seqs, AblationMask{}, false, true);

  const int n_units = m.dims.layers * m.dims.hidden;
  const bool use_cov = opts.frequency_covariate;
  const int cols = n_units + (use_cov ? 1 : 0);

  std::vector<double> x;
  std::vector<double> y;
  std::vector<double> cov_only;
  for (size_t si = 0; si < with_points.size(); ++si) {
    const DepthSentence& s = *with_points[si];
    const ActivationTrace& tr = traces[si];
    for (const DepthPoint& pt : s.retained) {
      const int t = pt.position - 1;  // trace step at which the word is input
      for (int l = 0; l < m.dims.layers; ++l)
        for (int u = 0; u < m.dims.hidden; ++u)
          x.push_back(opts.feature == TraceFeature::Hidden ? tr.h_at(t, l, u)
                                                           : tr.c_at(t, l, u));
      if (use_cov) {
        const int tok = tr.tokens[t];
        const double lf =
            tok < static_cast<int>(token_log_freq.size()) ? token_log_freq[tok] : 0.0;
        x.push_back(lf);
        cov_only.push_back(lf);
      }
      y.push_back(pt.depth);
    }
  }
  const int rows = static_cast<int>(y.size());
  if (rows < opts.outer_folds)
    throw std::invalid_argument("depth_regression: fewer samples than folds");

  std::vector<double> grid =
      opts.lambda_grid.empty() ? default_lambda_grid() : opts.lambda_grid;

  RidgeCvResult cv = nested_cv_ridge(x, rows, cols, y, opts.outer_folds,
                                     opts.inner_folds, grid, seed);

  DepthRegressionResult res;
  res.lambda_grid = grid;
  res.fold_of = cv.fold_of;
  res.fold_r2 = cv.fold_r2;
  res.fold_lambda = cv.fold_lambda;
  res.r2_mean = cv.r2_mean;
  res.r2_sd = cv.r2_sd;
  res.final_lambda = cv.final_lambda;
  res.covariate_used = use_cov;
  res.unit_weights.assign(cv.weights.begin(), cv.weights.begin() + n_units);
  if (use_cov) res.covariate_weight = cv.weights.back();

  if (use_cov) {
    RidgeCvResult cov_cv = nested_cv_ridge(cov_only, rows, 1, y, opts.outer_folds,
                                           opts.inner_folds, grid, seed);
    res.r2_covariate_only = cov_cv.r2_mean;
    res.delta_r2 = res.r2_mean - res.r2_covariate_only;
  } else {
    res.delta_r2 = res.r2_mean;
  }

  const double wm = mean(res.unit_weights);
  const double wsd = sd_pop(res.unit_weights);
  for (int u = 0; u < n_units; ++u) {
    if (wsd > 0.0 && std::abs(res.unit_weights[u] - wm) > opts.outlier_sd * wsd) {
      res.outliers.push_back(unit_from_flat(u, m.dims.hidden));
      res.outlier_weights.push_back(res.unit_weights[u]);
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Output
// ---------------------------------------------------------------------------

void write_gat_json(const std::vector<GatSeries>& series, uint64_t seed,
                    const std::filesystem::path& p) {
  json j;
  j["seed"] = seed;
  json arr = json::array();
  for (const auto& s : series) {
    arr.push_back({{"name", s.name},
                   {"train_time", s.train_time},
                   {"mean_auc", s.mean_auc},
                   {"sd_auc", s.sd_auc},
                   {"fold_of", s.fold_of}});
  }
  j["series"] = arr;
  write_file(p, j.dump(1));
}

void write_gat_csv(const std::vector<GatSeries>& series,
                   const std::filesystem::path& p) {
  std::ostringstream out;
  out << "series,train_time,test_time,mean_auc,sd_auc\n";
  for (const auto& s : series)
    for (size_t t = 0; t < s.mean_auc.size(); ++t)
      out << s.name << ',' << s.train_time << ',' << t << ','
          << fmt_double(s.mean_auc[t]) << ',' << fmt_double(s.sd_auc[t]) << '\n';
  write_file(p, out.str());
}

void write_depth_regression_json(const DepthRegressionResult& r, int hidden,
                                 uint64_t seed, const std::filesystem::path& p) {
  json j;
  j["seed"] = seed;
  j["r2_mean"] = r.r2_mean;
  j["r2_sd"] = r.r2_sd;
  j["fold_r2"] = r.fold_r2;
  j["fold_lambda"] = r.fold_lambda;
  j["final_lambda"] = r.final_lambda;
  j["lambda_grid"] = r.lambda_grid;
  j["covariate_used"] = r.covariate_used;
  j["covariate_weight"] = r.covariate_weight;
  j["r2_covariate_only"] = r.r2_covariate_only;
  j["delta_r2"] = r.delta_r2;
  j["fold_of"] = r.fold_of;
  json weights = json::object();
  for (size_t u = 0; u < r.unit_weights.size(); ++u)
    weights[unit_from_flat(static_cast<int>(u), hidden).display()] =
        r.unit_weights[u];
  j["unit_weights"] = weights;
  json outliers = json::array();
  for (size_t i = 0; i < r.outliers.size(); ++i)
    outliers.push_back({{"unit", r.outliers[i].display()},
                        {"weight", r.outlier_weights[i]}});
  j["outliers"] = outliers;
  write_file(p, j.dump(1));
}

}  // namespace lens
