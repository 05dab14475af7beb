#pragma once

// Classification metrics, stratified cross-validation, bootstrap confidence
// intervals and a one-sample t-test against chance.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "skelnet/errors.hpp"
#include "skelnet/pose_data.hpp"
#include "skelnet/training.hpp"

namespace skelnet::eval {

/// Positive class is dystonia (label 1).
struct ConfusionMatrix {
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
  std::size_t total() const { return tp + tn + fp + fn; }
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

inline ConfusionMatrix confusion(std::span<const Label> predictions, std::span<const Label> labels) {
  if (predictions.size() != labels.size())
    throw DataError("confusion: " + std::to_string(predictions.size()) + " predictions for " +
                    std::to_string(labels.size()) + " labels");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool pred = predictions[i] == Label::Dystonia;
    const bool truth = labels[i] == Label::Dystonia;
    if (pred && truth) ++cm.tp;
    else if (!pred && !truth) ++cm.tn;
    else if (pred) ++cm.fp;
    else ++cm.fn;
  }
  return cm;
}

inline constexpr std::array<const char*, 6> kMetricNames{
    "accuracy", "sensitivity", "specificity", "precision", "recall", "f1"};

struct Metrics {
  double accuracy = 0.0, sensitivity = 0.0, specificity = 0.0, precision = 0.0, recall = 0.0,
         f1 = 0.0;
  /// Names of metrics whose denominator was zero (reported as 0).
  std::vector<std::string> undefined;

  std::array<double, 6> values() const {
    return {accuracy, sensitivity, specificity, precision, recall, f1};
  }
};

inline Metrics metrics(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw DataError("metrics: empty confusion matrix");
  Metrics m;
  auto ratio = [&](double num, double den, const char* name) {
    if (den == 0.0) {
      m.undefined.emplace_back(name);
      return 0.0;
    }
    return num / den;
  };
  const double tp = static_cast<double>(cm.tp), tn = static_cast<double>(cm.tn),
               fp = static_cast<double>(cm.fp), fn = static_cast<double>(cm.fn);
  m.accuracy = (tp + tn) / static_cast<double>(cm.total());
  m.sensitivity = ratio(tp, tp + fn, "sensitivity");
  m.recall = m.sensitivity;
  if (tp + fn == 0.0) m.undefined.emplace_back("recall");
  m.specificity = ratio(tn, tn + fp, "specificity");
  m.precision = ratio(tp, tp + fp, "precision");
  m.f1 = ratio(2.0 * m.precision * m.recall, m.precision + m.recall, "f1");
  return m;
}

// ---------------------------------------------------------------------------
// Statistics

/// Empirical percentile with linear interpolation between order statistics.
inline double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw NumericError("percentile of an empty sample");
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * q / 100.0;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

struct BootstrapCI {
  double mean = 0.0;
  double low = 0.0;
  double high = 0.0;
};

/// Percentile bootstrap over the mean of `values`.
inline BootstrapCI bootstrap_ci(std::span<const double> values, std::size_t n_boot,
                                std::uint64_t seed) {
  if (values.size() < 2) throw NumericError("bootstrap_ci needs at least 2 values");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, values.size() - 1);
  std::vector<double> means(n_boot);
  for (auto& m : means) {
    double s = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) s += values[pick(rng)];
    m = s / static_cast<double>(values.size());
  }
  BootstrapCI ci;
  ci.mean = std::accumulate(means.begin(), means.end(), 0.0) / static_cast<double>(n_boot);
  ci.low = percentile(means, 2.5);
  ci.high = percentile(means, 97.5);
  return ci;
}

namespace detail {

// Continued fraction for the incomplete beta function (modified Lentz).
inline double beta_cf(double a, double b, double x) {
  constexpr int kMaxIter = 500;
  constexpr double kEps = 1e-16, kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0, d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace detail

/// Regularized incomplete beta I_x(a, b).
inline double incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::beta_cf(a, b, x) / a;
  return 1.0 - front * detail::beta_cf(b, a, 1.0 - x) / b;
}

/// CDF of Student's t with `df` degrees of freedom.
inline double student_t_cdf(double t, double df) {
  const double tail = 0.5 * incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
  return t >= 0.0 ? 1.0 - tail : tail;
}

struct TTestResult {
  double t = 0.0;
  double p_value = 1.0;
  std::size_t df = 0;
  bool degenerate = false;
};

/// Two-sided one-sample t-test of mean(values) against `baseline`.
inline TTestResult t_test_vs_chance(std::span<const double> values, double baseline = 0.5) {
  if (values.size() < 2) throw NumericError("t-test needs at least 2 values");
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  TTestResult r;
  r.df = values.size() - 1;
  if (sd == 0.0) {
    r.degenerate = true;
    r.p_value = mean == baseline ? 1.0 : 0.0;
    r.t = mean == baseline ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(),
                                                  mean - baseline);
    return r;
  }
  r.t = (mean - baseline) / (sd / std::sqrt(n));
  const double df = static_cast<double>(r.df);
  r.p_value = std::clamp(incomplete_beta(0.5 * df, 0.5, df / (df + r.t * r.t)), 0.0, 1.0);
  return r;
}

// ---------------------------------------------------------------------------
// Cross-validation

/// Fold index per clip. Clips are grouped by class (and by video when
/// requested); groups are shuffled and dealt to the fold currently holding
/// the fewest clips of that class, ties to the lowest fold index.
inline std::vector<std::size_t> stratified_kfold(const std::vector<SkeletonClip>& clips,
                                                 std::size_t k, std::uint64_t seed,
                                                 bool group_by_video = true) {
  if (k < 2) throw ConfigError("k must be at least 2");
  const auto counts = class_counts(clips);
  for (std::size_t c = 0; c < 2; ++c)
    if (counts[c] < k)
      throw DataError("class " + std::to_string(c) + " has " + std::to_string(counts[c]) +
                      " clips, fewer than k=" + std::to_string(k));
  std::vector<std::size_t> fold(clips.size(), 0);
  std::mt19937_64 rng(seed);
  for (Label label : {Label::Chorea, Label::Dystonia}) {
    std::vector<std::vector<std::size_t>> groups;
    std::map<std::string, std::size_t> group_of;
    for (std::size_t i = 0; i < clips.size(); ++i) {
      if (clips[i].label != label) continue;
      if (!group_by_video) {
        groups.push_back({i});
        continue;
      }
      auto [it, inserted] = group_of.try_emplace(clips[i].source.video_id, groups.size());
      if (inserted) groups.emplace_back();
      groups[it->second].push_back(i);
    }
    std::shuffle(groups.begin(), groups.end(), rng);
    std::vector<std::size_t> load(k, 0);
    for (const auto& g : groups) {
      const auto f = static_cast<std::size_t>(
          std::min_element(load.begin(), load.end()) - load.begin());
      for (std::size_t i : g) fold[i] = f;
      load[f] += g.size();
    }
  }
  return fold;
}

struct MetricSummary {
  std::string name;
  std::vector<double> per_fold;
  double mean = 0.0;
  BootstrapCI ci;
  TTestResult t_test;
};

struct FoldResult {
  std::size_t fold = 0;
  ConfusionMatrix confusion;
  Metrics metrics;
  train::TrainHistory history;
};

struct CrossValidationReport {
  std::vector<FoldResult> folds;
  std::vector<MetricSummary> summary;
  std::uint64_t seed = 0;
  std::size_t k = 0;
};

struct CvOptions {
  std::size_t k = 5;
  std::size_t n_boot = 1000;
  std::uint64_t seed = 3407;
  bool group_by_video = true;
  double validation_fraction = 0.1;  // carved from the training folds for early stopping
};

inline MetricSummary summarize_metric(const std::string& name, std::vector<double> values,
                                      std::size_t n_boot, std::uint64_t seed) {
  MetricSummary s;
  s.name = name;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  s.ci = bootstrap_ci(values, n_boot, seed);
  s.t_test = t_test_vs_chance(values, 0.5);
  s.per_fold = std::move(values);
  return s;
}

inline std::vector<MetricSummary> summarize_folds(const std::vector<FoldResult>& folds,
                                                  std::size_t n_boot, std::uint64_t seed) {
  std::vector<MetricSummary> out;
  for (std::size_t m = 0; m < kMetricNames.size(); ++m) {
    std::vector<double> v;
    for (const auto& f : folds) v.push_back(f.metrics.values()[m]);
    out.push_back(summarize_metric(kMetricNames[m], std::move(v), n_boot, seed + m));
  }
  return out;
}

/// Trains on k-1 folds (minority oversampled, a stratified slice held out for
/// early stopping) and evaluates on the held-out fold, for every fold.
inline CrossValidationReport cross_validate(const std::vector<SkeletonClip>& clips,
                                            const net::ModelConfig& model_cfg,
                                            const train::TrainConfig& train_cfg,
                                            const CvOptions& opt,
                                            const train::EpochCallback& on_epoch = {}) {
  const auto fold_of = stratified_kfold(clips, opt.k, opt.seed, opt.group_by_video);
  CrossValidationReport report;
  report.seed = opt.seed;
  report.k = opt.k;
  for (std::size_t f = 0; f < opt.k; ++f) {
    std::vector<SkeletonClip> rest, held;
    for (std::size_t i = 0; i < clips.size(); ++i)
      (fold_of[i] == f ? held : rest).push_back(clips[i]);
    const std::uint64_t fold_seed = opt.seed + f;
    const auto inner = stratified_split(
        rest, {1.0 - opt.validation_fraction, opt.validation_fraction, 0.0}, fold_seed,
        opt.group_by_video);
    auto train_set = bootstrap_oversample(inner.train, fold_seed);
    // Small folds can round the early-stopping slice down to nothing; fall
    // back to monitoring the training clips themselves.
    const auto& monitor = inner.validation.empty() ? inner.train : inner.validation;
    auto val_set = class_counts(monitor)[0] > 0 && class_counts(monitor)[1] > 0
                       ? bootstrap_oversample(monitor, fold_seed + 1)
                       : monitor;
    train::TrainConfig cfg = train_cfg;
    cfg.seed = train_cfg.seed + f;
    auto trained = train::train(model_cfg, cfg, train_set, val_set, on_epoch);
    auto recs = net::predict(trained.params, held);
    std::vector<Label> preds, labels;
    for (std::size_t i = 0; i < held.size(); ++i) {
      preds.push_back(recs[i].predicted);
      labels.push_back(held[i].label);
    }
    FoldResult fr;
    fr.fold = f;
    fr.confusion = confusion(preds, labels);
    fr.metrics = metrics(fr.confusion);
    fr.history = std::move(trained.history);
    report.folds.push_back(std::move(fr));
  }
  report.summary = summarize_folds(report.folds, opt.n_boot, opt.seed);
  return report;
}

// ---------------------------------------------------------------------------
// Reports

inline nlohmann::json to_json(const ConfusionMatrix& cm) {
  return {{"tp", cm.tp}, {"tn", cm.tn}, {"fp", cm.fp}, {"fn", cm.fn}};
}

inline nlohmann::json to_json(const Metrics& m) {
  nlohmann::json j;
  const auto v = m.values();
  for (std::size_t i = 0; i < kMetricNames.size(); ++i) j[kMetricNames[i]] = v[i];
  j["undefined"] = m.undefined;
  return j;
}

inline nlohmann::json to_json(const CrossValidationReport& r) {
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& f : r.folds)
    folds.push_back({{"fold", f.fold},
                     {"confusion", to_json(f.confusion)},
                     {"metrics", to_json(f.metrics)},
                     {"stop_epoch", f.history.stop_epoch},
                     {"best_epoch", f.history.best_epoch},
                     {"stop_reason", f.history.stop_reason}});
  nlohmann::json summary = nlohmann::json::array();
  for (const auto& s : r.summary)
    summary.push_back({{"metric", s.name},
                       {"per_fold", s.per_fold},
                       {"mean", s.mean},
                       {"bootstrap_mean", s.ci.mean},
                       {"ci_95", {s.ci.low, s.ci.high}},
                       {"t", std::isfinite(s.t_test.t) ? nlohmann::json(s.t_test.t) : nlohmann::json()},
                       {"p_value", s.t_test.p_value},
                       {"degenerate", s.t_test.degenerate}});
  return {{"k", r.k}, {"seed", r.seed}, {"folds", folds}, {"summary", summary}};
}

/// Plain-text table: Metric | Value | 95% CI | p-value.
inline std::string format_table(const std::vector<MetricSummary>& summary) {
  std::string out = "Metric        Value   95% CI            p-value\n";
  char buf[128];
  for (const auto& s : summary) {
    std::snprintf(buf, sizeof buf, "%-12s  %.3f   (%.3f, %.3f)    %.3g\n", s.name.c_str(), s.mean,
                  s.ci.low, s.ci.high, s.t_test.p_value);
    out += buf;
  }
  return out;
}

inline std::string format_confusion(const ConfusionMatrix& cm) {
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "                 pred chorea  pred dystonia\n"
                "true chorea      %11zu  %13zu\n"
                "true dystonia    %11zu  %13zu\n",
                cm.tn, cm.fp, cm.fn, cm.tp);
  return buf;
}

}  // namespace skelnet::eval
