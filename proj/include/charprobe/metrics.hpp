#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "charprobe/error.hpp"

namespace charprobe {

struct ClassScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;
};

/// Binary classification scores on a 0-100 scale. Index 0 is the negative
/// class, index 1 the positive class.
struct Metrics {
  std::array<ClassScores, 2> per_class{};
  double macro_f1 = 0.0;
  std::size_t n_examples = 0;
};

namespace detail {

inline ClassScores class_scores(std::size_t tp, std::size_t fp, std::size_t fn) {
  ClassScores s;
  s.precision = (tp + fp) ? 100.0 * double(tp) / double(tp + fp) : 0.0;
  s.recall = (tp + fn) ? 100.0 * double(tp) / double(tp + fn) : 0.0;
  s.f1 = (tp + fp + fn) ? 100.0 * 2.0 * double(tp) / double(2 * tp + fp + fn) : 0.0;
  s.support = tp + fn;
  return s;
}

}  // namespace detail

/// Per-class F1 (zero when a class is neither predicted nor present) and
/// their unweighted mean.
inline Metrics macro_f1(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size())
    throw Error(ErrorCode::LengthMismatch, std::to_string(predictions.size()) + " predictions vs " +
                                               std::to_string(labels.size()) + " labels");
  if (labels.empty()) throw Error(ErrorCode::InvalidArgument, "no examples to score");
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    bool p = predictions[i] != 0, y = labels[i] != 0;
    if (p && y) ++tp;
    else if (p && !y) ++fp;
    else if (!p && y) ++fn;
    else ++tn;
  }
  Metrics m;
  m.per_class[1] = detail::class_scores(tp, fp, fn);
  m.per_class[0] = detail::class_scores(tn, fn, fp);
  m.macro_f1 = 0.5 * (m.per_class[0].f1 + m.per_class[1].f1);
  m.n_examples = labels.size();
  return m;
}

struct MulticlassScores {
  double macro_f1 = 0.0;     // mean over labels present in truth or predictions
  double weighted_f1 = 0.0;  // support-weighted mean
  double accuracy = 0.0;
  std::size_t n_examples = 0;
};

inline MulticlassScores multiclass_f1(std::span<const int> predictions, std::span<const int> labels,
                                      int n_classes) {
  if (predictions.size() != labels.size())
    throw Error(ErrorCode::LengthMismatch, "prediction/label count mismatch");
  std::vector<std::size_t> tp(n_classes, 0), fp(n_classes, 0), fn(n_classes, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (predictions[i] == labels[i]) {
      ++tp[labels[i]];
      ++correct;
    } else {
      ++fp[predictions[i]];
      ++fn[labels[i]];
    }
  }
  MulticlassScores s;
  s.n_examples = labels.size();
  if (labels.empty()) return s;
  double macro = 0.0, weighted = 0.0;
  int present = 0;
  for (int c = 0; c < n_classes; ++c) {
    if (tp[c] + fp[c] + fn[c] == 0) continue;
    auto cs = detail::class_scores(tp[c], fp[c], fn[c]);
    macro += cs.f1;
    weighted += cs.f1 * double(cs.support);
    ++present;
  }
  s.macro_f1 = present ? macro / present : 0.0;
  s.weighted_f1 = weighted / double(labels.size());
  s.accuracy = 100.0 * double(correct) / double(labels.size());
  return s;
}

struct OlsResult {
  double slope = 0.0;
  double intercept = 0.0;
  double p_value = 1.0;
  double t_stat = 0.0;
  double slope_stderr = 0.0;
  std::size_t n = 0;
};

/// Simple least-squares line with a two-sided t-test on the slope
/// (n - 2 degrees of freedom).
inline OlsResult ols_fit(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw Error(ErrorCode::LengthMismatch, "xs and ys differ in length");
  const auto n = xs.size();
  if (n < 3) throw Error(ErrorCode::InvalidArgument, "ols_fit needs at least 3 points");
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= double(n);
  my /= double(n);
  double sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    sxy += (xs[i] - mx) * (ys[i] - my);
  }
  if (sxx <= 0.0) throw Error(ErrorCode::DegenerateX, "all x values are equal");
  OlsResult r;
  r.n = n;
  r.slope = sxy / sxx;
  r.intercept = my - r.slope * mx;
  double sse = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double e = ys[i] - (r.intercept + r.slope * xs[i]);
    sse += e * e;
  }
  const double dof = double(n - 2);
  r.slope_stderr = std::sqrt(sse / dof / sxx);
  // A noiseless fit leaves only rounding residue in the residuals.
  if (r.slope_stderr <= 1e-12 * std::max(std::abs(r.slope), 1e-12)) {
    r.t_stat = r.slope == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), r.slope);
    r.p_value = r.slope == 0.0 ? 1.0 : 0.0;
    return r;
  }
  r.t_stat = r.slope / r.slope_stderr;
  boost::math::students_t dist(dof);
  r.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t_stat)));
  return r;
}

}  // namespace charprobe
