#ifndef ICLSTREAMS_EVALSTATS_HPP
#define ICLSTREAMS_EVALSTATS_HPP

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "iclstreams/errors.hpp"

namespace icls {

// First snapshot index with accuracy strictly above theta.
inline std::optional<int> first_crossing(std::span<const float> series,
                                         double theta) {
  if (series.empty()) throw ContractError("first_crossing: empty series");
  if (theta <= 0.0 || theta >= 1.0)
    throw ContractError("first_crossing: theta must lie in (0,1)");
  for (std::size_t i = 0; i < series.size(); ++i)
    if (static_cast<double>(series[i]) > theta) return static_cast<int>(i);
  return std::nullopt;
}

namespace detail {

// Regularized incomplete beta I_x(a,b) by Lentz's continued fraction.
inline double betacf(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 3e-16;
  constexpr double kFpMin = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kFpMin) d = kFpMin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

inline double incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                          a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
  return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

}  // namespace detail

// Two-sided tail probability of Student's t with dof degrees of freedom.
inline double student_t_two_sided_p(double t, double dof) {
  if (!std::isfinite(t)) return 0.0;
  const double x = dof / (dof + t * t);
  return detail::incomplete_beta(dof / 2.0, 0.5, x);
}

struct WelchResult {
  double t = 0;
  double p = 1;
  double dof = 0;
};

// Welch's unequal-variance t-test, two-sided, with Welch-Satterthwaite
// degrees of freedom. Group sizes must be at least 2. Degenerate case:
// both variances zero -> t=0,p=1 on equal means, else +-inf with p=0.
inline WelchResult welch_t(std::span<const double> group_a,
                           std::span<const double> group_b) {
  const int na = static_cast<int>(group_a.size());
  const int nb = static_cast<int>(group_b.size());
  if (na < 2 || nb < 2)
    throw ContractError("welch_t: each group needs at least 2 samples");
  auto mean_var = [](std::span<const double> g) {
    double mean = 0;
    for (double v : g) mean += v;
    mean /= static_cast<double>(g.size());
    double ss = 0;
    for (double v : g) ss += (v - mean) * (v - mean);
    return std::pair<double, double>(mean, ss / static_cast<double>(g.size() - 1));
  };
  const auto [ma, va] = mean_var(group_a);
  const auto [mb, vb] = mean_var(group_b);
  const double ra = va / na, rb = vb / nb;
  const double se2 = ra + rb;
  WelchResult res;
  if (se2 == 0.0) {
    if (ma == mb) return WelchResult{0.0, 1.0, static_cast<double>(na + nb - 2)};
    res.t = ma > mb ? std::numeric_limits<double>::infinity()
                    : -std::numeric_limits<double>::infinity();
    res.p = 0.0;
    res.dof = static_cast<double>(na + nb - 2);
    return res;
  }
  res.t = (ma - mb) / std::sqrt(se2);
  res.dof = se2 * se2 / (ra * ra / (na - 1) + rb * rb / (nb - 1));
  res.p = student_t_two_sided_p(res.t, res.dof);
  return res;
}

// -----------------------------------------------------------------------
// Aggregation across seeds and variants.
// -----------------------------------------------------------------------

// Accuracy series per seed for one (variant, task) cell.
struct SeriesGroup {
  std::string variant;
  std::string task;
  int snapshot_interval = 0;
  std::vector<std::vector<float>> per_seed_accuracy;
};

struct CrossingStat {
  std::string task;
  std::string variant;
  double theta = 0;
  bool all_crossed = false;
  double mean = 0;    // over seeds, snapshot index of first crossing
  double stddev = 0;  // population standard deviation (divide by n)
  int n = 0;
};

struct TTestRow {
  std::string task;
  double theta = 0;
  std::string variant_a, variant_b;
  double t = 0, p = 1;
};

struct ThresholdReport {
  std::vector<CrossingStat> stats;
  std::vector<TTestRow> ttests;
};

namespace detail {

inline std::optional<std::vector<double>> crossing_indices(
    const SeriesGroup& g, double theta) {
  std::vector<double> out;
  for (const auto& series : g.per_seed_accuracy) {
    auto idx = first_crossing(series, theta);
    if (!idx) return std::nullopt;  // reported only when every seed crossed
    out.push_back(static_cast<double>(*idx));
  }
  return out;
}

}  // namespace detail

// Crossing statistics per (variant, task, theta) plus pairwise Welch
// t-tests between variants that share a task. Groups must share the
// snapshot cadence.
inline ThresholdReport aggregate(const std::vector<SeriesGroup>& groups,
                                 const std::vector<double>& thetas = {0.5, 0.9,
                                                                      0.95}) {
  ThresholdReport report;
  if (groups.empty()) return report;
  for (const auto& g : groups)
    if (g.snapshot_interval != groups.front().snapshot_interval)
      throw ContractError("aggregate: snapshot cadence mismatch (" +
                          std::to_string(g.snapshot_interval) + " vs " +
                          std::to_string(groups.front().snapshot_interval) + ")");
  for (double theta : thetas) {
    for (const auto& g : groups) {
      CrossingStat stat;
      stat.task = g.task;
      stat.variant = g.variant;
      stat.theta = theta;
      stat.n = static_cast<int>(g.per_seed_accuracy.size());
      if (auto idx = detail::crossing_indices(g, theta)) {
        stat.all_crossed = true;
        double mean = 0;
        for (double v : *idx) mean += v;
        mean /= static_cast<double>(idx->size());
        double var = 0;
        for (double v : *idx) var += (v - mean) * (v - mean);
        stat.mean = mean;
        stat.stddev = std::sqrt(var / static_cast<double>(idx->size()));
      }
      report.stats.push_back(stat);
    }
    // Pairwise tests, grouped by task, in input group order.
    for (std::size_t i = 0; i < groups.size(); ++i)
      for (std::size_t j = i + 1; j < groups.size(); ++j) {
        if (groups[i].task != groups[j].task) continue;
        auto a = detail::crossing_indices(groups[i], theta);
        auto b = detail::crossing_indices(groups[j], theta);
        if (!a || !b) continue;
        auto res = welch_t(*a, *b);
        report.ttests.push_back(TTestRow{groups[i].task, theta,
                                         groups[i].variant, groups[j].variant,
                                         res.t, res.p});
      }
  }
  return report;
}

inline void write_threshold_csv(const ThresholdReport& report,
                                const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("write_threshold_csv: cannot open " + path);
  f << "task,variant,theta,mean,std,n\n";
  char buf[64];
  for (const auto& s : report.stats) {
    std::snprintf(buf, sizeof(buf), "%.9g", s.theta);
    f << s.task << ',' << s.variant << ',' << buf << ',';
    if (s.all_crossed) {
      std::snprintf(buf, sizeof(buf), "%.9g", s.mean);
      f << buf << ',';
      std::snprintf(buf, sizeof(buf), "%.9g", s.stddev);
      f << buf << ',';
    } else {
      f << "not-crossed,not-crossed,";
    }
    f << s.n << '\n';
  }
  if (!f) throw IoError("write_threshold_csv: write failed for " + path);
}

inline void write_ttest_csv(const ThresholdReport& report,
                            const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("write_ttest_csv: cannot open " + path);
  f << "task,theta,variantA,variantB,t,p\n";
  char buf[64];
  for (const auto& r : report.ttests) {
    std::snprintf(buf, sizeof(buf), "%.9g", r.theta);
    f << r.task << ',' << buf << ',' << r.variant_a << ',' << r.variant_b << ',';
    std::snprintf(buf, sizeof(buf), "%.9g", r.t);
    f << buf << ',';
    std::snprintf(buf, sizeof(buf), "%.9g", r.p);
    f << buf << '\n';
  }
  if (!f) throw IoError("write_ttest_csv: write failed for " + path);
}

}  // namespace icls

#endif  // ICLSTREAMS_EVALSTATS_HPP
