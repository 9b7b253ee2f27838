// fairness.hpp - group fairness ratios, aggregated fairness, Pareto front
//
// All metrics are pure functions of (subject_id, group, label, prediction)
// rows. Ratios are directed (numerator group over denominator group) and
// unclipped, so values above 1 are possible. Zero denominators follow an
// explicit sentinel policy instead of silently producing 0 or NaN:
// 0/0 counts as "equally behaved" (ratio 1), x/0 with x != 0 becomes a
// flagged 0.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fairwell/common.hpp"

namespace fairwell {

struct PredictionRow {
  std::string subject_id;
  std::string group;
  int label = 0;
  double score = 0.0;
  int pred = 0;
};

using PredictionSet = std::vector<PredictionRow>;

// ---------------------------------------------------------------------------
// Per-group confusion rates
// ---------------------------------------------------------------------------

struct GroupRates {
  size_t n = 0, positives = 0, negatives = 0;
  size_t tp = 0, fp = 0, tn = 0, fn = 0;
  double base_rate = 0.0;            // P(pred = 1)
  std::optional<double> tpr, fpr;    // undefined when the denominator is 0
  double accuracy = 0.0;
};

inline void validate_predictions(const PredictionSet& preds) {
  if (preds.empty()) throw DataError("predictions: empty set");
  for (const auto& r : preds) {
    if (r.label != 0 && r.label != 1)
      throw DataError("predictions: label of '" + r.subject_id + "' must be 0 or 1");
    if (r.pred != 0 && r.pred != 1)
      throw DataError("predictions: pred of '" + r.subject_id + "' must be 0 or 1");
  }
}

inline std::map<std::string, GroupRates> group_rates(const PredictionSet& preds) {
  validate_predictions(preds);
  std::map<std::string, GroupRates> rates;
  for (const auto& r : preds) {
    GroupRates& g = rates[r.group];
    ++g.n;
    if (r.label == 1) {
      ++g.positives;
      r.pred == 1 ? ++g.tp : ++g.fn;
    } else {
      ++g.negatives;
      r.pred == 1 ? ++g.fp : ++g.tn;
    }
  }
  if (rates.size() != 2)
    throw DataError("group_rates: ratio metrics require exactly two groups, got " +
                    std::to_string(rates.size()));
  for (auto& [name, g] : rates) {
    g.base_rate = double(g.tp + g.fp) / double(g.n);
    if (g.positives > 0) g.tpr = double(g.tp) / double(g.positives);
    if (g.negatives > 0) g.fpr = double(g.fp) / double(g.negatives);
    g.accuracy = double(g.tp + g.tn) / double(g.n);
  }
  return rates;
}

// ---------------------------------------------------------------------------
// Fairness ratios
// ---------------------------------------------------------------------------

struct FairnessRatios {
  double sp = 1.0, eopp = 1.0, eodd = 1.0, eacc = 1.0;
  std::string numerator_group, denominator_group;
  std::vector<std::string> flags;  // metrics that hit the 0-sentinel or an undefined rate
};

namespace detail {

// Directed ratio with the sentinel policy. A missing (undefined) rate is
// treated like a zero denominator/numerator of unknown value: two undefined
// rates compare as equally behaved.
inline double sentinel_ratio(std::optional<double> num, std::optional<double> den,
                             const char* metric, std::vector<std::string>& flags) {
  if (!num.has_value() && !den.has_value()) {
    flags.push_back(std::string(metric) + ":both_undefined");
    return 1.0;
  }
  if (!num.has_value() || !den.has_value()) {
    flags.push_back(std::string(metric) + ":undefined");
    return 0.0;
  }
  if (*den == 0.0) {
    if (*num == 0.0) return 1.0;  // equally behaved
    flags.push_back(std::string(metric) + ":zero_denominator");
    return 0.0;
  }
  return *num / *den;
}

}  // namespace detail

// sp = base-rate ratio, eopp = TPR ratio, eodd = mean of TPR and FPR ratios,
// eacc = accuracy ratio; all numerator-group over denominator-group.
inline FairnessRatios fairness_ratios(const std::map<std::string, GroupRates>& rates,
                                      const std::string& numerator_group) {
  if (rates.size() != 2)
    throw DataError("fairness_ratios: expected exactly two groups");
  if (!rates.count(numerator_group))
    throw DataError("fairness_ratios: numerator group '" + numerator_group +
                    "' not present");
  FairnessRatios out;
  out.numerator_group = numerator_group;
  for (const auto& [name, _] : rates)
    if (name != numerator_group) out.denominator_group = name;
  const GroupRates& num = rates.at(out.numerator_group);
  const GroupRates& den = rates.at(out.denominator_group);

  out.sp = detail::sentinel_ratio(num.base_rate, den.base_rate, "sp", out.flags);
  out.eopp = detail::sentinel_ratio(num.tpr, den.tpr, "eopp", out.flags);
  double tpr_ratio = detail::sentinel_ratio(num.tpr, den.tpr, "eodd_tpr", out.flags);
  double fpr_ratio = detail::sentinel_ratio(num.fpr, den.fpr, "eodd_fpr", out.flags);
  out.eodd = 0.5 * (tpr_ratio + fpr_ratio);
  out.eacc = detail::sentinel_ratio(num.accuracy, den.accuracy, "eacc", out.flags);
  return out;
}

// Group with the fewest rows; ties broken by name.
inline std::string minority_group(const PredictionSet& preds) {
  std::map<std::string, size_t> counts;
  for (const auto& r : preds) ++counts[r.group];
  std::string best;
  size_t best_n = SIZE_MAX;
  for (const auto& [g, n] : counts)
    if (n < best_n || (n == best_n && g < best)) {
      best = g;
      best_n = n;
    }
  return best;
}

// AGG_F = |1 - mean_i |F_i - 1||  over the four fairness ratios.
inline double agg_fairness(double sp, double eopp, double eodd, double eacc) {
  for (double v : {sp, eopp, eodd, eacc})
    if (!is_finite(v)) throw NumericError("agg_fairness: non-finite input");
  double dev =
      (std::fabs(sp - 1.0) + std::fabs(eopp - 1.0) + std::fabs(eodd - 1.0) +
       std::fabs(eacc - 1.0)) /
      4.0;
  return std::fabs(1.0 - dev);
}

// ---------------------------------------------------------------------------
// Performance
// ---------------------------------------------------------------------------

struct Performance {
  double accuracy = 0.0;
  double f1 = 0.0;  // binary F1 on the positive class; 0 when nothing is
                    // predicted or labeled positive correctly
};

inline Performance performance(const PredictionSet& preds) {
  validate_predictions(preds);
  size_t tp = 0, fp = 0, tn = 0, fn = 0;
  for (const auto& r : preds) {
    if (r.label == 1)
      r.pred == 1 ? ++tp : ++fn;
    else
      r.pred == 1 ? ++fp : ++tn;
  }
  Performance p;
  p.accuracy = double(tp + tn) / double(preds.size());
  size_t denom = 2 * tp + fp + fn;
  p.f1 = denom == 0 ? 0.0 : 2.0 * double(tp) / double(denom);
  return p;
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct FairnessReport {
  std::string run_id;
  double sp = 1.0, eopp = 1.0, eodd = 1.0, eacc = 1.0;
  double agg_f = 1.0;
  double accuracy = 0.0, f1 = 0.0;
  std::string numerator_group;
  std::vector<std::string> flags;
};

inline FairnessReport evaluate_predictions(const PredictionSet& preds,
                                           const std::string& numerator = {},
                                           const std::string& run_id = {}) {
  auto rates = group_rates(preds);
  std::string num = numerator.empty() ? minority_group(preds) : numerator;
  FairnessRatios ratios = fairness_ratios(rates, num);
  Performance perf = performance(preds);
  FairnessReport rep;
  rep.run_id = run_id;
  rep.sp = ratios.sp;
  rep.eopp = ratios.eopp;
  rep.eodd = ratios.eodd;
  rep.eacc = ratios.eacc;
  rep.agg_f = agg_fairness(ratios.sp, ratios.eopp, ratios.eodd, ratios.eacc);
  rep.accuracy = perf.accuracy;
  rep.f1 = perf.f1;
  rep.numerator_group = ratios.numerator_group;
  rep.flags = ratios.flags;
  return rep;
}

// ---------------------------------------------------------------------------
// Pareto front over (f1, agg_f)
// ---------------------------------------------------------------------------

struct RunPoint {
  std::string run_id;
  double f1 = 0.0;
  double agg_f = 0.0;
};

// Maximal set under componentwise domination: a run is kept iff no other run
// is >= in both coordinates and > in at least one.
inline std::vector<size_t> pareto_front(const std::vector<RunPoint>& runs) {
  for (const auto& r : runs)
    if (!is_finite(r.f1) || !is_finite(r.agg_f))
      throw NumericError("pareto_front: non-finite coordinates for run '" + r.run_id + "'");
  std::vector<size_t> kept;
  for (size_t i = 0; i < runs.size(); ++i) {
    bool dominated = false;
    for (size_t j = 0; j < runs.size() && !dominated; ++j) {
      if (i == j) continue;
      bool geq = runs[j].f1 >= runs[i].f1 && runs[j].agg_f >= runs[i].agg_f;
      bool gt = runs[j].f1 > runs[i].f1 || runs[j].agg_f > runs[i].agg_f;
      dominated = geq && gt;
    }
    if (!dominated) kept.push_back(i);
  }
  return kept;
}

// ---------------------------------------------------------------------------
// CSV and SVG output
// ---------------------------------------------------------------------------

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::string fairness_csv_header() {
  return "run_id,acc,f1,sp,eopp,eodd,eacc,agg_f,flags,numerator_group";
}

inline std::string fairness_csv_row(const FairnessReport& r) {
  std::ostringstream os;
  os << r.run_id << "," << format_double(r.accuracy) << "," << format_double(r.f1) << ","
     << format_double(r.sp) << "," << format_double(r.eopp) << "," << format_double(r.eodd)
     << "," << format_double(r.eacc) << "," << format_double(r.agg_f) << ",";
  for (size_t i = 0; i < r.flags.size(); ++i) os << (i ? ";" : "") << r.flags[i];
  os << "," << r.numerator_group;
  return os.str();
}

// Scatter of AGG_F against F1 with the Pareto front highlighted.
inline void write_pareto_svg(const std::string& path, const std::vector<RunPoint>& runs,
                             const std::vector<size_t>& front) {
  const double width = 640, height = 480;
  const double ml = 70, mr = 20, mt = 30, mb = 50;
  double fmin = 0.0, fmax = 1.0, amin = 0.0, amax = 1.0;
  for (const auto& r : runs) {
    fmin = std::min(fmin, r.f1);
    fmax = std::max(fmax, r.f1);
    amin = std::min(amin, r.agg_f);
    amax = std::max(amax, r.agg_f);
  }
  if (fmax == fmin) fmax = fmin + 1.0;
  if (amax == amin) amax = amin + 1.0;
  auto sx = [&](double f) { return ml + (f - fmin) / (fmax - fmin) * (width - ml - mr); };
  auto sy = [&](double a) { return height - mb - (a - amin) / (amax - amin) * (height - mt - mb); };

  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
      << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  // axes
  out << "<line x1=\"" << ml << "\" y1=\"" << height - mb << "\" x2=\"" << width - mr
      << "\" y2=\"" << height - mb << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\""
      << height - mb << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 5; ++t) {
    double f = fmin + (fmax - fmin) * t / 5.0;
    double a = amin + (amax - amin) * t / 5.0;
    out << "<text x=\"" << sx(f) << "\" y=\"" << height - mb + 18
        << "\" font-size=\"11\" text-anchor=\"middle\">" << std::fixed
        << std::setprecision(2) << f << "</text>\n";
    out << "<text x=\"" << ml - 8 << "\" y=\"" << sy(a) + 4
        << "\" font-size=\"11\" text-anchor=\"end\">" << std::fixed << std::setprecision(2)
        << a << "</text>\n";
    out.unsetf(std::ios_base::floatfield);
  }
  out << "<text x=\"" << (ml + width - mr) / 2 << "\" y=\"" << height - 12
      << "\" font-size=\"13\" text-anchor=\"middle\">F1</text>\n";
  out << "<text x=\"16\" y=\"" << (mt + height - mb) / 2
      << "\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
      << (mt + height - mb) / 2 << ")\">AGG_F</text>\n";

  // front polyline (sorted by f1)
  std::vector<size_t> sorted_front = front;
  std::sort(sorted_front.begin(), sorted_front.end(),
            [&](size_t a, size_t b) { return runs[a].f1 < runs[b].f1; });
  if (sorted_front.size() > 1) {
    out << "<polyline fill=\"none\" stroke=\"#c0392b\" stroke-dasharray=\"5,3\" points=\"";
    for (size_t i : sorted_front) out << sx(runs[i].f1) << "," << sy(runs[i].agg_f) << " ";
    out << "\"/>\n";
  }
  std::set<size_t> in_front(front.begin(), front.end());
  for (size_t i = 0; i < runs.size(); ++i) {
    bool on = in_front.count(i) > 0;
    out << "<circle cx=\"" << sx(runs[i].f1) << "\" cy=\"" << sy(runs[i].agg_f) << "\" r=\""
        << (on ? 5 : 3.5) << "\" fill=\"" << (on ? "#c0392b" : "#5b7daa")
        << "\" fill-opacity=\"" << (on ? "1.0" : "0.7") << "\"/>\n";
    out << "<text x=\"" << sx(runs[i].f1) + 7 << "\" y=\"" << sy(runs[i].agg_f) - 5
        << "\" font-size=\"9\" fill=\"#444\">" << runs[i].run_id << "</text>\n";
  }
  out << "</svg>\n";
  if (!out) throw DataError("write failure on '" + path + "'");
}

}  // namespace fairwell
