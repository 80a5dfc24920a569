#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "lcp/common.hpp"
#include "lcp/csv.hpp"
#include "lcp/scenarios.hpp"

namespace lcp {

// One scored sample.  `ttlc` is NaN for lane-keep records; probs follow the
// class order (LK, RLC, LLC).
struct PredictionRecord {
  std::int64_t scenario_id = 0;
  int sample_idx = 0;
  Label label = Label::LK;
  double ttlc = std::numeric_limits<double>::quiet_NaN();
  std::array<double, 3> probs{};
  double ttlc_pred = 0.0;
};

inline Label decide(const PredictionRecord& r) {
  int best = 0;
  for (int k = 1; k < 3; ++k)
    if (r.probs[static_cast<std::size_t>(k)] >
        r.probs[static_cast<std::size_t>(best)])
      best = k;
  return static_cast<Label>(best);
}

inline void validate_record(const PredictionRecord& r) {
  const double sum = r.probs[0] + r.probs[1] + r.probs[2];
  require(std::abs(sum - 1.0) <= 1e-6, ErrorKind::Data,
          "prediction record " + std::to_string(r.scenario_id) + "/" +
              std::to_string(r.sample_idx) + ": probabilities sum to " +
              std::to_string(sum));
  require(r.label == Label::LK || std::isfinite(r.ttlc), ErrorKind::Data,
          "prediction record " + std::to_string(r.scenario_id) + "/" +
              std::to_string(r.sample_idx) +
              ": lane-change record without ttlc");
}

inline constexpr int kRecordSigDigits = 9;

inline void write_records(const std::filesystem::path& path,
                          const std::vector<PredictionRecord>& records) {
  CsvWriter w(path, {"scenario_id", "sample_idx", "label", "ttlc", "p_lk",
                     "p_rlc", "p_llc", "ttlc_pred"});
  std::string num;
  auto sig = [&](double v) -> std::string_view {
    num.clear();
    append_number(num, v, kRecordSigDigits);
    return num;
  };
  for (const PredictionRecord& r : records) {
    w.field(r.scenario_id).field(r.sample_idx).field(to_string(r.label));
    if (std::isfinite(r.ttlc))
      w.field(sig(r.ttlc));
    else
      w.blank();
    w.field(sig(r.probs[0])).field(sig(r.probs[1])).field(sig(r.probs[2]));
    w.field(sig(r.ttlc_pred)).end_row();
  }
  w.flush();
}

inline std::vector<PredictionRecord> read_records(
    const std::filesystem::path& path) {
  CsvReader r(path);
  const int c_sc = r.require_column("scenario_id");
  const int c_ix = r.require_column("sample_idx");
  const int c_lb = r.require_column("label");
  const int c_tt = r.require_column("ttlc");
  const int c_lk = r.require_column("p_lk");
  const int c_rl = r.require_column("p_rlc");
  const int c_ll = r.require_column("p_llc");
  const int c_tp = r.require_column("ttlc_pred");
  std::vector<PredictionRecord> out;
  while (r.next_row()) {
    PredictionRecord rec;
    rec.scenario_id = r.as_int(c_sc);
    rec.sample_idx = static_cast<int>(r.as_int(c_ix));
    rec.label = label_from_string(r.cell(c_lb));
    rec.ttlc = r.cell(c_tt).empty()
                   ? std::numeric_limits<double>::quiet_NaN()
                   : r.as_double(c_tt);
    rec.probs = {r.as_double(c_lk), r.as_double(c_rl), r.as_double(c_ll)};
    rec.ttlc_pred = r.as_double(c_tp);
    validate_record(rec);
    out.push_back(rec);
  }
  return out;
}

// Pooled-positive confusion counts.  Both lane-change classes count as
// positive; a lane-change sample predicted as the *other* lane-change class
// is charged to both FN and FP, so TP+FP+FN+TN can exceed the record count.
struct ConfusionCounts {
  long long tp = 0, fp = 0, fn = 0, tn = 0;
};

template <typename DecideFn>
ConfusionCounts confusion_with(const std::vector<PredictionRecord>& records,
                               DecideFn&& rule) {
  ConfusionCounts c;
  for (const PredictionRecord& r : records) {
    const Label truth = r.label;
    const Label dec = rule(r);
    if (truth == Label::LK) {
      dec == Label::LK ? ++c.tn : ++c.fp;
    } else if (dec == Label::LK) {
      ++c.fn;
    } else if (dec == truth) {
      ++c.tp;
    } else {  // cross lane-change error
      ++c.fn;
      ++c.fp;
    }
  }
  return c;
}

inline ConfusionCounts confusion(const std::vector<PredictionRecord>& records) {
  return confusion_with(records, decide);
}

// Accuracy is plain three-class sample accuracy; the other three come from
// the pooled counts.  A zero denominator reports 0 with its flag cleared.
struct PointMetrics {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  bool precision_defined = false;
  bool recall_defined = false;
  bool f1_defined = false;
};

inline PointMetrics prf(const std::vector<PredictionRecord>& records) {
  require(!records.empty(), ErrorKind::Data, "metrics: no records");
  const ConfusionCounts c = confusion(records);
  PointMetrics m;
  long long correct = 0;
  for (const PredictionRecord& r : records) correct += decide(r) == r.label;
  m.accuracy = static_cast<double>(correct) / static_cast<double>(records.size());
  if (c.tp + c.fp > 0) {
    m.precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
    m.precision_defined = true;
  }
  if (c.tp + c.fn > 0) {
    m.recall = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
    m.recall_defined = true;
  }
  if (m.precision_defined && m.recall_defined && m.precision + m.recall > 0) {
    m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
    m.f1_defined = true;
  }
  return m;
}

struct RocPoint {
  double threshold = 0.0;
  double fpr = 0.0;
  double tpr = 0.0;
};

struct RocResult {
  std::vector<RocPoint> points;  // one per threshold, in threshold order
  double auc = 0.0;
};

// Threshold sweep on the pooled positive score P(RLC)+P(LLC).  At each
// threshold a record is positive iff its score reaches the threshold; the
// positive class is the larger of the two lane-change probabilities (RLC on
// a tie).  AUC is the trapezoid integral over the sorted (FPR, TPR) points.
inline RocResult roc_auc(const std::vector<PredictionRecord>& records,
                         int n_thresholds = 1001) {
  require(!records.empty(), ErrorKind::Data, "roc: no records");
  require(n_thresholds >= 2, ErrorKind::Config, "roc: need at least 2 thresholds");
  RocResult out;
  out.points.reserve(static_cast<std::size_t>(n_thresholds));
  for (int i = 0; i < n_thresholds; ++i) {
    const double t =
        static_cast<double>(i) / static_cast<double>(n_thresholds - 1);
    const ConfusionCounts c =
        confusion_with(records, [t](const PredictionRecord& r) {
          if (r.probs[1] + r.probs[2] >= t)
            return r.probs[2] > r.probs[1] ? Label::LLC : Label::RLC;
          return Label::LK;
        });
    RocPoint p;
    p.threshold = t;
    p.tpr = c.tp + c.fn > 0
                ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn)
                : 0.0;
    p.fpr = c.fp + c.tn > 0
                ? static_cast<double>(c.fp) / static_cast<double>(c.fp + c.tn)
                : 0.0;
    out.points.push_back(p);
  }
  std::vector<std::pair<double, double>> pts;
  pts.reserve(out.points.size());
  for (const RocPoint& p : out.points) pts.emplace_back(p.fpr, p.tpr);
  std::sort(pts.begin(), pts.end());
  for (std::size_t i = 1; i < pts.size(); ++i)
    out.auc += (pts[i].first - pts[i - 1].first) *
               (pts[i].second + pts[i - 1].second) * 0.5;
  return out;
}

struct RecallRow {
  double ttlc = 0.0;
  std::size_t n = 0;
  double recall = 0.0;
};

// Per-ttlc recall under the argmax rule.  Groups are the exact ttlc values
// present in the data; absent values yield no row.
inline std::vector<RecallRow> recall_vs_ttlc(
    const std::vector<PredictionRecord>& records) {
  std::map<double, std::pair<std::size_t, std::size_t>> groups;  // n, correct
  for (const PredictionRecord& r : records) {
    if (r.label == Label::LK) continue;
    auto& g = groups[r.ttlc];
    ++g.first;
    g.second += decide(r) == r.label;
  }
  std::vector<RecallRow> out;
  for (const auto& [ttlc, g] : groups)
    out.push_back({ttlc, g.first,
                   static_cast<double>(g.second) / static_cast<double>(g.first)});
  return out;
}

struct PredictionTimes {
  double tau_first = 0.0;     // mean first-correct horizon (s)
  double tau_constant = 0.0;  // mean stable-correct horizon (s)
  std::size_t n_scenarios = 0;
};

// Earliness per lane-change scenario, averaged.  Samples are ordered by
// decreasing ttlc; tau_first is the ttlc of the earliest correct sample and
// tau_constant the ttlc of the start of the correct suffix.  Scenarios with
// no correct sample contribute 0 to both means.
inline PredictionTimes prediction_times(
    const std::vector<PredictionRecord>& records) {
  std::map<std::int64_t, std::vector<const PredictionRecord*>> scenarios;
  for (const PredictionRecord& r : records)
    if (r.label != Label::LK) scenarios[r.scenario_id].push_back(&r);
  PredictionTimes out;
  if (scenarios.empty()) return out;
  double sum_f = 0.0, sum_c = 0.0;
  for (auto& [id, recs] : scenarios) {
    std::sort(recs.begin(), recs.end(),
              [](const PredictionRecord* a, const PredictionRecord* b) {
                return a->ttlc > b->ttlc;
              });
    double tau_f = 0.0, tau_c = 0.0;
    for (const PredictionRecord* r : recs)
      if (decide(*r) == r->label) {
        tau_f = r->ttlc;  // first hit in decreasing-ttlc order is the max
        break;
      }
    for (auto it = recs.rbegin(); it != recs.rend(); ++it) {
      if (decide(**it) != (*it)->label) break;
      tau_c = (*it)->ttlc;
    }
    sum_f += tau_f;
    sum_c += tau_c;
  }
  out.n_scenarios = scenarios.size();
  out.tau_first = sum_f / static_cast<double>(scenarios.size());
  out.tau_constant = sum_c / static_cast<double>(scenarios.size());
  return out;
}

// Root-mean-square ttlc error over lane-change records.
struct RmseResult {
  double rmse = 0.0;
  std::size_t n = 0;  // 0 leaves rmse meaningless (reported as 0)
};

inline RmseResult ttlc_rmse(const std::vector<PredictionRecord>& records) {
  RmseResult out;
  double sum = 0.0;
  for (const PredictionRecord& r : records) {
    if (r.label == Label::LK) continue;
    const double e = r.ttlc_pred - r.ttlc;
    sum += e * e;
    ++out.n;
  }
  if (out.n > 0) out.rmse = std::sqrt(sum / static_cast<double>(out.n));
  return out;
}

struct BoxStats {
  double ttlc = 0.0;
  std::size_t n = 0;
  double min = 0.0, q1 = 0.0, median = 0.0, q3 = 0.0, max = 0.0;
};

namespace detail {

// Quantile by linear interpolation between order statistics of sorted `v`.
inline double quantile_sorted(const std::vector<double>& v, double q) {
  const double pos = q * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  if (lo + 1 >= v.size()) return v.back();
  const double frac = pos - static_cast<double>(lo);
  return v[lo] + frac * (v[lo + 1] - v[lo]);
}

}  // namespace detail

// Five-number summary of the signed prediction error per exact ttlc value.
inline std::vector<BoxStats> ttlc_error_boxstats(
    const std::vector<PredictionRecord>& records) {
  std::map<double, std::vector<double>> groups;
  for (const PredictionRecord& r : records)
    if (r.label != Label::LK) groups[r.ttlc].push_back(r.ttlc_pred - r.ttlc);
  std::vector<BoxStats> out;
  for (auto& [ttlc, errs] : groups) {
    std::sort(errs.begin(), errs.end());
    BoxStats b;
    b.ttlc = ttlc;
    b.n = errs.size();
    b.min = errs.front();
    b.q1 = detail::quantile_sorted(errs, 0.25);
    b.median = detail::quantile_sorted(errs, 0.5);
    b.q3 = detail::quantile_sorted(errs, 0.75);
    b.max = errs.back();
    out.push_back(b);
  }
  return out;
}

struct MetricsReport {
  std::size_t n_records = 0, n_lane_change_records = 0;
  ConfusionCounts counts;
  PointMetrics point;
  RocResult roc;
  std::vector<RecallRow> recall_by_ttlc;
  PredictionTimes times;
  RmseResult rmse;
  std::vector<BoxStats> box;
};

inline MetricsReport compute_report(
    const std::vector<PredictionRecord>& records) {
  require(!records.empty(), ErrorKind::Data, "report: no records");
  for (const PredictionRecord& r : records) validate_record(r);
  MetricsReport rep;
  rep.n_records = records.size();
  for (const PredictionRecord& r : records)
    rep.n_lane_change_records += r.label != Label::LK;
  rep.counts = confusion(records);
  rep.point = prf(records);
  rep.roc = roc_auc(records);
  rep.recall_by_ttlc = recall_vs_ttlc(records);
  rep.times = prediction_times(records);
  rep.rmse = ttlc_rmse(records);
  rep.box = ttlc_error_boxstats(records);
  return rep;
}

// Emit report.json plus plot-ready companion tables roc.csv,
// recall_ttlc.csv, and box.csv into `out_dir`.
inline void write_report(const MetricsReport& rep,
                         const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  nlohmann::json j;
  j["n_records"] = rep.n_records;
  j["n_lane_change_records"] = rep.n_lane_change_records;
  j["confusion"] = {{"tp", rep.counts.tp},
                    {"fp", rep.counts.fp},
                    {"fn", rep.counts.fn},
                    {"tn", rep.counts.tn}};
  j["accuracy"] = rep.point.accuracy;
  j["precision"] = rep.point.precision;
  j["precision_defined"] = rep.point.precision_defined;
  j["recall"] = rep.point.recall;
  j["recall_defined"] = rep.point.recall_defined;
  j["f1"] = rep.point.f1;
  j["f1_defined"] = rep.point.f1_defined;
  j["auc"] = rep.roc.auc;
  j["tau_first"] = rep.times.tau_first;
  j["tau_constant"] = rep.times.tau_constant;
  j["n_lane_change_scenarios"] = rep.times.n_scenarios;
  j["rmse"] = rep.rmse.rmse;
  j["rmse_n"] = rep.rmse.n;
  {
    std::ofstream out(out_dir / "report.json");
    require(out.good(), ErrorKind::Io,
            "cannot write " + (out_dir / "report.json").string());
    out << j.dump(2) << "\n";
    require(out.good(), ErrorKind::Io,
            "write failed: " + (out_dir / "report.json").string());
  }
  {
    CsvWriter w(out_dir / "roc.csv", {"threshold", "fpr", "tpr"});
    for (const RocPoint& p : rep.roc.points)
      w.field(p.threshold).field(p.fpr).field(p.tpr).end_row();
    w.flush();
  }
  {
    CsvWriter w(out_dir / "recall_ttlc.csv", {"ttlc", "n", "recall"});
    for (const RecallRow& r : rep.recall_by_ttlc)
      w.field(r.ttlc).field(r.n).field(r.recall).end_row();
    w.flush();
  }
  {
    CsvWriter w(out_dir / "box.csv",
                {"ttlc", "n", "min", "q1", "median", "q3", "max"});
    for (const BoxStats& b : rep.box) {
      w.field(b.ttlc).field(b.n).field(b.min).field(b.q1).field(b.median);
      w.field(b.q3).field(b.max).end_row();
    }
    w.flush();
  }
}

}  // namespace lcp
