#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "lcp/common.hpp"
#include "lcp/csv.hpp"
#include "lcp/dataio.hpp"
#include "lcp/rng.hpp"

namespace lcp {

// Class labels.  The index order is the classifier's output order.
enum class Label { LK = 0, RLC = 1, LLC = 2 };

inline const char* to_string(Label l) {
  switch (l) {
    case Label::LK: return "LK";
    case Label::RLC: return "RLC";
    case Label::LLC: return "LLC";
  }
  return "?";
}

inline Label label_from_string(std::string_view s) {
  if (s == "LK") return Label::LK;
  if (s == "RLC") return Label::RLC;
  if (s == "LLC") return Label::LLC;
  fail(ErrorKind::Schema, "unknown label '" + std::string(s) + "'");
}

// Timing parameters.  t_pw is the prediction window: a lane change is
// announced up to t_pw seconds ahead.  t_obs is the observation history per
// sample.  fps is the working rate; native frames are downsampled to it.
struct ProblemConfig {
  double t_pw = 5.2;
  double t_obs = 2.0;
  double fps = 5.0;

  int n_samples() const { return static_cast<int>(std::llround(t_pw * fps)); }
  int n_obs() const { return static_cast<int>(std::llround(t_obs * fps)); }

  // Native frames per working-rate step.
  int stride(double native_rate) const {
    return static_cast<int>(std::llround(native_rate / fps));
  }

  // Native frames of history a sample chain needs: t_obs + t_pw seconds.
  int lookback(double native_rate) const {
    return (n_samples() + n_obs()) * stride(native_rate);
  }

  void validate(double native_rate) const {
    auto integral = [](double v) {
      return std::abs(v - std::round(v)) < 1e-9 && std::round(v) >= 1.0;
    };
    require(fps > 0, ErrorKind::Config, "fps must be positive");
    require(integral(t_pw * fps), ErrorKind::Config,
            "t_pw*fps must be a positive integer");
    require(integral(t_obs * fps), ErrorKind::Config,
            "t_obs*fps must be a positive integer");
    require(integral(native_rate / fps), ErrorKind::Config,
            "native frame rate must be divisible by fps");
  }
};

struct CrossingEvent {
  int track_id = 0;
  int cross_frame = 0;  // native frame at which the center reaches the marking
  Label direction = Label::RLC;
};

// One prediction instance: classify/regress from the t_obs history that
// ends just before anchor_frame.  ttlc is NaN for LK samples.
struct Sample {
  int track_id = 0;
  int anchor_frame = 0;  // native frame number
  Label label = Label::LK;
  double ttlc = std::numeric_limits<double>::quiet_NaN();
};

struct Scenario {
  long long scenario_id = 0;
  int recording_id = 0;
  Label type = Label::LK;
  int track_id = 0;
  int cross_frame = -1;  // LC only; -1 for LK
  std::vector<Sample> samples;
};

// Native frames observed by a sample: the n_obs working-rate steps before
// the anchor, oldest first.
inline std::vector<int> observation_frames(int anchor_frame,
                                           const ProblemConfig& cfg,
                                           double native_rate) {
  const int stride = cfg.stride(native_rate);
  const int n = cfg.n_obs();
  std::vector<int> out(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j)
    out[static_cast<std::size_t>(j)] = anchor_frame - (n - j) * stride;
  return out;
}

// Detect every frame at which the vehicle center crosses an interior lane
// marking of its carriageway.  The test is purely geometric — the center
// ordinate against each marking — because lane-id columns may jitter at
// boundaries without the center actually crossing.
inline std::vector<CrossingEvent> detect_crossings(const Track& track,
                                                   const RecordingMeta& meta) {
  std::vector<CrossingEvent> events;
  const std::vector<double>& marks = meta.markings(track.side);
  if (marks.size() < 3 || track.states.size() < 2) return events;

  // Cheap prefilter: only markings inside the track's lateral span can be
  // crossed.
  double lo = track.states.front().cy, hi = lo;
  for (const TrackState& s : track.states) {
    lo = std::min(lo, s.cy);
    hi = std::max(hi, s.cy);
  }

  for (std::size_t mi = 1; mi + 1 < marks.size(); ++mi) {
    const double m = marks[mi];
    if (m < lo || m > hi) continue;
    for (std::size_t i = 1; i < track.states.size(); ++i) {
      const double y0 = track.states[i - 1].cy;
      const double y1 = track.states[i].cy;
      const bool down = y0 < m && y1 >= m;  // toward larger y
      const bool up = y0 > m && y1 <= m;
      if (!down && !up) continue;
      // Driver's right is +y on the lower carriageway (travel toward +x)
      // and -y on the upper one (travel toward -x).
      Label dir;
      if (track.side == Side::Lower)
        dir = down ? Label::RLC : Label::LLC;
      else
        dir = down ? Label::LLC : Label::RLC;
      events.push_back({track.id, track.states[i].frame, dir});
    }
  }
  std::sort(events.begin(), events.end(),
            [](const CrossingEvent& a, const CrossingEvent& b) {
              return a.cross_frame < b.cross_frame;
            });
  return events;
}

namespace detail {

// Distance from interval [a,b] to point c (0 when inside).
inline double interval_distance(double a, double b, double c) {
  if (c < a) return a - c;
  if (c > b) return c - b;
  return 0.0;
}

}  // namespace detail

// Extract all LC and LK scenarios of a recording at the working rate.
//
// LC: one scenario per crossing whose track covers the full
// t_obs + t_pw lookback before the crossing; anchors walk back from the
// crossing in working-rate steps, so ttlc over a scenario is exactly
// {t_pw, t_pw - 1/fps, ..., 1/fps} with the nearest-to-cross sample last.
//
// LK: one scenario per track, anchored at the end of a lookback-long window
// chosen maximally distant from any crossing (ties toward the earliest
// window); every anchor must be crossing-free for t_pw ahead.
inline std::vector<Scenario> extract_scenarios(const Recording& rec,
                                               const ProblemConfig& cfg) {
  const double native = rec.meta.frame_rate;
  cfg.validate(native);
  const int stride = cfg.stride(native);
  const int n_samples = cfg.n_samples();
  const int n_obs = cfg.n_obs();
  const int lookback = cfg.lookback(native);

  std::vector<Scenario> out;
  long long seq = 0;
  auto next_id = [&]() {
    return static_cast<long long>(rec.meta.id) * 100000 + seq++;
  };

  for (const Track& track : rec.tracks) {
    const std::vector<CrossingEvent> crossings =
        detect_crossings(track, rec.meta);

    for (const CrossingEvent& ev : crossings) {
      if (ev.cross_frame - lookback < track.first_frame) continue;
      Scenario sc;
      sc.scenario_id = next_id();
      sc.recording_id = rec.meta.id;
      sc.type = ev.direction;
      sc.track_id = track.id;
      sc.cross_frame = ev.cross_frame;
      sc.samples.reserve(static_cast<std::size_t>(n_samples));
      for (int k = n_samples; k >= 1; --k) {
        Sample s;
        s.track_id = track.id;
        s.anchor_frame = ev.cross_frame - k * stride;
        s.label = ev.direction;
        s.ttlc = static_cast<double>(ev.cross_frame - s.anchor_frame) / native;
        sc.samples.push_back(s);
      }
      out.push_back(std::move(sc));
    }

    // LK window search.
    if (track.last_frame() - track.first_frame < lookback) continue;
    const int lookahead = n_samples * stride;  // t_pw in native frames
    auto anchor_ok = [&](int t0) {
      for (const CrossingEvent& ev : crossings)
        if (ev.cross_frame >= t0 && ev.cross_frame <= t0 + lookahead)
          return false;
      return true;
    };
    auto window_ok = [&](int w0) {
      for (int m = 0; m < n_samples; ++m)
        if (!anchor_ok(w0 + lookback - m * stride)) return false;
      return true;
    };
    int best_w0 = -1;
    double best_dist = -1.0;
    for (int w0 = track.first_frame; w0 + lookback <= track.last_frame();
         ++w0) {
      if (!window_ok(w0)) continue;
      double d = std::numeric_limits<double>::infinity();
      for (const CrossingEvent& ev : crossings)
        d = std::min(d, detail::interval_distance(w0, w0 + lookback,
                                                  ev.cross_frame));
      if (d > best_dist) {
        best_dist = d;
        best_w0 = w0;
      }
    }
    if (best_w0 < 0) continue;
    Scenario sc;
    sc.scenario_id = next_id();
    sc.recording_id = rec.meta.id;
    sc.type = Label::LK;
    sc.track_id = track.id;
    sc.samples.reserve(static_cast<std::size_t>(n_samples));
    const int w_end = best_w0 + lookback;
    for (int m = n_samples - 1; m >= 0; --m) {
      Sample s;
      s.track_id = track.id;
      s.anchor_frame = w_end - m * stride;
      s.label = Label::LK;
      sc.samples.push_back(s);
    }
    out.push_back(std::move(sc));
  }
  return out;
}

// Subsample LK scenarios (seeded) so LK sample count lands on the mean of
// the two LC classes.  LC scenarios pass through untouched.  Input is
// sorted by scenario id first, making the result independent of input order.
inline std::vector<Scenario> balance_dataset(std::vector<Scenario> scenarios,
                                             std::uint64_t seed) {
  std::sort(scenarios.begin(), scenarios.end(),
            [](const Scenario& a, const Scenario& b) {
              return a.scenario_id < b.scenario_id;
            });
  std::size_t n_rlc = 0, n_llc = 0;
  std::vector<long long> lk_ids;
  for (const Scenario& s : scenarios) {
    if (s.type == Label::RLC) ++n_rlc;
    else if (s.type == Label::LLC) ++n_llc;
    else lk_ids.push_back(s.scenario_id);
  }
  require(n_rlc + n_llc > 0, ErrorKind::Data,
          "balance: no lane-change scenarios to balance toward");
  const std::size_t target = static_cast<std::size_t>(
      std::llround((static_cast<double>(n_rlc) + static_cast<double>(n_llc)) /
                   2.0));
  if (lk_ids.size() <= target) return scenarios;

  Rng rng = Rng(seed).split("balance");
  shuffle(lk_ids, rng);
  lk_ids.resize(target);
  std::sort(lk_ids.begin(), lk_ids.end());

  std::vector<Scenario> out;
  out.reserve(scenarios.size());
  for (Scenario& s : scenarios) {
    if (s.type != Label::LK ||
        std::binary_search(lk_ids.begin(), lk_ids.end(), s.scenario_id))
      out.push_back(std::move(s));
  }
  return out;
}

struct Split {
  std::vector<int> train, val, test;
};

// Partition recording ids 50:5:5 by sorted order: exactly 50/5/5 when 60 ids
// are given, floor-proportional boundaries otherwise.
inline Split split_by_file(std::vector<int> ids) {
  std::sort(ids.begin(), ids.end());
  const std::size_t n = ids.size();
  require(n >= 3, ErrorKind::Data,
          "split: need at least 3 recording ids, got " + std::to_string(n));
  std::size_t b1, b2;
  if (n == 60) {
    b1 = 50;
    b2 = 55;
  } else {
    b1 = n * 50 / 60;
    b2 = n * 55 / 60;
  }
  Split sp;
  sp.train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(b1));
  sp.val.assign(ids.begin() + static_cast<std::ptrdiff_t>(b1),
                ids.begin() + static_cast<std::ptrdiff_t>(b2));
  sp.test.assign(ids.begin() + static_cast<std::ptrdiff_t>(b2), ids.end());
  return sp;
}

// ---------------------------------------------------------------------------
// Manifest: the per-sample CSV handed between CLI stages.

struct ManifestRow {
  long long scenario_id = 0;
  int recording_id = 0;
  int track_id = 0;
  int anchor_frame = 0;
  Label label = Label::LK;
  double ttlc = std::numeric_limits<double>::quiet_NaN();
  std::string split;  // empty when the manifest has no split column
};

inline void write_manifest(const std::filesystem::path& path,
                           const std::vector<Scenario>& scenarios,
                           const std::map<int, std::string>* split_of_rec =
                               nullptr) {
  std::vector<std::string_view> header = {"scenario_id", "recording_id",
                                          "track_id",    "anchor_frame",
                                          "label",       "ttlc"};
  if (split_of_rec) header.push_back("split");
  CsvWriter w(path, header);
  for (const Scenario& sc : scenarios) {
    for (const Sample& s : sc.samples) {
      w.field(sc.scenario_id)
          .field(sc.recording_id)
          .field(s.track_id)
          .field(s.anchor_frame)
          .field(std::string_view(to_string(s.label)));
      if (std::isnan(s.ttlc)) w.blank(); else w.field(s.ttlc);
      if (split_of_rec) {
        auto it = split_of_rec->find(sc.recording_id);
        require(it != split_of_rec->end(), ErrorKind::State,
                "manifest: recording " + std::to_string(sc.recording_id) +
                    " missing from split assignment");
        w.field(std::string_view(it->second));
      }
      w.end_row();
    }
  }
  w.flush();
}

inline std::vector<ManifestRow> read_manifest(
    const std::filesystem::path& path) {
  CsvReader r(path);
  const int c_sc = r.require_column("scenario_id");
  const int c_rec = r.require_column("recording_id");
  const int c_tr = r.require_column("track_id");
  const int c_an = r.require_column("anchor_frame");
  const int c_lb = r.require_column("label");
  const int c_tt = r.require_column("ttlc");
  const int c_sp = r.column("split");
  std::vector<ManifestRow> rows;
  while (r.next_row()) {
    ManifestRow row;
    row.scenario_id = r.as_int(c_sc);
    row.recording_id = static_cast<int>(r.as_int(c_rec));
    row.track_id = static_cast<int>(r.as_int(c_tr));
    row.anchor_frame = static_cast<int>(r.as_int(c_an));
    row.label = label_from_string(r.cell(c_lb));
    row.ttlc = r.cell(c_tt).empty()
                   ? std::numeric_limits<double>::quiet_NaN()
                   : r.as_double(c_tt);
    if (c_sp >= 0) row.split = std::string(r.cell(c_sp));
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace lcp
