#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lcp/common.hpp"
#include "lcp/csv.hpp"
#include "lcp/dataio.hpp"
#include "lcp/rng.hpp"
#include "lcp/scenarios.hpp"

namespace lcp {

// Recipe for one synthetic recording.  Background traffic is constant-speed
// with exact no-overlap gating; lane changes are scripted: a slower lead
// vehicle closes the gap ahead of the manoeuvring vehicle while the
// destination lane is kept clear around the merge point.
struct SceneRecipe {
  int recording_id = 1;
  int n_lanes = 3;            // per carriageway
  double lane_width = 3.5;    // m
  double road_length = 420.0; // m
  double duration = 240.0;    // s
  double arrival_rate = 0.12; // background vehicles per second per lane
  double speed_min = 23.0;    // m/s
  double speed_max = 33.0;
  double lc_fraction = 0.3;   // scripted LC share of nominal arrivals
  double lc_duration_min = 3.0;  // s
  double lc_duration_max = 5.0;
  std::uint64_t seed = 1;
};

struct ScriptedManoeuvre {
  int track_id = 0;
  Label direction = Label::RLC;
  int start_frame = 0;
  int cross_frame = 0;  // center meets the marking exactly here
  int end_frame = 0;
};

struct GroundTruthLog {
  std::vector<ScriptedManoeuvre> entries;
};

// Minimum-jerk lateral transition: zero velocity and acceleration at both
// ends, antisymmetric about the midpoint (y(d/2) = offset/2 exactly).
inline double quintic_blend(double u) {
  return ((6.0 * u - 15.0) * u + 10.0) * u * u * u;
}
inline double quintic_blend_d1(double u) {
  return ((30.0 * u - 60.0) * u + 30.0) * u * u;
}
inline double quintic_blend_d2(double u) {
  return ((120.0 * u - 180.0) * u + 60.0) * u;
}

// Lateral offset sequence sampled at `rate`, covering t = 0 .. duration.
inline std::vector<double> lc_lateral_profile(double duration,
                                              double lane_offset,
                                              double rate) {
  require(duration > 0, ErrorKind::Config,
          "lateral profile: duration must be positive");
  require(rate > 0, ErrorKind::Config,
          "lateral profile: rate must be positive");
  const int n = static_cast<int>(std::llround(duration * rate));
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(n) + 1);
  for (int k = 0; k <= n; ++k) {
    const double u = std::min(1.0, static_cast<double>(k) / (duration * rate));
    out.push_back(lane_offset * quintic_blend(u));
  }
  return out;
}

namespace detail {

constexpr double kNativeRate = 25.0;   // highD native frames per second
constexpr double kBaseClearance = 2.0; // bumper-to-bumper minimum (m)
constexpr double kMergeClearance = 12.0;  // kept free around a merging vehicle
constexpr double kMaxLcDuration = 7.2;    // observation + prediction window (s)

struct Actor {
  Side side = Side::Lower;
  int lane = 0;      // lane index within carriageway, 0 = smallest y
  int dst_lane = -1; // >= 0 marks a scripted lane change
  int spawn = 0;     // frame at which the bbox is fully inside the section
  int life = 0;      // frames until the bbox would leave the section
  double speed = 0;  // m/s, positive in travel direction
  double length = 0; // longitudinal extent
  double height = 0; // lateral extent
  int t_start = -1, t_end = -1;  // manoeuvre frames (dst_lane >= 0)
  double lc_duration = 0;        // seconds

  // Longitudinal center in travel coordinates (distance since entry).
  double center(int frame) const {
    return speed * static_cast<double>(frame - spawn) / kNativeRate +
           length / 2.0;
  }
};

// Lane occupancy interval used for exact pairwise separation checks.
struct Occupancy {
  int actor = 0;
  int lane_key = 0;  // carriageway * 1000 + lane index
  int t0 = 0, t1 = 0;
  double clearance = kBaseClearance;
};

inline int lane_key(Side side, int lane) {
  return (side == Side::Upper ? 0 : 1000) + lane;
}

// Two constant-speed vehicles sharing a lane over [t0,t1]: their center
// distance is linear in t, so the minimum lies at an endpoint unless the
// sign flips (a pass-through), which is always a violation.
inline bool occupancy_conflict(const Actor& a, const Actor& b,
                               const Occupancy& oa, const Occupancy& ob) {
  if (oa.lane_key != ob.lane_key) return false;
  const int t0 = std::max(oa.t0, ob.t0);
  const int t1 = std::min(oa.t1, ob.t1);
  if (t0 > t1) return false;
  const double need = (a.length + b.length) / 2.0 +
                      std::max(oa.clearance, ob.clearance);
  const double d0 = a.center(t0) - b.center(t0);
  const double d1 = a.center(t1) - b.center(t1);
  if ((d0 > 0) != (d1 > 0)) return true;
  return std::min(std::abs(d0), std::abs(d1)) < need;
}

struct Builder {
  const SceneRecipe& recipe;
  int duration_frames;
  std::vector<Actor> actors;
  std::vector<Occupancy> occupancies;
  std::vector<std::size_t> manoeuvre_actor;  // indices into actors

  explicit Builder(const SceneRecipe& r)
      : recipe(r),
        duration_frames(static_cast<int>(std::llround(r.duration *
                                                      kNativeRate))) {}

  double marking0(Side side) const {
    const double span = recipe.n_lanes * recipe.lane_width;
    return side == Side::Upper ? 2.0 : 2.0 + span + 2.0;
  }

  double lane_center(Side side, int lane) const {
    return marking0(side) + (lane + 0.5) * recipe.lane_width;
  }

  int natural_life(double speed, double length) const {
    return static_cast<int>(std::floor(
        (recipe.road_length - length) / speed * kNativeRate));
  }

  bool conflicts(const Actor& cand, const std::vector<Occupancy>& cand_occ,
                 std::size_t cand_index) const {
    for (const Occupancy& oc : cand_occ)
      for (const Occupancy& oe : occupancies)
        if (occupancy_conflict(cand, actors[static_cast<std::size_t>(
                                        oe.actor)],
                               Occupancy{static_cast<int>(cand_index),
                                         oc.lane_key, oc.t0, oc.t1,
                                         oc.clearance},
                               oe))
          return true;
    return false;
  }

  std::size_t commit(Actor a, std::vector<Occupancy> occ) {
    const std::size_t idx = actors.size();
    for (Occupancy& o : occ) {
      o.actor = static_cast<int>(idx);
      occupancies.push_back(o);
    }
    actors.push_back(a);
    return idx;
  }

  std::vector<Occupancy> plain_occupancy(const Actor& a) const {
    return {Occupancy{0, lane_key(a.side, a.lane), a.spawn,
                      a.spawn + a.life - 1, kBaseClearance}};
  }
};

}  // namespace detail

struct GeneratedRecording {
  Recording recording;
  GroundTruthLog log;
};

inline void validate_recipe(const SceneRecipe& r) {
  require(r.n_lanes >= 1, ErrorKind::Config, "recipe: n_lanes must be >= 1");
  require(r.lane_width > 0, ErrorKind::Config,
          "recipe: lane_width must be positive");
  require(r.road_length >= 150.0, ErrorKind::Config,
          "recipe: road_length must be >= 150 m");
  require(r.duration > 0, ErrorKind::Config,
          "recipe: duration must be positive");
  require(r.speed_min > 0 && r.speed_max >= r.speed_min, ErrorKind::Config,
          "recipe: speed range invalid");
  require(r.arrival_rate >= 0, ErrorKind::Config,
          "recipe: arrival_rate must be non-negative");
  require(r.arrival_rate <= 0.5, ErrorKind::Config,
          "recipe: arrival rate saturates the road (max 0.5 per lane-second)");
  require(r.lc_fraction >= 0 && r.lc_fraction <= 1, ErrorKind::Config,
          "recipe: lc_fraction must be in [0,1]");
  require(r.lc_duration_min > 0 &&
              r.lc_duration_max >= r.lc_duration_min &&
              r.lc_duration_max <= detail::kMaxLcDuration,
          ErrorKind::Config,
          "recipe: lc_duration range must lie in (0, 7.2] seconds");
  if (r.lc_fraction > 0)
    require(r.n_lanes >= 2, ErrorKind::Config,
            "recipe: scripted lane changes need at least 2 lanes");
}

// Build a full recording in memory.  All randomness flows from recipe.seed
// through named substreams, so output is a pure function of the recipe.
inline GeneratedRecording build_recording(const SceneRecipe& recipe) {
  using namespace detail;
  validate_recipe(recipe);
  const Rng root(recipe.seed);

  Builder b(recipe);

  // --- scripted lane changes -----------------------------------------
  const int n_lc_per_side = static_cast<int>(std::llround(
      recipe.lc_fraction * recipe.arrival_rate * recipe.n_lanes *
      recipe.duration));
  struct PlannedLc {
    std::size_t actor_idx;
    int t_start, cross, t_end;
    Label direction;
  };
  std::vector<PlannedLc> planned;

  for (Side side : {Side::Upper, Side::Lower}) {
    if (n_lc_per_side == 0) break;
    Rng rng = root.split("lc").split(side == Side::Upper ? 0u : 1u);

    std::vector<std::pair<int, int>> pairs;  // (src,dst)
    for (int i = 0; i + 1 < recipe.n_lanes; ++i) {
      pairs.emplace_back(i, i + 1);
      pairs.emplace_back(i + 1, i);
    }
    std::vector<int> pair_next(pairs.size());
    for (std::size_t p = 0; p < pairs.size(); ++p)
      pair_next[p] = 260 + static_cast<int>(p) * 180;

    for (int e = 0; e < n_lc_per_side; ++e) {
      const std::size_t pi = static_cast<std::size_t>(e) % pairs.size();
      const auto [src, dst] = pairs[pi];

      bool placed = false;
      for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
        // Draw the manoeuvre geometry.
        const double d_sec_raw =
            rng.uniform(recipe.lc_duration_min, recipe.lc_duration_max);
        // Even frame count so the center meets the marking on a frame.
        const int d_n = 2 * static_cast<int>(std::llround(
                                d_sec_raw * kNativeRate / 2.0));
        const double d_sec = d_n / kNativeRate;
        const int hist_margin = 5 + static_cast<int>(rng.next_below(31));
        const int warmup = 185 - d_n / 2 + hist_margin;  // spawn -> start
        const double len = rng.uniform(4.2, 5.2);
        const double lead_len = rng.uniform(4.2, 5.2);

        const double v_cap = (recipe.road_length - len) * kNativeRate /
                             static_cast<double>(warmup + d_n + 25);
        if (v_cap < recipe.speed_min) break;  // road too short for scripting
        const double v =
            rng.uniform(recipe.speed_min, std::min(recipe.speed_max, v_cap));
        const double dv = rng.uniform(2.0, 3.0);
        const double v_lead = v - dv;
        const double g_trig = 8.0 + dv * d_sec + rng.uniform(2.0, 8.0);
        const double g_spawn = g_trig + dv * warmup / kNativeRate;

        const int t_start =
            pair_next[pi] + attempt * 150 +
            static_cast<int>(rng.next_below(60));
        const int t_spawn = t_start - warmup;
        const int t_lead_spawn =
            t_spawn - static_cast<int>(std::llround(
                          (g_spawn + len) * kNativeRate / v_lead));
        if (t_lead_spawn < 0) continue;

        Actor lc;
        lc.side = side;
        lc.lane = src;
        lc.dst_lane = dst;
        lc.spawn = t_spawn;
        lc.speed = v;
        lc.length = len;
        lc.height = rng.uniform(1.8, 2.0);
        lc.life = b.natural_life(v, len);
        lc.t_start = t_start;
        lc.t_end = t_start + d_n;
        lc.lc_duration = d_sec;

        Actor lead;
        lead.side = side;
        lead.lane = src;
        lead.spawn = t_lead_spawn;
        lead.speed = v_lead;
        lead.length = lead_len;
        lead.height = rng.uniform(1.8, 2.0);
        lead.life = b.natural_life(v_lead, lead_len);

        // The manoeuvring vehicle must finish and exit inside the recording.
        if (lc.spawn + lc.life > b.duration_frames) continue;

        std::vector<Occupancy> lc_occ = {
            {0, lane_key(side, src), lc.spawn, lc.t_end, kBaseClearance},
            {0, lane_key(side, dst), lc.t_start, lc.spawn + lc.life - 1,
             kMergeClearance}};
        std::vector<Occupancy> lead_occ = b.plain_occupancy(lead);

        // Validate the scripted pair against everything already placed —
        // and against each other, so the drawn gaps are verified, not
        // trusted.
        const std::size_t n_actors0 = b.actors.size();
        const std::size_t n_occ0 = b.occupancies.size();
        if (b.conflicts(lead, lead_occ, b.actors.size())) continue;
        b.commit(lead, lead_occ);
        if (b.conflicts(lc, lc_occ, b.actors.size())) {
          b.actors.resize(n_actors0);
          b.occupancies.resize(n_occ0);
          continue;
        }
        const std::size_t lc_idx = b.commit(lc, lc_occ);

        Label dir;
        if (side == Side::Lower)
          dir = dst > src ? Label::RLC : Label::LLC;
        else
          dir = dst > src ? Label::LLC : Label::RLC;
        planned.push_back(
            {lc_idx, t_start, t_start + d_n / 2, t_start + d_n, dir});
        pair_next[pi] = t_start + 700;
        placed = true;
      }
      require(placed, ErrorKind::Config,
              "recipe: cannot schedule the requested lane changes "
              "(road too short or recording too brief)");
    }
  }

  // --- background traffic ---------------------------------------------
  for (Side side : {Side::Upper, Side::Lower}) {
    for (int lane = 0; lane < recipe.n_lanes; ++lane) {
      if (recipe.arrival_rate <= 0) break;
      Rng rng = root.split("traffic").split(
          static_cast<std::uint64_t>(lane_key(side, lane)));
      double t = rng.uniform(0.0, 2.0 / recipe.arrival_rate);
      while (true) {
        int frame = static_cast<int>(std::llround(t * kNativeRate));
        if (frame >= b.duration_frames) break;
        Actor a;
        a.side = side;
        a.lane = lane;
        a.speed = rng.uniform(recipe.speed_min, recipe.speed_max);
        a.length = rng.uniform(4.2, 5.2);
        a.height = rng.uniform(1.8, 2.0);
        a.spawn = frame;
        a.life = b.natural_life(a.speed, a.length);
        // Clip at the recording end: trailing tracks are truncated, like a
        // real recording that simply stops.
        a.life = std::min(a.life, b.duration_frames - a.spawn);
        for (int retry = 0; retry < 40; ++retry) {
          std::vector<Occupancy> occ = b.plain_occupancy(a);
          if (!b.conflicts(a, occ, b.actors.size())) {
            b.commit(a, occ);
            break;
          }
          a.spawn += 13;  // push back ~half a second and retest
          a.life = b.natural_life(a.speed, a.length);
          if (a.spawn >= b.duration_frames) break;
          a.life = std::min(a.life, b.duration_frames - a.spawn);
        }
        t += -std::log(1.0 - rng.next_double()) / recipe.arrival_rate;
      }
    }
  }

  // --- assign ids chronologically and emit tracks ----------------------
  std::vector<std::size_t> order(b.actors.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) {
                     return b.actors[x].spawn < b.actors[y].spawn;
                   });
  std::vector<int> id_of(b.actors.size());
  for (std::size_t r = 0; r < order.size(); ++r)
    id_of[order[r]] = static_cast<int>(r) + 1;

  GeneratedRecording out;
  Recording& rec = out.recording;
  rec.meta.id = recipe.recording_id;
  rec.meta.frame_rate = kNativeRate;
  for (int k = 0; k <= recipe.n_lanes; ++k) {
    rec.meta.upper_markings.push_back(b.marking0(Side::Upper) +
                                      k * recipe.lane_width);
    rec.meta.lower_markings.push_back(b.marking0(Side::Lower) +
                                      k * recipe.lane_width);
  }

  rec.tracks.resize(b.actors.size());
  for (std::size_t ai = 0; ai < b.actors.size(); ++ai) {
    const Actor& a = b.actors[ai];
    Track& t = rec.tracks[static_cast<std::size_t>(id_of[ai]) - 1];
    t.id = id_of[ai];
    t.side = a.side;
    t.length = a.length;
    t.height = a.height;
    t.first_frame = a.spawn;
    t.states.reserve(static_cast<std::size_t>(a.life));
    const std::vector<double>& marks = rec.meta.markings(a.side);
    const double y_src = b.lane_center(a.side, a.lane);
    const double y_off = a.dst_lane >= 0
                             ? b.lane_center(a.side, a.dst_lane) - y_src
                             : 0.0;
    const int f_end = std::min(a.spawn + a.life, b.duration_frames);
    for (int f = a.spawn; f < f_end; ++f) {
      TrackState s;
      s.frame = f;
      const double p = a.speed * (f - a.spawn) / kNativeRate + a.length / 2.0;
      if (a.side == Side::Lower) {
        s.cx = p;
        s.vx = a.speed;
      } else {
        s.cx = recipe.road_length - p;
        s.vx = -a.speed;
      }
      double y = y_src, vy = 0.0, ay = 0.0;
      if (a.dst_lane >= 0 && f >= a.t_start) {
        if (f <= a.t_end) {
          const double u = static_cast<double>(f - a.t_start) /
                           static_cast<double>(a.t_end - a.t_start);
          y = y_src + y_off * quintic_blend(u);
          vy = y_off * quintic_blend_d1(u) / a.lc_duration;
          ay = y_off * quintic_blend_d2(u) /
               (a.lc_duration * a.lc_duration);
        } else {
          y = y_src + y_off;
        }
      }
      s.cy = y;
      s.vy = vy;
      s.ay = ay;
      // Lane id from the center ordinate; global numbering is top→bottom
      // starting at 2 on the upper carriageway (edge ids left unused).
      int li = 0;
      while (li + 1 < recipe.n_lanes && y >= marks[static_cast<std::size_t>(
                                                li) + 1])
        ++li;
      s.lane_id = li + (a.side == Side::Upper ? 2 : recipe.n_lanes + 2);
      t.states.push_back(s);
    }
  }

  for (const PlannedLc& p : planned)
    out.log.entries.push_back({id_of[p.actor_idx], p.direction, p.t_start,
                               p.cross, p.t_end});
  std::sort(out.log.entries.begin(), out.log.entries.end(),
            [](const ScriptedManoeuvre& a, const ScriptedManoeuvre& b2) {
              return a.track_id < b2.track_id;
            });
  return out;
}

inline void write_groundtruth(const GroundTruthLog& log,
                              const std::filesystem::path& path) {
  CsvWriter w(path,
              {"trackId", "direction", "startFrame", "crossFrame",
               "endFrame"});
  for (const ScriptedManoeuvre& e : log.entries) {
    w.field(e.track_id)
        .field(std::string_view(to_string(e.direction)))
        .field(e.start_frame)
        .field(e.cross_frame)
        .field(e.end_frame);
    w.end_row();
  }
  w.flush();
}

inline GroundTruthLog read_groundtruth(const std::filesystem::path& path) {
  CsvReader r(path);
  const int c_id = r.require_column("trackId");
  const int c_dir = r.require_column("direction");
  const int c_s = r.require_column("startFrame");
  const int c_c = r.require_column("crossFrame");
  const int c_e = r.require_column("endFrame");
  GroundTruthLog log;
  while (r.next_row()) {
    ScriptedManoeuvre m;
    m.track_id = static_cast<int>(r.as_int(c_id));
    m.direction = label_from_string(r.cell(c_dir));
    m.start_frame = static_cast<int>(r.as_int(c_s));
    m.cross_frame = static_cast<int>(r.as_int(c_c));
    m.end_frame = static_cast<int>(r.as_int(c_e));
    log.entries.push_back(m);
  }
  return log;
}

// Generate and write one recording (three trajectory CSVs plus the
// ground-truth manoeuvre log, all prefixed with the 2-digit recording id).
inline GroundTruthLog generate_recording(const SceneRecipe& recipe,
                                         const std::filesystem::path& out_dir) {
  GeneratedRecording gen = build_recording(recipe);
  std::filesystem::create_directories(out_dir);
  const RecordingPaths paths = recording_paths(out_dir, recipe.recording_id);
  write_recording(gen.recording, paths.tracks, paths.tracks_meta,
                  paths.recording_meta);
  write_groundtruth(gen.log,
                    out_dir / (recording_prefix(recipe.recording_id) +
                               "_groundtruth.csv"));
  return gen.log;
}

}  // namespace lcp
