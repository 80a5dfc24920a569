#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "lcp/common.hpp"
#include "lcp/csv.hpp"

namespace lcp {

// Coordinate frame (drone view): x grows along the road, y grows downward
// across it.  The upper carriageway carries traffic toward decreasing x,
// the lower one toward increasing x.
enum class Side { Upper, Lower };

inline const char* to_string(Side s) {
  return s == Side::Upper ? "upper" : "lower";
}

// Per-frame state.  Positions are geometric bounding-box centers; the CSV
// stores the top-left corner and the conversion happens once at load so the
// rest of the pipeline never sees corner coordinates.
struct TrackState {
  int frame = 0;
  double cx = 0.0, cy = 0.0;
  double vx = 0.0, vy = 0.0;
  double ax = 0.0, ay = 0.0;
  int lane_id = 0;
};

struct Track {
  int id = 0;
  Side side = Side::Lower;
  double length = 0.0;  // bbox extent along x ("width" column)
  double height = 0.0;  // bbox extent along y ("height" column)
  int first_frame = 0;
  std::vector<TrackState> states;  // consecutive frames

  int last_frame() const {
    return first_frame + static_cast<int>(states.size()) - 1;
  }
  bool has_frame(int f) const { return f >= first_frame && f <= last_frame(); }
  const TrackState& at_frame(int f) const {
    return states[static_cast<std::size_t>(f - first_frame)];
  }
};

struct RecordingMeta {
  int id = 0;
  double frame_rate = 0.0;
  std::vector<double> upper_markings;  // lane marking y positions, ascending
  std::vector<double> lower_markings;

  const std::vector<double>& markings(Side s) const {
    return s == Side::Upper ? upper_markings : lower_markings;
  }
};

struct Recording {
  RecordingMeta meta;
  std::vector<Track> tracks;  // sorted by id

  const Track* find_track(int id) const {
    auto it = std::lower_bound(
        tracks.begin(), tracks.end(), id,
        [](const Track& t, int v) { return t.id < v; });
    if (it == tracks.end() || it->id != id) return nullptr;
    return &*it;
  }
};

namespace detail {

inline std::vector<double> parse_markings(std::string_view s,
                                          const std::string& ctx) {
  std::vector<double> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    std::size_t semi = s.find(';', start);
    std::string_view item =
        s.substr(start, semi == std::string_view::npos ? s.size() - start
                                                       : semi - start);
    double v = 0.0;
    auto r = std::from_chars(item.data(), item.data() + item.size(), v);
    require(r.ec == std::errc() && r.ptr == item.data() + item.size(),
            ErrorKind::Schema, ctx + ": bad lane marking '" +
                std::string(item) + "'");
    out.push_back(v);
    if (semi == std::string_view::npos) break;
    start = semi + 1;
  }
  require(out.size() >= 2, ErrorKind::Data,
          ctx + ": carriageway needs at least two lane markings");
  for (std::size_t i = 1; i < out.size(); ++i)
    require(out[i] > out[i - 1], ErrorKind::Data,
            ctx + ": lane markings must be strictly ascending");
  return out;
}

}  // namespace detail

// Load one recording from its three CSV files.  Validates schema, frame
// contiguity per track, and meta consistency; converts positions to
// bounding-box centers.
inline Recording load_recording(const std::filesystem::path& tracks_csv,
                                const std::filesystem::path& tracks_meta_csv,
                                const std::filesystem::path& recording_meta_csv) {
  Recording rec;

  {
    CsvReader r(recording_meta_csv);
    int c_id = r.require_column("id");
    int c_rate = r.require_column("frameRate");
    int c_up = r.require_column("upperLaneMarkings");
    int c_lo = r.require_column("lowerLaneMarkings");
    require(r.next_row(), ErrorKind::Schema,
            r.path() + ": expected one data row");
    rec.meta.id = static_cast<int>(r.as_int(c_id));
    rec.meta.frame_rate = r.as_double(c_rate);
    require(rec.meta.frame_rate > 0, ErrorKind::Data,
            r.path() + ": frameRate must be positive");
    rec.meta.upper_markings =
        detail::parse_markings(r.cell(c_up), r.path() + " upper");
    rec.meta.lower_markings =
        detail::parse_markings(r.cell(c_lo), r.path() + " lower");
  }

  std::map<int, Side> direction;
  {
    CsvReader r(tracks_meta_csv);
    int c_id = r.require_column("id");
    int c_dir = r.require_column("drivingDirection");
    while (r.next_row()) {
      int id = static_cast<int>(r.as_int(c_id));
      long long d = r.as_int(c_dir);
      require(d == 1 || d == 2, ErrorKind::Data,
              r.path() + ": track " + std::to_string(id) +
                  ": drivingDirection must be 1 or 2");
      auto [it, inserted] = direction.emplace(
          id, d == 1 ? Side::Upper : Side::Lower);
      require(inserted, ErrorKind::Data,
              r.path() + ": duplicate track id " + std::to_string(id));
    }
  }

  struct Row {
    int frame;
    TrackState st;
    double w, h;
  };
  std::map<int, std::vector<Row>> by_id;
  {
    CsvReader r(tracks_csv);
    int c_frame = r.require_column("frame");
    int c_id = r.require_column("id");
    int c_x = r.require_column("x");
    int c_y = r.require_column("y");
    int c_w = r.require_column("width");
    int c_h = r.require_column("height");
    int c_vx = r.require_column("xVelocity");
    int c_vy = r.require_column("yVelocity");
    int c_ax = r.require_column("xAcceleration");
    int c_ay = r.require_column("yAcceleration");
    int c_lane = r.require_column("laneId");
    while (r.next_row()) {
      Row row;
      row.frame = static_cast<int>(r.as_int(c_frame));
      row.w = r.as_double(c_w);
      row.h = r.as_double(c_h);
      row.st.frame = row.frame;
      row.st.cx = r.as_double(c_x) + row.w / 2.0;
      row.st.cy = r.as_double(c_y) + row.h / 2.0;
      row.st.vx = r.as_double(c_vx);
      row.st.vy = r.as_double(c_vy);
      row.st.ax = r.as_double(c_ax);
      row.st.ay = r.as_double(c_ay);
      row.st.lane_id = static_cast<int>(r.as_int(c_lane));
      by_id[static_cast<int>(r.as_int(c_id))].push_back(row);
    }
  }

  const std::string tracks_name = tracks_csv.string();
  for (auto& [id, rows] : by_id) {
    auto dir_it = direction.find(id);
    require(dir_it != direction.end(), ErrorKind::Data,
            tracks_name + ": track " + std::to_string(id) +
                " has no meta entry");
    std::sort(rows.begin(), rows.end(),
              [](const Row& a, const Row& b) { return a.frame < b.frame; });
    Track t;
    t.id = id;
    t.side = dir_it->second;
    t.length = rows.front().w;
    t.height = rows.front().h;
    t.first_frame = rows.front().frame;
    t.states.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      require(rows[i].frame == t.first_frame + static_cast<int>(i),
              ErrorKind::Data,
              tracks_name + ": track " + std::to_string(id) +
                  " frames are not consecutive near frame " +
                  std::to_string(rows[i].frame));
      t.states.push_back(rows[i].st);
    }
    rec.tracks.push_back(std::move(t));
  }

  return rec;  // std::map iteration keeps tracks sorted by id
}

// Inverse of load_recording: writes the three CSVs, converting centers back
// to top-left corners.  Used by the scene generator and round-trip tests.
inline void write_recording(const Recording& rec,
                            const std::filesystem::path& tracks_csv,
                            const std::filesystem::path& tracks_meta_csv,
                            const std::filesystem::path& recording_meta_csv) {
  {
    CsvWriter w(recording_meta_csv,
                {"id", "frameRate", "upperLaneMarkings", "lowerLaneMarkings"});
    auto join = [](const std::vector<double>& v) {
      std::string s;
      for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ';';
        append_number(s, v[i]);
      }
      return s;
    };
    w.field(rec.meta.id)
        .field(rec.meta.frame_rate)
        .field(std::string_view(join(rec.meta.upper_markings)))
        .field(std::string_view(join(rec.meta.lower_markings)));
    w.end_row();
  }
  {
    CsvWriter w(tracks_meta_csv, {"id", "drivingDirection"});
    for (const Track& t : rec.tracks) {
      w.field(t.id).field(t.side == Side::Upper ? 1 : 2);
      w.end_row();
    }
  }
  {
    CsvWriter w(tracks_csv,
                {"frame", "id", "x", "y", "width", "height", "xVelocity",
                 "yVelocity", "xAcceleration", "yAcceleration", "laneId"});
    for (const Track& t : rec.tracks) {
      for (const TrackState& s : t.states) {
        w.field(s.frame)
            .field(t.id)
            .field(s.cx - t.length / 2.0)
            .field(s.cy - t.height / 2.0)
            .field(t.length)
            .field(t.height)
            .field(s.vx)
            .field(s.vy)
            .field(s.ax)
            .field(s.ay)
            .field(s.lane_id);
        w.end_row();
      }
    }
  }
}

// Frame -> track lookup: which tracks have a state at a given frame.
struct FrameIndex {
  int min_frame = 0;
  std::vector<std::vector<std::int32_t>> per_frame;

  static const std::vector<std::int32_t>& empty_list() {
    static const std::vector<std::int32_t> e;
    return e;
  }

  const std::vector<std::int32_t>& tracks_at(int frame) const {
    if (frame < min_frame ||
        frame >= min_frame + static_cast<int>(per_frame.size()))
      return empty_list();
    return per_frame[static_cast<std::size_t>(frame - min_frame)];
  }
};

inline FrameIndex index_frames(const Recording& rec) {
  FrameIndex ix;
  if (rec.tracks.empty()) return ix;
  int lo = rec.tracks.front().first_frame;
  int hi = rec.tracks.front().last_frame();
  for (const Track& t : rec.tracks) {
    lo = std::min(lo, t.first_frame);
    hi = std::max(hi, t.last_frame());
  }
  ix.min_frame = lo;
  ix.per_frame.resize(static_cast<std::size_t>(hi - lo + 1));
  for (std::size_t ti = 0; ti < rec.tracks.size(); ++ti) {
    const Track& t = rec.tracks[ti];
    for (int f = t.first_frame; f <= t.last_frame(); ++f)
      ix.per_frame[static_cast<std::size_t>(f - lo)].push_back(
          static_cast<std::int32_t>(ti));
  }
  return ix;
}

// Standard file names for a recording with a 2-digit id prefix.
inline std::string recording_prefix(int id) {
  std::string s = std::to_string(id);
  if (s.size() < 2) s.insert(s.begin(), '0');
  return s;
}

struct RecordingPaths {
  std::filesystem::path tracks, tracks_meta, recording_meta;
};

inline RecordingPaths recording_paths(const std::filesystem::path& dir,
                                      int id) {
  const std::string p = recording_prefix(id);
  return {dir / (p + "_tracks.csv"), dir / (p + "_tracksMeta.csv"),
          dir / (p + "_recordingMeta.csv")};
}

}  // namespace lcp
