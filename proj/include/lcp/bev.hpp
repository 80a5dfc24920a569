#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "lcp/common.hpp"
#include "lcp/dataio.hpp"
#include "lcp/scenarios.hpp"
#include "lcp/tensor.hpp"

namespace lcp {

// Raster geometry.  Lateral resolution is four times finer than
// longitudinal so lane-level detail survives at a small image size.
struct BevSpec {
  std::size_t long_px = 200;
  std::size_t lat_px = 80;
  double long_range = 200.0;  // m
  double lat_range = 20.0;    // m

  double long_res() const { return long_range / static_cast<double>(long_px); }
  double lat_res() const { return lat_range / static_cast<double>(lat_px); }

  void validate() const {
    require(long_px > 0 && lat_px > 0 && long_range > 0 && lat_range > 0,
            ErrorKind::Config, "bev: extents must be positive");
    require(std::abs(long_res() - 4.0 * lat_res()) < 1e-9, ErrorKind::Config,
            "bev: lateral resolution must be 4x finer than longitudinal");
  }
};

// Single-channel grid [long_px, lat_px]; values in {0, 1/3, 2/3, 1}.
using BevFrame = Tensor<float>;
// Observation stack [n_obs, long_px, lat_px], oldest frame first.
using BevStack = Tensor<float>;

namespace detail {

// The exact representable pixel levels: count of active layers / 3.
inline const float kBevLevels[4] = {0.0f, 1.0f / 3.0f, 2.0f / 3.0f, 1.0f};

// Pixel k (covering continuous span [k,k+1)) intersects interval [lo,hi).
// Loops over the clipped pixel range.
template <typename F>
inline void for_covered_pixels(double lo, double hi, std::size_t n_px, F f) {
  if (!(hi > 0.0) || !(lo < static_cast<double>(n_px))) return;
  // Smallest k with k+1 > lo is floor(lo) for any lo (integer or not).
  long long k0 = static_cast<long long>(std::floor(lo));
  if (k0 < 0) k0 = 0;
  for (long long k = k0; k < static_cast<long long>(n_px) &&
                         static_cast<double>(k) < hi;
       ++k)
    f(static_cast<std::size_t>(k));
}

}  // namespace detail

// Render the scene around the TV at one native frame.
//
// Canonical orientation: the TV's travel direction points toward decreasing
// longitudinal index (driving right-to-left in the image) and the driver's
// right side toward decreasing lateral index.  Upper-carriageway scenes are
// therefore reflected in both axes, giving every stack one orientation.
// Only the TV's carriageway is drawn; the opposite roadway renders 0.
//
// Layers: vehicles (all bboxes on the carriageway, TV included), lane
// markings (one-pixel lines), road (band between outermost markings).
// Output pixel = (vehicle + lane + road) / 3.
inline BevFrame render_frame(const Recording& rec, const FrameIndex& index,
                             int tv_id, int frame, const BevSpec& spec) {
  const Track* tv = rec.find_track(tv_id);
  require(tv != nullptr && tv->has_frame(frame), ErrorKind::Data,
          "bev: track " + std::to_string(tv_id) + " absent at frame " +
              std::to_string(frame));
  const TrackState& tvs = tv->at_frame(frame);
  const double s = tv->side == Side::Lower ? 1.0 : -1.0;
  const double cu = static_cast<double>(spec.long_px) / 2.0;
  const double cv = static_cast<double>(spec.lat_px) / 2.0;
  const double ru = spec.long_res();
  const double rv = spec.lat_res();

  // World -> continuous pixel coordinates.
  auto U = [&](double x) { return cu - s * (x - tvs.cx) / ru; };
  auto V = [&](double y) { return cv - s * (y - tvs.cy) / rv; };
  // Map a world interval to an ascending pixel-coordinate interval (the
  // axis flip swaps the endpoints when s = +1 or -1 accordingly).
  auto span_u = [&](double x0, double x1) {
    const double a = U(x0), b = U(x1);
    return std::pair<double, double>(std::min(a, b), std::max(a, b));
  };
  auto span_v = [&](double y0, double y1) {
    const double a = V(y0), b = V(y1);
    return std::pair<double, double>(std::min(a, b), std::max(a, b));
  };

  std::vector<std::uint8_t> layers(spec.long_px * spec.lat_px, 0);
  auto mark = [&](std::size_t u, std::size_t v, std::uint8_t bit) {
    layers[u * spec.lat_px + v] |= bit;
  };

  // Vehicle layer (bit 0): every bbox on the TV's carriageway.
  for (std::int32_t ti : index.tracks_at(frame)) {
    const Track& t = rec.tracks[static_cast<std::size_t>(ti)];
    if (t.side != tv->side) continue;
    const TrackState& st = t.at_frame(frame);
    const auto [ulo, uhi] = span_u(st.cx - t.length / 2.0,
                                   st.cx + t.length / 2.0);
    const auto [vlo, vhi] = span_v(st.cy - t.height / 2.0,
                                   st.cy + t.height / 2.0);
    detail::for_covered_pixels(ulo, uhi, spec.long_px, [&](std::size_t u) {
      detail::for_covered_pixels(vlo, vhi, spec.lat_px, [&](std::size_t v) {
        mark(u, v, 1);
      });
    });
  }

  // Lane layer (bit 1): one-pixel lines at each marking of the carriageway.
  const std::vector<double>& marks = rec.meta.markings(tv->side);
  for (double m : marks) {
    const double vc = V(m);
    if (vc < 0.0 || vc >= static_cast<double>(spec.lat_px)) continue;
    const std::size_t v = static_cast<std::size_t>(vc);
    for (std::size_t u = 0; u < spec.long_px; ++u) mark(u, v, 2);
  }

  // Road layer (bit 2): band between the outermost markings.
  {
    const auto [vlo, vhi] = span_v(marks.front(), marks.back());
    detail::for_covered_pixels(vlo, vhi, spec.lat_px, [&](std::size_t v) {
      for (std::size_t u = 0; u < spec.long_px; ++u) mark(u, v, 4);
    });
  }

  BevFrame out(std::vector<std::size_t>{spec.long_px, spec.lat_px});
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::uint8_t bits = layers[i];
    const int count = (bits & 1) + ((bits >> 1) & 1) + ((bits >> 2) & 1);
    out.data[i] = detail::kBevLevels[count];
  }
  return out;
}

// Render the full observation stack of a sample: one channel per
// observation frame, oldest first, each re-centered on the TV at its frame.
inline BevStack render_stack(const Recording& rec, const FrameIndex& index,
                             const Sample& sample, const ProblemConfig& cfg,
                             const BevSpec& spec) {
  const std::vector<int> frames =
      observation_frames(sample.anchor_frame, cfg, rec.meta.frame_rate);
  BevStack out(std::vector<std::size_t>{frames.size(), spec.long_px,
                                        spec.lat_px});
  const std::size_t plane = spec.long_px * spec.lat_px;
  for (std::size_t k = 0; k < frames.size(); ++k) {
    BevFrame f = render_frame(rec, index, sample.track_id, frames[k], spec);
    std::copy(f.data.begin(), f.data.end(),
              out.data.begin() + static_cast<std::ptrdiff_t>(k * plane));
  }
  return out;
}

// Debug export: plain-text graymap, maxval 3, integers encode {0,1/3,2/3,1}.
inline void write_pgm(const BevFrame& frame,
                      const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorKind::Io, "cannot write " + path.string());
  const std::size_t h = frame.shape[0], w = frame.shape[1];
  out << "P2\n" << w << " " << h << "\n3\n";
  for (std::size_t u = 0; u < h; ++u) {
    for (std::size_t v = 0; v < w; ++v) {
      const float val = frame.data[u * w + v];
      const int level = static_cast<int>(std::lround(val * 3.0f));
      out << level << (v + 1 == w ? "" : " ");
    }
    out << "\n";
  }
  require(out.good(), ErrorKind::Io, "write failed: " + path.string());
}

}  // namespace lcp
