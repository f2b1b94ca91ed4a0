#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "epd/tensor.hpp"

namespace epd {

// One observation: a pedestrian's position at a frame. (frame_id,
// pedestrian_id) is unique within a scene.
struct TrackPoint {
  long frame_id = 0;
  long pedestrian_id = 0;
  double x = 0.0;
  double y = 0.0;
};

struct Scene {
  std::string name;
  double frame_interval = 0.4;  // seconds per frame step
  long frame_stride = 1;        // frame-number delta between successive samples
  std::vector<TrackPoint> points;  // sorted by (frame_id, pedestrian_id)
};

struct ParseStats {
  std::size_t total_lines = 0;
  std::size_t malformed = 0;
  std::size_t duplicates_merged = 0;
  std::vector<std::size_t> malformed_lines;  // 1-based, first few only
};

// Fixed observation/prediction window around one ego pedestrian. Coordinates
// are raw until normalize(); origin records the subtracted offset so
// denormalize() is exact.
struct SceneWindow {
  Tensor ego_past;                      // [t_past, 2]
  Tensor ego_future;                    // [t_future, 2]
  std::vector<Tensor> neighbor_pasts;   // each [t_past, 2], sorted by neighbor id
  std::vector<Tensor> neighbor_futures; // each [t_future, 2], same order
  std::vector<long> neighbor_ids;
  std::vector<unsigned char> social_mask;      // co-present at last observed frame
  std::vector<unsigned char> neighbor_padded;  // gap-padded somewhere in the past
  double origin_x = 0.0;
  double origin_y = 0.0;
  std::string scene;
  long ego_id = 0;
  long start_frame = 0;
  int t_past = 8;
  int t_future = 12;
};

struct SplitPlan {
  std::vector<std::string> train;
  std::vector<std::string> validation;
  std::vector<std::string> test;
};

namespace detail {

// Accepts tokens {frame,id,x,y} in any order, separated by spaces or commas.
inline std::array<int, 4> parse_column_order(const std::string& order) {
  std::array<int, 4> perm{-1, -1, -1, -1};  // perm[role] = column index
  std::string tok;
  int col = 0;
  std::string cleaned = order;
  std::replace(cleaned.begin(), cleaned.end(), ',', ' ');
  std::istringstream cin(cleaned);
  while (cin >> tok) {
    int role;
    if (tok == "frame") role = 0;
    else if (tok == "id") role = 1;
    else if (tok == "x") role = 2;
    else if (tok == "y") role = 3;
    else throw DataError("unknown column name '" + tok + "' in order spec '" + order + "'");
    if (perm[role] != -1) throw DataError("column '" + tok + "' repeated in order spec");
    perm[role] = col++;
  }
  if (col != 4) throw DataError("column order must name all of frame,id,x,y: '" + order + "'");
  return perm;
}

inline long infer_frame_stride(const std::vector<TrackPoint>& sorted_points) {
  // Smallest positive frame delta between successive observations of any one
  // pedestrian; 1 when no pedestrian has two observations.
  std::map<long, long> last_frame;
  long stride = 0;
  for (const TrackPoint& p : sorted_points) {
    auto it = last_frame.find(p.pedestrian_id);
    if (it != last_frame.end()) {
      const long d = p.frame_id - it->second;
      if (d > 0 && (stride == 0 || d < stride)) stride = d;
      it->second = p.frame_id;
    } else {
      last_frame[p.pedestrian_id] = p.frame_id;
    }
  }
  return stride == 0 ? 1 : stride;
}

}  // namespace detail

// Whitespace-separated text, one observation per line, '#' starts a comment.
// More than 1% malformed lines is treated as a wrong-format file.
inline Scene parse_dataset(const std::string& path,
                           const std::string& column_order = "frame id x y",
                           ParseStats* stats_out = nullptr) {
  const std::array<int, 4> perm = detail::parse_column_order(column_order);
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset file: " + path);

  Scene scene;
  {
    std::string base = path;
    const std::size_t slash = base.find_last_of('/');
    if (slash != std::string::npos) base = base.substr(slash + 1);
    const std::size_t dot = base.find_last_of('.');
    scene.name = dot == std::string::npos ? base : base.substr(0, dot);
  }

  ParseStats stats;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    std::vector<std::string> cols;
    std::string tok;
    while (ls >> tok) cols.push_back(tok);
    if (cols.empty()) continue;
    ++stats.total_lines;
    bool ok = cols.size() >= 4;
    TrackPoint p;
    if (ok) {
      try {
        std::size_t used = 0;
        p.frame_id = static_cast<long>(std::stod(cols[perm[0]], &used));
        p.pedestrian_id = static_cast<long>(std::stod(cols[perm[1]], &used));
        p.x = std::stod(cols[perm[2]], &used);
        p.y = std::stod(cols[perm[3]], &used);
        ok = std::isfinite(p.x) && std::isfinite(p.y);
      } catch (const std::exception&) {
        ok = false;
      }
    }
    if (!ok) {
      ++stats.malformed;
      if (stats.malformed_lines.size() < 16) stats.malformed_lines.push_back(lineno);
      continue;
    }
    scene.points.push_back(p);
  }

  if (stats.total_lines > 0 &&
      stats.malformed * 100 > stats.total_lines) {
    std::string msg = "too many malformed lines in " + path + " (" +
                      std::to_string(stats.malformed) + "/" +
                      std::to_string(stats.total_lines) + "), first at lines";
    for (std::size_t ln : stats.malformed_lines) msg += " " + std::to_string(ln);
    throw DataError(msg);
  }

  std::stable_sort(scene.points.begin(), scene.points.end(),
                   [](const TrackPoint& a, const TrackPoint& b) {
                     if (a.frame_id != b.frame_id) return a.frame_id < b.frame_id;
                     return a.pedestrian_id < b.pedestrian_id;
                   });

  // Duplicate (frame, id) with identical coordinates collapses to one point;
  // conflicting coordinates mean the file is inconsistent.
  std::vector<TrackPoint> dedup;
  dedup.reserve(scene.points.size());
  for (const TrackPoint& p : scene.points) {
    if (!dedup.empty() && dedup.back().frame_id == p.frame_id &&
        dedup.back().pedestrian_id == p.pedestrian_id) {
      if (dedup.back().x == p.x && dedup.back().y == p.y) {
        ++stats.duplicates_merged;
        continue;
      }
      throw DataError("conflicting duplicate for frame " + std::to_string(p.frame_id) +
                      " pedestrian " + std::to_string(p.pedestrian_id) + " in " + path);
    }
    dedup.push_back(p);
  }
  scene.points = std::move(dedup);
  scene.frame_stride = detail::infer_frame_stride(scene.points);
  if (stats_out) *stats_out = stats;
  return scene;
}

// One window per (pedestrian, start frame) where the ego is observed for
// t_past + t_future consecutive frames. Neighbors are any other pedestrians
// seen during the past segment; gaps are padded with the nearest observed
// position and flagged. The social mask marks co-presence at the last
// observed frame.
inline std::vector<SceneWindow> build_windows(const Scene& scene, int t_past = 8,
                                              int t_future = 12, int stride = 1) {
  if (t_past < 1 || t_future < 1 || stride < 1)
    throw DataError("build_windows: t_past, t_future, stride must be positive");
  const int span = t_past + t_future;
  const long fs = scene.frame_stride;

  // (ped -> frame -> position), ordered so emission order is deterministic.
  std::map<long, std::map<long, std::pair<double, double>>> tracks;
  for (const TrackPoint& p : scene.points) tracks[p.pedestrian_id][p.frame_id] = {p.x, p.y};

  std::vector<SceneWindow> out;
  for (const auto& [ego_id, track] : tracks) {
    std::vector<long> frames;
    frames.reserve(track.size());
    for (const auto& [f, xy] : track) frames.push_back(f);

    // Consecutive runs only: a gap in the ego track ends the run.
    std::size_t run_start = 0;
    for (std::size_t i = 1; i <= frames.size(); ++i) {
      if (i < frames.size() && frames[i] - frames[i - 1] == fs) continue;
      const std::size_t run_len = i - run_start;
      for (std::size_t s = run_start;
           run_len >= static_cast<std::size_t>(span) && s + span <= i;
           s += stride) {
        const long f0 = frames[s];
        SceneWindow w;
        w.scene = scene.name;
        w.ego_id = ego_id;
        w.start_frame = f0;
        w.t_past = t_past;
        w.t_future = t_future;
        w.ego_past = Tensor::zeros(t_past, 2);
        w.ego_future = Tensor::zeros(t_future, 2);
        for (int k = 0; k < span; ++k) {
          const auto& [px, py] = track.at(f0 + k * fs);
          if (k < t_past) {
            w.ego_past.at(k, 0) = px;
            w.ego_past.at(k, 1) = py;
          } else {
            w.ego_future.at(k - t_past, 0) = px;
            w.ego_future.at(k - t_past, 1) = py;
          }
        }
        const long last_obs = f0 + (t_past - 1) * fs;
        for (const auto& [nid, ntrack] : tracks) {
          if (nid == ego_id) continue;
          bool seen = false;
          for (int k = 0; k < t_past && !seen; ++k) seen = ntrack.count(f0 + k * fs) != 0;
          if (!seen) continue;
          Tensor np = Tensor::zeros(t_past, 2);
          bool padded = false;
          // Forward-fill from the last observation; frames before the first
          // observation take the first one. Either direction counts as padding.
          const double first_x = ntrack.begin()->second.first;
          const double first_y = ntrack.begin()->second.second;
          double hx = first_x, hy = first_y;
          bool have_prior = false;
          {
            // Position state as of just before f0.
            auto it = ntrack.lower_bound(f0);
            if (it != ntrack.begin()) {
              --it;
              hx = it->second.first;
              hy = it->second.second;
              have_prior = true;
            }
          }
          Tensor nf = Tensor::zeros(t_future, 2);
          for (int k = 0; k < span; ++k) {
            auto it = ntrack.find(f0 + k * fs);
            if (it != ntrack.end()) {
              hx = it->second.first;
              hy = it->second.second;
              have_prior = true;
            } else {
              padded = true;
              if (!have_prior) {
                hx = first_x;
                hy = first_y;
              }
            }
            if (k < t_past) {
              np.at(k, 0) = hx;
              np.at(k, 1) = hy;
            } else {
              nf.at(k - t_past, 0) = hx;
              nf.at(k - t_past, 1) = hy;
            }
          }
          w.neighbor_pasts.push_back(std::move(np));
          w.neighbor_futures.push_back(std::move(nf));
          w.neighbor_ids.push_back(nid);
          w.social_mask.push_back(ntrack.count(last_obs) ? 1 : 0);
          w.neighbor_padded.push_back(padded ? 1 : 0);
        }
        out.push_back(std::move(w));
      }
      run_start = i;
    }
  }
  return out;
}

// Shift all coordinates so the ego's last observed position becomes (0,0).
// The subtracted offset accumulates into origin, making the inverse exact.
inline void normalize(SceneWindow& w) {
  const double ox = w.ego_past.at(w.t_past - 1, 0);
  const double oy = w.ego_past.at(w.t_past - 1, 1);
  auto shift = [&](Tensor& t) {
    for (std::size_t r = 0; r < t.rows(); ++r) {
      t.at(r, 0) -= ox;
      t.at(r, 1) -= oy;
    }
  };
  shift(w.ego_past);
  shift(w.ego_future);
  for (Tensor& n : w.neighbor_pasts) shift(n);
  for (Tensor& n : w.neighbor_futures) shift(n);
  w.origin_x += ox;
  w.origin_y += oy;
}

inline void denormalize(SceneWindow& w) {
  const double ox = w.origin_x;
  const double oy = w.origin_y;
  auto shift = [&](Tensor& t) {
    for (std::size_t r = 0; r < t.rows(); ++r) {
      t.at(r, 0) += ox;
      t.at(r, 1) += oy;
    }
  };
  shift(w.ego_past);
  shift(w.ego_future);
  for (Tensor& n : w.neighbor_pasts) shift(n);
  for (Tensor& n : w.neighbor_futures) shift(n);
  w.origin_x = 0.0;
  w.origin_y = 0.0;
}

inline void require_window_valid(const SceneWindow& w) {
  if (static_cast<int>(w.ego_past.rows()) != w.t_past ||
      static_cast<int>(w.ego_future.rows()) != w.t_future)
    throw DataError("window has wrong segment lengths");
  if (!w.ego_past.all_finite() || !w.ego_future.all_finite())
    throw DataError("window has non-finite ego coordinates");
  if (w.neighbor_pasts.size() != w.social_mask.size() ||
      w.neighbor_pasts.size() != w.neighbor_padded.size() ||
      w.neighbor_pasts.size() != w.neighbor_futures.size() ||
      w.neighbor_pasts.size() != w.neighbor_ids.size())
    throw DataError("window neighbor arrays disagree in length");
  for (const Tensor& n : w.neighbor_pasts) {
    if (static_cast<int>(n.rows()) != w.t_past || n.cols() != 2)
      throw DataError("neighbor past has wrong shape " + n.shape_str());
    if (!n.all_finite()) throw DataError("neighbor past has non-finite coordinates");
  }
  for (const Tensor& n : w.neighbor_futures) {
    if (static_cast<int>(n.rows()) != w.t_future || n.cols() != 2)
      throw DataError("neighbor future has wrong shape " + n.shape_str());
    if (!n.all_finite()) throw DataError("neighbor future has non-finite coordinates");
  }
  if (w.origin_x == 0.0 && w.origin_y == 0.0) return;
  // Normalized windows must anchor the ego's last observed position at 0.
  const double ax = w.ego_past.at(w.t_past - 1, 0);
  const double ay = w.ego_past.at(w.t_past - 1, 1);
  if (std::abs(ax) > 1e-9 || std::abs(ay) > 1e-9)
    throw DataError("normalized window is not ego-anchored");
}

// Hold out one scene group; the rest splits 90/10 into train/validation by
// scene order.
inline SplitPlan split_leave_one_out(const std::vector<std::string>& groups,
                                     const std::string& held_out) {
  bool found = false;
  for (const std::string& g : groups) found = found || g == held_out;
  if (!found) {
    std::string msg = "unknown scene group '" + held_out + "'; available:";
    for (const std::string& g : groups) msg += " " + g;
    throw DataError(msg);
  }
  SplitPlan plan;
  std::vector<std::string> rest;
  for (const std::string& g : groups)
    (g == held_out ? plan.test : rest).push_back(g);
  if (rest.empty())
    throw DataError("cannot hold out '" + held_out + "': nothing left to train on");
  const std::size_t n_val = rest.size() >= 2 ? std::max<std::size_t>(1, rest.size() / 10) : 0;
  for (std::size_t i = 0; i < rest.size(); ++i)
    (i + n_val < rest.size() ? plan.train : plan.validation).push_back(rest[i]);
  return plan;
}

// ---- window cache ---------------------------------------------------------
// Self-describing binary cache keyed by (dataset hash, t_past, t_future,
// stride). Little-endian doubles; not an interchange format.

namespace detail {

inline void put_u64(std::ostream& o, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  o.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw DataError("window cache truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void put_str(std::ostream& o, const std::string& s) {
  put_u64(o, s.size());
  o.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_str(std::istream& in) {
  const std::uint64_t n = get_u64(in);
  if (n > (1u << 20)) throw DataError("window cache string too long");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw DataError("window cache truncated");
  return s;
}

inline void put_tensor(std::ostream& o, const Tensor& t) {
  put_u64(o, t.rows());
  put_u64(o, t.cols());
  o.write(reinterpret_cast<const char*>(t.data.data()),
          static_cast<std::streamsize>(t.data.size() * sizeof(double)));
}

inline Tensor get_tensor(std::istream& in) {
  const std::uint64_t r = get_u64(in);
  const std::uint64_t c = get_u64(in);
  if (r * c > (1u << 24)) throw DataError("window cache tensor too large");
  Tensor t = Tensor::zeros(r, c);
  in.read(reinterpret_cast<char*>(t.data.data()),
          static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  if (!in) throw DataError("window cache truncated");
  return t;
}

}  // namespace detail

inline std::uint64_t hash_bytes(const void* p, std::size_t n,
                                std::uint64_t h = 0xcbf29ce484222325ULL) {
  const unsigned char* b = static_cast<const unsigned char*>(p);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= b[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t hash_file(const std::string& path, std::uint64_t h = 0xcbf29ce484222325ULL) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open file for hashing: " + path);
  char buf[65536];
  while (in.read(buf, sizeof buf) || in.gcount() > 0)
    h = hash_bytes(buf, static_cast<std::size_t>(in.gcount()), h);
  return h;
}

inline void write_window_cache(const std::string& path,
                               const std::vector<SceneWindow>& windows,
                               std::uint64_t dataset_hash, int t_past, int t_future,
                               int stride) {
  std::ofstream o(path, std::ios::binary);
  if (!o) throw DataError("cannot write window cache: " + path);
  o.write("EPDWIN1\n", 8);
  detail::put_u64(o, dataset_hash);
  detail::put_u64(o, static_cast<std::uint64_t>(t_past));
  detail::put_u64(o, static_cast<std::uint64_t>(t_future));
  detail::put_u64(o, static_cast<std::uint64_t>(stride));
  detail::put_u64(o, windows.size());
  for (const SceneWindow& w : windows) {
    detail::put_str(o, w.scene);
    detail::put_u64(o, static_cast<std::uint64_t>(w.ego_id));
    detail::put_u64(o, static_cast<std::uint64_t>(w.start_frame));
    detail::put_tensor(o, w.ego_past);
    detail::put_tensor(o, w.ego_future);
    detail::put_u64(o, w.neighbor_pasts.size());
    for (std::size_t j = 0; j < w.neighbor_pasts.size(); ++j) {
      detail::put_u64(o, static_cast<std::uint64_t>(w.neighbor_ids[j]));
      detail::put_tensor(o, w.neighbor_pasts[j]);
      detail::put_tensor(o, w.neighbor_futures[j]);
      o.put(static_cast<char>(w.social_mask[j]));
      o.put(static_cast<char>(w.neighbor_padded[j]));
    }
    double org[2] = {w.origin_x, w.origin_y};
    o.write(reinterpret_cast<const char*>(org), sizeof org);
  }
  if (!o) throw DataError("write failed for window cache: " + path);
}

inline std::vector<SceneWindow> read_window_cache(const std::string& path,
                                                  std::uint64_t* dataset_hash = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open window cache: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::string(magic, 8) != "EPDWIN1\n")
    throw DataError("not a window cache file: " + path);
  const std::uint64_t hash = detail::get_u64(in);
  if (dataset_hash) *dataset_hash = hash;
  const int t_past = static_cast<int>(detail::get_u64(in));
  const int t_future = static_cast<int>(detail::get_u64(in));
  (void)detail::get_u64(in);  // stride, informational
  const std::uint64_t count = detail::get_u64(in);
  std::vector<SceneWindow> out;
  out.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    SceneWindow w;
    w.t_past = t_past;
    w.t_future = t_future;
    w.scene = detail::get_str(in);
    w.ego_id = static_cast<long>(detail::get_u64(in));
    w.start_frame = static_cast<long>(detail::get_u64(in));
    w.ego_past = detail::get_tensor(in);
    w.ego_future = detail::get_tensor(in);
    const std::uint64_t nn = detail::get_u64(in);
    for (std::uint64_t j = 0; j < nn; ++j) {
      w.neighbor_ids.push_back(static_cast<long>(detail::get_u64(in)));
      w.neighbor_pasts.push_back(detail::get_tensor(in));
      w.neighbor_futures.push_back(detail::get_tensor(in));
      w.social_mask.push_back(static_cast<unsigned char>(in.get()));
      w.neighbor_padded.push_back(static_cast<unsigned char>(in.get()));
    }
    double org[2];
    in.read(reinterpret_cast<char*>(org), sizeof org);
    if (!in) throw DataError("window cache truncated");
    w.origin_x = org[0];
    w.origin_y = org[1];
    require_window_valid(w);
    out.push_back(std::move(w));
  }
  return out;
}

}  // namespace epd
