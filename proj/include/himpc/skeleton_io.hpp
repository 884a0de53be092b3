#pragma once

// Skeleton sequence datasets: JSON-lines IO, windowing, synthetic gait
// generation and probe/gallery/train splitting.

#include "himpc/core.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace himpc {

inline bool is_builtin_joint_count(int J) { return J == 14 || J == 20 || J == 25; }

/// One recorded walk. Frames are stored row-wise: row f holds
/// (x0,y0,z0, x1,y1,z1, ...) for the J joints of frame f, in meters.
struct SkeletonSequence {
  std::string seq_id;
  std::optional<int> identity;
  std::optional<std::string> view;
  int joints = 0;
  Matrix frames;  // F x 3J

  int length() const { return static_cast<int>(frames.rows()); }

  Eigen::Vector3d joint(int frame, int j) const {
    return frames.block<1, 3>(frame, 3 * j).transpose();
  }

  bool operator==(const SkeletonSequence& o) const {
    return seq_id == o.seq_id && identity == o.identity && view == o.view &&
           joints == o.joints && frames.rows() == o.frames.rows() &&
           frames.cols() == o.frames.cols() && frames == o.frames;
  }
};

/// A sequence with its identity and view removed. The trainer only
/// accepts this type.
struct UnlabeledSequence {
  std::string seq_id;
  int joints = 0;
  Matrix frames;
};

inline std::vector<UnlabeledSequence> strip_labels(const std::vector<SkeletonSequence>& seqs) {
  std::vector<UnlabeledSequence> out;
  out.reserve(seqs.size());
  for (const auto& s : seqs) out.push_back({s.seq_id, s.joints, s.frames});
  return out;
}

struct DatasetSplit {
  std::vector<SkeletonSequence> train;
  std::vector<SkeletonSequence> probe;
  std::vector<SkeletonSequence> gallery;
};

// ---------------------------------------------------------------------------
// JSON-lines format
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json sequence_to_json(const SkeletonSequence& s) {
  nlohmann::ordered_json rec;
  rec["seq_id"] = s.seq_id;
  rec["identity"] = s.identity ? nlohmann::ordered_json(*s.identity) : nlohmann::ordered_json(nullptr);
  rec["view"] = s.view ? nlohmann::ordered_json(*s.view) : nlohmann::ordered_json(nullptr);
  auto frames = nlohmann::ordered_json::array();
  for (int f = 0; f < s.length(); ++f) {
    auto frame = nlohmann::ordered_json::array();
    for (int j = 0; j < s.joints; ++j)
      frame.push_back({s.frames(f, 3 * j), s.frames(f, 3 * j + 1), s.frames(f, 3 * j + 2)});
    frames.push_back(std::move(frame));
  }
  rec["frames"] = std::move(frames);
  return rec;
}

inline void write_sequences(std::ostream& os, const std::vector<SkeletonSequence>& seqs) {
  for (const auto& s : seqs) os << sequence_to_json(s).dump() << '\n';
}

inline void write_sequences(const std::string& path, const std::vector<SkeletonSequence>& seqs) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ValidationError("cannot open " + path + " for writing");
  write_sequences(os, seqs);
  if (!os) throw ValidationError("write failed: " + path);
}

namespace detail {

inline SkeletonSequence sequence_from_json(const nlohmann::json& rec, int expected_joints,
                                           const std::string& where) {
  auto fail = [&](const std::string& msg) -> SkeletonSequence {
    throw ValidationError(where + ": " + msg);
  };
  if (!rec.is_object()) return fail("record is not a JSON object");
  SkeletonSequence s;
  if (!rec.contains("seq_id") || !rec["seq_id"].is_string()) return fail("missing string field 'seq_id'");
  s.seq_id = rec["seq_id"].get<std::string>();
  const std::string tag = where + " (seq_id '" + s.seq_id + "')";

  if (rec.contains("identity") && !rec["identity"].is_null()) {
    if (!rec["identity"].is_number_integer()) throw ValidationError(tag + ": identity must be an integer or null");
    auto id = rec["identity"].get<long long>();
    if (id < 0) throw ValidationError(tag + ": identity must be >= 0");
    s.identity = static_cast<int>(id);
  }
  if (rec.contains("view") && !rec["view"].is_null()) {
    if (!rec["view"].is_string()) throw ValidationError(tag + ": view must be a string or null");
    s.view = rec["view"].get<std::string>();
  }
  if (!rec.contains("frames") || !rec["frames"].is_array() || rec["frames"].empty())
    throw ValidationError(tag + ": 'frames' must be a non-empty array");

  const auto& frames = rec["frames"];
  s.joints = expected_joints;
  s.frames.resize(static_cast<Eigen::Index>(frames.size()), 3 * expected_joints);
  for (std::size_t f = 0; f < frames.size(); ++f) {
    const auto& frame = frames[f];
    if (!frame.is_array()) throw ValidationError(tag + ": frame " + std::to_string(f) + " is not an array");
    if (static_cast<int>(frame.size()) != expected_joints)
      throw ValidationError(tag + ": frame " + std::to_string(f) + " has " + std::to_string(frame.size()) +
                            " joints, expected " + std::to_string(expected_joints));
    for (int j = 0; j < expected_joints; ++j) {
      const auto& p = frame[static_cast<std::size_t>(j)];
      if (!p.is_array() || p.size() != 3)
        throw ValidationError(tag + ": frame " + std::to_string(f) + " joint " + std::to_string(j) +
                              " is not a 3-vector");
      for (int c = 0; c < 3; ++c) {
        if (!p[static_cast<std::size_t>(c)].is_number())
          throw ValidationError(tag + ": non-numeric coordinate at frame " + std::to_string(f));
        double v = p[static_cast<std::size_t>(c)].get<double>();
        if (!std::isfinite(v))
          throw ValidationError(tag + ": non-finite coordinate at frame " + std::to_string(f) + " joint " +
                                std::to_string(j));
        s.frames(static_cast<Eigen::Index>(f), 3 * j + c) = v;
      }
    }
  }
  return s;
}

}  // namespace detail

/// Reads every record of a JSON-lines stream in order. Blank lines are
/// skipped; errors carry the 1-based line number.
inline std::vector<SkeletonSequence> parse_sequences(std::istream& is, int expected_joints,
                                                     const std::string& name = "<stream>") {
  std::vector<SkeletonSequence> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const std::string where = name + ":" + std::to_string(lineno);
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(where + ": malformed JSON: " + e.what());
    }
    out.push_back(detail::sequence_from_json(rec, expected_joints, where));
  }
  return out;
}

inline std::vector<SkeletonSequence> parse_sequences(const std::string& path, int expected_joints) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot open " + path);
  return parse_sequences(is, expected_joints, path);
}

/// Peeks at the first record to learn the joint count of a file.
inline int detect_joint_count(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot open " + path);
  std::string line;
  while (std::getline(is, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto rec = nlohmann::json::parse(line);
      return static_cast<int>(rec.at("frames").at(0).size());
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(path + ": cannot detect joint count: " + e.what());
    }
  }
  throw ValidationError(path + ": empty dataset");
}

// ---------------------------------------------------------------------------
// Windowing
// ---------------------------------------------------------------------------

inline constexpr const char* kWindowSuffix = "#w";

struct WindowResult {
  std::vector<SkeletonSequence> windows;
  int skipped = 0;  // records shorter than the window
};

inline WindowResult window_sequences(const std::vector<SkeletonSequence>& raw, int length, int stride) {
  require(length >= 2, "window length must be >= 2");
  require(stride >= 1, "window stride must be >= 1");
  WindowResult res;
  for (const auto& s : raw) {
    if (s.length() < length) {
      ++res.skipped;
      continue;
    }
    const int count = (s.length() - length) / stride + 1;
    for (int w = 0; w < count; ++w) {
      SkeletonSequence win;
      win.seq_id = s.seq_id + kWindowSuffix + std::to_string(w);
      win.identity = s.identity;
      win.view = s.view;
      win.joints = s.joints;
      win.frames = s.frames.middleRows(w * stride, length);
      res.windows.push_back(std::move(win));
    }
  }
  return res;
}

/// Windows cut from the same raw record share a group key.
inline std::string window_group(const std::string& seq_id) {
  auto pos = seq_id.rfind(kWindowSuffix);
  return pos == std::string::npos ? seq_id : seq_id.substr(0, pos);
}

/// Subtracts joint 0 from every joint, frame by frame.
inline void center_on_root(SkeletonSequence& s) {
  for (int f = 0; f < s.length(); ++f) {
    const Eigen::Vector3d root = s.joint(f, 0);
    for (int j = 0; j < s.joints; ++j) s.frames.block<1, 3>(f, 3 * j) -= root.transpose();
  }
}

// ---------------------------------------------------------------------------
// Synthetic gait generator
// ---------------------------------------------------------------------------

struct SyntheticOptions {
  int n_identities = 10;
  int seqs_per_id = 6;
  int frames = 6;
  int joints = 20;
  double noise_sigma = 0.01;
  std::uint64_t seed = 0;
  int gait_period = 0;  // frames per gait cycle; 0 means one cycle per sequence
};

namespace detail {

struct Anthropometry {
  double height;
  double thigh, shank, foot;
  double upper_arm, forearm, hand;
  double trunk, neck, head;
  double half_hip, half_shoulder;
  double hip_amp, knee_amp, arm_amp, elbow_bend;
};

inline Anthropometry draw_anthropometry(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> stature(0.85, 1.15);
  std::uniform_real_distribution<double> segment(0.88, 1.12);
  const double H = 1.7 * stature(rng);
  Anthropometry a{};
  a.height = H;
  a.thigh = 0.245 * H * segment(rng);
  a.shank = 0.246 * H * segment(rng);
  a.foot = 0.152 * H * segment(rng);
  a.upper_arm = 0.186 * H * segment(rng);
  a.forearm = 0.146 * H * segment(rng);
  a.hand = 0.108 * H * segment(rng);
  a.trunk = 0.288 * H * segment(rng);
  a.neck = 0.052 * H * segment(rng);
  a.head = 0.130 * H * segment(rng);
  a.half_hip = 0.0955 * H * segment(rng);
  a.half_shoulder = 0.1295 * H * segment(rng);
  a.hip_amp = std::uniform_real_distribution<double>(0.30, 0.50)(rng);
  a.knee_amp = std::uniform_real_distribution<double>(0.30, 0.70)(rng);
  a.arm_amp = std::uniform_real_distribution<double>(0.20, 0.45)(rng);
  a.elbow_bend = std::uniform_real_distribution<double>(0.10, 0.40)(rng);
  return a;
}

// Kinect v2 ordering: 25 joints.
inline std::array<Eigen::Vector3d, 25> pose25(const Anthropometry& a, double phase) {
  using V = Eigen::Vector3d;
  // Segment of length len hanging down, swung forward by angle in the y-z plane.
  auto swing = [](double len, double angle) { return V(0.0, -len * std::cos(angle), len * std::sin(angle)); };

  std::array<V, 25> p;
  const double s = std::sin(phase);
  const double leg = a.thigh + a.shank + 0.04 * a.height;
  const V base(0.0, leg + 0.01 * a.height * std::cos(2.0 * phase), 2.5);

  const V spine_shoulder = base + V(0, a.trunk, 0);
  p[0] = base;
  p[1] = base + V(0, 0.5 * a.trunk, 0);
  p[20] = spine_shoulder;
  p[2] = spine_shoulder + V(0, a.neck, 0);
  p[3] = p[2] + V(0, 0.6 * a.head, 0.02 * a.head);

  // Arms swing against the same-side leg.
  for (int side = 0; side < 2; ++side) {
    const double sign = side == 0 ? 1.0 : -1.0;  // 0 = left (+x)
    const int sh = side == 0 ? 4 : 8;
    const double arm = -sign * a.arm_amp * s;
    const double elbow = arm + a.elbow_bend * (1.0 + 0.5 * (1.0 - sign * s));
    p[sh] = spine_shoulder + V(sign * a.half_shoulder, -0.02 * a.height, 0);
    p[sh + 1] = p[sh] + swing(a.upper_arm, arm);
    p[sh + 2] = p[sh + 1] + swing(a.forearm, elbow);
    p[sh + 3] = p[sh + 2] + swing(0.4 * a.hand, elbow);
    const int tip = side == 0 ? 21 : 23;
    p[tip] = p[sh + 2] + swing(a.hand, elbow);
    p[tip + 1] = p[sh + 3] + V(-sign * 0.25 * a.hand, 0, 0.2 * a.hand);
  }

  for (int side = 0; side < 2; ++side) {
    const double sign = side == 0 ? 1.0 : -1.0;
    const int hip = side == 0 ? 12 : 16;
    const double leg_phase = side == 0 ? phase : phase + std::numbers::pi;
    const double hip_angle = a.hip_amp * std::sin(leg_phase);
    const double knee = a.knee_amp * 0.5 * (1.0 - std::cos(leg_phase));
    p[hip] = base + V(sign * a.half_hip, -0.03 * a.height, 0);
    p[hip + 1] = p[hip] + swing(a.thigh, hip_angle);
    p[hip + 2] = p[hip + 1] + swing(a.shank, hip_angle - knee);
    p[hip + 3] = p[hip + 2] + V(0, -0.03 * a.height, 0.6 * a.foot);
  }
  return p;
}

inline const std::array<int, 20>& kinect_v1_from_v2() {
  static const std::array<int, 20> m{0, 1, 20, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19};
  return m;
}

inline const std::array<int, 14>& openpose14_from_v2() {
  static const std::array<int, 14> m{3, 20, 8, 9, 10, 4, 5, 6, 16, 17, 18, 12, 13, 14};
  return m;
}

}  // namespace detail

/// Deterministic walking-in-place skeletons. Each identity has its own
/// segment lengths and gait amplitudes; each sequence of an identity
/// starts at its own random gait phase.
inline std::vector<SkeletonSequence> generate_synthetic(const SyntheticOptions& opt) {
  require(opt.n_identities >= 2, "synthetic data needs at least 2 identities");
  require(opt.seqs_per_id >= 1, "seqs_per_id must be >= 1");
  require(opt.frames >= 1, "frame count must be >= 1");
  require(is_builtin_joint_count(opt.joints), "synthetic joint count must be 14, 20 or 25");
  require(opt.noise_sigma >= 0.0, "noise_sigma must be >= 0");

  std::mt19937_64 rng(opt.seed);
  std::vector<detail::Anthropometry> bodies;
  for (int i = 0; i < opt.n_identities; ++i) bodies.push_back(detail::draw_anthropometry(rng));

  const int period = opt.gait_period > 0 ? opt.gait_period : opt.frames;
  std::uniform_real_distribution<double> phase0(0.0, 2.0 * std::numbers::pi);
  std::normal_distribution<double> jitter(0.0, 1.0);

  std::vector<SkeletonSequence> out;
  for (int i = 0; i < opt.n_identities; ++i) {
    for (int k = 0; k < opt.seqs_per_id; ++k) {
      SkeletonSequence s;
      s.seq_id = "id" + std::to_string(i) + "_s" + std::to_string(k);
      s.identity = i;
      s.view = "synthetic";
      s.joints = opt.joints;
      s.frames.resize(opt.frames, 3 * opt.joints);
      const double start = phase0(rng);
      for (int f = 0; f < opt.frames; ++f) {
        const double phase = start + 2.0 * std::numbers::pi * f / period;
        const auto full = detail::pose25(bodies[static_cast<std::size_t>(i)], phase);
        for (int j = 0; j < opt.joints; ++j) {
          int src = j;
          if (opt.joints == 20) src = detail::kinect_v1_from_v2()[static_cast<std::size_t>(j)];
          if (opt.joints == 14) src = detail::openpose14_from_v2()[static_cast<std::size_t>(j)];
          for (int c = 0; c < 3; ++c) {
            double v = full[static_cast<std::size_t>(src)][c];
            if (opt.noise_sigma > 0.0) v += opt.noise_sigma * jitter(rng);
            s.frames(f, 3 * j + c) = v;
          }
        }
      }
      out.push_back(std::move(s));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Probe / gallery / train split
// ---------------------------------------------------------------------------

/// Per identity, whole window groups go to the probe set (at least one,
/// or round(probe_fraction * groups) when larger), the rest are shuffled
/// and divided between train (the larger half) and gallery.
inline DatasetSplit make_split(const std::vector<SkeletonSequence>& seqs, double probe_fraction,
                               std::uint64_t seed) {
  require(probe_fraction >= 0.0 && probe_fraction < 1.0, "probe_fraction must be in [0, 1)");
  // identity -> group key -> member indices, each in first-seen order
  std::map<int, std::vector<std::string>> group_order;
  std::map<int, std::map<std::string, std::vector<std::size_t>>> groups;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    if (!seqs[i].identity) throw ValidationError("cannot split: sequence '" + seqs[i].seq_id + "' has no identity");
    const int id = *seqs[i].identity;
    const std::string key = window_group(seqs[i].seq_id);
    auto& g = groups[id];
    if (!g.contains(key)) group_order[id].push_back(key);
    g[key].push_back(i);
  }

  std::mt19937_64 rng(seed);
  DatasetSplit split;
  for (auto& [id, order] : group_order) {
    const int n = static_cast<int>(order.size());
    if (n < 3)
      throw ValidationError("cannot split: identity " + std::to_string(id) + " has " + std::to_string(n) +
                            " sequences, at least 3 are required");
    std::shuffle(order.begin(), order.end(), rng);
    int n_probe = std::max(1, static_cast<int>(std::lround(probe_fraction * n)));
    n_probe = std::min(n_probe, n - 2);
    const int rest = n - n_probe;
    const int n_train = (rest + 1) / 2;
    for (int g = 0; g < n; ++g) {
      auto& dest = g < n_probe ? split.probe : (g < n_probe + n_train ? split.train : split.gallery);
      for (auto idx : groups[id][order[static_cast<std::size_t>(g)]]) dest.push_back(seqs[idx]);
    }
  }
  return split;
}

}  // namespace himpc
