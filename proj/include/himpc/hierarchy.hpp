#pragma once

// Joint-, component- and limb-level skeleton representations. Each level
// partitions the joints into disjoint groups and replaces every group by
// the centroid of its members.

#include "himpc/core.hpp"
#include "himpc/skeleton_io.hpp"

#include <json.hpp>

#include <array>
#include <fstream>
#include <map>
#include <mutex>
#include <string>
#include <vector>

namespace himpc {

inline constexpr int kLevels = 3;

struct PartitionTable {
  int level = 1;  // 1 = joint, 2 = component, 3 = limb
  int joints = 0;
  std::vector<std::vector<int>> groups;

  int size() const { return static_cast<int>(groups.size()); }
  bool operator==(const PartitionTable&) const = default;
};

using PartitionSet = std::array<PartitionTable, kLevels>;

inline void validate_partition(const PartitionTable& t) {
  const std::string tag = "partition level " + std::to_string(t.level);
  require(t.joints > 0, tag + ": joint count must be positive");
  require(!t.groups.empty(), tag + ": no groups");
  std::vector<int> seen(static_cast<std::size_t>(t.joints), 0);
  for (const auto& g : t.groups) {
    require(!g.empty(), tag + ": empty group");
    for (int j : g) {
      require(j >= 0 && j < t.joints, tag + ": joint index " + std::to_string(j) + " out of range");
      require(seen[static_cast<std::size_t>(j)]++ == 0, tag + ": joint " + std::to_string(j) + " appears twice");
    }
  }
  for (int j = 0; j < t.joints; ++j)
    require(seen[static_cast<std::size_t>(j)] == 1, tag + ": joint " + std::to_string(j) + " not covered");
}

inline void validate_partitions(const PartitionSet& set) {
  for (int l = 0; l < kLevels; ++l) {
    require(set[l].level == l + 1, "partition levels must be ordered 1, 2, 3");
    require(set[l].joints == set[0].joints, "partition levels disagree on joint count");
    validate_partition(set[l]);
  }
  for (const auto& g : set[0].groups) require(g.size() == 1, "level-1 partition must be singleton joints");
}

namespace detail {

inline PartitionTable singletons(int J) {
  PartitionTable t{1, J, {}};
  for (int j = 0; j < J; ++j) t.groups.push_back({j});
  return t;
}

// Component level: head, trunk, L upper arm, L forearm+hand, R upper arm,
// R forearm+hand, L thigh, L shank+foot, R thigh, R shank+foot.
// Limb level: head+torso, L arm, R arm, L leg, R leg.
inline PartitionSet make_builtin(int J) {
  PartitionSet s;
  s[0] = singletons(J);
  s[1].level = 2;
  s[2].level = 3;
  s[1].joints = s[2].joints = J;
  switch (J) {
    case 20:  // Kinect v1
      s[1].groups = {{2, 3}, {0, 1}, {4, 5}, {6, 7}, {8, 9}, {10, 11}, {12, 13}, {14, 15}, {16, 17}, {18, 19}};
      s[2].groups = {{0, 1, 2, 3}, {4, 5, 6, 7}, {8, 9, 10, 11}, {12, 13, 14, 15}, {16, 17, 18, 19}};
      break;
    case 25:  // Kinect v2
      s[1].groups = {{2, 3},   {0, 1, 20}, {4, 5},   {6, 7, 21, 22}, {8, 9},
                     {10, 11, 23, 24}, {12, 13}, {14, 15}, {16, 17}, {18, 19}};
      s[2].groups = {{0, 1, 2, 3, 20}, {4, 5, 6, 7, 21, 22}, {8, 9, 10, 11, 23, 24}, {12, 13, 14, 15},
                     {16, 17, 18, 19}};
      break;
    case 14:  // head, neck, R sh/el/wr, L sh/el/wr, R hip/knee/ankle, L hip/knee/ankle
      s[1].groups = {{0}, {1}, {5, 6}, {7}, {2, 3}, {4}, {11, 12}, {13}, {8, 9}, {10}};
      s[2].groups = {{0, 1}, {5, 6, 7}, {2, 3, 4}, {11, 12, 13}, {8, 9, 10}};
      break;
    default:
      throw ValidationError("no partition table for J=" + std::to_string(J));
  }
  return s;
}

struct PartitionRegistry {
  std::mutex mu;
  std::map<int, PartitionSet> custom;
};

inline PartitionRegistry& registry() {
  static PartitionRegistry r;
  return r;
}

}  // namespace detail

/// Makes a user table available to builtin_partitions() for its J.
inline void register_partitions(const PartitionSet& set) {
  validate_partitions(set);
  auto& r = detail::registry();
  std::lock_guard lock(r.mu);
  r.custom[set[0].joints] = set;
}

inline PartitionSet builtin_partitions(int J) {
  {
    auto& r = detail::registry();
    std::lock_guard lock(r.mu);
    if (auto it = r.custom.find(J); it != r.custom.end()) return it->second;
  }
  if (!is_builtin_joint_count(J))
    throw ValidationError("unsupported joint count J=" + std::to_string(J) +
                          " (built-in tables exist for 14, 20, 25; register a custom table)");
  return detail::make_builtin(J);
}

/// {"J": int, "levels": [[[idx,...],...] x 3]}
inline PartitionSet partitions_from_json(const nlohmann::json& doc) {
  PartitionSet set;
  try {
    const int J = doc.at("J").get<int>();
    const auto& levels = doc.at("levels");
    require(levels.is_array() && levels.size() == kLevels, "partition file needs exactly 3 levels");
    for (int l = 0; l < kLevels; ++l) {
      set[l].level = l + 1;
      set[l].joints = J;
      set[l].groups = levels[static_cast<std::size_t>(l)].get<std::vector<std::vector<int>>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed partition table: ") + e.what());
  }
  validate_partitions(set);
  return set;
}

inline nlohmann::json partitions_to_json(const PartitionSet& set) {
  nlohmann::json levels = nlohmann::json::array();
  for (const auto& t : set) levels.push_back(t.groups);
  return {{"J", set[0].joints}, {"levels", levels}};
}

inline PartitionSet load_partitions(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open partition file " + path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path + ": " + e.what());
  }
  return partitions_from_json(doc);
}

struct HierarchicalSequence {
  std::string seq_id;
  std::array<Matrix, kLevels> levels;  // level l: F x 3 n_l
};

/// Centroids of one partition level, frame by frame.
inline Matrix level_representation(const Matrix& frames, const PartitionTable& table) {
  require(frames.cols() == 3 * table.joints,
          "sequence has " + std::to_string(frames.cols() / 3) + " joints, partition table expects " +
              std::to_string(table.joints));
  Matrix out = Matrix::Zero(frames.rows(), 3 * table.size());
  for (int g = 0; g < table.size(); ++g) {
    const auto& members = table.groups[static_cast<std::size_t>(g)];
    for (int j : members) out.middleCols(3 * g, 3) += frames.middleCols(3 * j, 3);
    out.middleCols(3 * g, 3) /= static_cast<double>(members.size());
  }
  return out;
}

inline HierarchicalSequence build_hierarchy(const std::string& seq_id, const Matrix& frames,
                                            const PartitionSet& tables) {
  HierarchicalSequence h;
  h.seq_id = seq_id;
  for (int l = 0; l < kLevels; ++l) h.levels[l] = level_representation(frames, tables[l]);
  return h;
}

inline HierarchicalSequence build_hierarchy(const SkeletonSequence& seq, const PartitionSet& tables) {
  return build_hierarchy(seq.seq_id, seq.frames, tables);
}

inline HierarchicalSequence build_hierarchy(const UnlabeledSequence& seq, const PartitionSet& tables) {
  return build_hierarchy(seq.seq_id, seq.frames, tables);
}

}  // namespace himpc
