#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "topoforge/fem.hpp"

namespace topoforge {

// The eight anchor sites on the square domain boundary.
enum class AnchorSite {
  CornerBottomLeft,
  CornerBottomRight,
  CornerTopRight,
  CornerTopLeft,
  MidBottom,
  MidRight,
  MidTop,
  MidLeft,
};

inline constexpr int kAnchorSiteCount = 8;

enum class AnchorKind { CornerPoint, EdgeMidpoint, Segment };

struct AnchorSpec {
  AnchorKind kind = AnchorKind::CornerPoint;
  AnchorSite location = AnchorSite::CornerBottomLeft;
  AnchorSite segment_end = AnchorSite::CornerBottomLeft;  // used when kind == Segment

  static AnchorSpec point(AnchorSite site);
  static AnchorSpec segment(AnchorSite from, AnchorSite to);

  // Throws std::invalid_argument when the kind does not match the site(s) or
  // the segment endpoints do not share an edge.
  void validate() const;
  bool operator==(const AnchorSpec&) const = default;
};

std::string_view to_string(AnchorSite site);
std::optional<AnchorSite> parse_anchor_site(std::string_view name);
bool is_corner(AnchorSite site);

// Node (i, j) of an anchor site on the given domain.
std::pair<int, int> anchor_site_node(const fem::DesignDomain& domain, AnchorSite site);

// Nodes covered by an anchor: one node for points, every node along the edge path for segments.
std::vector<int> anchor_nodes(const fem::DesignDomain& domain, const AnchorSpec& anchor);

// Both DOFs of every anchored node.
fem::Supports supports_from_anchors(const fem::DesignDomain& domain,
                                    const std::vector<AnchorSpec>& anchors);

struct Problem {
  fem::DesignDomain domain;
  std::vector<AnchorSpec> anchors;
  fem::Supports supports;
  fem::LoadSpec load;
  double volume_fraction = 0.4;
  std::uint64_t seed = 0;

  // Load node position normalized to [0, 1] over the domain.
  double load_x() const;
  double load_y() const;

  // Supports non-empty and rigid-body free, load node on the boundary and not
  // fixed, 0 < f < 1. Throws std::invalid_argument with the failing rule.
  void validate() const;
};

Problem make_problem(const fem::DesignDomain& domain, std::vector<AnchorSpec> anchors,
                     int load_node, double angle_rad, double volume_fraction,
                     std::uint64_t seed = 0);

// Left edge clamped, unit downward load at the right mid-edge node.
Problem cantilever_problem(int nx = 64, int ny = 64, double volume_fraction = 0.4);

// Node on the boundary nearest to normalized coordinates (x, y) in [0, 1]^2.
int nearest_boundary_node(const fem::DesignDomain& domain, double x, double y);

}  // namespace topoforge
