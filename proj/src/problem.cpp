#include "topoforge/problem.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace topoforge {

namespace {

constexpr std::array<std::string_view, kAnchorSiteCount> kSiteNames = {
    "corner-bl", "corner-br", "corner-tr", "corner-tl",
    "mid-bottom", "mid-right", "mid-top", "mid-left",
};

enum class Edge { Bottom, Right, Top, Left };

// Edges a site lies on (corners lie on two).
std::vector<Edge> edges_of(AnchorSite s) {
  switch (s) {
    case AnchorSite::CornerBottomLeft: return {Edge::Bottom, Edge::Left};
    case AnchorSite::CornerBottomRight: return {Edge::Bottom, Edge::Right};
    case AnchorSite::CornerTopRight: return {Edge::Top, Edge::Right};
    case AnchorSite::CornerTopLeft: return {Edge::Top, Edge::Left};
    case AnchorSite::MidBottom: return {Edge::Bottom};
    case AnchorSite::MidRight: return {Edge::Right};
    case AnchorSite::MidTop: return {Edge::Top};
    case AnchorSite::MidLeft: return {Edge::Left};
  }
  return {};
}

std::optional<Edge> shared_edge(AnchorSite a, AnchorSite b) {
  for (Edge ea : edges_of(a))
    for (Edge eb : edges_of(b))
      if (ea == eb) return ea;
  return std::nullopt;
}

}  // namespace

std::string_view to_string(AnchorSite site) { return kSiteNames[static_cast<int>(site)]; }

std::optional<AnchorSite> parse_anchor_site(std::string_view name) {
  for (int k = 0; k < kAnchorSiteCount; ++k)
    if (kSiteNames[k] == name) return static_cast<AnchorSite>(k);
  return std::nullopt;
}

bool is_corner(AnchorSite site) { return static_cast<int>(site) < 4; }

AnchorSpec AnchorSpec::point(AnchorSite site) {
  AnchorSpec a;
  a.kind = is_corner(site) ? AnchorKind::CornerPoint : AnchorKind::EdgeMidpoint;
  a.location = site;
  a.segment_end = site;
  return a;
}

AnchorSpec AnchorSpec::segment(AnchorSite from, AnchorSite to) {
  AnchorSpec a;
  a.kind = AnchorKind::Segment;
  a.location = from;
  a.segment_end = to;
  return a;
}

void AnchorSpec::validate() const {
  switch (kind) {
    case AnchorKind::CornerPoint:
      if (!is_corner(location)) throw std::invalid_argument("corner-point anchor must sit on a corner");
      return;
    case AnchorKind::EdgeMidpoint:
      if (is_corner(location)) throw std::invalid_argument("edge-midpoint anchor must sit on an edge midpoint");
      return;
    case AnchorKind::Segment:
      if (location == segment_end) throw std::invalid_argument("segment endpoints must be distinct");
      if (!shared_edge(location, segment_end))
        throw std::invalid_argument(std::string("segment ") + std::string(to_string(location)) + " -> " +
                                    std::string(to_string(segment_end)) + " does not follow one edge");
      return;
  }
}

std::pair<int, int> anchor_site_node(const fem::DesignDomain& d, AnchorSite site) {
  const int mx = d.nx / 2, my = d.ny / 2;
  switch (site) {
    case AnchorSite::CornerBottomLeft: return {0, 0};
    case AnchorSite::CornerBottomRight: return {d.nx, 0};
    case AnchorSite::CornerTopRight: return {d.nx, d.ny};
    case AnchorSite::CornerTopLeft: return {0, d.ny};
    case AnchorSite::MidBottom: return {mx, 0};
    case AnchorSite::MidRight: return {d.nx, my};
    case AnchorSite::MidTop: return {mx, d.ny};
    case AnchorSite::MidLeft: return {0, my};
  }
  return {0, 0};
}

std::vector<int> anchor_nodes(const fem::DesignDomain& d, const AnchorSpec& anchor) {
  anchor.validate();
  const auto [i0, j0] = anchor_site_node(d, anchor.location);
  if (anchor.kind != AnchorKind::Segment) return {d.node_index(i0, j0)};
  const auto [i1, j1] = anchor_site_node(d, anchor.segment_end);
  std::vector<int> nodes;
  if (j0 == j1) {
    for (int i = std::min(i0, i1); i <= std::max(i0, i1); ++i) nodes.push_back(d.node_index(i, j0));
  } else {
    for (int j = std::min(j0, j1); j <= std::max(j0, j1); ++j) nodes.push_back(d.node_index(i0, j));
  }
  return nodes;
}

fem::Supports supports_from_anchors(const fem::DesignDomain& d, const std::vector<AnchorSpec>& anchors) {
  std::vector<int> dofs;
  for (const auto& a : anchors)
    for (int n : anchor_nodes(d, a)) {
      dofs.push_back(2 * n);
      dofs.push_back(2 * n + 1);
    }
  return fem::Supports::from_dofs(std::move(dofs));
}

double Problem::load_x() const { return static_cast<double>(domain.node_i(load.node)) / domain.nx; }
double Problem::load_y() const { return static_cast<double>(domain.node_j(load.node)) / domain.ny; }

void Problem::validate() const {
  domain.validate();
  if (supports.empty()) throw std::invalid_argument("problem has no supports");
  for (int dof : supports.fixed_dofs)
    if (dof < 0 || dof >= domain.dof_count()) throw std::invalid_argument("support DOF outside the mesh");
  if (!fem::constrains_rigid_body_modes(domain, supports))
    throw std::invalid_argument("supports leave a rigid-body mode unrestrained");
  if (!domain.is_boundary_node(load.node)) throw std::invalid_argument("load node must lie on the boundary");
  if (supports.is_fixed(2 * load.node) || supports.is_fixed(2 * load.node + 1))
    throw std::invalid_argument("load node coincides with a fixed DOF");
  if (!(volume_fraction > 0.0 && volume_fraction < 1.0))
    throw std::invalid_argument("volume fraction must lie in (0, 1)");
  if (!std::isfinite(load.fx) || !std::isfinite(load.fy)) throw std::invalid_argument("load is not finite");
}

Problem make_problem(const fem::DesignDomain& domain, std::vector<AnchorSpec> anchors, int load_node,
                     double angle_rad, double volume_fraction, std::uint64_t seed) {
  Problem p;
  p.domain = domain;
  p.supports = supports_from_anchors(domain, anchors);
  p.anchors = std::move(anchors);
  p.load = fem::LoadSpec{load_node, std::cos(angle_rad), std::sin(angle_rad)};
  p.volume_fraction = volume_fraction;
  p.seed = seed;
  return p;
}

Problem cantilever_problem(int nx, int ny, double volume_fraction) {
  fem::DesignDomain d;
  d.nx = nx;
  d.ny = ny;
  Problem p = make_problem(d, {AnchorSpec::segment(AnchorSite::CornerBottomLeft, AnchorSite::CornerTopLeft)},
                           d.node_index(nx, ny / 2), -M_PI / 2.0, volume_fraction);
  p.load.fx = 0.0;
  p.load.fy = -1.0;
  return p;
}

int nearest_boundary_node(const fem::DesignDomain& d, double x, double y) {
  const double gx = x * d.nx, gy = y * d.ny;
  int best = -1;
  double best_dist = std::numeric_limits<double>::infinity();
  for (int n = 0; n < d.node_count(); ++n) {
    if (!d.is_boundary_node(n)) continue;
    const double dx = d.node_i(n) - gx, dy = d.node_j(n) - gy;
    const double dist = dx * dx + dy * dy;
    if (dist < best_dist) {
      best_dist = dist;
      best = n;
    }
  }
  return best;
}

}  // namespace topoforge
