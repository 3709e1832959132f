#include "topoforge/grid_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace topoforge::io {

std::pair<double, double> direction_from_degrees(double deg) {
  const double turns = deg / 90.0;
  if (turns == std::round(turns)) {
    switch (((static_cast<long long>(std::round(turns)) % 4) + 4) % 4) {
      case 0: return {1.0, 0.0};
      case 1: return {0.0, 1.0};
      case 2: return {-1.0, 0.0};
      default: return {0.0, -1.0};
    }
  }
  const double rad = deg * M_PI / 180.0;
  return {std::cos(rad), std::sin(rad)};
}

namespace {

AnchorSite site_or_throw(const std::string& name, const std::string& source, int line) {
  if (auto s = parse_anchor_site(name)) return *s;
  std::string all;
  for (int k = 0; k < kAnchorSiteCount; ++k) all += std::string(k ? ", " : "") + std::string(to_string(AnchorSite(k)));
  throw FormatError(source, line, "unknown anchor site '" + name + "' (expected one of " + all + ")");
}

std::ifstream open_in(const std::string& path, std::ios::openmode mode = std::ios::in) {
  std::ifstream in(path, mode);
  if (!in) throw std::runtime_error("cannot open " + path);
  return in;
}

std::ofstream open_out(const std::string& path, std::ios::openmode mode = std::ios::out) {
  std::ofstream out(path, mode | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  return out;
}

}  // namespace

Problem parse_problem(std::istream& in, const std::string& source) {
  int nx = 0, ny = 0, load_i = -1, load_j = -1;
  double angle = 0.0, f = -1.0;
  bool have_grid = false, have_load = false;
  std::vector<AnchorSpec> anchors;
  std::vector<int> anchor_lines;

  std::string raw;
  for (int line = 1; std::getline(in, raw); ++line) {
    if (auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
    std::istringstream ls(raw);
    std::string key;
    if (!(ls >> key)) continue;
    auto fail = [&](const std::string& what) -> void { throw FormatError(source, line, what); };
    if (key == "grid") {
      if (!(ls >> nx >> ny)) fail("expected 'grid <nx> <ny>'");
      if (nx < 1 || ny < 1) fail("grid dimensions must be positive");
      have_grid = true;
    } else if (key == "anchor") {
      std::string kind, a, b;
      if (!(ls >> kind >> a)) fail("expected 'anchor point <site>' or 'anchor segment <site> <site>'");
      if (kind == "point") {
        anchors.push_back(AnchorSpec::point(site_or_throw(a, source, line)));
      } else if (kind == "segment") {
        if (!(ls >> b)) fail("segment anchors need two sites");
        anchors.push_back(AnchorSpec::segment(site_or_throw(a, source, line), site_or_throw(b, source, line)));
      } else {
        fail("anchor kind must be 'point' or 'segment', got '" + kind + "'");
      }
      try {
        anchors.back().validate();
      } catch (const std::invalid_argument& e) {
        fail(e.what());
      }
      anchor_lines.push_back(line);
    } else if (key == "load") {
      if (!(ls >> load_i >> load_j >> angle)) fail("expected 'load <i> <j> <angle-degrees>'");
      if (!std::isfinite(angle)) fail("load angle must be finite");
      have_load = true;
    } else if (key == "volume_fraction") {
      if (!(ls >> f)) fail("expected 'volume_fraction <f>'");
    } else {
      fail("unknown directive '" + key + "'");
    }
    std::string extra;
    if (ls >> extra) fail("unexpected trailing text '" + extra + "'");
  }

  if (!have_grid) throw FormatError(source, 0, "missing 'grid' line");
  if (!have_load) throw FormatError(source, 0, "missing 'load' line");
  if (f < 0) throw FormatError(source, 0, "missing 'volume_fraction' line");
  if (anchors.empty()) throw FormatError(source, 0, "at least one anchor is required");
  if (load_i < 0 || load_i > nx || load_j < 0 || load_j > ny)
    throw FormatError(source, 0, "load node lies outside the " + std::to_string(nx) + "x" + std::to_string(ny) + " grid");

  fem::DesignDomain d;
  d.nx = nx;
  d.ny = ny;
  Problem p = make_problem(d, anchors, d.node_index(load_i, load_j), 0.0, f);
  const auto [fx, fy] = direction_from_degrees(angle);
  p.load.fx = fx;
  p.load.fy = fy;
  p.validate();
  return p;
}

Problem load_problem(const std::string& path) {
  auto in = open_in(path);
  return parse_problem(in, path);
}

void write_problem(std::ostream& out, const Problem& p) {
  out << "grid " << p.domain.nx << ' ' << p.domain.ny << '\n';
  for (const auto& a : p.anchors) {
    if (a.kind == AnchorKind::Segment)
      out << "anchor segment " << to_string(a.location) << ' ' << to_string(a.segment_end) << '\n';
    else
      out << "anchor point " << to_string(a.location) << '\n';
  }
  const double deg = std::atan2(p.load.fy, p.load.fx) * 180.0 / M_PI;
  out << std::setprecision(17) << "load " << p.domain.node_i(p.load.node) << ' ' << p.domain.node_j(p.load.node) << ' '
      << deg << '\n'
      << "volume_fraction " << p.volume_fraction << '\n';
}

bool is_problem_preset(const std::string& name) { return name == "cantilever" || name == "bridge"; }

Problem problem_preset(const std::string& name, int grid, double f) {
  if (grid < 2) throw std::invalid_argument("preset grid size must be at least 2");
  if (name == "cantilever") {
    auto p = cantilever_problem(grid, grid, f);
    p.validate();
    return p;
  }
  if (name == "bridge") {
    fem::DesignDomain d;
    d.nx = d.ny = grid;
    auto p = make_problem(d, {AnchorSpec::point(AnchorSite::CornerBottomLeft), AnchorSpec::point(AnchorSite::CornerBottomRight)},
                          d.node_index(grid / 2, grid), 0.0, f);
    p.load.fx = 0.0;
    p.load.fy = -1.0;
    p.validate();
    return p;
  }
  throw std::invalid_argument("unknown problem preset '" + name + "' (expected cantilever or bridge)");
}

void write_grid_text(std::ostream& out, const fem::Field& g) {
  out << g.nx << ' ' << g.ny << '\n' << std::setprecision(17);
  for (int r = 0; r < g.ny; ++r) {
    for (int c = 0; c < g.nx; ++c) out << (c ? " " : "") << g.at(c, r);
    out << '\n';
  }
}

fem::Field read_grid_text(std::istream& in, const std::string& source) {
  int nx = 0, ny = 0;
  if (!(in >> nx >> ny) || nx < 1 || ny < 1) throw FormatError(source, 1, "expected a '<nx> <ny>' header");
  fem::Field g(nx, ny);
  for (std::size_t k = 0; k < g.size(); ++k)
    if (!(in >> g.values[k]))
      throw FormatError(source, 0, "expected " + std::to_string(g.size()) + " values, got " + std::to_string(k));
  std::string extra;
  if (in >> extra) throw FormatError(source, 0, "unexpected trailing value '" + extra + "'");
  return g;
}

void write_grid_text_file(const std::string& path, const fem::Field& g) {
  auto out = open_out(path);
  write_grid_text(out, g);
  if (!out) throw std::runtime_error("write failed: " + path);
}

fem::Field read_grid_text_file(const std::string& path) {
  auto in = open_in(path);
  return read_grid_text(in, path);
}

void write_pgm(std::ostream& out, const fem::Field& g) {
  out << "P5\n" << g.nx << ' ' << g.ny << "\n255\n";
  std::string row(static_cast<std::size_t>(g.nx), '\0');
  for (int r = g.ny - 1; r >= 0; --r) {
    for (int c = 0; c < g.nx; ++c) {
      const double v = std::clamp(g.at(c, r), 0.0, 1.0);
      row[c] = static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * (1.0 - v))));
    }
    out.write(row.data(), static_cast<std::streamsize>(row.size()));
  }
}

void write_pgm_file(const std::string& path, const fem::Field& g) {
  auto out = open_out(path, std::ios::binary);
  write_pgm(out, g);
  if (!out) throw std::runtime_error("write failed: " + path);
}

fem::Field field_from(std::span<const float> values, int nx, int ny) {
  if (values.size() != static_cast<std::size_t>(nx) * ny) throw std::invalid_argument("grid size mismatch");
  fem::Field g(nx, ny);
  std::copy(values.begin(), values.end(), g.values.begin());
  return g;
}

}  // namespace topoforge::io
