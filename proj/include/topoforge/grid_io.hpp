#pragma once

// Plain-text problem files and grid output.
//
// Problem file, one directive per line, '#' starts a comment:
//   grid 64 64
//   anchor segment corner-bl corner-tl     (or: anchor point mid-right)
//   load 64 32 -90                         node i j, angle in degrees
//   volume_fraction 0.4
//
// Grid text: a "nx ny" line, then ny rows of nx values, row r = 0 first.
// PGM: binary P5, 8-bit, solid black; the top image row is r = ny - 1 so the
// picture has y pointing up.

#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>

#include "topoforge/fem.hpp"
#include "topoforge/problem.hpp"

namespace topoforge::io {

class FormatError : public std::invalid_argument {
 public:
  FormatError(const std::string& source, int line, const std::string& what)
      : std::invalid_argument(source + (line > 0 ? ":" + std::to_string(line) : "") + ": " + what) {}
};

// Parses and validates. Throws FormatError for syntax problems and
// std::invalid_argument for a problem that fails validation.
Problem parse_problem(std::istream& in, const std::string& source = "<problem>");
Problem load_problem(const std::string& path);
void write_problem(std::ostream& out, const Problem& problem);

// Unit force direction; multiples of 90 degrees give exact axis vectors.
std::pair<double, double> direction_from_degrees(double deg);

// Presets by name: "cantilever" (left edge clamped, downward load at the right
// mid-edge) and "bridge" (bottom corners pinned, downward load at the top middle).
bool is_problem_preset(const std::string& name);
Problem problem_preset(const std::string& name, int grid = 64, double volume_fraction = 0.4);

void write_grid_text(std::ostream& out, const fem::Field& grid);
fem::Field read_grid_text(std::istream& in, const std::string& source = "<grid>");
void write_grid_text_file(const std::string& path, const fem::Field& grid);
fem::Field read_grid_text_file(const std::string& path);

// Values are clamped to [0, 1]; 1 maps to black.
void write_pgm(std::ostream& out, const fem::Field& grid);
void write_pgm_file(const std::string& path, const fem::Field& grid);

fem::Field field_from(std::span<const float> values, int nx, int ny);

}  // namespace topoforge::io
