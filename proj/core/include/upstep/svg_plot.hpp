#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace upstep {

struct Series {
  std::string label;
  std::vector<double> x, y;
};

// Hand-emitted standalone SVG line chart (no external renderer). Throws
// ContractError on empty/ragged series.
std::string render_line_svg(const std::string& title, const std::string& x_label,
                            const std::string& y_label, const std::vector<Series>& series);

void write_svg(const std::filesystem::path& path, const std::string& svg);

}  // namespace upstep
