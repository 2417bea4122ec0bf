#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "stnas/search.hpp"

namespace stnas {

/// Minimal line chart as a standalone SVG document.
std::string line_chart_svg(const std::string& title, const std::string& y_label,
                           const std::vector<std::pair<std::string, std::vector<double>>>& series);

std::string search_summary(const std::vector<SearchLogRecord>& log);

/// Writes loss.svg, tau.svg, sharpness.svg and summary.txt; returns the written paths.
std::vector<std::filesystem::path> write_search_report(const std::vector<SearchLogRecord>& log,
                                                       const std::filesystem::path& out_dir);

}  // namespace stnas
