#include "stnas/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace stnas {

namespace {

constexpr double kWidth = 640, kHeight = 400, kLeft = 70, kRight = 20, kTop = 40, kBottom = 50;
const char* const kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd"};

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

}  // namespace

std::string line_chart_svg(const std::string& title, const std::string& y_label,
                           const std::vector<std::pair<std::string, std::vector<double>>>& series) {
  double lo = INFINITY, hi = -INFINITY;
  std::size_t n = 0;
  for (const auto& [_, ys] : series) {
    n = std::max(n, ys.size());
    for (double y : ys) {
      if (!std::isfinite(y)) continue;
      lo = std::min(lo, y);
      hi = std::max(hi, y);
    }
  }
  if (!std::isfinite(lo)) lo = 0.0, hi = 1.0;
  if (hi - lo < 1e-12) hi = lo + 1.0;
  const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
  auto px = [&](std::size_t i) { return kLeft + (n > 1 ? pw * static_cast<double>(i) / static_cast<double>(n - 1) : 0.0); };
  auto py = [&](double y) { return kTop + ph * (1.0 - (y - lo) / (hi - lo)); };

  std::ostringstream os;
  os << std::setprecision(6);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << kWidth / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">"
     << title << "</text>\n";
  os << "<line x1=\"" << kLeft << "\" y1=\"" << kTop + ph << "\" x2=\"" << kLeft + pw << "\" y2=\"" << kTop + ph
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kTop + ph
     << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double y = lo + (hi - lo) * t / 4.0;
    os << "<text x=\"" << kLeft - 6 << "\" y=\"" << py(y) + 4
       << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << y << "</text>\n";
  }
  os << "<text x=\"" << kLeft + pw / 2 << "\" y=\"" << kHeight - 12
     << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">epoch (0.." << (n ? n - 1 : 0)
     << ")</text>\n";
  os << "<text x=\"16\" y=\"" << kTop + ph / 2 << "\" transform=\"rotate(-90 16 " << kTop + ph / 2
     << ")\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << y_label << "</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = kColors[s % 4];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < series[s].second.size(); ++i) os << px(i) << ',' << py(series[s].second[i]) << ' ';
    os << "\"/>\n";
    os << "<text x=\"" << kLeft + pw - 4 << "\" y=\"" << kTop + 14 + 14 * static_cast<double>(s)
       << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\" fill=\"" << color << "\">"
       << series[s].first << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string search_summary(const std::vector<SearchLogRecord>& log) {
  if (log.empty()) throw std::invalid_argument("search log is empty");
  const auto best = std::min_element(log.begin(), log.end(),
                                     [](const auto& a, const auto& b) { return a.loss_val < b.loss_val; });
  std::int64_t skipped = 0;
  for (const auto& r : log) skipped += r.skipped_steps;
  std::ostringstream os;
  os << std::setprecision(6);
  os << "epochs            " << log.size() << '\n';
  os << "tau first/last    " << log.front().tau << " / " << log.back().tau << '\n';
  os << "loss_train first  " << log.front().loss_train << "  last " << log.back().loss_train << '\n';
  os << "loss_val first    " << log.front().loss_val << "  last " << log.back().loss_val << '\n';
  os << "best loss_val     " << best->loss_val << " at epoch " << best->epoch << '\n';
  os << "sharpness first   " << log.front().sharpness << "  last " << log.back().sharpness << '\n';
  os << "skipped steps     " << skipped << '\n';
  return os.str();
}

std::vector<std::filesystem::path> write_search_report(const std::vector<SearchLogRecord>& log,
                                                       const std::filesystem::path& out_dir) {
  const std::string summary = search_summary(log);
  std::vector<double> train, val, tau, sharp;
  for (const auto& r : log) {
    train.push_back(r.loss_train);
    val.push_back(r.loss_val);
    tau.push_back(r.tau);
    sharp.push_back(r.sharpness);
  }
  std::filesystem::create_directories(out_dir);
  std::vector<std::filesystem::path> paths{out_dir / "loss.svg", out_dir / "tau.svg", out_dir / "sharpness.svg",
                                           out_dir / "summary.txt"};
  write_file(paths[0], line_chart_svg("search losses", "loss", {{"train", train}, {"val", val}}));
  write_file(paths[1], line_chart_svg("temperature", "tau", {{"tau", tau}}));
  write_file(paths[2], line_chart_svg("mean max softmax(alpha / tau)", "sharpness", {{"sharpness", sharp}}));
  write_file(paths[3], summary);
  return paths;
}

}  // namespace stnas
