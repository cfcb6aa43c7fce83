#pragma once

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "diffseg/common.hpp"

namespace diffseg {

struct PlotSeries {
  std::string name;
  std::vector<double> x, y;
  std::vector<double> err;  // optional halfwidths, empty or same length as y
};

// Plain raster line plot with error bars; drawing is fully deterministic so
// reports are byte-stable.
inline void render_line_plot(const std::filesystem::path& path, const std::string& title,
                             const std::string& xlabel, const std::string& ylabel,
                             const std::vector<PlotSeries>& series) {
  require(!series.empty(), "plot: no series");
  const int width = 900, height = 600;
  const int ml = 80, mr = 30, mt = 50, mb = 70;
  cv::Mat canvas(height, width, CV_8UC3, cv::Scalar(255, 255, 255));

  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& s : series)
    for (size_t i = 0; i < s.x.size(); ++i) {
      double lo = s.y[i] - (i < s.err.size() ? s.err[i] : 0.0);
      double hi = s.y[i] + (i < s.err.size() ? s.err[i] : 0.0);
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, lo);
      ymax = std::max(ymax, hi);
    }
  if (xmax <= xmin) xmax = xmin + 1.0;
  if (ymax <= ymin) ymax = ymin + 1.0;
  double ypad = 0.05 * (ymax - ymin);
  ymin -= ypad;
  ymax += ypad;

  auto px = [&](double x) {
    return ml + static_cast<int>((x - xmin) / (xmax - xmin) * (width - ml - mr));
  };
  auto py = [&](double y) {
    return height - mb -
           static_cast<int>((y - ymin) / (ymax - ymin) * (height - mt - mb));
  };

  const cv::Scalar axis_color(60, 60, 60);
  cv::line(canvas, {ml, mt}, {ml, height - mb}, axis_color, 1);
  cv::line(canvas, {ml, height - mb}, {width - mr, height - mb}, axis_color, 1);
  for (int i = 0; i <= 5; ++i) {
    double yv = ymin + (ymax - ymin) * i / 5.0;
    int yy = py(yv);
    cv::line(canvas, {ml - 4, yy}, {ml, yy}, axis_color, 1);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.1f", yv);
    cv::putText(canvas, buf, {8, yy + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.4, axis_color, 1,
                cv::LINE_8);
    double xv = xmin + (xmax - xmin) * i / 5.0;
    int xx = px(xv);
    cv::line(canvas, {xx, height - mb}, {xx, height - mb + 4}, axis_color, 1);
    std::snprintf(buf, sizeof(buf), "%.2f", xv);
    cv::putText(canvas, buf, {xx - 18, height - mb + 20}, cv::FONT_HERSHEY_SIMPLEX, 0.4,
                axis_color, 1, cv::LINE_8);
  }
  cv::putText(canvas, title, {ml, mt - 20}, cv::FONT_HERSHEY_SIMPLEX, 0.7,
              cv::Scalar(0, 0, 0), 1, cv::LINE_8);
  cv::putText(canvas, xlabel, {width / 2 - 40, height - 20}, cv::FONT_HERSHEY_SIMPLEX,
              0.5, axis_color, 1, cv::LINE_8);
  cv::putText(canvas, ylabel, {8, mt - 4}, cv::FONT_HERSHEY_SIMPLEX, 0.5, axis_color, 1,
              cv::LINE_8);

  const std::vector<cv::Scalar> palette = {
      cv::Scalar(180, 60, 30), cv::Scalar(30, 110, 200), cv::Scalar(40, 150, 60),
      cv::Scalar(150, 40, 150), cv::Scalar(20, 140, 180)};
  for (size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const auto& color = palette[si % palette.size()];
    for (size_t i = 0; i < s.x.size(); ++i) {
      cv::Point p(px(s.x[i]), py(s.y[i]));
      if (i > 0)
        cv::line(canvas, {px(s.x[i - 1]), py(s.y[i - 1])}, p, color, 2, cv::LINE_8);
      cv::circle(canvas, p, 3, color, cv::FILLED, cv::LINE_8);
      if (i < s.err.size() && s.err[i] > 0) {
        cv::line(canvas, {p.x, py(s.y[i] - s.err[i])}, {p.x, py(s.y[i] + s.err[i])},
                 color, 1, cv::LINE_8);
        cv::line(canvas, {p.x - 3, py(s.y[i] - s.err[i])},
                 {p.x + 3, py(s.y[i] - s.err[i])}, color, 1, cv::LINE_8);
        cv::line(canvas, {p.x - 3, py(s.y[i] + s.err[i])},
                 {p.x + 3, py(s.y[i] + s.err[i])}, color, 1, cv::LINE_8);
      }
    }
    int ly = mt + 18 * static_cast<int>(si);
    cv::line(canvas, {width - mr - 140, ly}, {width - mr - 110, ly}, color, 2, cv::LINE_8);
    cv::putText(canvas, s.name, {width - mr - 104, ly + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.45,
                cv::Scalar(0, 0, 0), 1, cv::LINE_8);
  }

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  require_data(cv::imwrite(path.string(), canvas), "plot: write failed for ",
               path.string());
}

}  // namespace diffseg
