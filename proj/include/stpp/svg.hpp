#pragma once

// Minimal SVG writer with a data-space to pixel mapping (y up).

#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace stpp {

class SvgCanvas {
 public:
  SvgCanvas(double width, double height, double x0, double x1, double y0, double y1, double margin = 30);

  double px(double x) const;
  double py(double y) const;

  void rect_data(double x0, double y0, double x1, double y1, const std::string& fill, double opacity = 1.0);
  void circle(double x, double y, double r, const std::string& fill, const std::string& stroke = "none");
  void marker_star(double x, double y, double r, const std::string& fill);
  void line(double x0, double y0, double x1, double y1, const std::string& stroke, double width = 1.0);
  void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& stroke, double width = 1.0);
  void text(double x, double y, const std::string& s, double size = 12, const std::string& fill = "black");
  // Text at pixel coordinates.
  void label(double px, double py, const std::string& s, double size = 12, const std::string& fill = "black");
  void axes();

  std::string str() const;

 private:
  double w_, h_, x0_, x1_, y0_, y1_, m_;
  std::ostringstream body_;
};

}  // namespace stpp
