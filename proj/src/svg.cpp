#include "stpp/svg.hpp"

#include <cmath>
#include <iomanip>

#include "stpp/errors.hpp"

namespace stpp {

namespace {

std::string num(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << v;
  return s.str();
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

SvgCanvas::SvgCanvas(double width, double height, double x0, double x1, double y0, double y1, double margin)
    : w_(width), h_(height), x0_(x0), x1_(x1), y0_(y0), y1_(y1), m_(margin) {
  if (!(x1 > x0) || !(y1 > y0) || !(width > 2 * margin) || !(height > 2 * margin))
    throw DomainError("svg: empty plotting range");
}

double SvgCanvas::px(double x) const { return m_ + (x - x0_) / (x1_ - x0_) * (w_ - 2 * m_); }
double SvgCanvas::py(double y) const { return h_ - m_ - (y - y0_) / (y1_ - y0_) * (h_ - 2 * m_); }

void SvgCanvas::rect_data(double x0, double y0, double x1, double y1, const std::string& fill, double opacity) {
  const double a = px(x0), b = px(x1), c = py(y1), d = py(y0);
  body_ << "<rect x=\"" << num(a) << "\" y=\"" << num(c) << "\" width=\"" << num(b - a) << "\" height=\"" << num(d - c)
        << "\" fill=\"" << fill << "\" fill-opacity=\"" << num(opacity) << "\"/>\n";
}

void SvgCanvas::circle(double x, double y, double r, const std::string& fill, const std::string& stroke) {
  body_ << "<circle cx=\"" << num(px(x)) << "\" cy=\"" << num(py(y)) << "\" r=\"" << num(r) << "\" fill=\"" << fill
        << "\" stroke=\"" << stroke << "\"/>\n";
}

void SvgCanvas::marker_star(double x, double y, double r, const std::string& fill) {
  const double cx = px(x), cy = py(y);
  body_ << "<polygon points=\"";
  for (int k = 0; k < 10; ++k) {
    const double rad = k % 2 == 0 ? r : r * 0.45;
    const double a = -M_PI / 2 + k * M_PI / 5;
    body_ << num(cx + rad * std::cos(a)) << "," << num(cy + rad * std::sin(a)) << (k < 9 ? " " : "");
  }
  body_ << "\" fill=\"" << fill << "\" stroke=\"black\" stroke-width=\"1\"/>\n";
}

void SvgCanvas::line(double x0, double y0, double x1, double y1, const std::string& stroke, double width) {
  body_ << "<line x1=\"" << num(px(x0)) << "\" y1=\"" << num(py(y0)) << "\" x2=\"" << num(px(x1)) << "\" y2=\""
        << num(py(y1)) << "\" stroke=\"" << stroke << "\" stroke-width=\"" << num(width) << "\"/>\n";
}

void SvgCanvas::polyline(const std::vector<std::pair<double, double>>& pts, const std::string& stroke, double width) {
  body_ << "<polyline fill=\"none\" stroke=\"" << stroke << "\" stroke-width=\"" << num(width) << "\" points=\"";
  for (std::size_t i = 0; i < pts.size(); ++i)
    body_ << num(px(pts[i].first)) << "," << num(py(pts[i].second)) << (i + 1 < pts.size() ? " " : "");
  body_ << "\"/>\n";
}

void SvgCanvas::text(double x, double y, const std::string& s, double size, const std::string& fill) {
  label(px(x), py(y), s, size, fill);
}

void SvgCanvas::label(double x, double y, const std::string& s, double size, const std::string& fill) {
  body_ << "<text x=\"" << num(x) << "\" y=\"" << num(y) << "\" font-size=\"" << num(size)
        << "\" font-family=\"sans-serif\" fill=\"" << fill << "\">" << escape(s) << "</text>\n";
}

void SvgCanvas::axes() {
  body_ << "<rect x=\"" << num(m_) << "\" y=\"" << num(m_) << "\" width=\"" << num(w_ - 2 * m_) << "\" height=\""
        << num(h_ - 2 * m_) << "\" fill=\"none\" stroke=\"black\"/>\n";
  label(m_, h_ - m_ + 14, num(x0_), 10);
  label(w_ - m_ - 20, h_ - m_ + 14, num(x1_), 10);
  label(2, h_ - m_, num(y0_), 10);
  label(2, m_ + 10, num(y1_), 10);
}

std::string SvgCanvas::str() const {
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(w_) << "\" height=\"" << num(h_)
    << "\" viewBox=\"0 0 " << num(w_) << " " << num(h_) << "\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << body_.str() << "</svg>\n";
  return s.str();
}

}  // namespace stpp
