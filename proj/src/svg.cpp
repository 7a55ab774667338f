#include "groklab/svg.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace groklab::svg {

namespace {

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                          "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string num(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

}  // namespace

std::string line_chart(const std::vector<Series>& series, const ChartOptions& o) {
  const double left = 60, right = 140, top = 30, bottom = 45;
  const double pw = o.width - left - right, ph = o.height - top - bottom;
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
  double ymin = xmin, ymax = -xmin;
  auto tx = [&](double x) { return o.log_x ? std::log10(x) : x; };
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.xs.size(); ++i) {
      if (o.log_x && !(s.xs[i] > 0)) continue;
      xmin = std::min(xmin, tx(s.xs[i]));
      xmax = std::max(xmax, tx(s.xs[i]));
      ymin = std::min(ymin, s.ys[i]);
      ymax = std::max(ymax, s.ys[i]);
    }
  }
  if (!std::isfinite(xmin)) xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  if (xmax == xmin) xmax = xmin + 1;
  ymin = std::min(ymin, 0.0);
  if (ymax <= ymin) ymax = ymin + 1;
  auto px = [&](double x) { return left + (tx(x) - xmin) / (xmax - xmin) * pw; };
  auto py = [&](double y) { return top + (1.0 - (y - ymin) / (ymax - ymin)) * ph; };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << o.width << "\" height=\"" << o.height
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << left << "\" y=\"18\" font-size=\"13\">" << escape(o.title) << "</text>\n";
  os << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
     << "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double yv = ymin + (ymax - ymin) * i / 4.0;
    const double xv = xmin + (xmax - xmin) * i / 4.0;
    os << "<text x=\"" << left - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << num(yv)
       << "</text>\n";
    const double xpix = left + pw * i / 4.0;
    os << "<text x=\"" << xpix << "\" y=\"" << top + ph + 15 << "\" text-anchor=\"middle\">"
       << (o.log_x ? "1e" + num(xv) : num(xv)) << "</text>\n";
  }
  os << "<text x=\"" << left + pw / 2 << "\" y=\"" << o.height - 8 << "\" text-anchor=\"middle\">"
     << escape(o.x_label) << "</text>\n";
  os << "<text x=\"14\" y=\"" << top + ph / 2 << "\" transform=\"rotate(-90 14 " << top + ph / 2
     << ")\" text-anchor=\"middle\">" << escape(o.y_label) << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = kPalette[k % std::size(kPalette)];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.xs.size(); ++i) {
      if (o.log_x && !(s.xs[i] > 0)) continue;
      os << px(s.xs[i]) << ',' << py(s.ys[i]) << ' ';
    }
    os << "\"/>\n";
    const double ly = top + 14 + 16 * static_cast<double>(k);
    os << "<line x1=\"" << left + pw + 10 << "\" y1=\"" << ly - 4 << "\" x2=\"" << left + pw + 28
       << "\" y2=\"" << ly - 4 << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << left + pw + 32 << "\" y=\"" << ly << "\">" << escape(s.name) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string heatmap(const Eigen::MatrixXd& values, const std::vector<std::string>& row_labels,
                    const std::vector<std::string>& col_labels, const std::string& title) {
  const double cell = 36, left = 70, top = 40;
  const double w = left + cell * static_cast<double>(values.cols()) + 90;
  const double h = top + cell * static_cast<double>(values.rows()) + 50;
  double lo = values.size() ? values.minCoeff() : 0.0;
  double hi = values.size() ? values.maxCoeff() : 1.0;
  const double span = std::max(std::fabs(lo), std::fabs(hi));
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << left << "\" y=\"20\" font-size=\"13\">" << escape(title) << "</text>\n";
  for (Eigen::Index r = 0; r < values.rows(); ++r) {
    for (Eigen::Index c = 0; c < values.cols(); ++c) {
      const double v = values(r, c);
      const double t = span > 0 ? v / span : 0.0;  // -1 .. 1
      const int red = t >= 0 ? 255 : static_cast<int>(255 * (1 + t));
      const int blue = t <= 0 ? 255 : static_cast<int>(255 * (1 - t));
      const int green = static_cast<int>(255 * (1 - std::fabs(t)));
      os << "<rect x=\"" << left + cell * c << "\" y=\"" << top + cell * r << "\" width=\"" << cell
         << "\" height=\"" << cell << "\" fill=\"rgb(" << red << ',' << green << ',' << blue
         << ")\" stroke=\"#ddd\"><title>" << num(v) << "</title></rect>\n";
    }
    if (r < static_cast<Eigen::Index>(row_labels.size())) {
      os << "<text x=\"" << left - 6 << "\" y=\"" << top + cell * r + cell / 2 + 4
         << "\" text-anchor=\"end\">" << escape(row_labels[r]) << "</text>\n";
    }
  }
  for (std::size_t c = 0; c < col_labels.size(); ++c) {
    os << "<text x=\"" << left + cell * c + cell / 2 << "\" y=\"" << top + cell * values.rows() + 15
       << "\" text-anchor=\"middle\">" << escape(col_labels[c]) << "</text>\n";
  }
  os << "<text x=\"" << w - 80 << "\" y=\"" << top + 10 << "\">max " << num(hi) << "</text>\n";
  os << "<text x=\"" << w - 80 << "\" y=\"" << top + 26 << "\">min " << num(lo) << "</text>\n";
  os << "</svg>\n";
  return os.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << content;
}

}  // namespace groklab::svg
