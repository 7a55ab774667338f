#pragma once

// Minimal SVG line charts and heatmaps for reports.

#include <string>
#include <vector>

#include <Eigen/Core>

namespace groklab::svg {

struct Series {
  std::string name;
  std::vector<double> xs;
  std::vector<double> ys;
};

struct ChartOptions {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_x = false;
  int width = 640;
  int height = 400;
};

std::string line_chart(const std::vector<Series>& series, const ChartOptions& options);

std::string heatmap(const Eigen::MatrixXd& values, const std::vector<std::string>& row_labels,
                    const std::vector<std::string>& col_labels, const std::string& title);

void write_file(const std::string& path, const std::string& content);

}  // namespace groklab::svg
