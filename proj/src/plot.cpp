#include "mtl/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "mtl/metrics.hpp"
#include "mtl/rng.hpp"

namespace mtl {

namespace {

std::string fmt(double v, const char* spec = "%.3f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

}  // namespace

EmbeddingTableFile read_embedding_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path);
  EmbeddingTableFile table;
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path + ": empty file");
  std::size_t expected_fields = 1;
  for (char c : line) expected_fields += static_cast<std::size_t>(c == ',');
  if (expected_fields < 3)
    throw FormatError(path + ": header needs patient,label,e0...");
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ls, field, ',')) fields.push_back(field);
    if (fields.size() != expected_fields)
      throw FormatError(path + ": row with " + std::to_string(fields.size()) +
                        " fields, expected " + std::to_string(expected_fields));
    table.patients.push_back(fields[0]);
    try {
      table.labels.push_back(std::stoi(fields[1]));
    } catch (const std::exception&) {
      throw FormatError(path + ": bad label '" + fields[1] + "'");
    }
    std::vector<double> vec;
    for (std::size_t i = 2; i < fields.size(); ++i) {
      char* end = nullptr;
      const double v = std::strtod(fields[i].c_str(), &end);
      if (end != fields[i].c_str() + fields[i].size())
        throw FormatError(path + ": bad value '" + fields[i] + "'");
      vec.push_back(v);
    }
    table.vectors.push_back(std::move(vec));
  }
  return table;
}

std::vector<std::array<double, 2>> pca_project_2d(
    const std::vector<std::vector<double>>& rows) {
  const std::size_t n = rows.size();
  if (n == 0) return {};
  const std::size_t dim = rows[0].size();

  // center
  std::vector<double> mean(dim, 0.0);
  for (const auto& r : rows)
    for (std::size_t d = 0; d < dim; ++d) mean[d] += r[d];
  for (double& m : mean) m /= static_cast<double>(n);
  std::vector<std::vector<double>> centered(n, std::vector<double>(dim));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t d = 0; d < dim; ++d) centered[i][d] = rows[i][d] - mean[d];

  auto cov_apply = [&](const std::vector<double>& v) {
    // (X^T X / n) v without materializing the covariance
    std::vector<double> xv(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t d = 0; d < dim; ++d) xv[i] += centered[i][d] * v[d];
    std::vector<double> out(dim, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t d = 0; d < dim; ++d) out[d] += centered[i][d] * xv[i];
    for (double& o : out) o /= static_cast<double>(n);
    return out;
  };

  std::vector<std::vector<double>> components;
  for (int comp = 0; comp < 2; ++comp) {
    Rng rng(mix_seed(0x70636132ull, static_cast<std::uint64_t>(comp)));  // "pca2"
    std::vector<double> v(dim);
    for (double& x : v) x = rng.uniform(-1.0, 1.0);
    double norm = 0.0;
    for (int iter = 0; iter < 300; ++iter) {
      auto w = cov_apply(v);
      // deflate previously found components
      for (const auto& c : components) {
        double dot = 0.0;
        for (std::size_t d = 0; d < dim; ++d) dot += w[d] * c[d];
        for (std::size_t d = 0; d < dim; ++d) w[d] -= dot * c[d];
      }
      norm = 0.0;
      for (double x : w) norm += x * x;
      norm = std::sqrt(norm);
      if (norm < 1e-12) {
        std::fill(w.begin(), w.end(), 0.0);
        v = std::move(w);
        break;
      }
      for (double& x : w) x /= norm;
      v = std::move(w);
    }
    // canonical sign: largest-magnitude coordinate positive
    std::size_t arg = 0;
    for (std::size_t d = 1; d < dim; ++d)
      if (std::abs(v[d]) > std::abs(v[arg])) arg = d;
    if (v[arg] < 0.0)
      for (double& x : v) x = -x;
    components.push_back(std::move(v));
  }

  std::vector<std::array<double, 2>> proj(n);
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < 2; ++c) {
      double dot = 0.0;
      for (std::size_t d = 0; d < dim; ++d) dot += centered[i][d] * components[static_cast<std::size_t>(c)][d];
      proj[i][static_cast<std::size_t>(c)] = dot;
    }
  return proj;
}

PlotResult plot_embeddings(const EmbeddingTableFile& table,
                           const std::string& out_svg) {
  const std::size_t n = table.vectors.size();
  if (n < 3) throw ValueError("plot: need at least 3 points, got " +
                              std::to_string(n));
  const auto proj = pca_project_2d(table.vectors);

  std::vector<std::vector<double>> proj_rows(n, std::vector<double>(2));
  for (std::size_t i = 0; i < n; ++i) {
    proj_rows[i][0] = proj[i][0];
    proj_rows[i][1] = proj[i][1];
  }
  double ss = std::numeric_limits<double>::quiet_NaN();
  try {
    ss = silhouette(proj_rows, table.labels);
  } catch (const MetricError&) {
    // single-class table: annotated as n/a
  }

  const double width = 640.0, height = 480.0, margin = 48.0;
  double xmin = proj[0][0], xmax = proj[0][0], ymin = proj[0][1], ymax = proj[0][1];
  for (const auto& p : proj) {
    xmin = std::min(xmin, p[0]);
    xmax = std::max(xmax, p[0]);
    ymin = std::min(ymin, p[1]);
    ymax = std::max(ymax, p[1]);
  }
  if (xmax - xmin < 1e-12) {
    xmin -= 1.0;
    xmax += 1.0;
  }
  if (ymax - ymin < 1e-12) {
    ymin -= 1.0;
    ymax += 1.0;
  }
  auto sx = [&](double x) {
    return margin + (x - xmin) / (xmax - xmin) * (width - 2 * margin);
  };
  auto sy = [&](double y) {
    return height - margin - (y - ymin) / (ymax - ymin) * (height - 2 * margin);
  };

  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e"};
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
      << "\" height=\"" << height << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << margin << "\" y=\"24\" font-family=\"sans-serif\" "
         "font-size=\"14\">embedding PCA, silhouette (2-D) = "
      << (std::isnan(ss) ? std::string("n/a") : fmt(ss, "%.4f")) << "</text>\n";
  for (std::size_t i = 0; i < n; ++i) {
    const int label = table.labels[i];
    const char* color = kColors[static_cast<std::size_t>(label) % 4];
    svg << "<circle cx=\"" << fmt(sx(proj[i][0])) << "\" cy=\""
        << fmt(sy(proj[i][1])) << "\" r=\"3\" fill=\"" << color
        << "\" fill-opacity=\"0.8\"/>\n";
  }
  svg << "</svg>\n";

  std::ofstream out(out_svg, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + out_svg);
  out << svg.str();
  return {ss, out_svg};
}

}  // namespace mtl
