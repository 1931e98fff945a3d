#pragma once

#include <array>
#include <string>
#include <vector>

#include "mtl/errors.hpp"

namespace mtl {

struct EmbeddingTableFile {
  std::vector<std::string> patients;
  std::vector<int> labels;
  std::vector<std::vector<double>> vectors;
};

/// Reads an embeddings.csv written by the trainer (patient,label,e0..eN).
EmbeddingTableFile read_embedding_csv(const std::string& path);

/// Top-2 principal components via power iteration with deterministic
/// initialization; rows are centered first. An all-constant input yields
/// zero components (and a zero projection).
std::vector<std::array<double, 2>> pca_project_2d(
    const std::vector<std::vector<double>>& rows);

struct PlotResult {
  double silhouette_2d;   // NaN when undefined (single class)
  std::string svg_path;
};

/// PCA scatter of the embeddings colored by label, silhouette of the 2-D
/// projection annotated. Deterministic: identical inputs give identical SVG
/// bytes. Throws ValueError with fewer than 3 points.
PlotResult plot_embeddings(const EmbeddingTableFile& table,
                           const std::string& out_svg);

}  // namespace mtl
