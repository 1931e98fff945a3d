#pragma once

#include <vector>

#include "mtl/errors.hpp"

namespace mtl {

/// Patient-level scores (probability of the positive class) with binary
/// labels, as produced by a trained classifier on a held-out split.
struct ScoredCohort {
  std::vector<double> scores;
  std::vector<int> labels;  // 0 or 1
};

/// Area under the ROC curve as the Mann-Whitney rank statistic; tied
/// scores count one half. Throws MetricError unless both classes appear.
double auroc(const ScoredCohort& sc);

/// Area under the precision-recall curve as average precision: a
/// step-function integral of precision over recall along the
/// descending-score sweep, with tied scores grouped into one step.
/// Throws MetricError when there is no positive.
double auprc(const ScoredCohort& sc);

/// Mean silhouette score of row-vector embeddings under Euclidean distance,
/// clustering by the given labels. Per point s = (b - a) / max(a, b);
/// points in singleton clusters score 0. Throws MetricError with fewer
/// than two distinct labels.
double silhouette(const std::vector<std::vector<double>>& embeddings,
                  const std::vector<int>& labels);

}  // namespace mtl
