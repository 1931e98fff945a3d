#include "mtl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <numeric>

namespace mtl {

namespace {

void check_labels(const ScoredCohort& sc, const char* op) {
  if (sc.scores.size() != sc.labels.size())
    throw MetricError(std::string(op) + ": scores and labels differ in length");
  if (sc.scores.empty()) throw MetricError(std::string(op) + ": empty input");
}

}  // namespace

double auroc(const ScoredCohort& sc) {
  check_labels(sc, "auroc");
  const std::size_t n = sc.scores.size();
  std::size_t n_pos = 0;
  for (int l : sc.labels) n_pos += static_cast<std::size_t>(l == 1);
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw MetricError("auroc: both classes must be present");

  // Average ranks with ties, then the Mann-Whitney U statistic.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return sc.scores[a] < sc.scores[b];
  });
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && sc.scores[order[j]] == sc.scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // 1-based
    for (std::size_t k = i; k < j; ++k)
      if (sc.labels[order[k]] == 1) rank_sum_pos += avg_rank;
    i = j;
  }
  const double u = rank_sum_pos -
                   static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double auprc(const ScoredCohort& sc) {
  check_labels(sc, "auprc");
  const std::size_t n = sc.scores.size();
  std::size_t n_pos = 0;
  for (int l : sc.labels) n_pos += static_cast<std::size_t>(l == 1);
  if (n_pos == 0) throw MetricError("auprc: no positive labels");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return sc.scores[a] > sc.scores[b];
  });

  double ap = 0.0;
  double tp = 0.0, fp = 0.0, prev_recall = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && sc.scores[order[j]] == sc.scores[order[i]]) ++j;
    for (std::size_t k = i; k < j; ++k) {
      if (sc.labels[order[k]] == 1)
        tp += 1.0;
      else
        fp += 1.0;
    }
    const double recall = tp / static_cast<double>(n_pos);
    const double precision = tp / (tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

double silhouette(const std::vector<std::vector<double>>& embeddings,
                  const std::vector<int>& labels) {
  const std::size_t n = embeddings.size();
  if (n != labels.size())
    throw MetricError("silhouette: embeddings and labels differ in length");
  if (n == 0) throw MetricError("silhouette: empty input");

  std::map<int, std::size_t> cluster_sizes;
  for (int l : labels) ++cluster_sizes[l];
  if (cluster_sizes.size() < 2)
    throw MetricError("silhouette: need at least two clusters");

  const std::size_t dim = embeddings[0].size();
  for (const auto& e : embeddings)
    if (e.size() != dim)
      throw MetricError("silhouette: embeddings have inconsistent dimension");

  auto dist = [&](std::size_t a, std::size_t b) {
    double acc = 0.0;
    for (std::size_t d = 0; d < dim; ++d) {
      const double diff = embeddings[a][d] - embeddings[b][d];
      acc += diff * diff;
    }
    return std::sqrt(acc);
  };

  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (cluster_sizes[labels[i]] == 1) continue;  // singleton scores 0
    std::map<int, double> sums;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      sums[labels[j]] += dist(i, j);
    }
    const double a =
        sums[labels[i]] / static_cast<double>(cluster_sizes[labels[i]] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (const auto& [cluster, size] : cluster_sizes) {
      if (cluster == labels[i]) continue;
      b = std::min(b, sums[cluster] / static_cast<double>(size));
    }
    const double m = std::max(a, b);
    total += m > 0.0 ? (b - a) / m : 0.0;
  }
  return total / static_cast<double>(n);
}

}  // namespace mtl
