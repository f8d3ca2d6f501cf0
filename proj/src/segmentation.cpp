#include "elastid/segmentation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "elastid/errors.hpp"

namespace elastid {

namespace {

constexpr double kLn10 = 2.302585092994045684;

struct UnionFind {
  std::vector<int> parent;
  explicit UnionFind(std::size_t n) : parent(n) {
    std::iota(parent.begin(), parent.end(), 0);
  }
  int find(int a) {
    while (parent[a] != a) {
      parent[a] = parent[parent[a]];
      a = parent[a];
    }
    return a;
  }
  bool merge(int a, int b) {
    a = find(a);
    b = find(b);
    if (a == b) return false;
    if (b < a) std::swap(a, b);  // keep the lowest index as root
    parent[b] = a;
    return true;
  }
};

double feature_dist2(const double* a, const double* b, int dim) {
  double s = 0.0;
  for (int d = 0; d < dim; ++d) {
    const double diff = a[d] - b[d];
    s += diff * diff;
  }
  return s;
}

// Exact kNN by brute force; fine for the particle counts this project runs
// at (the losses are dimension-agnostic and N stays in the tens of
// thousands).
void knn(const std::vector<double>& feat, int dim, std::size_t n, int k,
         std::vector<int>& out) {
  out.resize(n * static_cast<std::size_t>(k));
  std::vector<std::pair<double, int>> dist(n > 0 ? n - 1 : 0);
  for (std::size_t i = 0; i < n; ++i) {
    dist.clear();
    const double* fi = feat.data() + i * dim;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      dist.emplace_back(feature_dist2(fi, feat.data() + j * dim, dim),
                        static_cast<int>(j));
    }
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
    for (int m = 0; m < k; ++m) out[i * k + m] = dist[m].second;
  }
}

}  // namespace

OversegmentResult oversegment(const std::vector<double>& z_D, int dim_D,
                              const std::vector<double>& z_A, int dim_A,
                              std::size_t n_particles,
                              int target_granularity) {
  if (n_particles == 0) throw DataError("oversegment: no particles");
  if (target_granularity < 1)
    throw InvalidParameterError("oversegment: target granularity must be >= 1");
  if (z_D.size() != n_particles * static_cast<std::size_t>(dim_D) ||
      z_A.size() != n_particles * static_cast<std::size_t>(dim_A))
    throw DataError("oversegment: feature arrays not aligned with particles");

  OversegmentResult res;
  const int dim = dim_D + dim_A;
  std::vector<double> concat(n_particles * static_cast<std::size_t>(dim));
  for (std::size_t i = 0; i < n_particles; ++i) {
    std::copy_n(z_D.data() + i * dim_D, dim_D, concat.data() + i * dim);
    std::copy_n(z_A.data() + i * dim_A, dim_A,
                concat.data() + i * dim + dim_D);
  }

  const int k = std::min<int>(20, static_cast<int>(n_particles) - 1);
  struct Edge {
    double d2;
    int a, b;
  };
  std::vector<Edge> edges;
  if (k > 0) {
    std::vector<int> nb;
    knn(concat, dim, n_particles, k, nb);
    edges.reserve(n_particles * k);
    for (std::size_t i = 0; i < n_particles; ++i) {
      for (int m = 0; m < k; ++m) {
        const int j = nb[i * k + m];
        if (static_cast<int>(i) < j) {
          edges.push_back({feature_dist2(concat.data() + i * dim,
                                         concat.data() + j * dim, dim),
                           static_cast<int>(i), j});
        } else {
          edges.push_back({feature_dist2(concat.data() + i * dim,
                                         concat.data() + j * dim, dim),
                           j, static_cast<int>(i)});
        }
      }
    }
    std::sort(edges.begin(), edges.end(), [](const Edge& x, const Edge& y) {
      if (x.d2 != y.d2) return x.d2 < y.d2;
      if (x.a != y.a) return x.a < y.a;
      return x.b < y.b;
    });
  }

  UnionFind uf(n_particles);
  int components = static_cast<int>(n_particles);
  for (const Edge& e : edges) {
    if (components <= target_granularity) break;
    if (uf.merge(e.a, e.b)) --components;
  }

  // Contiguous labels in order of first appearance.
  res.labels.assign(n_particles, -1);
  std::vector<int> root_label(n_particles, -1);
  int next = 0;
  for (std::size_t i = 0; i < n_particles; ++i) {
    const int r = uf.find(static_cast<int>(i));
    if (root_label[r] < 0) root_label[r] = next++;
    res.labels[i] = root_label[r];
  }
  res.n_segments = next;

  if (res.n_segments == 1 && n_particles > 1)
    res.warnings.push_back("oversegment: degenerate features, single segment");
  if (res.n_segments > 2 * target_granularity)
    res.warnings.push_back(
        "oversegment: feature graph disconnected, " +
        std::to_string(res.n_segments) + " segments exceed 2x target " +
        std::to_string(target_granularity));
  return res;
}

FeatureNeighborhood build_neighborhoods(const std::vector<double>& z_D,
                                        int dim_D, std::size_t n_particles,
                                        int k, double alpha, double eps) {
  if (n_particles < 2) throw DataError("build_neighborhoods: need >= 2 particles");
  FeatureNeighborhood nbhd;
  nbhd.k = std::min<int>(k, static_cast<int>(n_particles) - 1);
  knn(z_D, dim_D, n_particles, nbhd.k, nbhd.neighbors);
  similarity_weights(z_D, dim_D, nbhd, alpha, eps);
  return nbhd;
}

void similarity_weights(const std::vector<double>& z_D, int dim_D,
                        FeatureNeighborhood& nbhd, double alpha, double eps) {
  if (!(alpha > 0.0) || !(eps > 0.0))
    throw InvalidParameterError("similarity_weights: alpha, eps must be > 0");
  const std::size_t n = nbhd.size();
  const int k = nbhd.k;
  nbhd.weights.resize(nbhd.neighbors.size());
  for (std::size_t i = 0; i < n; ++i) {
    double sum = 0.0;
    for (int m = 0; m < k; ++m) {
      const int j = nbhd.neighbors[i * k + m];
      const double d2 = feature_dist2(z_D.data() + i * dim_D,
                                      z_D.data() + j * dim_D, dim_D);
      const double w = std::exp(-alpha * d2) + eps;
      nbhd.weights[i * k + m] = w;
      sum += w;
    }
    for (int m = 0; m < k; ++m) nbhd.weights[i * k + m] /= sum;
  }
}

double similarity_loss(const std::vector<int>& labels,
                       const std::vector<MaterialSegment>& segments,
                       const FeatureNeighborhood& nbhd) {
  const std::size_t n = labels.size();
  if (nbhd.size() != n)
    throw DataError("similarity_loss: neighborhood size mismatch");
  // Natural-log parameters expanded per particle via the segment lookup.
  std::vector<double> lnE(segments.size()), lnRho(segments.size());
  for (std::size_t s = 0; s < segments.size(); ++s) {
    lnE[s] = kLn10 * segments[s].log10_E;
    lnRho[s] = kLn10 * segments[s].log10_rho;
  }
  const int k = nbhd.k;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int si = labels[i];
    double row = 0.0;
    for (int m = 0; m < k; ++m) {
      const int sj = labels[nbhd.neighbors[i * k + m]];
      const double dE = lnE[si] - lnE[sj];
      const double dR = lnRho[si] - lnRho[sj];
      row += nbhd.weights[i * k + m] * (dE * dE + dR * dR);
    }
    total += row;
  }
  return total / static_cast<double>(n);
}

double variance_loss(const std::vector<int>& labels,
                     const std::vector<MaterialSegment>& segments) {
  const std::size_t n = labels.size();
  if (n == 0) throw DataError("variance_loss: no particles");
  double meanE = 0.0, meanR = 0.0;
  for (int s : labels) {
    meanE += kLn10 * segments[s].log10_E;
    meanR += kLn10 * segments[s].log10_rho;
  }
  meanE /= static_cast<double>(n);
  meanR /= static_cast<double>(n);
  double varE = 0.0, varR = 0.0;
  for (int s : labels) {
    const double dE = kLn10 * segments[s].log10_E - meanE;
    const double dR = kLn10 * segments[s].log10_rho - meanR;
    varE += dE * dE;
    varR += dR * dR;
  }
  return (varE + varR) / static_cast<double>(n);
}

double grouping_loss(double L_s, double L_v, double w_v) {
  return L_s + w_v * L_v;
}

double grouping_loss(const std::vector<int>& labels,
                     const std::vector<MaterialSegment>& segments,
                     const FeatureNeighborhood& nbhd, double w_v) {
  return grouping_loss(similarity_loss(labels, segments, nbhd),
                       variance_loss(labels, segments), w_v);
}

}  // namespace elastid
