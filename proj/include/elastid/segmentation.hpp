#pragma once

#include <string>
#include <vector>

#include "elastid/types.hpp"

namespace elastid {

// k-nearest neighborhoods in appearance-feature space with the normalized
// similarity weights of the grouping loss.
struct FeatureNeighborhood {
  int k = 20;
  std::vector<int> neighbors;   // [N * k]
  std::vector<double> weights;  // [N * k], each row sums to 1

  std::size_t size() const { return k > 0 ? neighbors.size() / k : 0; }
};

struct OversegmentResult {
  std::vector<int> labels;  // contiguous from 0
  int n_segments = 0;
  std::vector<std::string> warnings;
};

// Agglomerative single-linkage clustering over the concatenated appearance
// and affinity features, merged until the segment count reaches the target
// (the resulting distance threshold lands the count in [target, 2*target]
// whenever the feature graph allows it).
OversegmentResult oversegment(const std::vector<double>& z_D, int dim_D,
                              const std::vector<double>& z_A, int dim_A,
                              std::size_t n_particles, int target_granularity);

// Exact k-nearest neighbors in z_D space (alpha/eps are the similarity
// weight parameters).
FeatureNeighborhood build_neighborhoods(const std::vector<double>& z_D,
                                        int dim_D, std::size_t n_particles,
                                        int k = 20, double alpha = 20.0,
                                        double eps = 1e-9);

// Recomputes only the weights for existing neighborhoods.
void similarity_weights(const std::vector<double>& z_D, int dim_D,
                        FeatureNeighborhood& nbhd, double alpha, double eps);

// (1/N) sum_i sum_j w_ij (|ln E_i - ln E_j|^2 + |ln rho_i - ln rho_j|^2)
// with per-particle parameters expanded from their segments.
double similarity_loss(const std::vector<int>& labels,
                       const std::vector<MaterialSegment>& segments,
                       const FeatureNeighborhood& nbhd);

// Population variance of per-particle ln E plus that of ln rho.
double variance_loss(const std::vector<int>& labels,
                     const std::vector<MaterialSegment>& segments);

double grouping_loss(double L_s, double L_v, double w_v);

// Convenience: L_s + w_v * L_v from the raw inputs.
double grouping_loss(const std::vector<int>& labels,
                     const std::vector<MaterialSegment>& segments,
                     const FeatureNeighborhood& nbhd, double w_v);

}  // namespace elastid
