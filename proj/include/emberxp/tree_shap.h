#pragma once

#include <span>
#include <string>
#include <vector>

#include "emberxp/featurizer.h"
#include "emberxp/gbdt.h"

namespace emberxp {

/// Per-dimension SHAP values in raw-margin (log-odds) units.
/// Local accuracy: base_value + sum(phi) == model output being explained.
struct Attribution {
  std::vector<double> phi;
  double base_value = 0.0;
  std::string sample_id;
};

enum class ExplainerMode { kPathDependent, kInterventional };

/// Exact path-dependent TreeSHAP: per tree, the Shapley values of the
/// cover-weighted conditional expectation, summed over trees. base_value is
/// the cover-weighted mean leaf value summed over trees.
/// Throws DimensionError on size mismatch, Error on a zero root cover.
Attribution Explain(const Ensemble& ensemble, std::span<const double> x);
Attribution Explain(const Ensemble& ensemble, const FeatureVector& x);

/// Shapley values by subset enumeration over the features the ensemble
/// splits on, using the same cover-weighted conditional expectation as
/// Explain. Exponential; meant as a validation oracle. Requires
/// used-feature count <= feature_subset_limit <= 15.
std::vector<double> BruteForceShapley(const Ensemble& ensemble, std::span<const double> x,
                                      int feature_subset_limit = 15);

/// Interventional TreeSHAP against a background set: the Shapley values of
/// v(S) = mean_b f(x_S, b_rest), computed exactly per (tree, background row)
/// and averaged. base_value is the mean model output over the background.
Attribution ExplainInterventional(const Ensemble& ensemble, std::span<const double> x,
                                  std::span<const FeatureVector> background);
Attribution ExplainInterventional(const Ensemble& ensemble, std::span<const double> x,
                                  const std::vector<std::vector<double>>& background);

/// Sorted distinct split features of the ensemble.
std::vector<int> UsedFeatures(const Ensemble& ensemble);

}  // namespace emberxp
