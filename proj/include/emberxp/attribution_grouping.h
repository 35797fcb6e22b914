#pragma once

#include <string_view>
#include <vector>

#include "emberxp/featurizer.h"
#include "emberxp/tree_shap.h"

namespace emberxp {

enum class Direction { kTowardMalware, kTowardBenign };
enum class Impact { kHigh, kModerate, kLow };

std::string_view DirectionName(Direction d);  // "toward_malware" / "toward_benign"
std::string_view ImpactName(Impact i);        // "high" / "moderate" / "low"

/// Analyst-facing label of a layout group. All nine labels are distinct.
std::string_view DisplayName(FeatureGroup group);

struct GroupAttribution {
  FeatureGroup group;
  std::string_view name;          // layout name, e.g. "ImportAnalysis"
  std::string_view display_name;  // e.g. "import patterns / suspicious APIs"
  double shap_sum = 0.0;
  double abs_share = 0.0;
  Direction direction = Direction::kTowardBenign;
  Impact impact = Impact::kLow;

  bool operator==(const GroupAttribution&) const = default;
};

struct TopGroups {
  std::vector<GroupAttribution> ranked;  // descending |shap_sum|
};

/// high if share >= 0.30, moderate if >= 0.10, else low.
Impact ClassifyImpact(double abs_share);

/// Per-group sums of phi in layout order. Shares are |sum| over the total
/// absolute group mass (all zero when that mass is zero). A positive sum
/// pushes toward malware. Throws DimensionError unless phi has kFeatureDim
/// entries.
std::vector<GroupAttribution> Aggregate(const Attribution& attr,
                                        const GroupLayout& layout = group_layout());

/// The k groups with largest |shap_sum|; ties keep layout order.
TopGroups TopK(const std::vector<GroupAttribution>& groups, std::size_t k = 5);

}  // namespace emberxp
