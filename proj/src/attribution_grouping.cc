#include "emberxp/attribution_grouping.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "emberxp/error.h"

namespace emberxp {

namespace {

// Editable mapping from vector groups to narrative labels.
constexpr std::array<std::string_view, kNumGroups> kDisplayNames = {
    "byte distribution",                     // ByteHistogram
    "entropy analysis (packing/obfuscation)",  // ByteEntropyHistogram
    "embedded string analysis",              // StringAnalysis
    "file size indicators",                  // GeneralFileInfo
    "PE header structure",                   // HeaderAnalysis
    "section characteristics",               // SectionAnalysis
    "import patterns / suspicious APIs",     // ImportAnalysis
    "exported functions",                    // ExportAnalysis
    "PE data directories",                   // DataDirectories
};

}  // namespace

std::string_view DirectionName(Direction d) {
  return d == Direction::kTowardMalware ? "toward_malware" : "toward_benign";
}

std::string_view ImpactName(Impact i) {
  switch (i) {
    case Impact::kHigh:
      return "high";
    case Impact::kModerate:
      return "moderate";
    case Impact::kLow:
      return "low";
  }
  return "low";
}

std::string_view DisplayName(FeatureGroup group) {
  return kDisplayNames[static_cast<std::size_t>(group)];
}

Impact ClassifyImpact(double abs_share) {
  if (abs_share >= 0.30) return Impact::kHigh;
  if (abs_share >= 0.10) return Impact::kModerate;
  return Impact::kLow;
}

std::vector<GroupAttribution> Aggregate(const Attribution& attr, const GroupLayout& layout) {
  if (attr.phi.size() != kFeatureDim) {
    throw DimensionError(fmt::format("attribution has {} entries (expected {})", attr.phi.size(),
                                     kFeatureDim));
  }
  std::vector<GroupAttribution> out;
  out.reserve(layout.size());
  double mass = 0.0;
  for (const auto& span : layout) {
    GroupAttribution g;
    g.group = span.group;
    g.name = span.name;
    g.display_name = DisplayName(span.group);
    auto first = attr.phi.begin() + static_cast<std::ptrdiff_t>(span.offset);
    g.shap_sum = std::accumulate(first, first + static_cast<std::ptrdiff_t>(span.length), 0.0);
    g.direction = g.shap_sum > 0.0 ? Direction::kTowardMalware : Direction::kTowardBenign;
    mass += std::abs(g.shap_sum);
    out.push_back(g);
  }
  for (auto& g : out) {
    g.abs_share = mass > 0.0 ? std::abs(g.shap_sum) / mass : 0.0;
    g.impact = ClassifyImpact(g.abs_share);
  }
  return out;
}

TopGroups TopK(const std::vector<GroupAttribution>& groups, std::size_t k) {
  TopGroups top;
  top.ranked = groups;
  std::sort(top.ranked.begin(), top.ranked.end(),
            [](const GroupAttribution& a, const GroupAttribution& b) {
              const double ma = std::abs(a.shap_sum), mb = std::abs(b.shap_sum);
              if (ma != mb) return ma > mb;
              return a.group < b.group;
            });
  top.ranked.resize(std::min(k, top.ranked.size()));
  return top;
}

}  // namespace emberxp
