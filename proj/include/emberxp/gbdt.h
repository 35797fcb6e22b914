#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace emberxp {

enum class MissingType : uint8_t { kNone = 0, kZero = 1, kNaN = 2 };

/// One regression tree in LightGBM's flat layout.
///
/// Internal nodes are indexed [0, num_internal()); a child reference c >= 0 is
/// an internal node, c < 0 is leaf ~c. A tree with a single leaf has no
/// internal nodes and its root is leaf 0.
struct DecisionTree {
  std::vector<int> split_feature;
  std::vector<double> threshold;
  std::vector<int> left_child;
  std::vector<int> right_child;
  std::vector<bool> default_left;
  std::vector<MissingType> missing_type;
  std::vector<double> internal_cover;
  std::vector<double> leaf_value;
  std::vector<double> leaf_cover;

  std::size_t num_internal() const { return split_feature.size(); }
  std::size_t num_leaves() const { return leaf_value.size(); }

  /// Child reference taken by a value on internal node `node`: x <= threshold
  /// goes left; NaN goes the default direction, as does 0 when the node's
  /// missing type is kZero.
  int Next(int node, double value) const;

  /// Leaf index reached by x.
  int LeafIndex(std::span<const double> x) const;
  double Predict(std::span<const double> x) const { return leaf_value[LeafIndex(x)]; }

  double RootCover() const;
  /// Cover of a child reference (internal node or ~leaf).
  double CoverOf(int ref) const { return ref >= 0 ? internal_cover[ref] : leaf_cover[~ref]; }
  int MaxDepth() const;

  /// Checks shape consistency, single-rootedness, and that every parent cover
  /// equals the sum of its children within 1e-6 relative. Throws
  /// ModelFormatError prefixed with `context`.
  void Validate(std::size_t num_features, const std::string& context) const;
};

enum class Objective { kBinarySigmoid };

struct Ensemble {
  std::vector<DecisionTree> trees;
  Objective objective = Objective::kBinarySigmoid;
  double sigmoid = 1.0;
  std::size_t num_features = 0;
};

/// Parses the LightGBM text model subset used by EMBER: binary objective,
/// numerical <= splits, default-direction missing handling. Covers come from
/// internal_count / leaf_count. Throws ModelFormatError naming tree and key.
Ensemble ParseModel(std::string_view text);
Ensemble LoadModel(const std::string& path);

/// Inverse of ParseModel for the supported subset; values printed with
/// round-trip precision.
std::string SerializeModel(const Ensemble& ensemble);

/// Sum over trees of the reached leaf value. Throws DimensionError when
/// x.size() != num_features.
double RawMargin(const Ensemble& ensemble, std::span<const double> x);

double Sigmoid(double margin);

/// 1 / (1 + exp(-sigmoid * margin)), in (0, 1).
double PredictScore(const Ensemble& ensemble, std::span<const double> x);

}  // namespace emberxp
