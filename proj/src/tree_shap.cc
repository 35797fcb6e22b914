#include "emberxp/tree_shap.h"

#include <algorithm>
#include <bit>
#include <set>

#include <fmt/format.h>

#include "emberxp/error.h"

namespace emberxp {

namespace {

void CheckDims(const Ensemble& ens, std::span<const double> x) {
  if (x.size() != ens.num_features) {
    throw DimensionError(fmt::format("input has {} features, model expects {}", x.size(),
                                     ens.num_features));
  }
}

// Fractions of the parent's cover flowing to each child. A node with zero
// cover splits evenly; such nodes only carry zero path weight.
std::pair<double, double> ChildFractions(const DecisionTree& tree, int node, int first,
                                         int second) {
  const double w = tree.internal_cover[node];
  if (w <= 0.0) return {0.5, 0.5};
  return {tree.CoverOf(first) / w, tree.CoverOf(second) / w};
}

double TreeBaseValue(const DecisionTree& tree, std::size_t index) {
  const double root = tree.RootCover();
  if (!(root > 0.0)) throw Error(fmt::format("tree {} has zero root cover", index));
  if (tree.num_internal() == 0) return tree.leaf_value[0];
  double sum = 0.0;
  for (std::size_t i = 0; i < tree.num_leaves(); ++i) sum += tree.leaf_value[i] * tree.leaf_cover[i];
  return sum / root;
}

// Path-dependent TreeSHAP (polynomial path tracking). Each path element
// records the fraction of "feature unknown" (zero) and "feature known"
// (one) weight flowing through the splits on that feature, and pweight
// holds the permutation weights of subsets of each size.
struct PathElement {
  int feature = -1;
  double zero_fraction = 0.0;
  double one_fraction = 0.0;
  double pweight = 0.0;
};

class PathDependentShap {
 public:
  PathDependentShap(const DecisionTree& tree, std::span<const double> x, std::span<double> phi)
      : tree_(tree), x_(x), phi_(phi) {
    const std::size_t maxd = static_cast<std::size_t>(tree.MaxDepth()) + 2;
    storage_.resize(maxd * (maxd + 1) / 2 + maxd);
  }

  void Run() { Recurse(tree_.num_internal() == 0 ? ~0 : 0, 0, storage_.data(), 1.0, 1.0, -1); }

 private:
  static void Extend(PathElement* path, int depth, double zero, double one, int feature) {
    path[depth] = {feature, zero, one, depth == 0 ? 1.0 : 0.0};
    for (int i = depth - 1; i >= 0; --i) {
      path[i + 1].pweight += one * path[i].pweight * (i + 1) / static_cast<double>(depth + 1);
      path[i].pweight = zero * path[i].pweight * (depth - i) / static_cast<double>(depth + 1);
    }
  }

  static void Unwind(PathElement* path, int depth, int index) {
    const double one = path[index].one_fraction;
    const double zero = path[index].zero_fraction;
    double next_one = path[depth].pweight;
    for (int i = depth - 1; i >= 0; --i) {
      if (one != 0.0) {
        const double tmp = path[i].pweight;
        path[i].pweight = next_one * (depth + 1) / static_cast<double>((i + 1) * one);
        next_one = tmp - path[i].pweight * zero * (depth - i) / static_cast<double>(depth + 1);
      } else {
        path[i].pweight = path[i].pweight * (depth + 1) / static_cast<double>(zero * (depth - i));
      }
    }
    for (int i = index; i < depth; ++i) {
      path[i].feature = path[i + 1].feature;
      path[i].zero_fraction = path[i + 1].zero_fraction;
      path[i].one_fraction = path[i + 1].one_fraction;
    }
  }

  static double UnwoundSum(const PathElement* path, int depth, int index) {
    const double one = path[index].one_fraction;
    const double zero = path[index].zero_fraction;
    double next_one = path[depth].pweight;
    double total = 0.0;
    for (int i = depth - 1; i >= 0; --i) {
      if (one != 0.0) {
        const double tmp = next_one * (depth + 1) / static_cast<double>((i + 1) * one);
        total += tmp;
        next_one = path[i].pweight - tmp * zero * (depth - i) / static_cast<double>(depth + 1);
      } else if (zero != 0.0) {
        total += path[i].pweight / zero / ((depth - i) / static_cast<double>(depth + 1));
      }
    }
    return total;
  }

  void Recurse(int ref, int depth, PathElement* parent_path, double zero, double one,
               int feature) {
    if (zero == 0.0 && one == 0.0) return;  // no weight reaches this subtree

    PathElement* path = parent_path + depth + 1;
    std::copy(parent_path, parent_path + depth + 1, path);
    Extend(path, depth, zero, one, feature);

    if (ref < 0) {
      const double value = tree_.leaf_value[~ref];
      for (int i = 1; i <= depth; ++i) {
        const double w = UnwoundSum(path, depth, i);
        const PathElement& el = path[i];
        phi_[el.feature] += w * (el.one_fraction - el.zero_fraction) * value;
      }
      return;
    }

    const int split = tree_.split_feature[ref];
    const int hot = tree_.Next(ref, x_[split]);
    const int cold = hot == tree_.left_child[ref] ? tree_.right_child[ref] : tree_.left_child[ref];
    auto [hot_zero, cold_zero] = ChildFractions(tree_, ref, hot, cold);

    double incoming_zero = 1.0;
    double incoming_one = 1.0;
    int k = 0;
    for (; k <= depth; ++k) {
      if (path[k].feature == split) break;
    }
    if (k != depth + 1) {
      incoming_zero = path[k].zero_fraction;
      incoming_one = path[k].one_fraction;
      Unwind(path, depth, k);
      depth -= 1;
    }

    Recurse(hot, depth + 1, path, hot_zero * incoming_zero, incoming_one, split);
    Recurse(cold, depth + 1, path, cold_zero * incoming_zero, 0.0, split);
  }

  const DecisionTree& tree_;
  std::span<const double> x_;
  std::span<double> phi_;
  std::vector<PathElement> storage_;
};

// v(S) for one tree: known features follow x, unknown ones average the
// children by cover.
double ConditionalExpectation(const DecisionTree& tree, int ref, std::span<const double> x,
                              const std::vector<bool>& known) {
  if (ref < 0) return tree.leaf_value[~ref];
  const int f = tree.split_feature[ref];
  if (known[f]) return ConditionalExpectation(tree, tree.Next(ref, x[f]), x, known);
  const int l = tree.left_child[ref];
  const int r = tree.right_child[ref];
  auto [wl, wr] = ChildFractions(tree, ref, l, r);
  return wl * ConditionalExpectation(tree, l, x, known) +
         wr * ConditionalExpectation(tree, r, x, known);
}

double Binomial(int n, int k) {
  double r = 1.0;
  for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

// Single-reference interventional game on one tree. A leaf contributes
// value * 1[A subset of S, B disjoint from S], where A are the features that
// must come from x to reach it and B those that must come from the reference.
class SingleReferenceShap {
 public:
  SingleReferenceShap(const DecisionTree& tree, std::span<const double> x,
                      std::span<const double> ref, std::span<double> phi, double scale)
      : tree_(tree), x_(x), ref_(ref), phi_(phi), scale_(scale) {}

  void Run() { Recurse(tree_.num_internal() == 0 ? ~0 : 0); }

 private:
  static bool Has(const std::vector<int>& v, int f) {
    return std::find(v.begin(), v.end(), f) != v.end();
  }

  void Recurse(int node) {
    if (node < 0) {
      const double value = tree_.leaf_value[~node] * scale_;
      const int a = static_cast<int>(from_x_.size());
      const int b = static_cast<int>(from_ref_.size());
      if (a + b == 0) return;
      // Shapley value of the unanimity-style game g(S) = 1[A in S, B out of S]:
      // i in A gets (a-1)! b! / (a+b)!, j in B gets -a! (b-1)! / (a+b)!.
      if (a > 0) {
        const double w = 1.0 / (a * Binomial(a + b, a));
        for (int f : from_x_) phi_[f] += w * value;
      }
      if (b > 0) {
        const double w = 1.0 / (b * Binomial(a + b, b));
        for (int f : from_ref_) phi_[f] -= w * value;
      }
      return;
    }
    const int f = tree_.split_feature[node];
    const int via_x = tree_.Next(node, x_[f]);
    const int via_ref = tree_.Next(node, ref_[f]);
    if (via_x == via_ref) return Recurse(via_x);
    if (Has(from_x_, f)) return Recurse(via_x);
    if (Has(from_ref_, f)) return Recurse(via_ref);

    from_x_.push_back(f);
    Recurse(via_x);
    from_x_.pop_back();
    from_ref_.push_back(f);
    Recurse(via_ref);
    from_ref_.pop_back();
  }

  const DecisionTree& tree_;
  std::span<const double> x_;
  std::span<const double> ref_;
  std::span<double> phi_;
  double scale_;
  std::vector<int> from_x_;
  std::vector<int> from_ref_;
};

}  // namespace

Attribution Explain(const Ensemble& ens, std::span<const double> x) {
  CheckDims(ens, x);
  Attribution out;
  out.phi.assign(ens.num_features, 0.0);
  for (std::size_t t = 0; t < ens.trees.size(); ++t) {
    const auto& tree = ens.trees[t];
    out.base_value += TreeBaseValue(tree, t);
    if (tree.num_internal() == 0) continue;
    PathDependentShap(tree, x, out.phi).Run();
  }
  return out;
}

Attribution Explain(const Ensemble& ens, const FeatureVector& x) {
  Attribution out = Explain(ens, std::span<const double>(x.values));
  out.sample_id = x.sample_id;
  return out;
}

std::vector<int> UsedFeatures(const Ensemble& ens) {
  std::set<int> used;
  for (const auto& tree : ens.trees) used.insert(tree.split_feature.begin(), tree.split_feature.end());
  return {used.begin(), used.end()};
}

std::vector<double> BruteForceShapley(const Ensemble& ens, std::span<const double> x,
                                      int feature_subset_limit) {
  CheckDims(ens, x);
  const std::vector<int> used = UsedFeatures(ens);
  const int m = static_cast<int>(used.size());
  if (feature_subset_limit > 15 || m > feature_subset_limit) {
    throw Error(fmt::format("brute-force Shapley: {} used features exceeds limit {} (max 15)", m,
                            feature_subset_limit));
  }
  for (std::size_t t = 0; t < ens.trees.size(); ++t) TreeBaseValue(ens.trees[t], t);

  const std::size_t subsets = std::size_t{1} << m;
  std::vector<double> value(subsets, 0.0);
  std::vector<bool> known(ens.num_features, false);
  for (std::size_t mask = 0; mask < subsets; ++mask) {
    for (int i = 0; i < m; ++i) known[used[i]] = (mask >> i) & 1;
    double v = 0.0;
    for (const auto& tree : ens.trees) {
      v += ConditionalExpectation(tree, tree.num_internal() == 0 ? ~0 : 0, x, known);
    }
    value[mask] = v;
  }

  std::vector<double> factorial(m + 1, 1.0);
  for (int i = 1; i <= m; ++i) factorial[i] = factorial[i - 1] * i;

  std::vector<double> phi(ens.num_features, 0.0);
  for (int i = 0; i < m; ++i) {
    const std::size_t bit = std::size_t{1} << i;
    double sum = 0.0;
    for (std::size_t mask = 0; mask < subsets; ++mask) {
      if (mask & bit) continue;
      const int s = std::popcount(mask);
      const double weight = factorial[s] * factorial[m - s - 1] / factorial[m];
      sum += weight * (value[mask | bit] - value[mask]);
    }
    phi[used[i]] = sum;
  }
  return phi;
}

namespace {

template <typename RowAccess>
Attribution InterventionalImpl(const Ensemble& ens, std::span<const double> x, std::size_t rows,
                               RowAccess row) {
  CheckDims(ens, x);
  if (rows == 0) throw Error("interventional explanation needs a non-empty background");
  Attribution out;
  out.phi.assign(ens.num_features, 0.0);
  const double scale = 1.0 / static_cast<double>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::span<const double> b = row(r);
    CheckDims(ens, b);
    for (const auto& tree : ens.trees) {
      out.base_value += scale * tree.Predict(b);
      if (tree.num_internal() > 0) SingleReferenceShap(tree, x, b, out.phi, scale).Run();
    }
  }
  return out;
}

}  // namespace

Attribution ExplainInterventional(const Ensemble& ens, std::span<const double> x,
                                  std::span<const FeatureVector> background) {
  return InterventionalImpl(ens, x, background.size(), [&](std::size_t r) {
    return std::span<const double>(background[r].values);
  });
}

Attribution ExplainInterventional(const Ensemble& ens, std::span<const double> x,
                                  const std::vector<std::vector<double>>& background) {
  return InterventionalImpl(ens, x, background.size(), [&](std::size_t r) {
    return std::span<const double>(background[r]);
  });
}

}  // namespace emberxp
