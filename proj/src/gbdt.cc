#include "emberxp/gbdt.h"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include <fmt/format.h>

#include "emberxp/error.h"

namespace emberxp {

int DecisionTree::Next(int node, double value) const {
  const bool left_default = default_left[node];
  if (std::isnan(value)) return left_default ? left_child[node] : right_child[node];
  if (missing_type[node] == MissingType::kZero && value == 0.0) {
    return left_default ? left_child[node] : right_child[node];
  }
  return value <= threshold[node] ? left_child[node] : right_child[node];
}

int DecisionTree::LeafIndex(std::span<const double> x) const {
  if (num_internal() == 0) return 0;
  int node = 0;
  while (node >= 0) node = Next(node, x[split_feature[node]]);
  return ~node;
}

double DecisionTree::RootCover() const {
  return num_internal() == 0 ? (leaf_cover.empty() ? 0.0 : leaf_cover[0]) : internal_cover[0];
}

int DecisionTree::MaxDepth() const {
  if (num_internal() == 0) return 0;
  int best = 0;
  std::vector<std::pair<int, int>> stack{{0, 1}};
  while (!stack.empty()) {
    auto [node, depth] = stack.back();
    stack.pop_back();
    best = std::max(best, depth);
    if (left_child[node] >= 0) stack.push_back({left_child[node], depth + 1});
    if (right_child[node] >= 0) stack.push_back({right_child[node], depth + 1});
  }
  return best;
}

void DecisionTree::Validate(std::size_t num_features, const std::string& context) const {
  auto fail = [&](const std::string& msg) {
    throw ModelFormatError(fmt::format("{}: {}", context, msg));
  };
  const std::size_t n = num_internal();
  if (num_leaves() == 0) fail("tree has no leaves");
  if (num_leaves() != n + 1) {
    fail(fmt::format("num_leaves {} inconsistent with {} internal nodes", num_leaves(), n));
  }
  if (threshold.size() != n || left_child.size() != n || right_child.size() != n ||
      default_left.size() != n || missing_type.size() != n || internal_cover.size() != n) {
    fail("internal node arrays have inconsistent lengths");
  }
  if (leaf_cover.size() != num_leaves()) fail("leaf_count length differs from num_leaves");
  for (std::size_t i = 0; i < n; ++i) {
    if (split_feature[i] < 0 || static_cast<std::size_t>(split_feature[i]) >= num_features) {
      fail(fmt::format("split_feature {} out of range at node {}", split_feature[i], i));
    }
  }
  for (double c : internal_cover) {
    if (!(c >= 0.0)) fail("negative or NaN internal_count");
  }
  for (double c : leaf_cover) {
    if (!(c >= 0.0)) fail("negative or NaN leaf_count");
  }
  if (n == 0) return;

  // Every node but the root must be reached exactly once from the root.
  std::vector<int> seen_internal(n, 0), seen_leaf(num_leaves(), 0);
  std::vector<int> stack{0};
  seen_internal[0] = 1;
  while (!stack.empty()) {
    int node = stack.back();
    stack.pop_back();
    for (int child : {left_child[node], right_child[node]}) {
      if (child >= 0) {
        if (static_cast<std::size_t>(child) >= n) fail(fmt::format("child {} out of range", child));
        if (seen_internal[child]++) fail(fmt::format("node {} reached twice", child));
        stack.push_back(child);
      } else {
        if (static_cast<std::size_t>(~child) >= num_leaves()) {
          fail(fmt::format("leaf reference {} out of range", child));
        }
        if (seen_leaf[~child]++) fail(fmt::format("leaf {} reached twice", ~child));
      }
    }
    double sum = CoverOf(left_child[node]) + CoverOf(right_child[node]);
    double parent = internal_cover[node];
    if (std::abs(parent - sum) > 1e-6 * std::max(std::abs(parent), 1e-300) &&
        !(parent == 0.0 && sum == 0.0)) {
      fail(fmt::format("internal_count {} at node {} differs from child sum {}", parent, node,
                       sum));
    }
  }
  if (std::find(seen_internal.begin(), seen_internal.end(), 0) != seen_internal.end() ||
      std::find(seen_leaf.begin(), seen_leaf.end(), 0) != seen_leaf.end()) {
    fail("tree has nodes unreachable from the root");
  }
}

namespace {

std::string_view Trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <typename T>
T ParseNumber(std::string_view tok, const std::string& context) {
  T value{};
  if constexpr (std::is_floating_point_v<T>) {
    // from_chars has no "inf"/"nan" spelling compatibility with LightGBM output
    if (tok == "inf" || tok == "+inf") return std::numeric_limits<T>::infinity();
    if (tok == "-inf") return -std::numeric_limits<T>::infinity();
    if (!tok.empty() && tok.front() == '+') tok.remove_prefix(1);
  }
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), value);
  if (ec != std::errc() || ptr != tok.data() + tok.size()) {
    throw ModelFormatError(fmt::format("{}: cannot parse number \"{}\"", context, tok));
  }
  return value;
}

template <typename T>
std::vector<T> ParseArray(std::string_view text, const std::string& context) {
  std::vector<T> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    while (pos < text.size() && text[pos] == ' ') ++pos;
    if (pos >= text.size()) break;
    std::size_t end = text.find(' ', pos);
    if (end == std::string_view::npos) end = text.size();
    out.push_back(ParseNumber<T>(text.substr(pos, end - pos), context));
    pos = end;
  }
  return out;
}

using Block = std::map<std::string, std::string, std::less<>>;

DecisionTree BuildTree(const Block& block, std::size_t index, std::size_t num_features) {
  const std::string ctx = fmt::format("Tree={}", index);
  auto get = [&](std::string_view key) -> const std::string& {
    auto it = block.find(key);
    if (it == block.end()) throw ModelFormatError(fmt::format("{}: missing key {}", ctx, key));
    return it->second;
  };
  auto key_ctx = [&](std::string_view key) { return fmt::format("{} key {}", ctx, key); };

  if (auto it = block.find("is_linear"); it != block.end() && Trim(it->second) != "0") {
    throw ModelFormatError(fmt::format("{}: linear trees are not supported", ctx));
  }
  if (auto it = block.find("num_cat"); it != block.end() && Trim(it->second) != "0") {
    throw ModelFormatError(fmt::format("{} key num_cat: categorical splits are not supported", ctx));
  }

  const int num_leaves = ParseNumber<int>(Trim(get("num_leaves")), key_ctx("num_leaves"));
  if (num_leaves < 1) throw ModelFormatError(fmt::format("{} key num_leaves: must be >= 1", ctx));

  DecisionTree tree;
  tree.leaf_value = ParseArray<double>(get("leaf_value"), key_ctx("leaf_value"));
  if (tree.leaf_value.size() != static_cast<std::size_t>(num_leaves)) {
    throw ModelFormatError(fmt::format("{} key leaf_value: {} values for {} leaves", ctx,
                                       tree.leaf_value.size(), num_leaves));
  }
  if (num_leaves == 1) {
    auto it = block.find("leaf_count");
    tree.leaf_cover = it == block.end() ? std::vector<double>{1.0}
                                        : ParseArray<double>(it->second, key_ctx("leaf_count"));
    tree.Validate(num_features, ctx);
    return tree;
  }

  const std::size_t n = static_cast<std::size_t>(num_leaves - 1);
  tree.split_feature = ParseArray<int>(get("split_feature"), key_ctx("split_feature"));
  tree.threshold = ParseArray<double>(get("threshold"), key_ctx("threshold"));
  tree.left_child = ParseArray<int>(get("left_child"), key_ctx("left_child"));
  tree.right_child = ParseArray<int>(get("right_child"), key_ctx("right_child"));
  tree.internal_cover = ParseArray<double>(get("internal_count"), key_ctx("internal_count"));
  tree.leaf_cover = ParseArray<double>(get("leaf_count"), key_ctx("leaf_count"));
  auto decision = ParseArray<int>(get("decision_type"), key_ctx("decision_type"));

  auto check_len = [&](std::size_t got, std::size_t want, std::string_view key) {
    if (got != want) {
      throw ModelFormatError(fmt::format("{} key {}: {} values (expected {})", ctx, key, got, want));
    }
  };
  check_len(tree.split_feature.size(), n, "split_feature");
  check_len(tree.threshold.size(), n, "threshold");
  check_len(tree.left_child.size(), n, "left_child");
  check_len(tree.right_child.size(), n, "right_child");
  check_len(tree.internal_cover.size(), n, "internal_count");
  check_len(tree.leaf_cover.size(), n + 1, "leaf_count");
  check_len(decision.size(), n, "decision_type");

  for (std::size_t i = 0; i < n; ++i) {
    const int dt = decision[i];
    if (dt & 1) {
      throw ModelFormatError(
          fmt::format("{} key decision_type: categorical split at node {} is not supported", ctx, i));
    }
    const int missing = (dt >> 2) & 3;
    if (missing > 2) {
      throw ModelFormatError(fmt::format("{} key decision_type: bad missing type at node {}", ctx, i));
    }
    tree.default_left.push_back((dt & 2) != 0);
    tree.missing_type.push_back(static_cast<MissingType>(missing));
  }
  tree.Validate(num_features, ctx);
  return tree;
}

}  // namespace

Ensemble ParseModel(std::string_view text) {
  Ensemble ens;
  Block header;
  std::vector<Block> blocks;
  Block* current = &header;
  bool saw_end = false;

  std::size_t pos = 0;
  while (pos <= text.size() && !saw_end) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    std::string_view line = Trim(text.substr(pos, eol - pos));
    pos = eol + 1;
    if (line.empty()) continue;
    if (line == "end of trees") {
      saw_end = true;
      break;
    }
    auto eq = line.find('=');
    if (eq == std::string_view::npos) continue;  // "tree" magic line, etc.
    std::string key(Trim(line.substr(0, eq)));
    std::string value(Trim(line.substr(eq + 1)));
    if (key == "Tree") {
      std::size_t idx = ParseNumber<std::size_t>(value, "Tree header");
      if (idx != blocks.size()) {
        throw ModelFormatError(fmt::format("Tree={} out of order (expected Tree={})", idx,
                                           blocks.size()));
      }
      blocks.emplace_back();
      current = &blocks.back();
      continue;
    }
    (*current)[key] = value;
  }

  auto objective = header.find("objective");
  if (objective == header.end()) throw ModelFormatError("header: missing key objective");
  {
    std::istringstream parts(objective->second);
    std::string name;
    parts >> name;
    if (name != "binary") {
      throw ModelFormatError(fmt::format("header key objective: unsupported objective \"{}\"",
                                         objective->second));
    }
    std::string param;
    while (parts >> param) {
      if (param.rfind("sigmoid:", 0) == 0) {
        ens.sigmoid = ParseNumber<double>(std::string_view(param).substr(8), "header key objective");
      }
    }
  }
  if (auto it = header.find("num_class"); it != header.end() && Trim(it->second) != "1") {
    throw ModelFormatError("header key num_class: only single-output models are supported");
  }
  auto max_idx = header.find("max_feature_idx");
  if (max_idx == header.end()) throw ModelFormatError("header: missing key max_feature_idx");
  ens.num_features = ParseNumber<std::size_t>(max_idx->second, "header key max_feature_idx") + 1;

  ens.trees.reserve(blocks.size());
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    ens.trees.push_back(BuildTree(blocks[i], i, ens.num_features));
  }
  return ens;
}

Ensemble LoadModel(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ModelFormatError(fmt::format("cannot open model file {}", path));
  std::stringstream buf;
  buf << in.rdbuf();
  return ParseModel(buf.str());
}

namespace {

template <typename Range>
std::string Join(const Range& values) {
  std::string out;
  for (const auto& v : values) {
    if (!out.empty()) out += ' ';
    out += fmt::format("{}", v);
  }
  return out;
}

}  // namespace

std::string SerializeModel(const Ensemble& ens) {
  std::string out;
  out += "tree\nversion=v3\nnum_class=1\nnum_tree_per_iteration=1\nlabel_index=0\n";
  out += fmt::format("max_feature_idx={}\n", ens.num_features == 0 ? 0 : ens.num_features - 1);
  out += fmt::format("objective=binary sigmoid:{}\n\n", ens.sigmoid);
  for (std::size_t t = 0; t < ens.trees.size(); ++t) {
    const auto& tree = ens.trees[t];
    out += fmt::format("Tree={}\nnum_leaves={}\nnum_cat=0\n", t, tree.num_leaves());
    if (tree.num_internal() > 0) {
      std::vector<int> decision;
      for (std::size_t i = 0; i < tree.num_internal(); ++i) {
        decision.push_back((tree.default_left[i] ? 2 : 0) |
                           (static_cast<int>(tree.missing_type[i]) << 2));
      }
      out += fmt::format("split_feature={}\n", Join(tree.split_feature));
      out += fmt::format("threshold={}\n", Join(tree.threshold));
      out += fmt::format("decision_type={}\n", Join(decision));
      out += fmt::format("left_child={}\n", Join(tree.left_child));
      out += fmt::format("right_child={}\n", Join(tree.right_child));
    }
    out += fmt::format("leaf_value={}\n", Join(tree.leaf_value));
    out += fmt::format("leaf_count={}\n", Join(tree.leaf_cover));
    if (tree.num_internal() > 0) {
      out += fmt::format("internal_count={}\n", Join(tree.internal_cover));
    }
    out += "is_linear=0\nshrinkage=1\n\n\n";
  }
  out += "end of trees\n";
  return out;
}

double RawMargin(const Ensemble& ens, std::span<const double> x) {
  if (x.size() != ens.num_features) {
    throw DimensionError(fmt::format("input has {} features, model expects {}", x.size(),
                                     ens.num_features));
  }
  double sum = 0.0;
  for (const auto& tree : ens.trees) sum += tree.Predict(x);
  return sum;
}

double Sigmoid(double margin) {
  double p = 1.0 / (1.0 + std::exp(-margin));
  // keep the open interval even where exp saturates
  if (p >= 1.0) return std::nextafter(1.0, 0.0);
  if (p <= 0.0) return std::numeric_limits<double>::denorm_min();
  return p;
}

double PredictScore(const Ensemble& ens, std::span<const double> x) {
  return Sigmoid(ens.sigmoid * RawMargin(ens, x));
}

}  // namespace emberxp
