#include "emberxp/eval_metrics.h"

#include <algorithm>
#include <cmath>
#include <map>

#include <fmt/format.h>

#include "emberxp/error.h"
#include "emberxp/hashing.h"

namespace emberxp {

namespace {

bool IsWordByte(unsigned char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' ||
         c >= 0x80;
}

using NgramCounts = std::map<std::vector<std::string>, int>;

NgramCounts CountNgrams(const std::vector<std::string>& tokens, std::size_t n) {
  NgramCounts counts;
  if (n == 0 || tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++counts[std::vector<std::string>(tokens.begin() + i, tokens.begin() + i + n)];
  }
  return counts;
}

std::size_t ClippedOverlap(const NgramCounts& cand, const NgramCounts& ref) {
  std::size_t overlap = 0;
  for (const auto& [gram, count] : cand) {
    auto it = ref.find(gram);
    if (it != ref.end()) overlap += static_cast<std::size_t>(std::min(count, it->second));
  }
  return overlap;
}

double F1(double overlap, double cand_total, double ref_total) {
  if (cand_total == 0.0 || ref_total == 0.0) return 0.0;
  const double p = overlap / cand_total;
  const double r = overlap / ref_total;
  if (p + r == 0.0) return 0.0;
  return 2.0 * p * r / (p + r);
}

}  // namespace

std::vector<std::string> Tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  for (unsigned char c : text) {
    if (IsWordByte(c)) {
      current += (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : static_cast<char>(c);
    } else if (!current.empty()) {
      tokens.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

double Bleu(const std::vector<std::string>& candidate, const std::vector<std::string>& reference) {
  constexpr std::size_t kMaxOrder = 4;
  constexpr double kEpsilon = 0.1;
  if (candidate.empty()) return 0.0;

  double log_sum = 0.0;
  int orders = 0;
  for (std::size_t n = 1; n <= kMaxOrder; ++n) {
    if (candidate.size() < n) break;
    const double total = static_cast<double>(candidate.size() - n + 1);
    double matches = static_cast<double>(
        ClippedOverlap(CountNgrams(candidate, n), CountNgrams(reference, n)));
    if (matches == 0.0) matches = kEpsilon;
    log_sum += std::log(matches / total);
    ++orders;
  }
  const double c = static_cast<double>(candidate.size());
  const double r = static_cast<double>(reference.size());
  const double bp = c >= r ? 1.0 : std::exp(1.0 - r / c);
  return std::min(1.0, bp * std::exp(log_sum / orders));
}

double RougeN(const std::vector<std::string>& candidate, const std::vector<std::string>& reference,
              int n) {
  if (n < 1) throw Error("ROUGE-N needs n >= 1");
  const auto un = static_cast<std::size_t>(n);
  const double cand_total = candidate.size() >= un ? static_cast<double>(candidate.size() - un + 1) : 0.0;
  const double ref_total = reference.size() >= un ? static_cast<double>(reference.size() - un + 1) : 0.0;
  if (cand_total == 0.0 || ref_total == 0.0) return 0.0;
  const double overlap =
      static_cast<double>(ClippedOverlap(CountNgrams(candidate, un), CountNgrams(reference, un)));
  return F1(overlap, cand_total, ref_total);
}

std::size_t LcsLength(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  if (a.empty() || b.empty()) return 0;
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double RougeL(const std::vector<std::string>& candidate, const std::vector<std::string>& reference) {
  return F1(static_cast<double>(LcsLength(candidate, reference)),
            static_cast<double>(candidate.size()), static_cast<double>(reference.size()));
}

double Cosine(const EmbeddingVector& a, const EmbeddingVector& b) {
  if (a.dim() != b.dim()) {
    throw Error(fmt::format("embedding dimension mismatch: {} vs {}", a.dim(), b.dim()));
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.dim(); ++i) {
    dot += a.values[i] * b.values[i];
    na += a.values[i] * a.values[i];
    nb += b.values[i] * b.values[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

double Semantic(std::string_view candidate, std::string_view reference, Embedder& embedder) {
  auto vectors = embedder.Embed({std::string(candidate), std::string(reference)});
  if (vectors.size() != 2) throw Error("embedder returned the wrong number of vectors");
  return Cosine(vectors[0], vectors[1]);
}

EmbeddingVector FallbackEmbed(std::string_view text) {
  EmbeddingVector out;
  out.values.assign(kFallbackEmbeddingDim, 0.0);
  if (text.empty()) return out;
  std::string lower(text);
  for (auto& c : lower) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  auto add = [&](std::string_view gram) {
    HashSlot slot = HashToken(gram, kFallbackEmbeddingDim);
    out.values[slot.index] += slot.sign;
  };
  if (lower.size() < 3) {
    add(lower);
  } else {
    for (std::size_t i = 0; i + 3 <= lower.size(); ++i) add(std::string_view(lower).substr(i, 3));
  }
  double norm = 0.0;
  for (double v : out.values) norm += v * v;
  if (norm > 0.0) {
    norm = std::sqrt(norm);
    for (double& v : out.values) v /= norm;
  }
  return out;
}

std::vector<EmbeddingVector> FallbackEmbedder::Embed(const std::vector<std::string>& texts) {
  std::vector<EmbeddingVector> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back(FallbackEmbed(t));
  return out;
}

MetricScores ScorePair(std::string_view candidate, std::string_view reference, Embedder& embedder) {
  const auto cand = Tokenize(candidate);
  const auto ref = Tokenize(reference);
  MetricScores s;
  s.bleu = Bleu(cand, ref);
  s.rouge1 = RougeN(cand, ref, 1);
  s.rouge2 = RougeN(cand, ref, 2);
  s.rougeL = RougeL(cand, ref);
  s.semantic = Semantic(candidate, reference, embedder);
  return s;
}

}  // namespace emberxp
