#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace emberxp {

struct MetricScores {
  double bleu = 0.0;
  double rouge1 = 0.0;
  double rouge2 = 0.0;
  double rougeL = 0.0;
  double semantic = 0.0;

  bool operator==(const MetricScores&) const = default;
};

struct EmbeddingVector {
  std::vector<double> values;
  std::size_t dim() const { return values.size(); }
};

/// Source of sentence embeddings; one vector per text, input order kept.
class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual std::vector<EmbeddingVector> Embed(const std::vector<std::string>& texts) = 0;
};

/// Lowercases ASCII and splits on maximal runs of characters that are not
/// ASCII letters, digits or '_'. Bytes >= 0x80 count as word characters so
/// UTF-8 words stay whole.
std::vector<std::string> Tokenize(std::string_view text);

/// Sentence BLEU with uniform weights over n = 1..4, clipped n-gram
/// precisions and brevity penalty exp(1 - r/c) when c < r. A precision with
/// zero matches uses 0.1 as its numerator; an order with no candidate
/// n-grams is dropped and the weights renormalized. Empty candidate gives 0.
double Bleu(const std::vector<std::string>& candidate, const std::vector<std::string>& reference);

/// ROUGE-N F1 over n-gram multisets (n >= 1); 0 when either side has no n-grams.
double RougeN(const std::vector<std::string>& candidate, const std::vector<std::string>& reference,
              int n);

std::size_t LcsLength(const std::vector<std::string>& a, const std::vector<std::string>& b);

/// ROUGE-L F1 from the longest common subsequence length.
double RougeL(const std::vector<std::string>& candidate, const std::vector<std::string>& reference);

/// Cosine similarity; 0 when either vector is zero. Throws Error on a
/// dimension mismatch.
double Cosine(const EmbeddingVector& a, const EmbeddingVector& b);

/// Cosine of the embeddings of both texts, embedded in one batch.
double Semantic(std::string_view candidate, std::string_view reference, Embedder& embedder);

inline constexpr std::size_t kFallbackEmbeddingDim = 512;

/// Offline embedding: signed hashed term frequencies of the lowercased
/// text's character trigrams (a text shorter than three bytes is a single
/// gram) over 512 buckets, L2-normalized. Empty text gives the zero vector.
EmbeddingVector FallbackEmbed(std::string_view text);

class FallbackEmbedder : public Embedder {
 public:
  std::vector<EmbeddingVector> Embed(const std::vector<std::string>& texts) override;
};

/// All five metrics for one candidate/reference pair.
MetricScores ScorePair(std::string_view candidate, std::string_view reference, Embedder& embedder);

}  // namespace emberxp
