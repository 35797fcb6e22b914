#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "emberxp/ember_ingest.h"
#include "emberxp/featurizer.h"
#include "emberxp/gbdt.h"

namespace emberxp {

/// Small EMBER-shaped corpora and a matching GBDT for offline runs and tests.
/// Malicious records lean toward packed high-entropy sections, injection
/// APIs, few strings and no signature; the class overlap is deliberate so
/// scores are not saturated.
struct SyntheticCorpusOptions {
  int benign = 540;
  int malicious = 540;
  int unlabeled = 20;
  uint64_t seed = 7;
};

std::vector<PESampleRecord> SyntheticRecords(const SyntheticCorpusOptions& options);

/// One canonical JSON record per line.
void WriteJsonl(const std::vector<PESampleRecord>& records, const std::filesystem::path& path);

struct GbdtTrainOptions {
  int num_trees = 24;
  int max_depth = 4;
  double learning_rate = 0.25;
  double lambda = 1.0;
  int min_leaf = 8;
  int max_thresholds = 16;  // candidate cut points per feature, from quantiles
};

/// Newton-boosted trees for logistic loss over dense rows. Node covers are
/// training-sample counts, as in LightGBM's internal_count. The prior log-odds
/// is folded into the first tree's leaves. labels are 0/1.
Ensemble TrainGbdt(const std::vector<std::vector<double>>& rows, const std::vector<int>& labels,
                   const GbdtTrainOptions& options = {});

struct SyntheticFixture {
  std::vector<PESampleRecord> records;
  Ensemble model;
};

/// Generates records and trains a model on all labeled ones.
SyntheticFixture BuildSyntheticFixture(const SyntheticCorpusOptions& corpus = {},
                                       const GbdtTrainOptions& training = {});

}  // namespace emberxp
