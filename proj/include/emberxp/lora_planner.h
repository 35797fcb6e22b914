#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace emberxp {

struct InjectedModule {
  std::string name;
  int64_t in_dim = 0;
  int64_t out_dim = 0;
};

/// Base model being adapted. Defaults describe a 22-layer, 1.1B-parameter
/// chat model with LoRA on the seven attention and MLP projections.
struct BaseModelSpec {
  int64_t layers = 22;
  int64_t base_params = 1'100'048'384;
  std::vector<InjectedModule> injected_modules = {
      {"q_proj", 2048, 2048},    {"k_proj", 2048, 256},     {"v_proj", 2048, 256},
      {"o_proj", 2048, 2048},    {"gate_proj", 2048, 5632}, {"up_proj", 2048, 5632},
      {"down_proj", 5632, 2048},
  };
  int64_t bytes_per_param = 4;

  int64_t injection_points() const {
    return layers * static_cast<int64_t>(injected_modules.size());
  }
  /// Sum over injection points of (in_dim + out_dim): trainable params per unit rank.
  int64_t params_per_rank() const;
};

struct LoraPlan {
  int64_t rank = 0;
  double alpha = 32.0;
  double dropout = 0.1;
  int64_t trainable_params = 0;
  double trainable_pct = 0.0;  // percent of base + adapter parameters
  int64_t adapter_bytes = 0;
  double adapter_mib = 0.0;
};

/// Throws Error for a negative rank.
LoraPlan Plan(const BaseModelSpec& spec, int64_t rank, double alpha = 32.0, double dropout = 0.1);

struct LoraTable {
  std::vector<LoraPlan> rows;
  /// Full fine-tuning: every base parameter is trainable.
  int64_t full_params = 0;
  int64_t full_bytes = 0;
  double full_mib = 0.0;
};

LoraTable PlanTable(const BaseModelSpec& spec, const std::vector<int64_t>& ranks);

inline const std::vector<int64_t>& DefaultRanks() {
  static const std::vector<int64_t> ranks = {16, 96, 256, 512, 896};
  return ranks;
}

struct Savings {
  double size_reduction_pct = 0.0;
  double params_reduction_pct = 0.0;
};

/// Reductions of a rank-r adapter relative to the full model, in percent.
/// Requires rank > 0.
Savings ComputeSavings(const BaseModelSpec& spec, int64_t rank);

/// CSV with header rank,trainable_params,trainable_pct,adapter_bytes,adapter_mib;
/// the full fine-tune row has rank "full". Sizes in MiB with two decimals.
std::string TableCsv(const LoraTable& table);
/// Same rows as aligned text columns.
std::string TableText(const LoraTable& table);

}  // namespace emberxp
