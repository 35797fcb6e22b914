#include "emberxp/lora_planner.h"

#include <cmath>

#include <fmt/format.h>

#include "emberxp/error.h"

namespace emberxp {

namespace {
constexpr double kMiB = 1024.0 * 1024.0;

// Two decimals, halves rounded away from zero (48.125 -> 48.13).
double Round2(double v) { return std::round(v * 100.0) / 100.0; }
}

int64_t BaseModelSpec::params_per_rank() const {
  int64_t per_layer = 0;
  for (const auto& m : injected_modules) per_layer += m.in_dim + m.out_dim;
  return per_layer * layers;
}

LoraPlan Plan(const BaseModelSpec& spec, int64_t rank, double alpha, double dropout) {
  if (rank < 0) throw Error(fmt::format("LoRA rank must be >= 0, got {}", rank));
  LoraPlan p;
  p.rank = rank;
  p.alpha = alpha;
  p.dropout = dropout;
  p.trainable_params = rank * spec.params_per_rank();
  const double denom = static_cast<double>(spec.base_params + p.trainable_params);
  p.trainable_pct = denom > 0.0 ? 100.0 * static_cast<double>(p.trainable_params) / denom : 0.0;
  p.adapter_bytes = p.trainable_params * spec.bytes_per_param;
  p.adapter_mib = static_cast<double>(p.adapter_bytes) / kMiB;
  return p;
}

LoraTable PlanTable(const BaseModelSpec& spec, const std::vector<int64_t>& ranks) {
  LoraTable t;
  for (auto r : ranks) t.rows.push_back(Plan(spec, r));
  t.full_params = spec.base_params;
  t.full_bytes = spec.base_params * spec.bytes_per_param;
  t.full_mib = static_cast<double>(t.full_bytes) / kMiB;
  return t;
}

Savings ComputeSavings(const BaseModelSpec& spec, int64_t rank) {
  if (rank <= 0) throw Error(fmt::format("savings need rank > 0, got {}", rank));
  const double full_bytes = static_cast<double>(spec.base_params * spec.bytes_per_param);
  if (full_bytes <= 0.0) throw Error("full model size is zero");
  const LoraPlan p = Plan(spec, rank);
  return {100.0 * (1.0 - static_cast<double>(p.adapter_bytes) / full_bytes),
          100.0 * (1.0 - static_cast<double>(p.trainable_params) /
                             static_cast<double>(spec.base_params))};
}

std::string TableCsv(const LoraTable& table) {
  std::string out = "rank,trainable_params,trainable_pct,adapter_bytes,adapter_mib\n";
  for (const auto& r : table.rows) {
    out += fmt::format("{},{},{:.2f},{},{:.2f}\n", r.rank, r.trainable_params, Round2(r.trainable_pct),
                       r.adapter_bytes, Round2(r.adapter_mib));
  }
  out += fmt::format("full,{},100.00,{},{:.2f}\n", table.full_params, table.full_bytes,
                     Round2(table.full_mib));
  return out;
}

std::string TableText(const LoraTable& table) {
  std::string out = fmt::format("{:>6}  {:>16}  {:>12}  {:>14}  {:>12}\n", "rank",
                                "trainable", "trainable %", "bytes", "size (MiB)");
  for (const auto& r : table.rows) {
    out += fmt::format("{:>6}  {:>16}  {:>12.2f}  {:>14}  {:>12.2f}\n", r.rank,
                       r.trainable_params, Round2(r.trainable_pct), r.adapter_bytes,
                       Round2(r.adapter_mib));
  }
  out += fmt::format("{:>6}  {:>16}  {:>12.2f}  {:>14}  {:>12.2f}\n", "full", table.full_params,
                     100.0, table.full_bytes, Round2(table.full_mib));
  return out;
}

}  // namespace emberxp
