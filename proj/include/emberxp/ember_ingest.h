#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace emberxp {

enum class Label { kBenign, kMalicious, kUnlabeled };

const char* LabelName(Label label);

struct StringsInfo {
  int64_t num_strings = 0;
  double avg_length = 0.0;
  int64_t printables = 0;
  std::array<int64_t, 96> printable_dist{};
  double entropy = 0.0;
  int64_t paths = 0;
  int64_t urls = 0;
  int64_t registry = 0;
  int64_t mz_count = 0;
  bool operator==(const StringsInfo&) const = default;
};

struct GeneralInfo {
  int64_t file_size = 0;
  int64_t virtual_size = 0;
  int64_t has_debug = 0;
  int64_t exports_count = 0;
  int64_t imports_count = 0;
  int64_t has_relocations = 0;
  int64_t has_resources = 0;
  int64_t has_signature = 0;
  int64_t has_tls = 0;
  int64_t symbols_count = 0;
  bool operator==(const GeneralInfo&) const = default;
};

struct CoffHeader {
  int64_t timestamp = 0;
  std::string machine;
  std::vector<std::string> characteristics;
  bool operator==(const CoffHeader&) const = default;
};

struct OptionalHeader {
  std::string subsystem;
  std::vector<std::string> dll_characteristics;
  std::string magic;
  int64_t major_image_version = 0;
  int64_t minor_image_version = 0;
  int64_t major_linker_version = 0;
  int64_t minor_linker_version = 0;
  int64_t major_operating_system_version = 0;
  int64_t minor_operating_system_version = 0;
  int64_t major_subsystem_version = 0;
  int64_t minor_subsystem_version = 0;
  int64_t sizeof_code = 0;
  int64_t sizeof_headers = 0;
  int64_t sizeof_heap_commit = 0;
  bool operator==(const OptionalHeader&) const = default;
};

struct HeaderInfo {
  CoffHeader coff;
  OptionalHeader optional;
  bool operator==(const HeaderInfo&) const = default;
};

struct Section {
  std::string name;
  int64_t size = 0;
  double entropy = 0.0;
  int64_t vsize = 0;
  std::vector<std::string> props;
  bool operator==(const Section&) const = default;
};

struct SectionInfo {
  std::string entry;  // name of the section holding the entry point
  std::vector<Section> sections;
  bool operator==(const SectionInfo&) const = default;
};

struct DataDirectory {
  std::string name;
  int64_t size = 0;
  int64_t virtual_address = 0;
  bool operator==(const DataDirectory&) const = default;
};

/// One EMBER feature record. Immutable after parsing; safe to share.
struct PESampleRecord {
  std::string sha256;
  std::string md5;
  Label label = Label::kUnlabeled;
  std::optional<std::string> family;
  std::array<int64_t, 256> byte_histogram{};
  std::array<int64_t, 256> byte_entropy_histogram{};
  StringsInfo strings;
  GeneralInfo general;
  HeaderInfo header;
  SectionInfo section;
  // std::map keeps library order canonical; API order within a library is kept.
  std::map<std::string, std::vector<std::string>> imports;
  std::vector<std::string> exports;
  std::vector<DataDirectory> data_directories;

  bool operator==(const PESampleRecord&) const = default;
};

/// Parses one JSONL line. Unknown keys are ignored, missing sub-objects
/// default to empty. Throws RecordParseError.
PESampleRecord ParseRecord(std::string_view line);

/// Canonical JSON form of a record, using the EMBER key names. Parsing the
/// result yields an equal record.
nlohmann::json ToJson(const PESampleRecord& record);

enum class LabelFilter { kAll, kLabeledOnly, kBenignOnly, kMaliciousOnly };

bool Accepts(LabelFilter filter, Label label);

enum class CorruptLinePolicy { kAbort, kSkip };

/// Lazily streams records from a JSONL file in file order.
///
///   RecordReader reader(path, LabelFilter::kLabeledOnly, CorruptLinePolicy::kSkip);
///   while (auto rec = reader.Next()) { ... }
///
/// Under kAbort a corrupt line throws RecordParseError whose message carries
/// the 1-based line number and whose offset is relative to the file start.
/// Under kSkip the line is counted and skipped.
class RecordReader {
 public:
  RecordReader(const std::filesystem::path& path, LabelFilter filter,
               CorruptLinePolicy policy = CorruptLinePolicy::kAbort);

  std::optional<PESampleRecord> Next();

  std::size_t lines_read() const { return line_no_; }
  std::size_t skipped() const { return skipped_; }
  /// Line numbers (1-based) of skipped lines, in order.
  const std::vector<std::size_t>& skipped_lines() const { return skipped_lines_; }

 private:
  std::ifstream in_;
  LabelFilter filter_;
  CorruptLinePolicy policy_;
  std::size_t line_no_ = 0;
  std::size_t file_offset_ = 0;
  std::size_t skipped_ = 0;
  std::vector<std::size_t> skipped_lines_;
};

/// Reads every accepted record of a file into memory.
std::vector<PESampleRecord> LoadDataset(const std::filesystem::path& path, LabelFilter filter,
                                        CorruptLinePolicy policy = CorruptLinePolicy::kAbort,
                                        std::size_t* skipped = nullptr);

struct SplitSizes {
  int train_benign = 500;
  int train_malicious = 500;
  int test_benign = 25;
  int test_malicious = 25;
  int focus_benign = 2;
  int focus_malicious = 3;
};

struct CorpusSplit {
  std::vector<std::string> train;
  std::vector<std::string> test;
  std::vector<std::string> focus;
  uint64_t seed = 0;

  bool operator==(const CorpusSplit&) const = default;
};

/// Balanced, deterministic selection of train/test/focus ids (sha256).
///
/// Only labeled records participate; duplicate sha256 values keep their first
/// occurrence. Benign and malicious ids are collected in input order and each
/// list is shuffled with a Fisher-Yates pass driven by one std::mt19937_64
/// seeded with `seed` (benign list first). Index draws use rejection sampling
/// on the raw 64-bit output, so the result does not depend on the standard
/// library's distribution implementations. From each shuffled class list the
/// test ids are taken first, then focus, then train. Each split lists its
/// benign picks before its malicious picks.
///
/// Throws DatasetError naming the available and required per-class counts.
CorpusSplit SelectCorpus(const std::vector<PESampleRecord>& records, uint64_t seed,
                         const SplitSizes& sizes = {});

nlohmann::json ToJson(const CorpusSplit& split);

}  // namespace emberxp
