#include "emberxp/featurizer.h"

#include <algorithm>
#include <bit>
#include <cstring>
#include <istream>
#include <ostream>
#include <set>

#include <fmt/format.h>

#include "emberxp/error.h"
#include "emberxp/hashing.h"

namespace emberxp {

namespace {

constexpr GroupLayout kLayout = {{
    {FeatureGroup::kByteHistogram, "ByteHistogram", 0, 256},
    {FeatureGroup::kByteEntropyHistogram, "ByteEntropyHistogram", 256, 256},
    {FeatureGroup::kStringAnalysis, "StringAnalysis", 512, 104},
    {FeatureGroup::kGeneralFileInfo, "GeneralFileInfo", 616, 10},
    {FeatureGroup::kHeaderAnalysis, "HeaderAnalysis", 626, 62},
    {FeatureGroup::kSectionAnalysis, "SectionAnalysis", 688, 255},
    {FeatureGroup::kImportAnalysis, "ImportAnalysis", 943, 1280},
    {FeatureGroup::kExportAnalysis, "ExportAnalysis", 2223, 128},
    {FeatureGroup::kDataDirectories, "DataDirectories", 2351, 30},
}};

static_assert(kLayout.back().offset + kLayout.back().length == kFeatureDim);

constexpr std::array<std::string_view, 15> kDirectoryOrder = {
    "EXPORT_TABLE",      "IMPORT_TABLE",         "RESOURCE_TABLE",
    "EXCEPTION_TABLE",   "CERTIFICATE_TABLE",    "BASE_RELOCATION_TABLE",
    "DEBUG",             "ARCHITECTURE",         "GLOBAL_PTR",
    "TLS_TABLE",         "LOAD_CONFIG_TABLE",    "BOUND_IMPORT",
    "IAT",               "DELAY_IMPORT_DESCRIPTOR", "CLR_RUNTIME_HEADER",
};

void AddHashed(std::vector<double>& v, std::size_t offset, uint32_t buckets,
               std::string_view token, double value = 1.0) {
  HashSlot slot = HashToken(token, buckets);
  v[offset + slot.index] += slot.sign * value;
}

template <std::size_t N>
void Normalized(std::vector<double>& v, std::size_t offset, const std::array<int64_t, N>& counts) {
  double total = 0.0;
  for (auto c : counts) total += static_cast<double>(c);
  if (total <= 0.0) return;
  for (std::size_t i = 0; i < N; ++i) v[offset + i] = static_cast<double>(counts[i]) / total;
}

bool HasProp(const Section& s, std::string_view prop) {
  return std::find(s.props.begin(), s.props.end(), prop) != s.props.end();
}

std::string Lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

}  // namespace

const GroupLayout& group_layout() { return kLayout; }

const GroupSpan& SpanOf(FeatureGroup group) { return kLayout[static_cast<std::size_t>(group)]; }

FeatureGroup GroupOfDimension(std::size_t dim) {
  for (const auto& span : kLayout) {
    if (span.Contains(dim)) return span.group;
  }
  throw DimensionError(fmt::format("dimension {} outside [0, {})", dim, kFeatureDim));
}

const std::array<std::string_view, 15>& DataDirectoryOrder() { return kDirectoryOrder; }

std::span<const double> FeatureVector::group(FeatureGroup g) const {
  const auto& span = SpanOf(g);
  return std::span<const double>(values).subspan(span.offset, span.length);
}

FeatureVector Vectorize(const PESampleRecord& rec) {
  FeatureVector out;
  out.sample_id = rec.sha256;
  auto& v = out.values;
  v.assign(kFeatureDim, 0.0);

  Normalized(v, 0, rec.byte_histogram);
  Normalized(v, 256, rec.byte_entropy_histogram);

  const auto& s = rec.strings;
  v[slots::kNumStrings] = static_cast<double>(s.num_strings);
  v[slots::kAvgLength] = s.avg_length;
  v[slots::kPrintables] = static_cast<double>(s.printables);
  const double divisor = static_cast<double>(std::max<int64_t>(s.printables, 1));
  for (std::size_t i = 0; i < s.printable_dist.size(); ++i) {
    v[slots::kPrintableDist + i] = static_cast<double>(s.printable_dist[i]) / divisor;
  }
  v[slots::kStringEntropy] = s.entropy;
  v[slots::kPaths] = static_cast<double>(s.paths);
  v[slots::kUrls] = static_cast<double>(s.urls);
  v[slots::kRegistry] = static_cast<double>(s.registry);
  v[slots::kMzCount] = static_cast<double>(s.mz_count);

  const auto& g = rec.general;
  const int64_t general[] = {g.file_size,     g.virtual_size,  g.has_debug,
                             g.exports_count, g.imports_count, g.has_relocations,
                             g.has_resources, g.has_signature, g.has_tls,
                             g.symbols_count};
  for (std::size_t i = 0; i < std::size(general); ++i) {
    v[slots::kFileSize + i] = static_cast<double>(general[i]);
  }

  const auto& coff = rec.header.coff;
  const auto& opt = rec.header.optional;
  v[slots::kTimestamp] = static_cast<double>(coff.timestamp);
  if (!coff.machine.empty()) AddHashed(v, slots::kMachineHash, 10, coff.machine);
  for (const auto& c : coff.characteristics) AddHashed(v, slots::kCharacteristicsHash, 10, c);
  if (!opt.subsystem.empty()) AddHashed(v, slots::kSubsystemHash, 10, opt.subsystem);
  for (const auto& c : opt.dll_characteristics) AddHashed(v, slots::kDllCharacteristicsHash, 10, c);
  if (!opt.magic.empty()) AddHashed(v, slots::kMagicHash, 10, opt.magic);
  const int64_t header_scalars[] = {
      opt.major_image_version,            opt.minor_image_version,
      opt.major_linker_version,           opt.minor_linker_version,
      opt.major_operating_system_version, opt.minor_operating_system_version,
      opt.major_subsystem_version,        opt.minor_subsystem_version,
      opt.sizeof_code,                    opt.sizeof_headers,
      opt.sizeof_heap_commit};
  for (std::size_t i = 0; i < std::size(header_scalars); ++i) {
    v[slots::kHeaderScalars + i] = static_cast<double>(header_scalars[i]);
  }

  const auto& sections = rec.section.sections;
  double zero_size = 0, empty_name = 0, rx = 0, writable = 0;
  for (const auto& sec : sections) {
    if (sec.size == 0) zero_size += 1;
    if (sec.name.empty()) empty_name += 1;
    if (HasProp(sec, "MEM_READ") && HasProp(sec, "MEM_EXECUTE")) rx += 1;
    if (HasProp(sec, "MEM_WRITE")) writable += 1;
    AddHashed(v, slots::kSectionSizeHash, 50, sec.name, static_cast<double>(sec.size));
    AddHashed(v, slots::kSectionEntropyHash, 50, sec.name, sec.entropy);
    AddHashed(v, slots::kSectionVsizeHash, 50, sec.name, static_cast<double>(sec.vsize));
  }
  v[slots::kSectionGeneral + 0] = static_cast<double>(sections.size());
  v[slots::kSectionGeneral + 1] = zero_size;
  v[slots::kSectionGeneral + 2] = empty_name;
  v[slots::kSectionGeneral + 3] = rx;
  v[slots::kSectionGeneral + 4] = writable;
  if (!rec.section.entry.empty()) {
    AddHashed(v, slots::kEntryNameHash, 50, rec.section.entry);
    for (const auto& sec : sections) {
      if (sec.name != rec.section.entry) continue;
      for (const auto& p : sec.props) AddHashed(v, slots::kEntryPropsHash, 50, p);
    }
  }

  std::set<std::string> libraries;
  for (const auto& [lib, apis] : rec.imports) {
    std::string lower = Lower(lib);
    libraries.insert(lower);
    for (const auto& api : apis) {
      AddHashed(v, slots::kImportFunctionHash, 1024, lower + ":" + api);
    }
  }
  for (const auto& lib : libraries) AddHashed(v, slots::kImportLibraryHash, 256, lib);

  for (const auto& name : rec.exports) AddHashed(v, slots::kExportHash, 128, name);

  for (const auto& dir : rec.data_directories) {
    auto it = std::find(kDirectoryOrder.begin(), kDirectoryOrder.end(), dir.name);
    if (it == kDirectoryOrder.end()) continue;
    std::size_t i = static_cast<std::size_t>(it - kDirectoryOrder.begin());
    v[slots::kDataDirectories + 2 * i] = static_cast<double>(dir.size);
    v[slots::kDataDirectories + 2 * i + 1] = static_cast<double>(dir.virtual_address);
  }
  return out;
}

namespace {

int HexValue(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  return -1;
}

}  // namespace

void WriteVectorDump(std::ostream& out, const FeatureVector& v) {
  if (v.values.size() != kFeatureDim) {
    throw DimensionError(fmt::format("vector has {} entries (expected {})", v.values.size(),
                                     kFeatureDim));
  }
  if (v.sample_id.size() != 64) throw DimensionError("sample id is not a 64-char sha256");
  std::array<unsigned char, 32> id{};
  for (std::size_t i = 0; i < 32; ++i) {
    int hi = HexValue(v.sample_id[2 * i]);
    int lo = HexValue(v.sample_id[2 * i + 1]);
    if (hi < 0 || lo < 0) throw DimensionError("sample id is not hex");
    id[i] = static_cast<unsigned char>(hi << 4 | lo);
  }
  out.write(reinterpret_cast<const char*>(id.data()), id.size());

  std::vector<unsigned char> buf(kFeatureDim * 4);
  for (std::size_t i = 0; i < kFeatureDim; ++i) {
    auto bits = std::bit_cast<uint32_t>(static_cast<float>(v.values[i]));
    for (int b = 0; b < 4; ++b) buf[4 * i + b] = static_cast<unsigned char>(bits >> (8 * b));
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw Error("failed writing vector dump");
}

std::optional<FeatureVector> ReadVectorDump(std::istream& in) {
  std::array<unsigned char, 32> id{};
  in.read(reinterpret_cast<char*>(id.data()), id.size());
  if (in.gcount() == 0) return std::nullopt;
  std::vector<unsigned char> buf(kFeatureDim * 4);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (in.gcount() != static_cast<std::streamsize>(buf.size())) {
    throw Error("truncated vector dump");
  }
  FeatureVector v;
  static constexpr char kHex[] = "0123456789abcdef";
  for (auto byte : id) {
    v.sample_id.push_back(kHex[byte >> 4]);
    v.sample_id.push_back(kHex[byte & 0xf]);
  }
  v.values.resize(kFeatureDim);
  for (std::size_t i = 0; i < kFeatureDim; ++i) {
    uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<uint32_t>(buf[4 * i + b]) << (8 * b);
    v.values[i] = std::bit_cast<float>(bits);
  }
  return v;
}

}  // namespace emberxp
