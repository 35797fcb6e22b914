#pragma once

#include <array>
#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "emberxp/ember_ingest.h"

namespace emberxp {

inline constexpr std::size_t kFeatureDim = 2381;

enum class FeatureGroup {
  kByteHistogram,
  kByteEntropyHistogram,
  kStringAnalysis,
  kGeneralFileInfo,
  kHeaderAnalysis,
  kSectionAnalysis,
  kImportAnalysis,
  kExportAnalysis,
  kDataDirectories,
};

inline constexpr std::size_t kNumGroups = 9;

struct GroupSpan {
  FeatureGroup group;
  std::string_view name;
  std::size_t offset;
  std::size_t length;

  std::size_t end() const { return offset + length; }
  bool Contains(std::size_t dim) const { return dim >= offset && dim < end(); }
};

using GroupLayout = std::array<GroupSpan, kNumGroups>;

/// The fixed nine-group EMBER v2 layout, in vector order.
const GroupLayout& group_layout();

const GroupSpan& SpanOf(FeatureGroup group);

/// Group owning a dimension. Throws DimensionError for dim >= kFeatureDim.
FeatureGroup GroupOfDimension(std::size_t dim);

/// Named slots inside the fixed-position parts of the layout.
namespace slots {
inline constexpr std::size_t kNumStrings = 512;
inline constexpr std::size_t kAvgLength = 513;
inline constexpr std::size_t kPrintables = 514;
inline constexpr std::size_t kPrintableDist = 515;  // 96 entries
inline constexpr std::size_t kStringEntropy = 611;
inline constexpr std::size_t kPaths = 612;
inline constexpr std::size_t kUrls = 613;
inline constexpr std::size_t kRegistry = 614;
inline constexpr std::size_t kMzCount = 615;

inline constexpr std::size_t kFileSize = 616;
inline constexpr std::size_t kVirtualSize = 617;
inline constexpr std::size_t kSymbols = 625;

inline constexpr std::size_t kTimestamp = 626;
inline constexpr std::size_t kMachineHash = 627;          // 10 buckets
inline constexpr std::size_t kCharacteristicsHash = 637;  // 10
inline constexpr std::size_t kSubsystemHash = 647;        // 10
inline constexpr std::size_t kDllCharacteristicsHash = 657;  // 10
inline constexpr std::size_t kMagicHash = 667;            // 10
inline constexpr std::size_t kHeaderScalars = 677;        // 11

inline constexpr std::size_t kSectionGeneral = 688;       // 5
inline constexpr std::size_t kSectionSizeHash = 693;      // 50
inline constexpr std::size_t kSectionEntropyHash = 743;   // 50
inline constexpr std::size_t kSectionVsizeHash = 793;     // 50
inline constexpr std::size_t kEntryNameHash = 843;        // 50
inline constexpr std::size_t kEntryPropsHash = 893;       // 50

inline constexpr std::size_t kImportLibraryHash = 943;    // 256
inline constexpr std::size_t kImportFunctionHash = 1199;  // 1024

inline constexpr std::size_t kExportHash = 2223;          // 128

inline constexpr std::size_t kDataDirectories = 2351;     // 15 x (size, virtual_address)
}  // namespace slots

/// Data directory names in slot order.
const std::array<std::string_view, 15>& DataDirectoryOrder();

struct FeatureVector {
  std::vector<double> values;  // kFeatureDim entries
  std::string sample_id;       // sha256

  std::span<const double> group(FeatureGroup g) const;
  bool operator==(const FeatureVector&) const = default;
};

/// Deterministic EMBER-v2-shaped vectorization.
///
/// Histograms are normalized to sum to one. Strings, general and header
/// scalars go to their fixed slots. Variable-cardinality fields use the
/// signed hashing trick inside their group's bucket ranges: section
/// (name, size|entropy|vsize) pairs add sign*value, string tokens (entry
/// section name and props, header enumerations, lowercased import libraries,
/// "lib:api" tokens, export names) add sign. Data directories are placed by
/// name in DataDirectoryOrder(); unknown names are ignored.
FeatureVector Vectorize(const PESampleRecord& record);

/// Binary dump: 32 raw sha256 bytes, then kFeatureDim little-endian float32.
void WriteVectorDump(std::ostream& out, const FeatureVector& v);
/// Reads one dump entry; std::nullopt at clean end of stream.
std::optional<FeatureVector> ReadVectorDump(std::istream& in);

}  // namespace emberxp
