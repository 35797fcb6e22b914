#include "emberxp/ember_ingest.h"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <random>
#include <unordered_set>

#include <fmt/format.h>

#include "emberxp/error.h"

namespace emberxp {

using nlohmann::json;

const char* LabelName(Label label) {
  switch (label) {
    case Label::kBenign:
      return "benign";
    case Label::kMalicious:
      return "malicious";
    case Label::kUnlabeled:
      return "unlabeled";
  }
  return "unlabeled";
}

namespace {

// Best-effort byte offset of a dotted key path inside the raw line: each
// component is searched as a quoted key after the previous one.
std::size_t LocateKey(std::string_view line, std::string_view path) {
  std::size_t pos = 0;
  std::size_t found = 0;
  while (!path.empty()) {
    auto dot = path.find('.');
    auto part = path.substr(0, dot);
    path = dot == std::string_view::npos ? std::string_view{} : path.substr(dot + 1);
    // array indices ("sections[3]") are located by their container name
    if (auto br = part.find('['); br != std::string_view::npos) part = part.substr(0, br);
    std::string quoted = fmt::format("\"{}\"", part);
    auto hit = line.find(quoted, pos);
    if (hit == std::string_view::npos) break;
    found = hit;
    pos = hit + quoted.size();
  }
  return found;
}

class Reader {
 public:
  explicit Reader(std::string_view line) : line_(line) {}

  [[noreturn]] void Fail(const std::string& path, const std::string& msg) const {
    auto off = LocateKey(line_, path);
    throw RecordParseError(fmt::format("{}: {} (byte {})", path, msg, off), off, path);
  }

  int64_t Int(const json& j, const std::string& path) const {
    if (j.is_number_integer()) return j.get<int64_t>();
    if (j.is_number_unsigned()) return static_cast<int64_t>(j.get<uint64_t>());
    if (j.is_boolean()) return j.get<bool>() ? 1 : 0;
    if (j.is_number_float()) {
      double v = j.get<double>();
      if (std::isfinite(v) && v == std::floor(v)) return static_cast<int64_t>(v);
    }
    Fail(path, fmt::format("expected integer, got {}", j.type_name()));
  }

  double Real(const json& j, const std::string& path) const {
    if (j.is_number()) {
      double v = j.get<double>();
      if (std::isfinite(v)) return v;
      Fail(path, "non-finite number");
    }
    Fail(path, fmt::format("expected number, got {}", j.type_name()));
  }

  std::string Str(const json& j, const std::string& path) const {
    if (j.is_string()) return j.get<std::string>();
    if (j.is_null()) return {};
    Fail(path, fmt::format("expected string, got {}", j.type_name()));
  }

  std::vector<std::string> StrList(const json& j, const std::string& path) const {
    std::vector<std::string> out;
    if (j.is_null()) return out;
    if (!j.is_array()) Fail(path, fmt::format("expected array, got {}", j.type_name()));
    out.reserve(j.size());
    for (std::size_t i = 0; i < j.size(); ++i) {
      out.push_back(Str(j[i], fmt::format("{}[{}]", path, i)));
    }
    return out;
  }

  template <std::size_t N>
  void IntArray(const json& j, const std::string& path, std::array<int64_t, N>& out) const {
    if (!j.is_array()) Fail(path, fmt::format("expected array, got {}", j.type_name()));
    if (j.size() != N) {
      Fail(path, fmt::format("histogram length {} (expected {})", j.size(), N));
    }
    for (std::size_t i = 0; i < N; ++i) {
      out[i] = Int(j[i], fmt::format("{}[{}]", path, i));
      if (out[i] < 0) Fail(path, fmt::format("negative count at index {}", i));
    }
  }

  // Object member or nullptr; a present non-object is an error.
  const json* Obj(const json& parent, const char* key, const std::string& path) const {
    auto it = parent.find(key);
    if (it == parent.end() || it->is_null()) return nullptr;
    if (!it->is_object()) Fail(path, fmt::format("expected object, got {}", it->type_name()));
    return &*it;
  }

  const json* Member(const json& parent, const char* key) const {
    auto it = parent.find(key);
    if (it == parent.end() || it->is_null()) return nullptr;
    return &*it;
  }

  std::string Hex(const json& root, const char* key, std::size_t len) const {
    const json* v = Member(root, key);
    if (v == nullptr) Fail(key, "missing required key");
    std::string s = Str(*v, key);
    std::transform(s.begin(), s.end(), s.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    bool hex = std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isxdigit(c); });
    if (s.size() != len || !hex) {
      Fail(key, fmt::format("expected {} hex characters, got \"{}\"", len, s));
    }
    return s;
  }

 private:
  std::string_view line_;
};

void ReadStrings(const Reader& r, const json& j, StringsInfo& out) {
  auto get = [&](const char* key) { return r.Member(j, key); };
  if (auto v = get("numstrings")) out.num_strings = r.Int(*v, "strings.numstrings");
  if (auto v = get("avlength")) out.avg_length = r.Real(*v, "strings.avlength");
  if (auto v = get("printables")) out.printables = r.Int(*v, "strings.printables");
  if (auto v = get("printabledist")) {
    if (!v->is_array() || v->size() != out.printable_dist.size()) {
      r.Fail("strings.printabledist", fmt::format("expected array of {} counts",
                                                  out.printable_dist.size()));
    }
    for (std::size_t i = 0; i < out.printable_dist.size(); ++i) {
      out.printable_dist[i] = r.Int((*v)[i], fmt::format("strings.printabledist[{}]", i));
    }
  }
  if (auto v = get("entropy")) out.entropy = r.Real(*v, "strings.entropy");
  if (auto v = get("paths")) out.paths = r.Int(*v, "strings.paths");
  if (auto v = get("urls")) out.urls = r.Int(*v, "strings.urls");
  if (auto v = get("registry")) out.registry = r.Int(*v, "strings.registry");
  if (auto v = get("MZ")) out.mz_count = r.Int(*v, "strings.MZ");
}

void ReadGeneral(const Reader& r, const json& j, GeneralInfo& out) {
  struct Field {
    const char* key;
    int64_t GeneralInfo::*slot;
  };
  static constexpr Field kFields[] = {
      {"size", &GeneralInfo::file_size},
      {"vsize", &GeneralInfo::virtual_size},
      {"has_debug", &GeneralInfo::has_debug},
      {"exports", &GeneralInfo::exports_count},
      {"imports", &GeneralInfo::imports_count},
      {"has_relocations", &GeneralInfo::has_relocations},
      {"has_resources", &GeneralInfo::has_resources},
      {"has_signature", &GeneralInfo::has_signature},
      {"has_tls", &GeneralInfo::has_tls},
      {"symbols", &GeneralInfo::symbols_count},
  };
  for (const auto& f : kFields) {
    if (auto v = r.Member(j, f.key)) out.*(f.slot) = r.Int(*v, fmt::format("general.{}", f.key));
  }
}

void ReadHeader(const Reader& r, const json& j, HeaderInfo& out) {
  if (auto coff = r.Obj(j, "coff", "header.coff")) {
    if (auto v = r.Member(*coff, "timestamp")) out.coff.timestamp = r.Int(*v, "header.coff.timestamp");
    if (auto v = r.Member(*coff, "machine")) out.coff.machine = r.Str(*v, "header.coff.machine");
    if (auto v = r.Member(*coff, "characteristics")) {
      out.coff.characteristics = r.StrList(*v, "header.coff.characteristics");
    }
  }
  if (auto opt = r.Obj(j, "optional", "header.optional")) {
    auto& o = out.optional;
    if (auto v = r.Member(*opt, "subsystem")) o.subsystem = r.Str(*v, "header.optional.subsystem");
    if (auto v = r.Member(*opt, "dll_characteristics")) {
      o.dll_characteristics = r.StrList(*v, "header.optional.dll_characteristics");
    }
    if (auto v = r.Member(*opt, "magic")) o.magic = r.Str(*v, "header.optional.magic");
    struct Field {
      const char* key;
      int64_t OptionalHeader::*slot;
    };
    static constexpr Field kFields[] = {
        {"major_image_version", &OptionalHeader::major_image_version},
        {"minor_image_version", &OptionalHeader::minor_image_version},
        {"major_linker_version", &OptionalHeader::major_linker_version},
        {"minor_linker_version", &OptionalHeader::minor_linker_version},
        {"major_operating_system_version", &OptionalHeader::major_operating_system_version},
        {"minor_operating_system_version", &OptionalHeader::minor_operating_system_version},
        {"major_subsystem_version", &OptionalHeader::major_subsystem_version},
        {"minor_subsystem_version", &OptionalHeader::minor_subsystem_version},
        {"sizeof_code", &OptionalHeader::sizeof_code},
        {"sizeof_headers", &OptionalHeader::sizeof_headers},
        {"sizeof_heap_commit", &OptionalHeader::sizeof_heap_commit},
    };
    for (const auto& f : kFields) {
      if (auto v = r.Member(*opt, f.key)) {
        o.*(f.slot) = r.Int(*v, fmt::format("header.optional.{}", f.key));
      }
    }
  }
}

void ReadSections(const Reader& r, const json& j, SectionInfo& out) {
  if (auto v = r.Member(j, "entry")) out.entry = r.Str(*v, "section.entry");
  const json* list = r.Member(j, "sections");
  if (list == nullptr) return;
  if (!list->is_array()) r.Fail("section.sections", "expected array");
  for (std::size_t i = 0; i < list->size(); ++i) {
    const json& s = (*list)[i];
    std::string path = fmt::format("section.sections[{}]", i);
    if (!s.is_object()) r.Fail(path, "expected object");
    Section sec;
    if (auto v = r.Member(s, "name")) sec.name = r.Str(*v, path + ".name");
    if (auto v = r.Member(s, "size")) sec.size = r.Int(*v, path + ".size");
    if (auto v = r.Member(s, "entropy")) sec.entropy = r.Real(*v, path + ".entropy");
    if (auto v = r.Member(s, "vsize")) sec.vsize = r.Int(*v, path + ".vsize");
    if (auto v = r.Member(s, "props")) sec.props = r.StrList(*v, path + ".props");
    out.sections.push_back(std::move(sec));
  }
}

}  // namespace

PESampleRecord ParseRecord(std::string_view line) {
  json root;
  try {
    root = json::parse(line.begin(), line.end());
  } catch (const json::parse_error& e) {
    std::size_t off = e.byte > 0 ? e.byte - 1 : 0;
    throw RecordParseError(fmt::format("malformed JSON at byte {}: {}", off, e.what()), off, "");
  }
  Reader r(line);
  if (!root.is_object()) r.Fail("", "record is not a JSON object");

  PESampleRecord rec;
  rec.sha256 = r.Hex(root, "sha256", 64);
  rec.md5 = r.Hex(root, "md5", 32);

  if (auto v = r.Member(root, "label")) {
    int64_t raw = r.Int(*v, "label");
    switch (raw) {
      case 0:
        rec.label = Label::kBenign;
        break;
      case 1:
        rec.label = Label::kMalicious;
        break;
      case -1:
        rec.label = Label::kUnlabeled;
        break;
      default:
        r.Fail("label", fmt::format("label {} outside {{-1, 0, 1}}", raw));
    }
  }
  if (auto v = r.Member(root, "avclass")) {
    auto fam = r.Str(*v, "avclass");
    if (!fam.empty()) rec.family = std::move(fam);
  }
  if (auto v = r.Member(root, "histogram")) r.IntArray(*v, "histogram", rec.byte_histogram);
  if (auto v = r.Member(root, "byteentropy")) {
    r.IntArray(*v, "byteentropy", rec.byte_entropy_histogram);
  }
  if (auto v = r.Obj(root, "strings", "strings")) ReadStrings(r, *v, rec.strings);
  if (auto v = r.Obj(root, "general", "general")) ReadGeneral(r, *v, rec.general);
  if (auto v = r.Obj(root, "header", "header")) ReadHeader(r, *v, rec.header);
  if (auto v = r.Obj(root, "section", "section")) ReadSections(r, *v, rec.section);
  if (auto v = r.Obj(root, "imports", "imports")) {
    for (const auto& [lib, apis] : v->items()) {
      auto names = r.StrList(apis, "imports." + lib);
      auto& slot = rec.imports[lib];
      slot.insert(slot.end(), names.begin(), names.end());
    }
  }
  if (auto v = r.Member(root, "exports")) rec.exports = r.StrList(*v, "exports");
  if (auto v = r.Member(root, "datadirectories")) {
    if (!v->is_array()) r.Fail("datadirectories", "expected array");
    for (std::size_t i = 0; i < v->size(); ++i) {
      const json& d = (*v)[i];
      std::string path = fmt::format("datadirectories[{}]", i);
      if (!d.is_object()) r.Fail(path, "expected object");
      DataDirectory dir;
      if (auto f = r.Member(d, "name")) dir.name = r.Str(*f, path + ".name");
      if (auto f = r.Member(d, "size")) dir.size = r.Int(*f, path + ".size");
      if (auto f = r.Member(d, "virtual_address")) {
        dir.virtual_address = r.Int(*f, path + ".virtual_address");
      }
      rec.data_directories.push_back(std::move(dir));
    }
  }
  return rec;
}

json ToJson(const PESampleRecord& rec) {
  json j;
  j["sha256"] = rec.sha256;
  j["md5"] = rec.md5;
  j["label"] = rec.label == Label::kBenign ? 0 : rec.label == Label::kMalicious ? 1 : -1;
  j["avclass"] = rec.family.value_or("");
  j["histogram"] = rec.byte_histogram;
  j["byteentropy"] = rec.byte_entropy_histogram;

  const auto& s = rec.strings;
  j["strings"] = {{"numstrings", s.num_strings}, {"avlength", s.avg_length},
                  {"printabledist", s.printable_dist}, {"printables", s.printables},
                  {"entropy", s.entropy}, {"paths", s.paths}, {"urls", s.urls},
                  {"registry", s.registry}, {"MZ", s.mz_count}};

  const auto& g = rec.general;
  j["general"] = {{"size", g.file_size}, {"vsize", g.virtual_size},
                  {"has_debug", g.has_debug}, {"exports", g.exports_count},
                  {"imports", g.imports_count}, {"has_relocations", g.has_relocations},
                  {"has_resources", g.has_resources}, {"has_signature", g.has_signature},
                  {"has_tls", g.has_tls}, {"symbols", g.symbols_count}};

  const auto& c = rec.header.coff;
  const auto& o = rec.header.optional;
  j["header"]["coff"] = {{"timestamp", c.timestamp}, {"machine", c.machine},
                         {"characteristics", c.characteristics}};
  j["header"]["optional"] = {
      {"subsystem", o.subsystem},
      {"dll_characteristics", o.dll_characteristics},
      {"magic", o.magic},
      {"major_image_version", o.major_image_version},
      {"minor_image_version", o.minor_image_version},
      {"major_linker_version", o.major_linker_version},
      {"minor_linker_version", o.minor_linker_version},
      {"major_operating_system_version", o.major_operating_system_version},
      {"minor_operating_system_version", o.minor_operating_system_version},
      {"major_subsystem_version", o.major_subsystem_version},
      {"minor_subsystem_version", o.minor_subsystem_version},
      {"sizeof_code", o.sizeof_code},
      {"sizeof_headers", o.sizeof_headers},
      {"sizeof_heap_commit", o.sizeof_heap_commit}};

  json sections = json::array();
  for (const auto& sec : rec.section.sections) {
    sections.push_back({{"name", sec.name}, {"size", sec.size}, {"entropy", sec.entropy},
                        {"vsize", sec.vsize}, {"props", sec.props}});
  }
  j["section"] = {{"entry", rec.section.entry}, {"sections", sections}};

  j["imports"] = json::object();
  for (const auto& [lib, apis] : rec.imports) j["imports"][lib] = apis;
  j["exports"] = rec.exports;

  json dirs = json::array();
  for (const auto& d : rec.data_directories) {
    dirs.push_back({{"name", d.name}, {"size", d.size}, {"virtual_address", d.virtual_address}});
  }
  j["datadirectories"] = dirs;
  return j;
}

bool Accepts(LabelFilter filter, Label label) {
  switch (filter) {
    case LabelFilter::kAll:
      return true;
    case LabelFilter::kLabeledOnly:
      return label != Label::kUnlabeled;
    case LabelFilter::kBenignOnly:
      return label == Label::kBenign;
    case LabelFilter::kMaliciousOnly:
      return label == Label::kMalicious;
  }
  return false;
}

RecordReader::RecordReader(const std::filesystem::path& path, LabelFilter filter,
                           CorruptLinePolicy policy)
    : in_(path, std::ios::binary), filter_(filter), policy_(policy) {
  if (!in_) throw DatasetError(fmt::format("cannot open dataset {}", path.string()));
}

std::optional<PESampleRecord> RecordReader::Next() {
  std::string line;
  while (std::getline(in_, line)) {
    ++line_no_;
    std::size_t line_start = file_offset_;
    file_offset_ += line.size() + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    try {
      PESampleRecord rec = ParseRecord(line);
      if (Accepts(filter_, rec.label)) return rec;
    } catch (const RecordParseError& e) {
      if (policy_ == CorruptLinePolicy::kAbort) {
        throw RecordParseError(fmt::format("line {}: {}", line_no_, e.what()),
                               line_start + e.offset(), e.key_path());
      }
      ++skipped_;
      skipped_lines_.push_back(line_no_);
    }
  }
  if (in_.bad()) throw DatasetError(fmt::format("I/O failure after line {}", line_no_));
  return std::nullopt;
}

std::vector<PESampleRecord> LoadDataset(const std::filesystem::path& path, LabelFilter filter,
                                        CorruptLinePolicy policy, std::size_t* skipped) {
  RecordReader reader(path, filter, policy);
  std::vector<PESampleRecord> out;
  while (auto rec = reader.Next()) out.push_back(std::move(*rec));
  if (skipped != nullptr) *skipped = reader.skipped();
  return out;
}

namespace {

// Uniform index in [0, n) from raw 64-bit draws, rejecting the biased tail.
uint64_t DrawIndex(std::mt19937_64& rng, uint64_t n) {
  const uint64_t limit = UINT64_MAX - (UINT64_MAX % n);
  uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % n;
}

void Shuffle(std::vector<std::string>& ids, std::mt19937_64& rng) {
  for (std::size_t i = ids.size(); i > 1; --i) {
    std::size_t j = DrawIndex(rng, i);
    std::swap(ids[i - 1], ids[j]);
  }
}

}  // namespace

CorpusSplit SelectCorpus(const std::vector<PESampleRecord>& records, uint64_t seed,
                         const SplitSizes& sizes) {
  std::vector<std::string> benign, malicious;
  std::unordered_set<std::string> seen;
  for (const auto& rec : records) {
    if (rec.label == Label::kUnlabeled) continue;
    if (!seen.insert(rec.sha256).second) continue;
    (rec.label == Label::kBenign ? benign : malicious).push_back(rec.sha256);
  }

  const std::size_t need_benign = sizes.test_benign + sizes.focus_benign + sizes.train_benign;
  const std::size_t need_malicious =
      sizes.test_malicious + sizes.focus_malicious + sizes.train_malicious;
  if (benign.size() < need_benign || malicious.size() < need_malicious) {
    throw DatasetError(fmt::format(
        "insufficient labeled records: benign {} (need {}), malicious {} (need {})",
        benign.size(), need_benign, malicious.size(), need_malicious));
  }

  std::mt19937_64 rng(seed);
  Shuffle(benign, rng);
  Shuffle(malicious, rng);

  CorpusSplit split;
  split.seed = seed;
  auto take = [](std::vector<std::string>& from, std::size_t& cursor, int n,
                 std::vector<std::string>& to) {
    to.insert(to.end(), from.begin() + cursor, from.begin() + cursor + n);
    cursor += n;
  };
  std::size_t b = 0, m = 0;
  take(benign, b, sizes.test_benign, split.test);
  take(malicious, m, sizes.test_malicious, split.test);
  take(benign, b, sizes.focus_benign, split.focus);
  take(malicious, m, sizes.focus_malicious, split.focus);
  take(benign, b, sizes.train_benign, split.train);
  take(malicious, m, sizes.train_malicious, split.train);
  return split;
}

json ToJson(const CorpusSplit& split) {
  return {{"seed", split.seed},
          {"train", split.train},
          {"test", split.test},
          {"focus", split.focus}};
}

}  // namespace emberxp
