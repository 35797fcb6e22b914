#include "emberxp/synthetic.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include <fmt/format.h>

#include "emberxp/error.h"

namespace emberxp {

namespace {

class Draw {
 public:
  explicit Draw(uint64_t seed) : rng_(seed) {}

  double Uniform() { return static_cast<double>(rng_() >> 11) * 0x1.0p-53; }
  double Range(double lo, double hi) { return lo + (hi - lo) * Uniform(); }
  int64_t Int(int64_t lo, int64_t hi) {
    return lo + static_cast<int64_t>(Uniform() * static_cast<double>(hi - lo + 1));
  }
  bool Chance(double p) { return Uniform() < p; }
  template <typename T>
  const T& Pick(const std::vector<T>& v) {
    return v[static_cast<std::size_t>(Uniform() * static_cast<double>(v.size()))];
  }
  std::string Hex(std::size_t chars) {
    static constexpr char kDigits[] = "0123456789abcdef";
    std::string out;
    while (out.size() < chars) {
      uint64_t bits = rng_();
      for (int i = 0; i < 16 && out.size() < chars; ++i, bits >>= 4) out += kDigits[bits & 0xf];
    }
    return out;
  }

 private:
  std::mt19937_64 rng_;
};

constexpr double kCrossover = 0.3;

const std::vector<std::string> kBenignApis = {
    "CreateFileW", "ReadFile", "WriteFile", "CloseHandle", "GetModuleHandleW", "RegOpenKeyExW",
    "GetLastError", "HeapAlloc", "HeapFree", "MultiByteToWideChar", "GetSystemTimeAsFileTime"};
const std::vector<std::string> kSuspiciousApis = {
    "VirtualAlloc", "VirtualProtect", "WriteProcessMemory", "CreateRemoteThread",
    "LoadLibraryA", "GetProcAddress", "IsDebuggerPresent", "URLDownloadToFileA",
    "SetWindowsHookExA", "OpenProcess"};
const std::vector<std::string> kBenignLibs = {"kernel32.dll", "user32.dll", "advapi32.dll",
                                              "gdi32.dll", "shell32.dll", "ole32.dll"};
const std::vector<std::string> kSuspiciousLibs = {"kernel32.dll", "ws2_32.dll", "wininet.dll",
                                                  "urlmon.dll", "ntdll.dll"};
const std::vector<std::string> kFamilies = {"zbot", "emotet", "xtrat", "installmonster",
                                            "fareit"};

void FillHistograms(PESampleRecord& r, Draw& d, bool mal) {
  // Malicious files skew toward flat (packed) byte distributions.
  const double flat = mal ? d.Range(0.4, 1.0) : d.Range(0.0, 0.6);
  for (int i = 0; i < 256; ++i) {
    double peak = (i == 0 || i == 0xff) ? 40.0 : (i < 128 ? 6.0 : 2.0);
    double w = flat * 4.0 + (1.0 - flat) * peak;
    r.byte_histogram[i] = static_cast<int64_t>(w * d.Range(50.0, 150.0));
  }
  for (int i = 0; i < 256; ++i) {
    const int entropy_bin = i / 16;
    double center = mal ? 12.0 : 6.0;
    double w = std::exp(-0.5 * std::pow((entropy_bin - center) / 3.0, 2.0));
    r.byte_entropy_histogram[i] = static_cast<int64_t>(w * d.Range(100.0, 400.0));
  }
}

void FillStrings(PESampleRecord& r, Draw& d, bool mal) {
  auto& s = r.strings;
  s.num_strings = mal ? d.Int(20, 900) : d.Int(300, 4000);
  s.avg_length = mal ? d.Range(4.0, 9.0) : d.Range(6.0, 14.0);
  for (auto& c : s.printable_dist) c = d.Int(0, 400);
  s.printables = 0;
  for (auto c : s.printable_dist) s.printables += c;
  s.entropy = mal ? d.Range(5.2, 6.6) : d.Range(4.5, 6.0);
  s.paths = d.Int(0, mal ? 3 : 12);
  s.urls = d.Int(0, mal ? 10 : 3);
  s.registry = d.Int(0, mal ? 8 : 4);
  s.mz_count = d.Int(1, mal ? 4 : 2);
}

void FillGeneralAndHeader(PESampleRecord& r, Draw& d, bool mal) {
  auto& g = r.general;
  g.file_size = mal ? d.Int(20'000, 900'000) : d.Int(100'000, 8'000'000);
  g.virtual_size = g.file_size + d.Int(0, mal ? 2'000'000 : 200'000);
  g.has_debug = d.Chance(mal ? 0.2 : 0.8);
  g.has_relocations = d.Chance(mal ? 0.4 : 0.9);
  g.has_resources = d.Chance(0.7);
  g.has_signature = d.Chance(mal ? 0.05 : 0.6);
  g.has_tls = d.Chance(mal ? 0.3 : 0.1);
  g.symbols_count = d.Chance(0.1) ? d.Int(1, 50) : 0;

  auto& h = r.header;
  h.coff.timestamp = mal ? d.Int(0, 1'600'000'000) : d.Int(1'200'000'000, 1'600'000'000);
  h.coff.machine = d.Chance(0.8) ? "I386" : "AMD64";
  h.coff.characteristics = {"EXECUTABLE_IMAGE"};
  if (h.coff.machine == "I386") h.coff.characteristics.push_back("CHARA_32BIT_MACHINE");
  if (!mal && d.Chance(0.5)) h.coff.characteristics.push_back("LARGE_ADDRESS_AWARE");
  auto& o = h.optional;
  o.subsystem = d.Chance(mal ? 0.8 : 0.5) ? "WINDOWS_GUI" : "WINDOWS_CUI";
  if (d.Chance(mal ? 0.2 : 0.8)) o.dll_characteristics.push_back("DYNAMIC_BASE");
  if (d.Chance(mal ? 0.2 : 0.8)) o.dll_characteristics.push_back("NX_COMPAT");
  o.magic = h.coff.machine == "I386" ? "PE32" : "PE32_PLUS";
  o.major_linker_version = mal ? d.Int(2, 10) : d.Int(9, 14);
  o.minor_linker_version = d.Int(0, 30);
  o.major_operating_system_version = d.Int(4, 6);
  o.major_subsystem_version = d.Int(4, 6);
  o.sizeof_code = g.file_size / d.Int(2, 6);
  o.sizeof_headers = 1024;
  o.sizeof_heap_commit = 4096;
}

void FillSections(PESampleRecord& r, Draw& d, bool mal) {
  auto add = [&](std::string name, double lo, double hi, std::vector<std::string> props) {
    Section s;
    s.name = std::move(name);
    s.size = d.Int(512, 400'000);
    s.entropy = d.Range(lo, hi);
    s.vsize = s.size + d.Int(0, 4096);
    s.props = std::move(props);
    r.section.sections.push_back(std::move(s));
  };
  const bool packed = d.Chance(mal ? 0.6 : 0.08);
  if (packed) {
    add("UPX0", 0.0, 0.5, {"CNT_UNINITIALIZED_DATA", "MEM_EXECUTE", "MEM_READ", "MEM_WRITE"});
    add("UPX1", 7.0, 8.0, {"CNT_INITIALIZED_DATA", "MEM_EXECUTE", "MEM_READ", "MEM_WRITE"});
    r.section.entry = "UPX1";
  } else {
    add(".text", mal ? 6.0 : 5.5, mal ? 7.5 : 6.6, {"CNT_CODE", "MEM_EXECUTE", "MEM_READ"});
    add(".rdata", 3.0, 6.0, {"CNT_INITIALIZED_DATA", "MEM_READ"});
    r.section.entry = ".text";
  }
  add(".data", 1.0, mal ? 7.0 : 4.0, {"CNT_INITIALIZED_DATA", "MEM_READ", "MEM_WRITE"});
  if (r.general.has_resources) add(".rsrc", 2.0, 7.5, {"CNT_INITIALIZED_DATA", "MEM_READ"});
  if (r.general.has_relocations) add(".reloc", 4.0, 6.0, {"CNT_INITIALIZED_DATA", "MEM_READ"});
}

void FillImportsExports(PESampleRecord& r, Draw& d, bool mal) {
  const int libs = static_cast<int>(d.Int(mal ? 1 : 3, mal ? 4 : 6));
  for (int i = 0; i < libs; ++i) {
    const auto& lib = d.Pick(mal && d.Chance(0.5) ? kSuspiciousLibs : kBenignLibs);
    auto& apis = r.imports[lib];
    const int n = static_cast<int>(d.Int(2, 8));
    for (int k = 0; k < n; ++k) {
      const auto& api = d.Pick(d.Chance(mal ? 0.6 : 0.08) ? kSuspiciousApis : kBenignApis);
      if (std::find(apis.begin(), apis.end(), api) == apis.end()) apis.push_back(api);
    }
  }
  int64_t count = 0;
  for (const auto& [lib, apis] : r.imports) count += static_cast<int64_t>(apis.size());
  r.general.imports_count = count;
  if (d.Chance(mal ? 0.1 : 0.3)) {
    const int n = static_cast<int>(d.Int(1, 6));
    for (int k = 0; k < n; ++k) r.exports.push_back(fmt::format("Export{}", d.Int(0, 40)));
  }
  r.general.exports_count = static_cast<int64_t>(r.exports.size());
}

void FillDirectories(PESampleRecord& r, Draw& d, bool mal) {
  for (auto name : DataDirectoryOrder()) {
    DataDirectory dir;
    dir.name = std::string(name);
    const bool present = name == "CERTIFICATE_TABLE" ? r.general.has_signature != 0
                         : name == "DEBUG"           ? r.general.has_debug != 0
                                                     : d.Chance(mal ? 0.4 : 0.6);
    if (present) {
      dir.size = d.Int(16, 40'000);
      dir.virtual_address = d.Int(4096, 2'000'000);
    }
    r.data_directories.push_back(std::move(dir));
  }
}

PESampleRecord MakeRecord(Draw& d, Label label) {
  PESampleRecord r;
  r.sha256 = d.Hex(64);
  r.md5 = d.Hex(32);
  r.label = label;
  // Unlabeled records draw from either class.
  const bool mal = label == Label::kMalicious || (label == Label::kUnlabeled && d.Chance(0.5));
  if (label == Label::kMalicious && d.Chance(0.7)) r.family = d.Pick(kFamilies);
  // Each feature family independently looks like the other class sometimes,
  // so no single group separates the classes.
  auto look = [&] { return d.Chance(kCrossover) ? !mal : mal; };
  FillHistograms(r, d, look());
  FillStrings(r, d, look());
  FillGeneralAndHeader(r, d, look());
  FillSections(r, d, look());
  FillImportsExports(r, d, look());
  FillDirectories(r, d, look());
  return r;
}

struct TreeBuilder {
  const std::vector<std::vector<double>>& rows;
  const std::vector<double>& grad;
  const std::vector<double>& hess;
  const std::vector<int>& features;
  const std::vector<std::vector<double>>& cuts;  // per entry of `features`
  const GbdtTrainOptions& opt;
  DecisionTree tree;

  double LeafValue(const std::vector<std::size_t>& idx) const {
    double g = 0.0, h = 0.0;
    for (auto i : idx) {
      g += grad[i];
      h += hess[i];
    }
    return -opt.learning_rate * g / (h + opt.lambda);
  }

  int AddLeaf(const std::vector<std::size_t>& idx) {
    tree.leaf_value.push_back(LeafValue(idx));
    tree.leaf_cover.push_back(static_cast<double>(idx.size()));
    return ~static_cast<int>(tree.leaf_value.size() - 1);
  }

  // Returns a child reference.
  int Build(const std::vector<std::size_t>& idx, int depth) {
    if (depth >= opt.max_depth || static_cast<int>(idx.size()) < 2 * opt.min_leaf) {
      return AddLeaf(idx);
    }
    double g_total = 0.0, h_total = 0.0;
    for (auto i : idx) {
      g_total += grad[i];
      h_total += hess[i];
    }
    const double parent_score = g_total * g_total / (h_total + opt.lambda);
    double best_gain = 1e-9;
    int best_f = -1;
    double best_cut = 0.0;
    std::vector<double> g_bin, h_bin;
    std::vector<int> n_bin;
    for (std::size_t fi = 0; fi < features.size(); ++fi) {
      const auto& c = cuts[fi];
      const std::size_t bins = c.size() + 1;
      g_bin.assign(bins, 0.0);
      h_bin.assign(bins, 0.0);
      n_bin.assign(bins, 0);
      const int f = features[fi];
      for (auto i : idx) {
        const auto b = static_cast<std::size_t>(
            std::lower_bound(c.begin(), c.end(), rows[i][f]) - c.begin());
        g_bin[b] += grad[i];
        h_bin[b] += hess[i];
        ++n_bin[b];
      }
      double gl = 0.0, hl = 0.0;
      int nl = 0;
      for (std::size_t b = 0; b + 1 < bins; ++b) {
        gl += g_bin[b];
        hl += h_bin[b];
        nl += n_bin[b];
        const int nr = static_cast<int>(idx.size()) - nl;
        if (nl < opt.min_leaf || nr < opt.min_leaf) continue;
        const double gr = g_total - gl, hr = h_total - hl;
        const double gain =
            gl * gl / (hl + opt.lambda) + gr * gr / (hr + opt.lambda) - parent_score;
        if (gain > best_gain) {
          best_gain = gain;
          best_f = f;
          best_cut = c[b];
        }
      }
    }
    if (best_f < 0) return AddLeaf(idx);

    std::vector<std::size_t> left, right;
    for (auto i : idx) (rows[i][best_f] <= best_cut ? left : right).push_back(i);
    const int node = static_cast<int>(tree.split_feature.size());
    tree.split_feature.push_back(best_f);
    tree.threshold.push_back(best_cut);
    tree.left_child.push_back(0);
    tree.right_child.push_back(0);
    tree.default_left.push_back(true);
    tree.missing_type.push_back(MissingType::kNone);
    tree.internal_cover.push_back(static_cast<double>(idx.size()));
    const int l = Build(left, depth + 1);
    const int r = Build(right, depth + 1);
    tree.left_child[node] = l;
    tree.right_child[node] = r;
    return node;
  }
};

}  // namespace

std::vector<PESampleRecord> SyntheticRecords(const SyntheticCorpusOptions& options) {
  Draw d(options.seed);
  std::vector<Label> labels;
  labels.insert(labels.end(), options.benign, Label::kBenign);
  labels.insert(labels.end(), options.malicious, Label::kMalicious);
  labels.insert(labels.end(), options.unlabeled, Label::kUnlabeled);
  // Interleave classes so file order carries no label signal.
  for (std::size_t i = labels.size(); i > 1; --i) {
    std::swap(labels[i - 1], labels[static_cast<std::size_t>(d.Uniform() * static_cast<double>(i))]);
  }
  std::vector<PESampleRecord> out;
  out.reserve(labels.size());
  for (auto label : labels) out.push_back(MakeRecord(d, label));
  return out;
}

void WriteJsonl(const std::vector<PESampleRecord>& records, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(fmt::format("cannot write {}", path.string()));
  for (const auto& r : records) out << ToJson(r).dump() << '\n';
  if (!out) throw Error(fmt::format("write failed for {}", path.string()));
}

Ensemble TrainGbdt(const std::vector<std::vector<double>>& rows, const std::vector<int>& labels,
                   const GbdtTrainOptions& options) {
  if (rows.empty() || rows.size() != labels.size()) {
    throw Error("TrainGbdt needs one label per row and at least one row");
  }
  const std::size_t n = rows.size();
  const std::size_t dim = rows[0].size();
  for (const auto& row : rows) {
    if (row.size() != dim) throw DimensionError("TrainGbdt rows differ in length");
  }

  std::vector<int> features;
  std::vector<std::vector<double>> cuts;
  std::vector<double> column(n);
  for (std::size_t f = 0; f < dim; ++f) {
    for (std::size_t i = 0; i < n; ++i) column[i] = rows[i][f];
    std::sort(column.begin(), column.end());
    column.erase(std::unique(column.begin(), column.end()), column.end());
    if (column.size() < 2) continue;
    std::vector<double> c;
    const std::size_t gaps = column.size() - 1;
    const std::size_t want = std::min<std::size_t>(gaps, options.max_thresholds);
    for (std::size_t k = 0; k < want; ++k) {
      const std::size_t g = (k * gaps) / want;
      c.push_back(0.5 * (column[g] + column[g + 1]));
    }
    c.erase(std::unique(c.begin(), c.end()), c.end());
    features.push_back(static_cast<int>(f));
    cuts.push_back(std::move(c));
    column.resize(n);
  }

  double positives = 0.0;
  for (int y : labels) positives += y != 0 ? 1.0 : 0.0;
  const double prior = std::clamp(positives / static_cast<double>(n), 1e-6, 1.0 - 1e-6);
  const double init = std::log(prior / (1.0 - prior));

  Ensemble ens;
  ens.num_features = dim;
  std::vector<double> margin(n, init), grad(n), hess(n);
  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;
  for (int t = 0; t < options.num_trees; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      const double p = Sigmoid(margin[i]);
      grad[i] = p - (labels[i] != 0 ? 1.0 : 0.0);
      hess[i] = std::max(p * (1.0 - p), 1e-12);
    }
    TreeBuilder b{rows, grad, hess, features, cuts, options, {}};
    b.Build(all, 0);
    if (t == 0) {
      for (double& v : b.tree.leaf_value) v += init;
    }
    for (std::size_t i = 0; i < n; ++i) {
      margin[i] += b.tree.Predict(rows[i]) - (t == 0 ? init : 0.0);
    }
    ens.trees.push_back(std::move(b.tree));
  }
  return ens;
}

SyntheticFixture BuildSyntheticFixture(const SyntheticCorpusOptions& corpus,
                                       const GbdtTrainOptions& training) {
  SyntheticFixture fx;
  fx.records = SyntheticRecords(corpus);
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  for (const auto& r : fx.records) {
    if (r.label == Label::kUnlabeled) continue;
    rows.push_back(Vectorize(r).values);
    labels.push_back(r.label == Label::kMalicious ? 1 : 0);
  }
  fx.model = TrainGbdt(rows, labels, training);
  return fx;
}

}  // namespace emberxp
