#include "emberxp/ember_ingest.h"

#include <algorithm>
#include <set>

#include <gtest/gtest.h>

#include "emberxp/error.h"
#include "test_support.h"

namespace emberxp {
namespace {

using nlohmann::json;

std::string Sha(int i) {
  std::string s(64, '0');
  std::string n = std::to_string(i);
  std::copy(n.begin(), n.end(), s.end() - static_cast<std::ptrdiff_t>(n.size()));
  return s;
}

json MinimalJson(int id, int label) {
  return {{"sha256", Sha(id)}, {"md5", std::string(32, 'a')}, {"label", label}};
}

PESampleRecord FullRecord() {
  PESampleRecord r;
  r.sha256 = Sha(7);
  r.md5 = std::string(32, 'b');
  r.label = Label::kBenign;
  r.family = "emotet";
  for (int i = 0; i < 256; ++i) {
    r.byte_histogram[i] = i;
    r.byte_entropy_histogram[i] = 255 - i;
  }
  r.strings.num_strings = 321;
  r.strings.avg_length = 13.12;
  r.strings.printables = 4212;
  r.strings.printable_dist[5] = 9;
  r.strings.entropy = 5.25;
  r.strings.mz_count = 2;
  r.general.file_size = 33280;
  r.general.imports_count = 3;
  r.header.coff.timestamp = 1234567890;
  r.header.coff.machine = "I386";
  r.header.coff.characteristics = {"EXECUTABLE_IMAGE", "CHARA_32BIT_MACHINE"};
  r.header.optional.subsystem = "WINDOWS_GUI";
  r.header.optional.sizeof_code = 4096;
  r.section.entry = ".text";
  r.section.sections = {{".text", 1024, 6.1, 980, {"CNT_CODE", "MEM_EXECUTE"}},
                        {".data", 512, 0.5, 600, {"MEM_WRITE"}}};
  r.imports["kernel32.dll"] = {"CreateFileA", "ReadFile"};
  r.imports["user32.dll"] = {"MessageBoxA"};
  r.exports = {"alpha", "beta", "gamma", "delta"};
  r.data_directories = {{"IMPORT_TABLE", 80, 8192}, {"DEBUG", 0, 0}};
  return r;
}

TEST(ParseRecord, ExampleFieldsReadBack) {
  json j = MinimalJson(1, 0);
  j["strings"] = {{"numstrings", 321}, {"avlength", 13.12}};
  j["exports"] = {"a", "b", "c", "d"};
  auto rec = ParseRecord(j.dump());
  EXPECT_EQ(rec.label, Label::kBenign);
  EXPECT_EQ(rec.strings.num_strings, 321);
  EXPECT_DOUBLE_EQ(rec.strings.avg_length, 13.12);
  EXPECT_EQ(rec.exports.size(), 4u);
}

TEST(ParseRecord, LabelMapping) {
  EXPECT_EQ(ParseRecord(MinimalJson(1, -1).dump()).label, Label::kUnlabeled);
  EXPECT_EQ(ParseRecord(MinimalJson(1, 1).dump()).label, Label::kMalicious);
  try {
    ParseRecord(MinimalJson(1, 2).dump());
    FAIL() << "label 2 accepted";
  } catch (const RecordParseError& e) {
    EXPECT_EQ(e.key_path(), "label");
  }
}

TEST(ParseRecord, ShortHistogramNamesKeyAndLength) {
  json j = MinimalJson(1, 0);
  j["histogram"] = std::vector<int>(255, 1);
  try {
    ParseRecord(j.dump());
    FAIL() << "255-entry histogram accepted";
  } catch (const RecordParseError& e) {
    EXPECT_EQ(e.key_path(), "histogram");
    EXPECT_NE(std::string(e.what()).find("255"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("histogram"), std::string::npos);
    const std::string line = j.dump();
    EXPECT_EQ(line.substr(e.offset(), 11), "\"histogram\"");
  }
}

TEST(ParseRecord, MalformedJsonReportsOffset) {
  const std::string line = R"({"sha256": "ab", oops})";
  try {
    ParseRecord(line);
    FAIL();
  } catch (const RecordParseError& e) {
    EXPECT_GT(e.offset(), 10u);
    EXPECT_LT(e.offset(), line.size());
  }
}

TEST(ParseRecord, HashesNormalizedAndChecked) {
  json j = MinimalJson(1, 0);
  j["sha256"] = std::string(64, 'A');
  EXPECT_EQ(ParseRecord(j.dump()).sha256, std::string(64, 'a'));
  j["sha256"] = std::string(63, 'a');
  EXPECT_THROW(ParseRecord(j.dump()), RecordParseError);
  j["sha256"] = std::string(63, 'a') + "g";
  EXPECT_THROW(ParseRecord(j.dump()), RecordParseError);
}

TEST(ParseRecord, UnknownKeysIgnoredMissingObjectsDefault) {
  json j = MinimalJson(1, 0);
  j["appeared"] = "2018-01";
  j["something_new"] = {{"x", 1}};
  auto rec = ParseRecord(j.dump());
  EXPECT_EQ(rec.strings.num_strings, 0);
  EXPECT_TRUE(rec.imports.empty());
  EXPECT_FALSE(rec.family.has_value());
}

TEST(ParseRecord, CanonicalRoundTrip) {
  const auto rec = FullRecord();
  const auto again = ParseRecord(ToJson(rec).dump());
  EXPECT_EQ(rec, again);
  EXPECT_EQ(ToJson(again), ToJson(rec));
}

TEST(ParseRecord, SyntheticRecordsRoundTrip) {
  SyntheticCorpusOptions opts;
  opts.benign = 10;
  opts.malicious = 10;
  opts.unlabeled = 5;
  for (const auto& rec : SyntheticRecords(opts)) {
    EXPECT_EQ(ParseRecord(ToJson(rec).dump()), rec);
  }
}

TEST(LoadDataset, FilterAndOrder) {
  testing::TempDir dir("ingest");
  std::string text;
  text += MinimalJson(1, 0).dump() + "\n";
  text += MinimalJson(2, -1).dump() + "\n";
  text += MinimalJson(3, 1).dump() + "\n";
  testing::WriteFile(dir / "d.jsonl", text);
  auto recs = LoadDataset(dir / "d.jsonl", LabelFilter::kLabeledOnly);
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_EQ(recs[0].sha256, Sha(1));
  EXPECT_EQ(recs[1].sha256, Sha(3));
  EXPECT_EQ(LoadDataset(dir / "d.jsonl", LabelFilter::kMaliciousOnly).size(), 1u);
  EXPECT_EQ(LoadDataset(dir / "d.jsonl", LabelFilter::kAll).size(), 3u);
}

TEST(LoadDataset, EmptyFile) {
  testing::TempDir dir("ingest");
  testing::WriteFile(dir / "e.jsonl", "");
  std::size_t skipped = 99;
  EXPECT_TRUE(LoadDataset(dir / "e.jsonl", LabelFilter::kAll, CorruptLinePolicy::kSkip, &skipped)
                  .empty());
  EXPECT_EQ(skipped, 0u);
}

TEST(LoadDataset, CorruptLineSkipOrAbort) {
  testing::TempDir dir("ingest");
  const std::string first = MinimalJson(1, 0).dump() + "\n";
  testing::WriteFile(dir / "c.jsonl", first + "{not json\n" + MinimalJson(3, 1).dump() + "\n");

  RecordReader reader(dir / "c.jsonl", LabelFilter::kAll, CorruptLinePolicy::kSkip);
  int n = 0;
  while (reader.Next()) ++n;
  EXPECT_EQ(n, 2);
  EXPECT_EQ(reader.skipped(), 1u);
  EXPECT_EQ(reader.skipped_lines(), std::vector<std::size_t>{2});

  try {
    LoadDataset(dir / "c.jsonl", LabelFilter::kAll, CorruptLinePolicy::kAbort);
    FAIL();
  } catch (const RecordParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
    EXPECT_GE(e.offset(), first.size());
  }
}

TEST(LoadDataset, MissingFileIsDatasetError) {
  EXPECT_THROW(LoadDataset("/nonexistent/emberxp.jsonl", LabelFilter::kAll), DatasetError);
}

std::vector<PESampleRecord> Balanced(int benign, int malicious, int unlabeled = 0) {
  std::vector<PESampleRecord> out;
  int id = 0;
  for (int i = 0; i < benign + malicious + unlabeled; ++i) {
    PESampleRecord r;
    r.sha256 = Sha(++id);
    r.md5 = std::string(32, 'c');
    r.label = i < benign ? Label::kBenign : i < benign + malicious ? Label::kMalicious
                                                                    : Label::kUnlabeled;
    out.push_back(r);
  }
  return out;
}

TEST(SelectCorpus, SizesAndClassCounts) {
  auto recs = Balanced(1000, 1000);
  std::map<std::string, Label> label;
  for (const auto& r : recs) label[r.sha256] = r.label;
  auto split = SelectCorpus(recs, 42);
  ASSERT_EQ(split.train.size(), 1000u);
  ASSERT_EQ(split.test.size(), 50u);
  ASSERT_EQ(split.focus.size(), 5u);
  auto count = [&](const std::vector<std::string>& ids, Label l) {
    return std::count_if(ids.begin(), ids.end(), [&](const auto& id) { return label[id] == l; });
  };
  EXPECT_EQ(count(split.train, Label::kMalicious), 500);
  EXPECT_EQ(count(split.test, Label::kMalicious), 25);
  EXPECT_EQ(count(split.focus, Label::kMalicious), 3);
  EXPECT_EQ(count(split.focus, Label::kBenign), 2);

  std::set<std::string> all;
  for (const auto* part : {&split.train, &split.test, &split.focus}) {
    for (const auto& id : *part) {
      EXPECT_TRUE(label.count(id));
      EXPECT_TRUE(all.insert(id).second) << "duplicate id " << id;
    }
  }
}

TEST(SelectCorpus, DeterministicAndSeedSensitive) {
  auto recs = Balanced(600, 600);
  EXPECT_EQ(SelectCorpus(recs, 42), SelectCorpus(recs, 42));
  EXPECT_NE(SelectCorpus(recs, 42).test, SelectCorpus(recs, 43).test);
}

TEST(SelectCorpus, UnlabeledPlacementIrrelevant) {
  auto recs = Balanced(600, 600, 40);
  auto base = SelectCorpus(recs, 9);
  // Move every unlabeled record to the front; labeled order is unchanged.
  std::stable_partition(recs.begin(), recs.end(),
                        [](const auto& r) { return r.label == Label::kUnlabeled; });
  EXPECT_EQ(SelectCorpus(recs, 9), base);
}

TEST(SelectCorpus, DuplicateIdsKeepFirst) {
  auto recs = Balanced(600, 600);
  auto dup = recs[0];
  dup.label = Label::kMalicious;
  recs.push_back(dup);
  auto split = SelectCorpus(recs, 1);
  std::set<std::string> all(split.train.begin(), split.train.end());
  all.insert(split.test.begin(), split.test.end());
  all.insert(split.focus.begin(), split.focus.end());
  EXPECT_EQ(all.size(), 1055u);
}

TEST(SelectCorpus, InsufficientCountsListed) {
  try {
    SelectCorpus(Balanced(50, 50), 42);
    FAIL();
  } catch (const DatasetError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("benign 50"), std::string::npos) << what;
    EXPECT_NE(what.find("malicious 50"), std::string::npos) << what;
  }
}

TEST(SelectCorpus, ExactMinimumSuffices) {
  EXPECT_NO_THROW(SelectCorpus(Balanced(527, 528), 3));
  EXPECT_THROW(SelectCorpus(Balanced(526, 528), 3), DatasetError);
  EXPECT_THROW(SelectCorpus(Balanced(527, 527), 3), DatasetError);
}

}  // namespace
}  // namespace emberxp
