#include "emberxp/narrative.h"

#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "emberxp/error.h"

namespace emberxp {

namespace {

constexpr std::string_view kDefaultTemplates = R"(@@ system
You are a malware analysis assistant. Using the EMBER score and the SHAP feature-group evidence provided, explain the classification of a Windows PE file to a security analyst.
@@ user
EMBER score: {score}
Classification: {verdict}
Top five SHAP feature groups (ranked by absolute contribution):
1. {group_1_name} ({group_1_direction}, {group_1_impact} impact)
2. {group_2_name} ({group_2_direction}, {group_2_impact} impact)
3. {group_3_name} ({group_3_direction}, {group_3_impact} impact)
4. {group_4_name} ({group_4_direction}, {group_4_impact} impact)
5. {group_5_name} ({group_5_direction}, {group_5_impact} impact)
{family_note}
Explain why EMBER classified this file as {verdict}, describing the influence of each feature group.
@@ family_note
Known malware family tag: {family}
@@ reference
EMBER assigned this file a score of {score}, a {band} {verdict} classification.
The top five SHAP feature groups ranked by absolute contribution are:
1. {group_1_name}: pushes {group_1_direction} with {group_1_impact} impact.
2. {group_2_name}: pushes {group_2_direction} with {group_2_impact} impact.
3. {group_3_name}: pushes {group_3_direction} with {group_3_impact} impact.
4. {group_4_name}: pushes {group_4_direction} with {group_4_impact} impact.
5. {group_5_name}: pushes {group_5_direction} with {group_5_impact} impact.
Taken together, these feature groups account for EMBER's {verdict} verdict.)";

using Values = std::map<std::string, std::string, std::less<>>;

std::string Substitute(std::string_view tmpl, const Values& values, std::string_view section) {
  std::string out;
  out.reserve(tmpl.size() + 256);
  for (std::size_t i = 0; i < tmpl.size(); ++i) {
    char c = tmpl[i];
    if (c == '{' && i + 1 < tmpl.size() && tmpl[i + 1] == '{') {
      out += '{';
      ++i;
    } else if (c == '}' && i + 1 < tmpl.size() && tmpl[i + 1] == '}') {
      out += '}';
      ++i;
    } else if (c == '{') {
      auto close = tmpl.find('}', i);
      if (close == std::string_view::npos) {
        throw ConfigError(fmt::format("template {}: unterminated placeholder", section));
      }
      auto name = tmpl.substr(i + 1, close - i - 1);
      auto it = values.find(name);
      if (it == values.end()) {
        throw ConfigError(fmt::format("template {}: unknown placeholder {{{}}}", section, name));
      }
      out += it->second;
      i = close;
    } else {
      out += c;
    }
  }
  return out;
}

Values CommonValues(double score, Label label, const TopGroups& top) {
  if (top.ranked.size() != 5) {
    throw Error(fmt::format("narrative needs exactly 5 ranked groups, got {}", top.ranked.size()));
  }
  Values v;
  v["score"] = FormatScore(score);
  v["verdict"] = std::string(VerdictWord(label));
  v["band"] = std::string(ConfidenceBand(score));
  for (std::size_t i = 0; i < 5; ++i) {
    const auto& g = top.ranked[i];
    v[fmt::format("group_{}_name", i + 1)] = std::string(g.display_name);
    v[fmt::format("group_{}_direction", i + 1)] = std::string(DirectionPhrase(g.direction));
    v[fmt::format("group_{}_impact", i + 1)] = std::string(ImpactName(g.impact));
  }
  return v;
}

// Removes the marker; a line holding nothing else goes with it.
std::string RemoveMarker(std::string text, std::string_view marker) {
  auto pos = text.find(marker);
  if (pos == std::string::npos) return text;
  const std::size_t after = pos + marker.size();
  const bool line_start = pos == 0 || text[pos - 1] == '\n';
  if (line_start && after < text.size() && text[after] == '\n') return text.erase(pos, marker.size() + 1);
  if (line_start && after == text.size() && pos > 0) return text.erase(pos - 1, marker.size() + 1);
  return text.erase(pos, marker.size());
}

}  // namespace

std::string_view RoleName(ChatRole role) {
  switch (role) {
    case ChatRole::kSystem:
      return "system";
    case ChatRole::kUser:
      return "user";
    case ChatRole::kAssistant:
      return "assistant";
  }
  return "user";
}

ChatRole ParseRole(std::string_view name) {
  if (name == "system") return ChatRole::kSystem;
  if (name == "user") return ChatRole::kUser;
  if (name == "assistant") return ChatRole::kAssistant;
  throw Error(fmt::format("unknown chat role \"{}\"", name));
}

NarrativeTemplates NarrativeTemplates::Default() { return Parse(kDefaultTemplates); }

NarrativeTemplates NarrativeTemplates::Parse(std::string_view text) {
  NarrativeTemplates t;
  std::map<std::string, std::string> sections;
  std::string* current = nullptr;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    std::string_view line = text.substr(pos, eol - pos);
    pos = eol + 1;
    if (line.substr(0, 3) == "@@ ") {
      std::string name(line.substr(3));
      if (sections.count(name)) throw ConfigError(fmt::format("template section {} repeated", name));
      current = &sections[name];
      continue;
    }
    if (current == nullptr) {
      if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
      throw ConfigError("template text before the first @@ section header");
    }
    current->append(line);
    current->push_back('\n');
  }
  for (auto& [name, body] : sections) {
    if (!body.empty() && body.back() == '\n') body.pop_back();
  }
  auto take = [&](const char* name) {
    auto it = sections.find(name);
    if (it == sections.end()) throw ConfigError(fmt::format("template section {} missing", name));
    return it->second;
  };
  t.system = take("system");
  t.user = take("user");
  t.family_note = take("family_note");
  t.reference = take("reference");
  for (const auto& [name, body] : sections) {
    if (name != "system" && name != "user" && name != "family_note" && name != "reference") {
      throw ConfigError(fmt::format("unknown template section {}", name));
    }
  }

  // Reject unknown placeholders up front by rendering against dummy values.
  TopGroups dummy;
  for (std::size_t i = 0; i < 5; ++i) {
    GroupAttribution g{};
    g.group = static_cast<FeatureGroup>(i);
    g.display_name = DisplayName(g.group);
    dummy.ranked.push_back(g);
  }
  Values v = CommonValues(0.5, Label::kBenign, dummy);
  Substitute(t.system, v, "system");
  Substitute(t.reference, v, "reference");
  Values fam = v;
  fam["family"] = "x";
  Substitute(t.family_note, fam, "family_note");
  v["family_note"] = "";
  Substitute(t.user, v, "user");
  return t;
}

NarrativeTemplates NarrativeTemplates::Load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(fmt::format("cannot open template file {}", path.string()));
  std::stringstream buf;
  buf << in.rdbuf();
  return Parse(buf.str());
}

std::string NarrativeTemplates::Serialize() const {
  return fmt::format("@@ system\n{}\n@@ user\n{}\n@@ family_note\n{}\n@@ reference\n{}\n", system,
                     user, family_note, reference);
}

std::string_view ConfidenceBand(double score) {
  if (score >= 0.9 || score <= 0.1) return "high confidence";
  if ((score >= 0.7 && score < 0.9) || (score > 0.1 && score <= 0.3)) return "moderate confidence";
  return "low confidence";
}

std::string_view VerdictWord(Label label) {
  switch (label) {
    case Label::kBenign:
      return "benign";
    case Label::kMalicious:
      return "malicious";
    case Label::kUnlabeled:
      break;
  }
  throw Error("an unlabeled sample has no verdict");
}

std::string_view DirectionPhrase(Direction d) {
  return d == Direction::kTowardMalware ? "toward malware" : "toward benign";
}

std::string FormatScore(double score) { return fmt::format("{:.4f}", score); }

PromptCase BuildPrompt(std::string_view sample_id, double score, Label label,
                       const TopGroups& top_groups, const std::optional<std::string>& family,
                       const NarrativeTemplates& templates) {
  Values v = CommonValues(score, label, top_groups);
  std::string note;
  if (family && !family->empty()) {
    Values fam = v;
    fam["family"] = *family;
    note = Substitute(templates.family_note, fam, "family_note");
  }
  static constexpr std::string_view kMarker = "\x01" "family_note\x01";
  v["family_note"] = note.empty() ? std::string(kMarker) : note;
  std::string user = Substitute(templates.user, v, "user");
  if (note.empty()) user = RemoveMarker(std::move(user), kMarker);

  PromptCase pc;
  pc.sample_id = std::string(sample_id);
  pc.ember_score = score;
  pc.label = label;
  pc.top_groups = top_groups;
  pc.family = family;
  pc.transcript = {{ChatRole::kSystem, Substitute(templates.system, v, "system")},
                   {ChatRole::kUser, std::move(user)},
                   {ChatRole::kAssistant, ""}};
  return pc;
}

ReferenceExplanation BuildReference(std::string_view sample_id, double score, Label label,
                                    const TopGroups& top_groups,
                                    const NarrativeTemplates& templates) {
  Values v = CommonValues(score, label, top_groups);
  return {std::string(sample_id), Substitute(templates.reference, v, "reference")};
}

std::string EscapeContent(std::string_view content) {
  std::string out;
  out.reserve(content.size());
  for (std::size_t i = 0; i < content.size(); ++i) {
    char c = content[i];
    if (c == '\\') {
      out += "\\\\";
    } else if (c == '<' && i + 1 < content.size() && content[i + 1] == '|') {
      out += "<\\|";
      ++i;
    } else {
      out += c;
    }
  }
  return out;
}

std::string UnescapeContent(std::string_view content) {
  std::string out;
  out.reserve(content.size());
  for (std::size_t i = 0; i < content.size(); ++i) {
    char c = content[i];
    if (c == '\\' && i + 1 < content.size() && (content[i + 1] == '\\' || content[i + 1] == '|')) {
      out += content[i + 1];
      ++i;
    } else {
      out += c;
    }
  }
  return out;
}

std::string RenderChat(const Transcript& transcript) {
  std::string out;
  for (std::size_t i = 0; i < transcript.size(); ++i) {
    const auto& m = transcript[i];
    out += fmt::format("<|{}|>\n", RoleName(m.role));
    const bool open = i + 1 == transcript.size() && m.role == ChatRole::kAssistant &&
                      m.content.empty();
    if (open) break;
    out += EscapeContent(m.content);
    out += "\n<|end|>\n";
  }
  return out;
}

Transcript ParseChat(std::string_view text) {
  static constexpr std::string_view kEnd = "\n<|end|>\n";
  Transcript out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    if (text.substr(pos, 2) != "<|") {
      throw Error(fmt::format("chat markup: expected a role header at byte {}", pos));
    }
    auto close = text.find("|>\n", pos + 2);
    if (close == std::string_view::npos) {
      throw Error(fmt::format("chat markup: unterminated role header at byte {}", pos));
    }
    ChatRole role = ParseRole(text.substr(pos + 2, close - pos - 2));
    pos = close + 3;
    if (pos == text.size() && role == ChatRole::kAssistant) {
      out.push_back({role, ""});
      break;
    }
    auto end = text.find(kEnd, pos);
    if (end == std::string_view::npos) {
      throw Error(fmt::format("chat markup: missing end-of-turn after byte {}", pos));
    }
    out.push_back({role, UnescapeContent(text.substr(pos, end - pos))});
    pos = end + kEnd.size();
  }
  return out;
}

std::size_t EstimateTokens(std::string_view text) {
  std::size_t count = 0;
  bool in_token = false;
  for (char c : text) {
    bool space = c == ' ' || c == '\n' || c == '\t' || c == '\r' || c == '\f' || c == '\v';
    if (!space && !in_token) ++count;
    in_token = !space;
  }
  return count;
}

}  // namespace emberxp
