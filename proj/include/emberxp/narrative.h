#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "emberxp/attribution_grouping.h"
#include "emberxp/ember_ingest.h"

namespace emberxp {

enum class ChatRole { kSystem, kUser, kAssistant };

std::string_view RoleName(ChatRole role);
/// Throws Error for anything but "system", "user", "assistant".
ChatRole ParseRole(std::string_view name);

struct ChatMessage {
  ChatRole role;
  std::string content;

  bool operator==(const ChatMessage&) const = default;
};

using Transcript = std::vector<ChatMessage>;

/// Prompt and reference wording. Loaded from a plain-text file of sections,
/// each introduced by a line "@@ <name>" (system, user, family_note,
/// reference); the section body runs to the next header, without the final
/// newline. Placeholders: {score} {verdict} {band} {group_N_name}
/// {group_N_direction} {group_N_impact} for N = 1..5, {family} (family_note
/// only), {family_note} (user only; the rendered family_note section, or
/// nothing when the sample has no family tag). "{{" and "}}" are literal braces.
struct NarrativeTemplates {
  std::string system;
  std::string user;
  std::string family_note;
  std::string reference;

  static NarrativeTemplates Default();
  static NarrativeTemplates Parse(std::string_view text);
  static NarrativeTemplates Load(const std::filesystem::path& path);
  std::string Serialize() const;
};

struct PromptCase {
  std::string sample_id;
  double ember_score = 0.0;
  Label label = Label::kBenign;
  TopGroups top_groups;
  std::optional<std::string> family;
  /// system, user, then an empty assistant slot awaiting completion.
  Transcript transcript;
};

struct ReferenceExplanation {
  std::string sample_id;
  std::string text;
};

/// "high confidence" when score >= 0.9 or <= 0.1, "moderate confidence" in
/// [0.7, 0.9) or (0.1, 0.3], otherwise "low confidence".
std::string_view ConfidenceBand(double score);

/// "malicious" / "benign". Throws Error for unlabeled.
std::string_view VerdictWord(Label label);

/// Direction phrase used in text: "toward malware" / "toward benign".
std::string_view DirectionPhrase(Direction d);

/// Score formatted with four decimals.
std::string FormatScore(double score);

PromptCase BuildPrompt(std::string_view sample_id, double score, Label label,
                       const TopGroups& top_groups, const std::optional<std::string>& family,
                       const NarrativeTemplates& templates = NarrativeTemplates::Default());

ReferenceExplanation BuildReference(std::string_view sample_id, double score, Label label,
                                    const TopGroups& top_groups,
                                    const NarrativeTemplates& templates =
                                        NarrativeTemplates::Default());

/// Chat markup. Each message is a header line "<|role|>", the escaped
/// content, a newline and the end-of-turn line "<|end|>":
///
///   <|system|>\n{content}\n<|end|>\n<|user|>\n{content}\n<|end|>\n<|assistant|>\n
///
/// A trailing assistant message with empty content renders as its header
/// alone (awaiting completion). Escaping: '\' becomes "\\" and the sequence
/// "<|" becomes "<\|", so content never contains a delimiter.
std::string RenderChat(const Transcript& transcript);
/// Inverse of RenderChat. Throws Error on malformed markup or unknown role.
Transcript ParseChat(std::string_view text);

std::string EscapeContent(std::string_view content);
std::string UnescapeContent(std::string_view content);

/// Whitespace-token count, a cheap proxy for model tokens.
std::size_t EstimateTokens(std::string_view text);

inline constexpr std::size_t kDefaultPromptTokenBudget = 1024;

}  // namespace emberxp
