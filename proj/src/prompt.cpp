#include "mmctl/prompt.hpp"

#include <cctype>

#include "mmctl/hashing.hpp"

namespace mmctl {
namespace {

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

std::string_view trim(std::string_view s) {
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

std::vector<std::string> words(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (is_space(c)) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

}  // namespace

StructuredPrompt parse_prompt(std::string_view s) {
  std::size_t lead = 0;
  while (lead < s.size() && is_space(s[lead])) ++lead;
  if (s.substr(lead, kVisualTag.size()) != kVisualTag) {
    throw ParseError("prompt must start with " + std::string(kVisualTag), lead);
  }
  const std::size_t vstart = lead + kVisualTag.size();
  const std::size_t sp = s.find(kSpeechTag, vstart);
  if (sp == std::string_view::npos) throw ParseError("missing " + std::string(kSpeechTag) + " tag", s.size());
  if (const std::size_t dup = s.find(kVisualTag, vstart); dup != std::string_view::npos) {
    throw ParseError("unexpected " + std::string(kVisualTag) + " tag", dup);
  }
  const std::size_t sstart = sp + kSpeechTag.size();
  if (const std::size_t dup = s.find(kSpeechTag, sstart); dup != std::string_view::npos) {
    throw ParseError("unexpected " + std::string(kSpeechTag) + " tag", dup);
  }
  StructuredPrompt p;
  p.visual = std::string(trim(s.substr(vstart, sp - vstart)));
  p.speech = std::string(trim(s.substr(sstart)));
  return p;
}

std::string render_prompt(const StructuredPrompt& p) {
  return std::string(kVisualTag) + " " + p.visual + " " + std::string(kSpeechTag) + " " + p.speech;
}

TokenIds tokenize(const StructuredPrompt& p, const TextConfig& cfg) {
  const auto n = static_cast<std::size_t>(cfg.max_text_len);
  TokenIds t;
  t.ids.assign(n, 0);
  t.segments.assign(n, 0);
  t.valid.assign(n, 0);
  std::size_t at = 0;
  Index segment = 0;
  for (const std::string_view span : {std::string_view(p.visual), std::string_view(p.speech)}) {
    for (const auto& w : words(span)) {
      if (at == n) return t;
      t.ids[at] = static_cast<Index>(fnv1a64(w) % static_cast<std::uint64_t>(cfg.vocab_size));
      t.segments[at] = segment;
      t.valid[at] = 1;
      ++at;
    }
    ++segment;
  }
  return t;
}

}  // namespace mmctl
