#include "geclip/finetune/phrases.h"

#include <cctype>
#include <fstream>
#include <sstream>

#include "geclip/common/error.h"
#include "geclip/finetune/lexicon_data.h"

namespace geclip::finetune {

const Lexicon& Lexicon::builtin() {
  static const Lexicon lex = parse(kBuiltinLexicon);
  return lex;
}

Lexicon Lexicon::parse(std::string_view text) {
  Lexicon lex;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::istringstream fields(line);
    std::string word, tag;
    if (!(fields >> word >> tag)) throw DataError("lexicon line " + std::to_string(lineno) + ": expected 'word tag'");
    if (tag == "n") {
      lex.set(word, WordTag::kNoun);
    } else if (tag == "a") {
      lex.set(word, WordTag::kAdjective);
    } else if (tag == "x") {
      lex.set(word, WordTag::kOther);
    } else {
      throw DataError("lexicon line " + std::to_string(lineno) + ": unknown tag '" + tag + "'");
    }
  }
  return lex;
}

Lexicon Lexicon::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open lexicon " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

const WordTag* Lexicon::find(const std::string& word) const {
  auto it = tags_.find(word);
  return it == tags_.end() ? nullptr : &it->second;
}

namespace {

std::vector<std::string> caption_words(std::string_view caption) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : caption) {
    const unsigned char c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || c == '\'' || c >= 0x80) {
      cur += static_cast<char>(std::tolower(c));
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

}  // namespace

PhraseSet extract_phrases(std::string_view caption, std::size_t max_phrases, const Lexicon& lexicon,
                          UnknownPolicy unknown) {
  PhraseSet out;
  out.words = caption_words(caption);
  if (out.words.empty()) throw ContractError("extract_phrases: caption has no words");
  const std::size_t n = out.words.size();
  auto tag = [&](std::size_t i, bool extends) {
    const WordTag* t = lexicon.find(out.words[i]);
    if (t != nullptr) return *t;
    switch (unknown) {
      case UnknownPolicy::kNoun: return WordTag::kNoun;
      case UnknownPolicy::kSkip: return WordTag::kOther;
      case UnknownPolicy::kNounIfFinal: return extends && i + 1 == n ? WordTag::kNoun : WordTag::kOther;
    }
    return WordTag::kOther;
  };
  std::size_t found = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && tag(j, j > i) == WordTag::kAdjective) ++j;
    std::size_t k = j;
    while (k < n && tag(k, k > i) == WordTag::kNoun) ++k;
    if (k == j) {  // no noun closes the span
      i = std::max(j, i + 1);
      continue;
    }
    ++found;
    if (out.phrases.size() < max_phrases) {
      Phrase p{i, k, {}};
      for (std::size_t w = i; w < k; ++w) p.text += (w > i ? " " : "") + out.words[w];
      out.phrases.push_back(std::move(p));
    }
    i = k;
  }
  out.no_noun = found == 0;
  out.truncated = found > max_phrases;
  return out;
}

}  // namespace geclip::finetune
