#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace geclip::finetune {

enum class WordTag { kNoun, kAdjective, kOther };

// How words missing from the lexicon are treated.
enum class UnknownPolicy {
  kNounIfFinal,  // noun only when sentence-final and extending a candidate span
  kSkip,
  kNoun,
};

class Lexicon {
 public:
  // The lexicon shipped in data/lexicon.txt, compiled in.
  static const Lexicon& builtin();
  // Lines "word<TAB>tag" with tag n, a or x; '#' starts a comment line.
  static Lexicon parse(std::string_view text);
  static Lexicon load(const std::filesystem::path& path);

  void set(const std::string& word, WordTag tag) { tags_[word] = tag; }
  // nullptr when the word is unknown.
  const WordTag* find(const std::string& word) const;
  std::size_t size() const { return tags_.size(); }

 private:
  std::map<std::string, WordTag> tags_;
};

struct Phrase {
  std::size_t begin = 0;  // word span [begin, end) in the caption's words
  std::size_t end = 0;
  std::string text;
};

struct PhraseSet {
  std::vector<std::string> words;  // lowercased caption words
  std::vector<Phrase> phrases;
  bool no_noun = false;    // nothing extracted; caption skipped by the local loss
  bool truncated = false;  // more than max_phrases spans were found
};

// Maximal "adjective* noun+" spans, left to right, at most `max_phrases`.
PhraseSet extract_phrases(std::string_view caption, std::size_t max_phrases = 4,
                          const Lexicon& lexicon = Lexicon::builtin(),
                          UnknownPolicy unknown = UnknownPolicy::kNounIfFinal);

}  // namespace geclip::finetune
