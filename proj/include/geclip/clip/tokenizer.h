#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace geclip::clip {

using Merge = std::pair<std::string, std::string>;

// Output of BpeTokenizer::encode.
struct Tokenized {
  std::vector<std::size_t> ids;  // [sot] tokens... [eot] then zero padding
  std::size_t eos_index = 0;     // position of [eot]
  // Word index for each position; -1 for [sot], [eot] and padding.
  std::vector<int> token_word;
  // Whitespace-delimited words of the cleaned input text.
  std::vector<std::string> words;
  bool truncated = false;
};

// Byte-level BPE with the CLIP vocabulary layout: 256 byte symbols, the same
// symbols with an end-of-word marker, one entry per merge, then the two
// special tokens.
class BpeTokenizer {
 public:
  BpeTokenizer() = default;

  static BpeTokenizer from_merges(std::vector<Merge> merges);
  // Vocabulary (one token per line) and merges ("a b" per line; lines
  // starting with "#version" are skipped).
  static BpeTokenizer from_files(const std::filesystem::path& vocab_path,
                                 const std::filesystem::path& merges_path);
  void save(const std::filesystem::path& vocab_path,
            const std::filesystem::path& merges_path) const;

  // Empty text after trimming is rejected unless `allow_empty` is set, in
  // which case the result is the bare [sot][eot] pair.
  Tokenized encode(std::string_view text, std::size_t context_length,
                   bool allow_empty = false) const;
  // BPE ids for a single word, without special tokens.
  std::vector<std::size_t> encode_word(std::string_view word) const;
  std::string decode(std::span<const std::size_t> ids) const;

  std::size_t vocab_size() const { return vocab_.size(); }
  std::size_t sot_id() const { return sot_; }
  std::size_t eot_id() const { return eot_; }
  const std::vector<Merge>& merges() const { return merges_; }
  const std::string& token(std::size_t id) const { return vocab_.at(id); }

 private:
  std::vector<std::string> bpe(const std::string& pretoken) const;
  void index_vocab();

  std::vector<std::string> vocab_;
  std::unordered_map<std::string, std::size_t> ids_;
  std::vector<Merge> merges_;
  std::unordered_map<std::string, std::size_t> ranks_;  // "a\x1fb" -> rank
  std::size_t sot_ = 0;
  std::size_t eot_ = 0;
};

// Lowercases ASCII and collapses whitespace runs; trims both ends.
std::string clean_text(std::string_view text);
std::vector<std::string> split_words(std::string_view cleaned);

// Greedy BPE training: repeatedly merges the most frequent adjacent pair
// (ties broken lexicographically) until every word is one symbol.
std::vector<Merge> train_bpe_merges(const std::vector<std::string>& words);

}  // namespace geclip::clip
