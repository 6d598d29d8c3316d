#include "geclip/clip/tokenizer.h"

#include <algorithm>
#include <array>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "geclip/common/error.h"

namespace geclip::clip {

namespace {

constexpr char kEndOfWord[] = "</w>";
constexpr char kSot[] = "<|startoftext|>";
constexpr char kEot[] = "<|endoftext|>";
constexpr char kPairSep = '\x1f';

std::string utf8(unsigned cp) {
  std::string s;
  if (cp < 0x80) {
    s.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    s.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    s.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    s.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
  return s;
}

// Printable bytes map to themselves, the rest to code points from 256 up.
struct ByteTable {
  std::array<std::string, 256> encode;
  std::vector<unsigned char> order;  // byte order used for the vocabulary
  std::map<std::string, unsigned char> decode;

  ByteTable() {
    std::vector<bool> taken(256, false);
    auto keep = [&](unsigned lo, unsigned hi) {
      for (unsigned b = lo; b <= hi; ++b) {
        encode[b] = utf8(b);
        order.push_back(static_cast<unsigned char>(b));
        taken[b] = true;
      }
    };
    keep('!', '~');
    keep(0xA1, 0xAC);
    keep(0xAE, 0xFF);
    unsigned n = 0;
    for (unsigned b = 0; b < 256; ++b) {
      if (taken[b]) continue;
      encode[b] = utf8(256 + n++);
      order.push_back(static_cast<unsigned char>(b));
    }
    for (unsigned b = 0; b < 256; ++b) decode[encode[b]] = static_cast<unsigned char>(b);
  }
};

const ByteTable& bytes() {
  static const ByteTable table;
  return table;
}

bool is_letter(unsigned char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c >= 0x80;
}
bool is_digit(unsigned char c) { return c >= '0' && c <= '9'; }

// Splits one whitespace-free word into pre-tokens: contractions, letter
// runs, single digits, and runs of other symbols.
std::vector<std::string> pretokenize(const std::string& word) {
  static const std::array<std::string_view, 7> kContractions = {
      "'s", "'t", "'re", "'ve", "'m", "'ll", "'d"};
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < word.size()) {
    const unsigned char c = static_cast<unsigned char>(word[i]);
    if (c == '\'') {
      bool matched = false;
      for (std::string_view k : kContractions) {
        if (word.compare(i, k.size(), k) == 0) {
          out.emplace_back(k);
          i += k.size();
          matched = true;
          break;
        }
      }
      if (matched) continue;
    }
    std::size_t j = i + 1;
    if (is_letter(c)) {
      while (j < word.size() && is_letter(static_cast<unsigned char>(word[j]))) ++j;
    } else if (!is_digit(c)) {
      while (j < word.size() && !is_letter(static_cast<unsigned char>(word[j])) &&
             !is_digit(static_cast<unsigned char>(word[j])))
        ++j;
    }
    out.push_back(word.substr(i, j - i));
    i = j;
  }
  return out;
}

std::vector<std::string> byte_symbols(const std::string& pretoken) {
  std::vector<std::string> symbols;
  for (unsigned char c : pretoken) symbols.push_back(bytes().encode[c]);
  if (!symbols.empty()) symbols.back() += kEndOfWord;
  return symbols;
}

std::string pair_key(const std::string& a, const std::string& b) {
  std::string k = a;
  k.push_back(kPairSep);
  k += b;
  return k;
}

}  // namespace

std::string clean_text(std::string_view text) {
  std::string out;
  bool pending_space = false;
  for (char ch : text) {
    const unsigned char c = static_cast<unsigned char>(ch);
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v') {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back((c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : ch);
  }
  return out;
}

std::vector<std::string> split_words(std::string_view cleaned) {
  std::vector<std::string> words;
  std::istringstream is{std::string(cleaned)};
  std::string w;
  while (is >> w) words.push_back(w);
  return words;
}

BpeTokenizer BpeTokenizer::from_merges(std::vector<Merge> merges) {
  BpeTokenizer t;
  const ByteTable& table = bytes();
  for (unsigned char b : table.order) t.vocab_.push_back(table.encode[b]);
  for (unsigned char b : table.order) t.vocab_.push_back(table.encode[b] + kEndOfWord);
  for (const Merge& m : merges) t.vocab_.push_back(m.first + m.second);
  t.vocab_.push_back(kSot);
  t.vocab_.push_back(kEot);
  t.merges_ = std::move(merges);
  t.index_vocab();
  return t;
}

void BpeTokenizer::index_vocab() {
  ids_.clear();
  for (std::size_t i = 0; i < vocab_.size(); ++i) ids_.emplace(vocab_[i], i);
  ranks_.clear();
  for (std::size_t r = 0; r < merges_.size(); ++r) {
    ranks_.emplace(pair_key(merges_[r].first, merges_[r].second), r);
  }
  auto find = [&](const char* tok) {
    auto it = ids_.find(tok);
    if (it == ids_.end()) {
      throw DataError(std::string("tokenizer vocabulary lacks ") + tok);
    }
    return it->second;
  };
  sot_ = find(kSot);
  eot_ = find(kEot);
}

BpeTokenizer BpeTokenizer::from_files(const std::filesystem::path& vocab_path,
                                      const std::filesystem::path& merges_path) {
  BpeTokenizer t;
  std::ifstream merges_in(merges_path);
  if (!merges_in) throw DataError("cannot open merges file " + merges_path.string());
  std::string line;
  while (std::getline(merges_in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.rfind("#version", 0) == 0) continue;
    const std::size_t sp = line.find(' ');
    if (sp == std::string::npos || sp == 0 || sp + 1 == line.size()) {
      throw DataError("malformed merge line '" + line + "' in " +
                      merges_path.string());
    }
    t.merges_.push_back({line.substr(0, sp), line.substr(sp + 1)});
  }
  std::ifstream vocab_in(vocab_path);
  if (!vocab_in) throw DataError("cannot open vocabulary file " + vocab_path.string());
  while (std::getline(vocab_in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    t.vocab_.push_back(line);
  }
  t.index_vocab();
  return t;
}

void BpeTokenizer::save(const std::filesystem::path& vocab_path,
                        const std::filesystem::path& merges_path) const {
  std::ofstream v(vocab_path, std::ios::trunc);
  std::ofstream m(merges_path, std::ios::trunc);
  if (!v || !m) throw DataError("cannot write tokenizer files");
  for (const std::string& tok : vocab_) v << tok << '\n';
  m << "#version: 0.2\n";
  for (const Merge& mg : merges_) m << mg.first << ' ' << mg.second << '\n';
}

std::vector<std::string> BpeTokenizer::bpe(const std::string& pretoken) const {
  std::vector<std::string> symbols = byte_symbols(pretoken);
  while (symbols.size() > 1) {
    std::size_t best_rank = std::numeric_limits<std::size_t>::max();
    std::size_t best = 0;
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      auto it = ranks_.find(pair_key(symbols[i], symbols[i + 1]));
      if (it != ranks_.end() && it->second < best_rank) {
        best_rank = it->second;
        best = i;
      }
    }
    if (best_rank == std::numeric_limits<std::size_t>::max()) break;
    const std::string first = symbols[best];
    const std::string second = symbols[best + 1];
    std::vector<std::string> merged;
    for (std::size_t i = 0; i < symbols.size();) {
      if (i + 1 < symbols.size() && symbols[i] == first && symbols[i + 1] == second) {
        merged.push_back(first + second);
        i += 2;
      } else {
        merged.push_back(symbols[i]);
        ++i;
      }
    }
    symbols = std::move(merged);
  }
  return symbols;
}

std::vector<std::size_t> BpeTokenizer::encode_word(std::string_view word) const {
  std::vector<std::size_t> ids;
  for (const std::string& pre : pretokenize(clean_text(word))) {
    for (const std::string& sym : bpe(pre)) {
      auto it = ids_.find(sym);
      if (it == ids_.end()) {
        // Every byte symbol is in the vocabulary; fall back to them.
        for (const std::string& b : byte_symbols(sym)) ids.push_back(ids_.at(b));
        continue;
      }
      ids.push_back(it->second);
    }
  }
  return ids;
}

Tokenized BpeTokenizer::encode(std::string_view text, std::size_t context_length,
                               bool allow_empty) const {
  if (vocab_.empty()) throw ContractError("tokenizer is not initialised");
  if (context_length < 2) throw ContractError("context length below 2");
  Tokenized out;
  const std::string cleaned = clean_text(text);
  out.words = split_words(cleaned);
  if (out.words.empty() && !allow_empty) {
    throw ContractError("text is empty after trimming");
  }
  std::vector<std::size_t> ids{sot_};
  std::vector<int> owner{-1};
  for (std::size_t w = 0; w < out.words.size(); ++w) {
    for (std::size_t id : encode_word(out.words[w])) {
      ids.push_back(id);
      owner.push_back(static_cast<int>(w));
    }
  }
  ids.push_back(eot_);
  owner.push_back(-1);
  if (ids.size() > context_length) {
    out.truncated = true;
    ids.resize(context_length);
    owner.resize(context_length);
    ids.back() = eot_;
    owner.back() = -1;
  }
  out.eos_index = ids.size() - 1;
  ids.resize(context_length, 0);
  owner.resize(context_length, -1);
  out.ids = std::move(ids);
  out.token_word = std::move(owner);
  return out;
}

std::string BpeTokenizer::decode(std::span<const std::size_t> ids) const {
  std::string joined;
  for (std::size_t id : ids) {
    if (id == eot_) break;
    if (id == sot_) continue;
    joined += vocab_.at(id);
  }
  std::string out;
  const ByteTable& table = bytes();
  std::size_t i = 0;
  const std::string eow = kEndOfWord;
  while (i < joined.size()) {
    if (joined.compare(i, eow.size(), eow) == 0) {
      out.push_back(' ');
      i += eow.size();
      continue;
    }
    const unsigned char c = static_cast<unsigned char>(joined[i]);
    std::size_t len = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xE ? 3 : 4;
    auto it = table.decode.find(joined.substr(i, len));
    if (it != table.decode.end()) out.push_back(static_cast<char>(it->second));
    i += len;
  }
  while (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

std::vector<Merge> train_bpe_merges(const std::vector<std::string>& words) {
  std::vector<std::vector<std::string>> corpus;
  for (const std::string& w : words) {
    for (const std::string& pre : pretokenize(clean_text(w))) {
      corpus.push_back(byte_symbols(pre));
    }
  }
  std::vector<Merge> merges;
  for (;;) {
    std::map<Merge, std::size_t> counts;
    for (const auto& syms : corpus)
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) ++counts[{syms[i], syms[i + 1]}];
    if (counts.empty()) break;
    auto best = counts.begin();
    for (auto it = counts.begin(); it != counts.end(); ++it) {
      if (it->second > best->second) best = it;
    }
    const Merge m = best->first;
    merges.push_back(m);
    for (auto& syms : corpus) {
      std::vector<std::string> merged;
      for (std::size_t i = 0; i < syms.size();) {
        if (i + 1 < syms.size() && syms[i] == m.first && syms[i + 1] == m.second) {
          merged.push_back(m.first + m.second);
          i += 2;
        } else {
          merged.push_back(syms[i++]);
        }
      }
      syms = std::move(merged);
    }
  }
  return merges;
}

}  // namespace geclip::clip
