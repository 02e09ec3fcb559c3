#pragma once

#include <map>
#include <string>
#include <vector>

namespace krcap {

// A caption as token ids. Complete captions start with BOS and end with EOS;
// no PAD appears between them.
using TokenSequence = std::vector<int>;

// Closed word-level vocabulary. Specials occupy fixed ids 0-3 so the rest of
// the system (loss masking, decoding) can hard-code them.
struct Vocabulary {
  static constexpr int PAD = 0;
  static constexpr int BOS = 1;
  static constexpr int EOS = 2;
  static constexpr int UNK = 3;

  std::vector<std::string> id_to_token;    // index = id
  std::map<std::string, int> token_to_id;  // exact inverse

  int size() const { return static_cast<int>(id_to_token.size()); }
  bool is_special(int id) const { return id >= 0 && id <= UNK; }

  // Id for a normalized word; UNK when absent.
  int lookup(const std::string& word) const;
};

// A knowledge keyword split into vocabulary words (the subword analog).
struct Keyword {
  std::string surface;           // normalized form
  std::vector<int> subword_ids;  // all non-special, in order

  int n() const { return static_cast<int>(subword_ids.size()); }
};

// Lowercase, map every non-alphanumeric byte to a space, collapse whitespace.
std::string normalize_text(const std::string& text);

// normalize_text followed by a whitespace split.
std::vector<std::string> split_words(const std::string& text);

// Deterministic vocabulary over the normalized corpus: specials first, then
// content words with count >= min_count ordered by (count desc, word asc).
// Throws DataError("empty corpus") when corpus_texts is empty.
Vocabulary build_vocab(const std::vector<std::string>& corpus_texts, int min_count);

// [BOS, word ids (UNK for out-of-vocabulary), EOS].
TokenSequence encode(const std::string& text, const Vocabulary& vocab);

// Words between BOS and EOS joined by single spaces; specials omitted.
// Throws DataError("invalid token id") for ids outside [0, V).
std::string decode_tokens(const TokenSequence& ids, const Vocabulary& vocab);

// Normalized keyword split into in-vocabulary words. Throws
// DataError("keyword not representable") if any word is missing or the
// surface normalizes to nothing.
Keyword tokenize_keyword(const std::string& surface, const Vocabulary& vocab);

// Line-oriented "<token>\t<id>" serialization, ids ascending.
void save_vocab(const Vocabulary& vocab, const std::string& path);
Vocabulary load_vocab(const std::string& path);

}  // namespace krcap
