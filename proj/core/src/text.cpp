#include "krcap/text.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "krcap/errors.hpp"

namespace krcap {

namespace {
const char* kSpecialNames[4] = {"<pad>", "<bos>", "<eos>", "<unk>"};
}

int Vocabulary::lookup(const std::string& word) const {
  auto it = token_to_id.find(word);
  return it == token_to_id.end() ? UNK : it->second;
}

std::string normalize_text(const std::string& text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (unsigned char c : text) {
    char l = static_cast<char>(std::tolower(c));
    bool keep = (l >= 'a' && l <= 'z') || (l >= '0' && l <= '9');
    if (keep) {
      if (pending_space && !out.empty()) out.push_back(' ');
      pending_space = false;
      out.push_back(l);
    } else {
      pending_space = true;
    }
  }
  return out;
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::istringstream in(normalize_text(text));
  std::string w;
  while (in >> w) words.push_back(w);
  return words;
}

Vocabulary build_vocab(const std::vector<std::string>& corpus_texts, int min_count) {
  if (corpus_texts.empty()) throw DataError("empty corpus");
  std::map<std::string, long long> counts;
  for (const std::string& text : corpus_texts)
    for (const std::string& w : split_words(text)) ++counts[w];

  std::vector<std::pair<std::string, long long>> kept;
  for (const auto& [word, count] : counts)
    if (count >= min_count) kept.emplace_back(word, count);
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocabulary v;
  for (const char* s : kSpecialNames) v.id_to_token.emplace_back(s);
  for (const auto& [word, count] : kept) v.id_to_token.push_back(word);
  for (int i = 0; i < v.size(); ++i) v.token_to_id[v.id_to_token[i]] = i;
  return v;
}

TokenSequence encode(const std::string& text, const Vocabulary& vocab) {
  TokenSequence seq;
  seq.push_back(Vocabulary::BOS);
  for (const std::string& w : split_words(text)) seq.push_back(vocab.lookup(w));
  seq.push_back(Vocabulary::EOS);
  return seq;
}

std::string decode_tokens(const TokenSequence& ids, const Vocabulary& vocab) {
  std::string out;
  for (int id : ids) {
    if (id < 0 || id >= vocab.size()) throw DataError("invalid token id");
    if (vocab.is_special(id)) continue;
    if (!out.empty()) out.push_back(' ');
    out += vocab.id_to_token[id];
  }
  return out;
}

Keyword tokenize_keyword(const std::string& surface, const Vocabulary& vocab) {
  Keyword k;
  std::vector<std::string> words = split_words(surface);
  if (words.empty()) throw DataError("keyword not representable");
  for (size_t i = 0; i < words.size(); ++i) {
    auto it = vocab.token_to_id.find(words[i]);
    if (it == vocab.token_to_id.end() || vocab.is_special(it->second))
      throw DataError("keyword not representable");
    k.subword_ids.push_back(it->second);
    if (i) k.surface.push_back(' ');
    k.surface += words[i];
  }
  return k;
}

void save_vocab(const Vocabulary& vocab, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MissingArtifactError("cannot write vocabulary file: " + path);
  for (int i = 0; i < vocab.size(); ++i)
    out << vocab.id_to_token[i] << '\t' << i << '\n';
}

Vocabulary load_vocab(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot read vocabulary file: " + path);
  Vocabulary v;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    size_t tab = line.find('\t');
    if (tab == std::string::npos)
      throw DataError("vocabulary file " + path + ": missing tab on line " +
                      std::to_string(line_no));
    std::string token = line.substr(0, tab);
    int id = std::stoi(line.substr(tab + 1));
    if (id != static_cast<int>(v.id_to_token.size()))
      throw DataError("vocabulary file " + path + ": non-contiguous id on line " +
                      std::to_string(line_no));
    v.id_to_token.push_back(token);
  }
  if (v.size() < 4) throw DataError("vocabulary file " + path + ": too few entries");
  for (int i = 0; i < 4; ++i)
    if (v.id_to_token[i] != kSpecialNames[i])
      throw DataError("vocabulary file " + path + ": specials must occupy ids 0-3");
  for (int i = 0; i < v.size(); ++i) v.token_to_id[v.id_to_token[i]] = i;
  return v;
}

}  // namespace krcap
