#include "krcap/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <set>

#include "krcap/errors.hpp"
#include "krcap/text.hpp"

namespace krcap {

namespace {

using Words = std::vector<std::string>;
using NgramCounts = std::map<Words, int>;

NgramCounts count_ngrams(const Words& words, int n) {
  NgramCounts counts;
  if (static_cast<int>(words.size()) >= n)
    for (size_t i = 0; i + n <= words.size(); ++i)
      ++counts[Words(words.begin() + i, words.begin() + i + n)];
  return counts;
}

const std::vector<std::string>& refs_for(const ReferenceSet& refs, int image_id) {
  auto it = refs.refs.find(image_id);
  if (it == refs.refs.end() || it->second.empty())
    throw DataError("no references for image " + std::to_string(image_id));
  return it->second;
}

int lcs_length(const Words& a, const Words& b) {
  std::vector<std::vector<int>> dp(a.size() + 1, std::vector<int>(b.size() + 1, 0));
  for (size_t i = 1; i <= a.size(); ++i)
    for (size_t j = 1; j <= b.size(); ++j)
      dp[i][j] = (a[i - 1] == b[j - 1]) ? dp[i - 1][j - 1] + 1
                                        : std::max(dp[i - 1][j], dp[i][j - 1]);
  return dp[a.size()][b.size()];
}

bool contains_contiguous(const Words& haystack, const Words& needle) {
  if (needle.empty() || needle.size() > haystack.size()) return false;
  for (size_t i = 0; i + needle.size() <= haystack.size(); ++i) {
    bool match = true;
    for (size_t j = 0; j < needle.size(); ++j)
      if (haystack[i + j] != needle[j]) {
        match = false;
        break;
      }
    if (match) return true;
  }
  return false;
}

}  // namespace

double bleu(const std::vector<CandidateCaption>& candidates, const ReferenceSet& refs,
            int n) {
  if (n < 1 || n > 4) throw Error("bleu: n must be in 1..4");
  if (candidates.empty()) throw DataError("bleu: no candidates");

  std::vector<long long> matched(n + 1, 0), total(n + 1, 0);
  long long cand_len_sum = 0, ref_len_sum = 0;

  for (const CandidateCaption& cand : candidates) {
    Words cw = split_words(cand.caption);
    const std::vector<std::string>& ref_texts = refs_for(refs, cand.image_id);
    std::vector<Words> rws;
    for (const std::string& r : ref_texts) rws.push_back(split_words(r));

    cand_len_sum += static_cast<long long>(cw.size());
    // Closest reference length; ties pick the shorter reference.
    long long best_ref = static_cast<long long>(rws[0].size());
    for (const Words& rw : rws) {
      long long len = static_cast<long long>(rw.size());
      long long cur = std::llabs(len - static_cast<long long>(cw.size()));
      long long best = std::llabs(best_ref - static_cast<long long>(cw.size()));
      if (cur < best || (cur == best && len < best_ref)) best_ref = len;
    }
    ref_len_sum += best_ref;

    for (int k = 1; k <= n; ++k) {
      NgramCounts cand_counts = count_ngrams(cw, k);
      NgramCounts max_ref;
      for (const Words& rw : rws)
        for (const auto& [gram, count] : count_ngrams(rw, k))
          max_ref[gram] = std::max(max_ref[gram], count);
      for (const auto& [gram, count] : cand_counts) {
        auto it = max_ref.find(gram);
        matched[k] += std::min(count, it == max_ref.end() ? 0 : it->second);
      }
      total[k] += std::max<long long>(0, static_cast<long long>(cw.size()) - k + 1);
    }
  }

  double log_precision_sum = 0.0;
  for (int k = 1; k <= n; ++k) {
    if (matched[k] == 0 || total[k] == 0) return 0.0;
    log_precision_sum += std::log(static_cast<double>(matched[k]) / total[k]);
  }
  if (cand_len_sum == 0) return 0.0;
  double bp = std::exp(std::min(0.0, 1.0 - static_cast<double>(ref_len_sum) / cand_len_sum));
  return bp * std::exp(log_precision_sum / n);
}

double rouge_l(const std::vector<CandidateCaption>& candidates,
               const ReferenceSet& refs) {
  if (candidates.empty()) throw DataError("rouge_l: no candidates");
  const double beta = 1.2;
  double sum = 0.0;
  for (const CandidateCaption& cand : candidates) {
    Words cw = split_words(cand.caption);
    double best_f = 0.0;
    for (const std::string& ref : refs_for(refs, cand.image_id)) {
      Words rw = split_words(ref);
      int lcs = lcs_length(cw, rw);
      if (lcs == 0 || cw.empty() || rw.empty()) continue;
      double p = static_cast<double>(lcs) / cw.size();
      double r = static_cast<double>(lcs) / rw.size();
      double f = (1.0 + beta * beta) * p * r / (r + beta * beta * p);
      best_f = std::max(best_f, f);
    }
    sum += best_f;
  }
  return sum / candidates.size();
}

double cider(const std::vector<CandidateCaption>& candidates, const ReferenceSet& refs) {
  std::set<int> image_ids;
  for (const CandidateCaption& cand : candidates) image_ids.insert(cand.image_id);
  if (image_ids.size() < 2) throw DataError("degenerate document frequency");
  const double sigma = 6.0;
  const int max_n = 4;
  double n_images = static_cast<double>(image_ids.size());

  // Document frequency per n-gram, counted once per image over references.
  std::vector<std::map<Words, int>> df(max_n + 1);
  for (int image_id : image_ids) {
    std::vector<std::map<Words, bool>> seen(max_n + 1);
    for (const std::string& ref : refs_for(refs, image_id)) {
      Words rw = split_words(ref);
      for (int n = 1; n <= max_n; ++n)
        for (const auto& [gram, count] : count_ngrams(rw, n)) seen[n][gram] = true;
    }
    for (int n = 1; n <= max_n; ++n)
      for (const auto& [gram, present] : seen[n]) ++df[n][gram];
  }
  auto idf = [&](int n, const Words& gram) {
    auto it = df[n].find(gram);
    double d = it == df[n].end() ? 0.0 : static_cast<double>(it->second);
    return std::log(n_images) - std::log(std::max(1.0, d));
  };

  double corpus_sum = 0.0;
  for (const CandidateCaption& cand : candidates) {
    Words cw = split_words(cand.caption);
    const std::vector<std::string>& ref_texts = refs_for(refs, cand.image_id);
    double cand_score = 0.0;
    for (int n = 1; n <= max_n; ++n) {
      NgramCounts cand_counts = count_ngrams(cw, n);
      double cand_norm_sq = 0.0;
      for (const auto& [gram, count] : cand_counts) {
        double w = count * idf(n, gram);
        cand_norm_sq += w * w;
      }
      double ref_sum = 0.0;
      for (const std::string& ref : ref_texts) {
        Words rw = split_words(ref);
        NgramCounts ref_counts = count_ngrams(rw, n);
        double ref_norm_sq = 0.0;
        for (const auto& [gram, count] : ref_counts) {
          double w = count * idf(n, gram);
          ref_norm_sq += w * w;
        }
        double dot = 0.0;
        for (const auto& [gram, count] : cand_counts) {
          auto it = ref_counts.find(gram);
          if (it == ref_counts.end()) continue;
          double w = idf(n, gram);
          dot += std::min(count, it->second) * w * it->second * w;
        }
        if (cand_norm_sq > 0.0 && ref_norm_sq > 0.0) {
          double delta = static_cast<double>(cw.size()) - static_cast<double>(rw.size());
          double penalty = std::exp(-delta * delta / (2.0 * sigma * sigma));
          ref_sum += penalty * dot / (std::sqrt(cand_norm_sq) * std::sqrt(ref_norm_sq));
        }
      }
      cand_score += 10.0 * ref_sum / ref_texts.size();
    }
    corpus_sum += cand_score / max_n;
  }
  return corpus_sum / candidates.size();
}

double recognition_accuracy(const std::vector<CandidateCaption>& candidates,
                            const KeywordList& keywords) {
  if (candidates.empty()) throw DataError("recognition_accuracy: no candidates");
  int hits = 0;
  for (const CandidateCaption& cand : candidates) {
    auto it = keywords.keywords.find(cand.image_id);
    if (it == keywords.keywords.end())
      throw DataError("no keywords for image " + std::to_string(cand.image_id));
    Words cw = split_words(cand.caption);
    for (const std::string& keyword : it->second) {
      if (contains_contiguous(cw, split_words(keyword))) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / candidates.size();
}

SplitMetrics compute_split_metrics(const std::vector<CandidateCaption>& candidates,
                                   const ReferenceSet& refs,
                                   const KeywordList* keywords) {
  SplitMetrics m;
  m.bleu1 = bleu(candidates, refs, 1);
  m.bleu2 = bleu(candidates, refs, 2);
  m.bleu3 = bleu(candidates, refs, 3);
  m.bleu4 = bleu(candidates, refs, 4);
  m.rouge_l = rouge_l(candidates, refs);
  m.cider = cider(candidates, refs);
  m.rec = keywords ? recognition_accuracy(candidates, *keywords) : 0.0;
  m.count = static_cast<int>(candidates.size());
  return m;
}

}  // namespace krcap
