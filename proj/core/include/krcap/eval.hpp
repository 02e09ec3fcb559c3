#pragma once

#include <map>
#include <string>
#include <vector>

namespace krcap {

// One generated caption per image.
struct CandidateCaption {
  int image_id = 0;
  std::string caption;
};

// image_id -> reference captions (>= 1 each).
struct ReferenceSet {
  std::map<int, std::vector<std::string>> refs;
};

// image_id -> acceptable keyword strings (aliases allowed).
struct KeywordList {
  std::map<int, std::vector<std::string>> keywords;
};

// Metric block for one split; the schema of the final report.
struct SplitMetrics {
  double bleu1 = 0.0, bleu2 = 0.0, bleu3 = 0.0, bleu4 = 0.0;
  double rouge_l = 0.0;
  double cider = 0.0;
  double rec = 0.0;
  int count = 0;
};

// Corpus-level BLEU-n: geometric mean of clipped modified k-gram precisions
// (k=1..n, no smoothing; any zero precision gives 0) times the brevity
// penalty exp(min(0, 1 - r/c)) with r the summed closest-reference lengths.
double bleu(const std::vector<CandidateCaption>& candidates, const ReferenceSet& refs,
            int n);

// Mean over candidates of the best-reference LCS F-measure with beta = 1.2.
double rouge_l(const std::vector<CandidateCaption>& candidates,
               const ReferenceSet& refs);

// CIDEr-D: TF-IDF n-gram vectors (n=1..4), clipped cosine per reference with
// a Gaussian length penalty (sigma = 6), averaged over references, scaled by
// 10, averaged over n, then over candidates. Requires >= 2 images; otherwise
// throws DataError("degenerate document frequency").
double cider(const std::vector<CandidateCaption>& candidates, const ReferenceSet& refs);

// Fraction of captions containing at least one of their image's keywords as a
// contiguous word subsequence after normalization.
double recognition_accuracy(const std::vector<CandidateCaption>& candidates,
                            const KeywordList& keywords);

// All metrics for one split; pass keywords = nullptr for splits without
// keyword annotations (rec is reported as 0).
SplitMetrics compute_split_metrics(const std::vector<CandidateCaption>& candidates,
                                   const ReferenceSet& refs,
                                   const KeywordList* keywords);

}  // namespace krcap
