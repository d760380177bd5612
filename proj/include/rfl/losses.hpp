#pragma once

#include <string>
#include <vector>

#include "rfl/tensor.hpp"

namespace rfl {

// Shared alphabet/label coding. CTC reserves index 0 for blank and places the
// alphabet at 1..|A|; attention decoders use 0..|A|-1 plus EOS as the last
// class (EOS also serves as the start symbol).
struct LabelCoding {
  std::string alphabet;
  size_t l_max = 26;

  static constexpr size_t blank_index = 0;
  size_t ctc_classes() const { return alphabet.size() + 1; }
  size_t attn_classes() const { return alphabet.size() + 1; }
  size_t eos_index() const { return alphabet.size(); }

  std::vector<int> encode_ctc(const std::string& text) const;
  std::vector<int> encode_attn(const std::string& text) const;
  std::string decode_ctc_collapse(const std::vector<int>& frames) const;
  std::string decode_attn(const std::vector<int>& symbols) const;  // stops at EOS
};

// Counting class-balance factors: alpha_k is the relative frequency of count
// class k in the corpus, the training weight is (1 - alpha_k). Unobserved
// classes weigh 1.
struct ClassBalanceWeights {
  std::vector<double> alpha;  // indexed by count, size l_max + 1
  bool degenerate = false;    // some observed class has zero weight

  double weight_for(size_t y) const {
    return y < alpha.size() ? 1.0 - alpha[y] : 1.0;
  }
};

ClassBalanceWeights class_balance_from_corpus(const std::vector<int>& lengths,
                                              size_t l_max);

// CTC negative log-likelihood via the forward algorithm in log space.
// log_probs [b,t,classes] must be log-softmax outputs; labels are
// CTC-encoded (no blanks). Samples whose label cannot be aligned within t
// frames are skipped and counted in *skipped; the loss is the mean over the
// remaining samples. All samples infeasible is an error.
Tensor ctc_loss(const Tensor& log_probs,
                const std::vector<std::vector<int>>& labels,
                size_t* skipped = nullptr);

// Exhaustive oracle: sums the probability of every length-t frame sequence
// whose blank-collapse equals the label. probs [t,classes] are plain
// probabilities. Returns -log(P); +inf when no path exists. t <= 8.
double ctc_bruteforce(const Tensor& probs, const std::vector<int>& label);

// Teacher-forced cross entropy for attention decoders. step_logits
// [b,steps,classes]; targets are attn-encoded labels without EOS; the loss
// covers len+1 positions per sample (EOS included) and averages over all
// valid positions.
Tensor attn_ce_loss(const Tensor& step_logits,
                    const std::vector<std::vector<int>>& targets,
                    size_t eos_index);

enum class CountMode { Regression, Classification };

// Counting objective. Regression: pred [b] (or [b,1]) against the raw
// integer count, squared error. Classification: pred [b, l_max+1] logits.
// Per-sample losses are scaled by (1 - alpha_y) when weights are supplied,
// then averaged over the batch.
Tensor count_loss(const Tensor& pred, const std::vector<int>& y_cnt,
                  CountMode mode, const ClassBalanceWeights* weights = nullptr);

// Aggregation cross entropy between the time-averaged class distribution and
// the normalized per-class counts (blank count = t - total characters).
// frame_probs [b,t,classes]; counts[i] has one entry per class.
Tensor ace_loss(const Tensor& frame_probs,
                const std::vector<std::vector<double>>& counts);

// L = L_cnt + lambda * L_rcg
Tensor joint_loss(const Tensor& l_cnt, const Tensor& l_rcg, double lambda);

}  // namespace rfl
