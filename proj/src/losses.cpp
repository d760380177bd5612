#include "rfl/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace rfl {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double logaddexp(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}
}  // namespace

// ---------------------------------------------------------------------------
// LabelCoding

std::vector<int> LabelCoding::encode_ctc(const std::string& text) const {
  std::vector<int> out;
  out.reserve(text.size());
  for (char ch : text) {
    const size_t pos = alphabet.find(ch);
    if (pos == std::string::npos)
      throw ValueError(std::string("character '") + ch + "' not in alphabet");
    out.push_back(int(pos) + 1);
  }
  return out;
}

std::vector<int> LabelCoding::encode_attn(const std::string& text) const {
  std::vector<int> out;
  out.reserve(text.size());
  for (char ch : text) {
    const size_t pos = alphabet.find(ch);
    if (pos == std::string::npos)
      throw ValueError(std::string("character '") + ch + "' not in alphabet");
    out.push_back(int(pos));
  }
  return out;
}

std::string LabelCoding::decode_ctc_collapse(
    const std::vector<int>& frames) const {
  std::string out;
  int prev = -1;
  for (int f : frames) {
    if (f != prev && f != int(blank_index)) {
      if (f < 1 || size_t(f) > alphabet.size())
        throw ValueError("frame class out of range");
      out.push_back(alphabet[size_t(f) - 1]);
    }
    prev = f;
  }
  return out;
}

std::string LabelCoding::decode_attn(const std::vector<int>& symbols) const {
  std::string out;
  for (int s : symbols) {
    if (s == int(eos_index())) break;
    if (s < 0 || size_t(s) >= alphabet.size())
      throw ValueError("symbol out of range");
    out.push_back(alphabet[size_t(s)]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Class balance

ClassBalanceWeights class_balance_from_corpus(const std::vector<int>& lengths,
                                              size_t l_max) {
  if (lengths.empty())
    throw ValueError("class balance requires a nonempty corpus");
  ClassBalanceWeights w;
  w.alpha.assign(l_max + 1, 0.0);
  for (int len : lengths) {
    if (len < 0 || size_t(len) > l_max)
      throw ValueError("count " + std::to_string(len) + " outside [0, " +
                       std::to_string(l_max) + "]");
    w.alpha[size_t(len)] += 1.0;
  }
  for (double& a : w.alpha) {
    a /= double(lengths.size());
    if (a == 1.0) w.degenerate = true;
  }
  return w;
}

// ---------------------------------------------------------------------------
// CTC

namespace {

struct CtcSample {
  std::vector<int> ext;      // blank-interleaved label l'
  std::vector<double> alpha; // [t, S] in log space
  double log_p = kNegInf;
  bool feasible = false;
};

// s -> s+2 allowed iff ext[s+2] is a character differing from ext[s].
bool skip_allowed(const std::vector<int>& ext, size_t s_from) {
  const size_t s_to = s_from + 2;
  return ext[s_to] != int(LabelCoding::blank_index) &&
         ext[s_to] != ext[s_from];
}

}  // namespace

Tensor ctc_loss(const Tensor& log_probs,
                const std::vector<std::vector<int>>& labels, size_t* skipped) {
  if (log_probs.rank() != 3)
    throw ShapeError("ctc_loss expects [b,t,classes]");
  const size_t b = log_probs.extent(0), t = log_probs.extent(1),
               k = log_probs.extent(2);
  if (labels.size() != b) throw ShapeError("one label per batch row required");

  auto samples = std::make_shared<std::vector<CtcSample>>(b);
  size_t n_skipped = 0;
  double total = 0.0;
  const double* lp = log_probs.data().data();

  for (size_t i = 0; i < b; ++i) {
    CtcSample& smp = (*samples)[i];
    const std::vector<int>& lab = labels[i];
    size_t min_t = lab.size();
    for (int c : lab)
      if (c <= 0 || size_t(c) >= k)
        throw ValueError("ctc label class out of range");
    for (size_t j = 1; j < lab.size(); ++j)
      if (lab[j] == lab[j - 1]) ++min_t;  // repeats need a separating blank
    if (min_t > t) {
      ++n_skipped;
      continue;
    }
    const size_t S = 2 * lab.size() + 1;
    smp.ext.assign(S, int(LabelCoding::blank_index));
    for (size_t j = 0; j < lab.size(); ++j) smp.ext[2 * j + 1] = lab[j];
    smp.alpha.assign(t * S, kNegInf);
    const double* row = lp + i * t * k;
    smp.alpha[0] = row[LabelCoding::blank_index];
    if (S > 1) smp.alpha[1] = row[smp.ext[1]];
    for (size_t step = 1; step < t; ++step) {
      const double* em = row + step * k;
      double* cur = smp.alpha.data() + step * S;
      const double* prv = smp.alpha.data() + (step - 1) * S;
      for (size_t s = 0; s < S; ++s) {
        double acc = prv[s];
        if (s >= 1) acc = logaddexp(acc, prv[s - 1]);
        if (s >= 2 && skip_allowed(smp.ext, s - 2))
          acc = logaddexp(acc, prv[s - 2]);
        cur[s] = acc + em[smp.ext[s]];
      }
    }
    double log_p = smp.alpha[(t - 1) * S + (S - 1)];
    if (S > 1) log_p = logaddexp(log_p, smp.alpha[(t - 1) * S + (S - 2)]);
    if (!std::isfinite(log_p)) {
      ++n_skipped;
      continue;
    }
    smp.log_p = log_p;
    smp.feasible = true;
    total += -log_p;
  }
  if (skipped) *skipped = n_skipped;
  if (n_skipped == b)
    throw ValueError("all samples in the batch are CTC-infeasible");
  const size_t kept = b - n_skipped;

  Tensor out = Tensor::scalar(total / double(kept));
  register_op(out, {&log_probs}, [li = log_probs.ptr(), oi = out.ptr(),
                                  samples, t, k, kept]() {
    if (!li->requires_grad) return;
    const double g = oi->grad[0] / double(kept);
    for (size_t i = 0; i < samples->size(); ++i) {
      const CtcSample& smp = (*samples)[i];
      if (!smp.feasible) continue;
      const size_t S = smp.ext.size();
      const double* row = li->data.data() + i * t * k;
      std::vector<double> beta(t * S, kNegInf);
      beta[(t - 1) * S + (S - 1)] = 0.0;
      if (S > 1) beta[(t - 1) * S + (S - 2)] = 0.0;
      for (size_t step = t - 1; step-- > 0;) {
        double* cur = beta.data() + step * S;
        const double* nxt = beta.data() + (step + 1) * S;
        const double* em = row + (step + 1) * k;
        for (size_t s = 0; s < S; ++s) {
          double acc = nxt[s] + em[smp.ext[s]];
          if (s + 1 < S) acc = logaddexp(acc, nxt[s + 1] + em[smp.ext[s + 1]]);
          if (s + 2 < S && skip_allowed(smp.ext, s))
            acc = logaddexp(acc, nxt[s + 2] + em[smp.ext[s + 2]]);
          cur[s] = acc;
        }
      }
      double* grad_row = li->grad.data() + i * t * k;
      for (size_t step = 0; step < t; ++step)
        for (size_t s = 0; s < S; ++s) {
          const double post = smp.alpha[step * S + s] + beta[step * S + s] -
                              smp.log_p;
          if (post == kNegInf) continue;
          grad_row[step * k + smp.ext[s]] -= g * std::exp(post);
        }
    }
  });
  return out;
}

double ctc_bruteforce(const Tensor& probs, const std::vector<int>& label) {
  if (probs.rank() != 2) throw ShapeError("ctc_bruteforce expects [t,classes]");
  const size_t t = probs.extent(0), k = probs.extent(1);
  if (t > 8) throw ValueError("ctc_bruteforce limited to t <= 8");
  for (int c : label)
    if (c <= 0 || size_t(c) >= k)
      throw ValueError("ctc label class out of range");
  const double* p = probs.data().data();
  std::vector<int> frames(t, 0);
  double total = 0.0;
  for (;;) {
    // collapse: drop repeats, then blanks
    std::vector<int> collapsed;
    int prev = -1;
    for (int f : frames) {
      if (f != prev && f != int(LabelCoding::blank_index)) collapsed.push_back(f);
      prev = f;
    }
    if (collapsed == label) {
      double prob = 1.0;
      for (size_t step = 0; step < t; ++step) prob *= p[step * k + frames[step]];
      total += prob;
    }
    size_t pos = t;
    while (pos-- > 0) {
      if (++frames[pos] < int(k)) break;
      frames[pos] = 0;
      if (pos == 0) return total > 0.0
                               ? -std::log(total)
                               : std::numeric_limits<double>::infinity();
    }
  }
}

// ---------------------------------------------------------------------------
// Attention cross entropy

Tensor attn_ce_loss(const Tensor& step_logits,
                    const std::vector<std::vector<int>>& targets,
                    size_t eos_index) {
  if (step_logits.rank() != 3)
    throw ShapeError("attn_ce_loss expects [b,steps,classes]");
  const size_t b = step_logits.extent(0), steps = step_logits.extent(1),
               k = step_logits.extent(2);
  if (targets.size() != b) throw ShapeError("one target per batch row");
  if (eos_index >= k) throw ValueError("EOS index out of range");

  std::vector<size_t> cols(b * steps, 0);
  std::vector<double> mask(b * steps, 0.0);
  size_t valid = 0;
  for (size_t i = 0; i < b; ++i) {
    const auto& tg = targets[i];
    if (tg.size() + 1 > steps)
      throw ShapeError("teacher forcing requires len(target)+1 steps");
    for (size_t s = 0; s <= tg.size(); ++s) {
      const int cls = s < tg.size() ? tg[s] : int(eos_index);
      if (cls < 0 || size_t(cls) >= k)
        throw ValueError("target index out of range");
      cols[i * steps + s] = size_t(cls);
      mask[i * steps + s] = 1.0;
      ++valid;
    }
  }
  Tensor lsm = log_softmax(step_logits, 2);
  Tensor picked = pick(reshape(lsm, {b * steps, k}), cols);
  Tensor masked = mul(picked, Tensor::from_data({b * steps}, std::move(mask)));
  return div(neg(sum_all(masked)), double(valid));
}

// ---------------------------------------------------------------------------
// Counting

Tensor count_loss(const Tensor& pred, const std::vector<int>& y_cnt,
                  CountMode mode, const ClassBalanceWeights* weights) {
  const size_t b = y_cnt.size();
  std::vector<double> w(b, 1.0);
  if (weights)
    for (size_t i = 0; i < b; ++i) w[i] = weights->weight_for(size_t(y_cnt[i]));
  Tensor wt = Tensor::from_data({b}, std::move(w));

  if (mode == CountMode::Regression) {
    Tensor p = pred;
    if (p.rank() == 2 && p.extent(1) == 1) p = reshape(p, {p.extent(0)});
    if (p.rank() != 1 || p.extent(0) != b)
      throw ShapeError("regression counting expects one scalar per sample");
    std::vector<double> y(b);
    for (size_t i = 0; i < b; ++i) y[i] = double(y_cnt[i]);
    Tensor diff = sub(p, Tensor::from_data({b}, std::move(y)));
    return div(sum_all(mul(mul(diff, diff), wt)), double(b));
  }

  if (pred.rank() != 2 || pred.extent(0) != b)
    throw ShapeError("classification counting expects [b, l_max+1] logits");
  const size_t k = pred.extent(1);
  std::vector<size_t> cols(b);
  for (size_t i = 0; i < b; ++i) {
    if (y_cnt[i] < 0 || size_t(y_cnt[i]) >= k)
      throw ValueError("count " + std::to_string(y_cnt[i]) +
                       " exceeds the classification range");
    cols[i] = size_t(y_cnt[i]);
  }
  Tensor picked = pick(log_softmax(pred, 1), cols);
  return div(sum_all(mul(neg(picked), wt)), double(b));
}

// ---------------------------------------------------------------------------
// ACE

Tensor ace_loss(const Tensor& frame_probs,
                const std::vector<std::vector<double>>& counts) {
  if (frame_probs.rank() != 3)
    throw ShapeError("ace_loss expects [b,t,classes]");
  const size_t b = frame_probs.extent(0), t = frame_probs.extent(1),
               k = frame_probs.extent(2);
  if (counts.size() != b) throw ShapeError("one count vector per sample");
  std::vector<double> q(b * k);
  for (size_t i = 0; i < b; ++i) {
    if (counts[i].size() != k)
      throw ShapeError("count vector length must equal class count");
    double sum = 0.0;
    for (double c : counts[i]) {
      if (c < 0.0) throw ValueError("negative character count");
      sum += c;
    }
    if (sum > double(t) + 1e-9)
      throw ValueError("character counts exceed the number of frames");
    for (size_t j = 0; j < k; ++j) q[i * k + j] = counts[i][j] / double(t);
  }
  Tensor pbar = reduce_mean(frame_probs, {1});  // [b,k]
  Tensor logp = log(add(pbar, 1e-12));
  Tensor qt = Tensor::from_data({b, k}, std::move(q));
  return div(neg(sum_all(mul(qt, logp))), double(b));
}

// ---------------------------------------------------------------------------
// Joint

Tensor joint_loss(const Tensor& l_cnt, const Tensor& l_rcg, double lambda) {
  if (l_cnt.numel() != 1 || l_rcg.numel() != 1)
    throw ShapeError("joint_loss expects scalar losses");
  if (!std::isfinite(l_cnt.value()) || !std::isfinite(l_rcg.value()))
    throw NumericDomainError("joint_loss requires finite branch losses");
  return add(l_cnt, mul(l_rcg, lambda));
}

}  // namespace rfl
