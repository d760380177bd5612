#include "rfl/selftest.hpp"

#include <cmath>
#include <set>

#include "rfl/gradcheck.hpp"
#include "rfl/model.hpp"
#include "rfl/synth.hpp"

namespace rfl {

namespace {

Tensor random_prob_table(size_t t, size_t k, Rng& rng) {
  std::vector<double> p(t * k);
  for (size_t i = 0; i < t; ++i) {
    double sum = 0;
    for (size_t j = 0; j < k; ++j) {
      p[i * k + j] = 0.05 + rng.uniform();
      sum += p[i * k + j];
    }
    for (size_t j = 0; j < k; ++j) p[i * k + j] /= sum;
  }
  return Tensor::from_data({t, k}, std::move(p));
}

size_t ctc_min_frames(const std::vector<int>& label) {
  size_t need = label.size();
  for (size_t i = 1; i < label.size(); ++i)
    if (label[i] == label[i - 1]) ++need;
  return need;
}

Tensor weighted_sum(const Tensor& t, uint64_t seed) {
  Rng rng(seed);
  return sum_all(mul(t, Tensor::uniform(t.shape(), -1.0, 1.0, rng)));
}

size_t component_count(const std::vector<bool>& ink, size_t h, size_t w) {
  std::vector<bool> seen(h * w, false);
  size_t components = 0;
  std::vector<size_t> stack;
  for (size_t start = 0; start < h * w; ++start) {
    if (!ink[start] || seen[start]) continue;
    ++components;
    stack.push_back(start);
    seen[start] = true;
    while (!stack.empty()) {
      const size_t p = stack.back();
      stack.pop_back();
      const size_t r = p / w, c = p % w;
      const size_t neigh[4][2] = {
          {r + 1, c}, {r - 1, c}, {r, c + 1}, {r, c - 1}};
      for (auto& n : neigh) {
        if (n[0] >= h || n[1] >= w) continue;
        const size_t q = n[0] * w + n[1];
        if (ink[q] && !seen[q]) {
          seen[q] = true;
          stack.push_back(q);
        }
      }
    }
  }
  return components;
}

struct SuiteRunner {
  SelftestSuite suite;
  std::ostream& log;
  void check(const char* what, bool ok) {
    if (ok) {
      ++suite.passed;
    } else {
      ++suite.failed;
      log << "  FAIL: " << suite.name << ": " << what << "\n";
    }
  }
};

}  // namespace

SelftestResult run_selftest(std::ostream& log, CtcLossFn ctc_impl) {
  if (!ctc_impl)
    ctc_impl = [](const Tensor& lp, const std::vector<std::vector<int>>& labels,
                  size_t* skipped) { return ctc_loss(lp, labels, skipped); };
  SelftestResult result;

  {
    SuiteRunner r{{"ctc-bruteforce-equivalence"}, log};
    Rng rng(4242);
    int done = 0;
    while (done < 20) {
      const size_t t = 1 + rng.below(5);
      const size_t k = 4;
      const size_t len = rng.below(4);
      std::vector<int> label(len);
      for (auto& c : label) c = 1 + int(rng.below(k - 1));
      if (ctc_min_frames(label) > t) continue;
      Tensor probs = random_prob_table(t, k, rng);
      std::vector<double> lp(probs.numel());
      for (size_t i = 0; i < probs.numel(); ++i)
        lp[i] = std::log(probs.data()[i]);
      const double brute = ctc_bruteforce(probs, label);
      const double dp =
          ctc_impl(Tensor::from_data({1, t, k}, std::move(lp)), {label},
                   nullptr)
              .value();
      r.check("dp equals brute force within 1e-9", std::abs(dp - brute) < 1e-9);
      ++done;
    }
    result.suites.push_back(r.suite);
  }

  {
    SuiteRunner r{{"gradient-checks"}, log};
    Rng rng(99);
    {
      Tensor x = Tensor::uniform({1, 2, 4, 5}, -1, 1, rng);
      Tensor w = Tensor::uniform({3, 2, 3, 3}, -0.5, 0.5, rng);
      Tensor b = Tensor::uniform({3}, -0.5, 0.5, rng);
      r.check("conv2d", finite_diff_check(
                            [](const std::vector<Tensor>& v) {
                              return weighted_sum(
                                  conv2d(v[0], v[1], v[2], 1, 1, 1, 1), 1);
                            },
                            {x, w, b}) < 1e-4);
    }
    {
      Tensor x = Tensor::uniform({2, 3, 2, 4}, -1, 1, rng);
      r.check("batch norm",
              finite_diff_check(
                  [](const std::vector<Tensor>& v) {
                    NormLayer n(3, NormVariant::Batch);
                    return weighted_sum(n.forward(v[0], true), 2);
                  },
                  {x}) < 1e-4);
    }
    {
      Tensor x = Tensor::uniform({1, 3, 4}, -1, 1, rng);
      r.check("bilstm", finite_diff_check(
                            [](const std::vector<Tensor>& v) {
                              BiLstm rnn(4, 3, 771);
                              return weighted_sum(rnn.forward(v[0]), 3);
                            },
                            {x}) < 1e-4);
    }
    {
      Tensor enc = Tensor::uniform({1, 3, 4}, -1, 1, rng);
      r.check("attention step",
              finite_diff_check(
                  [](const std::vector<Tensor>& v) {
                    AttnDecoderCell cell(4, 3, 5, 772);
                    auto out = cell.step(v[0], cell.initial_state(1), {4});
                    return weighted_sum(out.logits, 4);
                  },
                  {enc}) < 1e-4);
    }
    {
      Tensor logits = Tensor::uniform({2, 4, 4}, -1.5, 1.5, rng);
      r.check("ctc loss", finite_diff_check(
                              [&](const std::vector<Tensor>& v) {
                                return ctc_impl(log_softmax(v[0], 2),
                                                {{1, 2}, {3}}, nullptr);
                              },
                              {logits}) < 1e-4);
    }
    {
      Tensor logits = Tensor::uniform({2, 3, 4}, -1, 1, rng);
      r.check("attention cross entropy",
              finite_diff_check(
                  [](const std::vector<Tensor>& v) {
                    return attn_ce_loss(v[0], {{0, 1}, {2}}, 3);
                  },
                  {logits}) < 1e-4);
    }
    {
      Tensor pred = Tensor::uniform({3}, -1, 5, rng);
      r.check("count regression",
              finite_diff_check(
                  [](const std::vector<Tensor>& v) {
                    return count_loss(v[0], {1, 2, 4}, CountMode::Regression);
                  },
                  {pred}) < 1e-4);
    }
    {
      Tensor logits = Tensor::uniform({2, 3, 4}, -1, 1, rng);
      r.check("ace loss",
              finite_diff_check(
                  [](const std::vector<Tensor>& v) {
                    return ace_loss(softmax(v[0], 2),
                                    {{1, 1, 1, 0}, {2, 0, 0, 1}});
                  },
                  {logits}) < 1e-4);
    }
    result.suites.push_back(r.suite);
  }

  {
    SuiteRunner r{{"fusion-identities"}, log};
    Rng rng(7);
    Tensor u_cnt = Tensor::uniform({2, 4, 1, 6}, -1, 1, rng);
    Tensor u_rcg = Tensor::uniform({2, 4, 1, 6}, -1, 1, rng);
    Tensor v_add = adaptor_r2c(u_cnt, Tensor::zeros(u_rcg.shape()), nullptr,
                               FusionOp::Add, nullptr, true);
    r.check("additive identity", v_add.data() == u_cnt.data());
    Tensor v_mul = adaptor_c2r(Tensor::ones(u_cnt.shape()), u_rcg, nullptr,
                               FusionOp::Mul, nullptr, true);
    r.check("multiplicative identity", v_mul.data() == u_rcg.data());

    FeModule fe(4, NormVariant::Batch, 31);
    Tensor gate = fe_apply(fe, u_cnt, true);
    bool in_range = true;
    for (double g : gate.data()) in_range = in_range && g > 0.0 && g < 1.0;
    r.check("gate strictly inside (0,1)", in_range);

    std::fill(fe.conv.weight.data().begin(), fe.conv.weight.data().end(), 0.0);
    std::fill(fe.conv.bias.data().begin(), fe.conv.bias.data().end(), 0.0);
    Tensor half = fe_apply(fe, u_cnt, true);
    bool all_half = true;
    for (double g : half.data()) all_half = all_half && g == 0.5;
    r.check("zero-weight FE gives 0.5", all_half);
    result.suites.push_back(r.suite);
  }

  {
    SuiteRunner r{{"renderer-goldens"}, log};
    std::set<std::string> seen;
    bool distinct = true, connected = true;
    for (char c : font_alphabet()) {
      std::string flat;
      std::vector<bool> ink(kGlyphH * kGlyphW);
      for (size_t row = 0; row < kGlyphH; ++row)
        for (size_t col = 0; col < kGlyphW; ++col) {
          const bool on = glyph_pixel(c, row, col);
          flat.push_back(on ? '#' : '.');
          ink[row * kGlyphW + col] = on;
        }
      distinct = distinct && seen.insert(flat).second;
      connected = connected && component_count(ink, kGlyphH, kGlyphW) == 1;
    }
    r.check("glyphs distinct", distinct);
    r.check("glyphs 4-connected", connected);

    CorpusSpec spec;
    spec.noise = 0.0;
    spec.jitter = 0;
    spec.scale_min = spec.scale_max = 2;
    spec.polarity_invert = false;
    Rng rng(derive_seed(7, "golden"));
    Sample s = render_sample(spec, "a", rng);
    bool golden_ok = true;
    for (size_t y = 0; y < 32 && golden_ok; ++y)
      for (size_t x = 0; x < 100; ++x) {
        bool want = false;
        if (y >= 9 && y < 9 + 14 && x >= 2 && x < 2 + 10)
          want = glyph_pixel('a', (y - 9) / 2, (x - 2) / 2);
        if (s.image.at({y, x}) != (want ? 1.0 : 0.0)) {
          golden_ok = false;
          break;
        }
      }
    r.check("scaled 'a' at the deterministic anchor", golden_ok);

    Rng r1(55), r2(55);
    CorpusSpec noisy;
    Sample a = render_sample(noisy, "abc", r1);
    Sample b = render_sample(noisy, "abc", r2);
    r.check("bit-identical render for equal rng state",
            a.image.data() == b.image.data());

    Rng rc(derive_seed(3, "cc"));
    Sample s3 = render_sample(spec, "fij", rc);
    std::vector<bool> ink(s3.image.numel());
    for (size_t i = 0; i < ink.size(); ++i) ink[i] = s3.image.data()[i] > 0.5;
    r.check("component count equals text length",
            component_count(ink, 32, 100) == 3);
    result.suites.push_back(r.suite);
  }

  for (const auto& s : result.suites)
    log << s.name << ": " << s.passed << " passed, " << s.failed
        << " failed\n";
  return result;
}

}  // namespace rfl
