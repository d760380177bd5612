// Acceptance suite: one test case per criterion, one PASS/FAIL line each.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>
#include <sys/resource.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "rfl/gradcheck.hpp"
#include "rfl/selftest.hpp"
#include "rfl/train.hpp"

using namespace rfl;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double wall_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Total process CPU time (all threads); the budget basis for the
// parallelizable training criteria.
double cpu_seconds() {
  rusage u{};
  getrusage(RUSAGE_SELF, &u);
  return double(u.ru_utime.tv_sec) + double(u.ru_utime.tv_usec) * 1e-6 +
         double(u.ru_stime.tv_sec) + double(u.ru_stime.tv_usec) * 1e-6;
}

void verdict(int criterion, bool ok, const char* what) {
  std::printf("[criterion %d] %s - %s\n", criterion, ok ? "PASS" : "FAIL",
              what);
  std::fflush(stdout);
}

Tensor weighted_sum(const Tensor& t, uint64_t seed) {
  Rng rng(seed);
  return sum_all(mul(t, Tensor::uniform(t.shape(), -1.0, 1.0, rng)));
}

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

ModelConfig tiny_bidirectional() {
  ModelConfig cfg;
  cfg.channels = 8;
  cfg.hidden = 8;
  cfg.in_w = 20;
  cfg.alphabet = "abc";
  cfg.l_max = 4;
  cfg.adaptor = AdaptorMode::Bidirectional;
  cfg.decoder = DecoderKind::BilstmAttn;
  return cfg;
}

Tensor model_joint_loss(RflModel& model, const Tensor& images,
                        const std::vector<std::string>& texts) {
  const LabelCoding coding = model.config().coding();
  std::vector<std::vector<int>> attn_targets, ctc_targets;
  std::vector<int> counts;
  for (const auto& t : texts) {
    attn_targets.push_back(coding.encode_attn(t));
    ctc_targets.push_back(coding.encode_ctc(t));
    counts.push_back(int(t.size()));
  }
  const bool attn = model.config().decoder != DecoderKind::Ctc;
  ModelOutput out = model.forward(images, attn ? &attn_targets : nullptr);
  Tensor l_cnt = count_loss(out.cnt_pred, counts, model.config().count_mode);
  Tensor l_rcg =
      model.config().decoder == DecoderKind::Ctc
          ? ctc_loss(log_softmax(out.rcg_logits, 2), ctc_targets)
          : attn_ce_loss(out.rcg_logits, attn_targets, coding.eos_index());
  return joint_loss(l_cnt, l_rcg, model.config().lambda);
}

AblationGrid strategy_grid(uint64_t master_seed) {
  AblationGrid grid;
  grid.train_spec.count = 5000;
  grid.test_spec.count = 1000;
  grid.seeds = 3;
  grid.epochs = 5;
  grid.batch = 32;
  grid.jobs = 2;
  grid.master_seed = master_seed;
  ModelConfig base;
  base.decoder = DecoderKind::ParalAttnSimplified;
  ModelConfig rcg_only = base;
  rcg_only.task = TaskMode::RcgOnly;
  grid.variants.push_back({"rcg-only", rcg_only, ""});
  ModelConfig cnt_only = base;
  cnt_only.task = TaskMode::CntOnly;
  grid.variants.push_back({"cnt-only", cnt_only, ""});
  ModelConfig jt = base;
  jt.adaptor = AdaptorMode::Jt;
  grid.variants.push_back({"jt", jt, ""});
  ModelConfig bi = base;
  bi.adaptor = AdaptorMode::Bidirectional;
  grid.variants.push_back({"bidirectional", bi, ""});
  return grid;
}

const AblationRow& grid_row(const AblationResult& res, const std::string& name,
                            size_t seed) {
  for (const auto& row : res.rows)
    if (row.variant == name && row.seed_index == seed) {
      REQUIRE_FALSE(row.failed);
      return row;
    }
  REQUIRE(false);
  static AblationRow dummy;
  return dummy;
}

double grid_mean(const AblationResult& res, const std::string& name,
                 double EvalReport::*field, size_t seeds) {
  double s = 0;
  for (size_t i = 0; i < seeds; ++i) s += grid_row(res, name, i).report.*field;
  return s / double(seeds);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)), {});
}

}  // namespace

TEST_CASE("criterion 1: CTC oracle equivalence") {
  const auto t0 = Clock::now();
  Rng rng(20101);
  int done = 0;
  double worst = 0.0;
  while (done < 50) {
    const size_t t = 1 + rng.below(5);
    const size_t k = 4;
    const size_t len = rng.below(4);
    std::vector<int> label(len);
    for (auto& c : label) c = 1 + int(rng.below(k - 1));
    if (ctc_min_frames(label) > t) continue;
    Tensor probs = random_prob_table(t, k, rng);
    std::vector<double> lp(probs.numel());
    for (size_t i = 0; i < probs.numel(); ++i) lp[i] = std::log(probs.data()[i]);
    const double brute = ctc_bruteforce(probs, label);
    const double dp =
        ctc_loss(Tensor::from_data({1, t, k}, std::move(lp)), {label}).value();
    worst = std::max(worst, std::abs(dp - brute));
    ++done;
  }
  const double secs = wall_since(t0);
  const bool ok = worst < 1e-9 && secs < 10.0;
  verdict(1, ok, "ctc_loss == ctc_bruteforce within 1e-9 on 50 instances");
  CHECK(worst < 1e-9);
  CHECK(secs < 10.0);
}

TEST_CASE("criterion 2: gradient suite below 1e-4") {
  const auto t0 = Clock::now();
  Rng rng(20102);
  double worst = 0.0;
  auto probe = [&](const char* name, double err) {
    INFO(name);
    CHECK(err < 1e-4);
    worst = std::max(worst, err);
  };

  {  // layers
    Tensor x = Tensor::uniform({2, 2, 5, 6}, -1, 1, rng);
    Tensor w = Tensor::uniform({3, 2, 3, 3}, -0.5, 0.5, rng);
    Tensor b = Tensor::uniform({3}, -0.5, 0.5, rng);
    probe("conv2d", finite_diff_check(
                        [](const std::vector<Tensor>& v) {
                          return weighted_sum(
                              conv2d(v[0], v[1], v[2], 2, 1, 1, 1), 11);
                        },
                        {x, w, b}));
    Tensor xp = Tensor::uniform({1, 2, 6, 7}, -1, 1, rng);
    probe("maxpool2d", finite_diff_check(
                           [](const std::vector<Tensor>& v) {
                             return weighted_sum(
                                 maxpool2d(v[0], 2, 2, 2, 1, 0, 1), 12);
                           },
                           {xp}));
    Tensor xl = Tensor::uniform({3, 4}, -1, 1, rng);
    Tensor wl = Tensor::uniform({4, 2}, -1, 1, rng);
    Tensor bl = Tensor::uniform({2}, -1, 1, rng);
    probe("linear", finite_diff_check(
                        [](const std::vector<Tensor>& v) {
                          return weighted_sum(
                              linear_forward(v[1], v[2], v[0]), 13);
                        },
                        {xl, wl, bl}));
    Tensor xn = Tensor::uniform({2, 3, 2, 4}, -2, 2, rng);
    for (NormVariant variant : {NormVariant::Batch, NormVariant::Layer}) {
      probe(variant == NormVariant::Batch ? "batch norm" : "layer norm",
            finite_diff_check(
                [variant](const std::vector<Tensor>& v) {
                  NormLayer n(3, variant);
                  n.gamma = v[1];
                  n.beta = v[2];
                  return weighted_sum(n.forward(v[0], true), 14);
                },
                {xn, Tensor::uniform({3}, 0.5, 1.5, rng),
                 Tensor::uniform({3}, -0.5, 0.5, rng)}));
    }
    Tensor xs = Tensor::uniform({2, 5}, -2, 2, rng);
    probe("softmax", finite_diff_check(
                         [](const std::vector<Tensor>& v) {
                           return weighted_sum(softmax(v[0], 1), 15);
                         },
                         {xs}));
    Tensor xr = Tensor::uniform({1, 3, 4}, -1, 1, rng);
    probe("bilstm", finite_diff_check(
                        [](const std::vector<Tensor>& v) {
                          BiLstm rnn(4, 3, 881);
                          return weighted_sum(rnn.forward(v[0]), 16);
                        },
                        {xr}));
    Tensor xc = Tensor::uniform({2, 3}, -1, 1, rng);
    probe("lstm cell", finite_diff_check(
                           [](const std::vector<Tensor>& v) {
                             LstmCell cell(3, 4, 882);
                             auto [h, c] = cell.forward(
                                 v[0], Tensor::zeros({2, 4}),
                                 Tensor::zeros({2, 4}));
                             return add(weighted_sum(h, 17), weighted_sum(c, 18));
                           },
                           {xc}));
    Tensor enc = Tensor::uniform({1, 3, 4}, -1, 1, rng);
    probe("attention step",
          finite_diff_check(
              [](const std::vector<Tensor>& v) {
                AttnDecoderCell cell(4, 3, 5, 883);
                auto s0 = cell.step(v[0], cell.initial_state(1), {4});
                auto s1 = cell.step(v[0], s0.state, {1});
                return add(weighted_sum(s0.logits, 19),
                           weighted_sum(s1.logits, 20));
              },
              {enc}));
    Tensor xf = Tensor::uniform({1, 3, 1, 4}, -1, 1, rng);
    probe("fe gate", finite_diff_check(
                         [](const std::vector<Tensor>& v) {
                           FeModule fe(3, NormVariant::Batch, 884);
                           return weighted_sum(fe.forward(v[0], true), 21);
                         },
                         {xf}));
  }
  {  // losses
    Tensor logits = Tensor::uniform({2, 4, 4}, -1.5, 1.5, rng);
    probe("ctc loss", finite_diff_check(
                          [](const std::vector<Tensor>& v) {
                            return ctc_loss(log_softmax(v[0], 2),
                                            {{1, 2}, {3}});
                          },
                          {logits}));
    Tensor al = Tensor::uniform({2, 3, 4}, -1, 1, rng);
    probe("attn ce loss", finite_diff_check(
                              [](const std::vector<Tensor>& v) {
                                return attn_ce_loss(v[0], {{0, 1}, {2}}, 3);
                              },
                              {al}));
    Tensor pr = Tensor::uniform({3}, -1, 5, rng);
    ClassBalanceWeights w;
    w.alpha.assign(27, 0.0);
    w.alpha[1] = 0.5;
    w.alpha[2] = 0.25;
    w.alpha[4] = 0.25;
    probe("count regression (balanced)",
          finite_diff_check(
              [&w](const std::vector<Tensor>& v) {
                return count_loss(v[0], {1, 2, 4}, CountMode::Regression, &w);
              },
              {pr}));
    Tensor pc = Tensor::uniform({3, 6}, -1, 1, rng);
    probe("count classification (balanced)",
          finite_diff_check(
              [&w](const std::vector<Tensor>& v) {
                return count_loss(v[0], {1, 2, 4}, CountMode::Classification,
                                  &w);
              },
              {pc}));
    Tensor ac = Tensor::uniform({2, 3, 4}, -1, 1, rng);
    probe("ace loss", finite_diff_check(
                          [](const std::vector<Tensor>& v) {
                            return ace_loss(softmax(v[0], 2),
                                            {{1, 1, 1, 0}, {2, 0, 0, 1}});
                          },
                          {ac}));
    Tensor j1 = Tensor::uniform({4}, 0.5, 1.5, rng);
    probe("joint loss", finite_diff_check(
                            [](const std::vector<Tensor>& v) {
                              return joint_loss(sum_all(mul(v[0], v[0])),
                                                sum_all(sigmoid(v[0])), 0.7);
                            },
                            {j1}));
  }
  {  // full bidirectional RF-L joint loss, ~20 sampled parameter coordinates
    RflModel m(tiny_bidirectional(), 20147);
    m.set_train(true);
    Rng ir(31);
    Tensor imgs = Tensor::uniform({2, 1, 32, 20}, 0.0, 1.0, ir);
    const std::vector<std::string> texts = {"abc", "b"};
    {
      GradTape tape;
      tape.backward(model_joint_loss(m, imgs, texts));
    }
    const char* names[] = {"stem.s1.conv.w",       "cnt.s3.conv.w",
                           "rcg.s3.conv.w",        "cnt.head.w",
                           "adaptor.fe_r.conv.w",  "adaptor.fe_c.conv.b",
                           "rcg.dec.bilstm.fwd.wx"};
    size_t checked = 0;
    double worst_e2e = 0.0;
    for (auto& p : m.bag().params) {
      bool wanted = false;
      for (const char* n : names) wanted = wanted || p.name == n;
      if (!wanted) continue;
      Rng pick(derive_seed(4321, p.name));
      for (int probe_i = 0; probe_i < 3; ++probe_i) {
        const size_t i = pick.below(p.tensor.numel());
        const double analytic = p.tensor.grad()[i];
        const double h = 1e-5;
        const double keep = p.tensor.data()[i];
        NoGradGuard ng;
        p.tensor.data()[i] = keep + h;
        const double fp = model_joint_loss(m, imgs, texts).value();
        p.tensor.data()[i] = keep - h;
        const double fm = model_joint_loss(m, imgs, texts).value();
        p.tensor.data()[i] = keep;
        const double numeric = (fp - fm) / (2 * h);
        worst_e2e = std::max(worst_e2e, std::abs(analytic - numeric) /
                                            (std::abs(analytic) + 1e-8));
        ++checked;
      }
    }
    CHECK(checked >= 20);
    probe("full bidirectional joint loss", worst_e2e);
  }
  const double secs = wall_since(t0);
  const bool ok = worst < 1e-4 && secs < 180.0;
  verdict(2, ok, "all layer/loss/full-model gradients within 1e-4");
  CHECK(secs < 180.0);
}

TEST_CASE("criterion 3: adaptor identities") {
  const auto t0 = Clock::now();
  bool ok = true;

  FeModule fe(8, NormVariant::Batch, 20103);
  Rng rng(5);
  for (int trial = 0; trial < 3; ++trial) {
    Tensor u = Tensor::uniform({4, 8, 1, 26}, -3, 3, rng);
    Tensor g = fe_apply(fe, u, true);
    for (double x : g.data()) ok = ok && x > 0.0 && x < 1.0;
  }

  FeModule zero_fe(4, NormVariant::Batch, 20104);
  std::fill(zero_fe.conv.weight.data().begin(),
            zero_fe.conv.weight.data().end(), 0.0);
  std::fill(zero_fe.conv.bias.data().begin(), zero_fe.conv.bias.data().end(),
            0.0);
  Tensor u = Tensor::uniform({2, 4, 1, 6}, -1, 1, rng);
  for (bool training : {true, false}) {
    Tensor g = fe_apply(zero_fe, u, training);
    for (double x : g.data()) ok = ok && x == 0.5;
  }

  Tensor u_rcg = Tensor::uniform({2, 4, 1, 6}, -1, 1, rng);
  Tensor v_cnt = adaptor_r2c(u, Tensor::zeros(u_rcg.shape()), nullptr,
                             FusionOp::Add, nullptr, true);
  ok = ok && v_cnt.data() == u.data();
  Tensor v_rcg = adaptor_c2r(Tensor::ones(u.shape()), u_rcg, nullptr,
                             FusionOp::Mul, nullptr, true);
  ok = ok && v_rcg.data() == u_rcg.data();

  // adaptor mode none is bitwise equivalent to a build without adaptor
  // parameters, and shared parameters are identical across adaptor modes
  ModelConfig none;
  none.channels = 16;
  none.hidden = 16;
  ModelConfig jt = none;
  jt.adaptor = AdaptorMode::Jt;
  ModelConfig bi = none;
  bi.adaptor = AdaptorMode::Bidirectional;
  RflModel m_none(none, 99), m_jt(jt, 99), m_bi(bi, 99);
  for (auto& p : m_none.bag().params)
    for (auto& q : m_bi.bag().params)
      if (q.name == p.name) ok = ok && q.tensor.data() == p.tensor.data();
  m_none.set_train(false);
  m_jt.set_train(false);
  Rng ir(7);
  Tensor imgs = Tensor::uniform({2, 1, 32, 100}, 0.0, 1.0, ir);
  BranchFeatures fa = m_none.forward_branches(m_none.forward_shared(imgs));
  BranchFeatures fb = m_jt.forward_branches(m_jt.forward_shared(imgs));
  ok = ok && fa.v_cnt.data() == fb.v_cnt.data() &&
       fa.v_rcg.data() == fb.v_rcg.data() &&
       fa.v_cnt.data() == fa.u_cnt.data();

  const double secs = wall_since(t0);
  ok = ok && secs < 30.0;
  verdict(3, ok, "gate range, 0.5 gate, fusion identities, mode-none bitwise");
  CHECK(ok);
}

TEST_CASE("criterion 4: metric correctness") {
  auto r = compute_metrics({"abcd", "abcde"}, {"abc", "abcde"}, {4, 5}, {3, 5});
  const bool ok = std::abs(r.rmse - 0.70710678118654757) < 1e-9 &&
                  std::abs(r.rel_rmse - 0.35355339059327379) < 1e-9;
  auto perfect = compute_metrics({"ab", "c"}, {"ab", "c"}, {2, 1}, {2, 1});
  const bool ok2 = perfect.word_accuracy == 1.0 && perfect.rmse == 0.0 &&
                   perfect.rel_rmse == 0.0 &&
                   perfect.count_correct_ratio == 1.0;
  verdict(4, ok && ok2, "Eq. 6 hand values to 1e-9; perfect gives (1,0,0)");
  CHECK(ok);
  CHECK(ok2);
}

TEST_CASE("criterion 5: overfit smoke per decoder") {
  CorpusSpec spec;
  spec.count = 16;
  spec.seed = 501;
  Corpus corpus = Corpus::render_in_memory(spec);
  bool all_ok = true;
  for (DecoderKind decoder :
       {DecoderKind::Ctc, DecoderKind::BilstmAttn,
        DecoderKind::ParalAttnSimplified}) {
    const auto t0 = Clock::now();
    ModelConfig cfg;
    cfg.decoder = decoder;
    cfg.adaptor = AdaptorMode::Jt;
    RflModel model(cfg, 20105);
    TrainOptions opt;
    opt.epochs = 500;  // one step per epoch at batch 16
    opt.batch = 16;
    opt.seed = 20106;
    TrainResult res = train(model, corpus, opt);
    const double initial = res.curve.front().loss;
    const double final_loss = res.curve.back().loss;
    const double secs = wall_since(t0);
    const bool ok = final_loss < 0.1 * initial && secs < 300.0;
    std::printf("  decoder %d: loss %.4f -> %.4f in %.0f s\n", int(decoder),
                initial, final_loss, secs);
    CHECK(final_loss < 0.1 * initial);
    CHECK(secs < 300.0);
    all_ok = all_ok && ok;
  }
  verdict(5, all_ok, "joint loss below 10% of initial within 500 steps");
}

TEST_CASE("criterion 6: directional Table 5 analog") {
  const double cpu0 = cpu_seconds();
  const fs::path out = fs::temp_directory_path() / "rfl_acceptance_c6";
  fs::remove_all(out);
  AblationGrid grid = strategy_grid(11);
  AblationResult res = run_ablation(grid, out.string());

  const double wa_bi = grid_mean(res, "bidirectional",
                                 &EvalReport::word_accuracy, grid.seeds);
  const double wa_jt = grid_mean(res, "jt", &EvalReport::word_accuracy,
                                 grid.seeds);
  const double wa_rcg = grid_mean(res, "rcg-only", &EvalReport::word_accuracy,
                                  grid.seeds);
  size_t bi_beats_rcg = 0, bi_rmse_le_cnt = 0;
  for (size_t s = 0; s < grid.seeds; ++s) {
    if (grid_row(res, "bidirectional", s).report.word_accuracy >
        grid_row(res, "rcg-only", s).report.word_accuracy)
      ++bi_beats_rcg;
    if (grid_row(res, "bidirectional", s).report.rmse <=
        grid_row(res, "cnt-only", s).report.rmse)
      ++bi_rmse_le_cnt;
  }
  const double cpu_used = cpu_seconds() - cpu0;
  std::printf(
      "  word acc: bidirectional %.4f >= jt %.4f >= rcg-only %.4f\n"
      "  bidirectional > rcg-only in %zu/3 seeds; rmse(bi) <= rmse(cnt-only) "
      "in %zu/3 seeds; cpu %.0f s\n",
      wa_bi, wa_jt, wa_rcg, bi_beats_rcg, bi_rmse_le_cnt, cpu_used);
  const bool ok = wa_bi >= wa_jt && wa_jt >= wa_rcg && bi_beats_rcg >= 2 &&
                  bi_rmse_le_cnt >= 2 && cpu_used < 3600.0;
  verdict(6, ok, "bidirectional >= JT-L >= RCG-only; CNT helped by RF-L");
  CHECK(wa_bi >= wa_jt);
  CHECK(wa_jt >= wa_rcg);
  CHECK(bi_beats_rcg >= 2);
  CHECK(bi_rmse_le_cnt >= 2);
  CHECK(cpu_used < 3600.0);
}

TEST_CASE("criterion 7: directional Table 1 analog") {
  const double cpu0 = cpu_seconds();
  const fs::path out = fs::temp_directory_path() / "rfl_acceptance_c7";
  fs::remove_all(out);
  AblationGrid grid = preset_grid("table1", 11);
  grid.jobs = 2;
  AblationResult res = run_ablation(grid, out.string());

  const char* others[] = {"cnt-ce", "cnt-ce-balance", "cnt-regression"};
  bool ok = true;
  for (const char* other : others) {
    const double other_mean = grid_mean(
        res, other, &EvalReport::count_correct_ratio, grid.seeds);
    size_t wins = 0;
    for (size_t s = 0; s < grid.seeds; ++s)
      if (grid_row(res, "cnt-regression-balance", s)
              .report.count_correct_ratio >= other_mean)
        ++wins;
    std::printf("  regression+balance >= mean(%s)=%.4f in %zu/3 seeds\n",
                other, other_mean, wins);
    ok = ok && wins >= 2;
    CHECK(wins >= 2);
  }
  const double cpu_used = cpu_seconds() - cpu0;
  ok = ok && cpu_used < 1800.0;
  std::printf("  cpu %.0f s\n", cpu_used);
  verdict(7, ok, "regression + class balance leads the counting variants");
  CHECK(cpu_used < 1800.0);
}

TEST_CASE("criterion 8: preset determinism") {
  const fs::path a = fs::temp_directory_path() / "rfl_acceptance_c8a";
  const fs::path b = fs::temp_directory_path() / "rfl_acceptance_c8b";
  fs::remove_all(a);
  fs::remove_all(b);
  AblationGrid g1 = preset_grid("smoke", 17);
  AblationGrid g2 = preset_grid("smoke", 17);
  run_ablation(g1, a.string());
  run_ablation(g2, b.string());
  bool ok = slurp(a / "results.csv") == slurp(b / "results.csv");
  ok = ok && slurp(a / "runs" / "smoke-jt_s0" / "curve.csv") ==
                 slurp(b / "runs" / "smoke-jt_s0" / "curve.csv");
  ok = ok && slurp(a / "runs" / "smoke-jt_s0" / "report.csv") ==
                 slurp(b / "runs" / "smoke-jt_s0" / "report.csv");
  verdict(8, ok, "re-running a preset reproduces curve.csv and report.csv");
  CHECK(ok);
}
