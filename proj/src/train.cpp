#include "rfl/train.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;

namespace rfl {

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << content;
  if (!out) throw IoError("failed writing: " + path);
}

}  // namespace

// ---------------------------------------------------------------------------
// AdaDelta

void AdaDelta::step(std::vector<NamedTensor>& params) {
  for (NamedTensor& p : params) {
    auto& data = p.tensor.data();
    const auto& grad = p.tensor.grad();
    State& st = state_[p.name];
    if (st.avg_sq_grad.empty()) {
      st.avg_sq_grad.assign(data.size(), 0.0);
      st.avg_sq_update.assign(data.size(), 0.0);
    }
    if (st.avg_sq_grad.size() != data.size())
      throw ShapeError("optimizer state shape mismatch for " + p.name);
    for (size_t i = 0; i < data.size(); ++i) {
      const double g = grad[i];
      st.avg_sq_grad[i] = rho_ * st.avg_sq_grad[i] + (1.0 - rho_) * g * g;
      const double dx = -std::sqrt(st.avg_sq_update[i] + eps_) /
                        std::sqrt(st.avg_sq_grad[i] + eps_) * g;
      st.avg_sq_update[i] = rho_ * st.avg_sq_update[i] + (1.0 - rho_) * dx * dx;
      data[i] += lr_ * dx;
    }
  }
}

// ---------------------------------------------------------------------------
// Metrics

EvalReport compute_metrics(const std::vector<std::string>& pred_texts,
                           const std::vector<std::string>& true_texts,
                           const std::vector<int>& pred_counts,
                           const std::vector<int>& true_counts) {
  const size_t n = true_texts.size();
  if (pred_texts.size() != n || pred_counts.size() != n ||
      true_counts.size() != n)
    throw ShapeError("metric inputs must have equal lengths");
  if (n == 0) throw ValueError("cannot evaluate an empty corpus");
  EvalReport r;
  r.n = n;
  double sq = 0.0, rel_sq = 0.0;
  size_t word_ok = 0, cnt_ok = 0;
  for (size_t i = 0; i < n; ++i) {
    const bool w_ok = pred_texts[i] == true_texts[i];
    const bool c_ok = pred_counts[i] == true_counts[i];
    const double d = double(pred_counts[i] - true_counts[i]);
    word_ok += w_ok;
    cnt_ok += c_ok;
    sq += d * d;
    rel_sq += d * d / double(true_counts[i] + 1);
    auto& bucket = r.per_length[true_texts[i].size()];
    bucket.n += 1;
    bucket.word_correct += w_ok;
    bucket.count_correct += c_ok;
    bucket.sq_err += d * d;
    bucket.rel_sq_err += d * d / double(true_counts[i] + 1);
  }
  r.word_accuracy = double(word_ok) / double(n);
  r.count_correct_ratio = double(cnt_ok) / double(n);
  r.rmse = std::sqrt(sq / double(n));
  r.rel_rmse = std::sqrt(rel_sq / double(n));
  return r;
}

std::string report_csv(const EvalReport& r) {
  std::ostringstream out;
  out << "scope,n,word_accuracy,count_correct_ratio,rmse,rel_rmse\n";
  out << "all," << r.n << "," << fmt(r.word_accuracy) << ","
      << fmt(r.count_correct_ratio) << "," << fmt(r.rmse) << ","
      << fmt(r.rel_rmse) << "\n";
  for (const auto& [len, b] : r.per_length) {
    out << "len_" << len << "," << b.n << ","
        << fmt(double(b.word_correct) / double(b.n)) << ","
        << fmt(double(b.count_correct) / double(b.n)) << ","
        << fmt(std::sqrt(b.sq_err / double(b.n))) << ","
        << fmt(std::sqrt(b.rel_sq_err / double(b.n))) << "\n";
  }
  return out.str();
}

void write_report_csv(const EvalReport& report, const std::string& path) {
  write_text_file(path, report_csv(report));
}

// ---------------------------------------------------------------------------
// Evaluate

EvalReport evaluate(RflModel& model, const Corpus& corpus, size_t batch) {
  if (corpus.size() == 0) throw ValueError("cannot evaluate an empty corpus");
  const bool was_training = model.is_training();
  model.set_train(false);
  std::vector<std::string> pred_texts, true_texts;
  std::vector<int> pred_counts, true_counts;
  for (size_t at = 0; at < corpus.size(); at += batch) {
    const size_t bs = std::min(batch, corpus.size() - at);
    std::vector<Tensor> rows(bs);
    for (size_t i = 0; i < bs; ++i)
      rows[i] = reshape(corpus.image_tensor(at + i),
                        {1, 1, corpus.img_h, corpus.img_w});
    Tensor images = bs == 1 ? rows[0] : concat(rows, 0);
    NoGradGuard ng;
    BranchFeatures f = model.forward_branches(model.forward_shared(images));
    const auto texts = model.decode_rcg_greedy(f.v_rcg);
    const auto counts = model.predict_counts(model.cnt_head_forward(f.v_cnt));
    for (size_t i = 0; i < bs; ++i) {
      pred_texts.push_back(texts[i]);
      true_texts.push_back(corpus.texts[at + i]);
      pred_counts.push_back(counts[i]);
      true_counts.push_back(int(corpus.texts[at + i].size()));
    }
  }
  model.set_train(was_training);
  return compute_metrics(pred_texts, true_texts, pred_counts, true_counts);
}

// ---------------------------------------------------------------------------
// Train

std::string curve_csv(const std::vector<CurveRow>& curve) {
  std::ostringstream out;
  out << "epoch,loss,loss_cnt,loss_rcg,ctc_skipped\n";
  for (const CurveRow& r : curve)
    out << r.epoch << "," << fmt(r.loss) << "," << fmt(r.loss_cnt) << ","
        << fmt(r.loss_rcg) << "," << r.ctc_skipped << "\n";
  return out.str();
}

TrainResult train(RflModel& model, const Corpus& corpus,
                  const TrainOptions& opt) {
  if (corpus.size() == 0)
    throw ValueError("training requires a nonempty corpus");
  const ModelConfig& cfg = model.config();
  const LabelCoding coding = cfg.coding();

  std::vector<std::vector<int>> ctc_labels(corpus.size()),
      attn_labels(corpus.size());
  std::vector<int> counts(corpus.size());
  for (size_t i = 0; i < corpus.size(); ++i) {
    const std::string& t = corpus.texts[i];
    if (t.empty() || t.size() > cfg.l_max)
      throw ValueError("transcription length outside [1, l_max]: '" + t + "'");
    ctc_labels[i] = coding.encode_ctc(t);
    attn_labels[i] = coding.encode_attn(t);
    counts[i] = int(t.size());
  }

  ClassBalanceWeights balance;
  const ClassBalanceWeights* weights = nullptr;
  if (cfg.count_class_balance) {
    balance = class_balance_from_corpus(corpus.lengths(), cfg.l_max);
    weights = &balance;
    if (balance.degenerate && opt.log)
      *opt.log << "warning: degenerate class balance (a count class has "
                  "weight 0)\n";
  }

  const bool want_cnt = cfg.task != TaskMode::RcgOnly;
  const bool want_rcg = cfg.task != TaskMode::CntOnly;

  // Warm-start a fresh regression counting head at the corpus mean count so
  // the initial MSE is the count variance rather than the raw second moment;
  // keeps the joint loss scales comparable under lambda = 1.
  if (want_cnt && cfg.count_mode == CountMode::Regression) {
    for (NamedTensor& p : model.bag().params) {
      if (p.name != "cnt.head.b") continue;
      bool fresh = true;
      for (double v : p.tensor.data()) fresh = fresh && v == 0.0;
      if (fresh) {
        double mean = 0.0;
        for (int c : counts) mean += double(c);
        p.tensor.data()[0] = mean / double(counts.size());
      }
    }
  }

  AdaDelta optimizer(opt.rho, opt.eps, opt.lr);
  auto trainable = model.trainable_params();
  model.set_train(true);

  TrainResult result;
  if (!opt.out_dir.empty()) {
    std::error_code ec;
    fs::create_directories(opt.out_dir, ec);
    if (ec) throw IoError("cannot create output directory: " + opt.out_dir);
  }

  std::vector<size_t> order(corpus.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
    Rng shuffle_rng(
        derive_seed(opt.seed, "shuffle-epoch-" + std::to_string(epoch)));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.below(i)]);

    double sum_loss = 0.0, sum_cnt = 0.0, sum_rcg = 0.0;
    size_t seen = 0, skipped_total = 0, step = 0;
    for (size_t at = 0; at < order.size(); at += opt.batch, ++step) {
      const size_t bs = std::min(opt.batch, order.size() - at);
      std::vector<Tensor> rows(bs);
      std::vector<std::vector<int>> batch_ctc(bs), batch_attn(bs);
      std::vector<int> batch_counts(bs);
      for (size_t i = 0; i < bs; ++i) {
        const size_t ix = order[at + i];
        rows[i] = reshape(corpus.image_tensor(ix),
                          {1, 1, corpus.img_h, corpus.img_w});
        batch_ctc[i] = ctc_labels[ix];
        batch_attn[i] = attn_labels[ix];
        batch_counts[i] = counts[ix];
      }
      Tensor images = bs == 1 ? rows[0] : concat(rows, 0);

      GradTape tape;
      ModelOutput out = model.forward(
          images, cfg.decoder == DecoderKind::Ctc ? nullptr : &batch_attn);
      Tensor l_cnt, l_rcg;
      size_t skipped = 0;
      if (want_cnt)
        l_cnt = count_loss(out.cnt_pred, batch_counts, cfg.count_mode, weights);
      if (want_rcg) {
        if (cfg.decoder == DecoderKind::Ctc)
          l_rcg = ctc_loss(log_softmax(out.rcg_logits, 2), batch_ctc, &skipped);
        else
          l_rcg = attn_ce_loss(out.rcg_logits, batch_attn, coding.eos_index());
      }
      skipped_total += skipped;
      if ((want_cnt && !std::isfinite(l_cnt.value())) ||
          (want_rcg && !std::isfinite(l_rcg.value())))
        throw DivergenceError("NaN/Inf loss at epoch " + std::to_string(epoch) +
                              " step " + std::to_string(step));
      Tensor loss;
      if (want_cnt && want_rcg)
        loss = joint_loss(l_cnt, l_rcg, cfg.lambda);
      else
        loss = want_cnt ? l_cnt : l_rcg;
      sum_loss += loss.value() * double(bs);
      sum_cnt += (want_cnt ? l_cnt.value() : 0.0) * double(bs);
      sum_rcg += (want_rcg ? l_rcg.value() : 0.0) * double(bs);
      seen += bs;

      tape.backward(loss);
      optimizer.step(trainable);
      for (NamedTensor& p : trainable) p.tensor.zero_grad();
    }

    CurveRow row;
    row.epoch = epoch;
    row.loss = sum_loss / double(seen);
    row.loss_cnt = sum_cnt / double(seen);
    row.loss_rcg = sum_rcg / double(seen);
    row.ctc_skipped = skipped_total;
    result.curve.push_back(row);
    if (opt.log)
      *opt.log << "epoch " << epoch << " loss " << row.loss << " (cnt "
               << row.loss_cnt << ", rcg " << row.loss_rcg << ")\n";
    if (!opt.out_dir.empty()) {
      result.checkpoint_path =
          (fs::path(opt.out_dir) / "checkpoint.bin").string();
      model.save_checkpoint(result.checkpoint_path);
      write_text_file((fs::path(opt.out_dir) / "curve.csv").string(),
                      curve_csv(result.curve));
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Ablation harness

namespace {

struct Stats {
  double mean = 0.0, sd = 0.0;
};

Stats mean_sd(const std::vector<double>& xs) {
  Stats s;
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= double(xs.size());
  if (xs.size() > 1) {
    double acc = 0.0;
    for (double x : xs) acc += (x - s.mean) * (x - s.mean);
    s.sd = std::sqrt(acc / double(xs.size() - 1));
  }
  return s;
}

}  // namespace

AblationResult run_ablation(const AblationGrid& grid,
                            const std::string& out_dir, std::ostream* log) {
  if (grid.variants.empty()) throw ValueError("empty ablation grid");
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "runs", ec);
  if (ec) throw IoError("cannot create output directory: " + out_dir);

  const auto render_all = [&](const CorpusSpec& main,
                              const std::vector<CorpusSpec>& extras,
                              const char* role) {
    CorpusSpec spec = main;
    spec.seed = derive_seed(grid.master_seed, role);
    Corpus corpus = Corpus::render_in_memory(spec);
    for (size_t i = 0; i < extras.size(); ++i) {
      CorpusSpec extra = extras[i];
      extra.seed = derive_seed(grid.master_seed,
                               std::string(role) + "-" + std::to_string(i));
      corpus.append(Corpus::render_in_memory(extra));
    }
    return corpus;
  };
  const Corpus train_corpus =
      render_all(grid.train_spec, grid.extra_train_specs, "train-corpus");
  const Corpus test_corpus =
      render_all(grid.test_spec, grid.extra_test_specs, "test-corpus");

  AblationResult result;
  result.rows.resize(grid.variants.size() * grid.seeds);
  auto row_index = [&](size_t vi, size_t si) { return vi * grid.seeds + si; };
  auto run_dir = [&](const std::string& name, size_t si) {
    return (fs::path(out_dir) / "runs" / (name + "_s" + std::to_string(si)))
        .string();
  };

  auto run_one = [&](size_t vi, size_t si) {
    const AblationVariant& variant = grid.variants[vi];
    AblationRow& row = result.rows[row_index(vi, si)];
    row.variant = variant.name;
    row.seed_index = si;
    try {
      ModelConfig cfg = variant.config;
      if (!variant.depends.empty()) {
        const std::string dep_ckpt =
            (fs::path(run_dir(variant.depends, si)) / "checkpoint.bin")
                .string();
        if (cfg.adaptor == AdaptorMode::FixedCnt) cfg.cnt_checkpoint = dep_ckpt;
        if (cfg.adaptor == AdaptorMode::FixedRcg) cfg.rcg_checkpoint = dep_ckpt;
      }
      const uint64_t model_seed =
          derive_seed(grid.master_seed, "model-seed-" + std::to_string(si));
      RflModel model(cfg, model_seed);
      TrainOptions opt;
      opt.epochs = grid.epochs;
      opt.batch = grid.batch;
      opt.seed = derive_seed(grid.master_seed, "train-seed-" + std::to_string(si));
      opt.out_dir = run_dir(variant.name, si);
      TrainResult tr = train(model, train_corpus, opt);
      row.report = evaluate(model, test_corpus);
      row.final_loss = tr.curve.back().loss;
      write_report_csv(row.report,
                       (fs::path(opt.out_dir) / "report.csv").string());
      std::ostringstream cfg_echo;
      for (const auto& [k, v] : model_config_kv(cfg))
        cfg_echo << k << "=" << v << "\n";
      cfg_echo << "epochs=" << grid.epochs << "\nbatch=" << grid.batch
               << "\nseed_index=" << si << "\nmaster_seed=" << grid.master_seed
               << "\n";
      write_text_file((fs::path(opt.out_dir) / "config.txt").string(),
                      cfg_echo.str());
    } catch (const std::exception& e) {
      row.failed = true;
      row.error = e.what();
    }
  };

  // dependency-free variants first, then the fixed modes that consume their
  // checkpoints; each phase may run its jobs in parallel
  for (int phase = 0; phase < 2; ++phase) {
    std::vector<std::pair<size_t, size_t>> jobs;
    for (size_t vi = 0; vi < grid.variants.size(); ++vi)
      for (size_t si = 0; si < grid.seeds; ++si)
        if (grid.variants[vi].depends.empty() == (phase == 0))
          jobs.push_back({vi, si});
    if (jobs.empty()) continue;
    const size_t workers = std::max<size_t>(1, std::min(grid.jobs, jobs.size()));
    if (workers == 1) {
      for (auto& [vi, si] : jobs) {
        if (log)
          *log << "running " << grid.variants[vi].name << " seed " << si
               << "\n";
        run_one(vi, si);
      }
    } else {
      std::atomic<size_t> next{0};
      std::vector<std::thread> pool;
      for (size_t w = 0; w < workers; ++w)
        pool.emplace_back([&]() {
          for (;;) {
            const size_t j = next.fetch_add(1);
            if (j >= jobs.size()) return;
            run_one(jobs[j].first, jobs[j].second);
          }
        });
      for (auto& t : pool) t.join();
    }
  }

  // render results.csv: one row per run plus mean/sd per variant
  std::ostringstream csv;
  csv << "variant,seed,status,word_accuracy,count_correct_ratio,rmse,rel_rmse,"
         "final_loss\n";
  std::ostringstream table;
  char line[256];
  std::snprintf(line, sizeof line, "%-28s %6s %9s %9s %9s %9s\n", "variant",
                "seed", "word_acc", "cnt_acc", "rmse", "relrmse");
  table << line;
  for (size_t vi = 0; vi < grid.variants.size(); ++vi) {
    std::vector<double> wa, ca, rm, rr;
    for (size_t si = 0; si < grid.seeds; ++si) {
      const AblationRow& row = result.rows[row_index(vi, si)];
      if (row.failed) {
        csv << row.variant << "," << si << ",FAILED,,,,,\n";
        std::snprintf(line, sizeof line, "%-28s %6zu %9s %9s %9s %9s\n",
                      row.variant.c_str(), si, "FAILED", "-", "-", "-");
        table << line;
        continue;
      }
      csv << row.variant << "," << si << ",ok," << fmt(row.report.word_accuracy)
          << "," << fmt(row.report.count_correct_ratio) << ","
          << fmt(row.report.rmse) << "," << fmt(row.report.rel_rmse) << ","
          << fmt(row.final_loss) << "\n";
      std::snprintf(line, sizeof line,
                    "%-28s %6zu %9.4f %9.4f %9.4f %9.4f\n", row.variant.c_str(),
                    si, row.report.word_accuracy,
                    row.report.count_correct_ratio, row.report.rmse,
                    row.report.rel_rmse);
      table << line;
      wa.push_back(row.report.word_accuracy);
      ca.push_back(row.report.count_correct_ratio);
      rm.push_back(row.report.rmse);
      rr.push_back(row.report.rel_rmse);
    }
    if (!wa.empty()) {
      const Stats swa = mean_sd(wa), sca = mean_sd(ca), srm = mean_sd(rm),
                  srr = mean_sd(rr);
      csv << grid.variants[vi].name << ",mean,ok," << fmt(swa.mean) << ","
          << fmt(sca.mean) << "," << fmt(srm.mean) << "," << fmt(srr.mean)
          << ",\n";
      csv << grid.variants[vi].name << ",sd,ok," << fmt(swa.sd) << ","
          << fmt(sca.sd) << "," << fmt(srm.sd) << "," << fmt(srr.sd) << ",\n";
      std::snprintf(
          line, sizeof line,
          "%-28s %6s %4.4f+-%.4f  %4.4f+-%.4f  %.4f+-%.4f  %.4f+-%.4f\n",
          grid.variants[vi].name.c_str(), "m+-sd", swa.mean, swa.sd, sca.mean,
          sca.sd, srm.mean, srm.sd, srr.mean, srr.sd);
      table << line;
    }
  }
  result.csv = csv.str();
  result.table = table.str();
  write_text_file((fs::path(out_dir) / "results.csv").string(), result.csv);
  write_text_file((fs::path(out_dir) / "tables.txt").string(), result.table);
  if (log) *log << result.table;
  return result;
}

// ---------------------------------------------------------------------------
// Presets

std::vector<std::string> preset_names() {
  return {"table1", "table2", "table3", "table5", "smoke"};
}

AblationGrid preset_grid(const std::string& name, uint64_t seed) {
  AblationGrid grid;
  grid.master_seed = seed;
  grid.train_spec.count = 5000;
  grid.test_spec.count = 1000;
  grid.seeds = 3;
  grid.epochs = 5;
  grid.batch = 32;

  ModelConfig base;
  base.decoder = DecoderKind::ParalAttnSimplified;

  auto add = [&](const std::string& vname, const ModelConfig& cfg,
                 const std::string& dep = "") {
    grid.variants.push_back({vname, cfg, dep});
  };

  if (name == "table1") {
    // counting designs: {CE, regression} x {with, without class balance}.
    // The corpus is a skewed length mixture (short words dominate) so the
    // count classes are genuinely imbalanced and re-weighting has signal.
    grid.train_spec.count = 3500;
    grid.train_spec.l_min = 1;
    grid.train_spec.l_max = 3;
    grid.test_spec.count = 700;
    grid.test_spec.l_min = 1;
    grid.test_spec.l_max = 3;
    CorpusSpec train_long = grid.train_spec;
    train_long.count = 1500;
    train_long.l_min = 4;
    train_long.l_max = 7;
    CorpusSpec test_long = train_long;
    test_long.count = 300;
    grid.extra_train_specs.push_back(train_long);
    grid.extra_test_specs.push_back(test_long);
    for (CountMode mode : {CountMode::Classification, CountMode::Regression})
      for (bool balance : {false, true}) {
        ModelConfig cfg = base;
        cfg.task = TaskMode::CntOnly;
        cfg.count_mode = mode;
        cfg.count_class_balance = balance;
        const std::string mode_name =
            mode == CountMode::Classification ? "ce" : "regression";
        add(std::string("cnt-") + mode_name + (balance ? "-balance" : ""),
            cfg);
      }
    return grid;
  }
  if (name == "table2") {
    // fusion study, FE off: baseline + {mul,add,concat} per direction
    ModelConfig jt = base;
    jt.adaptor = AdaptorMode::Jt;
    add("jt-baseline", jt);
    for (FusionOp op : {FusionOp::Mul, FusionOp::Add, FusionOp::Concat}) {
      const char* opname = op == FusionOp::Mul   ? "mul"
                           : op == FusionOp::Add ? "add"
                                                 : "concat";
      ModelConfig c2r = base;
      c2r.adaptor = AdaptorMode::UniC2R;
      c2r.fe_enabled = false;
      c2r.fusion_c2r = op;
      add(std::string("c2r-") + opname, c2r);
      ModelConfig r2c = base;
      r2c.adaptor = AdaptorMode::UniR2C;
      r2c.fe_enabled = false;
      r2c.fusion_r2c = op;
      add(std::string("r2c-") + opname, r2c);
    }
    return grid;
  }
  if (name == "table3") {
    // FE effect per direction with the chosen fusion ops
    ModelConfig jt = base;
    jt.adaptor = AdaptorMode::Jt;
    add("jt-baseline", jt);
    for (bool fe : {false, true}) {
      ModelConfig c2r = base;
      c2r.adaptor = AdaptorMode::UniC2R;
      c2r.fe_enabled = fe;
      add(std::string("c2r") + (fe ? "-fe" : "-fusion-only"), c2r);
      ModelConfig r2c = base;
      r2c.adaptor = AdaptorMode::UniR2C;
      r2c.fe_enabled = fe;
      add(std::string("r2c") + (fe ? "-fe" : "-fusion-only"), r2c);
    }
    return grid;
  }
  if (name == "table5") {
    // training strategies
    ModelConfig rcg_only = base;
    rcg_only.task = TaskMode::RcgOnly;
    add("rcg-only", rcg_only);
    ModelConfig cnt_only = base;
    cnt_only.task = TaskMode::CntOnly;
    add("cnt-only", cnt_only);
    ModelConfig jt = base;
    jt.adaptor = AdaptorMode::Jt;
    add("jt", jt);
    ModelConfig fixed_cnt = base;
    fixed_cnt.adaptor = AdaptorMode::FixedCnt;
    fixed_cnt.cnt_checkpoint = "(from dependency)";
    add("fixed-cnt", fixed_cnt, "cnt-only");
    ModelConfig fixed_rcg = base;
    fixed_rcg.adaptor = AdaptorMode::FixedRcg;
    fixed_rcg.rcg_checkpoint = "(from dependency)";
    add("fixed-rcg", fixed_rcg, "rcg-only");
    ModelConfig uni_c2r = base;
    uni_c2r.adaptor = AdaptorMode::UniC2R;
    add("uni-c2r", uni_c2r);
    ModelConfig uni_r2c = base;
    uni_r2c.adaptor = AdaptorMode::UniR2C;
    add("uni-r2c", uni_r2c);
    ModelConfig bi = base;
    bi.adaptor = AdaptorMode::Bidirectional;
    add("bidirectional", bi);
    return grid;
  }
  if (name == "smoke") {
    grid.train_spec.count = 64;
    grid.test_spec.count = 32;
    grid.seeds = 1;
    grid.epochs = 2;
    ModelConfig cfg;
    cfg.channels = 16;
    cfg.hidden = 16;
    cfg.decoder = DecoderKind::Ctc;
    cfg.adaptor = AdaptorMode::Jt;
    add("smoke-jt", cfg);
    return grid;
  }
  throw ValueError("unknown preset: " + name);
}

}  // namespace rfl
