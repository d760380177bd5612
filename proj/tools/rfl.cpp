#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>

#include "rfl/selftest.hpp"
#include "rfl/train.hpp"

namespace fs = std::filesystem;
using namespace rfl;

namespace {

std::map<std::string, std::string> read_kv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw IoError("bad config line " + std::to_string(line_no) + " in " +
                    path);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

void write_kv_file(const std::string& path,
                   const std::map<std::string, std::string>& kv) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  for (const auto& [k, v] : kv) out << k << "=" << v << "\n";
}

// Applies only ModelConfig keys from a key=value file; other keys (run
// settings echoed into config.txt) are ignored so a run's own echo is a
// valid --config input.
void apply_model_keys(ModelConfig& cfg,
                      const std::map<std::string, std::string>& kv) {
  const auto known = model_config_kv(ModelConfig{});
  for (const auto& [k, v] : kv)
    if (known.count(k)) apply_config_kv(cfg, k, v);
}

using Overrides = std::vector<std::pair<std::string, std::string>>;

// Registers the shared model flags on a subcommand; values arrive in
// `overrides` only when actually passed, preserving file < flag precedence.
void add_model_flags(CLI::App* cmd, std::shared_ptr<Overrides> overrides) {
  auto opt = [cmd, overrides](const std::string& flag, const std::string& key,
                              const std::string& desc) {
    auto holder = std::make_shared<std::string>();
    cmd->add_option_function<std::string>(
           flag,
           [overrides, key](const std::string& v) {
             overrides->push_back({key, v});
           },
           desc)
        ->expected(1);
  };
  opt("--decoder", "decoder", "ctc | bilstm-attn | paral-attn-simplified");
  opt("--count-mode", "count_mode", "regression | classification");
  opt("--adaptor", "adaptor",
      "none | jt | fixed-cnt | fixed-rcg | uni-c2r | uni-r2c | bidirectional");
  opt("--fusion-c2r", "fusion_c2r", "mul | add | concat");
  opt("--fusion-r2c", "fusion_r2c", "mul | add | concat");
  opt("--channels", "channels", "branch feature channels C");
  opt("--hidden", "hidden", "recurrent/attention hidden size");
  opt("--lambda", "lambda", "joint loss weight on L_rcg");
  opt("--norm", "norm", "batch | layer");
  opt("--backbone", "backbone", "resnet | vgg");
  opt("--task", "task", "both | rcg | cnt");
  opt("--alphabet", "alphabet", "recognition alphabet");
  opt("--l-max", "l_max", "maximum label length");
  opt("--cnt-checkpoint", "cnt_checkpoint", "checkpoint for fixed-cnt mode");
  opt("--rcg-checkpoint", "rcg_checkpoint", "checkpoint for fixed-rcg mode");
  cmd->add_flag_callback(
      "--fe", [overrides] { overrides->push_back({"fe", "true"}); },
      "enable FE modules");
  cmd->add_flag_callback(
      "--no-fe", [overrides] { overrides->push_back({"fe", "false"}); },
      "disable FE modules (fusion only)");
  cmd->add_flag_callback(
      "--class-balance",
      [overrides] { overrides->push_back({"class_balance", "true"}); },
      "re-weight counting loss by (1 - alpha)");
  cmd->add_flag_callback(
      "--no-class-balance",
      [overrides] { overrides->push_back({"class_balance", "false"}); },
      "plain counting loss");
}

void print_report(const EvalReport& r, std::ostream& out) {
  char line[160];
  std::snprintf(line, sizeof line,
                "n=%zu word_accuracy=%.4f count_correct_ratio=%.4f "
                "rmse=%.5f rel_rmse=%.5f\n",
                r.n, r.word_accuracy, r.count_correct_ratio, r.rmse,
                r.rel_rmse);
  out << line;
  for (const auto& [len, b] : r.per_length) {
    std::snprintf(line, sizeof line,
                  "  len %zu: n=%zu word_acc=%.4f cnt_acc=%.4f\n", len, b.n,
                  double(b.word_correct) / double(b.n),
                  double(b.count_correct) / double(b.n));
    out << line;
  }
}

struct GenerateArgs {
  std::string out;
  CorpusSpec spec;
};

struct TrainArgs {
  std::string corpus, out, config_file, eval_corpus;
  uint64_t seed = 1;
  size_t epochs = 5, batch = 32;
  double lr = 1.0;
  std::shared_ptr<Overrides> overrides = std::make_shared<Overrides>();
};

struct EvalArgs {
  std::string checkpoint, corpus, config_file, out;
  std::shared_ptr<Overrides> overrides = std::make_shared<Overrides>();
};

struct AblateArgs {
  std::string preset = "table5", out;
  uint64_t seed = 1;
  size_t seeds = 0, epochs = 0, jobs = 1;
  size_t train_count = 0, test_count = 0;
  double noise = -1.0;
};

int do_generate(const GenerateArgs& a) {
  auto res = generate_corpus(a.spec, a.out);
  std::map<std::string, std::string> kv;
  kv["alphabet"] = a.spec.alphabet;
  kv["l_min"] = std::to_string(a.spec.l_min);
  kv["l_max"] = std::to_string(a.spec.l_max);
  kv["count"] = std::to_string(a.spec.count);
  kv["img_h"] = std::to_string(a.spec.img_h);
  kv["img_w"] = std::to_string(a.spec.img_w);
  kv["noise"] = std::to_string(a.spec.noise);
  kv["jitter"] = std::to_string(a.spec.jitter);
  kv["scale_min"] = std::to_string(a.spec.scale_min);
  kv["scale_max"] = std::to_string(a.spec.scale_max);
  kv["spacing"] = std::to_string(a.spec.spacing);
  kv["invert"] = a.spec.polarity_invert ? "true" : "false";
  kv["seed"] = std::to_string(a.spec.seed);
  write_kv_file((fs::path(a.out) / "config.txt").string(), kv);
  std::cout << "manifest: " << res.manifest_path << "\n";
  std::cout << "length histogram:";
  for (size_t len = 0; len < res.length_histogram.size(); ++len)
    if (res.length_histogram[len])
      std::cout << " " << len << ":" << res.length_histogram[len];
  std::cout << "\n";
  return 0;
}

int do_train(const TrainArgs& a) {
  Corpus corpus = Corpus::load(a.corpus);
  ModelConfig cfg;
  if (!a.config_file.empty()) apply_model_keys(cfg, read_kv_file(a.config_file));
  for (const auto& [k, v] : *a.overrides) apply_config_kv(cfg, k, v);
  cfg.in_h = corpus.img_h;
  cfg.in_w = corpus.img_w;

  std::error_code ec;
  fs::create_directories(a.out, ec);
  if (ec) throw IoError("cannot create output directory: " + a.out);
  auto echo = model_config_kv(cfg);
  echo["epochs"] = std::to_string(a.epochs);
  echo["batch"] = std::to_string(a.batch);
  echo["seed"] = std::to_string(a.seed);
  echo["lr"] = std::to_string(a.lr);
  echo["corpus"] = a.corpus;
  write_kv_file((fs::path(a.out) / "config.txt").string(), echo);

  RflModel model(cfg, derive_seed(a.seed, "model"));
  TrainOptions opt;
  opt.epochs = a.epochs;
  opt.batch = a.batch;
  opt.seed = derive_seed(a.seed, "train");
  opt.lr = a.lr;
  opt.out_dir = a.out;
  opt.log = &std::cout;
  TrainResult result = train(model, corpus, opt);
  std::cout << "checkpoint: " << result.checkpoint_path << "\n";

  if (!a.eval_corpus.empty()) {
    Corpus test = Corpus::load(a.eval_corpus);
    EvalReport report = evaluate(model, test);
    write_report_csv(report, (fs::path(a.out) / "report.csv").string());
    print_report(report, std::cout);
  }
  return 0;
}

int do_eval(const EvalArgs& a) {
  Corpus corpus = Corpus::load(a.corpus);
  ModelConfig cfg;
  if (!a.config_file.empty()) apply_model_keys(cfg, read_kv_file(a.config_file));
  for (const auto& [k, v] : *a.overrides) apply_config_kv(cfg, k, v);
  cfg.in_h = corpus.img_h;
  cfg.in_w = corpus.img_w;
  // fixed modes load their branch checkpoints at build time; for plain
  // evaluation the full checkpoint replaces every parameter anyway
  if (cfg.adaptor == AdaptorMode::FixedCnt) cfg.cnt_checkpoint = a.checkpoint;
  if (cfg.adaptor == AdaptorMode::FixedRcg) cfg.rcg_checkpoint = a.checkpoint;
  RflModel model(cfg, 0);
  model.load_checkpoint(a.checkpoint);
  EvalReport report = evaluate(model, corpus);
  print_report(report, std::cout);
  if (!a.out.empty()) {
    std::error_code ec;
    fs::create_directories(a.out, ec);
    write_report_csv(report, (fs::path(a.out) / "report.csv").string());
  }
  return 0;
}

int do_ablate(const AblateArgs& a) {
  AblationGrid grid = preset_grid(a.preset, a.seed);
  if (a.seeds) grid.seeds = a.seeds;
  if (a.epochs) grid.epochs = a.epochs;
  if (a.train_count) grid.train_spec.count = a.train_count;
  if (a.test_count) grid.test_spec.count = a.test_count;
  if (a.noise >= 0.0) {
    grid.train_spec.noise = a.noise;
    grid.test_spec.noise = a.noise;
  }
  grid.jobs = a.jobs;
  std::error_code ec;
  fs::create_directories(a.out, ec);
  if (ec) throw IoError("cannot create output directory: " + a.out);
  std::map<std::string, std::string> kv;
  kv["preset"] = a.preset;
  kv["seed"] = std::to_string(a.seed);
  kv["seeds"] = std::to_string(grid.seeds);
  kv["epochs"] = std::to_string(grid.epochs);
  kv["batch"] = std::to_string(grid.batch);
  kv["jobs"] = std::to_string(grid.jobs);
  kv["train_count"] = std::to_string(grid.train_spec.count);
  kv["test_count"] = std::to_string(grid.test_spec.count);
  write_kv_file((fs::path(a.out) / "config.txt").string(), kv);
  run_ablation(grid, a.out, &std::cout);
  std::cout << "results: " << (fs::path(a.out) / "results.csv").string()
            << "\n";
  return 0;
}

int do_selftest() {
  SelftestResult result = run_selftest(std::cout);
  std::cout << (result.ok() ? "selftest: PASS\n" : "selftest: FAIL\n");
  return result.ok() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reciprocal feature learning between text recognition and "
               "character counting, trained on procedural text images"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* cg = app.add_subcommand("generate", "render a labeled text-image corpus");
  cg->add_option("--out", gen.out, "output directory")->required();
  cg->add_option("--count", gen.spec.count, "number of samples");
  cg->add_option("--seed", gen.spec.seed, "corpus seed");
  cg->add_option("--alphabet", gen.spec.alphabet, "characters to render");
  cg->add_option("--l-min", gen.spec.l_min, "minimum text length");
  cg->add_option("--l-max", gen.spec.l_max, "maximum text length");
  cg->add_option("--noise", gen.spec.noise, "additive noise amplitude");
  cg->add_option("--jitter", gen.spec.jitter, "placement jitter in pixels");
  cg->add_option("--scale-min", gen.spec.scale_min, "smallest glyph scale");
  cg->add_option("--scale-max", gen.spec.scale_max, "largest glyph scale");
  cg->add_option("--spacing", gen.spec.spacing, "inter-glyph gap in pixels");
  cg->add_option("--height", gen.spec.img_h, "image height");
  cg->add_option("--width", gen.spec.img_w, "image width");
  cg->add_flag_callback(
      "--invert", [&gen] { gen.spec.polarity_invert = true; },
      "randomly invert polarity");
  cg->add_flag_callback(
      "--no-invert", [&gen] { gen.spec.polarity_invert = false; },
      "keep ink bright");

  TrainArgs tr;
  auto* ct = app.add_subcommand("train", "train a model on a corpus");
  ct->add_option("--corpus", tr.corpus, "manifest.tsv of the training corpus")
      ->required();
  ct->add_option("--out", tr.out, "run output directory")->required();
  ct->add_option("--config", tr.config_file, "key=value model config file");
  ct->add_option("--eval", tr.eval_corpus, "manifest.tsv to evaluate after");
  ct->add_option("--seed", tr.seed, "master seed");
  ct->add_option("--epochs", tr.epochs, "training epochs");
  ct->add_option("--batch", tr.batch, "batch size");
  ct->add_option("--lr", tr.lr, "AdaDelta learning rate");
  add_model_flags(ct, tr.overrides);

  EvalArgs ev;
  auto* ce = app.add_subcommand("eval", "evaluate a checkpoint on a corpus");
  ce->add_option("--checkpoint", ev.checkpoint, "checkpoint.bin")->required();
  ce->add_option("--corpus", ev.corpus, "manifest.tsv")->required();
  ce->add_option("--config", ev.config_file,
                 "config.txt from the training run");
  ce->add_option("--out", ev.out, "directory for report.csv");
  add_model_flags(ce, ev.overrides);

  AblateArgs ab;
  auto* ca = app.add_subcommand("ablate", "run an ablation preset");
  ca->add_option("--preset", ab.preset, "table1 | table2 | table3 | table5 | smoke");
  ca->add_option("--out", ab.out, "output directory")->required();
  ca->add_option("--seed", ab.seed, "master seed");
  ca->add_option("--seeds", ab.seeds, "seeds per variant");
  ca->add_option("--epochs", ab.epochs, "override epochs");
  ca->add_option("--jobs", ab.jobs, "parallel jobs");
  ca->add_option("--train-count", ab.train_count, "override train corpus size");
  ca->add_option("--test-count", ab.test_count, "override test corpus size");
  ca->add_option("--noise", ab.noise, "override corpus noise level");

  auto* cs = app.add_subcommand("selftest", "run the built-in release gate");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (cg->parsed()) return do_generate(gen);
    if (ct->parsed()) return do_train(tr);
    if (ce->parsed()) return do_eval(ev);
    if (ca->parsed()) return do_ablate(ab);
    if (cs->parsed()) return do_selftest();
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
