#pragma once

#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "rfl/model.hpp"
#include "rfl/synth.hpp"

namespace rfl {

struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// AdaDelta with per-parameter running averages of squared gradients and
// squared updates, keyed by parameter name.
class AdaDelta {
 public:
  explicit AdaDelta(double rho = 0.95, double eps = 1e-6, double lr = 1.0)
      : rho_(rho), eps_(eps), lr_(lr) {}

  void step(std::vector<NamedTensor>& params);
  double rho() const { return rho_; }
  double eps() const { return eps_; }
  double lr() const { return lr_; }

 private:
  struct State {
    std::vector<double> avg_sq_grad, avg_sq_update;
  };
  double rho_, eps_, lr_;
  std::map<std::string, State> state_;
};

struct EvalReport {
  size_t n = 0;
  double word_accuracy = 0.0;
  double count_correct_ratio = 0.0;
  double rmse = 0.0;
  double rel_rmse = 0.0;
  struct LengthStats {
    size_t n = 0;
    size_t word_correct = 0;
    size_t count_correct = 0;
    double sq_err = 0.0;
    double rel_sq_err = 0.0;
  };
  std::map<size_t, LengthStats> per_length;
};

EvalReport compute_metrics(const std::vector<std::string>& pred_texts,
                           const std::vector<std::string>& true_texts,
                           const std::vector<int>& pred_counts,
                           const std::vector<int>& true_counts);

std::string report_csv(const EvalReport& report);
void write_report_csv(const EvalReport& report, const std::string& path);

EvalReport evaluate(RflModel& model, const Corpus& corpus, size_t batch = 64);

struct TrainOptions {
  size_t epochs = 5;
  size_t batch = 32;
  uint64_t seed = 1;
  double lr = 1.0;
  double rho = 0.95;
  double eps = 1e-6;
  std::string out_dir;  // when set: checkpoint.bin and curve.csv per epoch
  std::ostream* log = nullptr;
};

struct CurveRow {
  size_t epoch = 0;
  double loss = 0.0, loss_cnt = 0.0, loss_rcg = 0.0;
  size_t ctc_skipped = 0;
};

struct TrainResult {
  std::vector<CurveRow> curve;
  std::string checkpoint_path;
};

std::string curve_csv(const std::vector<CurveRow>& curve);

TrainResult train(RflModel& model, const Corpus& corpus,
                  const TrainOptions& opt);

// ---------------------------------------------------------------------------
// Ablation harness

struct AblationVariant {
  std::string name;
  ModelConfig config;
  std::string depends;  // variant whose checkpoint feeds a fixed mode
};

struct AblationGrid {
  std::vector<AblationVariant> variants;
  CorpusSpec train_spec, test_spec;
  // optional extra slices concatenated onto the corpora (e.g. a skewed
  // length mixture for the class-balance study)
  std::vector<CorpusSpec> extra_train_specs, extra_test_specs;
  size_t seeds = 3;
  size_t epochs = 5;
  size_t batch = 32;
  uint64_t master_seed = 1;
  size_t jobs = 1;
};

struct AblationRow {
  std::string variant;
  size_t seed_index = 0;
  bool failed = false;
  std::string error;
  EvalReport report;
  double final_loss = 0.0;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::string csv;
  std::string table;
};

// Runs every (variant, seed) job, FAILED rows on error, and writes per-run
// outputs plus results.csv and tables.txt under out_dir.
AblationResult run_ablation(const AblationGrid& grid,
                            const std::string& out_dir,
                            std::ostream* log = nullptr);

// Desk-scale grids mirroring the paper's comparison axes; known names:
// table1, table2, table3, table5, smoke.
AblationGrid preset_grid(const std::string& name, uint64_t seed);
std::vector<std::string> preset_names();

}  // namespace rfl
