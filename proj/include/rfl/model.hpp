#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rfl/layers.hpp"
#include "rfl/losses.hpp"

namespace rfl {

enum class DecoderKind { Ctc, BilstmAttn, ParalAttnSimplified };
enum class AdaptorMode {
  None,
  Jt,
  FixedCnt,
  FixedRcg,
  UniC2R,
  UniR2C,
  Bidirectional
};
enum class FusionOp { Mul, Add, Concat };
enum class BackboneKind { Resnet, Vgg };
enum class TaskMode { Both, RcgOnly, CntOnly };
enum class Branch { Cnt, Rcg };

struct ModelConfig {
  size_t in_h = 32, in_w = 100;
  size_t channels = 64;     // branch feature channels C; ladder C/4, C/2, C, C
  size_t shared_depth = 2;  // stages shared by both branches (of 4)
  DecoderKind decoder = DecoderKind::Ctc;
  CountMode count_mode = CountMode::Regression;
  AdaptorMode adaptor = AdaptorMode::None;
  FusionOp fusion_c2r = FusionOp::Mul;  // gate applied multiplicatively
  FusionOp fusion_r2c = FusionOp::Add;
  bool fe_enabled = true;
  size_t hidden = 128;
  double lambda = 1.0;
  NormVariant norm = NormVariant::Batch;
  BackboneKind backbone = BackboneKind::Resnet;
  TaskMode task = TaskMode::Both;
  bool count_class_balance = false;
  std::string alphabet = "abcdefghij";
  size_t l_max = 26;
  std::string cnt_checkpoint;  // required by FixedCnt
  std::string rcg_checkpoint;  // required by FixedRcg

  LabelCoding coding() const { return {alphabet, l_max}; }
  void validate() const;
  size_t feature_width() const { return in_w / 4 + 1; }  // 26 for 100
};

// key=value mirror of ModelConfig (config files and the effective-config echo)
std::map<std::string, std::string> model_config_kv(const ModelConfig& cfg);
void apply_config_kv(ModelConfig& cfg, const std::string& key,
                     const std::string& value);

// conv + norm (+ residual skip) + relu with the stage's pooling plan
class StageBlock {
 public:
  StageBlock() = default;
  StageBlock(size_t in_ch, size_t out_ch, size_t conv_stride, bool residual,
             NormVariant norm_variant, uint64_t seed);
  Tensor forward(const Tensor& x, bool training);
  void collect(const std::string& prefix, ParamBag& bag);

  Conv2dLayer conv;
  NormLayer norm;
  Conv2dLayer proj;  // 1x1 skip projection when shape changes
  bool residual = false, has_proj = false;
  // optional pooling before/after the block, {kh,kw,sh,sw,ph,pw}
  std::array<size_t, 6> pre_pool{0, 0, 0, 0, 0, 0};
  std::array<size_t, 6> post_pool{0, 0, 0, 0, 0, 0};
};

// Feature enhancement gate: sigmoid(relu(norm(conv1x1(u)))), values in (0,1).
class FeModule {
 public:
  FeModule() = default;
  FeModule(size_t channels, NormVariant variant, uint64_t seed);
  Tensor forward(const Tensor& u, bool training);
  void collect(const std::string& prefix, ParamBag& bag);

  Conv2dLayer conv;
  NormLayer norm;
};

Tensor fe_apply(FeModule& fe, const Tensor& u, bool training);

// Eq. 4 directions. A null FE module means the identity path (ablation).
// Concat fusion needs the 1x1 projection back to C.
Tensor adaptor_r2c(const Tensor& u_cnt, const Tensor& u_rcg, FeModule* fe_c,
                   FusionOp fusion, Conv2dLayer* proj, bool training);
Tensor adaptor_c2r(const Tensor& u_cnt, const Tensor& u_rcg, FeModule* fe_r,
                   FusionOp fusion, Conv2dLayer* proj, bool training);

struct BranchFeatures {
  Tensor u_cnt, u_rcg;  // branch encoder outputs
  Tensor v_cnt, v_rcg;  // post-adaptor (equal to u_* in adaptor-free modes)
};

struct ModelOutput {
  BranchFeatures feats;
  Tensor cnt_pred;    // [b] regression or [b, l_max+1] logits
  Tensor rcg_logits;  // [b, steps, classes]; undefined when the branch is skipped
};

// Per-frame argmax, collapse repeats, drop blanks.
std::vector<std::string> decode_ctc_greedy(const Tensor& logits,
                                           const LabelCoding& coding);

class RflModel {
 public:
  RflModel(const ModelConfig& cfg, uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  void set_train(bool training) { training_ = training; }
  bool is_training() const { return training_; }

  Tensor forward_shared(const Tensor& images);
  BranchFeatures forward_branches(const Tensor& shared);
  Tensor cnt_head_forward(const Tensor& v_cnt);
  // Teacher-forced when targets are given (attn-encoded, no EOS);
  // greedy decoding logits otherwise. CTC ignores targets.
  Tensor rcg_head_forward(const Tensor& v_rcg,
                          const std::vector<std::vector<int>>* targets);
  ModelOutput forward(const Tensor& images,
                      const std::vector<std::vector<int>>* targets);

  std::vector<std::string> decode_rcg_greedy(const Tensor& v_rcg);
  std::vector<int> predict_counts(const Tensor& cnt_pred) const;

  void set_branch_frozen(Branch branch, bool frozen);
  bool branch_frozen(Branch branch) const;
  void set_stem_frozen(bool frozen) { frozen_stem_ = frozen; }
  bool stem_frozen() const { return frozen_stem_; }

  ParamBag& bag() { return bag_; }
  const ParamBag& bag() const { return bag_; }
  // Parameters the optimizer may update (frozen groups excluded).
  std::vector<NamedTensor> trainable_params() const;
  size_t census(const std::string& prefix) const;

  void save_checkpoint(const std::string& path) const;
  void load_checkpoint(const std::string& path);
  void load_checkpoint_prefixes(const std::string& path,
                                const std::vector<std::string>& prefixes);

 private:
  Tensor run_branch(std::vector<StageBlock>& stages, const Tensor& x,
                    bool frozen);
  Tensor rcg_sequence(const Tensor& v_rcg) const;  // [b, 26, C]
  Tensor paral_logits(const Tensor& seq);

  ModelConfig cfg_;
  LabelCoding coding_;
  std::vector<StageBlock> stem_;
  std::vector<StageBlock> cnt_stages_, rcg_stages_;
  Linear cnt_head_;
  Linear ctc_head_;
  BiLstm bilstm_;
  AttnDecoderCell attn_;
  Linear paral_score_, paral_cls_;
  Tensor paral_pos_bias_;
  bool has_fe_c_ = false, has_fe_r_ = false;
  FeModule fe_c_, fe_r_;
  bool has_proj_c2r_ = false, has_proj_r2c_ = false;
  Conv2dLayer proj_c2r_, proj_r2c_;
  bool training_ = true;
  bool frozen_cnt_ = false, frozen_rcg_ = false, frozen_stem_ = false;
  ParamBag bag_;
};

}  // namespace rfl
