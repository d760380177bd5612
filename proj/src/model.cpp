#include "rfl/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "rfl/checkpoint.hpp"

namespace rfl {

namespace {

bool adaptor_needs_cnt(AdaptorMode m) {
  return m == AdaptorMode::FixedCnt || m == AdaptorMode::UniC2R ||
         m == AdaptorMode::Bidirectional;
}

bool adaptor_needs_rcg(AdaptorMode m) {
  return m == AdaptorMode::FixedRcg || m == AdaptorMode::UniR2C ||
         m == AdaptorMode::Bidirectional;
}

// The C2R direction gates RCG features with CNT features, so it exists
// exactly when CNT features are consumed; likewise for R2C.
bool adaptor_needs_c2r(AdaptorMode m) { return adaptor_needs_cnt(m); }
bool adaptor_needs_r2c(AdaptorMode m) { return adaptor_needs_rcg(m); }

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": branch feature shapes differ, " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

std::vector<size_t> argmax_rows(const Tensor& t2d) {
  const size_t m = t2d.extent(0), n = t2d.extent(1);
  std::vector<size_t> out(m, 0);
  for (size_t i = 0; i < m; ++i) {
    const double* row = t2d.data().data() + i * n;
    size_t best = 0;
    for (size_t j = 1; j < n; ++j)
      if (row[j] > row[best]) best = j;
    out[i] = best;
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void ModelConfig::validate() const {
  if (in_h != 32) throw ValueError("input height must be 32");
  if (in_w < 20 || in_w % 4 != 0)
    throw ValueError("input width must be a multiple of 4, at least 20");
  if (channels < 8 || channels > 512 || channels % 4 != 0)
    throw ValueError("channels must be in [8,512] and divisible by 4");
  if (shared_depth < 1 || shared_depth > 3)
    throw ValueError("shared_depth must be 1, 2 or 3");
  if (hidden < 4) throw ValueError("hidden size too small");
  if (!(lambda >= 0.0) || !std::isfinite(lambda))
    throw ValueError("lambda must be finite and nonnegative");
  if (alphabet.empty()) throw ValueError("alphabet must be nonempty");
  std::set<char> uniq(alphabet.begin(), alphabet.end());
  if (uniq.size() != alphabet.size())
    throw ValueError("alphabet characters must be distinct");
  if (l_max < 2) throw ValueError("l_max too small");
  if (adaptor == AdaptorMode::FixedCnt && cnt_checkpoint.empty())
    throw ValueError("fixed-cnt mode requires a CNT checkpoint");
  if (adaptor == AdaptorMode::FixedRcg && rcg_checkpoint.empty())
    throw ValueError("fixed-rcg mode requires an RCG checkpoint");
  if (task == TaskMode::RcgOnly &&
      !(adaptor == AdaptorMode::None || adaptor == AdaptorMode::FixedCnt))
    throw ValueError("task rcg requires adaptor none (or fixed-cnt)");
  if (task == TaskMode::CntOnly &&
      !(adaptor == AdaptorMode::None || adaptor == AdaptorMode::FixedRcg))
    throw ValueError("task cnt requires adaptor none (or fixed-rcg)");
}

namespace {

template <typename E>
std::string enum_to_string(E v, const std::vector<std::pair<E, const char*>>& table) {
  for (const auto& [e, s] : table)
    if (e == v) return s;
  throw ValueError("unknown enum value");
}

template <typename E>
E enum_from_string(const std::string& s,
                   const std::vector<std::pair<E, const char*>>& table,
                   const char* what) {
  for (const auto& [e, name] : table)
    if (s == name) return e;
  throw ValueError(std::string("unknown ") + what + " value: " + s);
}

const std::vector<std::pair<DecoderKind, const char*>> kDecoderNames = {
    {DecoderKind::Ctc, "ctc"},
    {DecoderKind::BilstmAttn, "bilstm-attn"},
    {DecoderKind::ParalAttnSimplified, "paral-attn-simplified"}};
const std::vector<std::pair<AdaptorMode, const char*>> kAdaptorNames = {
    {AdaptorMode::None, "none"},         {AdaptorMode::Jt, "jt"},
    {AdaptorMode::FixedCnt, "fixed-cnt"}, {AdaptorMode::FixedRcg, "fixed-rcg"},
    {AdaptorMode::UniC2R, "uni-c2r"},     {AdaptorMode::UniR2C, "uni-r2c"},
    {AdaptorMode::Bidirectional, "bidirectional"}};
const std::vector<std::pair<FusionOp, const char*>> kFusionNames = {
    {FusionOp::Mul, "mul"}, {FusionOp::Add, "add"}, {FusionOp::Concat, "concat"}};
const std::vector<std::pair<CountMode, const char*>> kCountNames = {
    {CountMode::Regression, "regression"},
    {CountMode::Classification, "classification"}};
const std::vector<std::pair<NormVariant, const char*>> kNormNames = {
    {NormVariant::Batch, "batch"}, {NormVariant::Layer, "layer"}};
const std::vector<std::pair<BackboneKind, const char*>> kBackboneNames = {
    {BackboneKind::Resnet, "resnet"}, {BackboneKind::Vgg, "vgg"}};
const std::vector<std::pair<TaskMode, const char*>> kTaskNames = {
    {TaskMode::Both, "both"}, {TaskMode::RcgOnly, "rcg"},
    {TaskMode::CntOnly, "cnt"}};

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::map<std::string, std::string> model_config_kv(const ModelConfig& cfg) {
  std::map<std::string, std::string> kv;
  kv["in_h"] = std::to_string(cfg.in_h);
  kv["in_w"] = std::to_string(cfg.in_w);
  kv["channels"] = std::to_string(cfg.channels);
  kv["shared_depth"] = std::to_string(cfg.shared_depth);
  kv["decoder"] = enum_to_string(cfg.decoder, kDecoderNames);
  kv["count_mode"] = enum_to_string(cfg.count_mode, kCountNames);
  kv["adaptor"] = enum_to_string(cfg.adaptor, kAdaptorNames);
  kv["fusion_c2r"] = enum_to_string(cfg.fusion_c2r, kFusionNames);
  kv["fusion_r2c"] = enum_to_string(cfg.fusion_r2c, kFusionNames);
  kv["fe"] = cfg.fe_enabled ? "true" : "false";
  kv["hidden"] = std::to_string(cfg.hidden);
  kv["lambda"] = fmt_double(cfg.lambda);
  kv["norm"] = enum_to_string(cfg.norm, kNormNames);
  kv["backbone"] = enum_to_string(cfg.backbone, kBackboneNames);
  kv["task"] = enum_to_string(cfg.task, kTaskNames);
  kv["class_balance"] = cfg.count_class_balance ? "true" : "false";
  kv["alphabet"] = cfg.alphabet;
  kv["l_max"] = std::to_string(cfg.l_max);
  kv["cnt_checkpoint"] = cfg.cnt_checkpoint;
  kv["rcg_checkpoint"] = cfg.rcg_checkpoint;
  return kv;
}

void apply_config_kv(ModelConfig& cfg, const std::string& key,
                     const std::string& value) {
  auto to_size = [&](const std::string& v) -> size_t {
    try {
      return std::stoul(v);
    } catch (...) {
      throw ValueError("bad integer for " + key + ": " + v);
    }
  };
  auto to_bool = [&](const std::string& v) -> bool {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ValueError("bad boolean for " + key + ": " + v);
  };
  if (key == "in_h") cfg.in_h = to_size(value);
  else if (key == "in_w") cfg.in_w = to_size(value);
  else if (key == "channels") cfg.channels = to_size(value);
  else if (key == "shared_depth") cfg.shared_depth = to_size(value);
  else if (key == "decoder")
    cfg.decoder = enum_from_string(value, kDecoderNames, "decoder");
  else if (key == "count_mode")
    cfg.count_mode = enum_from_string(value, kCountNames, "count_mode");
  else if (key == "adaptor")
    cfg.adaptor = enum_from_string(value, kAdaptorNames, "adaptor");
  else if (key == "fusion_c2r")
    cfg.fusion_c2r = enum_from_string(value, kFusionNames, "fusion");
  else if (key == "fusion_r2c")
    cfg.fusion_r2c = enum_from_string(value, kFusionNames, "fusion");
  else if (key == "fe") cfg.fe_enabled = to_bool(value);
  else if (key == "hidden") cfg.hidden = to_size(value);
  else if (key == "lambda") {
    try {
      cfg.lambda = std::stod(value);
    } catch (...) {
      throw ValueError("bad lambda: " + value);
    }
  } else if (key == "norm")
    cfg.norm = enum_from_string(value, kNormNames, "norm");
  else if (key == "backbone")
    cfg.backbone = enum_from_string(value, kBackboneNames, "backbone");
  else if (key == "task")
    cfg.task = enum_from_string(value, kTaskNames, "task");
  else if (key == "class_balance") cfg.count_class_balance = to_bool(value);
  else if (key == "alphabet") cfg.alphabet = value;
  else if (key == "l_max") cfg.l_max = to_size(value);
  else if (key == "cnt_checkpoint") cfg.cnt_checkpoint = value;
  else if (key == "rcg_checkpoint") cfg.rcg_checkpoint = value;
  else throw ValueError("unknown config key: " + key);
}

// ---------------------------------------------------------------------------
// StageBlock / FeModule / adaptors

StageBlock::StageBlock(size_t in_ch, size_t out_ch, size_t conv_stride,
                       bool residual_, NormVariant norm_variant, uint64_t seed)
    : conv(in_ch, out_ch, 3, 3, conv_stride, conv_stride, 1, 1,
           derive_seed(seed, "conv")),
      norm(out_ch, norm_variant),
      residual(residual_) {
  has_proj = residual && (in_ch != out_ch || conv_stride != 1);
  if (has_proj)
    proj = Conv2dLayer(in_ch, out_ch, 1, 1, conv_stride, conv_stride, 0, 0,
                       derive_seed(seed, "proj"));
}

Tensor StageBlock::forward(const Tensor& x, bool training) {
  Tensor t = x;
  if (pre_pool[0] != 0)
    t = maxpool2d(t, pre_pool[0], pre_pool[1], pre_pool[2], pre_pool[3],
                  pre_pool[4], pre_pool[5]);
  Tensor y = norm.forward(conv.forward(t), training);
  if (residual) y = add(y, has_proj ? proj.forward(t) : t);
  y = relu(y);
  if (post_pool[0] != 0)
    y = maxpool2d(y, post_pool[0], post_pool[1], post_pool[2], post_pool[3],
                  post_pool[4], post_pool[5]);
  return y;
}

void StageBlock::collect(const std::string& prefix, ParamBag& bag) {
  conv.collect(prefix + ".conv", bag);
  norm.collect(prefix + ".norm", bag);
  if (has_proj) proj.collect(prefix + ".proj", bag);
}

FeModule::FeModule(size_t channels, NormVariant variant, uint64_t seed)
    : conv(channels, channels, 1, 1, 1, 1, 0, 0, derive_seed(seed, "conv")),
      norm(channels, variant) {}

Tensor FeModule::forward(const Tensor& u, bool training) {
  return sigmoid(relu(norm.forward(conv.forward(u), training)));
}

void FeModule::collect(const std::string& prefix, ParamBag& bag) {
  conv.collect(prefix + ".conv", bag);
  norm.collect(prefix + ".norm", bag);
}

Tensor fe_apply(FeModule& fe, const Tensor& u, bool training) {
  return fe.forward(u, training);
}

namespace {

Tensor fuse(const Tensor& transformed, const Tensor& kept, FusionOp op,
            Conv2dLayer* proj, bool transformed_first) {
  switch (op) {
    case FusionOp::Mul:
      return mul(transformed, kept);
    case FusionOp::Add:
      return add(transformed, kept);
    case FusionOp::Concat: {
      if (!proj)
        throw ValueError("concat fusion requires the channel projection");
      Tensor cat = transformed_first ? concat({transformed, kept}, 1)
                                     : concat({kept, transformed}, 1);
      return proj->forward(cat);
    }
  }
  throw ValueError("unknown fusion op");
}

}  // namespace

Tensor adaptor_r2c(const Tensor& u_cnt, const Tensor& u_rcg, FeModule* fe_c,
                   FusionOp fusion, Conv2dLayer* proj, bool training) {
  check_same_shape(u_cnt, u_rcg, "adaptor_r2c");
  Tensor enhanced = fe_c ? fe_c->forward(u_rcg, training) : u_rcg;
  // V_cnt = I(U_cnt) (+) F_c(U_rcg)
  return fuse(enhanced, u_cnt, fusion, proj, /*transformed_first=*/false);
}

Tensor adaptor_c2r(const Tensor& u_cnt, const Tensor& u_rcg, FeModule* fe_r,
                   FusionOp fusion, Conv2dLayer* proj, bool training) {
  check_same_shape(u_cnt, u_rcg, "adaptor_c2r");
  Tensor gate = fe_r ? fe_r->forward(u_cnt, training) : u_cnt;
  // V_rcg = F_r(U_cnt) (x) I(U_rcg)
  return fuse(gate, u_rcg, fusion, proj, /*transformed_first=*/true);
}

// ---------------------------------------------------------------------------
// Model

RflModel::RflModel(const ModelConfig& cfg, uint64_t seed)
    : cfg_(cfg), coding_(cfg.coding()) {
  cfg_.validate();
  const size_t c4 = cfg_.channels / 4, c2 = cfg_.channels / 2,
               c = cfg_.channels;
  const bool res = cfg_.backbone == BackboneKind::Resnet;

  // Stage plan for 32x100 -> C x 1 x 26:
  //   s1 conv/2          -> C/4 x 16 x 50
  //   s2 conv/2          -> C/2 x  8 x 25
  //   s3 pool(2,2)/(2,1)+wpad, conv -> C x 4 x 26
  //   s4 pool(2,1)/(2,1), conv, pool(2,1)/(2,1) -> C x 1 x 26
  auto make_stage = [&](size_t idx, const std::string& prefix) {
    const size_t ins[4] = {1, c4, c2, c};
    const size_t outs[4] = {c4, c2, c, c};
    const size_t stride[4] = {2, 2, 1, 1};
    StageBlock st(ins[idx], outs[idx], stride[idx], res, cfg_.norm,
                  derive_seed(seed, prefix));
    if (idx == 2) st.pre_pool = {2, 2, 2, 1, 0, 1};
    if (idx == 3) {
      st.pre_pool = {2, 1, 2, 1, 0, 0};
      st.post_pool = {2, 1, 2, 1, 0, 0};
    }
    return st;
  };

  for (size_t i = 0; i < cfg_.shared_depth; ++i)
    stem_.push_back(make_stage(i, "stem.s" + std::to_string(i + 1)));
  for (size_t i = cfg_.shared_depth; i < 4; ++i) {
    cnt_stages_.push_back(make_stage(i, "cnt.s" + std::to_string(i + 1)));
    rcg_stages_.push_back(make_stage(i, "rcg.s" + std::to_string(i + 1)));
  }

  const size_t cnt_out =
      cfg_.count_mode == CountMode::Regression ? 1 : cfg_.l_max + 1;
  cnt_head_ = Linear(c, cnt_out, derive_seed(seed, "cnt.head"));

  const size_t k_ctc = coding_.ctc_classes();
  const size_t k_attn = coding_.attn_classes();
  const size_t w_feat = cfg_.feature_width();
  switch (cfg_.decoder) {
    case DecoderKind::Ctc:
      ctc_head_ = Linear(c, k_ctc, derive_seed(seed, "rcg.dec.ctc"));
      break;
    case DecoderKind::BilstmAttn:
      bilstm_ = BiLstm(c, cfg_.hidden, derive_seed(seed, "rcg.dec.bilstm"));
      attn_ = AttnDecoderCell(2 * cfg_.hidden, cfg_.hidden, k_attn,
                              derive_seed(seed, "rcg.dec.attn"));
      break;
    case DecoderKind::ParalAttnSimplified: {
      paral_score_ =
          Linear(c, cfg_.l_max + 1, derive_seed(seed, "rcg.dec.paral.score"));
      // Left-to-right reading prior: step s starts out attending around the
      // column its glyph typically occupies (a glyph spans ~3 feature
      // columns at the 4px feature stride). Learned from there.
      paral_pos_bias_ = Tensor::zeros({w_feat, cfg_.l_max + 1});
      for (size_t t = 0; t < w_feat; ++t)
        for (size_t s = 0; s < cfg_.l_max + 1; ++s) {
          const double center = (double(s) + 0.5) * 3.0;
          const double d = double(t) - center;
          paral_pos_bias_.data()[t * (cfg_.l_max + 1) + s] =
              2.0 * std::exp(-d * d / 8.0);
        }
      paral_pos_bias_.set_requires_grad(true);
      paral_cls_ = Linear(c, k_attn, derive_seed(seed, "rcg.dec.paral.cls"));
      break;
    }
  }

  if (cfg_.fe_enabled && adaptor_needs_c2r(cfg_.adaptor)) {
    has_fe_r_ = true;
    fe_r_ = FeModule(c, cfg_.norm, derive_seed(seed, "adaptor.fe_r"));
  }
  if (cfg_.fe_enabled && adaptor_needs_r2c(cfg_.adaptor)) {
    has_fe_c_ = true;
    fe_c_ = FeModule(c, cfg_.norm, derive_seed(seed, "adaptor.fe_c"));
  }
  if (adaptor_needs_c2r(cfg_.adaptor) && cfg_.fusion_c2r == FusionOp::Concat) {
    has_proj_c2r_ = true;
    proj_c2r_ = Conv2dLayer(2 * c, c, 1, 1, 1, 1, 0, 0,
                            derive_seed(seed, "adaptor.proj_c2r"));
  }
  if (adaptor_needs_r2c(cfg_.adaptor) && cfg_.fusion_r2c == FusionOp::Concat) {
    has_proj_r2c_ = true;
    proj_r2c_ = Conv2dLayer(2 * c, c, 1, 1, 1, 1, 0, 0,
                            derive_seed(seed, "adaptor.proj_r2c"));
  }

  // deterministic registry order: stem, cnt, rcg, adaptor
  for (size_t i = 0; i < stem_.size(); ++i)
    stem_[i].collect("stem.s" + std::to_string(i + 1), bag_);
  for (size_t i = 0; i < cnt_stages_.size(); ++i)
    cnt_stages_[i].collect("cnt.s" + std::to_string(i + 1 + cfg_.shared_depth),
                           bag_);
  cnt_head_.collect("cnt.head", bag_);
  for (size_t i = 0; i < rcg_stages_.size(); ++i)
    rcg_stages_[i].collect("rcg.s" + std::to_string(i + 1 + cfg_.shared_depth),
                           bag_);
  switch (cfg_.decoder) {
    case DecoderKind::Ctc:
      ctc_head_.collect("rcg.dec.ctc", bag_);
      break;
    case DecoderKind::BilstmAttn:
      bilstm_.collect("rcg.dec.bilstm", bag_);
      attn_.collect("rcg.dec.attn", bag_);
      break;
    case DecoderKind::ParalAttnSimplified:
      paral_score_.collect("rcg.dec.paral.score", bag_);
      bag_.params.push_back({"rcg.dec.paral.pos", paral_pos_bias_});
      paral_cls_.collect("rcg.dec.paral.cls", bag_);
      break;
  }
  if (has_fe_r_) fe_r_.collect("adaptor.fe_r", bag_);
  if (has_fe_c_) fe_c_.collect("adaptor.fe_c", bag_);
  if (has_proj_c2r_) proj_c2r_.collect("adaptor.proj_c2r", bag_);
  if (has_proj_r2c_) proj_r2c_.collect("adaptor.proj_r2c", bag_);

  if (cfg_.adaptor == AdaptorMode::FixedCnt) {
    load_checkpoint_prefixes(cfg_.cnt_checkpoint, {"stem.", "cnt."});
    frozen_cnt_ = frozen_stem_ = true;
    cfg_.task = TaskMode::RcgOnly;
  } else if (cfg_.adaptor == AdaptorMode::FixedRcg) {
    load_checkpoint_prefixes(cfg_.rcg_checkpoint, {"stem.", "rcg."});
    frozen_rcg_ = frozen_stem_ = true;
    cfg_.task = TaskMode::CntOnly;
  }
}

Tensor RflModel::run_branch(std::vector<StageBlock>& stages, const Tensor& x,
                            bool frozen) {
  if (!frozen) {
    Tensor t = x;
    for (StageBlock& st : stages) t = st.forward(t, training_);
    return t;
  }
  NoGradGuard ng;
  Tensor t = x;
  for (StageBlock& st : stages) t = st.forward(t, false);
  return t.detach();
}

Tensor RflModel::forward_shared(const Tensor& images) {
  if (images.rank() != 4 || images.extent(1) != 1 ||
      images.extent(2) != cfg_.in_h || images.extent(3) != cfg_.in_w)
    throw ShapeError("expected images [b,1," + std::to_string(cfg_.in_h) +
                     "," + std::to_string(cfg_.in_w) + "], got " +
                     shape_str(images.shape()));
  for (double v : images.data())
    if (v < -1e-9 || v > 1.0 + 1e-9)
      throw ValueError("image values must be normalized to [0,1]");
  return run_branch(stem_, images, frozen_stem_);
}

BranchFeatures RflModel::forward_branches(const Tensor& shared) {
  const bool need_cnt = !(training_ && cfg_.task == TaskMode::RcgOnly &&
                          !adaptor_needs_cnt(cfg_.adaptor));
  const bool need_rcg = !(training_ && cfg_.task == TaskMode::CntOnly &&
                          !adaptor_needs_rcg(cfg_.adaptor));
  BranchFeatures f;
  if (need_cnt) f.u_cnt = run_branch(cnt_stages_, shared, frozen_cnt_);
  if (need_rcg) f.u_rcg = run_branch(rcg_stages_, shared, frozen_rcg_);

  FeModule* fe_r = has_fe_r_ ? &fe_r_ : nullptr;
  FeModule* fe_c = has_fe_c_ ? &fe_c_ : nullptr;
  Conv2dLayer* pj_c2r = has_proj_c2r_ ? &proj_c2r_ : nullptr;
  Conv2dLayer* pj_r2c = has_proj_r2c_ ? &proj_r2c_ : nullptr;

  switch (cfg_.adaptor) {
    case AdaptorMode::None:
    case AdaptorMode::Jt:
      f.v_cnt = f.u_cnt;
      f.v_rcg = f.u_rcg;
      break;
    case AdaptorMode::UniC2R:
    case AdaptorMode::FixedCnt:
      f.v_cnt = f.u_cnt;
      if (f.u_rcg.defined())
        f.v_rcg = adaptor_c2r(f.u_cnt, f.u_rcg, fe_r, cfg_.fusion_c2r, pj_c2r,
                              training_);
      break;
    case AdaptorMode::UniR2C:
    case AdaptorMode::FixedRcg:
      f.v_rcg = f.u_rcg;
      if (f.u_cnt.defined())
        f.v_cnt = adaptor_r2c(f.u_cnt, f.u_rcg, fe_c, cfg_.fusion_r2c, pj_r2c,
                              training_);
      break;
    case AdaptorMode::Bidirectional:
      f.v_cnt = adaptor_r2c(f.u_cnt, f.u_rcg, fe_c, cfg_.fusion_r2c, pj_r2c,
                            training_);
      f.v_rcg = adaptor_c2r(f.u_cnt, f.u_rcg, fe_r, cfg_.fusion_c2r, pj_c2r,
                            training_);
      break;
  }
  return f;
}

Tensor RflModel::cnt_head_forward(const Tensor& v_cnt) {
  Tensor pooled = reduce_mean(v_cnt, {2, 3});  // [b, C]
  Tensor y = cnt_head_.forward(pooled);
  if (cfg_.count_mode == CountMode::Regression)
    return reshape(y, {y.extent(0)});
  return y;
}

Tensor RflModel::rcg_sequence(const Tensor& v_rcg) const {
  const size_t b = v_rcg.extent(0), c = v_rcg.extent(1), w = v_rcg.extent(3);
  if (v_rcg.extent(2) != 1)
    throw ShapeError("recognition features must have height 1");
  return permute(reshape(v_rcg, {b, c, w}), {0, 2, 1});
}

Tensor RflModel::paral_logits(const Tensor& seq) {
  const size_t b = seq.extent(0), w = seq.extent(1), c = seq.extent(2);
  const size_t steps = cfg_.l_max + 1;
  Tensor scores =
      reshape(paral_score_.forward(reshape(seq, {b * w, c})), {b, w, steps});
  scores = add(scores, reshape(paral_pos_bias_, {1, w, steps}));
  Tensor attn = softmax(scores, 1);  // over positions, per step
  Tensor ctx = bmm(permute(attn, {0, 2, 1}), seq);  // [b, steps, C]
  return reshape(paral_cls_.forward(reshape(ctx, {b * steps, c})),
                 {b, steps, coding_.attn_classes()});
}

Tensor RflModel::rcg_head_forward(const Tensor& v_rcg,
                                  const std::vector<std::vector<int>>* targets) {
  Tensor seq = rcg_sequence(v_rcg);
  const size_t b = seq.extent(0), w = seq.extent(1), c = seq.extent(2);
  switch (cfg_.decoder) {
    case DecoderKind::Ctc:
      return reshape(ctc_head_.forward(reshape(seq, {b * w, c})),
                     {b, w, coding_.ctc_classes()});
    case DecoderKind::ParalAttnSimplified:
      return paral_logits(seq);
    case DecoderKind::BilstmAttn:
      break;
  }
  Tensor enc = bilstm_.forward(seq);
  Tensor enc_proj = attn_.enc_score_proj(enc);
  const size_t eos = coding_.eos_index();
  std::vector<Tensor> step_logits;
  if (targets) {
    size_t max_len = 0;
    for (const auto& t : *targets) max_len = std::max(max_len, t.size());
    const size_t steps = max_len + 1;
    std::vector<size_t> prev(b, eos);
    auto state = attn_.initial_state(b);
    for (size_t s = 0; s < steps; ++s) {
      auto out = attn_.step_with_proj(enc, enc_proj, state, prev);
      step_logits.push_back(
          reshape(out.logits, {b, 1, coding_.attn_classes()}));
      state = out.state;
      for (size_t i = 0; i < b; ++i)
        prev[i] = s < (*targets)[i].size() ? size_t((*targets)[i][s]) : eos;
    }
    return concat(step_logits, 1);
  }
  if (training_)
    throw ValueError("attention decoding in training mode requires targets");
  std::vector<size_t> prev(b, eos);
  std::vector<bool> done(b, false);
  auto state = attn_.initial_state(b);
  for (size_t s = 0; s < cfg_.l_max + 1; ++s) {
    auto out = attn_.step_with_proj(enc, enc_proj, state, prev);
    step_logits.push_back(reshape(out.logits, {b, 1, coding_.attn_classes()}));
    state = out.state;
    const auto syms = argmax_rows(out.logits);
    bool all_done = true;
    for (size_t i = 0; i < b; ++i) {
      if (syms[i] == eos) done[i] = true;
      prev[i] = syms[i];
      all_done = all_done && done[i];
    }
    if (all_done) break;
  }
  return concat(step_logits, 1);
}

ModelOutput RflModel::forward(const Tensor& images,
                              const std::vector<std::vector<int>>* targets) {
  ModelOutput out;
  Tensor shared = forward_shared(images);
  out.feats = forward_branches(shared);
  const bool want_cnt = !(training_ && cfg_.task == TaskMode::RcgOnly);
  const bool want_rcg = !(training_ && cfg_.task == TaskMode::CntOnly);
  if (want_cnt && out.feats.v_cnt.defined())
    out.cnt_pred = cnt_head_forward(out.feats.v_cnt);
  if (want_rcg && out.feats.v_rcg.defined())
    out.rcg_logits = rcg_head_forward(out.feats.v_rcg, targets);
  return out;
}

std::vector<std::string> decode_ctc_greedy(const Tensor& logits,
                                           const LabelCoding& coding) {
  if (logits.rank() != 3) throw ShapeError("expected [b,t,classes] logits");
  const size_t b = logits.extent(0), t = logits.extent(1),
               k = logits.extent(2);
  std::vector<std::string> out(b);
  for (size_t i = 0; i < b; ++i) {
    std::vector<int> frames(t);
    for (size_t s = 0; s < t; ++s) {
      const double* row = logits.data().data() + (i * t + s) * k;
      size_t best = 0;
      for (size_t j = 1; j < k; ++j)
        if (row[j] > row[best]) best = j;
      frames[s] = int(best);
    }
    out[i] = coding.decode_ctc_collapse(frames);
  }
  return out;
}

std::vector<std::string> RflModel::decode_rcg_greedy(const Tensor& v_rcg) {
  NoGradGuard ng;
  const size_t b = v_rcg.extent(0);
  if (cfg_.decoder == DecoderKind::Ctc)
    return decode_ctc_greedy(rcg_head_forward(v_rcg, nullptr), coding_);

  if (cfg_.decoder == DecoderKind::ParalAttnSimplified) {
    Tensor logits = rcg_head_forward(v_rcg, nullptr);
    const size_t steps = logits.extent(1), k = logits.extent(2);
    std::vector<std::string> out(b);
    for (size_t i = 0; i < b; ++i) {
      std::vector<int> syms;
      for (size_t s = 0; s < steps && syms.size() < cfg_.l_max; ++s) {
        const double* row = logits.data().data() + (i * steps + s) * k;
        size_t best = 0;
        for (size_t j = 1; j < k; ++j)
          if (row[j] > row[best]) best = j;
        if (best == coding_.eos_index()) break;
        syms.push_back(int(best));
      }
      out[i] = coding_.decode_attn(syms);
    }
    return out;
  }

  // bilstm-attn: batched greedy until EOS or the step cap
  const bool was_training = training_;
  training_ = false;
  Tensor logits = rcg_head_forward(v_rcg, nullptr);
  training_ = was_training;
  const size_t steps = logits.extent(1), k = logits.extent(2);
  std::vector<std::string> out(b);
  for (size_t i = 0; i < b; ++i) {
    std::vector<int> syms;
    for (size_t s = 0; s < steps && syms.size() < cfg_.l_max; ++s) {
      const double* row = logits.data().data() + (i * steps + s) * k;
      size_t best = 0;
      for (size_t j = 1; j < k; ++j)
        if (row[j] > row[best]) best = j;
      if (best == coding_.eos_index()) break;
      syms.push_back(int(best));
    }
    out[i] = coding_.decode_attn(syms);
  }
  return out;
}

std::vector<int> RflModel::predict_counts(const Tensor& cnt_pred) const {
  std::vector<int> out;
  if (cfg_.count_mode == CountMode::Regression) {
    if (cnt_pred.rank() != 1)
      throw ShapeError("regression count prediction must be [b]");
    for (double v : cnt_pred.data()) {
      double r = std::round(v);  // half away from zero
      r = std::clamp(r, 0.0, double(cfg_.l_max));
      out.push_back(int(r));
    }
    return out;
  }
  const size_t b = cnt_pred.extent(0), k = cnt_pred.extent(1);
  for (size_t i = 0; i < b; ++i) {
    const double* row = cnt_pred.data().data() + i * k;
    size_t best = 0;
    for (size_t j = 1; j < k; ++j)
      if (row[j] > row[best]) best = j;
    out.push_back(int(best));
  }
  return out;
}

void RflModel::set_branch_frozen(Branch branch, bool frozen) {
  if (branch == Branch::Cnt)
    frozen_cnt_ = frozen;
  else
    frozen_rcg_ = frozen;
}

bool RflModel::branch_frozen(Branch branch) const {
  return branch == Branch::Cnt ? frozen_cnt_ : frozen_rcg_;
}

std::vector<NamedTensor> RflModel::trainable_params() const {
  std::vector<NamedTensor> out;
  for (const NamedTensor& p : bag_.params) {
    if (frozen_stem_ && p.name.rfind("stem.", 0) == 0) continue;
    if (frozen_cnt_ && p.name.rfind("cnt.", 0) == 0) continue;
    if (frozen_rcg_ && p.name.rfind("rcg.", 0) == 0) continue;
    out.push_back(p);
  }
  return out;
}

size_t RflModel::census(const std::string& prefix) const {
  size_t n = 0;
  for (const NamedTensor& p : bag_.params)
    if (p.name.rfind(prefix, 0) == 0) n += p.tensor.numel();
  return n;
}

void RflModel::save_checkpoint(const std::string& path) const {
  std::vector<NamedTensor> entries = bag_.params;
  entries.insert(entries.end(), bag_.buffers.begin(), bag_.buffers.end());
  write_checkpoint(path, entries);
}

void RflModel::load_checkpoint(const std::string& path) {
  const auto entries = read_checkpoint(path);
  std::map<std::string, const Tensor*> have;
  for (const auto& e : entries) have[e.name] = &e.tensor;
  auto restore = [&](std::vector<NamedTensor>& dest) {
    for (NamedTensor& p : dest) {
      auto it = have.find(p.name);
      if (it == have.end())
        throw IoError("checkpoint missing tensor: " + p.name);
      if (it->second->shape() != p.tensor.shape())
        throw IoError("checkpoint shape mismatch for " + p.name);
      p.tensor.data() = it->second->data();
    }
  };
  restore(bag_.params);
  restore(bag_.buffers);
}

void RflModel::load_checkpoint_prefixes(
    const std::string& path, const std::vector<std::string>& prefixes) {
  const auto entries = read_checkpoint(path);
  std::map<std::string, const Tensor*> have;
  for (const auto& e : entries) have[e.name] = &e.tensor;
  auto matches = [&](const std::string& name) {
    for (const std::string& pre : prefixes)
      if (name.rfind(pre, 0) == 0) return true;
    return false;
  };
  auto restore = [&](std::vector<NamedTensor>& dest) {
    for (NamedTensor& p : dest) {
      if (!matches(p.name)) continue;
      auto it = have.find(p.name);
      if (it == have.end())
        throw IoError("checkpoint missing tensor: " + p.name);
      if (it->second->shape() != p.tensor.shape())
        throw IoError("checkpoint shape mismatch for " + p.name);
      p.tensor.data() = it->second->data();
    }
  };
  restore(bag_.params);
  restore(bag_.buffers);
}

}  // namespace rfl
