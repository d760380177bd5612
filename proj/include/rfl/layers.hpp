#pragma once

#include <string>
#include <utility>
#include <vector>

#include "rfl/tensor.hpp"

namespace rfl {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Trainable parameters and persistent (non-trained) buffers of a module tree.
struct ParamBag {
  std::vector<NamedTensor> params;
  std::vector<NamedTensor> buffers;
};

// y = x . w + b with x [m,in], w [in,out], b [out].
Tensor linear_forward(const Tensor& w, const Tensor& b, const Tensor& x);

// Cross-correlation convention. x [b,ic,h,w], w [oc,ic,kh,kw], b [oc].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, size_t sh,
              size_t sw, size_t ph, size_t pw);

// Max pooling; padded cells are ignored. Gradient routes to the first argmax
// in window scan order. Requires ph < kh and pw < kw.
Tensor maxpool2d(const Tensor& x, size_t kh, size_t kw, size_t sh, size_t sw,
                 size_t ph = 0, size_t pw = 0);

class Linear {
 public:
  Linear() = default;
  Linear(size_t in, size_t out, uint64_t seed);
  Tensor forward(const Tensor& x) const { return linear_forward(w, b, x); }
  void collect(const std::string& prefix, ParamBag& bag);

  Tensor w, b;
};

class Conv2dLayer {
 public:
  Conv2dLayer() = default;
  Conv2dLayer(size_t in_ch, size_t out_ch, size_t kh, size_t kw, size_t stride_h,
              size_t stride_w, size_t pad_h, size_t pad_w, uint64_t seed);
  Tensor forward(const Tensor& x) const {
    return conv2d(x, weight, bias, stride_h, stride_w, pad_h, pad_w);
  }
  void collect(const std::string& prefix, ParamBag& bag);

  Tensor weight, bias;
  size_t stride_h = 1, stride_w = 1, pad_h = 0, pad_w = 0;
};

enum class NormVariant { Batch, Layer };

// Per-channel affine normalization. Batch variant normalizes over
// (batch, h, w) per channel with running statistics for inference; layer
// variant normalizes over (c, h, w) per sample and has no running state.
class NormLayer {
 public:
  NormLayer() = default;
  NormLayer(size_t channels, NormVariant variant, double eps = 1e-5,
            double momentum = 0.1);
  Tensor forward(const Tensor& x, bool training);
  void collect(const std::string& prefix, ParamBag& bag);

  Tensor gamma, beta;
  Tensor running_mean, running_var;  // batch variant only
  NormVariant variant = NormVariant::Batch;
  double eps = 1e-5;
  double momentum = 0.1;
};

class LstmCell {
 public:
  LstmCell() = default;
  LstmCell(size_t input, size_t hidden, uint64_t seed);
  // x [b,in], h/c [b,hidden] -> (h', c')
  std::pair<Tensor, Tensor> forward(const Tensor& x, const Tensor& h,
                                    const Tensor& c) const;
  void collect(const std::string& prefix, ParamBag& bag);

  Tensor wx, wh, bias;  // gate order i, f, g, o; forget-gate bias starts at 1
  size_t hidden = 0;
};

class BiLstm {
 public:
  BiLstm() = default;
  BiLstm(size_t input, size_t hidden, uint64_t seed);
  // seq [b,t,f] -> [b,t,2*hidden]
  Tensor forward(const Tensor& seq) const;
  void collect(const std::string& prefix, ParamBag& bag);

  LstmCell fwd, bwd;
  size_t hidden = 0;
};

// One-step attention decoder: additive score over encoder positions from the
// previous recurrent state, context by soft attention, LSTM update, then
// class logits from (state, context).
class AttnDecoderCell {
 public:
  struct State {
    Tensor h, c;
  };
  struct StepOut {
    Tensor logits;  // [b, num_classes]
    State state;
    Tensor attn;  // [b, t]
  };

  AttnDecoderCell() = default;
  AttnDecoderCell(size_t enc_dim, size_t hidden, size_t num_classes,
                  uint64_t seed);

  State initial_state(size_t batch) const;
  // enc_proj = enc . w_e precomputed once per sequence.
  Tensor enc_score_proj(const Tensor& enc) const;
  StepOut step(const Tensor& enc, const State& prev,
               const std::vector<size_t>& prev_symbols) const;
  StepOut step_with_proj(const Tensor& enc, const Tensor& enc_proj,
                         const State& prev,
                         const std::vector<size_t>& prev_symbols) const;
  void collect(const std::string& prefix, ParamBag& bag);

  LstmCell cell;
  Tensor emb;         // [num_classes, emb_dim]
  Tensor w_h, w_e, v; // additive attention parameters
  Linear out_proj;    // [hidden + enc_dim, num_classes]
  size_t num_classes = 0, hidden = 0, enc_dim = 0, emb_dim = 0;
};

}  // namespace rfl
