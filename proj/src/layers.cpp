#include "rfl/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "rfl/gemm.hpp"
#include "rfl/rng.hpp"

namespace rfl {

Tensor linear_forward(const Tensor& w, const Tensor& b, const Tensor& x) {
  Tensor y = matmul(x, w);
  return add(y, reshape(b, {1, b.numel()}));
}

// ---------------------------------------------------------------------------
// conv2d

namespace {

struct ConvDims {
  size_t b, ic, h, w, oc, kh, kw, oh, ow;
};

ConvDims conv_dims(const Tensor& x, const Tensor& weight, size_t sh, size_t sw,
                   size_t ph, size_t pw) {
  if (x.rank() != 4 || weight.rank() != 4)
    throw ShapeError("conv2d expects x [b,c,h,w] and w [oc,ic,kh,kw]");
  ConvDims d;
  d.b = x.extent(0);
  d.ic = x.extent(1);
  d.h = x.extent(2);
  d.w = x.extent(3);
  d.oc = weight.extent(0);
  d.kh = weight.extent(2);
  d.kw = weight.extent(3);
  if (weight.extent(1) != d.ic)
    throw ShapeError("conv2d channel mismatch: input has " +
                     std::to_string(d.ic) + ", kernel expects " +
                     std::to_string(weight.extent(1)));
  if (d.h + 2 * ph < d.kh || d.w + 2 * pw < d.kw)
    throw ShapeError("conv2d kernel larger than padded input");
  d.oh = (d.h + 2 * ph - d.kh) / sh + 1;
  d.ow = (d.w + 2 * pw - d.kw) / sw + 1;
  return d;
}

// cols [ic*kh*kw, oh*ow] for one image.
void im2col(const double* img, const ConvDims& d, size_t sh, size_t sw,
            size_t ph, size_t pw, double* cols) {
  const size_t ohw = d.oh * d.ow;
  for (size_t c = 0; c < d.ic; ++c) {
    const double* plane = img + c * d.h * d.w;
    for (size_t ki = 0; ki < d.kh; ++ki) {
      for (size_t kj = 0; kj < d.kw; ++kj) {
        double* row = cols + ((c * d.kh + ki) * d.kw + kj) * ohw;
        for (size_t oy = 0; oy < d.oh; ++oy) {
          const long iy = long(oy * sh + ki) - long(ph);
          const bool y_ok = iy >= 0 && iy < long(d.h);
          for (size_t ox = 0; ox < d.ow; ++ox) {
            const long ix = long(ox * sw + kj) - long(pw);
            row[oy * d.ow + ox] = (y_ok && ix >= 0 && ix < long(d.w))
                                      ? plane[size_t(iy) * d.w + size_t(ix)]
                                      : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvDims& d, size_t sh, size_t sw,
                size_t ph, size_t pw, double* img) {
  const size_t ohw = d.oh * d.ow;
  for (size_t c = 0; c < d.ic; ++c) {
    double* plane = img + c * d.h * d.w;
    for (size_t ki = 0; ki < d.kh; ++ki) {
      for (size_t kj = 0; kj < d.kw; ++kj) {
        const double* row = cols + ((c * d.kh + ki) * d.kw + kj) * ohw;
        for (size_t oy = 0; oy < d.oh; ++oy) {
          const long iy = long(oy * sh + ki) - long(ph);
          if (iy < 0 || iy >= long(d.h)) continue;
          for (size_t ox = 0; ox < d.ow; ++ox) {
            const long ix = long(ox * sw + kj) - long(pw);
            if (ix < 0 || ix >= long(d.w)) continue;
            plane[size_t(iy) * d.w + size_t(ix)] += row[oy * d.ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              size_t sh, size_t sw, size_t ph, size_t pw) {
  if (sh == 0 || sw == 0) throw ShapeError("conv2d stride must be positive");
  const ConvDims d = conv_dims(x, weight, sh, sw, ph, pw);
  if (bias.defined() && bias.numel() != d.oc)
    throw ShapeError("conv2d bias size mismatch");
  Tensor out = make_tensor({d.b, d.oc, d.oh, d.ow},
                           promote_dtype({&x, &weight}));
  const size_t kk = d.ic * d.kh * d.kw;
  const size_t ohw = d.oh * d.ow;
  std::vector<double> cols(kk * ohw);
  for (size_t i = 0; i < d.b; ++i) {
    im2col(x.data().data() + i * d.ic * d.h * d.w, d, sh, sw, ph, pw,
           cols.data());
    double* y = out.data().data() + i * d.oc * ohw;
    gemm_nn(d.oc, ohw, kk, weight.data().data(), cols.data(), y, false);
    if (bias.defined())
      for (size_t c = 0; c < d.oc; ++c) {
        const double bv = bias.data()[c];
        for (size_t j = 0; j < ohw; ++j) y[c * ohw + j] += bv;
      }
  }
  quantize_f32(out);
  register_op(out, {&x, &weight, &bias},
              [xi = x.ptr(), wi = weight.ptr(), bi = bias.ptr(),
               oi = out.ptr(), d, sh, sw, ph, pw, kk, ohw]() {
                std::vector<double> cols(kk * ohw);
                std::vector<double> dcols(kk * ohw);
                for (size_t i = 0; i < d.b; ++i) {
                  const double* g = oi->grad.data() + i * d.oc * ohw;
                  if (bi && bi->requires_grad)
                    for (size_t c = 0; c < d.oc; ++c)
                      for (size_t j = 0; j < ohw; ++j)
                        bi->grad[c] += g[c * ohw + j];
                  if (wi->requires_grad) {
                    im2col(xi->data.data() + i * d.ic * d.h * d.w, d, sh, sw,
                           ph, pw, cols.data());
                    gemm_nt(d.oc, kk, ohw, g, cols.data(), wi->grad.data(),
                            true);
                  }
                  if (xi->requires_grad) {
                    gemm_tn(kk, ohw, d.oc, wi->data.data(), g, dcols.data(),
                            false);
                    col2im_add(dcols.data(), d, sh, sw, ph, pw,
                               xi->grad.data() + i * d.ic * d.h * d.w);
                  }
                }
              });
  return out;
}

Tensor maxpool2d(const Tensor& x, size_t kh, size_t kw, size_t sh, size_t sw,
                 size_t ph, size_t pw) {
  if (x.rank() != 4) throw ShapeError("maxpool2d expects [b,c,h,w]");
  if (kh == 0 || kw == 0 || sh == 0 || sw == 0)
    throw ShapeError("maxpool2d kernel and stride must be positive");
  if (ph >= kh || pw >= kw)
    throw ShapeError("maxpool2d padding must be smaller than the kernel");
  const size_t b = x.extent(0), c = x.extent(1), h = x.extent(2),
               w = x.extent(3);
  if (h + 2 * ph < kh || w + 2 * pw < kw)
    throw ShapeError("maxpool2d kernel larger than padded input");
  const size_t oh = (h + 2 * ph - kh) / sh + 1;
  const size_t ow = (w + 2 * pw - kw) / sw + 1;
  Tensor out = make_tensor({b, c, oh, ow}, x.dtype());
  auto argmax = std::make_shared<std::vector<size_t>>(out.numel());
  const auto& xd = x.data();
  auto& od = out.data();
  size_t oix = 0;
  for (size_t i = 0; i < b; ++i)
    for (size_t ch = 0; ch < c; ++ch) {
      const double* plane = xd.data() + (i * c + ch) * h * w;
      const size_t plane_off = (i * c + ch) * h * w;
      for (size_t oy = 0; oy < oh; ++oy)
        for (size_t ox = 0; ox < ow; ++ox, ++oix) {
          double best = -std::numeric_limits<double>::infinity();
          size_t best_at = 0;
          bool found = false;
          for (size_t ki = 0; ki < kh; ++ki) {
            const long iy = long(oy * sh + ki) - long(ph);
            if (iy < 0 || iy >= long(h)) continue;
            for (size_t kj = 0; kj < kw; ++kj) {
              const long ix = long(ox * sw + kj) - long(pw);
              if (ix < 0 || ix >= long(w)) continue;
              const double v = plane[size_t(iy) * w + size_t(ix)];
              if (!found || v > best) {
                best = v;
                best_at = plane_off + size_t(iy) * w + size_t(ix);
                found = true;
              }
            }
          }
          od[oix] = best;
          (*argmax)[oix] = best_at;
        }
    }
  register_op(out, {&x}, [xi = x.ptr(), oi = out.ptr(), argmax]() {
    if (!xi->requires_grad) return;
    for (size_t i = 0; i < oi->grad.size(); ++i)
      xi->grad[(*argmax)[i]] += oi->grad[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Layers

Linear::Linear(size_t in, size_t out, uint64_t seed) {
  Rng rw(derive_seed(seed, "w"));
  w = Tensor::he_normal({in, out}, in, rw).set_requires_grad(true);
  b = Tensor::zeros({out}).set_requires_grad(true);
}

void Linear::collect(const std::string& prefix, ParamBag& bag) {
  bag.params.push_back({prefix + ".w", w});
  bag.params.push_back({prefix + ".b", b});
}

Conv2dLayer::Conv2dLayer(size_t in_ch, size_t out_ch, size_t kh, size_t kw,
                         size_t stride_h_, size_t stride_w_, size_t pad_h_,
                         size_t pad_w_, uint64_t seed)
    : stride_h(stride_h_), stride_w(stride_w_), pad_h(pad_h_), pad_w(pad_w_) {
  Rng rw(derive_seed(seed, "w"));
  weight = Tensor::he_normal({out_ch, in_ch, kh, kw}, in_ch * kh * kw, rw)
               .set_requires_grad(true);
  bias = Tensor::zeros({out_ch}).set_requires_grad(true);
}

void Conv2dLayer::collect(const std::string& prefix, ParamBag& bag) {
  bag.params.push_back({prefix + ".w", weight});
  bag.params.push_back({prefix + ".b", bias});
}

NormLayer::NormLayer(size_t channels, NormVariant variant_, double eps_,
                     double momentum_)
    : variant(variant_), eps(eps_), momentum(momentum_) {
  gamma = Tensor::ones({channels}).set_requires_grad(true);
  beta = Tensor::zeros({channels}).set_requires_grad(true);
  if (variant == NormVariant::Batch) {
    running_mean = Tensor::zeros({channels});
    running_var = Tensor::ones({channels});
  }
}

namespace {

// Fused training-mode batch norm: one output allocation and a closed-form
// backward instead of the op-by-op composition.
Tensor batch_norm_train(const Tensor& x, const Tensor& gamma,
                        const Tensor& beta, double eps,
                        std::vector<double>* mean_out,
                        std::vector<double>* var_out) {
  const size_t b = x.extent(0), c = x.extent(1), h = x.extent(2),
               w = x.extent(3);
  const size_t hw = h * w, n = b * hw;
  auto mean = std::make_shared<std::vector<double>>(c, 0.0);
  auto invstd = std::make_shared<std::vector<double>>(c, 0.0);
  std::vector<double> var(c, 0.0);
  const double* xd = x.data().data();
  for (size_t i = 0; i < b; ++i)
    for (size_t ch = 0; ch < c; ++ch) {
      const double* plane = xd + (i * c + ch) * hw;
      double s = 0.0;
      for (size_t p = 0; p < hw; ++p) s += plane[p];
      (*mean)[ch] += s;
    }
  for (size_t ch = 0; ch < c; ++ch) (*mean)[ch] /= double(n);
  for (size_t i = 0; i < b; ++i)
    for (size_t ch = 0; ch < c; ++ch) {
      const double* plane = xd + (i * c + ch) * hw;
      const double m = (*mean)[ch];
      double s = 0.0;
      for (size_t p = 0; p < hw; ++p) s += (plane[p] - m) * (plane[p] - m);
      var[ch] += s;
    }
  for (size_t ch = 0; ch < c; ++ch) {
    var[ch] /= double(n);
    (*invstd)[ch] = 1.0 / std::sqrt(var[ch] + eps);
  }
  if (mean_out) *mean_out = *mean;
  if (var_out) *var_out = var;

  Tensor out = make_tensor(x.shape(), promote_dtype({&x, &gamma}));
  double* od = out.data().data();
  const double* gd = gamma.data().data();
  const double* bd = beta.data().data();
  for (size_t i = 0; i < b; ++i)
    for (size_t ch = 0; ch < c; ++ch) {
      const double* plane = xd + (i * c + ch) * hw;
      double* op = od + (i * c + ch) * hw;
      const double m = (*mean)[ch], is = (*invstd)[ch], g = gd[ch],
                   bb = bd[ch];
      for (size_t p = 0; p < hw; ++p) op[p] = g * (plane[p] - m) * is + bb;
    }
  quantize_f32(out);
  register_op(out, {&x, &gamma, &beta},
              [xi = x.ptr(), gi = gamma.ptr(), bi = beta.ptr(),
               oi = out.ptr(), mean, invstd, b, c, hw, n]() {
                const double* xd = xi->data.data();
                const double* gd = gi->data.data();
                const double* og = oi->grad.data();
                std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
                for (size_t i = 0; i < b; ++i)
                  for (size_t ch = 0; ch < c; ++ch) {
                    const double* plane = xd + (i * c + ch) * hw;
                    const double* gr = og + (i * c + ch) * hw;
                    const double m = (*mean)[ch], is = (*invstd)[ch];
                    double s = 0.0, sx = 0.0;
                    for (size_t p = 0; p < hw; ++p) {
                      s += gr[p];
                      sx += gr[p] * (plane[p] - m) * is;
                    }
                    sum_g[ch] += s;
                    sum_gx[ch] += sx;
                  }
                if (bi->requires_grad)
                  for (size_t ch = 0; ch < c; ++ch) bi->grad[ch] += sum_g[ch];
                if (gi->requires_grad)
                  for (size_t ch = 0; ch < c; ++ch) gi->grad[ch] += sum_gx[ch];
                if (!xi->requires_grad) return;
                for (size_t i = 0; i < b; ++i)
                  for (size_t ch = 0; ch < c; ++ch) {
                    const double* plane = xd + (i * c + ch) * hw;
                    const double* gr = og + (i * c + ch) * hw;
                    double* dst = xi->grad.data() + (i * c + ch) * hw;
                    const double m = (*mean)[ch], is = (*invstd)[ch];
                    const double k1 = sum_g[ch] / double(n);
                    const double k2 = sum_gx[ch] / double(n);
                    const double gs = gd[ch] * is;
                    for (size_t p = 0; p < hw; ++p) {
                      const double xh = (plane[p] - m) * is;
                      dst[p] += gs * (gr[p] - k1 - xh * k2);
                    }
                  }
              });
  return out;
}

}  // namespace

Tensor NormLayer::forward(const Tensor& x, bool training) {
  if (x.rank() != 4) throw ShapeError("NormLayer expects [b,c,h,w]");
  const size_t c = x.extent(1);
  if (c != gamma.numel()) throw ShapeError("NormLayer channel mismatch");
  if (variant == NormVariant::Layer) {
    const Tensor g4 = reshape(gamma, {1, c, 1, 1});
    const Tensor b4 = reshape(beta, {1, c, 1, 1});
    Tensor mean = reduce_mean(x, {1, 2, 3}, true);
    Tensor diff = sub(x, mean);
    Tensor var = reduce_mean(mul(diff, diff), {1, 2, 3}, true);
    Tensor xhat = div(diff, sqrt(add(var, eps)));
    return add(mul(xhat, g4), b4);
  }
  if (training) {
    std::vector<double> mean, var;
    Tensor out = batch_norm_train(x, gamma, beta, eps, &mean, &var);
    {
      NoGradGuard ng;
      const size_t n = x.extent(0) * x.extent(2) * x.extent(3);
      const double correction = n > 1 ? double(n) / double(n - 1) : 1.0;
      for (size_t i = 0; i < c; ++i) {
        running_mean.data()[i] =
            (1.0 - momentum) * running_mean.data()[i] + momentum * mean[i];
        running_var.data()[i] = (1.0 - momentum) * running_var.data()[i] +
                                momentum * var[i] * correction;
      }
    }
    return out;
  }
  const Tensor g4 = reshape(gamma, {1, c, 1, 1});
  const Tensor b4 = reshape(beta, {1, c, 1, 1});
  const Tensor rm = reshape(running_mean.detach(), {1, c, 1, 1});
  const Tensor rv = reshape(running_var.detach(), {1, c, 1, 1});
  Tensor xhat = div(sub(x, rm), sqrt(add(rv, eps)));
  return add(mul(xhat, g4), b4);
}

void NormLayer::collect(const std::string& prefix, ParamBag& bag) {
  bag.params.push_back({prefix + ".gamma", gamma});
  bag.params.push_back({prefix + ".beta", beta});
  if (variant == NormVariant::Batch) {
    bag.buffers.push_back({prefix + ".running_mean", running_mean});
    bag.buffers.push_back({prefix + ".running_var", running_var});
  }
}

LstmCell::LstmCell(size_t input, size_t hidden_, uint64_t seed)
    : hidden(hidden_) {
  Rng rx(derive_seed(seed, "wx"));
  Rng rh(derive_seed(seed, "wh"));
  wx = Tensor::he_normal({input, 4 * hidden}, input, rx).set_requires_grad(true);
  wh = Tensor::he_normal({hidden, 4 * hidden}, hidden, rh)
           .set_requires_grad(true);
  Tensor b = Tensor::zeros({4 * hidden});
  for (size_t i = hidden; i < 2 * hidden; ++i) b.data()[i] = 1.0;  // forget
  bias = b.set_requires_grad(true);
}

std::pair<Tensor, Tensor> LstmCell::forward(const Tensor& x, const Tensor& h,
                                            const Tensor& c) const {
  Tensor z = add(add(matmul(x, wx), matmul(h, wh)),
                 reshape(bias, {1, 4 * hidden}));
  Tensor i = sigmoid(slice(z, 1, 0, hidden));
  Tensor f = sigmoid(slice(z, 1, hidden, hidden));
  Tensor g = tanh(slice(z, 1, 2 * hidden, hidden));
  Tensor o = sigmoid(slice(z, 1, 3 * hidden, hidden));
  Tensor c_next = add(mul(f, c), mul(i, g));
  Tensor h_next = mul(o, tanh(c_next));
  return {h_next, c_next};
}

void LstmCell::collect(const std::string& prefix, ParamBag& bag) {
  bag.params.push_back({prefix + ".wx", wx});
  bag.params.push_back({prefix + ".wh", wh});
  bag.params.push_back({prefix + ".b", bias});
}

BiLstm::BiLstm(size_t input, size_t hidden_, uint64_t seed)
    : fwd(input, hidden_, derive_seed(seed, "fwd")),
      bwd(input, hidden_, derive_seed(seed, "bwd")),
      hidden(hidden_) {}

Tensor BiLstm::forward(const Tensor& seq) const {
  if (seq.rank() != 3) throw ShapeError("BiLstm expects [b,t,f]");
  const size_t b = seq.extent(0), t = seq.extent(1), f = seq.extent(2);
  if (t == 0) throw ShapeError("BiLstm requires a nonempty sequence");
  std::vector<Tensor> steps(t);
  for (size_t s = 0; s < t; ++s) steps[s] = reshape(slice(seq, 1, s, 1), {b, f});

  std::vector<Tensor> hs_fwd(t), hs_bwd(t);
  Tensor h = Tensor::zeros({b, hidden}), c = Tensor::zeros({b, hidden});
  for (size_t s = 0; s < t; ++s) {
    auto [hn, cn] = fwd.forward(steps[s], h, c);
    hs_fwd[s] = hn;
    h = hn;
    c = cn;
  }
  h = Tensor::zeros({b, hidden});
  c = Tensor::zeros({b, hidden});
  for (size_t s = t; s-- > 0;) {
    auto [hn, cn] = bwd.forward(steps[s], h, c);
    hs_bwd[s] = hn;
    h = hn;
    c = cn;
  }
  std::vector<Tensor> rows(t);
  for (size_t s = 0; s < t; ++s)
    rows[s] = reshape(concat({hs_fwd[s], hs_bwd[s]}, 1), {b, 1, 2 * hidden});
  return concat(rows, 1);
}

void BiLstm::collect(const std::string& prefix, ParamBag& bag) {
  fwd.collect(prefix + ".fwd", bag);
  bwd.collect(prefix + ".bwd", bag);
}

AttnDecoderCell::AttnDecoderCell(size_t enc_dim_, size_t hidden_,
                                 size_t num_classes_, uint64_t seed)
    : cell(hidden_ + enc_dim_, hidden_, derive_seed(seed, "cell")),
      out_proj(hidden_ + enc_dim_, num_classes_, derive_seed(seed, "out")),
      num_classes(num_classes_),
      hidden(hidden_),
      enc_dim(enc_dim_),
      emb_dim(hidden_) {
  Rng re(derive_seed(seed, "emb"));
  Rng rh(derive_seed(seed, "w_h"));
  Rng rv(derive_seed(seed, "v"));
  Rng rw(derive_seed(seed, "w_e"));
  emb = Tensor::he_normal({num_classes, emb_dim}, emb_dim, re)
            .set_requires_grad(true);
  w_h = Tensor::he_normal({hidden, hidden}, hidden, rh).set_requires_grad(true);
  w_e = Tensor::he_normal({enc_dim, hidden}, enc_dim, rw)
            .set_requires_grad(true);
  v = Tensor::he_normal({hidden, 1}, hidden, rv).set_requires_grad(true);
}

AttnDecoderCell::State AttnDecoderCell::initial_state(size_t batch) const {
  return {Tensor::zeros({batch, hidden}), Tensor::zeros({batch, hidden})};
}

Tensor AttnDecoderCell::enc_score_proj(const Tensor& enc) const {
  const size_t b = enc.extent(0), t = enc.extent(1), e = enc.extent(2);
  if (e != enc_dim) throw ShapeError("attention encoder dim mismatch");
  return reshape(matmul(reshape(enc, {b * t, e}), w_e), {b, t, hidden});
}

AttnDecoderCell::StepOut AttnDecoderCell::step(
    const Tensor& enc, const State& prev,
    const std::vector<size_t>& prev_symbols) const {
  return step_with_proj(enc, enc_score_proj(enc), prev, prev_symbols);
}

AttnDecoderCell::StepOut AttnDecoderCell::step_with_proj(
    const Tensor& enc, const Tensor& enc_proj, const State& prev,
    const std::vector<size_t>& prev_symbols) const {
  const size_t b = enc.extent(0), t = enc.extent(1);
  if (prev_symbols.size() != b)
    throw ShapeError("one previous symbol per batch row required");
  for (size_t s : prev_symbols)
    if (s >= num_classes)
      throw ValueError("invalid symbol index " + std::to_string(s));

  Tensor hp = reshape(matmul(prev.h, w_h), {b, 1, hidden});
  Tensor th = tanh(add(enc_proj, hp));
  Tensor scores = reshape(matmul(reshape(th, {b * t, hidden}), v), {b, t});
  Tensor attn = softmax(scores, 1);
  Tensor ctx = reduce_sum(mul(reshape(attn, {b, t, 1}), enc), {1});  // [b,e]
  Tensor x = concat({index_select(emb, 0, prev_symbols), ctx}, 1);
  auto [hn, cn] = cell.forward(x, prev.h, prev.c);
  Tensor logits = out_proj.forward(concat({hn, ctx}, 1));
  return {logits, {hn, cn}, attn};
}

void AttnDecoderCell::collect(const std::string& prefix, ParamBag& bag) {
  cell.collect(prefix + ".cell", bag);
  bag.params.push_back({prefix + ".emb", emb});
  bag.params.push_back({prefix + ".w_h", w_h});
  bag.params.push_back({prefix + ".w_e", w_e});
  bag.params.push_back({prefix + ".v", v});
  out_proj.collect(prefix + ".out", bag);
}

}  // namespace rfl
