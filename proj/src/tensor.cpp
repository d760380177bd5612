#include "rfl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "rfl/gemm.hpp"

namespace rfl {

size_t shape_numel(const Shape& s) {
  size_t n = 1;
  for (size_t e : s) n *= e;
  return n;
}

Shape strides_of(const Shape& s) {
  Shape st(s.size(), 1);
  for (size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace {

void check_shape_valid(const Shape& s) {
  for (size_t e : s)
    if (e == 0) throw ShapeError("zero extent in shape " + shape_str(s));
}

double round_f32(double v) { return double(float(v)); }

// Incremental multi-index walk over `shape` tracking two operand offsets.
// Strides may contain zeros for broadcast axes. The innermost axis runs in a
// tight loop; outer axes carry incrementally.
template <typename F>
void nd_loop2(const Shape& shape, const Shape& sa, const Shape& sb, F&& f) {
  const size_t rank = shape.size();
  const size_t n = shape_numel(shape);
  if (rank == 0) {
    f(size_t(0), size_t(0), size_t(0));
    return;
  }
  const size_t inner = shape[rank - 1];
  const size_t ia = sa[rank - 1], ib = sb[rank - 1];
  std::vector<size_t> idx(rank, 0);
  size_t oa = 0, ob = 0;
  for (size_t o = 0; o < n;) {
    size_t la = oa, lb = ob;
    for (size_t i = 0; i < inner; ++i, la += ia, lb += ib) f(o + i, la, lb);
    o += inner;
    if (o == n) break;
    size_t ax = rank - 1;
    while (ax-- > 0) {
      ++idx[ax];
      oa += sa[ax];
      ob += sb[ax];
      if (idx[ax] < shape[ax]) break;
      oa -= sa[ax] * shape[ax];
      ob -= sb[ax] * shape[ax];
      idx[ax] = 0;
    }
  }
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  if (a.size() != b.size())
    throw ShapeError("rank mismatch in elementwise op: " + shape_str(a) +
                     " vs " + shape_str(b));
  Shape out(a.size());
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i] || a[i] == 1 || b[i] == 1)
      out[i] = std::max(a[i], b[i]);
    else
      throw ShapeError("incompatible shapes in elementwise op: " +
                       shape_str(a) + " vs " + shape_str(b));
  }
  return out;
}

Shape broadcast_strides(const Shape& in, const Shape& out) {
  Shape st = strides_of(in);
  for (size_t i = 0; i < in.size(); ++i)
    if (in[i] == 1 && out[i] != 1) st[i] = 0;
  return st;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor make_tensor(Shape shape, DType dtype) {
  check_shape_valid(shape);
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(shape_numel(shape), 0.0);
  impl->shape = std::move(shape);
  impl->dtype = dtype;
  return Tensor(std::move(impl));
}

DType promote_dtype(std::initializer_list<const Tensor*> inputs) {
  for (const Tensor* t : inputs)
    if (t->dtype() == DType::F64) return DType::F64;
  return DType::F32;
}

void quantize_f32(Tensor& t) {
  if (t.dtype() != DType::F32) return;
  for (double& v : t.data()) v = round_f32(v);
}

Tensor Tensor::zeros(Shape shape, DType dtype) {
  return make_tensor(std::move(shape), dtype);
}

Tensor Tensor::ones(Shape shape, DType dtype) {
  return full(std::move(shape), 1.0, dtype);
}

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  Tensor t = make_tensor(std::move(shape), dtype);
  if (dtype == DType::F32) value = round_f32(value);
  std::fill(t.data().begin(), t.data().end(), value);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values, DType dtype) {
  check_shape_valid(shape);
  if (shape_numel(shape) != values.size())
    throw ShapeError("data length " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape));
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->dtype = dtype;
  Tensor t(std::move(impl));
  quantize_f32(t);
  return t;
}

Tensor Tensor::scalar(double value, DType dtype) {
  return from_data({}, {value}, dtype);
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, Rng& rng,
                       DType dtype) {
  Tensor t = make_tensor(std::move(shape), dtype);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  quantize_f32(t);
  return t;
}

Tensor Tensor::he_normal(Shape shape, size_t fan_in, Rng& rng, DType dtype) {
  if (fan_in == 0) throw ValueError("he_normal requires fan_in > 0");
  const double sd = std::sqrt(2.0 / double(fan_in));
  Tensor t = make_tensor(std::move(shape), dtype);
  for (double& v : t.data()) v = sd * rng.normal();
  quantize_f32(t);
  return t;
}

size_t Tensor::extent(size_t axis) const {
  if (axis >= rank()) throw ShapeError("axis out of range");
  return impl_->shape[axis];
}

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  if (on)
    impl_->grad.assign(impl_->data.size(), 0.0);
  else
    impl_->grad.clear();
  return *this;
}

std::vector<double>& Tensor::grad() {
  if (!requires_grad()) throw TapeError("tensor has no grad buffer");
  return impl_->grad;
}

const std::vector<double>& Tensor::grad() const {
  if (!requires_grad()) throw TapeError("tensor has no grad buffer");
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (requires_grad()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

double Tensor::value() const {
  if (numel() != 1) throw ShapeError("value() requires a scalar tensor");
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<size_t> index) const {
  if (index.size() != rank()) throw ShapeError("index rank mismatch");
  Shape st = strides_of(impl_->shape);
  size_t off = 0, i = 0;
  for (size_t ix : index) {
    if (ix >= impl_->shape[i]) throw ShapeError("index out of range");
    off += ix * st[i++];
  }
  return impl_->data[off];
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  impl->dtype = impl_->dtype;
  return Tensor(std::move(impl));
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  if (impl_->requires_grad) t.set_requires_grad(true);
  return t;
}

// ---------------------------------------------------------------------------
// Tape

namespace {
thread_local GradTape* tl_tape = nullptr;
thread_local int tl_suspend = 0;
}  // namespace

GradTape::GradTape() {
  prev_ = tl_tape;
  tl_tape = this;
}

GradTape::~GradTape() { tl_tape = prev_; }

GradTape* GradTape::current() { return tl_tape; }

bool GradTape::recording() { return tl_tape != nullptr && tl_suspend == 0; }

void GradTape::record(std::function<void()> backward_step) {
  entries_.push_back(std::move(backward_step));
  consumed_ = false;
}

void GradTape::backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw TapeError("backward requires a scalar loss, got shape " +
                    shape_str(loss.shape()));
  if (entries_.empty()) {
    if (consumed_)
      throw TapeError("stale tape: backward already consumed this tape");
    throw TapeError("backward on an empty tape");
  }
  if (!loss.requires_grad())
    throw TapeError("loss does not depend on any tensor requiring gradients");
  loss.ptr()->grad[0] += 1.0;
  for (size_t i = entries_.size(); i-- > 0;) entries_[i]();
  entries_.clear();
  consumed_ = true;
}

NoGradGuard::NoGradGuard() { ++tl_suspend; }
NoGradGuard::~NoGradGuard() { --tl_suspend; }

void backward(const Tensor& loss) {
  if (!GradTape::current()) throw TapeError("no active tape");
  GradTape::current()->backward(loss);
}

void register_op(Tensor& out, std::initializer_list<const Tensor*> inputs,
                 std::function<void()> backward_fn) {
  if (!GradTape::recording()) return;
  bool needs = false;
  for (const Tensor* t : inputs) needs = needs || t->requires_grad();
  if (!needs) return;
  out.set_requires_grad(true);
  GradTape::current()->record(std::move(backward_fn));
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

template <typename Fwd, typename Bwd>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd,
                 Bwd bwd) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  Tensor out = make_tensor(out_shape, promote_dtype({&a, &b}));
  const auto& ad = a.data();
  const auto& bd = b.data();
  auto& od = out.data();
  if (a.shape() == b.shape()) {
    for (size_t i = 0; i < od.size(); ++i) od[i] = fwd(ad[i], bd[i]);
  } else {
    const Shape sa = broadcast_strides(a.shape(), out_shape);
    const Shape sb = broadcast_strides(b.shape(), out_shape);
    nd_loop2(out_shape, sa, sb, [&](size_t o, size_t ia, size_t ib) {
      od[o] = fwd(ad[ia], bd[ib]);
    });
  }
  quantize_f32(out);
  register_op(out, {&a, &b}, [name, ai = a.ptr(), bi = b.ptr(),
                              oi = out.ptr(), bwd]() {
    (void)name;
    const auto& g = oi->grad;
    if (ai->shape == bi->shape) {
      const bool wa = ai->requires_grad, wb = bi->requires_grad;
      for (size_t i = 0; i < g.size(); ++i) {
        double da, db;
        bwd(ai->data[i], bi->data[i], oi->data[i], g[i], da, db);
        if (wa) ai->grad[i] += da;
        if (wb) bi->grad[i] += db;
      }
      return;
    }
    const Shape sa = broadcast_strides(ai->shape, oi->shape);
    const Shape sb = broadcast_strides(bi->shape, oi->shape);
    nd_loop2(oi->shape, sa, sb, [&](size_t o, size_t ia, size_t ib) {
      double da, db;
      bwd(ai->data[ia], bi->data[ib], oi->data[o], g[o], da, db);
      if (ai->requires_grad) ai->grad[ia] += da;
      if (bi->requires_grad) bi->grad[ib] += db;
    });
  });
  return out;
}

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd bwd) {
  Tensor out = make_tensor(a.shape(), a.dtype());
  const auto& ad = a.data();
  auto& od = out.data();
  for (size_t i = 0; i < od.size(); ++i) od[i] = fwd(ad[i]);
  quantize_f32(out);
  register_op(out, {&a}, [ai = a.ptr(), oi = out.ptr(), bwd]() {
    if (!ai->requires_grad) return;
    for (size_t i = 0; i < oi->data.size(); ++i)
      ai->grad[i] += bwd(ai->data[i], oi->data[i], oi->grad[i]);
  });
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double, double g, double& da, double& db) {
        da = g;
        db = g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double, double g, double& da, double& db) {
        da = g;
        db = -g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double, double g, double& da, double& db) {
        da = g * y;
        db = g * x;
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  for (double v : b.data())
    if (v == 0.0)
      throw NumericDomainError("division by zero");
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double x, double y, double, double g, double& da, double& db) {
        da = g / y;
        db = -g * x / (y * y);
      });
}

Tensor add(const Tensor& a, double s) {
  return unary_op(
      a, [s](double x) { return x + s; },
      [](double, double, double g) { return g; });
}

Tensor sub(const Tensor& a, double s) { return add(a, -s); }

Tensor sub(double s, const Tensor& a) {
  return unary_op(
      a, [s](double x) { return s - x; },
      [](double, double, double g) { return -g; });
}

Tensor mul(const Tensor& a, double s) {
  return unary_op(
      a, [s](double x) { return x * s; },
      [s](double, double, double g) { return g * s; });
}

Tensor div(const Tensor& a, double s) {
  if (s == 0.0) throw NumericDomainError("division by zero scalar");
  return mul(a, 1.0 / s);
}

Tensor neg(const Tensor& a) { return mul(a, -1.0); }

Tensor relu(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double, double g) { return x > 0.0 ? g : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y, double g) { return g * y * (1.0 - y); });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::exp(x); },
      [](double, double y, double g) { return g * y; });
}

Tensor log(const Tensor& a) {
  for (double v : a.data())
    if (v <= 0.0)
      throw NumericDomainError("log of nonpositive value " +
                               std::to_string(v));
  return unary_op(
      a, [](double x) { return std::log(x); },
      [](double x, double, double g) { return g / x; });
}

Tensor tanh(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::tanh(x); },
      [](double, double y, double g) { return g * (1.0 - y * y); });
}

Tensor sqrt(const Tensor& a) {
  for (double v : a.data())
    if (v < 0.0) throw NumericDomainError("sqrt of negative value");
  return unary_op(
      a, [](double x) { return std::sqrt(x); },
      [](double, double y, double g) { return 0.5 * g / y; });
}

// ---------------------------------------------------------------------------
// GEMM + matmul

void gemm_nn(size_t m, size_t n, size_t k, const double* a, const double* b,
             double* c, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  for (size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      size_t j = 0;
      for (; j + 4 <= n; j += 4) {
        crow[j] += av * brow[j];
        crow[j + 1] += av * brow[j + 1];
        crow[j + 2] += av * brow[j + 2];
        crow[j + 3] += av * brow[j + 3];
      }
      for (; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_nt(size_t m, size_t n, size_t k, const double* a, const double* b,
             double* c, bool accumulate) {
  for (size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double s = 0.0;
      for (size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      crow[j] = accumulate ? crow[j] + s : s;
    }
  }
}

void gemm_tn(size_t m, size_t n, size_t k, const double* a, const double* b,
             double* c, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  for (size_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      double* crow = c + i * n;
      for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul expects rank-2 tensors, got " +
                     shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const size_t m = a.extent(0), k = a.extent(1);
  if (b.extent(0) != k)
    throw ShapeError("matmul inner extents differ: " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  const size_t n = b.extent(1);
  Tensor out = make_tensor({m, n}, promote_dtype({&a, &b}));
  gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data().data(), false);
  quantize_f32(out);
  register_op(out, {&a, &b}, [ai = a.ptr(), bi = b.ptr(), oi = out.ptr(), m, n,
                              k]() {
    const double* g = oi->grad.data();
    if (ai->requires_grad)  // dA += g . B^T
      gemm_nt(m, k, n, g, bi->data.data(), ai->grad.data(), true);
    if (bi->requires_grad)  // dB += A^T . g
      gemm_tn(k, n, m, ai->data.data(), g, bi->grad.data(), true);
  });
  return out;
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3)
    throw ShapeError("bmm expects rank-3 tensors");
  const size_t bs = a.extent(0), m = a.extent(1), k = a.extent(2);
  if (b.extent(0) != bs || b.extent(1) != k)
    throw ShapeError("bmm shape mismatch: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const size_t n = b.extent(2);
  Tensor out = make_tensor({bs, m, n}, promote_dtype({&a, &b}));
  for (size_t i = 0; i < bs; ++i)
    gemm_nn(m, n, k, a.data().data() + i * m * k, b.data().data() + i * k * n,
            out.data().data() + i * m * n, false);
  quantize_f32(out);
  register_op(out, {&a, &b}, [ai = a.ptr(), bi = b.ptr(), oi = out.ptr(), bs,
                              m, n, k]() {
    for (size_t i = 0; i < bs; ++i) {
      const double* g = oi->grad.data() + i * m * n;
      if (ai->requires_grad)
        gemm_nt(m, k, n, g, bi->data.data() + i * k * n,
                ai->grad.data() + i * m * k, true);
      if (bi->requires_grad)
        gemm_tn(k, n, m, ai->data.data() + i * m * k, g,
                bi->grad.data() + i * k * n, true);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

namespace {

void check_axes(const Tensor& a, const std::vector<size_t>& axes) {
  std::vector<bool> seen(a.rank(), false);
  for (size_t ax : axes) {
    if (ax >= a.rank())
      throw ShapeError("reduce axis " + std::to_string(ax) +
                       " out of range for " + shape_str(a.shape()));
    if (seen[ax]) throw ShapeError("duplicate reduce axis");
    seen[ax] = true;
  }
}

Shape reduced_shape(const Shape& in, const std::vector<size_t>& axes,
                    bool keepdim) {
  std::vector<bool> red(in.size(), false);
  for (size_t ax : axes) red[ax] = true;
  Shape out;
  for (size_t i = 0; i < in.size(); ++i) {
    if (red[i]) {
      if (keepdim) out.push_back(1);
    } else {
      out.push_back(in[i]);
    }
  }
  return out;
}

// Strides into the reduced output indexed by input axes (0 on reduced axes).
Shape reduce_out_strides(const Shape& in, const std::vector<size_t>& axes,
                         const Shape& out, bool keepdim) {
  std::vector<bool> red(in.size(), false);
  for (size_t ax : axes) red[ax] = true;
  Shape ost = strides_of(out);
  Shape st(in.size(), 0);
  size_t oax = 0;
  for (size_t i = 0; i < in.size(); ++i) {
    if (red[i]) {
      if (keepdim) ++oax;
    } else {
      st[i] = ost[oax++];
    }
  }
  return st;
}

}  // namespace

Tensor reduce_sum(const Tensor& a, const std::vector<size_t>& axes,
                  bool keepdim) {
  check_axes(a, axes);
  if (axes.empty()) return unary_op(
      a, [](double x) { return x; }, [](double, double, double g) { return g; });
  const Shape out_shape = reduced_shape(a.shape(), axes, keepdim);
  Tensor out = make_tensor(out_shape, a.dtype());
  const Shape in_st = strides_of(a.shape());
  const Shape out_st = reduce_out_strides(a.shape(), axes, out_shape, keepdim);
  auto& od = out.data();
  const auto& ad = a.data();
  nd_loop2(a.shape(), in_st, out_st,
           [&](size_t, size_t ia, size_t io) { od[io] += ad[ia]; });
  quantize_f32(out);
  register_op(out, {&a}, [ai = a.ptr(), oi = out.ptr(), in_st, out_st]() {
    if (!ai->requires_grad) return;
    nd_loop2(ai->shape, in_st, out_st, [&](size_t, size_t ia, size_t io) {
      ai->grad[ia] += oi->grad[io];
    });
  });
  return out;
}

Tensor reduce_mean(const Tensor& a, const std::vector<size_t>& axes,
                   bool keepdim) {
  check_axes(a, axes);
  if (axes.empty()) return reduce_sum(a, axes, keepdim);
  size_t count = 1;
  for (size_t ax : axes) count *= a.extent(ax);
  return div(reduce_sum(a, axes, keepdim), double(count));
}

Tensor reduce_max(const Tensor& a, const std::vector<size_t>& axes,
                  bool keepdim) {
  check_axes(a, axes);
  if (axes.empty()) return reduce_sum(a, axes, keepdim);
  const Shape out_shape = reduced_shape(a.shape(), axes, keepdim);
  Tensor out = make_tensor(out_shape, a.dtype());
  const Shape in_st = strides_of(a.shape());
  const Shape out_st = reduce_out_strides(a.shape(), axes, out_shape, keepdim);
  auto& od = out.data();
  const auto& ad = a.data();
  // First argmax in row-major order wins; strict > keeps the earliest.
  auto argmax = std::make_shared<std::vector<size_t>>(
      od.size(), std::numeric_limits<size_t>::max());
  nd_loop2(a.shape(), in_st, out_st, [&](size_t, size_t ia, size_t io) {
    if ((*argmax)[io] == std::numeric_limits<size_t>::max() ||
        ad[ia] > od[io]) {
      od[io] = ad[ia];
      (*argmax)[io] = ia;
    }
  });
  register_op(out, {&a}, [ai = a.ptr(), oi = out.ptr(), argmax]() {
    if (!ai->requires_grad) return;
    for (size_t io = 0; io < oi->grad.size(); ++io)
      ai->grad[(*argmax)[io]] += oi->grad[io];
  });
  return out;
}

Tensor sum_all(const Tensor& a) {
  std::vector<size_t> axes(a.rank());
  for (size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  return reduce_sum(a, axes);
}

Tensor mean_all(const Tensor& a) {
  return div(sum_all(a), double(a.numel()));
}

// ---------------------------------------------------------------------------
// Shape ops

Tensor reshape(const Tensor& a, Shape shape) {
  check_shape_valid(shape);
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " +
                     shape_str(shape) + " changes element count");
  Tensor out = make_tensor(shape, a.dtype());
  out.data() = a.data();
  register_op(out, {&a}, [ai = a.ptr(), oi = out.ptr()]() {
    if (!ai->requires_grad) return;
    for (size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i];
  });
  return out;
}

Tensor permute(const Tensor& a, const std::vector<size_t>& axes) {
  if (axes.size() != a.rank()) throw ShapeError("permute rank mismatch");
  std::vector<bool> seen(a.rank(), false);
  for (size_t ax : axes) {
    if (ax >= a.rank() || seen[ax]) throw ShapeError("invalid permutation");
    seen[ax] = true;
  }
  Shape out_shape(a.rank());
  for (size_t i = 0; i < a.rank(); ++i) out_shape[i] = a.extent(axes[i]);
  const Shape in_st = strides_of(a.shape());
  Shape perm_st(a.rank());
  for (size_t i = 0; i < a.rank(); ++i) perm_st[i] = in_st[axes[i]];
  Tensor out = make_tensor(out_shape, a.dtype());
  auto& od = out.data();
  const auto& ad = a.data();
  const Shape out_st = strides_of(out_shape);
  nd_loop2(out_shape, out_st, perm_st,
           [&](size_t, size_t io, size_t ia) { od[io] = ad[ia]; });
  register_op(out, {&a},
              [ai = a.ptr(), oi = out.ptr(), out_shape, out_st, perm_st]() {
                if (!ai->requires_grad) return;
                nd_loop2(out_shape, out_st, perm_st,
                         [&](size_t, size_t io, size_t ia) {
                           ai->grad[ia] += oi->grad[io];
                         });
              });
  return out;
}

Tensor slice(const Tensor& a, size_t axis, size_t start, size_t len) {
  if (axis >= a.rank()) throw ShapeError("slice axis out of range");
  if (len == 0 || start + len > a.extent(axis))
    throw ShapeError("slice range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") out of bounds for axis " +
                     std::to_string(axis) + " of " + shape_str(a.shape()));
  Shape out_shape = a.shape();
  out_shape[axis] = len;
  Tensor out = make_tensor(out_shape, a.dtype());
  const Shape st = strides_of(a.shape());
  const size_t outer = [&] {
    size_t n = 1;
    for (size_t i = 0; i < axis; ++i) n *= a.extent(i);
    return n;
  }();
  const size_t inner = st[axis];
  const size_t in_block = a.extent(axis) * inner;
  const size_t out_block = len * inner;
  auto& od = out.data();
  const auto& ad = a.data();
  for (size_t o = 0; o < outer; ++o)
    std::copy_n(ad.data() + o * in_block + start * inner, out_block,
                od.data() + o * out_block);
  register_op(out, {&a}, [ai = a.ptr(), oi = out.ptr(), outer, inner, in_block,
                          out_block, start]() {
    if (!ai->requires_grad) return;
    for (size_t o = 0; o < outer; ++o) {
      const double* g = oi->grad.data() + o * out_block;
      double* dst = ai->grad.data() + o * in_block + start * inner;
      for (size_t i = 0; i < out_block; ++i) dst[i] += g[i];
    }
  });
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Tensor& first = parts.front();
  if (axis >= first.rank()) throw ShapeError("concat axis out of range");
  size_t total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != first.rank())
      throw ShapeError("concat rank mismatch");
    for (size_t i = 0; i < p.rank(); ++i)
      if (i != axis && p.extent(i) != first.extent(i))
        throw ShapeError("concat extent mismatch on axis " + std::to_string(i));
    total += p.extent(axis);
  }
  Shape out_shape = first.shape();
  out_shape[axis] = total;
  DType dt = DType::F32;
  for (const Tensor& p : parts)
    if (p.dtype() == DType::F64) dt = DType::F64;
  Tensor out = make_tensor(out_shape, dt);

  size_t outer = 1;
  for (size_t i = 0; i < axis; ++i) outer *= first.extent(i);
  size_t inner = 1;
  for (size_t i = axis + 1; i < first.rank(); ++i) inner *= first.extent(i);
  const size_t out_block = total * inner;

  auto& od = out.data();
  size_t at = 0;
  struct Seg {
    std::shared_ptr<TensorImpl> impl;
    size_t offset, block;
  };
  auto segs = std::make_shared<std::vector<Seg>>();
  for (const Tensor& p : parts) {
    const size_t block = p.extent(axis) * inner;
    for (size_t o = 0; o < outer; ++o)
      std::copy_n(p.data().data() + o * block, block,
                  od.data() + o * out_block + at);
    segs->push_back({p.ptr(), at, block});
    at += block;
  }
  quantize_f32(out);
  bool needs = false;
  for (const Tensor& p : parts) needs = needs || p.requires_grad();
  if (GradTape::recording() && needs) {
    out.set_requires_grad(true);
    GradTape::current()->record([oi = out.ptr(), segs, outer, out_block]() {
      for (const auto& s : *segs) {
        if (!s.impl->requires_grad) continue;
        for (size_t o = 0; o < outer; ++o) {
          const double* g = oi->grad.data() + o * out_block + s.offset;
          double* dst = s.impl->grad.data() + o * s.block;
          for (size_t i = 0; i < s.block; ++i) dst[i] += g[i];
        }
      }
    });
  }
  return out;
}

Tensor index_select(const Tensor& a, size_t axis,
                    const std::vector<size_t>& indices) {
  if (axis >= a.rank()) throw ShapeError("index_select axis out of range");
  for (size_t ix : indices)
    if (ix >= a.extent(axis))
      throw ValueError("index_select index " + std::to_string(ix) +
                       " out of range");
  Shape out_shape = a.shape();
  out_shape[axis] = indices.size();
  Tensor out = make_tensor(out_shape, a.dtype());
  size_t outer = 1;
  for (size_t i = 0; i < axis; ++i) outer *= a.extent(i);
  size_t inner = 1;
  for (size_t i = axis + 1; i < a.rank(); ++i) inner *= a.extent(i);
  const size_t in_block = a.extent(axis) * inner;
  const size_t out_block = indices.size() * inner;
  auto& od = out.data();
  const auto& ad = a.data();
  for (size_t o = 0; o < outer; ++o)
    for (size_t j = 0; j < indices.size(); ++j)
      std::copy_n(ad.data() + o * in_block + indices[j] * inner, inner,
                  od.data() + o * out_block + j * inner);
  register_op(out, {&a}, [ai = a.ptr(), oi = out.ptr(), indices, outer, inner,
                          in_block, out_block]() {
    if (!ai->requires_grad) return;
    for (size_t o = 0; o < outer; ++o)
      for (size_t j = 0; j < indices.size(); ++j) {
        const double* g = oi->grad.data() + o * out_block + j * inner;
        double* dst = ai->grad.data() + o * in_block + indices[j] * inner;
        for (size_t i = 0; i < inner; ++i) dst[i] += g[i];
      }
  });
  return out;
}

Tensor pick(const Tensor& a, const std::vector<size_t>& cols) {
  if (a.rank() != 2) throw ShapeError("pick expects a rank-2 tensor");
  const size_t m = a.extent(0), n = a.extent(1);
  if (cols.size() != m) throw ShapeError("pick needs one column per row");
  for (size_t c : cols)
    if (c >= n) throw ValueError("pick column out of range");
  Tensor out = make_tensor({m}, a.dtype());
  for (size_t i = 0; i < m; ++i) out.data()[i] = a.data()[i * n + cols[i]];
  register_op(out, {&a}, [ai = a.ptr(), oi = out.ptr(), cols, n]() {
    if (!ai->requires_grad) return;
    for (size_t i = 0; i < cols.size(); ++i)
      ai->grad[i * n + cols[i]] += oi->grad[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Softmax

namespace {

// Applies f(lane_base, stride, extent) over every 1-D lane along `axis`.
template <typename F>
void for_each_lane(const Shape& shape, size_t axis, F&& f) {
  const Shape st = strides_of(shape);
  size_t outer = 1;
  for (size_t i = 0; i < axis; ++i) outer *= shape[i];
  size_t inner = 1;
  for (size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const size_t extent = shape[axis];
  for (size_t o = 0; o < outer; ++o)
    for (size_t i = 0; i < inner; ++i)
      f(o * extent * inner + i, inner, extent);
}

}  // namespace

Tensor softmax(const Tensor& a, size_t axis) {
  if (axis >= a.rank()) throw ShapeError("softmax axis out of range");
  Tensor out = make_tensor(a.shape(), a.dtype());
  const auto& ad = a.data();
  auto& od = out.data();
  for_each_lane(a.shape(), axis, [&](size_t base, size_t stride, size_t n) {
    double mx = -std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < n; ++i) mx = std::max(mx, ad[base + i * stride]);
    double z = 0.0;
    for (size_t i = 0; i < n; ++i) {
      const double e = std::exp(ad[base + i * stride] - mx);
      od[base + i * stride] = e;
      z += e;
    }
    for (size_t i = 0; i < n; ++i) od[base + i * stride] /= z;
  });
  quantize_f32(out);
  register_op(out, {&a}, [ai = a.ptr(), oi = out.ptr(), axis]() {
    if (!ai->requires_grad) return;
    for_each_lane(oi->shape, axis, [&](size_t base, size_t stride, size_t n) {
      double dot = 0.0;
      for (size_t i = 0; i < n; ++i)
        dot += oi->grad[base + i * stride] * oi->data[base + i * stride];
      for (size_t i = 0; i < n; ++i) {
        const size_t ix = base + i * stride;
        ai->grad[ix] += oi->data[ix] * (oi->grad[ix] - dot);
      }
    });
  });
  return out;
}

Tensor log_softmax(const Tensor& a, size_t axis) {
  if (axis >= a.rank()) throw ShapeError("log_softmax axis out of range");
  Tensor out = make_tensor(a.shape(), a.dtype());
  const auto& ad = a.data();
  auto& od = out.data();
  for_each_lane(a.shape(), axis, [&](size_t base, size_t stride, size_t n) {
    double mx = -std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < n; ++i) mx = std::max(mx, ad[base + i * stride]);
    double z = 0.0;
    for (size_t i = 0; i < n; ++i) z += std::exp(ad[base + i * stride] - mx);
    const double lz = mx + std::log(z);
    for (size_t i = 0; i < n; ++i)
      od[base + i * stride] = ad[base + i * stride] - lz;
  });
  quantize_f32(out);
  register_op(out, {&a}, [ai = a.ptr(), oi = out.ptr(), axis]() {
    if (!ai->requires_grad) return;
    for_each_lane(oi->shape, axis, [&](size_t base, size_t stride, size_t n) {
      double gsum = 0.0;
      for (size_t i = 0; i < n; ++i) gsum += oi->grad[base + i * stride];
      for (size_t i = 0; i < n; ++i) {
        const size_t ix = base + i * stride;
        ai->grad[ix] += oi->grad[ix] - std::exp(oi->data[ix]) * gsum;
      }
    });
  });
  return out;
}

bool all_finite(const Tensor& t) {
  for (double v : t.data())
    if (!std::isfinite(v)) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

void put_u32_le(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32_le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw IoError("truncated tensor blob");
  return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 |
         uint32_t(b[3]) << 24;
}

void put_u64_le(std::ostream& os, uint64_t v) {
  put_u32_le(os, uint32_t(v & 0xffffffffu));
  put_u32_le(os, uint32_t(v >> 32));
}

uint64_t get_u64_le(std::istream& is) {
  uint64_t lo = get_u32_le(is);
  uint64_t hi = get_u32_le(is);
  return lo | (hi << 32);
}

}  // namespace

void write_tensor_blob(std::ostream& os, const Tensor& t) {
  if (t.rank() > 255) throw IoError("tensor rank too large to serialize");
  os.write("RFLT", 4);
  const unsigned char dtype = static_cast<unsigned char>(t.dtype());
  const unsigned char rank = static_cast<unsigned char>(t.rank());
  os.write(reinterpret_cast<const char*>(&dtype), 1);
  os.write(reinterpret_cast<const char*>(&rank), 1);
  for (size_t e : t.shape()) {
    if (e > std::numeric_limits<uint32_t>::max())
      throw IoError("tensor extent too large to serialize");
    put_u32_le(os, uint32_t(e));
  }
  if (t.dtype() == DType::F64) {
    for (double v : t.data()) {
      uint64_t bits;
      std::memcpy(&bits, &v, 8);
      put_u64_le(os, bits);
    }
  } else {
    for (double v : t.data()) {
      const float f = float(v);
      uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put_u32_le(os, bits);
    }
  }
  if (!os) throw IoError("failed writing tensor blob");
}

Tensor read_tensor_blob(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "RFLT", 4) != 0)
    throw IoError("bad tensor blob magic");
  unsigned char dtype_code = 0, rank = 0;
  is.read(reinterpret_cast<char*>(&dtype_code), 1);
  is.read(reinterpret_cast<char*>(&rank), 1);
  if (!is) throw IoError("truncated tensor blob header");
  if (dtype_code > 1) throw IoError("unknown tensor dtype code");
  const DType dtype = static_cast<DType>(dtype_code);
  Shape shape(rank);
  for (size_t i = 0; i < rank; ++i) shape[i] = get_u32_le(is);
  const size_t n = shape_numel(shape);
  std::vector<double> values(n);
  if (dtype == DType::F64) {
    for (size_t i = 0; i < n; ++i) {
      const uint64_t bits = get_u64_le(is);
      double v;
      std::memcpy(&v, &bits, 8);
      values[i] = v;
    }
  } else {
    for (size_t i = 0; i < n; ++i) {
      const uint32_t bits = get_u32_le(is);
      float f;
      std::memcpy(&f, &bits, 4);
      values[i] = double(f);
    }
  }
  if (!is) throw IoError("truncated tensor blob data");
  return Tensor::from_data(std::move(shape), std::move(values), dtype);
}

}  // namespace rfl
