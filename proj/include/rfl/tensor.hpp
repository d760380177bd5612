#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <iosfwd>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "rfl/rng.hpp"

namespace rfl {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Domain violations of numeric ops (log of nonpositive, division by zero, ...).
struct NumericDomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Bad labels, indices or argument values outside the numeric-op domain class.
struct ValueError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class DType : uint8_t { F64 = 0, F32 = 1 };

using Shape = std::vector<size_t>;

size_t shape_numel(const Shape& s);
Shape strides_of(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;  // row-major; F32 tensors hold float-rounded values
  std::vector<double> grad;  // same length as data iff requires_grad
  bool requires_grad = false;
  DType dtype = DType::F64;
};

// Value-semantics handle over shared storage. Data is immutable after the
// forward op that produced it except for the grad buffer.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, DType dtype = DType::F64);
  static Tensor ones(Shape shape, DType dtype = DType::F64);
  static Tensor full(Shape shape, double value, DType dtype = DType::F64);
  static Tensor from_data(Shape shape, std::vector<double> values,
                          DType dtype = DType::F64);
  static Tensor scalar(double value, DType dtype = DType::F64);
  static Tensor uniform(Shape shape, double lo, double hi, Rng& rng,
                        DType dtype = DType::F64);
  // He initialization: zero-mean normal with variance 2 / fan_in.
  static Tensor he_normal(Shape shape, size_t fan_in, Rng& rng,
                          DType dtype = DType::F64);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  size_t rank() const { return impl_->shape.size(); }
  size_t numel() const { return impl_->data.size(); }
  size_t extent(size_t axis) const;
  DType dtype() const { return impl_->dtype; }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true);
  std::vector<double>& data() { return impl_->data; }
  const std::vector<double>& data() const { return impl_->data; }
  std::vector<double>& grad();
  const std::vector<double>& grad() const;
  void zero_grad();

  double value() const;  // scalar tensors only
  double at(std::initializer_list<size_t> index) const;

  Tensor detach() const;  // copy of the values, outside the autodiff graph
  Tensor clone() const;

  const std::shared_ptr<TensorImpl>& ptr() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
  friend Tensor make_tensor(Shape, DType);
};

// Define-by-run tape. Constructing one makes it the active tape for the
// current thread; ops record backward closures onto it. A tape and the
// tensors recorded on it are confined to one thread.
class GradTape {
 public:
  GradTape();
  ~GradTape();
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* current();
  static bool recording();

  void record(std::function<void()> backward_step);
  // Seeds d(loss)/d(loss) = 1, replays recorded ops in reverse order
  // accumulating into leaf grads, then clears the tape. Running backward a
  // second time without recording new ops is an error.
  void backward(const Tensor& loss);
  size_t size() const { return entries_.size(); }

 private:
  friend struct NoGradGuard;
  std::vector<std::function<void()>> entries_;
  bool consumed_ = false;
  GradTape* prev_ = nullptr;
};

// Suspends recording for its scope (inference passes, optimizer updates).
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

void backward(const Tensor& loss);

// Extension points used by layers and losses to register custom ops.
Tensor make_tensor(Shape shape, DType dtype = DType::F64);
DType promote_dtype(std::initializer_list<const Tensor*> inputs);
void quantize_f32(Tensor& t);
void register_op(Tensor& out, std::initializer_list<const Tensor*> inputs,
                 std::function<void()> backward_fn);

// Elementwise ops. Binary ops broadcast over size-1 axes only; ranks must
// match (no implicit rank promotion).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double s);
Tensor sub(const Tensor& a, double s);
Tensor sub(double s, const Tensor& a);
Tensor mul(const Tensor& a, double s);
Tensor div(const Tensor& a, double s);
Tensor neg(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sqrt(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);          // [m,k] x [k,n]
Tensor bmm(const Tensor& a, const Tensor& b);             // [B,m,k] x [B,k,n]

// Reductions remove the listed axes (keepdim retains them as size 1).
// An empty axis list is a no-op. Max routes its gradient to the first
// argmax position in row-major order.
Tensor reduce_sum(const Tensor& a, const std::vector<size_t>& axes,
                  bool keepdim = false);
Tensor reduce_mean(const Tensor& a, const std::vector<size_t>& axes,
                   bool keepdim = false);
Tensor reduce_max(const Tensor& a, const std::vector<size_t>& axes,
                  bool keepdim = false);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<size_t>& axes);
Tensor slice(const Tensor& a, size_t axis, size_t start, size_t len);
Tensor concat(const std::vector<Tensor>& parts, size_t axis);
Tensor index_select(const Tensor& a, size_t axis,
                    const std::vector<size_t>& indices);
// a: [m,n], cols: m column indices -> [m] with out[i] = a[i, cols[i]].
Tensor pick(const Tensor& a, const std::vector<size_t>& cols);

Tensor softmax(const Tensor& a, size_t axis);
Tensor log_softmax(const Tensor& a, size_t axis);

bool all_finite(const Tensor& t);

// Binary blob: magic "RFLT", u8 dtype code, u8 rank, u32 extents (LE),
// raw values (LE; f64 -> 8 bytes, f32 -> 4 bytes).
void write_tensor_blob(std::ostream& os, const Tensor& t);
Tensor read_tensor_blob(std::istream& is);

}  // namespace rfl
