#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "rng.hpp"

namespace jigsaw::ad {

using Shape = std::vector<int64_t>;

struct TensorError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until touched by backward()
  bool requires_grad = false;
};

// Dense 64-bit float tensor; a cheap handle sharing storage.
class Tensor {
 public:
  Tensor() = default;
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double v);
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi,
                        bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int64_t dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(impl_->value.size()); }
  int64_t rows() const;  // first dim of a 1-D/2-D tensor
  int64_t cols() const;  // last dim; 1-D tensors count as a single row

  double* data() { return impl_->value.data(); }
  const double* data() const { return impl_->value.data(); }
  double scalar_value() const;
  double at(int64_t i) const { return impl_->value[static_cast<size_t>(i)]; }
  double at(int64_t r, int64_t c) const {
    return impl_->value[static_cast<size_t>(r * cols() + c)];
  }
  double& at(int64_t r, int64_t c) {
    return impl_->value[static_cast<size_t>(r * cols() + c)];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool rg) { impl_->requires_grad = rg; }
  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  double* grad();
  const double* grad() const;
  void zero_grad();

  Tensor detach() const;           // copy of the value, no grad, off-tape
  Tensor clone_for_grad() const;   // deep copy with requires_grad=true

  std::shared_ptr<TensorImpl> impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
  friend Tensor make_result(Shape, std::vector<double>);
};

// ---------------------------------------------------------------------------
// Tape: records one forward pass, replayed in reverse by backward().
// Freed when the scope ends; one tape per thread.
// ---------------------------------------------------------------------------

class Tape {
 public:
  struct Node {
    const char* op;
    std::shared_ptr<TensorImpl> out;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::function<void()> backprop;
  };

  static Tape* active();
  void record(Node node) { nodes_.push_back(std::move(node)); }
  size_t size() const { return nodes_.size(); }

  // Populates grads of every requires_grad tensor reachable from loss.
  void backward(const Tensor& loss);

 private:
  friend class TapeScope;
  std::vector<Node> nodes_;
};

class TapeScope {
 public:
  TapeScope();
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;
  Tape& tape() { return tape_; }

 private:
  Tape tape_;
  Tape* prev_;
};

void backward(const Tensor& loss);  // on the active tape

// ---------------------------------------------------------------------------
// Ops. Every op validates shapes (error names the op and shapes), rejects
// non-finite inputs, and appends a tape node when grads are needed.
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);  // b may broadcast: scalar/row/col
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // same broadcasting as add
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor softmax_lastdim(const Tensor& a);
Tensor logsumexp_rows(const Tensor& a);  // [N,M] -> [N,1]
Tensor layernorm(const Tensor& a, const Tensor& gain, const Tensor& bias,
                 double eps = 1e-5);
Tensor sum(const Tensor& a);   // -> scalar
Tensor mean(const Tensor& a);  // -> scalar
Tensor gather_rows(const Tensor& a, const std::vector<int64_t>& idx);
Tensor concat(const Tensor& a, const Tensor& b, int axis);
Tensor slice_cols(const Tensor& a, int64_t begin, int64_t end);
Tensor reshape(const Tensor& a, Shape shape);
// Rows come in consecutive groups of g; reduce/normalize inside each group.
Tensor softmax_rows_grouped(const Tensor& a, int64_t g);
Tensor sum_rows_grouped(const Tensor& a, int64_t g);
Tensor maxpool_rows_grouped(const Tensor& a, int64_t g);
Tensor l2norm_rows(const Tensor& a);  // rows scaled to unit norm (+1e-12)

// ---------------------------------------------------------------------------
// Adam with cosine learning-rate schedule.
// ---------------------------------------------------------------------------

struct CosineSchedule {
  double base_lr = 1e-3;
  double min_lr = 1e-5;
  int total_epochs = 1;
  double lr_at(int epoch) const;
};

struct AdamState {
  CosineSchedule schedule;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t step = 0;
  std::vector<std::vector<double>> m, v;
};

// Applies one Adam update with lr = schedule.lr_at(epoch); zeroes grads.
void adam_step(std::vector<Tensor>& params, AdamState& state, int epoch);

// ---------------------------------------------------------------------------
// Checkpoints: "JGCK" binary, little-endian.
// ---------------------------------------------------------------------------

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;
void save_checkpoint(const std::string& path, const NamedTensors& params);
NamedTensors load_checkpoint(const std::string& path);

}  // namespace jigsaw::ad
