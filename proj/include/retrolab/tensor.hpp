#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace retrolab {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a backward contribution arrives
  bool requires_grad = false;
  bool op_output = false;
  const void* tape = nullptr;  // tape that produced this node, if any
  std::int64_t id = 0;

  bool needs_grad() const { return requires_grad || op_output; }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

}  // namespace detail

class Tape;

// Multi-dimensional float64 array with an optional gradient buffer. Copies
// are shallow handles onto the same node; use clone() for a fresh leaf.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double fill);
  static Tensor from_data(Shape shape, std::vector<double> data);
  static Tensor scalar(double v);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t ndim() const { return shape().size(); }
  std::size_t dim(std::size_t i) const { return shape().at(i); }
  std::size_t numel() const;

  std::span<const double> data() const;
  // Mutable access to the raw values (parameter updates happen outside the
  // tape; mutating an activation mid-graph invalidates its gradients).
  std::span<double> mutable_data();
  double item() const;  // value of a one-element tensor
  double at(std::size_t flat_index) const;

  Tensor& set_requires_grad(bool on);
  bool requires_grad() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();  // drops the gradient buffer entirely

  std::int64_t node_id() const;
  Tensor clone() const;  // deep value copy, fresh leaf, no grad

 private:
  friend class Tape;
  explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}
  detail::TensorNode* node() const { return node_.get(); }

  std::shared_ptr<detail::TensorNode> node_;
};

// Records executed operations (inputs, output, backward rule) in execution
// order, which is already topological. backward() replays the record once,
// in reverse; a second call without clear() is an error.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void set_recording(bool on) { recording_ = on; }
  bool recording() const { return recording_; }
  std::size_t num_ops() const { return records_.size(); }
  void clear();

  // Populates gradients of every node reachable from `loss`. Requires a
  // scalar produced by this tape.
  void backward(const Tensor& loss);

  // --- primitive operations -------------------------------------------
  Tensor matmul(const Tensor& a, const Tensor& b);
  Tensor transpose(const Tensor& x);
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor scale(const Tensor& x, double c);
  // bias [n] broadcast-added to every row of x [m x n]
  Tensor add_row_bias(const Tensor& x, const Tensor& bias);
  // h + gate * c with a learned scalar gate; gate == 0 returns h bit-exactly
  Tensor gated_residual_add(const Tensor& h, const Tensor& c, const Tensor& gate);
  Tensor softmax(const Tensor& x, int axis);
  Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);
  Tensor gelu(const Tensor& x);  // tanh approximation
  Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);
  // mean negative log-softmax of the target entry per row; rows whose target
  // equals ignore_id are excluded from the mean
  Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                       std::optional<int> ignore_id = std::nullopt);
  Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count);
  Tensor concat_rows(const std::vector<Tensor>& parts);
  Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count);
  Tensor concat_cols(const std::vector<Tensor>& parts);
  Tensor reshape(const Tensor& x, Shape new_shape);
  Tensor sum(const Tensor& x);
  Tensor mean(const Tensor& x);

 private:
  struct OpRecord {
    std::int64_t output_id;
    std::function<void()> backward;
  };

  Tensor make_output(Shape shape, std::vector<double> value,
                     std::function<void(detail::TensorNode*)> make_backward);

  std::vector<OpRecord> records_;
  bool recording_ = true;
  bool backward_done_ = false;
};

}  // namespace retrolab
