#include "retrolab/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace retrolab {

namespace {

std::atomic<std::int64_t> g_next_node_id{1};

std::shared_ptr<detail::TensorNode> new_node(Shape shape, std::vector<double> value) {
  if (shape_numel(shape) != value.size()) {
    throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not match data length " +
                                std::to_string(value.size()));
  }
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->id = g_next_node_id.fetch_add(1, std::memory_order_relaxed);
  return node;
}

void check_2d(const Tensor& t, const char* what) {
  if (t.ndim() != 2) {
    throw std::invalid_argument(std::string(what) + ": expected a 2-d tensor, got shape " + shape_str(t.shape()));
  }
}

void check_defined(const Tensor& t, const char* what) {
  if (!t.defined()) throw std::invalid_argument(std::string(what) + ": undefined tensor");
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << " x ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

// --- Tensor -------------------------------------------------------------

Tensor Tensor::zeros(Shape shape) {
  std::vector<double> v(shape_numel(shape), 0.0);
  return Tensor(new_node(std::move(shape), std::move(v)));
}

Tensor Tensor::full(Shape shape, double fill) {
  std::vector<double> v(shape_numel(shape), fill);
  return Tensor(new_node(std::move(shape), std::move(v)));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data) {
  return Tensor(new_node(std::move(shape), std::move(data)));
}

Tensor Tensor::scalar(double v) { return from_data({1}, {v}); }

const Shape& Tensor::shape() const {
  if (!node_) throw std::invalid_argument("tensor: undefined");
  return node_->shape;
}

std::size_t Tensor::numel() const { return node_ ? node_->value.size() : 0; }

std::span<const double> Tensor::data() const {
  if (!node_) throw std::invalid_argument("tensor: undefined");
  return node_->value;
}

std::span<double> Tensor::mutable_data() {
  if (!node_) throw std::invalid_argument("tensor: undefined");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw std::invalid_argument("tensor: item() requires one element, shape is " + shape_str(shape()));
  }
  return node_->value[0];
}

double Tensor::at(std::size_t flat_index) const {
  if (!node_ || flat_index >= node_->value.size()) {
    throw std::out_of_range("tensor: flat index " + std::to_string(flat_index) + " out of range");
  }
  return node_->value[flat_index];
}

Tensor& Tensor::set_requires_grad(bool on) {
  if (!node_) throw std::invalid_argument("tensor: undefined");
  node_->requires_grad = on;
  return *this;
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw std::invalid_argument("tensor: gradient is absent");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

std::int64_t Tensor::node_id() const { return node_ ? node_->id : 0; }

Tensor Tensor::clone() const {
  if (!node_) return Tensor();
  return from_data(node_->shape, node_->value);
}

// --- Tape ---------------------------------------------------------------

void Tape::clear() {
  records_.clear();
  backward_done_ = false;
}

Tensor Tape::make_output(Shape shape, std::vector<double> value,
                         std::function<void(detail::TensorNode*)> make_backward) {
  auto node = new_node(std::move(shape), std::move(value));
  if (recording_) {
    node->op_output = true;
    node->tape = this;
    records_.push_back({node->id, [node, fn = std::move(make_backward)] {
                          if (node->grad.empty()) return;  // not reached from the loss
                          fn(node.get());
                        }});
  }
  return Tensor(std::move(node));
}

void Tape::backward(const Tensor& loss) {
  check_defined(loss, "backward");
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  auto* node = loss.node();
  if (node->tape != this) {
    throw std::invalid_argument("backward: loss was not produced by this tape");
  }
  if (backward_done_) {
    throw std::logic_error("backward: already ran on this tape; clear() before reusing");
  }
  backward_done_ = true;
  node->grad.assign(1, 1.0);
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    it->backward();
  }
}

// --- operations -----------------------------------------------------------

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
  check_defined(a, "matmul");
  check_defined(b, "matmul");
  check_2d(a, "matmul");
  check_2d(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) {
    throw std::invalid_argument("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = pa[i * k + kk];
      if (av == 0.0) continue;
      const double* brow = pb + kk * n;
      double* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  auto an = a.node_, bn = b.node_;
  return make_output({m, n}, std::move(out), [an, bn, m, k, n](detail::TensorNode* cn) {
    const double* dc = cn->grad.data();
    if (an->needs_grad()) {
      an->ensure_grad();
      // dA += dC . B^T
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t kk = 0; kk < k; ++kk) {
          double acc = 0.0;
          const double* dcrow = dc + i * n;
          const double* brow = bn->value.data() + kk * n;
          for (std::size_t j = 0; j < n; ++j) acc += dcrow[j] * brow[j];
          an->grad[i * k + kk] += acc;
        }
      }
    }
    if (bn->needs_grad()) {
      bn->ensure_grad();
      // dB += A^T . dC
      for (std::size_t i = 0; i < m; ++i) {
        const double* arow = an->value.data() + i * k;
        const double* dcrow = dc + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
          const double av = arow[kk];
          if (av == 0.0) continue;
          double* grow = bn->grad.data() + kk * n;
          for (std::size_t j = 0; j < n; ++j) grow[j] += av * dcrow[j];
        }
      }
    }
  });
}

Tensor Tape::transpose(const Tensor& x) {
  check_defined(x, "transpose");
  check_2d(x, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> out(r * c);
  const double* px = x.data().data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = px[i * c + j];
  auto xn = x.node_;
  return make_output({c, r}, std::move(out), [xn, r, c](detail::TensorNode* on) {
    if (!xn->needs_grad()) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) xn->grad[i * c + j] += on->grad[j * r + i];
  });
}

namespace {
void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch: " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
}
}  // namespace

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  check_defined(a, "add");
  check_defined(b, "add");
  check_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto an = a.node_, bn = b.node_;
  return make_output(a.shape(), std::move(out), [an, bn](detail::TensorNode* on) {
    if (an->needs_grad()) {
      an->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
    }
    if (bn->needs_grad()) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i];
    }
  });
}

Tensor Tape::sub(const Tensor& a, const Tensor& b) {
  check_defined(a, "sub");
  check_defined(b, "sub");
  check_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  auto an = a.node_, bn = b.node_;
  return make_output(a.shape(), std::move(out), [an, bn](detail::TensorNode* on) {
    if (an->needs_grad()) {
      an->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
    }
    if (bn->needs_grad()) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] -= on->grad[i];
    }
  });
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
  check_defined(a, "mul");
  check_defined(b, "mul");
  check_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto an = a.node_, bn = b.node_;
  return make_output(a.shape(), std::move(out), [an, bn](detail::TensorNode* on) {
    if (an->needs_grad()) {
      an->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * bn->value[i];
    }
    if (bn->needs_grad()) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i] * an->value[i];
    }
  });
}

Tensor Tape::scale(const Tensor& x, double c) {
  check_defined(x, "scale");
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * c;
  auto xn = x.node_;
  return make_output(x.shape(), std::move(out), [xn, c](detail::TensorNode* on) {
    if (!xn->needs_grad()) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i] * c;
  });
}

Tensor Tape::add_row_bias(const Tensor& x, const Tensor& bias) {
  check_defined(x, "add_row_bias");
  check_defined(bias, "add_row_bias");
  check_2d(x, "add_row_bias");
  if (bias.ndim() != 1 || bias.dim(0) != x.dim(1)) {
    throw std::invalid_argument("add_row_bias: bias shape " + shape_str(bias.shape()) +
                                " does not match row width of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = x.data()[i * cols + j] + bias.data()[j];
  auto xn = x.node_, bn = bias.node_;
  return make_output(x.shape(), std::move(out), [xn, bn, rows, cols](detail::TensorNode* on) {
    if (xn->needs_grad()) {
      xn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
    }
    if (bn->needs_grad()) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) bn->grad[j] += on->grad[i * cols + j];
    }
  });
}

Tensor Tape::gated_residual_add(const Tensor& h, const Tensor& c, const Tensor& gate) {
  check_defined(h, "gated_residual_add");
  check_defined(c, "gated_residual_add");
  check_defined(gate, "gated_residual_add");
  check_same_shape(h, c, "gated_residual_add");
  if (gate.numel() != 1) {
    throw std::invalid_argument("gated_residual_add: gate must be scalar, got " + shape_str(gate.shape()));
  }
  const double g = gate.data()[0];
  std::vector<double> out(h.numel());
  if (g == 0.0) {
    // exact pass-through; keeps the zero-gate ablation bitwise identical
    std::copy(h.data().begin(), h.data().end(), out.begin());
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = h.data()[i] + g * c.data()[i];
  }
  auto hn = h.node_, cn = c.node_, gn = gate.node_;
  return make_output(h.shape(), std::move(out), [hn, cn, gn, g](detail::TensorNode* on) {
    if (hn->needs_grad()) {
      hn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) hn->grad[i] += on->grad[i];
    }
    if (gn->needs_grad()) {
      gn->ensure_grad();
      double acc = 0.0;
      for (std::size_t i = 0; i < on->grad.size(); ++i) acc += on->grad[i] * cn->value[i];
      gn->grad[0] += acc;
    }
    if (g != 0.0 && cn->needs_grad()) {
      cn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) cn->grad[i] += g * on->grad[i];
    }
  });
}

Tensor Tape::softmax(const Tensor& x, int axis) {
  check_defined(x, "softmax");
  const int nd = static_cast<int>(x.ndim());
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) {
    throw std::invalid_argument("softmax: axis out of range for shape " + shape_str(x.shape()));
  }
  const Shape& shape = x.shape();
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[i];
  for (int i = axis + 1; i < nd; ++i) inner *= shape[i];
  const std::size_t len = shape[axis];

  std::vector<double> out(x.numel());
  const double* px = x.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = px[base];
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, px[base + j * inner]);
      double denom = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(px[base + j * inner] - mx);
        out[base + j * inner] = e;
        denom += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= denom;
    }
  }
  auto xn = x.node_;
  return make_output(x.shape(), std::move(out), [xn, outer, inner, len](detail::TensorNode* on) {
    if (!xn->needs_grad()) return;
    xn->ensure_grad();
    const double* y = on->value.data();
    const double* dy = on->grad.data();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < len; ++j) dot += dy[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t k = base + j * inner;
          xn->grad[k] += y[k] * (dy[k] - dot);
        }
      }
    }
  });
}

Tensor Tape::layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  check_defined(x, "layer_norm");
  check_defined(gain, "layer_norm");
  check_defined(bias, "layer_norm");
  if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be positive");
  if (x.ndim() < 1) throw std::invalid_argument("layer_norm: scalar input");
  const std::size_t n = x.shape().back();
  if (gain.numel() != n || bias.numel() != n) {
    throw std::invalid_argument("layer_norm: gain/bias shape " + shape_str(gain.shape()) + "/" +
                                shape_str(bias.shape()) + " does not match last dimension of " +
                                shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / n;
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  const double* px = x.data().data();
  const double* pg = gain.data().data();
  const double* pb = bias.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = px + r * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t j = 0; j < n; ++j) {
      const double xh = (row[j] - mean) * inv;
      xhat[r * n + j] = xh;
      out[r * n + j] = xh * pg[j] + pb[j];
    }
  }
  auto xn = x.node_, gn = gain.node_, bn = bias.node_;
  return make_output(x.shape(), std::move(out),
                     [xn, gn, bn, rows, n, xhat = std::move(xhat),
                      inv_std = std::move(inv_std)](detail::TensorNode* on) {
                       const double* dy = on->grad.data();
                       if (gn->needs_grad()) {
                         gn->ensure_grad();
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < n; ++j)
                             gn->grad[j] += dy[r * n + j] * xhat[r * n + j];
                       }
                       if (bn->needs_grad()) {
                         bn->ensure_grad();
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < n; ++j) bn->grad[j] += dy[r * n + j];
                       }
                       if (xn->needs_grad()) {
                         xn->ensure_grad();
                         for (std::size_t r = 0; r < rows; ++r) {
                           double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                           for (std::size_t j = 0; j < n; ++j) {
                             const double dxh = dy[r * n + j] * gn->value[j];
                             mean_dxh += dxh;
                             mean_dxh_xh += dxh * xhat[r * n + j];
                           }
                           mean_dxh /= static_cast<double>(n);
                           mean_dxh_xh /= static_cast<double>(n);
                           for (std::size_t j = 0; j < n; ++j) {
                             const double dxh = dy[r * n + j] * gn->value[j];
                             xn->grad[r * n + j] +=
                                 (dxh - mean_dxh - xhat[r * n + j] * mean_dxh_xh) * inv_std[r];
                           }
                         }
                       }
                     });
}

Tensor Tape::gelu(const Tensor& x) {
  check_defined(x, "gelu");
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.data()[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v)));
  }
  auto xn = x.node_;
  return make_output(x.shape(), std::move(out), [xn](detail::TensorNode* on) {
    if (!xn->needs_grad()) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < on->grad.size(); ++i) {
      const double v = xn->value[i];
      const double u = kC * (v + kA * v * v * v);
      const double t = std::tanh(u);
      const double sech2 = 1.0 - t * t;
      const double dudx = kC * (1.0 + 3.0 * kA * v * v);
      xn->grad[i] += on->grad[i] * (0.5 * (1.0 + t) + 0.5 * v * sech2 * dudx);
    }
  });
}

Tensor Tape::embedding_lookup(const Tensor& table, std::span<const int> ids) {
  check_defined(table, "embedding_lookup");
  check_2d(table, "embedding_lookup");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<int> idv(ids.begin(), ids.end());
  for (int id : idv) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw std::out_of_range("embedding_lookup: id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(vocab));
    }
  }
  std::vector<double> out(idv.size() * d);
  for (std::size_t i = 0; i < idv.size(); ++i) {
    const double* row = table.data().data() + static_cast<std::size_t>(idv[i]) * d;
    std::copy(row, row + d, out.begin() + i * d);
  }
  auto tn = table.node_;
  const std::size_t n = idv.size();
  return make_output({n, d}, std::move(out), [tn, idv = std::move(idv), d](detail::TensorNode* on) {
    if (!tn->needs_grad()) return;
    tn->ensure_grad();
    for (std::size_t i = 0; i < idv.size(); ++i) {
      double* grow = tn->grad.data() + static_cast<std::size_t>(idv[i]) * d;
      const double* dout = on->grad.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) grow[j] += dout[j];
    }
  });
}

Tensor Tape::cross_entropy(const Tensor& logits, std::span<const int> targets,
                           std::optional<int> ignore_id) {
  check_defined(logits, "cross_entropy");
  check_2d(logits, "cross_entropy");
  const std::size_t n = logits.dim(0), vocab = logits.dim(1);
  if (targets.size() != n) {
    throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                                std::to_string(n) + " rows");
  }
  std::vector<int> tv(targets.begin(), targets.end());
  std::size_t included = 0;
  for (int t : tv) {
    if (ignore_id && t == *ignore_id) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(t) + " outside vocabulary of " +
                              std::to_string(vocab));
    }
    ++included;
  }
  double loss = 0.0;
  const double* pl = logits.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    if (ignore_id && tv[i] == *ignore_id) continue;
    const double* row = pl + i * vocab;
    double mx = row[0];
    for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) denom += std::exp(row[j] - mx);
    loss += std::log(denom) + mx - row[tv[i]];
  }
  if (included > 0) loss /= static_cast<double>(included);
  auto ln = logits.node_;
  return make_output({1}, {loss},
                     [ln, tv = std::move(tv), ignore_id, n, vocab, included](detail::TensorNode* on) {
                       if (!ln->needs_grad() || included == 0) return;
                       ln->ensure_grad();
                       const double scale = on->grad[0] / static_cast<double>(included);
                       for (std::size_t i = 0; i < n; ++i) {
                         if (ignore_id && tv[i] == *ignore_id) continue;
                         const double* row = ln->value.data() + i * vocab;
                         double mx = row[0];
                         for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
                         double denom = 0.0;
                         for (std::size_t j = 0; j < vocab; ++j) denom += std::exp(row[j] - mx);
                         double* grow = ln->grad.data() + i * vocab;
                         for (std::size_t j = 0; j < vocab; ++j) {
                           const double p = std::exp(row[j] - mx) / denom;
                           grow[j] += scale * (p - (static_cast<std::size_t>(tv[i]) == j ? 1.0 : 0.0));
                         }
                       }
                     });
}

Tensor Tape::slice_rows(const Tensor& x, std::size_t start, std::size_t count) {
  check_defined(x, "slice_rows");
  check_2d(x, "slice_rows");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (start + count > rows) {
    throw std::out_of_range("slice_rows: [" + std::to_string(start) + ", " + std::to_string(start + count) +
                            ") exceeds " + shape_str(x.shape()));
  }
  std::vector<double> out(count * cols);
  std::copy(x.data().begin() + start * cols, x.data().begin() + (start + count) * cols, out.begin());
  auto xn = x.node_;
  return make_output({count, cols}, std::move(out), [xn, start, cols](detail::TensorNode* on) {
    if (!xn->needs_grad()) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[start * cols + i] += on->grad[i];
  });
}

Tensor Tape::concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  const std::size_t cols = parts.front().dim(1);
  std::size_t rows = 0;
  for (const Tensor& p : parts) {
    check_2d(p, "concat_rows");
    if (p.dim(1) != cols) {
      throw std::invalid_argument("concat_rows: column mismatch: " + shape_str(parts.front().shape()) +
                                  " vs " + shape_str(p.shape()));
    }
    rows += p.dim(0);
  }
  std::vector<double> out;
  out.reserve(rows * cols);
  for (const Tensor& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  std::vector<std::shared_ptr<detail::TensorNode>> nodes;
  nodes.reserve(parts.size());
  for (const Tensor& p : parts) nodes.push_back(p.node_);
  return make_output({rows, cols}, std::move(out), [nodes = std::move(nodes)](detail::TensorNode* on) {
    std::size_t offset = 0;
    for (const auto& pn : nodes) {
      const std::size_t len = pn->value.size();
      if (pn->needs_grad()) {
        pn->ensure_grad();
        for (std::size_t i = 0; i < len; ++i) pn->grad[i] += on->grad[offset + i];
      }
      offset += len;
    }
  });
}

Tensor Tape::slice_cols(const Tensor& x, std::size_t start, std::size_t count) {
  check_defined(x, "slice_cols");
  check_2d(x, "slice_cols");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (start + count > cols) {
    throw std::out_of_range("slice_cols: [" + std::to_string(start) + ", " + std::to_string(start + count) +
                            ") exceeds " + shape_str(x.shape()));
  }
  std::vector<double> out(rows * count);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = x.data()[i * cols + start + j];
  auto xn = x.node_;
  return make_output({rows, count}, std::move(out), [xn, start, rows, cols, count](detail::TensorNode* on) {
    if (!xn->needs_grad()) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < count; ++j) xn->grad[i * cols + start + j] += on->grad[i * count + j];
  });
}

Tensor Tape::concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  const std::size_t rows = parts.front().dim(0);
  std::size_t cols = 0;
  for (const Tensor& p : parts) {
    check_2d(p, "concat_cols");
    if (p.dim(0) != rows) {
      throw std::invalid_argument("concat_cols: row mismatch: " + shape_str(parts.front().shape()) +
                                  " vs " + shape_str(p.shape()));
    }
    cols += p.dim(1);
  }
  std::vector<double> out(rows * cols);
  std::size_t col_offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t pc = p.dim(1);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < pc; ++j) out[i * cols + col_offset + j] = p.data()[i * pc + j];
    col_offset += pc;
  }
  std::vector<std::shared_ptr<detail::TensorNode>> nodes;
  nodes.reserve(parts.size());
  for (const Tensor& p : parts) nodes.push_back(p.node_);
  return make_output({rows, cols}, std::move(out),
                     [nodes = std::move(nodes), rows, cols](detail::TensorNode* on) {
                       std::size_t col_offset = 0;
                       for (const auto& pn : nodes) {
                         const std::size_t pc = pn->shape[1];
                         if (pn->needs_grad()) {
                           pn->ensure_grad();
                           for (std::size_t i = 0; i < rows; ++i)
                             for (std::size_t j = 0; j < pc; ++j)
                               pn->grad[i * pc + j] += on->grad[i * cols + col_offset + j];
                         }
                         col_offset += pc;
                       }
                     });
}

Tensor Tape::reshape(const Tensor& x, Shape new_shape) {
  check_defined(x, "reshape");
  if (shape_numel(new_shape) != x.numel()) {
    throw std::invalid_argument("reshape: " + shape_str(x.shape()) + " to " + shape_str(new_shape) +
                                " changes element count");
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  auto xn = x.node_;
  return make_output(std::move(new_shape), std::move(out), [xn](detail::TensorNode* on) {
    if (!xn->needs_grad()) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
  });
}

Tensor Tape::sum(const Tensor& x) {
  check_defined(x, "sum");
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  auto xn = x.node_;
  return make_output({1}, {acc}, [xn](detail::TensorNode* on) {
    if (!xn->needs_grad()) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += on->grad[0];
  });
}

Tensor Tape::mean(const Tensor& x) {
  check_defined(x, "mean");
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  const double inv = 1.0 / static_cast<double>(x.numel());
  auto xn = x.node_;
  return make_output({1}, {acc * inv}, [xn, inv](detail::TensorNode* on) {
    if (!xn->needs_grad()) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += on->grad[0] * inv;
  });
}

}  // namespace retrolab
