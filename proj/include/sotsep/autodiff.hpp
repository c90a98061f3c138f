// SPDX-License-Identifier: Apache-2.0
//
// Minimal define-by-run reverse-mode differentiation over dense row-major
// float64 arrays. A Tape records every operation whose inputs require
// gradients; tensors that never touch a gradient-carrying value stay
// detached and cost nothing beyond their forward computation.

#ifndef SOTSEP_AUTODIFF_HPP
#define SOTSEP_AUTODIFF_HPP

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace sotsep {

using Shape = std::vector<std::size_t>;
using NodeId = std::int64_t;
inline constexpr NodeId kNoNode = -1;

std::string shape_to_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

class Tape;

// Immutable value with an optional link to the tape node that produced it.
// Copies share storage; nothing ever writes through a Tensor.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape);
  static Tensor filled(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor row(std::vector<double> values);  // 1 x N

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_->size(); }
  // Matrix view: rank 0 is 1x1, rank 1 is 1xN.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const { return *data_; }
  const double* data() const { return data_->data(); }
  double operator[](std::size_t i) const { return (*data_)[i]; }
  double at(std::size_t r, std::size_t c) const { return (*data_)[r * cols() + c]; }
  double item() const;

  NodeId node() const { return node_; }
  bool requires_grad() const { return node_ != kNoNode; }
  // Same values, no tape link.
  Tensor detached() const;

 private:
  friend class Tape;
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  NodeId node_ = kNoNode;
};

enum class OpKind : std::uint8_t {
  kLeaf,
  kMatmul,
  kTranspose,
  kAdd,
  kSub,
  kMul,
  kScale,
  kAddBias,
  kSigmoid,
  kTanh,
  kRelu,
  kExp,
  kLogSoftmax,
  kSoftmax,
  kLayerNorm,
  kConcatRows,
  kConcatCols,
  kSliceRows,
  kSliceCols,
  kGatherRows,
  kPick,
  kSum,
  kCustom,
};

// Maps node ids to accumulated gradients after Tape::backward.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<std::vector<double>> per_node)
      : per_node_(std::move(per_node)) {}

  // Gradient shaped like `t`; zeros when nothing flowed into it.
  Tensor of(const Tensor& t) const;
  // Empty span when nothing flowed into `t`.
  std::span<const double> raw(const Tensor& t) const;

 private:
  std::vector<std::vector<double>> per_node_;
};

class Tape {
 public:
  // dparents[k] is empty when parent k does not require a gradient.
  using BackwardFn = std::function<void(std::span<const double> dout,
                                        std::span<const std::span<double>> dparents)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers `value` as a differentiable input.
  Tensor leaf(const Tensor& value);

  // Builds the output tensor and, if any parent requires a gradient, a tape
  // node whose backward closure is produced by `make_backward()`.
  template <class MakeBackward>
  Tensor record(OpKind kind, Shape shape, std::vector<double> values,
                std::initializer_list<const Tensor*> parents,
                MakeBackward&& make_backward) {
    bool any = false;
    for (const Tensor* p : parents) any = any || p->requires_grad();
    if (!any) return finish(std::move(shape), std::move(values), kNoNode);
    std::vector<NodeId> ids;
    ids.reserve(parents.size());
    for (const Tensor* p : parents) ids.push_back(p->node());
    return push(kind, std::move(shape), std::move(values), std::move(ids),
                BackwardFn(make_backward()));
  }

  // Variable-arity form used by concat and friends.
  template <class MakeBackward>
  Tensor record_n(OpKind kind, Shape shape, std::vector<double> values,
                  std::span<const Tensor> parents, MakeBackward&& make_backward) {
    bool any = false;
    for (const Tensor& p : parents) any = any || p.requires_grad();
    if (!any) return finish(std::move(shape), std::move(values), kNoNode);
    std::vector<NodeId> ids;
    ids.reserve(parents.size());
    for (const Tensor& p : parents) ids.push_back(p.node());
    return push(kind, std::move(shape), std::move(values), std::move(ids),
                BackwardFn(make_backward()));
  }

  // Reverse topological sweep from a scalar loss.
  Gradients backward(const Tensor& loss) const;

  std::size_t size() const { return nodes_.size(); }
  OpKind kind(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)).kind; }
  const std::vector<NodeId>& parents(NodeId id) const {
    return nodes_.at(static_cast<std::size_t>(id)).parents;
  }

 private:
  struct Node {
    OpKind kind;
    std::size_t size;
    std::vector<NodeId> parents;
    BackwardFn backward;
  };

  Tensor push(OpKind kind, Shape shape, std::vector<double> values,
              std::vector<NodeId> parents, BackwardFn fn);
  static Tensor finish(Shape shape, std::vector<double> values, NodeId node);

  std::vector<Node> nodes_;
};

// ---- operations -----------------------------------------------------------

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor transpose(Tape& tape, const Tensor& a);
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, double factor);
// x: R x C, bias: C values (any rank); the only broadcasting supported.
Tensor add_bias(Tape& tape, const Tensor& x, const Tensor& bias);
Tensor sigmoid(Tape& tape, const Tensor& x);
Tensor tanh(Tape& tape, const Tensor& x);
Tensor relu(Tape& tape, const Tensor& x);
Tensor exp(Tape& tape, const Tensor& x);
// Along the last axis, max-shifted.
Tensor log_softmax(Tape& tape, const Tensor& x);
Tensor softmax(Tape& tape, const Tensor& x);
// Per-row normalisation with population variance, then gain/bias.
Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps);
// Stacks rows of same-width matrices in order.
Tensor concat_time(Tape& tape, std::span<const Tensor> streams);
Tensor concat_cols(Tape& tape, std::span<const Tensor> parts);
Tensor slice_rows(Tape& tape, const Tensor& x, std::size_t begin, std::size_t count);
Tensor slice_cols(Tape& tape, const Tensor& x, std::size_t begin, std::size_t count);
// Embedding lookup: out[i] = table[ids[i]].
Tensor gather_rows(Tape& tape, const Tensor& table, std::span<const std::int32_t> ids);
// out[i] = x[i, cols[i]], shape N x 1.
Tensor pick(Tape& tape, const Tensor& x, std::span<const std::int32_t> cols);
Tensor sum(Tape& tape, const Tensor& x);
Tensor mean(Tape& tape, const Tensor& x);

// Central-difference check of d f / d x against Tape::backward. Returns the
// worst relative error, with denominator max(|analytic|, |numeric|, 1e-8).
double finite_diff_check(const std::function<Tensor(Tape&, const Tensor&)>& f,
                         const Tensor& x, double eps = 1e-5);

}  // namespace sotsep

#endif  // SOTSEP_AUTODIFF_HPP
