// SPDX-License-Identifier: Apache-2.0

#include "sotsep/autodiff.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <sstream>

#include "sotsep/error.hpp"

namespace sotsep {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor() : data_(std::make_shared<const std::vector<double>>(1, 0.0)) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
  for (std::size_t d : shape_) {
    if (d == 0) fail(ErrorCode::kDimension, "zero-sized dimension in " + shape_to_string(shape_));
  }
  if (shape_size(shape_) != values.size()) {
    fail(ErrorCode::kDimension, "shape " + shape_to_string(shape_) + " does not hold " +
                                    std::to_string(values.size()) + " values");
  }
  data_ = std::make_shared<const std::vector<double>>(std::move(values));
}

Tensor Tensor::zeros(Shape shape) { return filled(std::move(shape), 0.0); }

Tensor Tensor::filled(Shape shape, double value) {
  const std::size_t n = shape_size(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::row(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({1, n}, std::move(values));
}

std::size_t Tensor::rows() const { return shape_.size() == 2 ? shape_[0] : 1; }

std::size_t Tensor::cols() const { return shape_.empty() ? 1 : shape_.back(); }

double Tensor::item() const {
  if (size() != 1) fail(ErrorCode::kDimension, "item() on non-scalar " + shape_to_string(shape_));
  return (*data_)[0];
}

Tensor Tensor::detached() const {
  Tensor t = *this;
  t.node_ = kNoNode;
  return t;
}

// ---- Gradients ------------------------------------------------------------

Tensor Gradients::of(const Tensor& t) const {
  auto g = raw(t);
  if (g.empty()) return Tensor::zeros(t.shape());
  return Tensor(t.shape(), std::vector<double>(g.begin(), g.end()));
}

std::span<const double> Gradients::raw(const Tensor& t) const {
  if (t.node() == kNoNode) return {};
  const auto idx = static_cast<std::size_t>(t.node());
  if (idx >= per_node_.size()) return {};
  return per_node_[idx];
}

// ---- Tape -----------------------------------------------------------------

Tensor Tape::finish(Shape shape, std::vector<double> values, NodeId node) {
#ifndef NDEBUG
  for (double v : values) assert(std::isfinite(v) && "non-finite forward value");
#endif
  Tensor t(std::move(shape), std::move(values));
  t.node_ = node;
  return t;
}

Tensor Tape::push(OpKind kind, Shape shape, std::vector<double> values,
                  std::vector<NodeId> parents, BackwardFn fn) {
  const auto id = static_cast<NodeId>(nodes_.size());
  nodes_.push_back(Node{kind, values.size(), std::move(parents), std::move(fn)});
  return finish(std::move(shape), std::move(values), id);
}

Tensor Tape::leaf(const Tensor& value) {
  const auto id = static_cast<NodeId>(nodes_.size());
  nodes_.push_back(Node{OpKind::kLeaf, value.size(), {}, {}});
  Tensor t = value;
  t.node_ = id;
  return t;
}

Gradients Tape::backward(const Tensor& loss) const {
  if (loss.size() != 1) {
    fail(ErrorCode::kDimension, "backward needs a scalar loss, got " + shape_to_string(loss.shape()));
  }
  std::vector<std::vector<double>> grads(nodes_.size());
  if (loss.node() == kNoNode) return Gradients(std::move(grads));
  if (static_cast<std::size_t>(loss.node()) >= nodes_.size()) {
    fail(ErrorCode::kInvalidArgument, "loss is not on this tape");
  }
  grads[static_cast<std::size_t>(loss.node())] = {1.0};

  std::vector<std::span<double>> dparents;
  for (auto id = loss.node(); id >= 0; --id) {
    const auto i = static_cast<std::size_t>(id);
    const Node& node = nodes_[i];
    if (grads[i].empty() || !node.backward) continue;
    dparents.clear();
    for (NodeId p : node.parents) {
      if (p == kNoNode) {
        dparents.emplace_back();
        continue;
      }
      auto& gp = grads[static_cast<std::size_t>(p)];
      if (gp.empty()) gp.assign(nodes_[static_cast<std::size_t>(p)].size, 0.0);
      dparents.emplace_back(gp);
    }
    node.backward(grads[i], dparents);
  }
  return Gradients(std::move(grads));
}

// ---- operations -----------------------------------------------------------

namespace {

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    fail(ErrorCode::kDimension,
         std::string(op) + " expects a matrix, got " + shape_to_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    fail(ErrorCode::kDimension, std::string(op) + " shape mismatch " +
                                    shape_to_string(a.shape()) + " vs " +
                                    shape_to_string(b.shape()));
  }
}

}  // namespace

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    fail(ErrorCode::kDimension, "matmul inner dimensions disagree: " +
                                    shape_to_string(a.shape()) + " x " + shape_to_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  const double* pa = a.data();
  const double* pb = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = pa[i * k + kk];
      if (av == 0.0) continue;
      const double* brow = pb + kk * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return tape.record(OpKind::kMatmul, {m, n}, std::move(out), {&a, &b}, [a, b, m, k, n] {
    return [a, b, m, k, n](std::span<const double> dc, std::span<const std::span<double>> dp) {
      const double* pa = a.data();
      const double* pb = b.data();
      if (!dp[0].empty()) {
        // dA = dC * B^T
        double* da = dp[0].data();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t kk = 0; kk < k; ++kk) {
            const double* brow = pb + kk * n;
            const double* dcrow = dc.data() + i * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += dcrow[j] * brow[j];
            da[i * k + kk] += acc;
          }
        }
      }
      if (!dp[1].empty()) {
        // dB = A^T * dC
        double* db = dp[1].data();
        for (std::size_t i = 0; i < m; ++i) {
          const double* dcrow = dc.data() + i * n;
          for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = pa[i * k + kk];
            if (av == 0.0) continue;
            double* dbrow = db + kk * n;
            for (std::size_t j = 0; j < n; ++j) dbrow[j] += av * dcrow[j];
          }
        }
      }
    };
  });
}

Tensor transpose(Tape& tape, const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.at(i, j);
  return tape.record(OpKind::kTranspose, {c, r}, std::move(out), {&a}, [r, c] {
    return [r, c](std::span<const double> d, std::span<const std::span<double>> dp) {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) dp[0][i * c + j] += d[j * r + i];
    };
  });
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return tape.record(OpKind::kAdd, a.shape(), std::move(out), {&a, &b}, [] {
    return [](std::span<const double> d, std::span<const std::span<double>> dp) {
      for (auto& g : dp) {
        if (g.empty()) continue;
        for (std::size_t i = 0; i < d.size(); ++i) g[i] += d[i];
      }
    };
  });
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return tape.record(OpKind::kSub, a.shape(), std::move(out), {&a, &b}, [] {
    return [](std::span<const double> d, std::span<const std::span<double>> dp) {
      if (!dp[0].empty())
        for (std::size_t i = 0; i < d.size(); ++i) dp[0][i] += d[i];
      if (!dp[1].empty())
        for (std::size_t i = 0; i < d.size(); ++i) dp[1][i] -= d[i];
    };
  });
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return tape.record(OpKind::kMul, a.shape(), std::move(out), {&a, &b}, [a, b] {
    return [a, b](std::span<const double> d, std::span<const std::span<double>> dp) {
      if (!dp[0].empty())
        for (std::size_t i = 0; i < d.size(); ++i) dp[0][i] += d[i] * b[i];
      if (!dp[1].empty())
        for (std::size_t i = 0; i < d.size(); ++i) dp[1][i] += d[i] * a[i];
    };
  });
}

Tensor scale(Tape& tape, const Tensor& a, double factor) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  return tape.record(OpKind::kScale, a.shape(), std::move(out), {&a}, [factor] {
    return [factor](std::span<const double> d, std::span<const std::span<double>> dp) {
      for (std::size_t i = 0; i < d.size(); ++i) dp[0][i] += d[i] * factor;
    };
  });
}

Tensor add_bias(Tape& tape, const Tensor& x, const Tensor& bias) {
  const std::size_t r = x.rows(), c = x.cols();
  if (x.rank() > 2 || bias.size() != c) {
    fail(ErrorCode::kDimension, "add_bias: bias " + shape_to_string(bias.shape()) +
                                    " does not match " + shape_to_string(x.shape()));
  }
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] + bias[j];
  return tape.record(OpKind::kAddBias, x.shape(), std::move(out), {&x, &bias}, [r, c] {
    return [r, c](std::span<const double> d, std::span<const std::span<double>> dp) {
      if (!dp[0].empty())
        for (std::size_t i = 0; i < d.size(); ++i) dp[0][i] += d[i];
      if (!dp[1].empty())
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) dp[1][j] += d[i * c + j];
    };
  });
}

namespace {

// Elementwise op with derivative expressed through the output value y.
template <class Fwd, class Deriv>
Tensor pointwise(Tape& tape, OpKind kind, const Tensor& x, Fwd fwd, Deriv deriv) {
  auto out = std::make_shared<std::vector<double>>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) (*out)[i] = fwd(x[i]);
  std::vector<double> values = *out;
  return tape.record(kind, x.shape(), std::move(values), {&x}, [out, deriv] {
    return [out, deriv](std::span<const double> d, std::span<const std::span<double>> dp) {
      for (std::size_t i = 0; i < d.size(); ++i) dp[0][i] += d[i] * deriv((*out)[i]);
    };
  });
}

double stable_sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

}  // namespace

Tensor sigmoid(Tape& tape, const Tensor& x) {
  return pointwise(tape, OpKind::kSigmoid, x, stable_sigmoid,
                   [](double y) { return y * (1.0 - y); });
}

Tensor tanh(Tape& tape, const Tensor& x) {
  return pointwise(tape, OpKind::kTanh, x, [](double v) { return std::tanh(v); },
                   [](double y) { return 1.0 - y * y; });
}

Tensor relu(Tape& tape, const Tensor& x) {
  return pointwise(tape, OpKind::kRelu, x, [](double v) { return v > 0.0 ? v : 0.0; },
                   [](double y) { return y > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(Tape& tape, const Tensor& x) {
  return pointwise(tape, OpKind::kExp, x, [](double v) { return std::exp(v); },
                   [](double y) { return y; });
}

Tensor log_softmax(Tape& tape, const Tensor& x) {
  const std::size_t r = x.size() / x.cols(), c = x.cols();
  auto out = std::make_shared<std::vector<double>>(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = x.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) (*out)[i * c + j] = row[j] - lse;
  }
  std::vector<double> values = *out;
  return tape.record(OpKind::kLogSoftmax, x.shape(), std::move(values), {&x}, [out, r, c] {
    return [out, r, c](std::span<const double> d, std::span<const std::span<double>> dp) {
      for (std::size_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += d[i * c + j];
        for (std::size_t j = 0; j < c; ++j)
          dp[0][i * c + j] += d[i * c + j] - std::exp((*out)[i * c + j]) * s;
      }
    };
  });
}

Tensor softmax(Tape& tape, const Tensor& x) {
  const std::size_t r = x.size() / x.cols(), c = x.cols();
  auto out = std::make_shared<std::vector<double>>(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = x.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += ((*out)[i * c + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) (*out)[i * c + j] /= s;
  }
  std::vector<double> values = *out;
  return tape.record(OpKind::kSoftmax, x.shape(), std::move(values), {&x}, [out, r, c] {
    return [out, r, c](std::span<const double> d, std::span<const std::span<double>> dp) {
      for (std::size_t i = 0; i < r; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += d[i * c + j] * (*out)[i * c + j];
        for (std::size_t j = 0; j < c; ++j)
          dp[0][i * c + j] += (*out)[i * c + j] * (d[i * c + j] - dot);
      }
    };
  });
}

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  const std::size_t r = x.rows(), c = x.cols();
  if (gain.size() != c || bias.size() != c) {
    fail(ErrorCode::kDimension, "layer_norm: gain/bias do not match width of " +
                                    shape_to_string(x.shape()));
  }
  if (!(eps > 0.0)) fail(ErrorCode::kInvalidArgument, "layer_norm: eps must be positive");
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(r);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += x[i * c + j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double dv = x[i * c + j] - mu;
      var += dv * dv;
    }
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (x[i * c + j] - mu) * is;
      (*xhat)[i * c + j] = h;
      out[i * c + j] = h * gain[j] + bias[j];
    }
  }
  return tape.record(
      OpKind::kLayerNorm, x.shape(), std::move(out), {&x, &gain, &bias}, [xhat, inv_std, gain, r, c] {
        return [xhat, inv_std, gain, r, c](std::span<const double> d,
                                           std::span<const std::span<double>> dp) {
          const double n = static_cast<double>(c);
          for (std::size_t i = 0; i < r; ++i) {
            double mean_dh = 0.0, mean_dh_h = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              const double dh = d[i * c + j] * gain[j];
              mean_dh += dh;
              mean_dh_h += dh * (*xhat)[i * c + j];
            }
            mean_dh /= n;
            mean_dh_h /= n;
            for (std::size_t j = 0; j < c; ++j) {
              const double h = (*xhat)[i * c + j];
              if (!dp[0].empty()) {
                const double dh = d[i * c + j] * gain[j];
                dp[0][i * c + j] += (*inv_std)[i] * (dh - mean_dh - h * mean_dh_h);
              }
              if (!dp[1].empty()) dp[1][j] += d[i * c + j] * h;
              if (!dp[2].empty()) dp[2][j] += d[i * c + j];
            }
          }
        };
      });
}

Tensor concat_time(Tape& tape, std::span<const Tensor> streams) {
  if (streams.empty()) fail(ErrorCode::kInvalidArgument, "concat_time: no streams");
  const std::size_t c = streams.front().cols();
  std::size_t total = 0;
  std::vector<std::size_t> offsets;
  for (const Tensor& s : streams) {
    if (s.rank() != 2 || s.cols() != c) {
      fail(ErrorCode::kDimension, "concat_time: feature dimension mismatch " +
                                      shape_to_string(streams.front().shape()) + " vs " +
                                      shape_to_string(s.shape()));
    }
    offsets.push_back(total * c);
    total += s.rows();
  }
  std::vector<double> out;
  out.reserve(total * c);
  for (const Tensor& s : streams) out.insert(out.end(), s.values().begin(), s.values().end());
  return tape.record_n(OpKind::kConcatRows, {total, c}, std::move(out), streams, [offsets] {
    return [offsets](std::span<const double> d, std::span<const std::span<double>> dp) {
      for (std::size_t k = 0; k < dp.size(); ++k) {
        if (dp[k].empty()) continue;
        for (std::size_t i = 0; i < dp[k].size(); ++i) dp[k][i] += d[offsets[k] + i];
      }
    };
  });
}

Tensor concat_cols(Tape& tape, std::span<const Tensor> parts) {
  if (parts.empty()) fail(ErrorCode::kInvalidArgument, "concat_cols: no parts");
  const std::size_t r = parts.front().rows();
  std::size_t total = 0;
  std::vector<std::size_t> widths, starts;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.rows() != r) {
      fail(ErrorCode::kDimension, "concat_cols: row count mismatch " +
                                      shape_to_string(parts.front().shape()) + " vs " +
                                      shape_to_string(p.shape()));
    }
    starts.push_back(total);
    widths.push_back(p.cols());
    total += p.cols();
  }
  std::vector<double> out(r * total);
  for (std::size_t k = 0; k < parts.size(); ++k)
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(parts[k].data() + i * widths[k], widths[k], out.data() + i * total + starts[k]);
  return tape.record_n(OpKind::kConcatCols, {r, total}, std::move(out), parts,
                       [widths, starts, r, total] {
                         return [widths, starts, r, total](std::span<const double> d,
                                                           std::span<const std::span<double>> dp) {
                           for (std::size_t k = 0; k < dp.size(); ++k) {
                             if (dp[k].empty()) continue;
                             for (std::size_t i = 0; i < r; ++i)
                               for (std::size_t j = 0; j < widths[k]; ++j)
                                 dp[k][i * widths[k] + j] += d[i * total + starts[k] + j];
                           }
                         };
                       });
}

Tensor slice_rows(Tape& tape, const Tensor& x, std::size_t begin, std::size_t count) {
  require_matrix(x, "slice_rows");
  if (count == 0 || begin + count > x.rows()) {
    fail(ErrorCode::kDimension, "slice_rows out of range on " + shape_to_string(x.shape()));
  }
  const std::size_t c = x.cols();
  std::vector<double> out(x.data() + begin * c, x.data() + (begin + count) * c);
  return tape.record(OpKind::kSliceRows, {count, c}, std::move(out), {&x}, [begin, c] {
    return [begin, c](std::span<const double> d, std::span<const std::span<double>> dp) {
      for (std::size_t i = 0; i < d.size(); ++i) dp[0][begin * c + i] += d[i];
    };
  });
}

Tensor slice_cols(Tape& tape, const Tensor& x, std::size_t begin, std::size_t count) {
  require_matrix(x, "slice_cols");
  const std::size_t r = x.rows(), c = x.cols();
  if (count == 0 || begin + count > c) {
    fail(ErrorCode::kDimension, "slice_cols out of range on " + shape_to_string(x.shape()));
  }
  std::vector<double> out(r * count);
  for (std::size_t i = 0; i < r; ++i)
    std::copy_n(x.data() + i * c + begin, count, out.data() + i * count);
  return tape.record(OpKind::kSliceCols, {r, count}, std::move(out), {&x}, [r, c, begin, count] {
    return [r, c, begin, count](std::span<const double> d, std::span<const std::span<double>> dp) {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < count; ++j) dp[0][i * c + begin + j] += d[i * count + j];
    };
  });
}

Tensor gather_rows(Tape& tape, const Tensor& table, std::span<const std::int32_t> ids) {
  require_matrix(table, "gather_rows");
  const std::size_t c = table.cols();
  if (ids.empty()) fail(ErrorCode::kInvalidArgument, "gather_rows: no ids");
  std::vector<double> out(ids.size() * c);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= table.rows()) {
      fail(ErrorCode::kDimension, "gather_rows: id " + std::to_string(ids[i]) +
                                      " outside table " + shape_to_string(table.shape()));
    }
    std::copy_n(table.data() + static_cast<std::size_t>(ids[i]) * c, c, out.data() + i * c);
  }
  std::vector<std::int32_t> idv(ids.begin(), ids.end());
  return tape.record(OpKind::kGatherRows, {ids.size(), c}, std::move(out), {&table}, [idv, c] {
    return [idv, c](std::span<const double> d, std::span<const std::span<double>> dp) {
      for (std::size_t i = 0; i < idv.size(); ++i)
        for (std::size_t j = 0; j < c; ++j)
          dp[0][static_cast<std::size_t>(idv[i]) * c + j] += d[i * c + j];
    };
  });
}

Tensor pick(Tape& tape, const Tensor& x, std::span<const std::int32_t> cols) {
  const std::size_t r = x.size() / x.cols(), c = x.cols();
  if (cols.size() != r) {
    fail(ErrorCode::kDimension, "pick: " + std::to_string(cols.size()) + " indices for " +
                                    shape_to_string(x.shape()));
  }
  std::vector<double> out(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (cols[i] < 0 || static_cast<std::size_t>(cols[i]) >= c) {
      fail(ErrorCode::kDimension, "pick: column " + std::to_string(cols[i]) + " out of range");
    }
    out[i] = x[i * c + static_cast<std::size_t>(cols[i])];
  }
  std::vector<std::int32_t> cv(cols.begin(), cols.end());
  return tape.record(OpKind::kPick, {r, 1}, std::move(out), {&x}, [cv, c] {
    return [cv, c](std::span<const double> d, std::span<const std::span<double>> dp) {
      for (std::size_t i = 0; i < cv.size(); ++i) dp[0][i * c + static_cast<std::size_t>(cv[i])] += d[i];
    };
  });
}

Tensor sum(Tape& tape, const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return tape.record(OpKind::kSum, {}, {s}, {&x}, [] {
    return [](std::span<const double> d, std::span<const std::span<double>> dp) {
      for (double& g : dp[0]) g += d[0];
    };
  });
}

Tensor mean(Tape& tape, const Tensor& x) {
  return scale(tape, sum(tape, x), 1.0 / static_cast<double>(x.size()));
}

double finite_diff_check(const std::function<Tensor(Tape&, const Tensor&)>& f, const Tensor& x,
                         double eps) {
  Tape tape;
  const Tensor leaf = tape.leaf(x);
  const Tensor y = f(tape, leaf);
  const Tensor analytic = tape.backward(y).of(leaf);

  double worst = 0.0;
  std::vector<double> probe(x.values().begin(), x.values().end());
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    Tape tp;
    const double fp = f(tp, Tensor(x.shape(), probe)).item();
    probe[i] = orig - eps;
    Tape tm;
    const double fm = f(tm, Tensor(x.shape(), probe)).item();
    probe[i] = orig;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace sotsep
