// SPDX-License-Identifier: Apache-2.0

#include "sotsep/nn.hpp"

#include <cmath>

#include "sotsep/error.hpp"

namespace sotsep {

Tensor init_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

LinearLayer make_linear(std::size_t in, std::size_t out, Rng& rng) {
  LinearLayer layer;
  layer.weight = init_uniform({in, out}, in, rng);
  layer.bias = init_uniform({1, out}, in, rng);
  return layer;
}

Tensor linear_forward(Tape& tape, const LinearLayer& layer, const Tensor& x) {
  return add_bias(tape, matmul(tape, x, layer.weight), layer.bias);
}

LstmLayerParams make_lstm_layer(std::size_t input, std::size_t hidden, Rng& rng) {
  LstmLayerParams p;
  p.w_input = init_uniform({input, 4 * hidden}, input, rng);
  p.w_hidden = init_uniform({hidden, 4 * hidden}, hidden, rng);
  std::vector<double> b(4 * hidden, 0.0);
  for (std::size_t j = hidden; j < 2 * hidden; ++j) b[j] = 1.0;
  p.bias = Tensor({1, 4 * hidden}, std::move(b));
  return p;
}

LstmState LstmState::zeros(std::size_t hidden) {
  return {Tensor::zeros({1, hidden}), Tensor::zeros({1, hidden})};
}

namespace {

// One cell update from the input pre-activation row (x W_in + b).
LstmState lstm_cell(Tape& tape, const Tensor& input_pre, const Tensor& w_hidden,
                    const LstmState& state) {
  const std::size_t h = w_hidden.rows();
  const Tensor z = add(tape, input_pre, matmul(tape, state.h, w_hidden));
  const Tensor in_gate = sigmoid(tape, slice_cols(tape, z, 0, h));
  const Tensor forget_gate = sigmoid(tape, slice_cols(tape, z, h, h));
  const Tensor candidate = tanh(tape, slice_cols(tape, z, 2 * h, h));
  const Tensor out_gate = sigmoid(tape, slice_cols(tape, z, 3 * h, h));
  const Tensor c = add(tape, mul(tape, forget_gate, state.c), mul(tape, in_gate, candidate));
  const Tensor hn = mul(tape, out_gate, tanh(tape, c));
  return {hn, c};
}

Tensor run_direction(Tape& tape, const LstmLayerParams& p, const Tensor& x, bool reverse) {
  const std::size_t steps = x.rows();
  const Tensor pre = add_bias(tape, matmul(tape, x, p.w_input), p.bias);
  LstmState state = LstmState::zeros(p.hidden_size());
  std::vector<Tensor> outputs(steps);
  for (std::size_t k = 0; k < steps; ++k) {
    const std::size_t t = reverse ? steps - 1 - k : k;
    state = lstm_cell(tape, slice_rows(tape, pre, t, 1), p.w_hidden, state);
    outputs[t] = state.h;
  }
  return concat_time(tape, outputs);
}

}  // namespace

LstmState lstm_step(Tape& tape, const LstmLayerParams& params, const Tensor& x_t,
                    const LstmState& state) {
  if (x_t.size() != params.w_input.rows() || state.h.size() != params.hidden_size() ||
      state.c.size() != params.hidden_size()) {
    fail(ErrorCode::kDimension, "lstm_step: input " + shape_to_string(x_t.shape()) +
                                    " or state does not match w_input " +
                                    shape_to_string(params.w_input.shape()));
  }
  const Tensor pre = add_bias(tape, matmul(tape, x_t, params.w_input), params.bias);
  return lstm_cell(tape, pre, params.w_hidden, state);
}

LstmStack make_lstm_stack(std::size_t input, std::size_t hidden, std::size_t layers,
                          bool bidirectional, Rng& rng) {
  if (layers == 0 || hidden == 0) fail(ErrorCode::kInvalidArgument, "empty LSTM stack");
  LstmStack s;
  s.input_size = input;
  s.hidden_size = hidden;
  s.bidirectional = bidirectional;
  std::size_t in = input;
  for (std::size_t l = 0; l < layers; ++l) {
    s.forward.push_back(make_lstm_layer(in, hidden, rng));
    if (bidirectional) s.backward.push_back(make_lstm_layer(in, hidden, rng));
    in = s.output_size();
  }
  return s;
}

Tensor lstm_forward(Tape& tape, const LstmStack& stack, const Tensor& x) {
  if (x.rank() != 2 || x.cols() != stack.input_size) {
    fail(ErrorCode::kDimension, "lstm_forward: input " + shape_to_string(x.shape()) +
                                    " does not match input size " +
                                    std::to_string(stack.input_size));
  }
  Tensor h = x;
  for (std::size_t l = 0; l < stack.num_layers(); ++l) {
    const Tensor fwd = run_direction(tape, stack.forward[l], h, false);
    if (stack.bidirectional) {
      const Tensor bwd = run_direction(tape, stack.backward[l], h, true);
      const Tensor both[] = {fwd, bwd};
      h = concat_cols(tape, both);
    } else {
      h = fwd;
    }
  }
  return h;
}

AttentionOutput attention(Tape& tape, const Tensor& query, const Tensor& keys,
                          const Tensor& values) {
  if (query.cols() != keys.cols() || keys.rows() != values.rows()) {
    fail(ErrorCode::kDimension, "attention: query " + shape_to_string(query.shape()) +
                                    ", keys " + shape_to_string(keys.shape()) + ", values " +
                                    shape_to_string(values.shape()));
  }
  const Tensor scores = scale(tape, matmul(tape, query, transpose(tape, keys)),
                              1.0 / std::sqrt(static_cast<double>(keys.cols())));
  const Tensor weights = softmax(tape, scores);
  return {matmul(tape, weights, values), weights};
}

double AttentionHead::scale() const { return 1.0 / std::sqrt(static_cast<double>(dim())); }

AttentionHead make_attention_head(std::size_t query_in, std::size_t memory_in, std::size_t dim,
                                  Rng& rng) {
  AttentionHead head;
  head.query = make_linear(query_in, dim, rng);
  head.key = make_linear(memory_in, dim, rng);
  head.value = make_linear(memory_in, dim, rng);
  return head;
}

AttentionMemory project_memory(Tape& tape, const AttentionHead& head, const Tensor& memory) {
  return {transpose(tape, linear_forward(tape, head.key, memory)),
          linear_forward(tape, head.value, memory)};
}

AttentionOutput attend(Tape& tape, const AttentionHead& head, const AttentionMemory& memory,
                       const Tensor& state) {
  const Tensor q = linear_forward(tape, head.query, state);
  const Tensor scores = scale(tape, matmul(tape, q, memory.keys_t), head.scale());
  const Tensor weights = softmax(tape, scores);
  return {matmul(tape, weights, memory.values), weights};
}

double adam_step(AdamState& state, std::vector<NamedTensor>& params,
                 std::span<const std::vector<double>> grads) {
  if (grads.size() != params.size()) {
    fail(ErrorCode::kDimension, "adam_step: " + std::to_string(grads.size()) +
                                    " gradients for " + std::to_string(params.size()) +
                                    " parameters");
  }
  double sq = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (grads[k].size() != params[k].value.size()) {
      fail(ErrorCode::kDimension, "adam_step: gradient for " + params[k].name + " has " +
                                      std::to_string(grads[k].size()) + " entries, expected " +
                                      std::to_string(params[k].value.size()));
    }
    for (double g : grads[k]) {
      if (!std::isfinite(g)) fail(ErrorCode::kNumeric, "non-finite gradient in " + params[k].name);
      sq += g * g;
    }
  }
  const double norm = std::sqrt(sq);
  const AdamConfig& cfg = state.config;
  const double clip = (cfg.clip_norm > 0.0 && norm > cfg.clip_norm) ? cfg.clip_norm / norm : 1.0;

  if (state.first_moment.size() != params.size()) {
    state.first_moment.assign(params.size(), {});
    state.second_moment.assign(params.size(), {});
    for (std::size_t k = 0; k < params.size(); ++k) {
      state.first_moment[k].assign(params[k].value.size(), 0.0);
      state.second_moment[k].assign(params[k].value.size(), 0.0);
    }
  }
  ++state.step;
  const auto t = static_cast<double>(state.step);
  double lr = cfg.lr;
  if (cfg.warmup_steps > 0 && state.step < cfg.warmup_steps) {
    lr *= t / static_cast<double>(cfg.warmup_steps);
  }
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);

  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    std::vector<double> updated(params[k].value.values().begin(), params[k].value.values().end());
    for (std::size_t i = 0; i < updated.size(); ++i) {
      const double g = grads[k][i] * clip;
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      updated[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
    params[k].value = Tensor(params[k].value.shape(), std::move(updated));
  }
  return norm;
}

}  // namespace sotsep
