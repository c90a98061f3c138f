// SPDX-License-Identifier: Apache-2.0

#ifndef SOTSEP_NN_HPP
#define SOTSEP_NN_HPP

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sotsep/autodiff.hpp"

namespace sotsep {

using Rng = std::mt19937_64;

struct NamedTensor {
  std::string name;
  Tensor value;
};

// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)).
Tensor init_uniform(Shape shape, std::size_t fan_in, Rng& rng);

struct LinearLayer {
  Tensor weight;  // in x out
  Tensor bias;    // 1 x out

  std::size_t input_size() const { return weight.rows(); }
  std::size_t output_size() const { return weight.cols(); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".weight", weight);
    f(prefix + ".bias", bias);
  }
};

LinearLayer make_linear(std::size_t in, std::size_t out, Rng& rng);
// x W + b
Tensor linear_forward(Tape& tape, const LinearLayer& layer, const Tensor& x);

// Gate layout along the 4H axis: input, forget, candidate, output.
struct LstmLayerParams {
  Tensor w_input;   // D x 4H
  Tensor w_hidden;  // H x 4H
  Tensor bias;      // 1 x 4H

  std::size_t hidden_size() const { return w_hidden.rows(); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".w_input", w_input);
    f(prefix + ".w_hidden", w_hidden);
    f(prefix + ".bias", bias);
  }
};

LstmLayerParams make_lstm_layer(std::size_t input, std::size_t hidden, Rng& rng);

struct LstmState {
  Tensor h;  // 1 x H
  Tensor c;  // 1 x H

  static LstmState zeros(std::size_t hidden);
};

LstmState lstm_step(Tape& tape, const LstmLayerParams& params, const Tensor& x_t,
                    const LstmState& state);

struct LstmStack {
  std::size_t input_size = 0;
  std::size_t hidden_size = 0;
  bool bidirectional = false;
  std::vector<LstmLayerParams> forward;
  std::vector<LstmLayerParams> backward;  // empty unless bidirectional

  std::size_t num_layers() const { return forward.size(); }
  std::size_t output_size() const { return bidirectional ? 2 * hidden_size : hidden_size; }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    for (std::size_t l = 0; l < forward.size(); ++l) {
      forward[l].visit(prefix + ".l" + std::to_string(l) + ".fwd", f);
      if (bidirectional) backward[l].visit(prefix + ".l" + std::to_string(l) + ".bwd", f);
    }
  }
};

LstmStack make_lstm_stack(std::size_t input, std::size_t hidden, std::size_t layers,
                          bool bidirectional, Rng& rng);
// T x D -> T x H (or T x 2H when bidirectional; forward half first).
Tensor lstm_forward(Tape& tape, const LstmStack& stack, const Tensor& x);

struct AttentionOutput {
  Tensor context;  // 1 x D_v
  Tensor weights;  // 1 x T
};

// softmax(q K^T / sqrt(D)) V for a single 1 x D query.
AttentionOutput attention(Tape& tape, const Tensor& query, const Tensor& keys,
                          const Tensor& values);

struct AttentionHead {
  LinearLayer query;
  LinearLayer key;
  LinearLayer value;

  std::size_t dim() const { return query.output_size(); }
  double scale() const;

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    query.visit(prefix + ".query", f);
    key.visit(prefix + ".key", f);
    value.visit(prefix + ".value", f);
  }
};

AttentionHead make_attention_head(std::size_t query_in, std::size_t memory_in, std::size_t dim,
                                  Rng& rng);

// Projected keys (stored transposed) and values for one memory sequence, so a
// decoder can attend many times without re-projecting.
struct AttentionMemory {
  Tensor keys_t;  // D x T
  Tensor values;  // T x D
  std::size_t length() const { return values.rows(); }
};

AttentionMemory project_memory(Tape& tape, const AttentionHead& head, const Tensor& memory);
AttentionOutput attend(Tape& tape, const AttentionHead& head, const AttentionMemory& memory,
                       const Tensor& state);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 5.0;  // <= 0 disables clipping
  std::int64_t warmup_steps = 0;
};

struct AdamState {
  AdamConfig config;
  std::int64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

// Bias-corrected Adam update in place. Gradients are clipped to the global
// norm first. Returns the pre-clipping global norm.
double adam_step(AdamState& state, std::vector<NamedTensor>& params,
                 std::span<const std::vector<double>> grads);

}  // namespace sotsep

#endif  // SOTSEP_NN_HPP
