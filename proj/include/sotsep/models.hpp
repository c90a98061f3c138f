// SPDX-License-Identifier: Apache-2.0
//
// The four recognisers. All share an LSTM encoder and an attention decoder:
//
//   SOT      encoder -> decoder, cross-entropy only
//   SOT-H    adds one CTC head on the overlapped encoding (serialized label)
//   EncSep   adds a separator whose per-speaker streams carry CTC losses in
//            serialized order; decoding is identical to SOT
//   GEncSep  EncSep whose decoder attends over the time-concatenated streams

#ifndef SOTSEP_MODELS_HPP
#define SOTSEP_MODELS_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "sotsep/autodiff.hpp"
#include "sotsep/labels.hpp"
#include "sotsep/nn.hpp"
#include "sotsep/sample.hpp"

namespace sotsep {

enum class Variant { kSot, kSotH, kEncSep, kGEncSep };

const char* variant_name(Variant v);
Variant parse_variant(std::string_view name);
inline bool has_separator(Variant v) { return v == Variant::kEncSep || v == Variant::kGEncSep; }

struct SeparatorConfig {
  std::size_t lstm_layers = 2;
  std::size_t lstm_hidden = 32;
  bool bidirectional = false;
  std::size_t max_speakers = 2;
};

struct ModelConfig {
  Variant variant = Variant::kSot;
  std::vector<std::string> content_tokens;
  std::size_t feature_dim = 16;
  std::size_t encoder_hidden = 32;  // per direction
  std::size_t encoder_layers = 2;
  bool encoder_bidirectional = true;
  SeparatorConfig separator;
  std::size_t embed_dim = 16;
  std::size_t decoder_hidden = 32;
  std::size_t attention_dim = 32;
  // SOT-H: whether the CTC target keeps the <sc> tokens.
  bool ctc_includes_sc = true;
  double layer_norm_eps = 1e-5;

  Vocabulary vocabulary() const;
  std::size_t vocab_size() const { return content_tokens.size() + 4; }
  std::size_t encoder_dim() const {
    return encoder_bidirectional ? 2 * encoder_hidden : encoder_hidden;
  }
};

struct Separator {
  LstmStack lstm;
  Tensor norm_gain;
  Tensor norm_bias;
  std::vector<LinearLayer> heads;  // one per serialized speaker slot

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    lstm.visit(prefix + ".lstm", f);
    f(prefix + ".norm.gain", norm_gain);
    f(prefix + ".norm.bias", norm_bias);
    for (std::size_t s = 0; s < heads.size(); ++s) heads[s].visit(prefix + ".head" + std::to_string(s), f);
  }
};

struct Decoder {
  Tensor embedding;  // V x E
  LstmLayerParams cell;
  AttentionHead attention;
  LinearLayer output;  // [h; context] -> V

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".embedding", embedding);
    cell.visit(prefix + ".cell", f);
    attention.visit(prefix + ".attention", f);
    output.visit(prefix + ".output", f);
  }
};

struct ModelWeights {
  LstmStack encoder;
  Decoder decoder;
  std::optional<Separator> separator;
  std::vector<LinearLayer> ctc_heads;

  template <class F>
  void visit(F&& f) {
    encoder.visit("encoder", f);
    decoder.visit("decoder", f);
    if (separator) separator->visit("separator", f);
    for (std::size_t s = 0; s < ctc_heads.size(); ++s) ctc_heads[s].visit("ctc" + std::to_string(s), f);
  }
};

class Model {
 public:
  // Initialises encoder, then decoder, then separator and CTC heads from
  // `seed`, so variants built from one seed share their common weights.
  Model(ModelConfig config, std::uint64_t seed);
  Model(ModelConfig config, ModelWeights weights);

  const ModelConfig& config() const { return config_; }
  const ModelWeights& weights() const { return weights_; }
  Variant variant() const { return config_.variant; }

  std::vector<NamedTensor> parameters() const;
  // Names and shapes must match parameters() exactly.
  void set_parameters(const std::vector<NamedTensor>& params);
  // Copies every parameter of `other` whose name and shape match one here.
  std::size_t load_shared(const Model& other);

  // Copy whose weights are differentiable leaves on `tape`.
  Model bind(Tape& tape) const;
  // Per-parameter gradients of a bound model, in parameters() order.
  std::vector<std::vector<double>> gradients(const Gradients& grads) const;

 private:
  ModelConfig config_;
  ModelWeights weights_;
};

// T x F -> T x d_enc; no subsampling.
Tensor encode(Tape& tape, const Model& model, const Tensor& features);

// Per-speaker streams relu(head_s(layer_norm(lstm(H)))), each T x d_enc.
std::vector<Tensor> separate(Tape& tape, const Separator& separator, const Tensor& encoded,
                             double eps = 1e-5);

struct LossBreakdown {
  Tensor total;
  double ce = 0.0;
  std::optional<double> ctc;
  std::size_t attention_keys = 0;  // memory length the decoder attended over
};

// Variant objective on one sample. `weight` is the CTC share of the hybrid
// loss (ignored by SOT).
LossBreakdown forward_loss(Tape& tape, const Model& model, const MixtureSample& sample,
                           double weight);

struct DecodeResult {
  TokenSeq tokens;  // without <sos>/<eos>
  double log_score = 0.0;
  std::vector<double> step_scores;
  std::vector<TokenSeq> streams;
  bool finished = false;
  std::size_t attention_keys = 0;
};

DecodeResult decode_beam(const Model& model, const Tensor& features, std::size_t beam,
                         std::size_t max_len);

// Frame argmax, collapse repeats, drop blanks.
TokenSeq ctc_greedy_decode(const Tensor& log_probs, TokenId blank = kBlankId);

// Per-head CTC log-probabilities for separator variants (T x V each).
std::vector<Tensor> separator_ctc_log_probs(const Model& model, const Tensor& features);

}  // namespace sotsep

#endif  // SOTSEP_MODELS_HPP
