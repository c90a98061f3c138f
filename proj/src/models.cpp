// SPDX-License-Identifier: Apache-2.0

#include "sotsep/models.hpp"

#include <algorithm>
#include <map>
#include <set>

#include "sotsep/error.hpp"
#include "sotsep/losses.hpp"

namespace sotsep {

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kSot: return "SOT";
    case Variant::kSotH: return "SOT-H";
    case Variant::kEncSep: return "EncSep";
    case Variant::kGEncSep: return "GEncSep";
  }
  return "?";
}

Variant parse_variant(std::string_view name) {
  for (Variant v : {Variant::kSot, Variant::kSotH, Variant::kEncSep, Variant::kGEncSep}) {
    if (name == variant_name(v)) return v;
  }
  fail(ErrorCode::kInvalidArgument, "unknown variant '" + std::string(name) +
                                        "' (expected SOT, SOT-H, EncSep or GEncSep)");
}

Vocabulary ModelConfig::vocabulary() const {
  return Vocabulary(std::set<std::string>(content_tokens.begin(), content_tokens.end()));
}

// ---- Model ----------------------------------------------------------------

Model::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  if (config_.content_tokens.empty()) fail(ErrorCode::kInvalidArgument, "model needs a vocabulary");
  Rng rng(seed);
  const std::size_t vocab = config_.vocab_size();
  const std::size_t d_enc = config_.encoder_dim();
  weights_.encoder = make_lstm_stack(config_.feature_dim, config_.encoder_hidden,
                                     config_.encoder_layers, config_.encoder_bidirectional, rng);

  Decoder& dec = weights_.decoder;
  dec.embedding = init_uniform({vocab, config_.embed_dim}, config_.embed_dim, rng);
  dec.cell = make_lstm_layer(config_.embed_dim + config_.attention_dim, config_.decoder_hidden, rng);
  dec.attention = make_attention_head(config_.decoder_hidden, d_enc, config_.attention_dim, rng);
  dec.output = make_linear(config_.decoder_hidden + config_.attention_dim, vocab, rng);

  if (has_separator(config_.variant)) {
    const SeparatorConfig& sc = config_.separator;
    if (sc.max_speakers == 0) fail(ErrorCode::kInvalidArgument, "separator needs at least one head");
    Separator sep;
    sep.lstm = make_lstm_stack(d_enc, sc.lstm_hidden, sc.lstm_layers, sc.bidirectional, rng);
    sep.norm_gain = Tensor::filled({1, sep.lstm.output_size()}, 1.0);
    sep.norm_bias = Tensor::zeros({1, sep.lstm.output_size()});
    for (std::size_t s = 0; s < sc.max_speakers; ++s)
      sep.heads.push_back(make_linear(sep.lstm.output_size(), d_enc, rng));
    weights_.separator = std::move(sep);
    for (std::size_t s = 0; s < sc.max_speakers; ++s)
      weights_.ctc_heads.push_back(make_linear(d_enc, vocab, rng));
  } else if (config_.variant == Variant::kSotH) {
    weights_.ctc_heads.push_back(make_linear(d_enc, vocab, rng));
  }
}

Model::Model(ModelConfig config, ModelWeights weights)
    : config_(std::move(config)), weights_(std::move(weights)) {}

std::vector<NamedTensor> Model::parameters() const {
  std::vector<NamedTensor> out;
  ModelWeights w = weights_;
  w.visit([&](const std::string& name, Tensor& t) { out.push_back({name, t.detached()}); });
  return out;
}

void Model::set_parameters(const std::vector<NamedTensor>& params) {
  std::size_t i = 0;
  weights_.visit([&](const std::string& name, Tensor& t) {
    if (i >= params.size() || params[i].name != name) {
      fail(ErrorCode::kMismatch, "parameter list does not match model at '" + name + "'");
    }
    if (params[i].value.shape() != t.shape()) {
      fail(ErrorCode::kMismatch, "parameter '" + name + "' has shape " +
                                     shape_to_string(params[i].value.shape()) + ", expected " +
                                     shape_to_string(t.shape()));
    }
    t = params[i].value.detached();
    ++i;
  });
  if (i != params.size()) fail(ErrorCode::kMismatch, "parameter list has extra entries");
}

std::size_t Model::load_shared(const Model& other) {
  std::map<std::string, Tensor> theirs;
  for (auto& p : other.parameters()) theirs.emplace(p.name, p.value);
  std::size_t copied = 0;
  weights_.visit([&](const std::string& name, Tensor& t) {
    auto it = theirs.find(name);
    if (it != theirs.end() && it->second.shape() == t.shape()) {
      t = it->second;
      ++copied;
    }
  });
  return copied;
}

Model Model::bind(Tape& tape) const {
  Model bound = *this;
  bound.weights_.visit([&](const std::string&, Tensor& t) { t = tape.leaf(t); });
  return bound;
}

std::vector<std::vector<double>> Model::gradients(const Gradients& grads) const {
  std::vector<std::vector<double>> out;
  ModelWeights w = weights_;
  w.visit([&](const std::string&, Tensor& t) {
    auto g = grads.raw(t);
    if (g.empty()) {
      out.emplace_back(t.size(), 0.0);
    } else {
      out.emplace_back(g.begin(), g.end());
    }
  });
  return out;
}

// ---- forward pieces -------------------------------------------------------

Tensor encode(Tape& tape, const Model& model, const Tensor& features) {
  if (features.rank() != 2 || features.cols() != model.config().feature_dim) {
    fail(ErrorCode::kDimension, "encode: features " + shape_to_string(features.shape()) +
                                    " do not match feature dim " +
                                    std::to_string(model.config().feature_dim));
  }
  return lstm_forward(tape, model.weights().encoder, features);
}

std::vector<Tensor> separate(Tape& tape, const Separator& separator, const Tensor& encoded,
                             double eps) {
  const Tensor hidden = layer_norm(tape, lstm_forward(tape, separator.lstm, encoded),
                                   separator.norm_gain, separator.norm_bias, eps);
  std::vector<Tensor> streams;
  streams.reserve(separator.heads.size());
  for (const LinearLayer& head : separator.heads)
    streams.push_back(relu(tape, linear_forward(tape, head, hidden)));
  return streams;
}

namespace {

struct DecoderStep {
  LstmState state;
  Tensor features;  // [h; context], 1 x (H + A)
  Tensor weights;
};

DecoderStep decoder_step(Tape& tape, const Decoder& dec, const AttentionMemory& memory,
                         const LstmState& state, const Tensor& embedded) {
  const AttentionOutput att = attend(tape, dec.attention, memory, state.h);
  const Tensor in_parts[] = {embedded, att.context};
  const LstmState next = lstm_step(tape, dec.cell, concat_cols(tape, in_parts), state);
  const Tensor out_parts[] = {next.h, att.context};
  return {next, concat_cols(tape, out_parts), att.weights};
}

// The sequence the decoder attends over.
Tensor decoder_memory(Tape& tape, const Model& model, const Tensor& encoded) {
  if (model.variant() != Variant::kGEncSep) return encoded;
  const auto streams = separate(tape, *model.weights().separator, encoded, model.config().layer_norm_eps);
  return concat_time(tape, streams);
}

Tensor teacher_forced_ce(Tape& tape, const Model& model, const Tensor& memory_seq,
                         const TokenSeq& label, std::size_t& keys_out) {
  const Decoder& dec = model.weights().decoder;
  const Vocabulary vocab = model.config().vocabulary();
  TokenSeq inputs{vocab.sos()};
  inputs.insert(inputs.end(), label.begin(), label.end());
  TokenSeq targets = label;
  targets.push_back(vocab.eos());

  const AttentionMemory memory = project_memory(tape, dec.attention, memory_seq);
  keys_out = memory.length();
  const Tensor embedded = gather_rows(tape, dec.embedding, inputs);
  LstmState state = LstmState::zeros(dec.cell.hidden_size());
  std::vector<Tensor> rows;
  rows.reserve(inputs.size());
  for (std::size_t n = 0; n < inputs.size(); ++n) {
    DecoderStep step = decoder_step(tape, dec, memory, state, slice_rows(tape, embedded, n, 1));
    state = step.state;
    rows.push_back(step.features);
  }
  const Tensor logits = linear_forward(tape, dec.output, concat_time(tape, rows));
  return ce_serialized(tape, log_softmax(tape, logits), targets);
}

}  // namespace

LossBreakdown forward_loss(Tape& tape, const Model& model, const MixtureSample& sample,
                           double weight) {
  const ModelConfig& cfg = model.config();
  const Variant variant = cfg.variant;
  if (has_separator(variant) && sample.speakers.size() > cfg.separator.max_speakers) {
    fail(ErrorCode::kInvalidArgument, "sample has " + std::to_string(sample.speakers.size()) +
                                          " speakers but the separator has " +
                                          std::to_string(cfg.separator.max_speakers) + " heads");
  }
  const Tensor encoded = encode(tape, model, sample.features);
  LossBreakdown out;

  std::vector<Tensor> streams;
  Tensor memory = encoded;
  if (has_separator(variant)) {
    streams = separate(tape, *model.weights().separator, encoded, cfg.layer_norm_eps);
    if (variant == Variant::kGEncSep) memory = concat_time(tape, streams);
  }
  const Tensor ce = teacher_forced_ce(tape, model, memory, sample.label.tokens, out.attention_keys);
  out.ce = ce.item();

  switch (variant) {
    case Variant::kSot:
      out.total = ce;
      return out;
    case Variant::kSotH: {
      TokenSeq target = sample.label.tokens;
      if (!cfg.ctc_includes_sc) {
        const TokenId sc = cfg.vocabulary().sc();
        target.erase(std::remove(target.begin(), target.end(), sc), target.end());
      }
      const Tensor lp = log_softmax(tape, linear_forward(tape, model.weights().ctc_heads[0], encoded));
      const Tensor ctc = ctc_loss(tape, lp, target);
      out.ctc = ctc.item();
      out.total = hybrid(tape, ctc, ce, weight);
      return out;
    }
    case Variant::kEncSep:
    case Variant::kGEncSep: {
      std::vector<Tensor> log_probs;
      std::vector<TokenSeq> labels;
      for (std::size_t s = 0; s < streams.size(); ++s) {
        log_probs.push_back(log_softmax(tape, linear_forward(tape, model.weights().ctc_heads[s], streams[s])));
        // Unused heads are supervised towards all-blank output.
        labels.push_back(s < sample.speakers.size() ? sample.speakers[s].tokens : TokenSeq{});
      }
      const Tensor ctc = encsep_ctc(tape, log_probs, labels);
      out.ctc = ctc.item();
      out.total = hybrid(tape, ctc, ce, weight);
      return out;
    }
  }
  return out;
}

// ---- decoding -------------------------------------------------------------

DecodeResult decode_beam(const Model& model, const Tensor& features, std::size_t beam,
                         std::size_t max_len) {
  if (beam == 0) fail(ErrorCode::kInvalidArgument, "beam must be at least 1");
  const Vocabulary vocab = model.config().vocabulary();
  const Decoder& dec = model.weights().decoder;
  Tape tape;  // nothing requires gradients, so nothing is recorded
  const Tensor memory_seq = decoder_memory(tape, model, encode(tape, model, features));
  const AttentionMemory memory = project_memory(tape, dec.attention, memory_seq);

  struct Hyp {
    TokenSeq tokens;
    double score = 0.0;
    std::vector<double> step_scores;
    LstmState state;
  };
  struct Candidate {
    std::size_t parent;
    TokenId token;
    double score;
    double step;
  };

  std::vector<Hyp> active{Hyp{{}, 0.0, {}, LstmState::zeros(dec.cell.hidden_size())}};
  std::vector<Hyp> finished;
  const auto vsize = static_cast<TokenId>(vocab.size());

  for (std::size_t step = 0; step < max_len && !active.empty() && finished.size() < beam; ++step) {
    std::vector<Candidate> cands;
    std::vector<LstmState> next_states;
    for (std::size_t h = 0; h < active.size(); ++h) {
      const TokenId last = active[h].tokens.empty() ? vocab.sos() : active[h].tokens.back();
      const TokenId ids[] = {last};
      DecoderStep ds = decoder_step(tape, dec, memory, active[h].state, gather_rows(tape, dec.embedding, ids));
      const Tensor lp = log_softmax(tape, linear_forward(tape, dec.output, ds.features));
      next_states.push_back(ds.state);
      std::vector<Candidate> local;
      for (TokenId k = 0; k < vsize; ++k) {
        if (k == vocab.blank() || k == vocab.sos()) continue;
        const double s = lp[static_cast<std::size_t>(k)];
        local.push_back({h, k, active[h].score + s, s});
      }
      const std::size_t keep = std::min(beam, local.size());
      std::partial_sort(local.begin(), local.begin() + static_cast<std::ptrdiff_t>(keep), local.end(),
                        [](const Candidate& a, const Candidate& b) {
                          return a.score != b.score ? a.score > b.score : a.token < b.token;
                        });
      cands.insert(cands.end(), local.begin(), local.begin() + static_cast<std::ptrdiff_t>(keep));
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.parent != b.parent) return a.parent < b.parent;
      return a.token < b.token;
    });
    std::vector<Hyp> next;
    for (std::size_t i = 0; i < cands.size() && i < beam; ++i) {
      const Candidate& c = cands[i];
      Hyp hyp{active[c.parent].tokens, c.score, active[c.parent].step_scores, next_states[c.parent]};
      hyp.step_scores.push_back(c.step);
      if (c.token == vocab.eos()) {
        finished.push_back(std::move(hyp));
      } else {
        hyp.tokens.push_back(c.token);
        next.push_back(std::move(hyp));
      }
    }
    active = std::move(next);
  }

  const bool any_finished = !finished.empty();
  const std::vector<Hyp>& pool = any_finished ? finished : active;
  const Hyp* best = nullptr;
  double best_norm = 0.0;
  for (const Hyp& h : pool) {
    const double norm = h.score / static_cast<double>(std::max<std::size_t>(1, h.step_scores.size()));
    if (!best || norm > best_norm) {
      best = &h;
      best_norm = norm;
    }
  }
  DecodeResult result;
  result.finished = any_finished;
  result.attention_keys = memory.length();
  if (best) {
    result.tokens = best->tokens;
    result.log_score = best->score;
    result.step_scores = best->step_scores;
  }
  result.streams = split_on_sc(result.tokens, vocab.sc());
  return result;
}

TokenSeq ctc_greedy_decode(const Tensor& log_probs, TokenId blank) {
  TokenSeq out;
  const std::size_t frames = log_probs.rows(), vocab = log_probs.cols();
  TokenId prev = -1;
  for (std::size_t t = 0; t < frames; ++t) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < vocab; ++k)
      if (log_probs[t * vocab + k] > log_probs[t * vocab + best]) best = k;
    const auto id = static_cast<TokenId>(best);
    if (id != blank && id != prev) out.push_back(id);
    prev = id;
  }
  return out;
}

std::vector<Tensor> separator_ctc_log_probs(const Model& model, const Tensor& features) {
  if (!model.weights().separator) fail(ErrorCode::kInvalidArgument, "model has no separator");
  Tape tape;
  const auto streams = separate(tape, *model.weights().separator, encode(tape, model, features),
                                model.config().layer_norm_eps);
  std::vector<Tensor> out;
  for (std::size_t s = 0; s < streams.size(); ++s)
    out.push_back(log_softmax(tape, linear_forward(tape, model.weights().ctc_heads[s], streams[s])));
  return out;
}

}  // namespace sotsep
