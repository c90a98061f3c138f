// SPDX-License-Identifier: Apache-2.0

#include "sotsep/sotsep.h"

#include <cstring>
#include <map>
#include <new>
#include <set>
#include <sstream>
#include <string>

#include "sotsep/checkpoint.hpp"
#include "sotsep/error.hpp"
#include "sotsep/harness.hpp"
#include "sotsep/losses.hpp"

struct sotsep_model {
  sotsep::Model model;
};

namespace {

thread_local std::string g_last_error;

sotsep_status to_status(sotsep::ErrorCode code) {
  switch (code) {
    case sotsep::ErrorCode::kInvalidArgument: return SOTSEP_ERR_INVALID_ARGUMENT;
    case sotsep::ErrorCode::kDimension: return SOTSEP_ERR_DIMENSION;
    case sotsep::ErrorCode::kInfeasible: return SOTSEP_ERR_INFEASIBLE;
    case sotsep::ErrorCode::kNumeric: return SOTSEP_ERR_NUMERIC;
    case sotsep::ErrorCode::kIo: return SOTSEP_ERR_IO;
    case sotsep::ErrorCode::kFormat: return SOTSEP_ERR_FORMAT;
    case sotsep::ErrorCode::kMismatch: return SOTSEP_ERR_MISMATCH;
  }
  return SOTSEP_ERR_INTERNAL;
}

sotsep_status set_error(sotsep_status status, std::string message) {
  g_last_error = std::move(message);
  return status;
}

template <class F>
sotsep_status guarded(F&& body) {
  g_last_error.clear();
  try {
    return body();
  } catch (const sotsep::Error& e) {
    return set_error(to_status(e.code()), e.what());
  } catch (const std::bad_alloc&) {
    return set_error(SOTSEP_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return set_error(SOTSEP_ERR_INTERNAL, e.what());
  } catch (...) {
    return set_error(SOTSEP_ERR_INTERNAL, "unknown error");
  }
}

void require(bool ok, const char* what) {
  if (!ok) sotsep::fail(sotsep::ErrorCode::kInvalidArgument, what);
}

sotsep::StreamMatching matching_of(int serialized) {
  return serialized ? sotsep::StreamMatching::kSerialized : sotsep::StreamMatching::kPermutation;
}

// Splits "a b <sc> c" into per-speaker id streams, interning tokens in `ids`.
std::vector<sotsep::TokenSeq> parse_streams(const char* text, std::map<std::string, sotsep::TokenId>& ids) {
  std::vector<sotsep::TokenSeq> streams(1);
  std::istringstream in(text);
  for (std::string tok; in >> tok;) {
    if (tok == "<sc>") {
      streams.emplace_back();
      continue;
    }
    auto [it, fresh] = ids.emplace(tok, static_cast<sotsep::TokenId>(ids.size() + 1));
    streams.back().push_back(it->second);
  }
  std::vector<sotsep::TokenSeq> out;
  for (auto& s : streams)
    if (!s.empty()) out.push_back(std::move(s));
  if (out.empty()) out.emplace_back();
  return out;
}

}  // namespace

extern "C" {

const char* sotsep_status_name(sotsep_status status) {
  switch (status) {
    case SOTSEP_OK: return "ok";
    case SOTSEP_ERR_INVALID_ARGUMENT: return "invalid_argument";
    case SOTSEP_ERR_DIMENSION: return "dimension";
    case SOTSEP_ERR_INFEASIBLE: return "infeasible";
    case SOTSEP_ERR_NUMERIC: return "numeric";
    case SOTSEP_ERR_IO: return "io";
    case SOTSEP_ERR_FORMAT: return "format";
    case SOTSEP_ERR_MISMATCH: return "mismatch";
    case SOTSEP_ERR_BUFFER_TOO_SMALL: return "buffer_too_small";
    case SOTSEP_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* sotsep_last_error(void) { return g_last_error.c_str(); }

const char* sotsep_version(void) { return "1.0.0"; }

void sotsep_set_verbosity(int level) { sotsep::set_verbosity(level); }

sotsep_status sotsep_generate(const char* spec_path, const char* out_dir) {
  return guarded([&] {
    require(spec_path && out_dir, "spec_path and out_dir are required");
    sotsep::generate_dataset(sotsep::load_task_spec(spec_path), out_dir);
    return SOTSEP_OK;
  });
}

sotsep_status sotsep_train(const char* config_path, const char* out_dir, const char* init_from,
                           double* best_dev_wer) {
  return guarded([&] {
    require(config_path && out_dir, "config_path and out_dir are required");
    sotsep::ExperimentConfig config = sotsep::load_experiment_config(config_path);
    if (init_from && *init_from) config.init_from = init_from;
    const sotsep::TrainResult result = sotsep::run_train(config, out_dir);
    if (best_dev_wer) *best_dev_wer = result.best_dev_wer;
    return SOTSEP_OK;
  });
}

sotsep_status sotsep_eval(const char* checkpoint, const char* data_dir, const char* split, size_t beam,
                          const char* out_csv, int serialized_matching, sotsep_eval_result* result) {
  return guarded([&] {
    require(checkpoint && data_dir && split && out_csv, "checkpoint, data_dir, split and out_csv are required");
    require(beam >= 1, "beam must be at least 1");
    const sotsep::EvalReport r =
        sotsep::run_eval(checkpoint, data_dir, split, beam, out_csv, matching_of(serialized_matching));
    if (result) {
      *result = {r.wer, r.errors.substitutions, r.errors.insertions, r.errors.deletions, r.reference_tokens,
                 r.samples};
    }
    return SOTSEP_OK;
  });
}

sotsep_status sotsep_compare(const char* config_dir, const uint64_t* seeds, size_t n_seeds, const char* out_csv) {
  return guarded([&] {
    require(config_dir && out_csv, "config_dir and out_csv are required");
    require(seeds && n_seeds > 0, "at least one seed is required");
    sotsep::run_compare(config_dir, std::span<const std::uint64_t>(seeds, n_seeds), out_csv);
    return SOTSEP_OK;
  });
}

sotsep_status sotsep_model_load(const char* path, sotsep_model** out) {
  return guarded([&] {
    require(path && out, "path and out are required");
    *out = nullptr;
    *out = new sotsep_model{sotsep::load_checkpoint(path)};
    return SOTSEP_OK;
  });
}

void sotsep_model_free(sotsep_model* model) { delete model; }

sotsep_status sotsep_model_save(const sotsep_model* model, const char* path) {
  return guarded([&] {
    require(model && path, "model and path are required");
    sotsep::save_checkpoint(model->model, path);
    return SOTSEP_OK;
  });
}

sotsep_status sotsep_model_variant(const sotsep_model* model, const char** out) {
  return guarded([&] {
    require(model && out, "model and out are required");
    *out = sotsep::variant_name(model->model.variant());
    return SOTSEP_OK;
  });
}

sotsep_status sotsep_model_feature_dim(const sotsep_model* model, size_t* out) {
  return guarded([&] {
    require(model && out, "model and out are required");
    *out = model->model.config().feature_dim;
    return SOTSEP_OK;
  });
}

sotsep_status sotsep_model_decode(const sotsep_model* model, const double* features, size_t frames,
                                  size_t feature_dim, size_t beam, size_t max_len, char* out, size_t out_cap,
                                  size_t* out_len) {
  return guarded([&] {
    require(model && features && out_len, "model, features and out_len are required");
    require(frames >= 1, "frames must be at least 1");
    require(beam >= 1, "beam must be at least 1");
    if (feature_dim != model->model.config().feature_dim) {
      sotsep::fail(sotsep::ErrorCode::kDimension, "feature_dim " + std::to_string(feature_dim) +
                                                      " does not match the model's " +
                                                      std::to_string(model->model.config().feature_dim));
    }
    const sotsep::Tensor x({frames, feature_dim}, std::vector<double>(features, features + frames * feature_dim));
    const sotsep::DecodeResult r = sotsep::decode_beam(model->model, x, beam, max_len ? max_len : frames + 8);
    const std::string text = model->model.config().vocabulary().decode(r.tokens);
    *out_len = text.size() + 1;
    if (!out || out_cap < text.size() + 1) {
      return set_error(SOTSEP_ERR_BUFFER_TOO_SMALL, "output buffer needs " + std::to_string(text.size() + 1) + " bytes");
    }
    std::memcpy(out, text.c_str(), text.size() + 1);
    return SOTSEP_OK;
  });
}

sotsep_status sotsep_multispeaker_wer(const char* hyp, const char* ref, int serialized_matching, double* wer,
                                      size_t* errors, size_t* reference_tokens) {
  return guarded([&] {
    require(hyp && ref, "hyp and ref are required");
    std::map<std::string, sotsep::TokenId> ids;
    const auto refs = parse_streams(ref, ids);
    const auto hyps = parse_streams(hyp, ids);
    const sotsep::WerResult r = sotsep::multispeaker_wer(hyps, refs, matching_of(serialized_matching));
    if (wer) *wer = r.rate;
    if (errors) *errors = r.errors.distance;
    if (reference_tokens) *reference_tokens = r.reference_tokens;
    return SOTSEP_OK;
  });
}

sotsep_status sotsep_ctc_loss(const double* log_probs, size_t frames, size_t vocab, const int32_t* target,
                              size_t target_len, double* loss, double* grad) {
  return guarded([&] {
    require(log_probs && loss, "log_probs and loss are required");
    require(target || target_len == 0, "target is required when target_len > 0");
    require(frames >= 1 && vocab >= 2, "need at least one frame and two classes");
    for (size_t i = 0; i < target_len; ++i) {
      require(target[i] >= 0 && static_cast<size_t>(target[i]) < vocab, "target id out of range");
    }
    sotsep::Tape tape;
    const sotsep::Tensor lp = tape.leaf(
        sotsep::Tensor({frames, vocab}, std::vector<double>(log_probs, log_probs + frames * vocab)));
    const sotsep::Tensor l = sotsep::ctc_loss(tape, lp, std::span<const int32_t>(target, target_len));
    *loss = l.item();
    if (grad) {
      const auto g = tape.backward(l).of(lp);
      std::memcpy(grad, g.data(), frames * vocab * sizeof(double));
    }
    return SOTSEP_OK;
  });
}

}  // extern "C"
