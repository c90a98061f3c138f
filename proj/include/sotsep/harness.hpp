// SPDX-License-Identifier: Apache-2.0
//
// Synthetic overlapped-token task, experiment configs, and the train / eval /
// compare drivers.

#ifndef SOTSEP_HARNESS_HPP
#define SOTSEP_HARNESS_HPP

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sotsep/config.hpp"
#include "sotsep/labels.hpp"
#include "sotsep/models.hpp"
#include "sotsep/nn.hpp"
#include "sotsep/sample.hpp"

namespace sotsep {

// 0 silent, 1 progress lines on stderr, 2 chatty.
void set_verbosity(int level);
int verbosity();

struct TaskSpec {
  std::size_t vocab_size = 12;  // content tokens, named a, b, c, ...
  std::size_t feature_dim = 16;
  std::size_t min_frames_per_token = 1;
  std::size_t max_frames_per_token = 3;
  std::size_t speakers = 2;
  // Delay of each speaker's start after the previous speaker's start.
  std::size_t offset_min = 4;
  std::size_t offset_max = 12;
  std::size_t min_tokens = 3;
  std::size_t max_tokens = 5;
  bool noisy = false;
  double noise_sigma = 0.5;  // expected noise norm per frame, relative to the unit template norm
  // Reject mixtures where two speakers change token on the same frame.
  bool distinct_change_points = true;
  std::size_t train_count = 2000;
  std::size_t dev_count = 200;
  std::size_t eval_count = 200;
  std::uint64_t seed = 1;

  std::vector<std::string> content_tokens() const;
  Vocabulary vocabulary() const;
  void validate() const;
  std::vector<std::pair<std::string, std::string>> entries() const;
  static TaskSpec from_key_values(KeyValues kv);
};

TaskSpec load_task_spec(const std::filesystem::path& path);

// vocab_size x feature_dim unit-norm rows, pairwise distance > 0.1.
Tensor make_templates(const TaskSpec& spec);

// Deterministic in (spec, rng state). Throws kInfeasible when no valid
// mixture turns up within a bounded number of draws.
MixtureSample synth_mixture(const TaskSpec& spec, const Tensor& templates, Rng& rng,
                            const std::string& split = "train");

// Per-sample generator for split `split_index`, sample `index`.
Rng sample_rng(std::uint64_t seed, std::uint32_t split_index, std::uint64_t index);

inline constexpr const char* kSplitNames[3] = {"train", "dev", "eval"};

struct SplitInfo {
  std::string name;
  std::size_t count = 0;
  std::string checksum;  // FNV-1a 64 over the split's three files, hex
};

struct DatasetManifest {
  TaskSpec spec;
  std::vector<std::string> vocabulary;  // content tokens
  std::vector<SplitInfo> splits;

  const SplitInfo& split(const std::string& name) const;
};

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t state = 0xcbf29ce484222325ull);

DatasetManifest generate_dataset(const TaskSpec& spec, const std::filesystem::path& out_dir);
DatasetManifest read_manifest(const std::filesystem::path& dir);
// Recomputes the split checksum from disk; throws kMismatch when it differs.
void verify_split(const std::filesystem::path& dir, const SplitInfo& info);
std::vector<MixtureSample> load_split(const std::filesystem::path& dir, const std::string& split,
                                      const DatasetManifest& manifest);

struct ExperimentConfig {
  ModelConfig model;  // content tokens are filled from the dataset
  std::uint64_t seed = 0;
  std::filesystem::path data;
  std::optional<std::filesystem::path> init_from;
  double ctc_weight = 0.3;
  std::size_t sot_warmup_epochs = 2;
  AdamConfig adam = {.lr = 0.006};
  double lr_decay = 0.85;  // learning rate multiplier applied after each epoch
  std::size_t epochs = 15;
  std::size_t batch_size = 4;
  std::size_t beam = 4;
  std::size_t max_decode_len = 0;  // 0: frames + 8
  std::size_t average_last = 0;    // 0 disables checkpoint averaging
  StreamMatching matching = StreamMatching::kPermutation;

  static ExperimentConfig from_key_values(KeyValues kv, const std::filesystem::path& base_dir);
};

ExperimentConfig load_experiment_config(const std::filesystem::path& path);

struct EpochMetrics {
  std::size_t epoch = 0;
  double ctc_weight = 0.0;
  double train_loss = 0.0;
  double train_ce = 0.0;
  std::optional<double> train_ctc;
  double grad_norm = 0.0;  // mean pre-clip norm over the epoch's steps
  double dev_wer = 0.0;
};

struct TrainResult {
  std::vector<EpochMetrics> epochs;
  std::size_t best_epoch = 0;
  double best_dev_wer = 0.0;
  std::size_t loaded_parameters = 0;  // from init_from
  std::filesystem::path best_checkpoint;
  std::filesystem::path last_checkpoint;
  std::optional<std::filesystem::path> averaged_checkpoint;
};

// Writes metrics.csv, best.ckpt, last.ckpt (and averaged.ckpt) into out_dir.
TrainResult run_train(const ExperimentConfig& config, const std::filesystem::path& out_dir);

struct EvalReport {
  std::string variant;
  std::string split;
  std::size_t samples = 0;
  double wer = 0.0;
  EditStats errors;
  std::size_t reference_tokens = 0;
  std::vector<double> stream_wer;  // per serialized reference slot
  std::size_t unfinished = 0;
  std::vector<std::size_t> attention_keys;  // per sample
  std::vector<std::size_t> frames;          // per sample
  std::optional<double> head_ctc_wer;       // separator variants only
};

EvalReport evaluate(const Model& model, std::span<const MixtureSample> samples, std::size_t beam,
                    std::size_t max_decode_len = 0,
                    StreamMatching matching = StreamMatching::kPermutation);

std::string eval_csv_header(std::size_t streams);
std::string eval_csv_row(const EvalReport& report, std::size_t streams);

EvalReport run_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& data_dir,
                    const std::string& split, std::size_t beam, const std::filesystem::path& out_csv,
                    StreamMatching matching = StreamMatching::kPermutation);

struct CompareRow {
  std::string kind;  // "run" or "median"
  std::string variant;
  std::string config;
  std::optional<std::uint64_t> seed;
  double dev_wer = 0.0;
  double eval_wer = 0.0;
  std::optional<double> dev_rel_to_sot;
  std::optional<double> eval_rel_to_sot;
};

// Trains every *.cfg in config_dir once per seed. Runs live under
// `<out_csv stem>_runs/` next to the CSV.
std::vector<CompareRow> run_compare(const std::filesystem::path& config_dir,
                                    std::span<const std::uint64_t> seeds,
                                    const std::filesystem::path& out_csv);

std::string compare_csv(std::span<const CompareRow> rows);

}  // namespace sotsep

#endif  // SOTSEP_HARNESS_HPP
