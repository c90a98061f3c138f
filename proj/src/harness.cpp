// SPDX-License-Identifier: Apache-2.0

#include "sotsep/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"
#include "sotsep/checkpoint.hpp"
#include "sotsep/error.hpp"
#include "sotsep/losses.hpp"

namespace sotsep {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

int g_verbosity = 0;

void log(int level, const std::string& msg) {
  if (g_verbosity >= level) std::cerr << msg << '\n';
}

constexpr char kFeatureMagic[8] = {'S', 'O', 'T', 'S', 'E', 'P', 'F', 'T'};
constexpr std::uint32_t kFeatureVersion = 1;
constexpr int kMaxDraws = 10000;

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return std::move(buf).str();
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::kIo, "write failed for " + path.string());
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::size_t draw(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  return lines;
}

std::string csv_number(std::optional<double> v) { return v ? format_double(*v) : std::string(); }

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

void set_verbosity(int level) { g_verbosity = level; }
int verbosity() { return g_verbosity; }

// ---- task spec ------------------------------------------------------------

std::vector<std::string> TaskSpec::content_tokens() const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < vocab_size; ++i) out.emplace_back(1, static_cast<char>('a' + i));
  return out;
}

Vocabulary TaskSpec::vocabulary() const {
  const auto tokens = content_tokens();
  return Vocabulary(std::set<std::string>(tokens.begin(), tokens.end()));
}

void TaskSpec::validate() const {
  auto bad = [](const std::string& msg) { fail(ErrorCode::kInvalidArgument, "task spec: " + msg); };
  if (vocab_size < 2 || vocab_size > 26) bad("vocab_size must be in [2, 26]");
  if (feature_dim == 0) bad("feature_dim must be positive");
  if (min_frames_per_token == 0 || min_frames_per_token > max_frames_per_token) {
    bad("frames per token needs 1 <= min_frames_per_token <= max_frames_per_token");
  }
  if (speakers == 0 || speakers > 4) bad("speakers must be in [1, 4]");
  if (offset_min == 0 || offset_min > offset_max) bad("offsets need 1 <= offset_min <= offset_max");
  if (min_tokens == 0 || min_tokens > max_tokens) bad("tokens need 1 <= min_tokens <= max_tokens");
  if (!(noise_sigma >= 0.0)) bad("noise_sigma must be non-negative");
  if (train_count == 0 || dev_count == 0 || eval_count == 0) bad("every split needs at least one sample");
}

std::vector<std::pair<std::string, std::string>> TaskSpec::entries() const {
  auto n = [](std::size_t v) { return std::to_string(v); };
  return {
      {"vocab_size", n(vocab_size)},
      {"feature_dim", n(feature_dim)},
      {"min_frames_per_token", n(min_frames_per_token)},
      {"max_frames_per_token", n(max_frames_per_token)},
      {"speakers", n(speakers)},
      {"offset_min", n(offset_min)},
      {"offset_max", n(offset_max)},
      {"min_tokens", n(min_tokens)},
      {"max_tokens", n(max_tokens)},
      {"noise", noisy ? "noisy" : "clean"},
      {"noise_sigma", format_double(noise_sigma)},
      {"distinct_change_points", distinct_change_points ? "true" : "false"},
      {"train_count", n(train_count)},
      {"dev_count", n(dev_count)},
      {"eval_count", n(eval_count)},
      {"seed", std::to_string(seed)},
  };
}

TaskSpec TaskSpec::from_key_values(KeyValues kv) {
  TaskSpec s;
  s.vocab_size = kv.take_size("vocab_size", s.vocab_size);
  s.feature_dim = kv.take_size("feature_dim", s.feature_dim);
  s.min_frames_per_token = kv.take_size("min_frames_per_token", s.min_frames_per_token);
  s.max_frames_per_token = kv.take_size("max_frames_per_token", s.max_frames_per_token);
  s.speakers = kv.take_size("speakers", s.speakers);
  s.offset_min = kv.take_size("offset_min", s.offset_min);
  s.offset_max = kv.take_size("offset_max", s.offset_max);
  s.min_tokens = kv.take_size("min_tokens", s.min_tokens);
  s.max_tokens = kv.take_size("max_tokens", s.max_tokens);
  const std::string noise = kv.take_string("noise", "clean");
  if (noise != "clean" && noise != "noisy") {
    fail(ErrorCode::kFormat, kv.source() + ": noise must be 'clean' or 'noisy', got '" + noise + "'");
  }
  s.noisy = noise == "noisy";
  s.noise_sigma = kv.take_double("noise_sigma", s.noise_sigma);
  s.distinct_change_points = kv.take_flag("distinct_change_points", s.distinct_change_points);
  s.train_count = kv.take_size("train_count", s.train_count);
  s.dev_count = kv.take_size("dev_count", s.dev_count);
  s.eval_count = kv.take_size("eval_count", s.eval_count);
  s.seed = kv.take_u64("seed", s.seed);
  kv.finish();
  s.validate();
  return s;
}

TaskSpec load_task_spec(const fs::path& path) { return TaskSpec::from_key_values(KeyValues::load(path)); }

// ---- synthesis ------------------------------------------------------------

Rng sample_rng(std::uint64_t seed, std::uint32_t split_index, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), split_index,
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return Rng(seq);
}

Tensor make_templates(const TaskSpec& spec) {
  spec.validate();
  // Split index 0xffff is reserved for the templates.
  Rng rng = sample_rng(spec.seed, 0xffff, 0);
  std::normal_distribution<double> normal;
  const std::size_t v = spec.vocab_size, f = spec.feature_dim;
  for (int attempt = 0; attempt < 1000; ++attempt) {
    std::vector<double> rows(v * f);
    for (std::size_t r = 0; r < v; ++r) {
      double norm = 0.0;
      do {
        norm = 0.0;
        for (std::size_t c = 0; c < f; ++c) {
          rows[r * f + c] = normal(rng);
          norm += rows[r * f + c] * rows[r * f + c];
        }
      } while (norm < 1e-12);
      norm = std::sqrt(norm);
      for (std::size_t c = 0; c < f; ++c) rows[r * f + c] /= norm;
    }
    double min_dist = 1e300;
    for (std::size_t a = 0; a < v; ++a) {
      for (std::size_t b = a + 1; b < v; ++b) {
        double d = 0.0;
        for (std::size_t c = 0; c < f; ++c) d += (rows[a * f + c] - rows[b * f + c]) * (rows[a * f + c] - rows[b * f + c]);
        min_dist = std::min(min_dist, std::sqrt(d));
      }
    }
    if (min_dist > 0.1) return Tensor({v, f}, std::move(rows));
  }
  fail(ErrorCode::kInfeasible, "cannot place " + std::to_string(v) + " distinct templates in " +
                                   std::to_string(f) + " dimensions");
}

MixtureSample synth_mixture(const TaskSpec& spec, const Tensor& templates, Rng& rng, const std::string& split) {
  if (templates.rank() != 2 || templates.rows() != spec.vocab_size || templates.cols() != spec.feature_dim) {
    fail(ErrorCode::kDimension, "templates do not match the task spec");
  }
  const Vocabulary vocab = spec.vocabulary();
  const std::size_t n_spk = spec.speakers, f = spec.feature_dim;

  for (int attempt = 0; attempt < kMaxDraws; ++attempt) {
    std::vector<SpeakerSegment> speakers(n_spk);
    std::vector<std::vector<std::size_t>> durations(n_spk);
    std::vector<std::size_t> ends(n_spk);
    std::size_t start = 0;
    for (std::size_t s = 0; s < n_spk; ++s) {
      if (s > 0) start += draw(rng, spec.offset_min, spec.offset_max);
      speakers[s].start_offset = start;
      const std::size_t n_tok = draw(rng, spec.min_tokens, spec.max_tokens);
      TokenId prev = -1;
      std::size_t len = 0;
      for (std::size_t k = 0; k < n_tok; ++k) {
        // Uniform over content tokens other than the previous one.
        auto id = static_cast<TokenId>(1 + draw(rng, 0, spec.vocab_size - (prev < 0 ? 1 : 2)));
        if (prev >= 0 && id >= prev) ++id;
        speakers[s].tokens.push_back(id);
        prev = id;
        durations[s].push_back(draw(rng, spec.min_frames_per_token, spec.max_frames_per_token));
        len += durations[s].back();
      }
      ends[s] = start + len;
    }

    bool ok = true;
    for (std::size_t s = 1; s < n_spk && ok; ++s) ok = speakers[s].start_offset < ends[s - 1];
    if (ok && spec.distinct_change_points) {
      std::map<std::size_t, std::size_t> owner;
      for (std::size_t s = 0; s < n_spk && ok; ++s) {
        std::size_t t = speakers[s].start_offset;
        std::vector<std::size_t> events{t};
        for (std::size_t d : durations[s]) events.push_back(t += d);
        for (std::size_t e : events) {
          auto [it, fresh] = owner.emplace(e, s);
          if (!fresh && it->second != s) ok = false;
        }
      }
    }
    if (!ok) continue;

    SerializedLabel label = serialize(speakers, vocab.sc());
    const std::size_t frames = *std::max_element(ends.begin(), ends.end());
    if (frames < ctc_min_frames(label.tokens)) continue;

    std::vector<double> canvas(frames * f, 0.0);
    for (std::size_t s = 0; s < n_spk; ++s) {
      std::size_t t = speakers[s].start_offset;
      for (std::size_t k = 0; k < speakers[s].tokens.size(); ++k) {
        const auto row = static_cast<std::size_t>(speakers[s].tokens[k] - 1);
        for (std::size_t d = 0; d < durations[s][k]; ++d, ++t) {
          for (std::size_t c = 0; c < f; ++c) canvas[t * f + c] += templates.at(row, c);
        }
      }
    }
    if (spec.noisy && spec.noise_sigma > 0.0) {
      std::normal_distribution<double> noise(0.0, spec.noise_sigma / std::sqrt(static_cast<double>(f)));
      for (double& x : canvas) x += noise(rng);
    }
    MixtureSample out;
    out.features = Tensor({frames, f}, std::move(canvas));
    out.speakers = std::move(speakers);
    out.label = std::move(label);
    out.split = split;
    return out;
  }
  fail(ErrorCode::kInfeasible, "task spec admits no valid mixture after " + std::to_string(kMaxDraws) +
                                   " draws (check offsets against utterance lengths)");
}

// ---- dataset files ----------------------------------------------------------

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t state) {
  for (unsigned char c : bytes) {
    state ^= c;
    state *= 0x100000001b3ull;
  }
  return state;
}

const SplitInfo& DatasetManifest::split(const std::string& name) const {
  for (const auto& s : splits) {
    if (s.name == name) return s;
  }
  fail(ErrorCode::kInvalidArgument, "dataset has no split '" + name + "'");
}

namespace {

struct SplitFiles {
  std::string features, labels, offsets;

  std::string checksum() const {
    std::uint64_t h = fnv1a64(features);
    h = fnv1a64(labels, h);
    return hex64(fnv1a64(offsets, h));
  }
};

SplitFiles encode_split(const std::vector<MixtureSample>& samples, const Vocabulary& vocab) {
  std::vector<NamedTensor> tensors;
  std::string labels, offsets;
  char name[32];
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::snprintf(name, sizeof name, "s%06zu", i);
    tensors.push_back({name, samples[i].features});
    labels += vocab.decode(samples[i].label.tokens) + "\n";
    std::string line;
    for (const auto& sp : samples[i].speakers) {
      if (!line.empty()) line += ' ';
      line += std::to_string(sp.start_offset);
    }
    offsets += line + "\n";
  }
  std::ostringstream feat(std::ios::binary);
  feat.write(kFeatureMagic, sizeof kFeatureMagic);
  write_u32(feat, kFeatureVersion);
  write_tensor_block(feat, tensors);
  return {std::move(feat).str(), std::move(labels), std::move(offsets)};
}

SplitFiles read_split_files(const fs::path& dir, const std::string& split) {
  return {read_file(dir / (split + ".features")), read_file(dir / (split + ".labels")),
          read_file(dir / (split + ".offsets"))};
}

}  // namespace

DatasetManifest generate_dataset(const TaskSpec& spec, const fs::path& out_dir) {
  spec.validate();
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) fail(ErrorCode::kIo, "cannot create " + out_dir.string() + ": " + ec.message());
  const Tensor templates = make_templates(spec);
  const Vocabulary vocab = spec.vocabulary();

  DatasetManifest manifest;
  manifest.spec = spec;
  manifest.vocabulary = spec.content_tokens();
  const std::size_t counts[3] = {spec.train_count, spec.dev_count, spec.eval_count};
  for (std::uint32_t k = 0; k < 3; ++k) {
    std::vector<MixtureSample> samples;
    samples.reserve(counts[k]);
    for (std::size_t i = 0; i < counts[k]; ++i) {
      Rng rng = sample_rng(spec.seed, k, i);
      samples.push_back(synth_mixture(spec, templates, rng, kSplitNames[k]));
    }
    const SplitFiles files = encode_split(samples, vocab);
    const std::string name = kSplitNames[k];
    write_file(out_dir / (name + ".features"), files.features);
    write_file(out_dir / (name + ".labels"), files.labels);
    write_file(out_dir / (name + ".offsets"), files.offsets);
    manifest.splits.push_back({name, counts[k], files.checksum()});
    log(1, "generated " + name + ": " + std::to_string(counts[k]) + " samples");
  }

  json j;
  j["format"] = "sotsep-dataset";
  j["version"] = 1;
  json spec_obj = json::object();
  for (const auto& [k, v] : spec.entries()) spec_obj[k] = v;
  j["spec"] = spec_obj;
  j["vocabulary"] = manifest.vocabulary;
  json splits = json::array();
  for (const auto& s : manifest.splits) splits.push_back({{"name", s.name}, {"count", s.count}, {"checksum", s.checksum}});
  j["splits"] = splits;
  write_file(out_dir / "manifest.json", j.dump(2) + "\n");
  return manifest;
}

DatasetManifest read_manifest(const fs::path& dir) {
  const fs::path path = dir / "manifest.json";
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    fail(ErrorCode::kFormat, path.string() + ": " + e.what());
  }
  try {
    if (j.at("format") != "sotsep-dataset" || j.at("version") != 1) {
      fail(ErrorCode::kFormat, path.string() + ": not a version 1 dataset manifest");
    }
    KeyValues kv = KeyValues::parse("", path.string());
    for (const auto& [k, v] : j.at("spec").items()) kv.set(k, v.get<std::string>());
    DatasetManifest m;
    m.spec = TaskSpec::from_key_values(std::move(kv));
    m.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
    if (m.vocabulary != m.spec.content_tokens()) fail(ErrorCode::kMismatch, path.string() + ": vocabulary does not match spec");
    for (const auto& s : j.at("splits")) {
      m.splits.push_back({s.at("name").get<std::string>(), s.at("count").get<std::size_t>(),
                          s.at("checksum").get<std::string>()});
    }
    return m;
  } catch (const json::exception& e) {
    fail(ErrorCode::kFormat, path.string() + ": " + e.what());
  }
}

void verify_split(const fs::path& dir, const SplitInfo& info) {
  const std::string sum = read_split_files(dir, info.name).checksum();
  if (sum != info.checksum) {
    fail(ErrorCode::kMismatch, "split '" + info.name + "' checksum " + sum + " does not match manifest " + info.checksum);
  }
}

std::vector<MixtureSample> load_split(const fs::path& dir, const std::string& split, const DatasetManifest& manifest) {
  const SplitInfo& info = manifest.split(split);
  const SplitFiles files = read_split_files(dir, split);
  if (files.checksum() != info.checksum) {
    fail(ErrorCode::kMismatch, "split '" + split + "' checksum does not match manifest");
  }
  std::istringstream feat(files.features, std::ios::binary);
  char magic[8];
  feat.read(magic, sizeof magic);
  if (feat.gcount() != 8 || !std::equal(magic, magic + 8, kFeatureMagic)) {
    fail(ErrorCode::kFormat, split + ".features: bad magic");
  }
  if (read_u32(feat) != kFeatureVersion) fail(ErrorCode::kFormat, split + ".features: unsupported version");
  const auto tensors = read_tensor_block(feat);
  const auto labels = split_lines(files.labels);
  const auto offsets = split_lines(files.offsets);
  if (tensors.size() != info.count || labels.size() != info.count || offsets.size() != info.count) {
    fail(ErrorCode::kFormat, "split '" + split + "' sample counts disagree with manifest");
  }
  const Vocabulary vocab = manifest.spec.vocabulary();
  std::vector<MixtureSample> out(info.count);
  for (std::size_t i = 0; i < info.count; ++i) {
    MixtureSample& s = out[i];
    s.features = tensors[i].value;
    if (s.features.rank() != 2 || s.features.cols() != manifest.spec.feature_dim) {
      fail(ErrorCode::kFormat, split + " sample " + std::to_string(i) + " has bad feature shape");
    }
    s.label.tokens = vocab.encode(labels[i]);
    const auto streams = split_on_sc(s.label.tokens, vocab.sc());
    std::istringstream in(offsets[i]);
    std::vector<std::size_t> offs;
    for (std::size_t o; in >> o;) offs.push_back(o);
    if (offs.size() != streams.size()) {
      fail(ErrorCode::kFormat, split + " sample " + std::to_string(i) + ": offsets and label disagree");
    }
    for (std::size_t k = 0; k < streams.size(); ++k) s.speakers.push_back({offs[k], streams[k]});
    s.label.speaker_count = streams.size();
    s.split = split;
  }
  return out;
}

// ---- experiment config ------------------------------------------------------

ExperimentConfig ExperimentConfig::from_key_values(KeyValues kv, const fs::path& base_dir) {
  ExperimentConfig c;
  ModelConfig& m = c.model;
  m.variant = parse_variant(kv.take_required("variant"));
  c.seed = parse_u64_value(kv.take_required("seed"), kv.source() + ": seed");
  c.data = base_dir / kv.take_required("data");
  if (auto init = kv.take("init_from"); init && !init->empty()) c.init_from = base_dir / *init;
  c.ctc_weight = kv.take_double("ctc_weight", c.ctc_weight);
  c.sot_warmup_epochs = kv.take_size("sot_warmup_epochs", c.sot_warmup_epochs);
  c.adam.lr = kv.take_double("lr", c.adam.lr);
  c.lr_decay = kv.take_double("lr_decay", c.lr_decay);
  c.adam.beta1 = kv.take_double("beta1", c.adam.beta1);
  c.adam.beta2 = kv.take_double("beta2", c.adam.beta2);
  c.adam.eps = kv.take_double("adam_eps", c.adam.eps);
  c.adam.clip_norm = kv.take_double("clip_norm", c.adam.clip_norm);
  c.adam.warmup_steps = static_cast<std::int64_t>(kv.take_size("warmup_steps", 0));
  c.epochs = kv.take_size("epochs", c.epochs);
  c.batch_size = kv.take_size("batch_size", c.batch_size);
  c.beam = kv.take_size("beam", c.beam);
  c.max_decode_len = kv.take_size("max_decode_len", c.max_decode_len);
  c.average_last = kv.take_size("average_last", c.average_last);
  const std::string matching = kv.take_string("matching", "permutation");
  if (matching == "permutation") {
    c.matching = StreamMatching::kPermutation;
  } else if (matching == "serialized") {
    c.matching = StreamMatching::kSerialized;
  } else {
    fail(ErrorCode::kFormat, kv.source() + ": matching must be 'permutation' or 'serialized'");
  }
  m.encoder_hidden = kv.take_size("encoder_hidden", m.encoder_hidden);
  m.encoder_layers = kv.take_size("encoder_layers", m.encoder_layers);
  m.encoder_bidirectional = kv.take_flag("encoder_bidirectional", m.encoder_bidirectional);
  m.separator.lstm_layers = kv.take_size("separator_layers", m.separator.lstm_layers);
  m.separator.lstm_hidden = kv.take_size("separator_hidden", m.separator.lstm_hidden);
  m.separator.bidirectional = kv.take_flag("separator_bidirectional", m.separator.bidirectional);
  m.separator.max_speakers = kv.take_size("max_speakers", m.separator.max_speakers);
  m.embed_dim = kv.take_size("embed_dim", m.embed_dim);
  m.decoder_hidden = kv.take_size("decoder_hidden", m.decoder_hidden);
  m.attention_dim = kv.take_size("attention_dim", m.attention_dim);
  m.ctc_includes_sc = kv.take_flag("ctc_includes_sc", m.ctc_includes_sc);
  m.layer_norm_eps = kv.take_double("layer_norm_eps", m.layer_norm_eps);
  kv.finish();

  auto bad = [&](const std::string& msg) { fail(ErrorCode::kInvalidArgument, kv.source() + ": " + msg); };
  if (!(c.ctc_weight >= 0.0 && c.ctc_weight <= 1.0)) bad("ctc_weight must be in [0, 1]");
  if (c.epochs == 0) bad("epochs must be positive");
  if (c.batch_size == 0) bad("batch_size must be positive");
  if (c.beam == 0) bad("beam must be positive");
  if (!(c.adam.lr > 0.0)) bad("lr must be positive");
  if (!(c.lr_decay > 0.0 && c.lr_decay <= 1.0)) bad("lr_decay must be in (0, 1]");
  if (m.encoder_layers == 0 || m.encoder_hidden == 0) bad("encoder needs at least one layer and unit");
  if (has_separator(m.variant) && (m.separator.lstm_layers == 0 || m.separator.max_speakers == 0)) {
    bad("separator needs at least one layer and one head");
  }
  return c;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  return ExperimentConfig::from_key_values(KeyValues::load(path), path.parent_path());
}

// ---- evaluation -------------------------------------------------------------

EvalReport evaluate(const Model& model, std::span<const MixtureSample> samples, std::size_t beam,
                    std::size_t max_decode_len, StreamMatching matching) {
  EvalReport r;
  r.variant = variant_name(model.variant());
  r.samples = samples.size();
  if (!samples.empty()) r.split = samples.front().split;
  const TokenId blank = kBlankId;
  std::vector<std::size_t> stream_err, stream_ref;
  EditStats head_errors;
  std::size_t head_refs = 0;
  for (const MixtureSample& s : samples) {
    const std::size_t max_len = max_decode_len ? max_decode_len : s.features.rows() + 8;
    const DecodeResult d = decode_beam(model, s.features, beam, max_len);
    const auto refs = s.references();
    const WerResult w = multispeaker_wer(d.streams, refs, matching);
    r.errors += w.errors;
    r.reference_tokens += w.reference_tokens;
    if (stream_err.size() < refs.size()) {
      stream_err.resize(refs.size(), 0);
      stream_ref.resize(refs.size(), 0);
    }
    for (std::size_t k = 0; k < refs.size(); ++k) {
      stream_err[k] += w.per_stream[k].distance;
      stream_ref[k] += refs[k].size();
    }
    if (!d.finished) ++r.unfinished;
    r.attention_keys.push_back(d.attention_keys);
    r.frames.push_back(s.features.rows());

    if (has_separator(model.variant())) {
      std::vector<TokenSeq> heads;
      for (const Tensor& lp : separator_ctc_log_probs(model, s.features)) heads.push_back(ctc_greedy_decode(lp, blank));
      const WerResult hw = multispeaker_wer(heads, refs, StreamMatching::kSerialized);
      head_errors += hw.errors;
      head_refs += hw.reference_tokens;
    }
  }
  r.wer = r.reference_tokens ? static_cast<double>(r.errors.distance) / static_cast<double>(r.reference_tokens) : 0.0;
  for (std::size_t k = 0; k < stream_err.size(); ++k) {
    r.stream_wer.push_back(stream_ref[k] ? static_cast<double>(stream_err[k]) / static_cast<double>(stream_ref[k]) : 0.0);
  }
  if (has_separator(model.variant()) && head_refs) {
    r.head_ctc_wer = static_cast<double>(head_errors.distance) / static_cast<double>(head_refs);
  }
  return r;
}

std::string eval_csv_header(std::size_t streams) {
  std::string h = "variant,split,samples,wer,substitutions,insertions,deletions,reference_tokens,unfinished,head_ctc_wer";
  for (std::size_t k = 0; k < streams; ++k) h += ",stream" + std::to_string(k + 1) + "_wer";
  return h;
}

std::string eval_csv_row(const EvalReport& r, std::size_t streams) {
  std::string row = r.variant + "," + r.split + "," + std::to_string(r.samples) + "," + format_double(r.wer) + "," +
                    std::to_string(r.errors.substitutions) + "," + std::to_string(r.errors.insertions) + "," +
                    std::to_string(r.errors.deletions) + "," + std::to_string(r.reference_tokens) + "," +
                    std::to_string(r.unfinished) + "," + csv_number(r.head_ctc_wer);
  for (std::size_t k = 0; k < streams; ++k) {
    row += ",";
    if (k < r.stream_wer.size()) row += format_double(r.stream_wer[k]);
  }
  return row;
}

namespace {

void check_compatible(const Model& model, const DatasetManifest& manifest) {
  if (model.config().content_tokens != manifest.vocabulary) {
    fail(ErrorCode::kMismatch, "checkpoint vocabulary does not match the dataset");
  }
  if (model.config().feature_dim != manifest.spec.feature_dim) {
    fail(ErrorCode::kMismatch, "checkpoint feature dim " + std::to_string(model.config().feature_dim) +
                                   " does not match dataset feature dim " +
                                   std::to_string(manifest.spec.feature_dim));
  }
  if (has_separator(model.variant()) && manifest.spec.speakers > model.config().separator.max_speakers) {
    fail(ErrorCode::kMismatch, "dataset has " + std::to_string(manifest.spec.speakers) +
                                   " speakers but the separator has " +
                                   std::to_string(model.config().separator.max_speakers) + " heads");
  }
}

}  // namespace

EvalReport run_eval(const fs::path& checkpoint, const fs::path& data_dir, const std::string& split, std::size_t beam,
                    const fs::path& out_csv, StreamMatching matching) {
  if (split != "dev" && split != "eval" && split != "train") {
    fail(ErrorCode::kInvalidArgument, "split must be dev, eval or train");
  }
  const Model model = load_checkpoint(checkpoint);
  const DatasetManifest manifest = read_manifest(data_dir);
  check_compatible(model, manifest);
  const auto samples = load_split(data_dir, split, manifest);
  EvalReport report = evaluate(model, samples, beam, 0, matching);
  report.split = split;
  const std::size_t streams = std::max<std::size_t>(manifest.spec.speakers, report.stream_wer.size());
  write_file(out_csv, eval_csv_header(streams) + "\n" + eval_csv_row(report, streams) + "\n");
  return report;
}

// ---- training ---------------------------------------------------------------

TrainResult run_train(const ExperimentConfig& config, const fs::path& out_dir) {
  const DatasetManifest manifest = read_manifest(config.data);
  const auto train = load_split(config.data, "train", manifest);
  const auto dev = load_split(config.data, "dev", manifest);

  ModelConfig mc = config.model;
  mc.content_tokens = manifest.vocabulary;
  mc.feature_dim = manifest.spec.feature_dim;
  Model model(mc, config.seed);
  check_compatible(model, manifest);

  if (mc.variant == Variant::kSotH) {
    const TokenId sc = mc.vocabulary().sc();
    for (std::size_t i = 0; i < train.size(); ++i) {
      TokenSeq target = train[i].label.tokens;
      if (!mc.ctc_includes_sc) target.erase(std::remove(target.begin(), target.end(), sc), target.end());
      if (ctc_min_frames(target) > train[i].features.rows()) {
        fail(ErrorCode::kInfeasible, "train sample " + std::to_string(i) + " is too short for its CTC target");
      }
    }
  }

  TrainResult result;
  if (config.init_from) {
    const Model source = load_checkpoint(*config.init_from);
    if (source.config().content_tokens != mc.content_tokens) {
      fail(ErrorCode::kMismatch, "init_from checkpoint vocabulary does not match the dataset");
    }
    result.loaded_parameters = model.load_shared(source);
    if (result.loaded_parameters == 0) fail(ErrorCode::kMismatch, "init_from checkpoint shares no parameters");
    log(1, "init_from: loaded " + std::to_string(result.loaded_parameters) + " tensors from " +
               config.init_from->string());
  }

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) fail(ErrorCode::kIo, "cannot create " + out_dir.string() + ": " + ec.message());
  const fs::path metrics_path = out_dir / "metrics.csv";
  std::ofstream metrics(metrics_path, std::ios::trunc);
  if (!metrics) fail(ErrorCode::kIo, "cannot write " + metrics_path.string());
  metrics << "epoch,ctc_weight,train_loss,train_ce,train_ctc,grad_norm,dev_wer\n" << std::flush;

  result.best_checkpoint = out_dir / "best.ckpt";
  result.last_checkpoint = out_dir / "last.ckpt";
  std::vector<NamedTensor> params = model.parameters();
  AdamState adam{config.adam, 0, {}, {}};
  std::vector<std::size_t> order(train.size());
  std::deque<Model> recent;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng = sample_rng(config.seed, 0x5348, epoch);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    adam.config.lr = config.adam.lr * std::pow(config.lr_decay, static_cast<double>(epoch));
    const double weight = mc.variant == Variant::kSot || epoch < config.sot_warmup_epochs ? 0.0 : config.ctc_weight;

    EpochMetrics em;
    em.epoch = epoch;
    em.ctc_weight = weight;
    double ctc_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t begin = 0, batch = 0; begin < order.size(); begin += config.batch_size, ++batch) {
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      const double inv = 1.0 / static_cast<double>(end - begin);
      std::vector<std::vector<double>> grads;
      for (std::size_t i = begin; i < end; ++i) {
        const MixtureSample& sample = train[order[i]];
        Tape tape;
        const Model bound = model.bind(tape);
        const LossBreakdown loss = forward_loss(tape, bound, sample, weight);
        if (!std::isfinite(loss.total.item())) {
          fail(ErrorCode::kNumeric, "non-finite loss at epoch " + std::to_string(epoch) + " batch " +
                                        std::to_string(batch) + " (train sample " + std::to_string(order[i]) + ")");
        }
        em.train_loss += loss.total.item();
        em.train_ce += loss.ce;
        if (loss.ctc) ctc_sum += *loss.ctc;
        auto g = bound.gradients(tape.backward(loss.total));
        if (grads.empty()) {
          grads = std::move(g);
          for (auto& v : grads)
            for (double& x : v) x *= inv;
        } else {
          for (std::size_t p = 0; p < grads.size(); ++p)
            for (std::size_t j = 0; j < grads[p].size(); ++j) grads[p][j] += inv * g[p][j];
        }
      }
      try {
        em.grad_norm += adam_step(adam, params, grads);
      } catch (const Error& e) {
        fail(e.code(), std::string(e.what()) + " at epoch " + std::to_string(epoch) + " batch " + std::to_string(batch));
      }
      model.set_parameters(params);
      ++steps;
    }
    const double n = static_cast<double>(train.size());
    em.train_loss /= n;
    em.train_ce /= n;
    if (mc.variant != Variant::kSot) em.train_ctc = ctc_sum / n;
    em.grad_norm /= static_cast<double>(std::max<std::size_t>(steps, 1));
    em.dev_wer = evaluate(model, dev, config.beam, config.max_decode_len, config.matching).wer;

    metrics << epoch << ',' << format_double(em.ctc_weight) << ',' << format_double(em.train_loss) << ','
            << format_double(em.train_ce) << ',' << csv_number(em.train_ctc) << ',' << format_double(em.grad_norm)
            << ',' << format_double(em.dev_wer) << '\n'
            << std::flush;
    log(1, std::string(variant_name(mc.variant)) + " epoch " + std::to_string(epoch) +
               " loss " + format_double(em.train_loss) + " dev_wer " + format_double(em.dev_wer));

    save_checkpoint(model, result.last_checkpoint);
    if (result.epochs.empty() || em.dev_wer < result.best_dev_wer) {
      result.best_dev_wer = em.dev_wer;
      result.best_epoch = epoch;
      save_checkpoint(model, result.best_checkpoint);
    }
    result.epochs.push_back(em);
    if (config.average_last > 0) {
      recent.push_back(model);
      if (recent.size() > config.average_last) recent.pop_front();
    }
  }

  if (config.average_last > 0) {
    const std::vector<Model> models(recent.begin(), recent.end());
    const Model averaged = average_models(models);
    result.averaged_checkpoint = out_dir / "averaged.ckpt";
    save_checkpoint(averaged, *result.averaged_checkpoint);
    log(1, "averaged last " + std::to_string(models.size()) + " epochs: dev_wer " +
               format_double(evaluate(averaged, dev, config.beam, config.max_decode_len, config.matching).wer));
  }
  return result;
}

// ---- comparison -------------------------------------------------------------

std::vector<CompareRow> run_compare(const fs::path& config_dir, std::span<const std::uint64_t> seeds,
                                    const fs::path& out_csv) {
  if (seeds.empty()) fail(ErrorCode::kInvalidArgument, "compare needs at least one seed");
  std::vector<fs::path> configs;
  std::error_code ec;
  for (const auto& entry : fs::directory_iterator(config_dir, ec)) {
    if (entry.is_regular_file() && entry.path().extension() == ".cfg") configs.push_back(entry.path());
  }
  if (ec) fail(ErrorCode::kIo, "cannot list " + config_dir.string() + ": " + ec.message());
  if (configs.empty()) fail(ErrorCode::kInvalidArgument, "no *.cfg files in " + config_dir.string());
  std::sort(configs.begin(), configs.end());

  const fs::path runs_dir = out_csv.parent_path() / (out_csv.stem().string() + "_runs");
  std::vector<CompareRow> rows;
  std::map<std::string, std::vector<std::size_t>> by_variant;
  std::vector<std::string> variant_order;

  for (const fs::path& cfg_path : configs) {
    const std::string stem = cfg_path.stem().string();
    for (std::uint64_t seed : seeds) {
      KeyValues kv = KeyValues::load(cfg_path);
      kv.set("seed", std::to_string(seed));
      std::optional<fs::path> init_run;
      if (kv.has("init_from")) {
        std::string init = kv.take_string("init_from", "");
        if (init.rfind("run:", 0) == 0) {
          init_run = runs_dir / (init.substr(4) + "_seed" + std::to_string(seed)) / "best.ckpt";
          kv.set("init_from", "");
        } else {
          kv.set("init_from", init);
        }
      }
      ExperimentConfig config = ExperimentConfig::from_key_values(std::move(kv), cfg_path.parent_path());
      if (init_run) {
        if (!fs::exists(*init_run)) {
          fail(ErrorCode::kInvalidArgument, stem + ": init_from run '" + init_run->string() +
                                                "' has not been trained yet (configs run in name order)");
        }
        config.init_from = *init_run;
      }
      const fs::path run_dir = runs_dir / (stem + "_seed" + std::to_string(seed));
      log(1, "compare: " + stem + " seed " + std::to_string(seed));
      const TrainResult trained = run_train(config, run_dir);
      const Model best = load_checkpoint(trained.best_checkpoint);
      const DatasetManifest manifest = read_manifest(config.data);
      const auto eval_split = load_split(config.data, "eval", manifest);
      CompareRow row;
      row.kind = "run";
      row.variant = variant_name(config.model.variant);
      row.config = stem;
      row.seed = seed;
      row.dev_wer = trained.best_dev_wer;
      row.eval_wer = evaluate(best, eval_split, config.beam, config.max_decode_len, config.matching).wer;
      if (!by_variant.count(row.variant)) variant_order.push_back(row.variant);
      by_variant[row.variant].push_back(rows.size());
      rows.push_back(row);
    }
  }

  if (!by_variant.count("SOT")) fail(ErrorCode::kInvalidArgument, "compare needs an SOT config as the baseline");
  auto rel = [](double base, double x) -> std::optional<double> {
    if (base <= 0.0) return std::nullopt;
    return (base - x) / base;
  };
  // Per-seed deltas against the SOT run with the same seed.
  std::map<std::uint64_t, const CompareRow*> sot_by_seed;
  for (std::size_t i : by_variant["SOT"]) sot_by_seed[*rows[i].seed] = &rows[i];
  for (CompareRow& row : rows) {
    const CompareRow* base = sot_by_seed[*row.seed];
    row.dev_rel_to_sot = rel(base->dev_wer, row.dev_wer);
    row.eval_rel_to_sot = rel(base->eval_wer, row.eval_wer);
  }
  std::vector<CompareRow> medians;
  for (const std::string& v : variant_order) {
    std::vector<double> dev, eval;
    for (std::size_t i : by_variant[v]) {
      dev.push_back(rows[i].dev_wer);
      eval.push_back(rows[i].eval_wer);
    }
    CompareRow m;
    m.kind = "median";
    m.variant = v;
    m.dev_wer = median(dev);
    m.eval_wer = median(eval);
    medians.push_back(m);
  }
  const CompareRow sot = *std::find_if(medians.begin(), medians.end(), [](const CompareRow& r) { return r.variant == "SOT"; });
  for (CompareRow& m : medians) {
    m.dev_rel_to_sot = rel(sot.dev_wer, m.dev_wer);
    m.eval_rel_to_sot = rel(sot.eval_wer, m.eval_wer);
  }
  rows.insert(rows.end(), medians.begin(), medians.end());
  write_file(out_csv, compare_csv(rows));
  return rows;
}

std::string compare_csv(std::span<const CompareRow> rows) {
  std::string out = "row,variant,config,seed,dev_wer,eval_wer,dev_rel_to_sot,eval_rel_to_sot\n";
  for (const CompareRow& r : rows) {
    out += r.kind + "," + r.variant + "," + r.config + "," + (r.seed ? std::to_string(*r.seed) : "") + "," +
           format_double(r.dev_wer) + "," + format_double(r.eval_wer) + "," + csv_number(r.dev_rel_to_sot) + "," +
           csv_number(r.eval_rel_to_sot) + "\n";
  }
  return out;
}

}  // namespace sotsep
