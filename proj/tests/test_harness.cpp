// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "json.hpp"
#include "sotsep/checkpoint.hpp"
#include "sotsep/config.hpp"
#include "sotsep/error.hpp"
#include "sotsep/harness.hpp"
#include "sotsep/losses.hpp"

using namespace sotsep;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("sotsep_harness_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

TaskSpec small_spec(std::uint64_t seed = 5) {
  TaskSpec s;
  s.vocab_size = 5;
  s.feature_dim = 6;
  s.min_tokens = 2;
  s.max_tokens = 3;
  s.offset_min = 2;
  s.offset_max = 5;
  s.train_count = 24;
  s.dev_count = 6;
  s.eval_count = 6;
  s.seed = seed;
  return s;
}

const char* kTinyModel =
    "encoder_hidden = 6\nencoder_layers = 1\nseparator_layers = 1\nseparator_hidden = 6\n"
    "embed_dim = 4\ndecoder_hidden = 8\nattention_dim = 6\nbatch_size = 4\nbeam = 2\n";

fs::path write_config(const fs::path& dir, const std::string& name, const std::string& variant,
                      std::size_t epochs, const std::string& extra = "") {
  const fs::path p = dir / name;
  spit(p, "variant = " + variant + "\nseed = 3\ndata = data\nepochs = " + std::to_string(epochs) + "\n" +
              kTinyModel + extra);
  return p;
}

}  // namespace

TEST_CASE("key-value files: comments, whitespace, unknown and duplicate keys") {
  KeyValues kv = KeyValues::parse("# header\n  alpha =  3 \n\nbeta=x y # trailing\nflag = true\n", "t.cfg");
  CHECK(kv.take_size("alpha", 0) == 3);
  CHECK(kv.take_string("beta", "") == "x y");
  CHECK(kv.take_flag("flag", false));
  CHECK(kv.take_double("gamma", 0.25) == 0.25);
  CHECK_NOTHROW(kv.finish());

  KeyValues extra = KeyValues::parse("alpha = 1\nmystery = 2\n");
  extra.take_size("alpha", 0);
  CHECK_THROWS_AS(extra.finish(), Error);
  CHECK_THROWS_AS(KeyValues::parse("a = 1\na = 2\n"), Error);
  CHECK_THROWS_AS(KeyValues::parse("just words\n"), Error);
  KeyValues bad = KeyValues::parse("n = -4\nx = 1.5e\n");
  CHECK_THROWS_AS(bad.take_size("n", 0), Error);
  CHECK_THROWS_AS(bad.take_double("x", 0), Error);
}

TEST_CASE("task spec entries round-trip and invalid specs are rejected") {
  TaskSpec s = small_spec();
  s.noisy = true;
  s.noise_sigma = 0.3;
  KeyValues kv = KeyValues::parse(format_key_values(s.entries()));
  const TaskSpec back = TaskSpec::from_key_values(kv);
  CHECK(back.entries() == s.entries());

  CHECK_THROWS_AS(TaskSpec::from_key_values(KeyValues::parse("speakers = 0\n")), Error);
  CHECK_THROWS_AS(TaskSpec::from_key_values(KeyValues::parse("offset_min = 9\noffset_max = 3\n")), Error);
  CHECK_THROWS_AS(TaskSpec::from_key_values(KeyValues::parse("noise = loud\n")), Error);
  CHECK_THROWS_AS(TaskSpec::from_key_values(KeyValues::parse("colour = blue\n")), Error);
}

TEST_CASE("templates are unit norm and pairwise distinct") {
  const TaskSpec spec;
  const Tensor t = make_templates(spec);
  REQUIRE(t.rows() == spec.vocab_size);
  for (std::size_t a = 0; a < t.rows(); ++a) {
    double n = 0.0;
    for (std::size_t c = 0; c < t.cols(); ++c) n += t.at(a, c) * t.at(a, c);
    CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-12));
    for (std::size_t b = a + 1; b < t.rows(); ++b) {
      double d = 0.0;
      for (std::size_t c = 0; c < t.cols(); ++c) d += std::pow(t.at(a, c) - t.at(b, c), 2);
      CHECK(std::sqrt(d) > 0.1);
    }
  }
  TaskSpec line;
  line.feature_dim = 1;  // only +1 and -1 exist
  CHECK_THROWS_AS(make_templates(line), Error);
}

TEST_CASE("one speaker, three tokens of two frames") {
  TaskSpec spec = small_spec();
  spec.speakers = 1;
  spec.min_tokens = spec.max_tokens = 3;
  spec.min_frames_per_token = spec.max_frames_per_token = 2;
  const Tensor templates = make_templates(spec);
  Rng rng(1);
  const MixtureSample s = synth_mixture(spec, templates, rng);
  CHECK(s.features.rows() == 6);
  CHECK(s.speakers.size() == 1);
  CHECK(s.speakers[0].start_offset == 0);
  const TokenId sc = spec.vocabulary().sc();
  CHECK(std::count(s.label.tokens.begin(), s.label.tokens.end(), sc) == 0);
  // Clean features are the templates themselves.
  for (std::size_t t = 0; t < 6; ++t) {
    const auto row = static_cast<std::size_t>(s.speakers[0].tokens[t / 2] - 1);
    for (std::size_t c = 0; c < spec.feature_dim; ++c) CHECK(s.features.at(t, c) == templates.at(row, c));
  }
}

TEST_CASE("synthetic mixtures satisfy the task invariants") {
  for (std::size_t speakers : {2u, 3u}) {
    TaskSpec spec = small_spec();
    spec.speakers = speakers;
    spec.max_tokens = 4;
    const Tensor templates = make_templates(spec);
    const TokenId sc = spec.vocabulary().sc();
    for (std::uint64_t i = 0; i < 300; ++i) {
      Rng rng = sample_rng(spec.seed, 0, i);
      const MixtureSample s = synth_mixture(spec, templates, rng);
      REQUIRE(s.speakers.size() == speakers);
      CHECK(s.speakers[0].start_offset == 0);
      for (std::size_t k = 1; k < speakers; ++k) {
        const std::size_t gap = s.speakers[k].start_offset - s.speakers[k - 1].start_offset;
        CHECK(gap >= spec.offset_min);
        CHECK(gap <= spec.offset_max);
      }
      // Serialized label order is ascending offset order.
      CHECK(split_on_sc(s.label.tokens, sc) == s.references());
      CHECK(s.features.rows() >= ctc_min_frames(s.label.tokens));
      for (std::size_t k = 0; k < speakers; ++k) {
        const TokenSeq& toks = s.speakers[k].tokens;
        CHECK(s.features.rows() >= s.speakers[k].start_offset + toks.size() * spec.min_frames_per_token);
        CHECK(std::adjacent_find(toks.begin(), toks.end()) == toks.end());
      }
      // With no noise every frame carries at least one template.
      for (std::size_t t = 0; t < s.features.rows(); ++t) {
        double n = 0.0;
        for (std::size_t c = 0; c < spec.feature_dim; ++c) n += s.features.at(t, c) * s.features.at(t, c);
        CHECK(n > 0.0);
      }
    }
  }
}

TEST_CASE("every mixture has an overlapped frame") {
  TaskSpec spec = small_spec();
  const Tensor templates = make_templates(spec);
  for (std::uint64_t i = 0; i < 200; ++i) {
    Rng rng = sample_rng(7, 1, i);
    const MixtureSample s = synth_mixture(spec, templates, rng);
    // Speaker 0 alone reaches at most up to speaker 1's start; a frame at
    // speaker 1's start that differs from speaker 1's own template is
    // therefore shared.
    const std::size_t t = s.speakers[1].start_offset;
    const auto row = static_cast<std::size_t>(s.speakers[1].tokens[0] - 1);
    double diff = 0.0;
    for (std::size_t c = 0; c < spec.feature_dim; ++c) diff += std::abs(s.features.at(t, c) - templates.at(row, c));
    CHECK(diff > 1e-9);
  }
}

TEST_CASE("synthesis is deterministic under a seed") {
  const TaskSpec spec = small_spec();
  const Tensor templates = make_templates(spec);
  for (std::uint64_t i = 0; i < 20; ++i) {
    Rng a = sample_rng(spec.seed, 2, i), b = sample_rng(spec.seed, 2, i);
    const MixtureSample x = synth_mixture(spec, templates, a), y = synth_mixture(spec, templates, b);
    CHECK(x.label.tokens == y.label.tokens);
    CHECK(std::equal(x.features.values().begin(), x.features.values().end(), y.features.values().begin(),
                     y.features.values().end()));
  }
  TaskSpec noisy = spec;
  noisy.noisy = true;
  Rng a = sample_rng(1, 0, 0), b = sample_rng(1, 0, 0);
  const MixtureSample x = synth_mixture(noisy, templates, a), y = synth_mixture(noisy, templates, b);
  CHECK(std::equal(x.features.values().begin(), x.features.values().end(), y.features.values().begin()));
}

TEST_CASE("impossible overlap constraints are reported as infeasible") {
  TaskSpec spec = small_spec();
  spec.min_tokens = spec.max_tokens = 1;
  spec.min_frames_per_token = spec.max_frames_per_token = 1;
  spec.offset_min = spec.offset_max = 3;  // speaker 2 always starts after speaker 1 ends
  const Tensor templates = make_templates(spec);
  Rng rng(1);
  try {
    synth_mixture(spec, templates, rng);
    FAIL("expected infeasible");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kInfeasible);
  }
}

TEST_CASE("dataset generation, manifest checksums and reload") {
  TempDir dir("dataset");
  const TaskSpec spec = small_spec();
  const DatasetManifest m = generate_dataset(spec, dir.path / "data");
  REQUIRE(m.splits.size() == 3);
  CHECK(m.split("train").count == spec.train_count);
  CHECK(m.split("dev").count == spec.dev_count);
  CHECK(m.split("eval").count == spec.eval_count);

  const DatasetManifest back = read_manifest(dir.path / "data");
  CHECK(back.spec.entries() == spec.entries());
  for (const auto& s : back.splits) CHECK_NOTHROW(verify_split(dir.path / "data", s));

  // Regenerating from the manifest's spec reproduces every checksum.
  const DatasetManifest again = generate_dataset(back.spec, dir.path / "again");
  for (std::size_t k = 0; k < 3; ++k) CHECK(again.splits[k].checksum == m.splits[k].checksum);
  CHECK(slurp(dir.path / "again" / "manifest.json") == slurp(dir.path / "data" / "manifest.json"));

  // Loaded samples match a fresh synthesis.
  const auto dev = load_split(dir.path / "data", "dev", back);
  const Tensor templates = make_templates(spec);
  for (std::size_t i = 0; i < dev.size(); ++i) {
    Rng rng = sample_rng(spec.seed, 1, i);
    const MixtureSample s = synth_mixture(spec, templates, rng, "dev");
    CHECK(dev[i].label.tokens == s.label.tokens);
    CHECK(dev[i].speakers.size() == s.speakers.size());
    for (std::size_t k = 0; k < s.speakers.size(); ++k) {
      CHECK(dev[i].speakers[k].start_offset == s.speakers[k].start_offset);
      CHECK(dev[i].speakers[k].tokens == s.speakers[k].tokens);
    }
    CHECK(std::equal(dev[i].features.values().begin(), dev[i].features.values().end(),
                     s.features.values().begin(), s.features.values().end()));
  }

  // Splits use disjoint seeds.
  const auto train = load_split(dir.path / "data", "train", back);
  std::set<std::string> train_labels;
  for (const auto& s : train) train_labels.insert(spec.vocabulary().decode(s.label.tokens));
  CHECK(train.front().features.values()[0] != dev.front().features.values()[0]);

  // Tampering is caught.
  std::string labels = slurp(dir.path / "data" / "dev.labels");
  labels[0] = labels[0] == 'a' ? 'b' : 'a';
  spit(dir.path / "data" / "dev.labels", labels);
  CHECK_THROWS_AS(verify_split(dir.path / "data", back.split("dev")), Error);
  CHECK_THROWS_AS(load_split(dir.path / "data", "dev", back), Error);
  CHECK_THROWS_AS(read_manifest(dir.path / "missing"), Error);
}

TEST_CASE("experiment configs require variant, seed and data") {
  CHECK_THROWS_AS(ExperimentConfig::from_key_values(KeyValues::parse("seed = 1\ndata = d\n"), "."), Error);
  CHECK_THROWS_AS(ExperimentConfig::from_key_values(KeyValues::parse("variant = SOT\ndata = d\n"), "."), Error);
  CHECK_THROWS_AS(
      ExperimentConfig::from_key_values(KeyValues::parse("variant = SOT\nseed = 1\ndata = d\nctc_weight = 1.5\n"), "."),
      Error);
  CHECK_THROWS_AS(
      ExperimentConfig::from_key_values(KeyValues::parse("variant = SOT\nseed = 1\ndata = d\nlearning = 1\n"), "."),
      Error);
  const ExperimentConfig c = ExperimentConfig::from_key_values(
      KeyValues::parse("variant = GEncSep\nseed = 9\ndata = d\nmatching = serialized\ninit_from = x.ckpt\n"), "/base");
  CHECK(c.model.variant == Variant::kGEncSep);
  CHECK(c.seed == 9);
  CHECK(c.data == fs::path("/base/d"));
  CHECK(c.init_from == fs::path("/base/x.ckpt"));
  CHECK(c.matching == StreamMatching::kSerialized);
  CHECK(c.ctc_weight == 0.3);
  CHECK(c.sot_warmup_epochs == 2);
}

TEST_CASE("training is deterministic, logs losslessly, and lowers the loss") {
  TempDir dir("train");
  generate_dataset(small_spec(), dir.path / "data");
  const auto cfg_path = write_config(dir.path, "sot.cfg", "SOT", 6, "lr = 0.01\n");
  const ExperimentConfig cfg = load_experiment_config(cfg_path);
  const TrainResult a = run_train(cfg, dir.path / "a");
  const TrainResult b = run_train(cfg, dir.path / "b");
  CHECK(slurp(dir.path / "a" / "metrics.csv") == slurp(dir.path / "b" / "metrics.csv"));
  CHECK(slurp(a.best_checkpoint) == slurp(b.best_checkpoint));
  CHECK(slurp(a.last_checkpoint) == slurp(b.last_checkpoint));
  REQUIRE(a.epochs.size() == 6);
  CHECK(a.epochs[5].train_loss < a.epochs[0].train_loss);

  // metrics.csv parses back to the exact values.
  std::istringstream csv(slurp(dir.path / "a" / "metrics.csv"));
  std::string line;
  std::getline(csv, line);
  CHECK(line == "epoch,ctc_weight,train_loss,train_ce,train_ctc,grad_norm,dev_wer");
  for (const EpochMetrics& m : a.epochs) {
    REQUIRE(std::getline(csv, line));
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (line.back() == ',') f.emplace_back();
    REQUIRE(f.size() == 7);
    CHECK(std::stoul(f[0]) == m.epoch);
    CHECK(parse_double(f[2], "loss") == m.train_loss);
    CHECK(parse_double(f[3], "ce") == m.train_ce);
    CHECK(f[4].empty());  // SOT has no CTC term
    CHECK(parse_double(f[6], "wer") == m.dev_wer);
  }
  CHECK_FALSE(std::getline(csv, line));
}

TEST_CASE("warmup epochs train with the CTC weight at zero") {
  TempDir dir("warmup");
  generate_dataset(small_spec(), dir.path / "data");
  const ExperimentConfig cfg =
      load_experiment_config(write_config(dir.path, "e.cfg", "EncSep", 3, "sot_warmup_epochs = 2\nctc_weight = 0.4\n"));
  const TrainResult r = run_train(cfg, dir.path / "run");
  CHECK(r.epochs[0].ctc_weight == 0.0);
  CHECK(r.epochs[1].ctc_weight == 0.0);
  CHECK(r.epochs[2].ctc_weight == 0.4);
  REQUIRE(r.epochs[0].train_ctc.has_value());
}

TEST_CASE("GEncSep initialised from EncSep loads every shared parameter") {
  TempDir dir("init");
  generate_dataset(small_spec(), dir.path / "data");
  const TrainResult enc = run_train(load_experiment_config(write_config(dir.path, "e.cfg", "EncSep", 1)), dir.path / "enc");
  ExperimentConfig g = load_experiment_config(write_config(dir.path, "g.cfg", "GEncSep", 1));
  g.init_from = enc.best_checkpoint;
  const TrainResult gr = run_train(g, dir.path / "genc");
  const Model encm = load_checkpoint(enc.best_checkpoint);
  CHECK(gr.loaded_parameters == encm.parameters().size());

  // A checkpoint over a different vocabulary is refused.
  TaskSpec other = small_spec();
  other.vocab_size = 7;
  generate_dataset(other, dir.path / "data7");
  ExperimentConfig g7 = load_experiment_config(write_config(dir.path, "g7.cfg", "GEncSep", 1));
  g7.data = dir.path / "data7";
  g7.init_from = enc.best_checkpoint;
  CHECK_THROWS_AS(run_train(g7, dir.path / "g7"), Error);
}

TEST_CASE("averaging the last checkpoints writes an extra checkpoint") {
  TempDir dir("avg");
  generate_dataset(small_spec(), dir.path / "data");
  const TrainResult r =
      run_train(load_experiment_config(write_config(dir.path, "s.cfg", "SOT", 3, "average_last = 5\n")), dir.path / "run");
  REQUIRE(r.averaged_checkpoint.has_value());
  CHECK(fs::exists(*r.averaged_checkpoint));
  CHECK_NOTHROW(load_checkpoint(*r.averaged_checkpoint));
}

TEST_CASE("evaluation reports and compatibility checks") {
  TempDir dir("eval");
  generate_dataset(small_spec(), dir.path / "data");
  const TrainResult r = run_train(load_experiment_config(write_config(dir.path, "e.cfg", "EncSep", 1)), dir.path / "run");
  const EvalReport rep = run_eval(r.best_checkpoint, dir.path / "data", "dev", 2, dir.path / "dev.csv");
  CHECK(rep.samples == 6);
  CHECK(rep.split == "dev");
  CHECK(rep.errors.distance == rep.errors.substitutions + rep.errors.insertions + rep.errors.deletions);
  CHECK(rep.head_ctc_wer.has_value());
  CHECK(rep.stream_wer.size() == 2);
  const std::string csv = slurp(dir.path / "dev.csv");
  CHECK(csv.rfind("variant,split,samples,wer,substitutions,insertions,deletions,reference_tokens", 0) == 0);
  CHECK(csv.find("\nEncSep,dev,6,") != std::string::npos);

  // An untrained model scores near or above 1.
  Model fresh(load_checkpoint(r.best_checkpoint).config(), 77);
  const auto samples = load_split(dir.path / "data", "dev", read_manifest(dir.path / "data"));
  CHECK(evaluate(fresh, samples, 2).wer >= 0.7);

  TaskSpec other = small_spec();
  other.feature_dim = 4;
  generate_dataset(other, dir.path / "data4");
  CHECK_THROWS_AS(run_eval(r.best_checkpoint, dir.path / "data4", "dev", 2, dir.path / "x.csv"), Error);
  CHECK_THROWS_AS(run_eval(r.best_checkpoint, dir.path / "data", "test", 2, dir.path / "x.csv"), Error);
}

TEST_CASE("a non-finite loss aborts training with its location") {
  TempDir dir("nan");
  const fs::path data = dir.path / "data";
  generate_dataset(small_spec(), data);
  // Rewrite the training features with a NaN and refresh the checksum.
  DatasetManifest m = read_manifest(data);
  auto train = load_split(data, "train", m);
  std::vector<NamedTensor> tensors;
  char name[32];
  for (std::size_t i = 0; i < train.size(); ++i) {
    std::vector<double> v(train[i].features.values().begin(), train[i].features.values().end());
    if (i == 3) v[0] = std::numeric_limits<double>::quiet_NaN();
    std::snprintf(name, sizeof name, "s%06zu", i);
    tensors.push_back({name, Tensor(train[i].features.shape(), v)});
  }
  std::ostringstream feat(std::ios::binary);
  feat.write("SOTSEPFT", 8);
  write_u32(feat, 1);
  write_tensor_block(feat, tensors);
  spit(data / "train.features", feat.str());
  std::uint64_t h = fnv1a64(feat.str());
  h = fnv1a64(slurp(data / "train.labels"), h);
  h = fnv1a64(slurp(data / "train.offsets"), h);
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
  auto j = nlohmann::json::parse(slurp(data / "manifest.json"));
  j["splits"][0]["checksum"] = hex;
  spit(data / "manifest.json", j.dump(2));

  try {
    run_train(load_experiment_config(write_config(dir.path, "s.cfg", "SOT", 1)), dir.path / "run");
    FAIL("expected a numeric error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kNumeric);
    const std::string what = e.what();
    CHECK(what.find("epoch 0") != std::string::npos);
    CHECK(what.find("batch") != std::string::npos);
    CHECK(what.find("train sample 3") != std::string::npos);
  }
}

TEST_CASE("compare tabulates every run plus medians against SOT") {
  TempDir dir("compare");
  generate_dataset(small_spec(), dir.path / "data");
  const fs::path cfgs = dir.path / "cfgs";
  fs::create_directories(cfgs);
  spit(cfgs / "a_sot.cfg", "variant = SOT\nseed = 0\ndata = ../data\nepochs = 1\n" + std::string(kTinyModel));
  spit(cfgs / "b_encsep.cfg", "variant = EncSep\nseed = 0\ndata = ../data\nepochs = 1\n" + std::string(kTinyModel));
  spit(cfgs / "c_gencsep.cfg",
       "variant = GEncSep\nseed = 0\ndata = ../data\nepochs = 1\ninit_from = run:b_encsep\n" + std::string(kTinyModel));
  const std::uint64_t seeds[] = {1, 2};
  const auto rows = run_compare(cfgs, seeds, dir.path / "out.csv");
  CHECK(rows.size() == 3 * 2 + 3);
  CHECK(std::count_if(rows.begin(), rows.end(), [](const CompareRow& r) { return r.kind == "median"; }) == 3);
  for (const CompareRow& r : rows) {
    if (r.variant == "SOT") {
      CHECK(r.dev_rel_to_sot.value_or(0.0) == 0.0);
    }
  }
  CHECK(fs::exists(dir.path / "out_runs" / "c_gencsep_seed2" / "best.ckpt"));
  const std::string first = slurp(dir.path / "out.csv");
  CHECK(first.rfind("row,variant,config,seed,dev_wer,eval_wer,dev_rel_to_sot,eval_rel_to_sot\n", 0) == 0);
  run_compare(cfgs, seeds, dir.path / "out.csv");
  CHECK(slurp(dir.path / "out.csv") == first);

  const fs::path no_sot = dir.path / "no_sot";
  fs::create_directories(no_sot);
  fs::copy_file(cfgs / "b_encsep.cfg", no_sot / "b_encsep.cfg");
  spit(no_sot / "b_encsep.cfg", "variant = EncSep\nseed = 0\ndata = ../data\nepochs = 1\n" + std::string(kTinyModel));
  CHECK_THROWS_AS(run_compare(no_sot, seeds, dir.path / "n.csv"), Error);
}
