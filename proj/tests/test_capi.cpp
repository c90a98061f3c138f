// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "sotsep/sotsep.h"

namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() : path(fs::temp_directory_path() / "sotsep_capi") {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void spit(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST_CASE("status names and version") {
  CHECK(std::string(sotsep_status_name(SOTSEP_OK)) == "ok");
  CHECK(std::string(sotsep_status_name(SOTSEP_ERR_MISMATCH)) == "mismatch");
  CHECK(std::string(sotsep_status_name(SOTSEP_ERR_BUFFER_TOO_SMALL)) == "buffer_too_small");
  CHECK(std::string(sotsep_version()) == "1.0.0");
}

TEST_CASE("errors set a message and success clears it") {
  sotsep_model* m = nullptr;
  CHECK(sotsep_model_load("/nonexistent/x.ckpt", &m) == SOTSEP_ERR_IO);
  CHECK(m == nullptr);
  CHECK(std::strlen(sotsep_last_error()) > 0);
  CHECK(sotsep_model_load(nullptr, &m) == SOTSEP_ERR_INVALID_ARGUMENT);
  double wer = -1;
  CHECK(sotsep_multispeaker_wer("a b", "a b", 0, &wer, nullptr, nullptr) == SOTSEP_OK);
  CHECK(std::string(sotsep_last_error()).empty());
  CHECK(wer == 0.0);
}

TEST_CASE("multi-speaker WER over token strings") {
  double wer = 0;
  size_t errors = 0, ref = 0;
  REQUIRE(sotsep_multispeaker_wer("c d <sc> a b", "a b <sc> c d", 0, &wer, &errors, &ref) == SOTSEP_OK);
  CHECK(wer == 0.0);
  CHECK(ref == 4);
  REQUIRE(sotsep_multispeaker_wer("c d <sc> a b", "a b <sc> c d", 1, &wer, &errors, &ref) == SOTSEP_OK);
  CHECK(errors == 4);
  CHECK(wer == 1.0);
  REQUIRE(sotsep_multispeaker_wer("", "a b <sc> c", 0, &wer, &errors, &ref) == SOTSEP_OK);
  CHECK(errors == 3);
}

TEST_CASE("ctc loss through the C interface") {
  // Two frames, three classes, uniform: P("1") = 3 paths of 1/9.
  std::vector<double> lp(6, std::log(1.0 / 3.0));
  const int32_t target[] = {1};
  double loss = 0;
  std::vector<double> grad(6);
  REQUIRE(sotsep_ctc_loss(lp.data(), 2, 3, target, 1, &loss, grad.data()) == SOTSEP_OK);
  CHECK(loss == doctest::Approx(-std::log(3.0 / 9.0)).epsilon(1e-12));
  // Finite difference on one coordinate.
  const double h = 1e-6;
  for (std::size_t k = 0; k < 6; ++k) {
    auto up = lp, dn = lp;
    up[k] += h;
    dn[k] -= h;
    double lu = 0, ld = 0;
    sotsep_ctc_loss(up.data(), 2, 3, target, 1, &lu, nullptr);
    sotsep_ctc_loss(dn.data(), 2, 3, target, 1, &ld, nullptr);
    CHECK(grad[k] == doctest::Approx((lu - ld) / (2 * h)).epsilon(1e-6));
  }
  const int32_t too_long[] = {1, 1};
  CHECK(sotsep_ctc_loss(lp.data(), 2, 3, too_long, 2, &loss, nullptr) == SOTSEP_ERR_INFEASIBLE);
  const int32_t out_of_range[] = {3};
  CHECK(sotsep_ctc_loss(lp.data(), 2, 3, out_of_range, 1, &loss, nullptr) == SOTSEP_ERR_INVALID_ARGUMENT);
}

TEST_CASE("generate, train, eval, load, decode and save") {
  TempDir dir;
  spit(dir.path / "spec.cfg",
       "vocab_size = 4\nfeature_dim = 5\nmin_tokens = 2\nmax_tokens = 2\noffset_min = 2\noffset_max = 3\n"
       "train_count = 8\ndev_count = 3\neval_count = 3\nseed = 2\n");
  sotsep_set_verbosity(0);
  REQUIRE(sotsep_generate((dir.path / "spec.cfg").c_str(), (dir.path / "data").c_str()) == SOTSEP_OK);
  CHECK(fs::exists(dir.path / "data" / "manifest.json"));
  spit(dir.path / "run.cfg",
       "variant = EncSep\nseed = 1\ndata = data\nepochs = 1\nencoder_hidden = 4\nencoder_layers = 1\n"
       "separator_layers = 1\nseparator_hidden = 4\nembed_dim = 3\ndecoder_hidden = 5\nattention_dim = 4\nbeam = 2\n");
  double best = -1;
  REQUIRE(sotsep_train((dir.path / "run.cfg").c_str(), (dir.path / "run").c_str(), nullptr, &best) == SOTSEP_OK);
  CHECK(best >= 0.0);

  const std::string ckpt = (dir.path / "run" / "best.ckpt").string();
  sotsep_eval_result r{};
  REQUIRE(sotsep_eval(ckpt.c_str(), (dir.path / "data").c_str(), "eval", 2, (dir.path / "e.csv").c_str(), 0, &r) ==
          SOTSEP_OK);
  CHECK(r.samples == 3);
  CHECK(r.reference_tokens == 12);
  CHECK(r.wer == doctest::Approx(double(r.substitutions + r.insertions + r.deletions) / 12.0));
  CHECK(sotsep_eval(ckpt.c_str(), (dir.path / "data").c_str(), "bogus", 2, (dir.path / "e.csv").c_str(), 0, &r) ==
        SOTSEP_ERR_INVALID_ARGUMENT);

  sotsep_model* m = nullptr;
  REQUIRE(sotsep_model_load(ckpt.c_str(), &m) == SOTSEP_OK);
  const char* variant = nullptr;
  CHECK(sotsep_model_variant(m, &variant) == SOTSEP_OK);
  CHECK(std::string(variant) == "EncSep");
  size_t fdim = 0;
  CHECK(sotsep_model_feature_dim(m, &fdim) == SOTSEP_OK);
  CHECK(fdim == 5);

  std::vector<double> x(7 * 5, 0.25);
  size_t need = 0;
  CHECK(sotsep_model_decode(m, x.data(), 7, 5, 2, 0, nullptr, 0, &need) == SOTSEP_ERR_BUFFER_TOO_SMALL);
  CHECK(need >= 1);
  std::string buf(need, '\x7f');
  size_t got = 0;
  CHECK(sotsep_model_decode(m, x.data(), 7, 5, 2, 0, buf.data(), buf.size(), &got) == SOTSEP_OK);
  CHECK(got == need);
  CHECK(buf[need - 1] == '\0');
  CHECK(sotsep_model_decode(m, x.data(), 7, 4, 2, 0, buf.data(), buf.size(), &got) == SOTSEP_ERR_DIMENSION);

  const std::string copy = (dir.path / "copy.ckpt").string();
  REQUIRE(sotsep_model_save(m, copy.c_str()) == SOTSEP_OK);
  CHECK(slurp(copy) == slurp(ckpt));
  sotsep_model_free(m);
  sotsep_model_free(nullptr);

  spit(dir.path / "junk.ckpt", "SOTSEPCKjunk");
  CHECK(sotsep_model_load((dir.path / "junk.ckpt").c_str(), &m) == SOTSEP_ERR_FORMAT);

  const uint64_t seeds[] = {1};
  CHECK(sotsep_compare((dir.path / "nothing").c_str(), seeds, 1, (dir.path / "c.csv").c_str()) != SOTSEP_OK);
  CHECK(sotsep_compare(dir.path.c_str(), nullptr, 0, (dir.path / "c.csv").c_str()) == SOTSEP_ERR_INVALID_ARGUMENT);
}
