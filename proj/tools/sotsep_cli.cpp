// SPDX-License-Identifier: Apache-2.0
//
// sotsep generate | train | eval | compare
//
// Failures print one line on stderr:
//   error code=<status name> message="<text>"
// and exit with the numeric status.

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sotsep/sotsep.h"

namespace {

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += (c == '\n' || c == '\r') ? ' ' : c;
  }
  return out;
}

int report(sotsep_status status, const std::string& message) {
  std::fprintf(stderr, "error code=%s message=\"%s\"\n", sotsep_status_name(status), escape(message).c_str());
  return static_cast<int>(status);
}

int check(sotsep_status status) {
  return status == SOTSEP_OK ? 0 : report(status, sotsep_last_error());
}

int verbosity_from_env() {
  const char* v = std::getenv("SOTSEP_VERBOSITY");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long level = std::strtol(v, &end, 10);
  return (*end == '\0' && level >= 0) ? static_cast<int>(level) : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-speaker recognition on a synthetic overlapped-token task"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(sotsep_version()));

  std::string spec, out, config, init_from, ckpt, data, split = "dev", config_dir, matching = "permutation";
  std::size_t beam = 4;
  std::vector<std::uint64_t> seeds;

  auto* gen = app.add_subcommand("generate", "Write a synthetic dataset");
  gen->add_option("--spec", spec, "Task spec file")->required();
  gen->add_option("--out", out, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train one model");
  train->add_option("--config", config, "Experiment config file")->required();
  train->add_option("--out", out, "Run directory")->required();
  train->add_option("--init-from", init_from, "Checkpoint whose shared weights seed the model");

  auto* eval = app.add_subcommand("eval", "Decode a split and score it");
  eval->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  eval->add_option("--data", data, "Dataset directory")->required();
  eval->add_option("--split", split, "dev or eval")->check(CLI::IsMember({"dev", "eval", "train"}));
  eval->add_option("--beam", beam, "Beam width")->check(CLI::PositiveNumber);
  eval->add_option("--out", out, "Report CSV")->required();
  eval->add_option("--matching", matching, "Stream matching")->check(CLI::IsMember({"permutation", "serialized"}));

  auto* cmp = app.add_subcommand("compare", "Train every config for every seed and tabulate");
  cmp->add_option("--config-dir", config_dir, "Directory of *.cfg experiment configs")->required();
  cmp->add_option("--seeds", seeds, "Comma-separated seeds")->required()->delimiter(',');
  cmp->add_option("--out", out, "Comparison CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return report(SOTSEP_ERR_INVALID_ARGUMENT, e.what());
  }

  sotsep_set_verbosity(verbosity_from_env());

  if (*gen) return check(sotsep_generate(spec.c_str(), out.c_str()));
  if (*train) {
    double wer = 0.0;
    const int rc = check(sotsep_train(config.c_str(), out.c_str(), init_from.empty() ? nullptr : init_from.c_str(), &wer));
    if (rc == 0) std::printf("best_dev_wer=%.17g\n", wer);
    return rc;
  }
  if (*eval) {
    sotsep_eval_result r{};
    const int rc = check(sotsep_eval(ckpt.c_str(), data.c_str(), split.c_str(), beam, out.c_str(),
                                     matching == "serialized", &r));
    if (rc == 0) {
      std::printf("wer=%.17g substitutions=%zu insertions=%zu deletions=%zu reference_tokens=%zu\n", r.wer,
                  r.substitutions, r.insertions, r.deletions, r.reference_tokens);
    }
    return rc;
  }
  if (*cmp) return check(sotsep_compare(config_dir.c_str(), seeds.data(), seeds.size(), out.c_str()));
  return report(SOTSEP_ERR_INVALID_ARGUMENT, "unknown subcommand");
}
