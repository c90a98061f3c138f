// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "sotsep/error.hpp"
#include "sotsep/losses.hpp"
#include "test_util.hpp"

using namespace sotsep;
using sotsep::testing::random_tensor;

namespace {

Tensor uniform_log_probs(std::size_t frames, std::size_t vocab) {
  return Tensor::filled({frames, vocab}, -std::log(static_cast<double>(vocab)));
}

Tensor random_log_probs(std::size_t frames, std::size_t vocab, std::mt19937_64& rng) {
  Tape tape;
  return log_softmax(tape, random_tensor({frames, vocab}, rng, -2, 2));
}

// Log-probs concentrated on a frame-level path.
Tensor peaked(const std::vector<TokenId>& path, std::size_t vocab, double peak = 4.0) {
  std::vector<double> logits(path.size() * vocab, 0.0);
  for (std::size_t t = 0; t < path.size(); ++t) logits[t * vocab + static_cast<std::size_t>(path[t])] = peak;
  Tape tape;
  return log_softmax(tape, Tensor({path.size(), vocab}, logits));
}

TokenSeq collapse(const std::vector<TokenId>& path) {
  TokenSeq out;
  TokenId prev = -1;
  for (TokenId k : path) {
    if (k != kBlankId && k != prev) out.push_back(k);
    prev = k;
  }
  return out;
}

}  // namespace

TEST_CASE("ctc hand-worked cases") {
  Tape tape;
  const TokenSeq a{1};
  CHECK(ctc_loss(tape, uniform_log_probs(1, 3), a).item() == doctest::Approx(std::log(3.0)).epsilon(1e-14));
  // Paths (a,a), (blank,a), (a,blank) out of four equiprobable paths.
  CHECK(ctc_loss(tape, uniform_log_probs(2, 2), a).item() == doctest::Approx(-std::log(0.75)).epsilon(1e-14));
  CHECK(ctc_brute_force(uniform_log_probs(2, 2), a) == doctest::Approx(-std::log(0.75)).epsilon(1e-14));
  CHECK(ctc_loss(tape, uniform_log_probs(2, 2), TokenSeq{}).item() ==
        doctest::Approx(std::log(4.0)).epsilon(1e-14));
}

TEST_CASE("ctc feasibility and input validation") {
  Tape tape;
  CHECK(ctc_min_frames(TokenSeq{1, 1, 2}) == 4);
  try {
    ctc_loss(tape, uniform_log_probs(3, 3), TokenSeq{1, 1, 2});
    FAIL("expected infeasible");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kInfeasible);
  }
  CHECK_THROWS_AS(ctc_loss(tape, uniform_log_probs(3, 3), TokenSeq{0}), Error);
  CHECK_THROWS_AS(ctc_loss(tape, uniform_log_probs(3, 3), TokenSeq{3}), Error);
  try {
    ctc_brute_force(uniform_log_probs(2, 3), TokenSeq{1, 2, 1});
    FAIL("expected infeasible");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kInfeasible);
  }
  CHECK_THROWS_AS(ctc_brute_force(uniform_log_probs(11, 4), TokenSeq{1}), Error);
}

TEST_CASE("ctc forward-backward equals brute force on random instances") {
  std::mt19937_64 rng(17);
  int checked = 0;
  while (checked < 300) {
    const std::size_t frames = sotsep::testing::uniform_size(rng, 1, 6);
    const std::size_t vocab = sotsep::testing::uniform_size(rng, 2, 4);
    const std::size_t len = sotsep::testing::uniform_size(rng, 0, 3);
    TokenSeq target;
    for (std::size_t i = 0; i < len; ++i)
      target.push_back(static_cast<TokenId>(sotsep::testing::uniform_size(rng, 1, vocab - 1)));
    if (ctc_min_frames(target) > frames) continue;
    const Tensor lp = random_log_probs(frames, vocab, rng);
    Tape tape;
    CHECK(std::abs(ctc_loss(tape, lp, target).item() - ctc_brute_force(lp, target)) <= 1e-9);
    ++checked;
  }
}

TEST_CASE("ctc loss is non-negative and near zero only for a certain target") {
  std::mt19937_64 rng(18);
  for (int i = 0; i < 50; ++i) {
    Tape tape;
    CHECK(ctc_loss(tape, random_log_probs(5, 4, rng), TokenSeq{1, 2}).item() >= 0.0);
  }
  Tape tape;
  CHECK(ctc_loss(tape, peaked({1, 0, 2}, 3, 60.0), TokenSeq{1, 2}).item() < 1e-20);
}

TEST_CASE("argmax-path target beats every other target") {
  const std::vector<TokenId> path{1, 1, 0, 2, 3};
  const Tensor lp = peaked(path, 4);
  const TokenSeq best = collapse(path);
  Tape tape;
  const double best_loss = ctc_loss(tape, lp, best).item();
  // All other targets up to length 3.
  std::vector<TokenSeq> others{{}};
  for (std::size_t len = 1; len <= 3; ++len) {
    std::vector<TokenSeq> next;
    for (const auto& o : others)
      if (o.size() == len - 1)
        for (TokenId k = 1; k < 4; ++k) {
          auto n = o;
          n.push_back(k);
          next.push_back(n);
        }
    others.insert(others.end(), next.begin(), next.end());
  }
  for (const auto& o : others) {
    if (o == best || ctc_min_frames(o) > path.size()) continue;
    CHECK(ctc_loss(tape, lp, o).item() > best_loss);
  }
}

TEST_CASE("ctc gradient matches finite differences") {
  std::mt19937_64 rng(19);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = random_tensor({5, 4}, rng, -2, 2);
    const TokenSeq target{1, 3, 3};
    CHECK(finite_diff_check([&](Tape& t, const Tensor& v) { return ctc_loss(t, log_softmax(t, v), target); }, x) <=
          1e-4);
  }
}

TEST_CASE("ce_serialized") {
  Tape tape;
  SUBCASE("one-hot correct predictions") {
    std::vector<double> lp(3 * 4, -50.0);
    const TokenSeq targets{2, 0, 3};
    for (std::size_t i = 0; i < 3; ++i) lp[i * 4 + static_cast<std::size_t>(targets[i])] = 0.0;
    CHECK(ce_serialized(tape, Tensor({3, 4}, lp), targets).item() == 0.0);
  }
  SUBCASE("uniform over 32") {
    const TokenSeq targets{1, 5, 31, 7};
    CHECK(ce_serialized(tape, uniform_log_probs(4, 32), targets).item() ==
          doctest::Approx(std::log(32.0)).epsilon(1e-14));
  }
  SUBCASE("length mismatch") {
    CHECK_THROWS_AS(ce_serialized(tape, uniform_log_probs(4, 5), TokenSeq{1, 2}), Error);
  }
  SUBCASE("gradient on log-probs") {
    std::mt19937_64 rng(20);
    const Tensor x = random_tensor({5, 8}, rng, -3, 0);
    const TokenSeq targets{1, 7, 0, 3, 3};
    CHECK(finite_diff_check([&](Tape& t, const Tensor& v) { return ce_serialized(t, v, targets); }, x) <= 1e-6);
  }
}

TEST_CASE("best_assignment") {
  const auto a = best_assignment({{1, 2}, {3, 1}});
  CHECK(a.permutation == std::vector<std::size_t>{0, 1});
  CHECK(a.total == 2.0);
  const auto b = best_assignment({{5, 1}, {1, 5}});
  CHECK(b.permutation == std::vector<std::size_t>{1, 0});
  // Tie goes to the lexicographically smallest permutation.
  const auto c = best_assignment({{1, 1}, {1, 1}});
  CHECK(c.permutation == std::vector<std::size_t>{0, 1});
}

TEST_CASE("upit_ctc and encsep_ctc") {
  const std::size_t vocab = 5;
  const TokenSeq la{1, 2}, lb{3, 4}, lc{2, 2};
  // Stream k is peaked on an alignment of label k.
  const Tensor s0 = peaked({1, 1, 2, 0, 0, 0}, vocab);
  const Tensor s1 = peaked({0, 3, 3, 4, 4, 0}, vocab);
  const Tensor s2 = peaked({2, 0, 2, 0, 0, 0}, vocab);

  SUBCASE("single stream is plain ctc") {
    Tape tape;
    const Tensor streams[] = {s0};
    const TokenSeq labels[] = {la};
    CHECK(upit_ctc(tape, streams, labels).total_loss.item() == ctc_loss(tape, s0, la).item());
    CHECK(encsep_ctc(tape, streams, labels).item() == ctc_loss(tape, s0, la).item());
  }
  SUBCASE("serialized order equal to argmin matches uPIT; swapped order exceeds it") {
    Tape tape;
    const Tensor streams[] = {s0, s1};
    const TokenSeq good[] = {la, lb};
    const TokenSeq swapped[] = {lb, la};
    const auto pit = upit_ctc(tape, streams, good);
    CHECK(pit.permutation == std::vector<std::size_t>{0, 1});
    CHECK(encsep_ctc(tape, streams, good).item() == pit.total_loss.item());
    CHECK(encsep_ctc(tape, streams, swapped).item() > pit.total_loss.item());
    const auto pit_swapped = upit_ctc(tape, streams, swapped);
    CHECK(pit_swapped.permutation == std::vector<std::size_t>{1, 0});
    CHECK(pit_swapped.total_loss.item() == pit.total_loss.item());
  }
  SUBCASE("three speakers equal explicit enumeration under any label order") {
    const Tensor streams[] = {s0, s1, s2};
    std::vector<TokenSeq> labels{la, lb, lc};
    std::vector<std::size_t> order{0, 1, 2};
    Tape tape;
    const double reference = upit_ctc(tape, streams, labels).total_loss.item();
    do {
      std::vector<TokenSeq> permuted;
      for (std::size_t i : order) permuted.push_back(labels[i]);
      std::vector<std::size_t> perm{0, 1, 2};
      double best = 1e300;
      do {
        double total = 0.0;
        for (std::size_t s = 0; s < 3; ++s) total += ctc_loss(tape, streams[s], permuted[perm[s]]).item();
        best = std::min(best, total);
      } while (std::next_permutation(perm.begin(), perm.end()));
      const auto res = upit_ctc(tape, streams, permuted);
      CHECK(res.total_loss.item() == best);
      CHECK(res.total_loss.item() == reference);
      CHECK(res.total_loss.item() <= encsep_ctc(tape, streams, permuted).item());
    } while (std::next_permutation(order.begin(), order.end()));
  }
  SUBCASE("gradient flows only through the chosen pairs") {
    Tape tape;
    const Tensor a = tape.leaf(s0);
    const Tensor b = tape.leaf(s1);
    const Tensor streams[] = {a, b};
    const TokenSeq labels[] = {lb, la};
    const auto res = upit_ctc(tape, streams, labels);
    const Gradients g = tape.backward(res.total_loss);
    Tape ref;
    const Tensor a2 = ref.leaf(s0);
    const Gradients g2 = ref.backward(ctc_loss(ref, a2, la));
    const Tensor ga = g.of(a), ga2 = g2.of(a2);
    for (std::size_t i = 0; i < ga.size(); ++i) CHECK(ga[i] == doctest::Approx(ga2[i]).epsilon(1e-14));
  }
  SUBCASE("size mismatch") {
    Tape tape;
    const Tensor streams[] = {s0, s1};
    const TokenSeq labels[] = {la};
    CHECK_THROWS_AS(upit_ctc(tape, streams, labels), Error);
    CHECK_THROWS_AS(encsep_ctc(tape, streams, labels), Error);
  }
}

TEST_CASE("hybrid") {
  Tape tape;
  const Tensor ctc = Tensor::scalar(2.0), ce = Tensor::scalar(1.0);
  CHECK(hybrid(tape, ctc, ce, 0.0).item() == 1.0);
  CHECK(hybrid(tape, ctc, ce, 1.0).item() == 2.0);
  CHECK(hybrid(tape, ctc, ce, 0.3).item() == doctest::Approx(1.3).epsilon(1e-15));
  CHECK_THROWS_AS(hybrid(tape, ctc, ce, 1.5), Error);
  CHECK_THROWS_AS(hybrid(tape, ctc, ce, -0.1), Error);
}
