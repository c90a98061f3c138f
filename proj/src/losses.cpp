// SPDX-License-Identifier: Apache-2.0

#include "sotsep/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sotsep/error.hpp"

namespace sotsep {
namespace {

double log_add(double a, double b) {
  if (a < b) std::swap(a, b);
  if (b <= kLogZero) return a;
  return a + std::log1p(std::exp(b - a));
}

void check_target(const Tensor& log_probs, std::span<const TokenId> target, TokenId blank) {
  if (log_probs.rank() != 2) {
    fail(ErrorCode::kDimension, "ctc: log_probs must be T x V, got " +
                                    shape_to_string(log_probs.shape()));
  }
  const auto vocab = static_cast<TokenId>(log_probs.cols());
  if (blank < 0 || blank >= vocab) fail(ErrorCode::kInvalidArgument, "ctc: blank id out of range");
  for (TokenId t : target) {
    if (t == blank) fail(ErrorCode::kInvalidArgument, "ctc: target contains the blank id");
    if (t < 0 || t >= vocab) {
      fail(ErrorCode::kInvalidArgument, "ctc: target id " + std::to_string(t) +
                                            " outside vocabulary of " + std::to_string(vocab));
    }
  }
  if (log_probs.rows() < ctc_min_frames(target)) {
    fail(ErrorCode::kInfeasible, "ctc: target of length " + std::to_string(target.size()) +
                                     " needs at least " +
                                     std::to_string(ctc_min_frames(target)) + " frames, got " +
                                     std::to_string(log_probs.rows()));
  }
}

}  // namespace

std::size_t ctc_min_frames(std::span<const TokenId> target) {
  std::size_t n = target.size();
  for (std::size_t i = 1; i < target.size(); ++i)
    if (target[i] == target[i - 1]) ++n;
  return n;
}

Tensor ctc_loss(Tape& tape, const Tensor& log_probs, std::span<const TokenId> target,
                TokenId blank) {
  check_target(log_probs, target, blank);
  const std::size_t frames = log_probs.rows();
  const std::size_t vocab = log_probs.cols();
  const std::size_t ext = 2 * target.size() + 1;

  std::vector<TokenId> label(ext, blank);
  for (std::size_t i = 0; i < target.size(); ++i) label[2 * i + 1] = target[i];
  auto y = [&](std::size_t t, std::size_t s) {
    return log_probs[t * vocab + static_cast<std::size_t>(label[s])];
  };
  // Skip transition s-2 -> s allowed for non-blank labels differing from s-2.
  auto can_skip = [&](std::size_t s) { return s >= 2 && label[s] != blank && label[s] != label[s - 2]; };

  auto alpha = std::make_shared<std::vector<double>>(frames * ext, kLogZero);
  auto& a = *alpha;
  a[0] = y(0, 0);
  if (ext > 1) a[1] = y(0, 1);
  for (std::size_t t = 1; t < frames; ++t) {
    for (std::size_t s = 0; s < ext; ++s) {
      double v = a[(t - 1) * ext + s];
      if (s >= 1) v = log_add(v, a[(t - 1) * ext + s - 1]);
      if (can_skip(s)) v = log_add(v, a[(t - 1) * ext + s - 2]);
      a[t * ext + s] = v <= kLogZero ? kLogZero : v + y(t, s);
    }
  }
  double log_p = a[(frames - 1) * ext + ext - 1];
  if (ext > 1) log_p = log_add(log_p, a[(frames - 1) * ext + ext - 2]);
  if (log_p <= kLogZero / 2) fail(ErrorCode::kInfeasible, "ctc: target has zero probability");

  std::vector<TokenId> lab = label;
  return tape.record(
      OpKind::kCustom, {}, {-log_p}, {&log_probs},
      [alpha, log_probs, lab, frames, vocab, ext, log_p, blank] {
        return [alpha, log_probs, lab, frames, vocab, ext, log_p, blank](
                   std::span<const double> d, std::span<const std::span<double>> dp) {
          const auto& a = *alpha;
          auto y = [&](std::size_t t, std::size_t s) {
            return log_probs[t * vocab + static_cast<std::size_t>(lab[s])];
          };
          auto can_skip = [&](std::size_t s) {
            return s + 2 < ext && lab[s] != blank && lab[s] != lab[s + 2];
          };
          std::vector<double> beta(frames * ext, kLogZero);
          beta[(frames - 1) * ext + ext - 1] = y(frames - 1, ext - 1);
          if (ext > 1) beta[(frames - 1) * ext + ext - 2] = y(frames - 1, ext - 2);
          for (std::size_t t = frames - 1; t-- > 0;) {
            for (std::size_t s = 0; s < ext; ++s) {
              double v = beta[(t + 1) * ext + s];
              if (s + 1 < ext) v = log_add(v, beta[(t + 1) * ext + s + 1]);
              if (can_skip(s)) v = log_add(v, beta[(t + 1) * ext + s + 2]);
              beta[t * ext + s] = v <= kLogZero ? kLogZero : v + y(t, s);
            }
          }
          // d(-log P)/d y_t(k) = -sum_{s: l'_s = k} exp(alpha + beta - y - log P)
          for (std::size_t t = 0; t < frames; ++t) {
            for (std::size_t s = 0; s < ext; ++s) {
              const double ab = a[t * ext + s] + beta[t * ext + s];
              if (ab <= kLogZero) continue;
              const double occ = std::exp(ab - y(t, s) - log_p);
              dp[0][t * vocab + static_cast<std::size_t>(lab[s])] -= d[0] * occ;
            }
          }
        };
      });
}

double ctc_brute_force(const Tensor& log_probs, std::span<const TokenId> target, TokenId blank) {
  if (log_probs.rank() != 2) {
    fail(ErrorCode::kDimension, "ctc_brute_force: log_probs must be T x V");
  }
  const std::size_t frames = log_probs.rows();
  const std::size_t vocab = log_probs.cols();
  double paths = 1.0;
  for (std::size_t t = 0; t < frames; ++t) paths *= static_cast<double>(vocab);
  if (paths > 1e6) {
    fail(ErrorCode::kInvalidArgument, "ctc_brute_force: V^T = " + std::to_string(paths) +
                                          " exceeds 1e6");
  }
  std::vector<std::size_t> path(frames, 0);
  std::vector<TokenId> collapsed;
  double log_total = kLogZero;
  bool any = false;
  for (;;) {
    collapsed.clear();
    TokenId prev = -1;
    double score = 0.0;
    for (std::size_t t = 0; t < frames; ++t) {
      const auto k = static_cast<TokenId>(path[t]);
      score += log_probs[t * vocab + path[t]];
      if (k != blank && k != prev) collapsed.push_back(k);
      prev = k;
    }
    if (std::equal(collapsed.begin(), collapsed.end(), target.begin(), target.end())) {
      log_total = any ? log_add(log_total, score) : score;
      any = true;
    }
    std::size_t t = 0;
    while (t < frames && ++path[t] == vocab) path[t++] = 0;
    if (t == frames) break;
  }
  if (!any) fail(ErrorCode::kInfeasible, "ctc_brute_force: no path collapses to the target");
  return -log_total;
}

Tensor ce_serialized(Tape& tape, const Tensor& log_probs, std::span<const TokenId> targets) {
  if (log_probs.rows() != targets.size()) {
    fail(ErrorCode::kDimension, "ce_serialized: " + std::to_string(log_probs.rows()) +
                                    " decoder steps for a label of length " +
                                    std::to_string(targets.size()));
  }
  const Tensor picked = pick(tape, log_probs, targets);
  return scale(tape, sum(tape, picked), -1.0 / static_cast<double>(targets.size()));
}

Assignment best_assignment(const std::vector<std::vector<double>>& cost) {
  const std::size_t n = cost.size();
  for (const auto& row : cost) {
    if (row.size() != n) fail(ErrorCode::kDimension, "best_assignment: cost matrix is not square");
  }
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Assignment best{perm, 0.0};
  bool first = true;
  do {
    double total = 0.0;
    for (std::size_t s = 0; s < n; ++s) total += cost[s][perm[s]];
    if (first || total < best.total) {
      best = {perm, total};
      first = false;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

PermutationResult upit_ctc(Tape& tape, std::span<const Tensor> streams,
                           std::span<const TokenSeq> labels, TokenId blank) {
  const std::size_t n = streams.size();
  if (n != labels.size() || n == 0) {
    fail(ErrorCode::kDimension, "upit_ctc: " + std::to_string(n) + " streams for " +
                                    std::to_string(labels.size()) + " labels");
  }
  if (n > 4) fail(ErrorCode::kInvalidArgument, "upit_ctc supports at most 4 speakers");
  std::vector<std::vector<Tensor>> pair(n);
  std::vector<std::vector<double>> cost(n, std::vector<double>(n));
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t j = 0; j < n; ++j) {
      pair[s].push_back(ctc_loss(tape, streams[s], labels[j], blank));
      cost[s][j] = pair[s][j].item();
    }
  }
  const Assignment best = best_assignment(cost);
  Tensor total = pair[0][best.permutation[0]];
  for (std::size_t s = 1; s < n; ++s) total = add(tape, total, pair[s][best.permutation[s]]);
  return {best.permutation, total};
}

Tensor encsep_ctc(Tape& tape, std::span<const Tensor> streams, std::span<const TokenSeq> labels,
                  TokenId blank) {
  if (streams.size() != labels.size() || streams.empty()) {
    fail(ErrorCode::kDimension, "encsep_ctc: " + std::to_string(streams.size()) +
                                    " streams for " + std::to_string(labels.size()) + " labels");
  }
  Tensor total = ctc_loss(tape, streams[0], labels[0], blank);
  for (std::size_t s = 1; s < streams.size(); ++s)
    total = add(tape, total, ctc_loss(tape, streams[s], labels[s], blank));
  return total;
}

Tensor hybrid(Tape& tape, const Tensor& loss_ctc, const Tensor& loss_ce, double weight) {
  if (!(weight >= 0.0 && weight <= 1.0)) {
    fail(ErrorCode::kInvalidArgument, "hybrid weight " + std::to_string(weight) +
                                          " outside [0, 1]");
  }
  return add(tape, scale(tape, loss_ctc, weight), scale(tape, loss_ce, 1.0 - weight));
}

}  // namespace sotsep
