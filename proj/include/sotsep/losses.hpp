// SPDX-License-Identifier: Apache-2.0
//
// Training objectives. Every loss takes log-probabilities (rows of a
// log_softmax) and returns a differentiable scalar on the given tape.

#ifndef SOTSEP_LOSSES_HPP
#define SOTSEP_LOSSES_HPP

#include <cstddef>
#include <span>
#include <vector>

#include "sotsep/autodiff.hpp"
#include "sotsep/tokens.hpp"

namespace sotsep {

// Stand-in for log(0) inside the CTC recursions.
inline constexpr double kLogZero = -1e30;

// Smallest frame count that admits `target`: one frame per label plus a
// separating blank between adjacent repeats.
std::size_t ctc_min_frames(std::span<const TokenId> target);

// -log P(target | log_probs) summed over all monotonic alignments, computed
// with log-space alpha/beta recursions. Throws kInfeasible when
// T < ctc_min_frames(target), kInvalidArgument if target contains blank.
Tensor ctc_loss(Tape& tape, const Tensor& log_probs, std::span<const TokenId> target,
                TokenId blank = kBlankId);

// Exhaustive V^T path enumeration; small instances only (V^T <= 1e6).
double ctc_brute_force(const Tensor& log_probs, std::span<const TokenId> target,
                       TokenId blank = kBlankId);

// Token-mean negative log-likelihood under teacher forcing.
Tensor ce_serialized(Tape& tape, const Tensor& log_probs, std::span<const TokenId> targets);

struct Assignment {
  std::vector<std::size_t> permutation;  // stream index -> label index
  double total = 0.0;
};

// Minimum-cost assignment over all S! permutations of a square cost matrix,
// summed in stream order. Ties go to the lexicographically smallest
// permutation.
Assignment best_assignment(const std::vector<std::vector<double>>& cost);

struct PermutationResult {
  std::vector<std::size_t> permutation;  // stream index -> label index
  Tensor total_loss;
};

// Permutation-invariant CTC; the gradient flows only through the chosen
// assignment. S <= 4.
PermutationResult upit_ctc(Tape& tape, std::span<const Tensor> streams,
                           std::span<const TokenSeq> labels, TokenId blank = kBlankId);

// Serialized-order CTC: stream s is scored against label s, no search.
Tensor encsep_ctc(Tape& tape, std::span<const Tensor> streams, std::span<const TokenSeq> labels,
                  TokenId blank = kBlankId);

// weight * ctc + (1 - weight) * ce, weight in [0, 1].
Tensor hybrid(Tape& tape, const Tensor& loss_ctc, const Tensor& loss_ce, double weight);

}  // namespace sotsep

#endif  // SOTSEP_LOSSES_HPP
