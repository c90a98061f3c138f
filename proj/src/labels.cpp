// SPDX-License-Identifier: Apache-2.0

#include "sotsep/labels.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include "sotsep/error.hpp"

namespace sotsep {

Vocabulary::Vocabulary(const std::set<std::string>& corpus_tokens) {
  const std::string reserved[] = {std::string(kBlankToken), std::string(kSpeakerChangeToken),
                                  std::string(kSosToken), std::string(kEosToken)};
  tokens_.push_back(reserved[0]);
  for (const std::string& t : corpus_tokens) {
    if (std::find(std::begin(reserved), std::end(reserved), t) != std::end(reserved)) {
      fail(ErrorCode::kInvalidArgument, "corpus token '" + t + "' collides with a reserved symbol");
    }
    if (t.empty() || t.find_first_of(" \t\r\n") != std::string::npos) {
      fail(ErrorCode::kInvalidArgument, "corpus tokens must be non-empty and whitespace-free");
    }
    tokens_.push_back(t);  // std::set iterates in sorted order
  }
  sc_ = static_cast<TokenId>(tokens_.size());
  for (std::size_t i = 1; i < 4; ++i) tokens_.push_back(reserved[i]);
  for (std::size_t i = 0; i < tokens_.size(); ++i) ids_.emplace(tokens_[i], static_cast<TokenId>(i));
}

std::vector<std::string> Vocabulary::content_tokens() const {
  return {tokens_.begin() + 1, tokens_.begin() + sc_};
}

TokenId Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(token);
  if (it == ids_.end()) fail(ErrorCode::kInvalidArgument, "unknown token '" + std::string(token) + "'");
  return it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    fail(ErrorCode::kInvalidArgument, "token id " + std::to_string(id) + " out of range");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

TokenSeq Vocabulary::encode(std::string_view text) const {
  TokenSeq out;
  std::istringstream in{std::string(text)};
  std::string tok;
  while (in >> tok) out.push_back(id(tok));
  return out;
}

std::string Vocabulary::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += token(ids[i]);
  }
  return out;
}

Vocabulary build_vocab(const std::set<std::string>& corpus_tokens) {
  return Vocabulary(corpus_tokens);
}

SerializedLabel serialize(std::span<const SpeakerSegment> speakers, TokenId sc) {
  if (speakers.empty()) fail(ErrorCode::kInvalidArgument, "serialize: no speakers");
  std::vector<std::size_t> order(speakers.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return speakers[a].start_offset < speakers[b].start_offset;
  });
  SerializedLabel label;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const TokenSeq& toks = speakers[order[k]].tokens;
    if (toks.empty()) {
      fail(ErrorCode::kInvalidArgument, "serialize: speaker " + std::to_string(order[k]) +
                                            " has an empty transcript");
    }
    if (std::find(toks.begin(), toks.end(), sc) != toks.end()) {
      fail(ErrorCode::kInvalidArgument, "serialize: transcript contains the separator token");
    }
    if (k) label.tokens.push_back(sc);
    label.tokens.insert(label.tokens.end(), toks.begin(), toks.end());
  }
  label.speaker_count = speakers.size();
  return label;
}

std::vector<TokenSeq> split_on_sc(std::span<const TokenId> tokens, TokenId sc) {
  std::vector<TokenSeq> out;
  TokenSeq cur;
  for (TokenId t : tokens) {
    if (t == sc) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(t);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  if (out.empty()) out.emplace_back();
  return out;
}

EditStats edit_distance(std::span<const TokenId> source, std::span<const TokenId> target) {
  const std::size_t n = source.size(), m = target.size();
  std::vector<std::size_t> dp((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return dp[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      const std::size_t diag = at(i - 1, j - 1) + (source[i - 1] == target[j - 1] ? 0 : 1);
      at(i, j) = std::min({diag, at(i - 1, j) + 1, at(i, j - 1) + 1});
    }
  }
  // Backtrace preferring match/substitution, then deletion, then insertion.
  EditStats st;
  st.distance = at(n, m);
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0) {
      const bool same = source[i - 1] == target[j - 1];
      if (at(i, j) == at(i - 1, j - 1) + (same ? 0 : 1)) {
        if (!same) ++st.substitutions;
        --i;
        --j;
        continue;
      }
    }
    if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
      ++st.deletions;
      --i;
    } else {
      ++st.insertions;
      --j;
    }
  }
  return st;
}

WerResult multispeaker_wer(std::span<const TokenSeq> hyp_streams,
                           std::span<const TokenSeq> ref_streams, StreamMatching matching) {
  if (ref_streams.empty()) fail(ErrorCode::kInvalidArgument, "multispeaker_wer: no reference streams");
  const std::size_t n = std::max(hyp_streams.size(), ref_streams.size());
  if (matching == StreamMatching::kPermutation && n > 8) {
    fail(ErrorCode::kInvalidArgument, "multispeaker_wer: more than 8 streams");
  }
  std::vector<TokenSeq> hyp(hyp_streams.begin(), hyp_streams.end());
  std::vector<TokenSeq> ref(ref_streams.begin(), ref_streams.end());
  hyp.resize(n);
  ref.resize(n);
  std::size_t ref_tokens = 0;
  for (const auto& r : ref) ref_tokens += r.size();
  if (ref_tokens == 0) fail(ErrorCode::kInvalidArgument, "multispeaker_wer: zero reference tokens");

  std::vector<std::vector<EditStats>> cost(n, std::vector<EditStats>(n));
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t h = 0; h < n; ++h) cost[r][h] = edit_distance(ref[r], hyp[h]);

  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<std::size_t> best = perm;
  if (matching == StreamMatching::kPermutation) {
    std::size_t best_total = 0;
    bool first = true;
    do {
      std::size_t total = 0;
      for (std::size_t r = 0; r < n; ++r) total += cost[r][perm[r]].distance;
      if (first || total < best_total) {
        best_total = total;
        best = perm;
        first = false;
      }
    } while (std::next_permutation(perm.begin(), perm.end()));
  }

  WerResult result;
  result.assignment = best;
  result.reference_tokens = ref_tokens;
  for (std::size_t r = 0; r < n; ++r) {
    result.per_stream.push_back(cost[r][best[r]]);
    result.errors += cost[r][best[r]];
  }
  result.rate = static_cast<double>(result.errors.distance) / static_cast<double>(ref_tokens);
  return result;
}

}  // namespace sotsep
