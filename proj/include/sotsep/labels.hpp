// SPDX-License-Identifier: Apache-2.0

#ifndef SOTSEP_LABELS_HPP
#define SOTSEP_LABELS_HPP

#include <cstddef>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sotsep/tokens.hpp"

namespace sotsep {

inline constexpr std::string_view kBlankToken = "<blank>";
inline constexpr std::string_view kSpeakerChangeToken = "<sc>";
inline constexpr std::string_view kSosToken = "<sos>";
inline constexpr std::string_view kEosToken = "<eos>";

// Ids: 0 = blank, then the sorted corpus tokens, then <sc>, <sos>, <eos>.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(const std::set<std::string>& corpus_tokens);

  std::size_t size() const { return tokens_.size(); }
  TokenId blank() const { return kBlankId; }
  TokenId sc() const { return sc_; }
  TokenId sos() const { return sc_ + 1; }
  TokenId eos() const { return sc_ + 2; }
  // Content tokens, in id order (ids 1..n).
  std::vector<std::string> content_tokens() const;

  TokenId id(std::string_view token) const;  // throws kInvalidArgument
  const std::string& token(TokenId id) const;

  // Whitespace-separated spelling, `<sc>` literal for speaker changes.
  TokenSeq encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, TokenId, std::less<>> ids_;
  TokenId sc_ = 0;
};

Vocabulary build_vocab(const std::set<std::string>& corpus_tokens);

struct SpeakerSegment {
  std::size_t start_offset = 0;  // frames
  TokenSeq tokens;
};

struct SerializedLabel {
  TokenSeq tokens;
  std::size_t speaker_count = 0;
};

// Transcripts ordered by start offset (ties by input index), joined with a
// single separator token.
SerializedLabel serialize(std::span<const SpeakerSegment> speakers, TokenId sc);

// Inverse of serialize; tolerates malformed hypotheses by dropping empty
// segments.
std::vector<TokenSeq> split_on_sc(std::span<const TokenId> tokens, TokenId sc);

struct EditStats {
  std::size_t distance = 0;
  std::size_t substitutions = 0;
  std::size_t insertions = 0;
  std::size_t deletions = 0;

  EditStats& operator+=(const EditStats& o) {
    distance += o.distance;
    substitutions += o.substitutions;
    insertions += o.insertions;
    deletions += o.deletions;
    return *this;
  }
};

// Unit-cost Levenshtein distance turning `source` into `target`; insertions
// add target tokens, deletions drop source tokens.
EditStats edit_distance(std::span<const TokenId> source, std::span<const TokenId> target);

enum class StreamMatching {
  kPermutation,  // minimise over all hyp/ref stream assignments
  kSerialized,   // hyp stream s scored against ref stream s
};

struct WerResult {
  double rate = 0.0;
  EditStats errors;                    // insertions are extra hypothesis tokens
  std::size_t reference_tokens = 0;
  std::vector<std::size_t> assignment;  // ref stream -> hyp stream (after padding)
  std::vector<EditStats> per_stream;    // indexed by ref stream (after padding)
};

// Pads the shorter side with empty streams, then scores the best assignment.
WerResult multispeaker_wer(std::span<const TokenSeq> hyp_streams,
                           std::span<const TokenSeq> ref_streams,
                           StreamMatching matching = StreamMatching::kPermutation);

}  // namespace sotsep

#endif  // SOTSEP_LABELS_HPP
