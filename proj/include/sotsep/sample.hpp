// SPDX-License-Identifier: Apache-2.0

#ifndef SOTSEP_SAMPLE_HPP
#define SOTSEP_SAMPLE_HPP

#include <string>
#include <vector>

#include "sotsep/autodiff.hpp"
#include "sotsep/labels.hpp"

namespace sotsep {

// One overlapped mixture with its references. `speakers` is kept in
// serialized (ascending offset) order so speakers[s] pairs with separator
// head s.
struct MixtureSample {
  Tensor features;  // T x F
  std::vector<SpeakerSegment> speakers;
  SerializedLabel label;
  std::string split;

  std::vector<TokenSeq> references() const {
    std::vector<TokenSeq> out;
    for (const auto& s : speakers) out.push_back(s.tokens);
    return out;
  }
};

}  // namespace sotsep

#endif  // SOTSEP_SAMPLE_HPP
