// SPDX-License-Identifier: Apache-2.0

#ifndef SOTSEP_TOKENS_HPP
#define SOTSEP_TOKENS_HPP

#include <cstdint>
#include <vector>

namespace sotsep {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

// Reserved CTC blank id.
inline constexpr TokenId kBlankId = 0;

}  // namespace sotsep

#endif  // SOTSEP_TOKENS_HPP
