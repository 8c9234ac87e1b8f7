#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace treetrain {

using TokenId = std::int32_t;

// One rollout: token ids plus a per-token loss weight. weights[p] weighs the
// negative log-likelihood of tokens[p] given tokens[0..p); position 0 is never
// a prediction target, so its weight is ignored by training (prompt positions
// carry weight 0 by convention anyway).
struct TokenSequence {
  std::string seq_id;
  std::vector<TokenId> tokens;
  std::vector<double> weights;

  std::size_t length() const { return tokens.size(); }
};

}  // namespace treetrain
